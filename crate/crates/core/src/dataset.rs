//! Synthetic videos, on-disk formats and inference-time augmentation.
//!
//! On disk a dataset directory holds:
//!
//! - `features/<id>.edaf`: magic `EDAF`, `u16` version 1, `u32` frames,
//!   `u32` dim, then frame-major little-endian `f32` values;
//! - `labels/<id>.txt`: one class name per frame;
//! - `mapping.txt`: `<id> <class name>` per line;
//! - `manifest.json`: array of `{id, feature_path, label_path, split}`.

use crate::diffusion::LabelSequence;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::SeqTensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const FEATURE_MAGIC: &[u8; 4] = b"EDAF";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

/// Frame-major `L×D` single-precision features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return dim_err(format!("feature sequence must be non-empty, got {frames}×{dim}"));
        }
        if values.len() != frames * dim {
            return dim_err(format!("{} values for {frames}×{dim} features", values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {i} is not finite")));
        }
        Ok(Self { frames, dim, values })
    }

    /// Rounds each entry of a `[L, D]` tensor to `f32`.
    pub fn from_tensor(t: &SeqTensor) -> Result<Self> {
        if !t.is_matrix() {
            return dim_err("features must be [L, D]");
        }
        Self::new(t.frames(), t.channels(), t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> SeqTensor {
        SeqTensor::matrix(self.frames, self.dim, self.values.iter().map(|&v| v as f64).collect())
            .expect("validated shape")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: &str| Error::Parse {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 4 {
            return Err(parse(bytes.len(), "truncated magic"));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(parse(0, "bad magic"));
        }
        if bytes.len() < 6 {
            return Err(parse(bytes.len(), "truncated version"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FEATURE_VERSION {
            return Err(parse(4, &format!("unsupported version {version}")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(parse(bytes.len(), "truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (frames, dim) = (u32_at(6), u32_at(10));
        if frames == 0 {
            return Err(parse(6, "zero frames"));
        }
        if dim == 0 {
            return Err(parse(10, "zero feature dim"));
        }
        let expected = (frames as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
        if (bytes.len() as u128) < expected {
            return Err(parse(
                bytes.len(),
                &format!("truncated payload, expected {expected} bytes"),
            ));
        }
        if (bytes.len() as u128) > expected {
            return Err(parse(expected as usize, "trailing bytes after payload"));
        }
        let mut values = Vec::with_capacity(frames * dim);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(parse(HEADER_LEN + 4 * i, "non-finite feature value"));
            }
            values.push(v);
        }
        Self::new(frames, dim, values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: FeatureSequence,
    pub labels: Vec<String>,
    pub split: String,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.frames() {
            return dim_err(format!(
                "video {}: {} labels for {} frames",
                self.id,
                self.labels.len(),
                self.features.frames()
            ));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.features.frames()
    }
}

/// Videos plus the class-name table shared by all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Invalid(format!("unknown class name {name:?}")))
    }

    pub fn label_ids(&self, video: &VideoRecord) -> Result<LabelSequence> {
        let ids = video
            .labels
            .iter()
            .map(|n| self.class_id(n))
            .collect::<Result<Vec<_>>>()?;
        LabelSequence::new(ids, self.classes.len())
    }

    pub fn names(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.classes
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("class id {i} out of range")))
            })
            .collect()
    }

    pub fn split(&self, split: &str) -> Vec<&VideoRecord> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return config_err("a dataset needs at least two classes");
        }
        let dim = self.feature_dim();
        for v in &self.videos {
            v.validate()?;
            if Some(v.features.dim()) != dim {
                return dim_err(format!("video {} has feature dim {}", v.id, v.features.dim()));
            }
            self.label_ids(v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenConfig {
    pub num_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub blur_radius: usize,
    /// Trailing videos tagged `test`; the rest are `train`.
    pub test_videos: usize,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            num_videos: 3,
            min_len: 128,
            max_len: 128,
            num_classes: 5,
            feature_dim: 16,
            min_segment: 8,
            max_segment: 32,
            separation: 4.0,
            noise_std: 1.0,
            blur_radius: 2,
            test_videos: 0,
            seed: 7,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return config_err("need at least two classes");
        }
        if self.min_segment < 1 || self.min_segment > self.max_segment {
            return config_err("segment bounds must satisfy 1 ≤ min ≤ max");
        }
        if self.max_segment + 1 < 2 * self.min_segment {
            return config_err("max segment must be at least 2·min − 1 so every length can be tiled");
        }
        if self.min_len < self.min_segment || self.min_len > self.max_len {
            return config_err("video length bounds must satisfy min segment ≤ min ≤ max");
        }
        if self.feature_dim == 0 {
            return config_err("feature dim must be positive");
        }
        if self.test_videos > self.num_videos {
            return config_err("more test videos than videos");
        }
        if !(self.noise_std >= 0.0 && self.separation.is_finite() && self.noise_std.is_finite()) {
            return config_err("noise std must be a non-negative finite number");
        }
        Ok(())
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|k| format!("action_{k}")).collect()
}

/// Segment durations tiling `len`, each within `[min, max]`.
fn sample_durations<R: Rng + ?Sized>(len: usize, min: usize, max: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rem = len;
    while rem > 0 {
        // keep the remainder tileable: either empty or at least `min`
        let d = if rem <= max {
            rem
        } else {
            rng.random_range(min..=max.min(rem - min))
        };
        out.push(d);
        rem -= d;
    }
    out
}

/// First-order action chain: each segment moves to a different class uniformly.
fn sample_labels<R: Rng + ?Sized>(cfg: &SyntheticGenConfig, len: usize, rng: &mut R) -> Vec<usize> {
    let mut labels = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..cfg.num_classes);
    for (i, d) in sample_durations(len, cfg.min_segment, cfg.max_segment, rng)
        .into_iter()
        .enumerate()
    {
        if i > 0 {
            let step = rng.random_range(1..cfg.num_classes);
            cur = (cur + step) % cfg.num_classes;
        }
        labels.extend(std::iter::repeat_n(cur, d));
    }
    labels
}

/// Class mean vectors with pairwise distance `separation·√2` when `D ≥ C`.
pub fn class_means<R: Rng + ?Sized>(cfg: &SyntheticGenConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let d = cfg.feature_dim;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..cfg.num_classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if basis.len() < d {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= n);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|a| a * cfg.separation).collect())
        .collect()
}

/// Centered moving average over `±radius` frames, truncated at the edges.
pub fn blur(x: &SeqTensor, radius: usize) -> SeqTensor {
    if radius == 0 {
        return x.clone();
    }
    let (l, c) = (x.frames(), x.channels());
    let mut out = SeqTensor::zeros(&[l, c]);
    for t in 0..l {
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(l - 1);
        let n = (hi - lo + 1) as f64;
        for u in lo..=hi {
            for (o, v) in out.row_mut(t).iter_mut().zip(x.row(u)) {
                *o += v / n;
            }
        }
    }
    out
}

/// Unblurred features `μ_{y_t} + noise` for a label sequence.
pub fn raw_features<R: Rng + ?Sized>(labels: &[usize], means: &[Vec<f64>], noise_std: f64, rng: &mut R) -> SeqTensor {
    let d = means[0].len();
    let mut data = Vec::with_capacity(labels.len() * d);
    for &y in labels {
        for &m in &means[y] {
            data.push(m + noise_std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    SeqTensor::matrix(labels.len(), d, data).expect("shape")
}

/// Seed-deterministic synthetic dataset.
pub fn generate_synthetic(cfg: &SyntheticGenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = class_names(cfg.num_classes);
    let means = class_means(cfg, &mut rng);
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for i in 0..cfg.num_videos {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let ids = sample_labels(cfg, len, &mut rng);
        let raw = raw_features(&ids, &means, cfg.noise_std, &mut rng);
        let features = FeatureSequence::from_tensor(&blur(&raw, cfg.blur_radius))?;
        let split = if i + cfg.test_videos >= cfg.num_videos {
            "test"
        } else {
            "train"
        };
        videos.push(VideoRecord {
            id: format!("video_{i:03}"),
            features,
            labels: ids.iter().map(|&k| classes[k].clone()).collect(),
            split: split.to_string(),
        });
    }
    Ok(Dataset { classes, videos })
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::decode(&fs::read(path)?)
}

pub fn write_features(path: &Path, f: &FeatureSequence) -> Result<()> {
    Ok(fs::write(path, f.encode())?)
}

pub fn write_labels(path: &Path, labels: &[String]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 12);
    for l in labels {
        if l.is_empty() || l.contains(['\n', '\r']) {
            return Err(Error::Invalid(format!("label {l:?} cannot be written on one line")));
        }
        text.push_str(l);
        text.push('\n');
    }
    Ok(fs::write(path, text)?)
}

pub fn parse_labels(text: &str) -> Result<Vec<String>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let name = line.trim();
            if name.is_empty() {
                Err(Error::Parse {
                    offset: i,
                    msg: "empty label line".into(),
                })
            } else {
                Ok(name.to_string())
            }
        })
        .collect()
}

/// Reads a label file that must contain exactly `frames` lines.
pub fn read_labels(path: &Path, frames: usize) -> Result<Vec<String>> {
    let labels = parse_labels(&fs::read_to_string(path)?)?;
    if labels.len() != frames {
        return dim_err(format!(
            "{}: {} label lines for {frames} frames",
            path.display(),
            labels.len()
        ));
    }
    Ok(labels)
}

pub fn format_mapping(classes: &[String]) -> String {
    classes.iter().enumerate().map(|(i, c)| format!("{i} {c}\n")).collect()
}

/// Parses `<id> <name>` lines; ids must be exactly `0..n`.
pub fn parse_mapping(text: &str) -> Result<Vec<String>> {
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            offset: i,
            msg: msg.to_string(),
        };
        let (id, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| bad("expected `<id> <name>`"))?;
        let id: usize = id.parse().map_err(|_| bad("class id is not an integer"))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(bad("empty class name"));
        }
        entries.push((id, name.to_string()));
    }
    entries.sort_by_key(|e| e.0);
    for (expect, (id, _)) in entries.iter().enumerate() {
        if *id != expect {
            return Err(Error::Invalid(format!(
                "mapping ids are not contiguous from 0 (missing {expect})"
            )));
        }
    }
    Ok(entries.into_iter().map(|e| e.1).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    pub label_path: String,
    pub split: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAPPING_FILE: &str = "mapping.txt";

pub fn save_video(dir: &Path, video: &VideoRecord) -> Result<ManifestEntry> {
    video.validate()?;
    if video.id.is_empty() || video.id.contains(['/', '\\']) || video.id.starts_with('.') {
        return Err(Error::Invalid(format!(
            "video id {:?} is not a valid file stem",
            video.id
        )));
    }
    fs::create_dir_all(dir.join("features"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let entry = ManifestEntry {
        id: video.id.clone(),
        feature_path: format!("features/{}.edaf", video.id),
        label_path: format!("labels/{}.txt", video.id),
        split: video.split.clone(),
    };
    write_features(&dir.join(&entry.feature_path), &video.features)?;
    write_labels(&dir.join(&entry.label_path), &video.labels)?;
    Ok(entry)
}

pub fn load_video(dir: &Path, entry: &ManifestEntry) -> Result<VideoRecord> {
    let features = read_features(&dir.join(&entry.feature_path))?;
    let labels = read_labels(&dir.join(&entry.label_path), features.frames())?;
    Ok(VideoRecord {
        id: entry.id.clone(),
        features,
        labels,
        split: entry.split.clone(),
    })
}

/// Writes every file of the dataset and returns their paths relative to `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    data.validate()?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut manifest = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        let e = save_video(dir, v)?;
        written.push(PathBuf::from(&e.feature_path));
        written.push(PathBuf::from(&e.label_path));
        manifest.push(e);
    }
    fs::write(dir.join(MAPPING_FILE), format_mapping(&data.classes))?;
    written.push(PathBuf::from(MAPPING_FILE));
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    written.push(PathBuf::from(MANIFEST_FILE));
    Ok(written)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let classes = parse_mapping(&fs::read_to_string(dir.join(MAPPING_FILE))?)?;
    let videos = read_manifest(dir)?
        .iter()
        .map(|e| load_video(dir, e))
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset { classes, videos };
    data.validate()?;
    Ok(data)
}

/// Splits a sequence into `rate` interleaved sub-sequences; `sub_o` holds items `o, o+R, …`.
pub fn augment_subsample<T: Clone>(items: &[T], rate: usize) -> Result<Vec<Vec<T>>> {
    if rate == 0 {
        return config_err("subsample rate must be positive");
    }
    Ok((0..rate)
        .map(|o| items.iter().skip(o).step_by(rate).cloned().collect())
        .collect())
}

/// Frame-subsampled feature tensors; empty offsets (when `L < R`) are dropped by callers.
pub fn subsample_features(x: &SeqTensor, rate: usize) -> Result<Vec<SeqTensor>> {
    if rate == 0 {
        return config_err("subsample rate must be positive");
    }
    Ok((0..rate)
        .map(|o| {
            let rows: Vec<usize> = (o..x.frames()).step_by(rate).collect();
            x.select_rows(&rows)
        })
        .collect())
}

/// Inverse of [`augment_subsample`]: `out[t] = subs[t mod R][t div R]`.
pub fn recombine<T: Clone>(subs: &[Vec<T>], len: usize, rate: usize) -> Result<Vec<T>> {
    if rate == 0 || subs.len() != rate {
        return dim_err(format!("expected {rate} sub-sequences, got {}", subs.len()));
    }
    for (o, s) in subs.iter().enumerate() {
        let expect = len.saturating_sub(o).div_ceil(rate);
        if s.len() != expect {
            return dim_err(format!("sub-sequence {o} has {} items, expected {expect}", s.len()));
        }
    }
    Ok((0..len).map(|t| subs[t % rate][t / rate].clone()).collect())
}

/// Sliding median over class ids with edge replication.
pub fn median_filter_labels(labels: &[usize], window: usize) -> Result<Vec<usize>> {
    if window.is_multiple_of(2) {
        return config_err(format!("median window must be odd, got {window}"));
    }
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let r = window / 2;
    let n = labels.len();
    let mut buf = Vec::with_capacity(window);
    Ok((0..n)
        .map(|t| {
            buf.clear();
            buf.extend((0..window).map(|k| labels[(t + k).saturating_sub(r).min(n - 1)]));
            buf.sort_unstable();
            buf[r]
        })
        .collect())
}
