//! Commands behind the `diffseg` binary.
//!
//! Every command is a plain function taking a resolved [`RunConfig`] and
//! explicit paths, so the binary stays a thin argument parser and tests can
//! drive the pipeline directly.

use diffseg::checkpoint;
use diffseg::config::RunConfig;
use diffseg::dataset::{self, Dataset};
use diffseg::metrics::{self, MetricReport};
use diffseg::model::{training_view, Model, SamplerKind};
use diffseg::rank::rank_diagnostic;
use diffseg::sampler::{SamplerConfig, Trajectory};
use diffseg::svg;
use diffseg::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_SUMMARY_FILE: &str = "bench_summary.json";
pub const RANK_FILE: &str = "rank.csv";

pub const LOSS_HEADER: [&str; 5] = ["step", "total", "ce", "smooth", "boundary"];
pub const TRAJECTORY_HEADER: [&str; 8] = [
    "video_id",
    "view",
    "call",
    "step",
    "next_step",
    "delta",
    "similarity",
    "wall_ms",
];
pub const SUMMARY_HEADER: [&str; 3] = ["video_id", "denoiser_calls", "wall_ms"];
pub const METRICS_HEADER: [&str; 9] = [
    "video_id",
    "F1_10",
    "F1_25",
    "F1_50",
    "edit",
    "acc",
    "avg",
    "denoiser_calls",
    "wall_ms",
];
pub const BENCH_HEADER: [&str; 11] = [
    "video_id",
    "sampler",
    "budget",
    "F1_10",
    "F1_25",
    "F1_50",
    "edit",
    "acc",
    "avg",
    "denoiser_calls",
    "wall_ms",
];
pub const RANK_HEADER: [&str; 6] = [
    "frames",
    "channels",
    "layers",
    "input_rank",
    "tdp_rank",
    "attention_rank",
];

/// Fixed step budgets compared by `bench`.
pub const BENCH_BUDGETS: [usize; 3] = [8, 16, 25];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Invalid(format!("csv: {other:?}")),
    }
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    Ok(w)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Independent noise stream per video so samplers see identical initial noise.
pub fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Training stream for a global step; resuming reproduces an uninterrupted run.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00_0000);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, Serialize)]
pub struct GenReport {
    pub videos: usize,
    pub files: Vec<PathBuf>,
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenReport> {
    cfg.validate()?;
    let data = dataset::generate_synthetic(&cfg.synthetic())?;
    let mut files = dataset::save_dataset(out, &data)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    files.push(PathBuf::from("config.json"));
    dataset::load_dataset(out)?;
    log::info!("wrote {} videos to {}", data.videos.len(), out.display());
    Ok(GenReport {
        videos: data.videos.len(),
        files,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub start_step: u64,
    pub final_step: u64,
    pub logged_rows: usize,
    pub last_loss: f64,
}

/// Trains until `cfg.train_steps` total steps, optionally resuming from a checkpoint.
///
/// On a non-finite loss the last good parameters are written before the error is returned.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let data = dataset::load_dataset(data_dir)?;
    let train: Vec<_> = data
        .split("train")
        .into_iter()
        .map(|v| Ok((v.features.to_tensor(), data.label_ids(v)?)))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::Invalid("no videos in the train split".into()));
    }
    let dim = data.feature_dim().expect("non-empty dataset");
    let mut model = match resume {
        Some(p) => {
            let m = checkpoint::load(p)?;
            if m.input_dim != dim || m.num_classes != data.classes.len() {
                return Err(Error::Invalid("checkpoint does not match the dataset".into()));
            }
            m
        }
        None => Model::new(cfg.clone(), dim, data.classes.len())?,
    };
    model.cfg.train_steps = cfg.train_steps;
    model.cfg.log_every = cfg.log_every;
    model.cfg.checkpoint_every = cfg.checkpoint_every;
    fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let loss_path = out.join(LOSS_FILE);
    let append = resume.is_some() && loss_path.is_file();
    let mut loss_log = if append {
        let f = fs::OpenOptions::new().append(true).open(&loss_path)?;
        csv::WriterBuilder::new().has_headers(false).from_writer(f)
    } else {
        let f = fs::File::create(&loss_path)?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(LOSS_HEADER).map_err(csv_err)?;
        w
    };
    let start = model.step;
    let (mut rows, mut window, mut sums, mut last) = (0usize, 0usize, [0.0f64; 4], f64::NAN);
    let seed = model.cfg.seed;
    while (model.step as usize) < cfg.train_steps {
        let step = model.step;
        let mut rng = step_rng(seed, step);
        let (f, y) = &train[step as usize % train.len()];
        let parts = if model.cfg.augment_train {
            let (vf, vy) = training_view(f, y, model.cfg.subsample_rate, &mut rng)?;
            model.training_step(&vf, &vy, &mut rng)
        } else {
            model.training_step(f, y, &mut rng)
        };
        let parts = match parts {
            Ok(p) => p,
            Err(e) => {
                loss_log.flush()?;
                checkpoint::save(&ckpt, &model)?;
                log::error!(
                    "training aborted at step {step}; last good checkpoint at {}",
                    ckpt.display()
                );
                return Err(e);
            }
        };
        for (s, v) in sums
            .iter_mut()
            .zip([parts.total, parts.ce, parts.smooth, parts.boundary])
        {
            *s += v;
        }
        window += 1;
        last = parts.total;
        if model.step % cfg.log_every as u64 == 0 || model.step as usize == cfg.train_steps {
            let mean = sums.map(|s| s / window as f64);
            loss_log
                .write_record([
                    model.step.to_string(),
                    fmt(mean[0]),
                    fmt(mean[1]),
                    fmt(mean[2]),
                    fmt(mean[3]),
                ])
                .map_err(csv_err)?;
            log::info!("step {} loss {:.5}", model.step, mean[0]);
            rows += 1;
            window = 0;
            sums = [0.0; 4];
        }
        if cfg.checkpoint_every > 0 && model.step % cfg.checkpoint_every as u64 == 0 {
            checkpoint::save(&ckpt, &model)?;
        }
    }
    loss_log.flush()?;
    checkpoint::save(&ckpt, &model)?;
    Ok(TrainReport {
        start_step: start,
        final_step: model.step,
        logged_rows: rows,
        last_loss: last,
    })
}

/// Loads a checkpoint and applies the run's inference settings to it.
pub fn load_model(path: &Path, cfg: Option<&RunConfig>) -> Result<Model> {
    let mut m = checkpoint::load(path)?;
    if let Some(c) = cfg {
        m.cfg = m.cfg.with_inference_from(c);
        m.cfg.validate()?;
    }
    Ok(m)
}

fn eval_videos<'d>(data: &'d Dataset, split: &str) -> Result<Vec<(usize, &'d dataset::VideoRecord)>> {
    let v: Vec<_> = data
        .videos
        .iter()
        .enumerate()
        .filter(|(_, v)| v.split == split)
        .collect();
    if v.is_empty() {
        return Err(Error::Invalid(format!("no videos in split {split:?}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct InferVideo {
    pub id: String,
    pub frames: usize,
    pub calls: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferReport {
    pub videos: Vec<InferVideo>,
    pub trajectory_rows: usize,
}

fn write_trajectory(w: &mut csv::Writer<fs::File>, id: &str, view: usize, t: &Trajectory) -> Result<usize> {
    for s in &t.steps {
        w.write_record([
            id.to_string(),
            view.to_string(),
            s.calls.to_string(),
            s.step.to_string(),
            s.next_step.to_string(),
            s.delta.to_string(),
            format!("{:.9}", s.similarity),
            fmt(s.wall_ms),
        ])
        .map_err(csv_err)?;
    }
    Ok(t.steps.len())
}

/// Writes `predictions/<id>.txt`, trajectories, a call summary and optional SVG timelines.
pub fn cmd_infer(model: &Model, data_dir: &Path, out: &Path, kind: SamplerKind, augment: bool) -> Result<InferReport> {
    let data = dataset::load_dataset(data_dir)?;
    let cfg = &model.cfg;
    let pred_dir = out.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    if cfg.svg {
        fs::create_dir_all(out.join("timelines"))?;
    }
    let mut traj = writer(&out.join(TRAJECTORY_FILE), &TRAJECTORY_HEADER)?;
    let mut summary = writer(&pred_dir.join(SUMMARY_FILE), &SUMMARY_HEADER)?;
    let sampler = cfg.sampler();
    let mut report = InferReport {
        videos: Vec::new(),
        trajectory_rows: 0,
    };
    for (i, v) in eval_videos(&data, &cfg.eval_split)? {
        let f = v.features.to_tensor();
        let t0 = Instant::now();
        let pred = model.predict(&f, kind, &sampler, augment, &mut video_rng(cfg.seed, i))?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        dataset::write_labels(&pred_dir.join(format!("{}.txt", v.id)), &data.names(&pred.labels)?)?;
        for (view, t) in pred.trajectories.iter().enumerate() {
            report.trajectory_rows += write_trajectory(&mut traj, &v.id, view, t)?;
        }
        summary
            .write_record([v.id.clone(), pred.calls.to_string(), fmt(wall_ms)])
            .map_err(csv_err)?;
        if cfg.svg {
            let gt = data.label_ids(v)?;
            let doc = svg::timeline(
                &[("ground truth", gt.ids()), ("prediction", &pred.labels)],
                data.classes.len(),
                960.0,
            );
            fs::write(out.join("timelines").join(format!("{}.svg", v.id)), doc)?;
        }
        log::info!("{}: {} calls, {:.1} ms", v.id, pred.calls, wall_ms);
        report.videos.push(InferVideo {
            id: v.id.clone(),
            frames: pred.labels.len(),
            calls: pred.calls,
            wall_ms,
        });
    }
    traj.flush()?;
    summary.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub report: Option<MetricReport>,
    pub calls: Option<usize>,
    pub wall_ms: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: Option<MetricReport>,
}

fn read_summary(pred_dir: &Path) -> Result<Vec<(String, usize, f64)>> {
    let path = pred_dir.join(SUMMARY_FILE);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            let bad = || Error::Invalid("malformed prediction summary row".into());
            Ok((
                rec.get(0).ok_or_else(bad)?.to_string(),
                rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
                rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            ))
        })
        .collect()
}

fn evaluate_one(data: &Dataset, v: &dataset::VideoRecord, pred_dir: &Path) -> Result<MetricReport> {
    let labels = dataset::read_labels(&pred_dir.join(format!("{}.txt", v.id)), v.frames())?;
    let ids = labels.iter().map(|n| data.class_id(n)).collect::<Result<Vec<_>>>()?;
    metrics::report(&ids, data.label_ids(v)?.ids())
}

/// Per-video metric rows plus a `mean` row; failing videos get a row of `NaN`s.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, data_dir: &Path, out: &Path) -> Result<EvalReport> {
    let data = dataset::load_dataset(data_dir)?;
    let summary = read_summary(pred_dir)?;
    fs::create_dir_all(out)?;
    let mut w = writer(&out.join(METRICS_FILE), &METRICS_HEADER)?;
    let mut rows = Vec::new();
    for (_, v) in eval_videos(&data, &cfg.eval_split)? {
        let extra = summary.iter().find(|s| s.0 == v.id);
        let (calls, wall) = (extra.map(|s| s.1), extra.map(|s| s.2));
        let opt = |x: Option<String>| x.unwrap_or_default();
        match evaluate_one(&data, v, pred_dir) {
            Ok(r) => {
                let mut rec = vec![v.id.clone()];
                rec.extend(r.values().iter().map(|&x| fmt(x)));
                rec.push(opt(calls.map(|c| c.to_string())));
                rec.push(opt(wall.map(fmt)));
                w.write_record(&rec).map_err(csv_err)?;
                rows.push(EvalRow {
                    id: v.id.clone(),
                    report: Some(r),
                    calls,
                    wall_ms: wall,
                    error: None,
                });
            }
            Err(e) => {
                log::error!("{}: {e}", v.id);
                let mut rec = vec![v.id.clone()];
                rec.extend(std::iter::repeat_n("NaN".to_string(), 6));
                rec.push(opt(calls.map(|c| c.to_string())));
                rec.push(opt(wall.map(fmt)));
                w.write_record(&rec).map_err(csv_err)?;
                rows.push(EvalRow {
                    id: v.id.clone(),
                    report: None,
                    calls,
                    wall_ms: wall,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let ok: Vec<MetricReport> = rows.iter().filter_map(|r| r.report).collect();
    let mean = MetricReport::mean(&ok);
    let mean_of = |f: &dyn Fn(&EvalRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut rec = vec!["mean".to_string()];
    match mean {
        Some(m) => rec.extend(m.values().iter().map(|&x| fmt(x))),
        None => rec.extend(std::iter::repeat_n("NaN".to_string(), 6)),
    }
    rec.push(mean_of(&|r| r.calls.map(|c| c as f64)).map(fmt).unwrap_or_default());
    rec.push(mean_of(&|r| r.wall_ms).map(fmt).unwrap_or_default());
    w.write_record(&rec).map_err(csv_err)?;
    w.flush()?;
    Ok(EvalReport { rows, mean })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub id: String,
    pub sampler: String,
    pub budget: Option<usize>,
    pub report: MetricReport,
    pub calls: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub fixed_calls: f64,
    pub adaptive_calls: f64,
    pub call_reduction_pct: f64,
    pub fixed_wall_ms: f64,
    pub adaptive_wall_ms: f64,
    pub fixed: MetricReport,
    pub adaptive: MetricReport,
    pub budgets: Vec<(usize, MetricReport)>,
    pub rank: diffseg::rank::RankReport,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn timed_run(
    model: &Model,
    f: &diffseg::SeqTensor,
    kind: SamplerKind,
    sampler: &SamplerConfig,
    seed: u64,
    index: usize,
    reps: usize,
) -> Result<(Vec<usize>, usize, f64)> {
    let mut times = Vec::with_capacity(reps);
    let mut result = None;
    for _ in 0..reps {
        let t0 = Instant::now();
        let p = model.predict(f, kind, sampler, model.cfg.augment, &mut video_rng(seed, index))?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        result = Some(p);
    }
    let p = result.expect("reps ≥ 1");
    Ok((p.labels, p.calls, median(times)))
}

/// Fixed vs adaptive comparison, the fixed step-budget sweep and the rank diagnostic.
pub fn cmd_bench(model: &Model, data_dir: &Path, out: &Path) -> Result<BenchSummary> {
    let data = dataset::load_dataset(data_dir)?;
    let cfg = &model.cfg;
    fs::create_dir_all(out)?;
    let mut w = writer(&out.join(BENCH_FILE), &BENCH_HEADER)?;
    let base = cfg.sampler();
    let mut plans: Vec<(String, SamplerKind, Option<usize>, SamplerConfig)> = vec![
        ("fixed".into(), SamplerKind::Fixed, None, base.clone()),
        ("adaptive".into(), SamplerKind::Adaptive, None, base.clone()),
    ];
    for budget in BENCH_BUDGETS {
        if budget > base.steps {
            continue;
        }
        let delta = match SamplerConfig::delta_for_budget(base.steps, budget) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipping budget {budget}: {e}");
                continue;
            }
        };
        let sc = SamplerConfig {
            delta_init: delta,
            delta_min: 1,
            delta_max: delta.max(base.delta_max),
            ..base.clone()
        };
        plans.push((format!("fixed-{budget}"), SamplerKind::Fixed, Some(budget), sc));
    }
    let mut rows: Vec<BenchRow> = Vec::new();
    for (i, v) in eval_videos(&data, &cfg.eval_split)? {
        let f = v.features.to_tensor();
        let gt = data.label_ids(v)?;
        for (name, kind, budget, sc) in &plans {
            let (labels, calls, wall_ms) = timed_run(model, &f, *kind, sc, cfg.seed, i, cfg.bench_reps)?;
            let report = metrics::report(&labels, gt.ids())?;
            let mut rec = vec![
                v.id.clone(),
                name.clone(),
                budget.map(|b| b.to_string()).unwrap_or_default(),
            ];
            rec.extend(report.values().iter().map(|&x| fmt(x)));
            rec.push(calls.to_string());
            rec.push(fmt(wall_ms));
            w.write_record(&rec).map_err(csv_err)?;
            rows.push(BenchRow {
                id: v.id.clone(),
                sampler: name.clone(),
                budget: *budget,
                report,
                calls,
                wall_ms,
            });
        }
    }
    let pick = |name: &str| -> (MetricReport, f64, f64) {
        let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.sampler == name).collect();
        let reports: Vec<MetricReport> = sel.iter().map(|r| r.report).collect();
        let n = sel.len() as f64;
        (
            MetricReport::mean(&reports).expect("at least one video"),
            sel.iter().map(|r| r.calls as f64).sum::<f64>() / n,
            sel.iter().map(|r| r.wall_ms).sum::<f64>() / n,
        )
    };
    for (name, _, budget, _) in &plans {
        let (m, calls, wall) = pick(name);
        let mut rec = vec![
            "mean".to_string(),
            name.clone(),
            budget.map(|b| b.to_string()).unwrap_or_default(),
        ];
        rec.extend(m.values().iter().map(|&x| fmt(x)));
        rec.push(fmt(calls));
        rec.push(fmt(wall));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    let rank = rank_diagnostic(64, 64, 8, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut rw = writer(&out.join(RANK_FILE), &RANK_HEADER)?;
    rw.write_record(
        [
            rank.frames,
            rank.channels,
            rank.layers,
            rank.input_rank,
            rank.tdp_rank,
            rank.attention_rank,
        ]
        .map(|v| v.to_string()),
    )
    .map_err(csv_err)?;
    rw.flush()?;

    let (fixed, fixed_calls, fixed_wall) = pick("fixed");
    let (adaptive, adaptive_calls, adaptive_wall) = pick("adaptive");
    let budgets = plans
        .iter()
        .filter_map(|(name, _, b, _)| b.map(|b| (b, pick(name).0)))
        .collect();
    let summary = BenchSummary {
        fixed_calls,
        adaptive_calls,
        call_reduction_pct: 100.0 * (1.0 - adaptive_calls / fixed_calls),
        fixed_wall_ms: fixed_wall,
        adaptive_wall_ms: adaptive_wall,
        fixed,
        adaptive,
        budgets,
        rank,
    };
    fs::write(out.join(BENCH_SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    log::info!(
        "fixed {:.1} calls, adaptive {:.1} calls ({:.1}% fewer)",
        fixed_calls,
        adaptive_calls,
        summary.call_reduction_pct
    );
    Ok(summary)
}
