//! Binary checkpoints: config snapshot, named parameters and Adam state.
//!
//! Layout: magic `EDCK`, `u16` version, `u32` header length, a JSON header,
//! then for every parameter its values, first moments and second moments as
//! little-endian `f64`, in header order.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::SeqTensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u16,
    config: RunConfig,
    input_dim: usize,
    num_classes: usize,
    step: u64,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        input_dim: model.input_dim,
        num_classes: model.num_classes,
        step: model.step,
        adam_step: model.adam.step,
        tensors: model
            .store
            .names()
            .iter()
            .zip(model.store.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + json.len() + 24 * model.store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (i, t) in model.store.tensors().iter().enumerate() {
        for block in [t.data(), model.adam.m[i].data(), model.adam.v[i].data()] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let parse = |offset: usize, msg: String| Error::Parse { offset, msg };
    if bytes.len() < 10 {
        return Err(parse(bytes.len(), "truncated checkpoint header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(parse(0, "bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(parse(4, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = 10usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse(bytes.len(), "truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[10..body])?;

    let mut model = Model::new(header.config, header.input_dim, header.num_classes)?;
    if header.tensors.len() != model.store.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} tensors, architecture has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let mut offset = body;
    let mut take = |shape: &[usize]| -> Result<SeqTensor> {
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(parse(bytes.len(), "truncated checkpoint payload".into()));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = end;
        SeqTensor::new(shape.to_vec(), data)
    };
    for (i, e) in header.tensors.iter().enumerate() {
        if model.store.names()[i] != e.name || model.store.tensors()[i].shape() != e.shape.as_slice() {
            return Err(Error::Invalid(format!(
                "tensor {i} ({}) does not match the architecture",
                e.name
            )));
        }
        model.store.tensors_mut()[i] = take(&e.shape)?;
        model.adam.m[i] = take(&e.shape)?;
        model.adam.v[i] = take(&e.shape)?;
    }
    if offset != bytes.len() {
        return Err(parse(offset, "trailing bytes after checkpoint payload".into()));
    }
    model.step = header.step;
    model.adam.step = header.adam_step;
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let bytes = encode(model)?;
    // write-then-rename keeps the previous checkpoint intact on failure
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::LabelSequence;
    use crate::model::SamplerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model {
        let cfg = RunConfig {
            hidden: 8,
            encoder_layers: 2,
            decoder_blocks: 1,
            diffusion_steps: 50,
            delta_init: 10,
            delta_max: 10,
            ..RunConfig::default()
        };
        Model::new(cfg, 3, 2).unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs_and_state() {
        let mut m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = SeqTensor::randn(&[12, 3], &mut rng);
        let y = LabelSequence::new((0..12).map(|t| t / 6).collect(), 2).unwrap();
        for _ in 0..3 {
            m.training_step(&f, &y, &mut rng).unwrap();
        }
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back.step, 3);
        assert_eq!(back.adam.step, m.adam.step);
        assert_eq!(back.store.tensors(), m.store.tensors());
        let sc = m.cfg.sampler();
        let a = m
            .sample(&f, SamplerKind::Fixed, &sc, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = back
            .sample(&f, SamplerKind::Fixed, &sc, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(a.latent, b.latent);

        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let mut m2 = back;
        assert_eq!(
            m.training_step(&f, &y, &mut r1).unwrap(),
            m2.training_step(&f, &y, &mut r2).unwrap()
        );
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let bytes = encode(&small()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.extend_from_slice(&[0; 8]);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let m = small();
        save(&p, &m).unwrap();
        assert_eq!(load(&p).unwrap().store.tensors(), m.store.tensors());
    }
}
