//! Single-file checkpoint container: a JSON manifest (configs, iteration,
//! tensor names/shapes/dtypes/offsets, RNG position) followed by
//! little-endian IEEE-754 payloads. Save→load→resume is bit-exact in
//! double precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::TrainConfig;
use crate::graph::{Shape, Tensor};
use crate::render::{Model, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CSRCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Offset into the payload, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    train: TrainConfig,
    iteration: u64,
    adam_t: u64,
    rng_seed: u64,
    /// ChaCha word position, serialized as decimal to stay JSON-safe.
    rng_word_pos: String,
    tensors: Vec<TensorRecord>,
}

/// Everything needed to resume training exactly where it stopped.
pub struct CheckpointState {
    pub model: Model,
    pub adam: Adam,
    pub train: TrainConfig,
    pub iteration: u64,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    train: &TrainConfig,
    adam: &Adam,
    iteration: u64,
    rng_seed: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::with_capacity(model.params.total_len() * 3);
    let mut push = |tensors: &mut Vec<TensorRecord>, name: String, shape: Vec<usize>, data: &[f64]| {
        tensors.push(TensorRecord {
            name,
            shape,
            dtype: "f64".into(),
            offset: payload.len(),
            len: data.len(),
        });
        payload.extend_from_slice(data);
    };
    for (id, entry) in model.params.iter() {
        let shape = (0..entry.value.shape().ndim())
            .map(|d| entry.value.shape().dim(d))
            .collect::<Vec<_>>();
        push(
            &mut tensors,
            format!("param/{}", entry.name),
            shape.clone(),
            entry.value.data(),
        );
        push(
            &mut tensors,
            format!("adam_m/{}", entry.name),
            shape.clone(),
            &adam.m[id.index()],
        );
        push(
            &mut tensors,
            format!("adam_v/{}", entry.name),
            shape,
            &adam.v[id.index()],
        );
    }
    let manifest = Manifest {
        model: model.config,
        train: train.clone(),
        iteration,
        adam_t: adam.t,
        rng_seed,
        rng_word_pos: rng.get_word_pos().to_string(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for v in &payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::format("checkpoint manifest truncated"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
    let payload_bytes = &bytes[16 + manifest_len..];
    if payload_bytes.len() % 8 != 0 {
        return Err(Error::format("checkpoint payload not 8-byte aligned"));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let fetch = |name: &str| -> Result<(&TensorRecord, &[f64])> {
        let record = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))?;
        if record.dtype != "f64" {
            return Err(Error::format(format!(
                "tensor {name} has dtype {}, expected f64",
                record.dtype
            )));
        }
        let end = record.offset + record.len;
        if end > payload.len() {
            return Err(Error::format(format!("tensor {name} overruns payload")));
        }
        Ok((record, &payload[record.offset..end]))
    };

    let mut model = Model::init(manifest.model)?;
    let mut adam = Adam::new(&model.params);
    adam.t = manifest.adam_t;
    let ids: Vec<_> = model
        .params
        .iter()
        .map(|(id, e)| (id, e.name.clone(), e.value.shape()))
        .collect();
    for (id, name, shape) in ids {
        let (record, data) = fetch(&format!("param/{name}"))?;
        if record.len != shape.len() {
            return Err(Error::format(format!(
                "tensor param/{name} has {} values, expected {}",
                record.len,
                shape.len()
            )));
        }
        *model.params.value_mut(id) = Tensor::new(shape_from(&record.shape, shape)?, data.to_vec());
        let (_, m) = fetch(&format!("adam_m/{name}"))?;
        adam.m[id.index()] = m.to_vec();
        let (_, v) = fetch(&format!("adam_v/{name}"))?;
        adam.v[id.index()] = v.to_vec();
    }

    let word_pos: u128 = manifest
        .rng_word_pos
        .parse()
        .map_err(|_| Error::format("bad rng word position"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.rng_seed);
    rng.set_word_pos(word_pos);

    Ok(CheckpointState {
        model,
        adam,
        train: manifest.train,
        iteration: manifest.iteration,
        rng_seed: manifest.rng_seed,
        rng,
    })
}

fn shape_from(dims: &[usize], expected: Shape) -> Result<Shape> {
    let shape = match dims.len() {
        1 => Shape::d1(dims[0]),
        2 => Shape::d2(dims[0], dims[1]),
        3 => Shape::d3(dims[0], dims[1], dims[2]),
        4 => Shape::d4(dims[0], dims[1], dims[2], dims[3]),
        n => return Err(Error::format(format!("unsupported tensor rank {n}"))),
    };
    if shape != expected {
        return Err(Error::format(format!(
            "tensor shape {shape} does not match model shape {expected}"
        )));
    }
    Ok(shape)
}
