//! PLMC checkpoints.
//!
//! Layout (little-endian): magic `b"PLMC"`, version `u32`, metadata length
//! `u32`, UTF-8 JSON metadata, then the tensors `W_ψ, b_ψ, W_ν, P, W_h` each
//! as `rows: u32, cols: u32, rows·cols × f64`, then for each of those five
//! tensors its Adam state as `step: u64` followed by the `m` and `v` tensors
//! in the same framing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::datastore::{ByteReader, TaskMode};
use crate::error::{Error, Result};
use crate::model::{HeadParameters, Similarity, PARAM_NAMES};
use crate::numerics::{AdamState, Matrix};

pub const PLMC_MAGIC: &[u8; 4] = b"PLMC";
pub const PLMC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParameters,
    /// One state per tensor, in [`PARAM_NAMES`] order.
    pub adam: Vec<AdamState>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Position of the trainer's RNG stream (ChaCha8 word offset).
    pub rng_word_pos: u128,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    seed: u64,
    epoch: usize,
    rng_word_pos: String,
    dim: usize,
    attn_dim: usize,
    num_prototypes: usize,
    num_classes: usize,
    mode: TaskMode,
    similarity: Similarity,
    proto_class: Vec<usize>,
    tensors: Vec<String>,
    adam_hyper: Vec<[f64; 4]>,
}

fn put_tensor(out: &mut Vec<u8>, rows: usize, cols: usize, data: &[f64]) {
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_tensor(r: &mut ByteReader<'_>, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let at = r.offset();
    let got = (r.u32(name)? as usize, r.u32(name)? as usize);
    if got != (rows, cols) {
        return Err(Error::Format(format!(
            "tensor {name} at offset {at}: shape {got:?}, metadata says ({rows}, {cols})"
        )));
    }
    (0..rows * cols).map(|_| r.f64(name)).collect()
}

fn shapes(params: &HeadParameters) -> [(usize, usize); 5] {
    let (da, d) = (params.attn_dim(), params.dim());
    [
        (da, d),
        (da, 1),
        (da, 1),
        (params.num_prototypes(), d),
        (params.num_prototypes(), params.num_classes()),
    ]
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    if ckpt.adam.len() != PARAM_NAMES.len() {
        return Err(Error::Consistency(format!(
            "checkpoint needs {} Adam states, got {}",
            PARAM_NAMES.len(),
            ckpt.adam.len()
        )));
    }
    let meta = Metadata {
        config: ckpt.config.clone(),
        seed: ckpt.config.seed,
        epoch: ckpt.epoch,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        dim: p.dim(),
        attn_dim: p.attn_dim(),
        num_prototypes: p.num_prototypes(),
        num_classes: p.num_classes(),
        mode: p.mode,
        similarity: p.similarity,
        proto_class: p.proto_class.clone(),
        tensors: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        adam_hyper: ckpt.adam.iter().map(|a| [a.beta1, a.beta2, a.eps, a.lr]).collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(PLMC_MAGIC);
    out.extend_from_slice(&PLMC_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let shapes = shapes(p);
    for (t, &(r, c)) in p.tensors().iter().zip(&shapes) {
        put_tensor(&mut out, r, c, t);
    }
    for (a, &(r, c)) in ckpt.adam.iter().zip(&shapes) {
        if a.m.len() != r * c || a.v.len() != r * c {
            return Err(Error::Consistency("Adam moment shape does not match its tensor".into()));
        }
        out.extend_from_slice(&a.step.to_le_bytes());
        put_tensor(&mut out, r, c, &a.m);
        put_tensor(&mut out, r, c, &a.v);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != PLMC_MAGIC {
        return Err(Error::Format("bad magic: not a PLMC checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != PLMC_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {PLMC_VERSION})"
        )));
    }
    let len = r.u32("metadata length")? as usize;
    let meta: Metadata = serde_json::from_slice(r.take(len, "metadata")?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let rng_word_pos = meta
        .rng_word_pos
        .parse::<u128>()
        .map_err(|e| Error::Format(format!("rng_word_pos: {e}")))?;
    let (da, d, n, c) = (meta.attn_dim, meta.dim, meta.num_prototypes, meta.num_classes);
    let shapes = [(da, d), (da, 1), (da, 1), (n, d), (n, c)];
    let mut tensors = Vec::with_capacity(5);
    for (name, &(rows, cols)) in PARAM_NAMES.iter().zip(&shapes) {
        tensors.push(get_tensor(&mut r, name, rows, cols)?);
    }
    let mut adam = Vec::with_capacity(5);
    for ((name, &(rows, cols)), hyper) in PARAM_NAMES.iter().zip(&shapes).zip(&meta.adam_hyper) {
        let step = r.u64("adam step")?;
        let m = get_tensor(&mut r, name, rows, cols)?;
        let v = get_tensor(&mut r, name, rows, cols)?;
        adam.push(AdamState {
            step,
            m,
            v,
            beta1: hyper[0],
            beta2: hyper[1],
            eps: hyper[2],
            lr: hyper[3],
        });
    }
    if adam.len() != 5 {
        return Err(Error::Format("checkpoint metadata lists too few Adam states".into()));
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().unwrap();
    let params = HeadParameters {
        w_psi: Matrix::from_vec(da, d, next())?,
        b_psi: next(),
        w_nu: next(),
        prototypes: Matrix::from_vec(n, d, next())?,
        w_h: Matrix::from_vec(n, c, next())?,
        proto_class: meta.proto_class,
        similarity: meta.similarity,
        mode: meta.mode,
    };
    params
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint parameters: {e}")))?;
    Ok(Checkpoint {
        params,
        adam,
        config: meta.config,
        epoch: meta.epoch,
        rng_word_pos,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
