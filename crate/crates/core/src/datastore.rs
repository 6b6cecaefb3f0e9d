//! PLM1: the on-disk interchange format for frozen-encoder token embeddings.
//!
//! Layout (little-endian throughout):
//!
//! | field        | type                      |
//! |--------------|---------------------------|
//! | magic        | `b"PLM1"`                 |
//! | version      | u32 = 1                   |
//! | flags        | u32 (bit 0 regression, bit 1 token texts) |
//! | D            | u32                       |
//! | num_classes  | u32 (1 in regression mode)|
//! | num_samples  | u64                       |
//!
//! followed by one record per sample: label `u32` (or target `f32` in
//! regression mode), `T: u32`, `T×D` `f32` row-major, and when the text flag
//! is set `T` length-prefixed (`u32`) UTF-8 strings.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PLM1_MAGIC: &[u8; 4] = b"PLM1";
pub const PLM1_VERSION: u32 = 1;
pub const PLM1_HEADER_LEN: usize = 28;

const FLAG_REGRESSION: u32 = 1;
const FLAG_TEXTS: u32 = 1 << 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Classification,
    Regression,
}

/// Supervision attached to a sample: a class index or a scalar regression target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    /// Class used for prototype bookkeeping. Regression samples all belong to class 0.
    pub fn class(&self) -> usize {
        match *self {
            Target::Class(c) => c,
            Target::Value(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSample {
    pub sample_id: usize,
    /// `T×D` token embeddings, one row per token.
    pub tokens: Matrix,
    pub target: Target,
    pub token_texts: Option<Vec<String>>,
}

impl TokenEmbeddingSample {
    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TokenEmbeddingSample>,
    pub dim: usize,
    pub num_classes: usize,
    pub mode: TaskMode,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        samples: Vec<TokenEmbeddingSample>,
        dim: usize,
        num_classes: usize,
        mode: TaskMode,
    ) -> Result<Self> {
        let ds = Self {
            samples,
            dim,
            num_classes,
            mode,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_texts(&self) -> bool {
        self.samples.iter().any(|s| s.token_texts.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("embedding dimension D must be positive".into()));
        }
        match self.mode {
            TaskMode::Regression if self.num_classes != 1 => {
                return Err(Error::Validation(format!(
                    "regression datasets carry exactly one class, header says {}",
                    self.num_classes
                )))
            }
            TaskMode::Classification if self.num_classes == 0 => {
                return Err(Error::Validation("class count must be positive".into()))
            }
            _ => {}
        }
        let texts = self.samples.first().is_some_and(|s| s.token_texts.is_some());
        for s in &self.samples {
            if s.num_tokens() == 0 {
                return Err(Error::Validation(format!("sample {} has no tokens", s.sample_id)));
            }
            if s.dim() != self.dim {
                return Err(Error::Validation(format!(
                    "sample {} has D={}, dataset D={}",
                    s.sample_id,
                    s.dim(),
                    self.dim
                )));
            }
            if !s.tokens.is_finite() {
                return Err(Error::Validation(format!(
                    "sample {} has non-finite embeddings",
                    s.sample_id
                )));
            }
            match (self.mode, s.target) {
                (TaskMode::Classification, Target::Class(c)) if c >= self.num_classes => {
                    return Err(Error::Validation(format!(
                        "sample {} label {c} out of range for {} classes",
                        s.sample_id, self.num_classes
                    )))
                }
                (TaskMode::Classification, Target::Class(_)) => {}
                (TaskMode::Regression, Target::Value(v)) if !v.is_finite() => {
                    return Err(Error::Validation(format!(
                        "sample {} has non-finite target",
                        s.sample_id
                    )))
                }
                (TaskMode::Regression, Target::Value(_)) => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "sample {} target kind does not match dataset mode {:?}",
                        s.sample_id, self.mode
                    )))
                }
            }
            match &s.token_texts {
                Some(t) if t.len() != s.num_tokens() => {
                    return Err(Error::Validation(format!(
                        "sample {} has {} token texts for {} tokens",
                        s.sample_id,
                        t.len(),
                        s.num_tokens()
                    )))
                }
                Some(_) if !texts => {
                    return Err(Error::Validation("token texts must be present on all samples or none".into()))
                }
                None if texts => {
                    return Err(Error::Validation("token texts must be present on all samples or none".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Serializes a dataset to PLM1 bytes.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.is_empty() {
        return Err(Error::Format("refusing to write a dataset with no samples".into()));
    }
    dataset.validate()?;
    let texts = dataset.has_texts();
    let mut flags = 0u32;
    if dataset.mode == TaskMode::Regression {
        flags |= FLAG_REGRESSION;
    }
    if texts {
        flags |= FLAG_TEXTS;
    }
    let mut out = Vec::with_capacity(PLM1_HEADER_LEN);
    out.extend_from_slice(PLM1_MAGIC);
    out.extend_from_slice(&PLM1_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&u32_field(dataset.dim, "D")?.to_le_bytes());
    out.extend_from_slice(&u32_field(dataset.num_classes, "num_classes")?.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for s in &dataset.samples {
        match s.target {
            Target::Class(c) => out.extend_from_slice(&u32_field(c, "label")?.to_le_bytes()),
            Target::Value(v) => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
        out.extend_from_slice(&u32_field(s.num_tokens(), "T")?.to_le_bytes());
        for &x in s.tokens.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        if let Some(tt) = &s.token_texts {
            for t in tt {
                out.extend_from_slice(&u32_field(t.len(), "text length")?.to_le_bytes());
                out.extend_from_slice(t.as_bytes());
            }
        }
    }
    Ok(out)
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u32")))
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Cursor over a byte buffer that reports the offset of any short read.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated payload at offset {}: need {n} bytes for {what}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != PLM1_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != PLM1_VERSION {
        return Err(Error::Format(format!("unsupported PLM1 version {version}")));
    }
    let flags = r.u32("flags")?;
    if flags & !(FLAG_REGRESSION | FLAG_TEXTS) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let mode = if flags & FLAG_REGRESSION != 0 {
        TaskMode::Regression
    } else {
        TaskMode::Classification
    };
    let texts = flags & FLAG_TEXTS != 0;
    let dim = r.u32("D")? as usize;
    let num_classes = r.u32("num_classes")? as usize;
    let num_samples = r.u64("num_samples")?;
    if dim == 0 {
        return Err(Error::Format("header declares D = 0".into()));
    }
    // Each record needs at least 8 + 4·D bytes; bound the allocation by what is on disk.
    let min_record = 8 + 4 * dim;
    if num_samples > (r.remaining() / min_record) as u64 + 1 {
        return Err(Error::Format(format!(
            "truncated payload at offset {}: header declares {num_samples} samples, only {} bytes follow",
            r.offset(),
            r.remaining()
        )));
    }
    let mut samples = Vec::with_capacity(num_samples as usize);
    for sample_id in 0..num_samples as usize {
        let target = match mode {
            TaskMode::Classification => Target::Class(r.u32("label")? as usize),
            TaskMode::Regression => Target::Value(r.f32("target")? as f64),
        };
        let t = r.u32("T")? as usize;
        if t == 0 {
            return Err(Error::Format(format!(
                "sample {sample_id} at offset {} declares T = 0",
                r.offset() - 4
            )));
        }
        let raw = r.take(
            t.checked_mul(dim)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("sample {sample_id}: T×D overflows")))?,
            "embeddings",
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tokens = Matrix::from_vec(t, dim, data).map_err(|e| {
            Error::Validation(format!("sample {sample_id}: {e}"))
        })?;
        let token_texts = if texts {
            let mut tt = Vec::with_capacity(t);
            for _ in 0..t {
                let len = r.u32("text length")? as usize;
                let at = r.offset();
                let raw = r.take(len, "token text")?;
                let s = std::str::from_utf8(raw).map_err(|_| {
                    Error::Format(format!("invalid UTF-8 in token text at offset {at}"))
                })?;
                tt.push(s.to_owned());
            }
            Some(tt)
        } else {
            None
        };
        samples.push(TokenEmbeddingSample {
            sample_id,
            tokens,
            target,
            token_texts,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after last sample at offset {}",
            r.remaining(),
            r.offset()
        )));
    }
    Dataset::new(samples, dim, num_classes, mode)
}

/// Splits `0..len` into batches. With `shuffle` the order is a seeded permutation.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample(id: usize, t: usize, d: usize, label: usize, fill: f64) -> TokenEmbeddingSample {
        TokenEmbeddingSample {
            sample_id: id,
            tokens: Matrix::from_vec(t, d, (0..t * d).map(|i| fill + i as f64 * 0.25).collect())
                .unwrap(),
            target: Target::Class(label),
            token_texts: None,
        }
    }

    #[test]
    fn empty_dataset_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.plm1");
        let ds = Dataset::new(vec![], 2, 2, TaskMode::Classification).unwrap();
        assert!(matches!(write_dataset(&ds, &path), Err(Error::Format(_))));
        assert!(!path.exists());
    }

    #[test]
    fn single_sample_byte_count() {
        let ds = Dataset::new(vec![sample(0, 1, 2, 1, 0.5)], 2, 2, TaskMode::Classification)
            .unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        // header 28 + label 4 + T 4 + 1·2·4 floats
        assert_eq!(bytes.len(), 28 + 4 + 4 + 8);
        assert_eq!(&bytes[..4], b"PLM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1);
    }

    #[test]
    fn bad_magic() {
        let err = decode_dataset(b"XXXX\x01\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_second_sample() {
        let ds = Dataset::new(
            vec![sample(0, 2, 3, 0, 0.0), sample(1, 2, 3, 1, 1.0)],
            3,
            2,
            TaskMode::Classification,
        )
        .unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let one_record = 4 + 4 + 2 * 3 * 4;
        let cut = &bytes[..PLM1_HEADER_LEN + one_record];
        let err = decode_dataset(cut).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains("offset 60"), "{msg}");
    }

    #[test]
    fn label_out_of_range_is_validation_error() {
        let ds = Dataset {
            samples: vec![sample(0, 1, 2, 0, 0.0)],
            dim: 2,
            num_classes: 2,
            mode: TaskMode::Classification,
        };
        let mut bytes = encode_dataset(&ds).unwrap();
        bytes[PLM1_HEADER_LEN..PLM1_HEADER_LEN + 4].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn texts_and_regression_round_trip() {
        let mut s = sample(0, 2, 2, 0, 0.5);
        s.target = Target::Value(1.25);
        s.token_texts = Some(vec!["héllo".into(), "".into()]);
        let ds = Dataset::new(vec![s], 2, 1, TaskMode::Regression).unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn random_dataset_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 7;
        let samples = (0..50)
            .map(|id| {
                let t = rng.random_range(1..9);
                // values representable in f32 so the widening round trip is the identity
                let data = (0..t * d).map(|_| rng.random::<f32>() as f64 * 4.0 - 2.0).collect();
                TokenEmbeddingSample {
                    sample_id: id,
                    tokens: Matrix::from_vec(t, d, data).unwrap(),
                    target: Target::Class(rng.random_range(0..3)),
                    token_texts: None,
                }
            })
            .collect();
        let ds = Dataset::new(samples, d, 3, TaskMode::Classification).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.plm1");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            let ab: Vec<u64> = a.tokens.as_slice().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.tokens.as_slice().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn batches_unshuffled() {
        assert_eq!(
            make_batches(5, 2, 0, false).unwrap(),
            vec![vec![0, 1], vec![2, 3], vec![4]]
        );
        assert!(matches!(make_batches(5, 0, 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn batches_shuffled_deterministic_and_covering() {
        let a = make_batches(1000, 64, 42, true).unwrap();
        let b = make_batches(1000, 64, 42, true).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        assert_ne!(all, (0..1000).collect::<Vec<_>>());
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }
}
