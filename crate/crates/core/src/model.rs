//! Forward pass of the prototype head: token attention pooling, prototype
//! similarities and the bias-free linear classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SimActivation, TrainConfig};
use crate::datastore::{TaskMode, TokenEmbeddingSample};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_distance_sq, softmax, Matrix};

/// Similarity activation together with its smoothing constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub activation: SimActivation,
    pub eps: f64,
}

impl Similarity {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            activation: config.sim_activation,
            eps: config.eps_sim,
        }
    }

    /// Similarity for a squared distance. Strictly decreasing on `[0, ∞)`.
    pub fn value(&self, dist_sq: f64) -> f64 {
        match self.activation {
            SimActivation::LogRatio => ((dist_sq + 1.0) / (dist_sq + self.eps)).ln(),
            SimActivation::Reciprocal => 1.0 / (1.0 + dist_sq),
        }
    }

    /// d(similarity)/d(dist_sq).
    pub fn derivative(&self, dist_sq: f64) -> f64 {
        match self.activation {
            SimActivation::LogRatio => 1.0 / (dist_sq + 1.0) - 1.0 / (dist_sq + self.eps),
            SimActivation::Reciprocal => {
                let r = 1.0 / (1.0 + dist_sq);
                -r * r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    /// Attention projection ψ, `D_a × D`.
    pub w_psi: Matrix,
    pub b_psi: Vec<f64>,
    /// Token scoring vector, length `D_a`.
    pub w_nu: Vec<f64>,
    /// Prototype matrix, `N × D`.
    pub prototypes: Matrix,
    pub proto_class: Vec<usize>,
    /// Classifier, `N × |C|`, no bias.
    pub w_h: Matrix,
    pub similarity: Similarity,
    pub mode: TaskMode,
}

/// Names of the trainable tensors, in checkpoint and gradient order.
pub const PARAM_NAMES: [&str; 5] = ["w_psi", "b_psi", "w_nu", "prototypes", "w_h"];

impl HeadParameters {
    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn attn_dim(&self) -> usize {
        self.w_psi.rows()
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w_h.cols()
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        self.prototypes.row(j)
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w_psi.as_slice(),
            &self.b_psi,
            &self.w_nu,
            self.prototypes.as_slice(),
            self.w_h.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_psi.as_mut_slice(),
            &mut self.b_psi,
            &mut self.w_nu,
            self.prototypes.as_mut_slice(),
            self.w_h.as_mut_slice(),
        ]
    }

    /// Checks shapes, the equal-per-class prototype allocation, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (da, d) = self.w_psi.shape();
        let n = self.num_prototypes();
        let c = self.num_classes();
        if self.b_psi.len() != da || self.w_nu.len() != da {
            return Err(Error::Dimension(format!(
                "attention vectors must have length D_a={da}"
            )));
        }
        if self.prototypes.cols() != d {
            return Err(Error::Dimension(format!(
                "prototypes have width {}, attention expects D={d}",
                self.prototypes.cols()
            )));
        }
        if self.w_h.rows() != n || self.proto_class.len() != n {
            return Err(Error::Dimension(format!(
                "classifier/proto_class must have N={n} rows"
            )));
        }
        if c == 0 || !n.is_multiple_of(c) {
            return Err(Error::Config(format!("N={n} is not a multiple of |C|={c}")));
        }
        let mut counts = vec![0usize; c];
        for &k in &self.proto_class {
            if k >= c {
                return Err(Error::Index(format!("prototype class {k} out of range")));
            }
            counts[k] += 1;
        }
        if counts.iter().any(|&k| k != n / c) {
            return Err(Error::Config(format!(
                "prototypes per class must all equal {}, got {counts:?}",
                n / c
            )));
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Initializes a head for data of width `dim` with `num_classes` classes.
pub fn init_params(
    config: &TrainConfig,
    dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<HeadParameters> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with_rng(config, dim, num_classes, &mut rng)
}

/// Draw order: `W_ψ`, `b_ψ`, `W_ν` (uniform ±1/√D_a), then prototypes (uniform `[0, 1)`).
pub fn init_params_with_rng<R: Rng>(
    config: &TrainConfig,
    dim: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<HeadParameters> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let classes = config.effective_classes(num_classes);
    let per_class = config.prototypes_per_class(num_classes)?;
    let n = config.num_prototypes;
    let da = config.attention_width(dim);
    if da == 0 {
        return Err(Error::Config("attn_dim must be positive".into()));
    }
    let bound = 1.0 / (da as f64).sqrt();
    let mut uniform = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-bound..bound)).collect()
    };
    let w_psi = Matrix::from_vec(da, dim, uniform(da * dim))?;
    let b_psi = uniform(da);
    let w_nu = uniform(da);
    let prototypes = Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.random::<f64>()).collect())?;
    let proto_class: Vec<usize> = (0..n).map(|j| j / per_class).collect();
    let mut w_h = Matrix::zeros(n, classes);
    for (j, &cls) in proto_class.iter().enumerate() {
        for c in 0..classes {
            w_h.set(j, c, if c == cls { 1.0 } else { -0.5 });
        }
    }
    Ok(HeadParameters {
        w_psi,
        b_psi,
        w_nu,
        prototypes,
        proto_class,
        w_h,
        similarity: Similarity::from_config(config),
        mode: config.loss_mode,
    })
}

/// Everything computed on the way from token embeddings to class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `tanh(W_ψ h_t + b_ψ)`, `T × D_a`.
    pub hidden: Matrix,
    pub alpha: Vec<f64>,
    /// Attention-pooled encoding S.
    pub pooled: Vec<f64>,
    pub dist_sq: Vec<f64>,
    /// Prototype-space embedding M.
    pub sims: Vec<f64>,
    pub logits: Vec<f64>,
    /// Softmax of the logits; `None` in regression mode.
    pub probs: Option<Vec<f64>>,
}

impl ForwardTrace {
    /// Predicted class (`argmax` of the logits).
    pub fn predicted(&self) -> usize {
        crate::numerics::argmax(&self.logits)
    }
}

fn check_sample_dim(sample: &TokenEmbeddingSample, params: &HeadParameters) -> Result<()> {
    if sample.dim() != params.dim() {
        return Err(Error::Dimension(format!(
            "sample {} has D={}, head expects D={}",
            sample.sample_id,
            sample.dim(),
            params.dim()
        )));
    }
    if sample.num_tokens() == 0 {
        return Err(Error::Dimension(format!("sample {} has no tokens", sample.sample_id)));
    }
    Ok(())
}

/// Token attention: returns `(hidden, alpha, S)`.
pub fn attend_full(
    sample: &TokenEmbeddingSample,
    params: &HeadParameters,
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    check_sample_dim(sample, params)?;
    let da = params.attn_dim();
    let t = sample.num_tokens();
    let mut hidden = Matrix::zeros(t, da);
    let mut scores = Vec::with_capacity(t);
    for (ti, h) in sample.tokens.iter_rows().enumerate() {
        let row = hidden.row_mut(ti);
        for (a, out) in row.iter_mut().enumerate() {
            *out = (dot(params.w_psi.row(a), h) + params.b_psi[a]).tanh();
        }
        scores.push(dot(row, &params.w_nu));
    }
    let alpha = softmax(&scores)?;
    let mut pooled = vec![0.0; params.dim()];
    for (h, &w) in sample.tokens.iter_rows().zip(&alpha) {
        for (s, x) in pooled.iter_mut().zip(h) {
            *s += w * x;
        }
    }
    Ok((hidden, alpha, pooled))
}

/// Attention weights and pooled encoding for one sample.
pub fn attend(sample: &TokenEmbeddingSample, params: &HeadParameters) -> Result<(Vec<f64>, Vec<f64>)> {
    attend_full(sample, params).map(|(_, a, s)| (a, s))
}

/// Squared distances from `pooled` to every prototype, and their similarities.
pub fn similarities(pooled: &[f64], params: &HeadParameters) -> Result<(Vec<f64>, Vec<f64>)> {
    let dist_sq = params
        .prototypes
        .iter_rows()
        .map(|p| l2_distance_sq(pooled, p))
        .collect::<Result<Vec<_>>>()?;
    let sims = dist_sq.iter().map(|&d| params.similarity.value(d)).collect();
    Ok((dist_sq, sims))
}

/// Class logits `z_c = Σ_j M_j W_h[j][c]` with the masked prototypes' weights zeroed.
///
/// Summation runs over prototype index in ascending order.
pub fn logits(sims: &[f64], params: &HeadParameters, mask: Option<&[usize]>) -> Result<Vec<f64>> {
    let n = params.num_prototypes();
    if sims.len() != n {
        return Err(Error::Dimension(format!(
            "similarity vector has {} entries, head has {n} prototypes",
            sims.len()
        )));
    }
    let mut masked = vec![false; n];
    for &j in mask.unwrap_or(&[]) {
        if j >= n {
            return Err(Error::Index(format!("mask index {j} out of range for N={n}")));
        }
        masked[j] = true;
    }
    let mut z = vec![0.0; params.num_classes()];
    for j in 0..n {
        if masked[j] {
            continue;
        }
        for (zc, w) in z.iter_mut().zip(params.w_h.row(j)) {
            *zc += sims[j] * w;
        }
    }
    Ok(z)
}

pub fn forward(sample: &TokenEmbeddingSample, params: &HeadParameters) -> Result<ForwardTrace> {
    let (hidden, alpha, pooled) = attend_full(sample, params)?;
    let (dist_sq, sims) = similarities(&pooled, params)?;
    let logits = logits(&sims, params, None)?;
    let probs = match params.mode {
        TaskMode::Classification => Some(softmax(&logits)?),
        TaskMode::Regression => None,
    };
    Ok(ForwardTrace {
        hidden,
        alpha,
        pooled,
        dist_sq,
        sims,
        logits,
        probs,
    })
}
