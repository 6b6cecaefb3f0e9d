//! Training configuration shared by the model, loss, trainer and CLI.

use serde::{Deserialize, Serialize};

use crate::datastore::TaskMode;
use crate::error::{Error, Result};

/// How a squared distance is turned into a similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SimActivation {
    /// `log((d² + 1) / (d² + ε))`
    #[default]
    LogRatio,
    /// `1 / (1 + d²)`
    Reciprocal,
}

impl std::str::FromStr for SimActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-ratio" => Ok(Self::LogRatio),
            "reciprocal" => Ok(Self::Reciprocal),
            other => Err(Error::Config(format!(
                "sim_activation: unknown value {other:?} (expected log-ratio | reciprocal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total prototype count N.
    pub num_prototypes: usize,
    /// Prototypes pulled/pushed per sample by the cohesion and separation terms.
    pub k: usize,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub loss_mode: TaskMode,
    pub sim_activation: SimActivation,
    pub eps_sim: f64,
    /// Attention hidden width; `None` means "same as D".
    pub attn_dim: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_prototypes: 10,
            k: 1,
            lambda0: 0.3,
            lambda1: 0.35,
            lambda2: 0.35,
            lr: 1e-3,
            batch_size: 128,
            epochs: 40,
            seed: 0,
            shuffle: true,
            loss_mode: TaskMode::Classification,
            sim_activation: SimActivation::LogRatio,
            eps_sim: 1e-4,
            attn_dim: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda0, self.lambda1, self.lambda2]
    }

    pub fn with_lambdas(mut self, l0: f64, l1: f64, l2: f64) -> Self {
        self.lambda0 = l0;
        self.lambda1 = l1;
        self.lambda2 = l2;
        self
    }

    pub fn attention_width(&self, dim: usize) -> usize {
        self.attn_dim.unwrap_or(dim)
    }

    /// The class count the prototype layer is built for.
    pub fn effective_classes(&self, num_classes: usize) -> usize {
        match self.loss_mode {
            TaskMode::Classification => num_classes,
            TaskMode::Regression => 1,
        }
    }

    /// Prototypes per class, `n = N / |C|`.
    pub fn prototypes_per_class(&self, num_classes: usize) -> Result<usize> {
        let c = self.effective_classes(num_classes);
        if c == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if self.num_prototypes == 0 || !self.num_prototypes.is_multiple_of(c) {
            return Err(Error::Config(format!(
                "num_prototypes N={} is not a positive multiple of the class count {c}",
                self.num_prototypes
            )));
        }
        Ok(self.num_prototypes / c)
    }

    pub fn validate_lambdas(&self) -> Result<()> {
        let l = self.lambdas();
        if l.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!(
                "lambda simplex violation: weights {l:?} must be nonnegative"
            )));
        }
        let sum: f64 = l.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "lambda simplex violation: lambda0 + lambda1 + lambda2 = {sum}, must equal 1"
            )));
        }
        Ok(())
    }

    /// Checks everything that can be checked once the class count is known.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.validate_lambdas()?;
        let n = self.prototypes_per_class(num_classes)?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k > n {
            return Err(Error::Config(format!(
                "k={} exceeds the {n} prototypes per class",
                self.k
            )));
        }
        if self.loss_mode == TaskMode::Classification && self.k > self.num_prototypes - n {
            return Err(Error::Config(format!(
                "k={} exceeds the {} other-class prototypes",
                self.k,
                self.num_prototypes - n
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.eps_sim.is_finite() && self.eps_sim > 0.0 && self.eps_sim < 1.0) {
            return Err(Error::Config(format!(
                "eps_sim must lie in (0, 1), got {}",
                self.eps_sim
            )));
        }
        if self.attn_dim == Some(0) {
            return Err(Error::Config("attn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
