//! Central finite-difference check of the analytic gradients.

use serde::Serialize;

use crate::config::TrainConfig;
use crate::datastore::TokenEmbeddingSample;
use crate::error::Result;
use crate::loss::{backward, total_loss, Gradients};
use crate::model::{forward, HeadParameters, PARAM_NAMES};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    /// Largest relative gap between the estimates at `h` and `h/2`.
    pub step_sensitivity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
    /// Set when halving `h` moves the estimate by more than `tol`, i.e. the
    /// truncation error of the difference quotient dominates.
    pub truncation_dominated: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Total objective of `batch` under `params`, recomputing the top-K selections.
pub fn objective(params: &HeadParameters, batch: &[&TokenEmbeddingSample], config: &TrainConfig) -> Result<f64> {
    let traces = batch.iter().map(|s| forward(s, params)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<_> = batch.iter().map(|s| s.target).collect();
    Ok(total_loss(&traces, &targets, &params.proto_class, config)?.total)
}

pub fn analytic_gradients(
    params: &HeadParameters,
    batch: &[&TokenEmbeddingSample],
    config: &TrainConfig,
) -> Result<Gradients> {
    let traces = batch.iter().map(|s| forward(s, params)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<_> = batch.iter().map(|s| s.target).collect();
    let loss = total_loss(&traces, &targets, &params.proto_class, config)?;
    backward(batch, &traces, &loss, params, config)
}

/// Central-difference estimate of every coordinate of every tensor.
pub fn numeric_gradients(
    params: &HeadParameters,
    batch: &[&TokenEmbeddingSample],
    config: &TrainConfig,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(PARAM_NAMES.len());
    for ti in 0..PARAM_NAMES.len() {
        let len = params.tensors()[ti].len();
        let mut est = Vec::with_capacity(len);
        for i in 0..len {
            let orig = params.tensors()[ti][i];
            work.tensors_mut()[ti][i] = orig + h;
            let up = objective(&work, batch, config)?;
            work.tensors_mut()[ti][i] = orig - h;
            let down = objective(&work, batch, config)?;
            work.tensors_mut()[ti][i] = orig;
            est.push((up - down) / (2.0 * h));
        }
        out.push(est);
    }
    Ok(out)
}

/// Compares analytic gradients with central differences at step `h`.
///
/// Passes iff every coordinate's relative error is below `tol`.
pub fn grad_check_with(
    params: &HeadParameters,
    batch: &[&TokenEmbeddingSample],
    config: &TrainConfig,
    h: f64,
    tol: f64,
    analytic: &Gradients,
) -> Result<GradCheckReport> {
    let coarse = numeric_gradients(params, batch, config, h)?;
    let fine = numeric_gradients(params, batch, config, h / 2.0)?;
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    for (ti, name) in PARAM_NAMES.iter().enumerate() {
        let a = analytic.tensors()[ti];
        let mut check = TensorCheck {
            name,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            step_sensitivity: 0.0,
        };
        for i in 0..a.len() {
            let rel = relative_error(a[i], coarse[ti][i]);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
            check.max_abs_error = check.max_abs_error.max((a[i] - coarse[ti][i]).abs());
            check.step_sensitivity = check
                .step_sensitivity
                .max(relative_error(coarse[ti][i], fine[ti][i]));
        }
        tensors.push(check);
    }
    let passed = tensors.iter().all(|t| t.max_rel_error < tol);
    let truncation_dominated = tensors.iter().any(|t| t.step_sensitivity > tol);
    Ok(GradCheckReport {
        h,
        tol,
        tensors,
        passed,
        truncation_dominated,
    })
}

pub fn grad_check(
    params: &HeadParameters,
    batch: &[&TokenEmbeddingSample],
    config: &TrainConfig,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(params, batch, config)?;
    grad_check_with(params, batch, config, h, tol, &analytic)
}

/// A small random problem for exercising the gradient check.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub params: HeadParameters,
    pub batch: Vec<TokenEmbeddingSample>,
    pub config: TrainConfig,
}

impl RandomInstance {
    pub fn batch_refs(&self) -> Vec<&TokenEmbeddingSample> {
        self.batch.iter().collect()
    }
}

/// D=8, T≤6, N=6, K=2, two classes (one in regression mode), batch of 4,
/// with all parameters including the classifier drawn at random.
pub fn random_instance(
    seed: u64,
    mode: crate::datastore::TaskMode,
    activation: crate::config::SimActivation,
) -> Result<RandomInstance> {
    use crate::datastore::{Target, TaskMode};
    use crate::numerics::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let (dim, n, classes, batch_len) = (8, 6, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda0 = rng.random_range(0.1..0.8);
    let lambda1 = rng.random_range(0.0..1.0 - lambda0);
    let config = TrainConfig {
        num_prototypes: n,
        k: 2,
        loss_mode: mode,
        sim_activation: activation,
        ..Default::default()
    }
    .with_lambdas(lambda0, lambda1, 1.0 - lambda0 - lambda1);
    let mut params = crate::model::init_params_with_rng(&config, dim, classes, &mut rng)?;
    for w in params.w_h.as_mut_slice() {
        *w = rng.random_range(-1.5..1.5);
    }
    for w in params.w_psi.as_mut_slice().iter_mut().chain(params.w_nu.iter_mut()) {
        *w = rng.random_range(-1.0..1.0);
    }
    let batch = (0..batch_len)
        .map(|sample_id| {
            let t = rng.random_range(1..=6);
            let data = (0..t * dim).map(|_| rng.random_range(-1.0..2.0)).collect();
            let target = match mode {
                TaskMode::Classification => Target::Class(rng.random_range(0..classes)),
                TaskMode::Regression => Target::Value(rng.random_range(-2.0..2.0)),
            };
            Ok(TokenEmbeddingSample {
                sample_id,
                tokens: Matrix::from_vec(t, dim, data)?,
                target,
                token_texts: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomInstance { params, batch, config })
}
