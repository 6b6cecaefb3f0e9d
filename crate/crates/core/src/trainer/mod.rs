//! Deterministic mini-batch training with Adam.
//!
//! All randomness comes from one ChaCha8 stream seeded by `config.seed`:
//! parameter initialization draws first, then each epoch draws one `u64`
//! that seeds that epoch's batch shuffle. A checkpoint records the stream
//! position, so resuming replays exactly the draws an uninterrupted run
//! would have made.

pub mod checkpoint;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::datastore::{make_batches, Dataset, Target, TaskMode, TokenEmbeddingSample};
use crate::error::{Error, Result};
use crate::loss::{prediction_loss, sample_backward, total_loss, Gradients};
use crate::model::{forward, init_params_with_rng, ForwardTrace, HeadParameters};
use crate::numerics::{adam_step, AdamState};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub coh: f64,
    pub sep: f64,
    pub total: f64,
    /// Evaluation accuracy (classification) or MSE (regression).
    pub eval_metric: f64,
    pub eval_metric_name: &'static str,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClassCount {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub mean_ce: Option<f64>,
    pub mse: Option<f64>,
    pub per_class: Vec<ClassCount>,
}

impl EvalMetrics {
    /// Accuracy in classification mode, MSE in regression mode.
    pub fn headline(&self) -> (&'static str, f64) {
        match (self.accuracy, self.mse) {
            (Some(a), _) => ("accuracy", a),
            (None, Some(m)) => ("mse", m),
            _ => ("none", f64::NAN),
        }
    }
}

pub fn evaluate(params: &HeadParameters, dataset: &Dataset) -> Result<EvalMetrics> {
    if dataset.mode != params.mode {
        return Err(Error::Config(format!(
            "dataset mode {:?} does not match head mode {:?}",
            dataset.mode, params.mode
        )));
    }
    if dataset.dim != params.dim() {
        return Err(Error::Dimension(format!(
            "dataset D={} but head expects D={}",
            dataset.dim,
            params.dim()
        )));
    }
    let traces = dataset
        .samples
        .iter()
        .map(|s| forward(s, params))
        .collect::<Result<Vec<_>>>()?;
    let count = dataset.len();
    let mut per_class = vec![ClassCount { total: 0, correct: 0 }; params.num_classes()];
    match params.mode {
        TaskMode::Classification => {
            let mut ce = 0.0;
            let mut correct = 0;
            for (s, tr) in dataset.samples.iter().zip(&traces) {
                let label = s.target.class();
                if label >= per_class.len() {
                    return Err(Error::Index(format!(
                        "label {label} out of range for a {}-class head",
                        per_class.len()
                    )));
                }
                ce += prediction_loss(tr, s.target)?;
                let hit = tr.predicted() == label;
                per_class[label].total += 1;
                if hit {
                    per_class[label].correct += 1;
                    correct += 1;
                }
            }
            Ok(EvalMetrics {
                samples: count,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
                mean_ce: (count > 0).then(|| ce / count as f64),
                mse: None,
                per_class,
            })
        }
        TaskMode::Regression => {
            let mut se = 0.0;
            for (s, tr) in dataset.samples.iter().zip(&traces) {
                se += prediction_loss(tr, s.target)?;
            }
            per_class[0].total = count;
            Ok(EvalMetrics {
                samples: count,
                accuracy: None,
                mean_ce: None,
                mse: (count > 0).then(|| se / count as f64),
                per_class,
            })
        }
    }
}

/// Parameters, optimizer state and RNG position of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: HeadParameters,
    pub adam: Vec<AdamState>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
}

impl TrainState {
    pub fn init(config: &TrainConfig, dim: usize, num_classes: usize) -> Result<Self> {
        config.validate(num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = init_params_with_rng(config, dim, num_classes, &mut rng)?;
        let adam = params
            .tensors()
            .iter()
            .map(|t| {
                AdamState::with_hyper(t.len(), config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            })
            .collect();
        Ok(Self {
            params,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        Self {
            params: ckpt.params,
            adam: ckpt.adam,
            rng,
            epoch: ckpt.epoch,
        }
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            config: config.clone(),
            epoch: self.epoch,
            rng_word_pos: self.rng.get_word_pos(),
        }
    }
}

/// Where a run writes its artifacts. Everything is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving `latest.plmc` after every epoch and `final.plmc` at the end.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines metrics log, one record per epoch.
    pub metrics_log: Option<PathBuf>,
    /// First line written to the metrics log, if any.
    pub metrics_header: Option<serde_json::Value>,
    /// Worker threads for per-sample forward/backward; 1 runs inline.
    pub threads: usize,
    /// Return the parameters of the best evaluation epoch instead of the last.
    pub keep_best: bool,
}

pub struct Trainer<'a> {
    config: &'a TrainConfig,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, threads: usize) -> Result<Self> {
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { config, pool })
    }

    fn map_ordered<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            None => items.iter().map(f).collect(),
        }
    }

    /// One optimizer step on a batch; returns `(ce, coh, sep, total)` batch means.
    pub fn step(&self, state: &mut TrainState, batch: &[&TokenEmbeddingSample]) -> Result<[f64; 4]> {
        let params = &state.params;
        let traces: Vec<ForwardTrace> = self.map_ordered(batch, |s| forward(s, params))?;
        let targets: Vec<Target> = batch.iter().map(|s| s.target).collect();
        let loss = total_loss(&traces, &targets, &params.proto_class, self.config)?;
        let indices: Vec<usize> = (0..batch.len()).collect();
        let parts: Vec<Gradients> = self.map_ordered(&indices, |&i| {
            sample_backward(
                batch[i],
                &traces[i],
                &loss.selected_coh[i],
                &loss.selected_sep[i],
                params,
                self.config,
                batch.len(),
            )
        })?;
        let mut grads = Gradients::zeros_like(params);
        for g in &parts {
            grads.accumulate(g);
        }
        for ((param, grad), adam) in state
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(state.adam.iter_mut())
        {
            adam_step(param, grad, adam)?;
        }
        Ok([loss.ce, loss.coh, loss.sep, loss.total])
    }

    /// Runs one epoch over `train` and returns its sample-weighted mean losses.
    pub fn epoch(&self, state: &mut TrainState, train: &Dataset) -> Result<[f64; 4]> {
        let shuffle_seed = state.rng.next_u64();
        let batches = make_batches(train.len(), self.config.batch_size, shuffle_seed, self.config.shuffle)?;
        let mut sums = [0.0; 4];
        for idx in &batches {
            let batch: Vec<&TokenEmbeddingSample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let means = self.step(state, &batch)?;
            for (s, m) in sums.iter_mut().zip(means) {
                *s += m * batch.len() as f64;
            }
        }
        state.epoch += 1;
        Ok(sums.map(|s| s / train.len() as f64))
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn fit(
        &self,
        state: &mut TrainState,
        train: &Dataset,
        eval: &Dataset,
        options: &TrainOptions,
    ) -> Result<(HeadParameters, TrainHistory)> {
        check_datasets(self.config, train, eval)?;
        if let Some(dir) = &options.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut log = match &options.metrics_log {
            Some(path) => Some(MetricsLog::create(path, options.metrics_header.as_ref())?),
            None => None,
        };
        let mut history = TrainHistory::default();
        let mut best: Option<(f64, HeadParameters)> = None;
        while state.epoch < self.config.epochs {
            let [ce, coh, sep, total] = self.epoch(state, train)?;
            let metrics = evaluate(&state.params, eval)?;
            let (name, value) = metrics.headline();
            let record = EpochRecord {
                epoch: state.epoch,
                ce,
                coh,
                sep,
                total,
                eval_metric: value,
                eval_metric_name: name,
            };
            if let Some(log) = log.as_mut() {
                log.write(&record)?;
            }
            if let Some(dir) = &options.checkpoint_dir {
                save_checkpoint(&state.to_checkpoint(self.config), dir.join("latest.plmc"))?;
            }
            if options.keep_best {
                // higher accuracy is better; lower MSE is better
                let score = if name == "mse" { -value } else { value };
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, state.params.clone()));
                }
            }
            history.records.push(record);
        }
        if let Some(dir) = &options.checkpoint_dir {
            save_checkpoint(&state.to_checkpoint(self.config), dir.join("final.plmc"))?;
        }
        let params = match best {
            Some((_, p)) => p,
            None => state.params.clone(),
        };
        Ok((params, history))
    }
}

fn check_datasets(config: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.dim != eval.dim || train.num_classes != eval.num_classes || train.mode != eval.mode {
        return Err(Error::Config(format!(
            "train (D={}, |C|={}, {:?}) and eval (D={}, |C|={}, {:?}) sets disagree",
            train.dim, train.num_classes, train.mode, eval.dim, eval.num_classes, eval.mode
        )));
    }
    if train.mode != config.loss_mode {
        return Err(Error::Config(format!(
            "loss_mode {:?} does not match dataset mode {:?}",
            config.loss_mode, train.mode
        )));
    }
    config.validate(train.num_classes)
}

struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: &Path, header: Option<&serde_json::Value>) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        if let Some(h) = header {
            log.line(h)?;
        }
        Ok(log)
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let s = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn write(&mut self, record: &EpochRecord) -> Result<()> {
        self.line(record)
    }
}

/// Initializes from `config.seed` and trains for `config.epochs` epochs, writing nothing.
pub fn train(config: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<(HeadParameters, TrainHistory)> {
    train_with(config, train_set, eval_set, &TrainOptions::default())
}

pub fn train_with(
    config: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    options: &TrainOptions,
) -> Result<(HeadParameters, TrainHistory)> {
    check_datasets(config, train_set, eval_set)?;
    let mut state = TrainState::init(config, train_set.dim, train_set.num_classes)?;
    Trainer::new(config, options.threads)?.fit(&mut state, train_set, eval_set, options)
}

/// Continues a checkpointed run up to `config.epochs`.
///
/// The checkpoint's own configuration governs everything except `epochs`.
pub fn resume(
    ckpt: Checkpoint,
    epochs: usize,
    train_set: &Dataset,
    eval_set: &Dataset,
    options: &TrainOptions,
) -> Result<(HeadParameters, TrainHistory)> {
    let config = TrainConfig {
        epochs,
        ..ckpt.config.clone()
    };
    let mut state = TrainState::from_checkpoint(ckpt);
    Trainer::new(&config, options.threads)?.fit(&mut state, train_set, eval_set, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth, SynthSpec};

    fn data(seed: u64, per_class: usize, separation: f64) -> Dataset {
        synth(&SynthSpec {
            samples_per_class: per_class,
            separation,
            seed,
            max_tokens: 6,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            num_prototypes: 4,
            k: 1,
            lr: 0.05,
            batch_size: 8,
            epochs,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = data(0, 10, 4.0);
        let config = small_config(0);
        let (params, history) = train(&config, &ds, &ds).unwrap();
        assert!(history.records.is_empty());
        assert_eq!(params, crate::model::init_params(&config, 16, 2, 11).unwrap());
    }

    #[test]
    fn history_has_one_record_per_epoch() {
        let ds = data(0, 10, 4.0);
        let (_, history) = train(&small_config(3), &ds, &ds).unwrap();
        assert_eq!(history.records.len(), 3);
        assert_eq!(history.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        for r in &history.records {
            let expected = 0.3 * r.ce + 0.35 * r.coh + 0.35 * r.sep;
            assert!((r.total - expected).abs() < 1e-12);
            assert_eq!(r.eval_metric_name, "accuracy");
        }
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let ds = data(1, 12, 4.0);
        let config = small_config(4);
        let mut bytes = Vec::new();
        for threads in [1, 3] {
            let dir = tempfile::tempdir().unwrap();
            let options = TrainOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                threads,
                ..Default::default()
            };
            train_with(&config, &ds, &ds, &options).unwrap();
            bytes.push(std::fs::read(dir.path().join("final.plmc")).unwrap());
            assert!(dir.path().join("latest.plmc").exists());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = data(2, 12, 3.0);
        let full_cfg = small_config(6);
        let (full_params, full_hist) = train(&full_cfg, &ds, &ds).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let options = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let (_, first) = train_with(&small_config(2), &ds, &ds, &options).unwrap();
        let ckpt = load_checkpoint(dir.path().join("final.plmc")).unwrap();
        assert_eq!(ckpt.epoch, 2);
        let (params, rest) = resume(ckpt, 6, &ds, &ds, &TrainOptions::default()).unwrap();
        assert_eq!(params, full_params);
        let joined: Vec<_> = first.records.into_iter().chain(rest.records).collect();
        assert_eq!(joined, full_hist.records);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ds = data(3, 8, 4.0);
        let config = small_config(2);
        let mut state = TrainState::init(&config, 16, 2).unwrap();
        Trainer::new(&config, 1)
            .unwrap()
            .fit(&mut state, &ds, &ds, &TrainOptions::default())
            .unwrap();
        let ckpt = state.to_checkpoint(&config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.plmc");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.params.tensors().iter().zip(ckpt.params.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_checkpoints_are_format_errors() {
        let config = small_config(0);
        let state = TrainState::init(&config, 16, 2).unwrap();
        let bytes = checkpoint::encode_checkpoint(&state.to_checkpoint(&config)).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint::decode_checkpoint(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = checkpoint::decode_checkpoint(&bad).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("version")));

        assert!(matches!(
            checkpoint::decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(checkpoint::decode_checkpoint(&long), Err(Error::Format(_))));
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let err = load_checkpoint("/nonexistent/dir/final.plmc").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn without_ce_weight_classifier_keeps_init() {
        let ds = data(4, 10, 3.0);
        let config = small_config(3).with_lambdas(0.0, 0.5, 0.5);
        let init = crate::model::init_params(&config, 16, 2, config.seed).unwrap();
        let (params, _) = train(&config, &ds, &ds).unwrap();
        assert_eq!(params.w_h, init.w_h);
        assert_ne!(params.prototypes, init.prototypes);
    }

    #[test]
    fn invalid_config_fails_before_training() {
        let ds = data(0, 5, 3.0);
        let dir = tempfile::tempdir().unwrap();
        let options = TrainOptions {
            checkpoint_dir: Some(dir.path().join("ck")),
            ..Default::default()
        };
        let config = small_config(2).with_lambdas(0.3, 0.3, 0.3);
        let err = train_with(&config, &ds, &ds, &options).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("simplex")));
        assert!(!dir.path().join("ck").exists());
    }

    #[test]
    fn evaluate_counts_and_mode_mismatch() {
        let ds = data(5, 10, 8.0);
        let config = small_config(15);
        let (params, _) = train(&config, &ds, &ds).unwrap();
        let m = evaluate(&params, &ds).unwrap();
        let traces: Vec<_> = ds.samples.iter().map(|s| forward(s, &params).unwrap()).collect();
        let recount = ds
            .samples
            .iter()
            .zip(&traces)
            .filter(|(s, t)| t.predicted() == s.target.class())
            .count();
        assert_eq!(m.accuracy, Some(recount as f64 / ds.len() as f64));
        assert_eq!(m.per_class.iter().map(|c| c.correct).sum::<usize>(), recount);
        assert_eq!(m.per_class.iter().map(|c| c.total).sum::<usize>(), ds.len());

        // Flip every label the model gets right and every label it gets wrong
        // to the predicted class: accuracy becomes exactly 0 and 1.
        let mut wrong = ds.clone();
        let mut right = ds.clone();
        for ((w, r), t) in wrong.samples.iter_mut().zip(right.samples.iter_mut()).zip(&traces) {
            w.target = Target::Class(1 - t.predicted());
            r.target = Target::Class(t.predicted());
        }
        assert_eq!(evaluate(&params, &wrong).unwrap().accuracy, Some(0.0));
        assert_eq!(evaluate(&params, &right).unwrap().accuracy, Some(1.0));

        let reg = Dataset::new(
            vec![TokenEmbeddingSample {
                target: Target::Value(0.5),
                ..ds.samples[0].clone()
            }],
            16,
            1,
            TaskMode::Regression,
        )
        .unwrap();
        assert!(matches!(evaluate(&params, &reg), Err(Error::Config(_))));
    }

    #[test]
    fn regression_training_reports_mse() {
        let base = data(6, 10, 3.0);
        let samples = base
            .samples
            .iter()
            .map(|s| TokenEmbeddingSample {
                target: Target::Value(s.target.class() as f64 * 2.0 - 1.0),
                ..s.clone()
            })
            .collect();
        let ds = Dataset::new(samples, 16, 1, TaskMode::Regression).unwrap();
        let config = TrainConfig {
            loss_mode: TaskMode::Regression,
            ..small_config(5)
        };
        let (_, history) = train(&config, &ds, &ds).unwrap();
        assert_eq!(history.records.len(), 5);
        assert!(history.records.iter().all(|r| r.eval_metric_name == "mse" && r.sep == 0.0));
        let first = history.records.first().unwrap().eval_metric;
        let last = history.records.last().unwrap().eval_metric;
        assert!(last < first, "mse {first} -> {last}");
    }

    #[test]
    fn metrics_log_has_header_and_one_line_per_epoch() {
        let ds = data(0, 6, 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let options = TrainOptions {
            metrics_log: Some(path.clone()),
            metrics_header: Some(serde_json::json!({"provenance": {"seed": 11}})),
            ..Default::default()
        };
        train_with(&small_config(3), &ds, &ds, &options).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["provenance"]["seed"], 11);
        assert_eq!(lines[3]["epoch"], 3);
    }
}
