//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 invalid configuration or validation failure,
//! 2 I/O or file-format failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::datastore::{read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::faithfulness::{faithfulness_report, faithfulness_table, summary_table, DEFAULT_K_PERCENTS};
use crate::gradcheck::{grad_check, random_instance};
use crate::interpret::{
    cluster_distribution, distribution_table, export_space, mean_normalized_projection_distance,
    project_prototypes, projection_table, space_table, uniqueness,
};
use crate::report::CsvTable;
use crate::synth::{synth, SynthSpec};
use crate::trainer::{evaluate, load_checkpoint, resume, train_with, TrainOptions};
use crate::{SimActivation, TaskMode};

#[derive(Debug, Parser)]
#[command(name = "protohead", version, about = "Prototype head over frozen token embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a head and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(ModelArgs),
    /// Project prototypes onto their nearest same-class training samples.
    Project(ProjectArgs),
    /// Comprehensiveness and sufficiency of top/bottom prototype sets.
    Faithfulness(FaithArgs),
    /// Two-prototype similarity coordinates for every sample.
    ExportSpace(SpaceArgs),
    /// Finite-difference check of the analytic gradients on random instances.
    Gradcheck(GradArgs),
    /// Generate a Gaussian-cluster PLM1 dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; flags and KEY=VALUE overrides are applied on top.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation set; defaults to the training set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint (its config governs everything except epochs).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long = "N")]
    pub num_prototypes: Option<usize>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub sim_activation: Option<String>,
    /// Return the best-evaluation epoch's parameters instead of the last epoch's.
    #[arg(long)]
    pub keep_best: bool,
    /// Flat config overrides, e.g. `batch_size=32`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training set to project onto.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the distance-normalizer subsample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also dump every prototype's soft-cluster distribution here.
    #[arg(long)]
    pub distributions: Option<PathBuf>,
    /// Restrict distributions to samples of the prototype's class.
    #[arg(long)]
    pub class_restricted: bool,
}

#[derive(Debug, Args)]
pub struct FaithArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Per-sample table.
    #[arg(long)]
    pub out: PathBuf,
    /// Mean table per (k, direction).
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
    /// Comma-separated percentages.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_PERCENTS)]
    pub k_list: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SpaceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub proto_a: usize,
    #[arg(long)]
    pub proto_b: usize,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per (mode, activation) pair.
    #[arg(long, default_value_t = 5)]
    pub instances: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Samples per class.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub min_tokens: usize,
    #[arg(long, default_value_t = 12)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Attach placeholder token strings.
    #[arg(long)]
    pub texts: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// sha256 of the config's canonical JSON, hex encoded.
pub fn config_hash(config: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Modelling choices an output depends on, recorded next to every artifact.
pub fn decisions(config: &TrainConfig) -> Vec<String> {
    let sim = match config.sim_activation {
        SimActivation::LogRatio => format!("similarity ln((d+1)/(d+{}))", config.eps_sim),
        SimActivation::Reciprocal => "similarity 1/(1+d)".to_string(),
    };
    vec![
        sim,
        "losses averaged over the batch".into(),
        "top-K ties broken by lower prototype index".into(),
        "single seeded RNG stream: init, then one shuffle seed per epoch".into(),
        "faithfulness confidence = predicted-class logit".into(),
        "space nsim = 1/(1+euclidean distance)".into(),
        "projection normalizer = mean pairwise distance over <=1000 seeded samples".into(),
        "soft clusters: pi ~ 1/d, uniform over exact matches".into(),
    ]
}

fn provenance(config: &TrainConfig) -> Value {
    json!({
        "config_hash": config_hash(config),
        "seed": config.seed,
        "decisions": decisions(config),
        "config": config,
    })
}

fn stamp(table: &mut CsvTable, config: &TrainConfig, extra: &[String]) {
    let mut lines = vec![
        format!("config_hash={}", config_hash(config)),
        format!("seed={}", config.seed),
    ];
    lines.extend(decisions(config).into_iter().map(|d| format!("decision: {d}")));
    lines.extend_from_slice(extra);
    lines.append(&mut table.comments);
    table.comments = lines;
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn parse_override(entry: &str) -> Result<(String, Value)> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Config file, then dedicated flags, then KEY=VALUE overrides.
pub fn merged_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut map: Map<String, Value> = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Error::Config(format!("{}: config must be a JSON object", path.display()))),
                Err(e) => return Err(Error::Config(format!("{}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    let flags: [(&str, Option<Value>); 9] = [
        ("seed", args.seed.map(Value::from)),
        ("num_prototypes", args.num_prototypes.map(Value::from)),
        ("k", args.k.map(Value::from)),
        ("lambda0", args.lambda0.map(Value::from)),
        ("lambda1", args.lambda1.map(Value::from)),
        ("lambda2", args.lambda2.map(Value::from)),
        ("epochs", args.epochs.map(Value::from)),
        ("lr", args.lr.map(Value::from)),
        ("sim_activation", args.sim_activation.clone().map(Value::from)),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    }
    for entry in &args.overrides {
        let (key, value) = parse_override(entry)?;
        map.insert(key, value);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let resume_from = args.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let mut config = merged_config(args)?;
    if let Some(ckpt) = &resume_from {
        config = TrainConfig {
            epochs: config.epochs,
            ..ckpt.config.clone()
        };
    }
    config.validate_lambdas()?;
    let train_set = read_dataset(&args.data)?;
    let eval_set = match &args.eval_data {
        Some(p) => read_dataset(p)?,
        None => train_set.clone(),
    };
    config.validate(train_set.num_classes)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let prov = provenance(&config);
    write_json(&args.out.join("config.json"), &prov)?;
    let options = TrainOptions {
        checkpoint_dir: Some(args.out.clone()),
        metrics_log: Some(args.out.join("metrics.jsonl")),
        metrics_header: Some(json!({ "provenance": prov })),
        threads: args.threads.max(1),
        keep_best: args.keep_best,
    };
    let (params, history) = match resume_from {
        Some(ckpt) => resume(ckpt, config.epochs, &train_set, &eval_set, &options)?,
        None => train_with(&config, &train_set, &eval_set, &options)?,
    };
    let metrics = evaluate(&params, &eval_set)?;
    let summary = json!({
        "provenance": provenance(&config),
        "epochs": history.records.len(),
        "final": history.records.last(),
        "eval": metrics,
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary["eval"]).unwrap_or_default());
    Ok(())
}

fn load_model(checkpoint: &Path, data: &Path) -> Result<(crate::trainer::Checkpoint, Dataset)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let data = read_dataset(data)?;
    Ok((ckpt, data))
}

fn cmd_eval(args: &ModelArgs) -> Result<()> {
    let (ckpt, data) = load_model(&args.checkpoint, &args.data)?;
    let metrics = evaluate(&ckpt.params, &data)?;
    let report = json!({ "provenance": provenance(&ckpt.config), "eval": metrics });
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string(&report["eval"]).unwrap_or_default());
    Ok(())
}

fn cmd_project(args: &ProjectArgs) -> Result<()> {
    let (ckpt, data) = load_model(&args.checkpoint, &args.data)?;
    let projection = project_prototypes(&ckpt.params, &data)?;
    let u = uniqueness(&projection);
    let nd = mean_normalized_projection_distance(&ckpt.params, &data, &projection, args.seed)?;
    let mut table = projection_table(&projection)?;
    stamp(
        &mut table,
        &ckpt.config,
        &[
            format!("uniqueness={u}"),
            format!("mean_normalized_distance={nd}"),
            format!("normalizer_seed={}", args.seed),
        ],
    );
    table.write(&args.out)?;
    if let Some(path) = &args.distributions {
        let dists = (0..ckpt.params.num_prototypes())
            .map(|j| cluster_distribution(&ckpt.params, &data, j, args.class_restricted))
            .collect::<Result<Vec<_>>>()?;
        let mut t = distribution_table(&dists)?;
        stamp(&mut t, &ckpt.config, &[format!("class_restricted={}", args.class_restricted)]);
        t.write(path)?;
    }
    println!("{}", json!({ "uniqueness": u, "mean_normalized_distance": nd }));
    Ok(())
}

fn cmd_faithfulness(args: &FaithArgs) -> Result<()> {
    let (ckpt, data) = load_model(&args.checkpoint, &args.data)?;
    let report = faithfulness_report(&ckpt.params, &data, &args.k_list)?;
    let mut detail = faithfulness_table(&report)?;
    stamp(&mut detail, &ckpt.config, &[]);
    detail.write(&args.out)?;
    let mut summary = summary_table(&report)?;
    print!("{}", summary.render());
    if let Some(path) = &args.summary_out {
        stamp(&mut summary, &ckpt.config, &[]);
        summary.write(path)?;
    }
    Ok(())
}

fn cmd_export_space(args: &SpaceArgs) -> Result<()> {
    let (ckpt, data) = load_model(&args.checkpoint, &args.data)?;
    let rows = export_space(&ckpt.params, &data, args.proto_a, args.proto_b)?;
    let mut table = space_table(&rows)?;
    stamp(
        &mut table,
        &ckpt.config,
        &[format!("proto_a={} proto_b={}", args.proto_a, args.proto_b)],
    );
    table.write(&args.out)
}

fn cmd_gradcheck(args: &GradArgs) -> Result<()> {
    let mut reports = Vec::new();
    let mut passed = true;
    for i in 0..args.instances {
        for mode in [TaskMode::Classification, TaskMode::Regression] {
            for act in [SimActivation::LogRatio, SimActivation::Reciprocal] {
                let inst = random_instance(args.seed.wrapping_add(i), mode, act)?;
                let r = grad_check(&inst.params, &inst.batch_refs(), &inst.config, args.h, args.tol)?;
                passed &= r.passed;
                reports.push(json!({
                    "instance": i,
                    "mode": mode,
                    "sim_activation": act,
                    "passed": r.passed,
                    "max_rel_error": r.max_rel_error(),
                    "truncation_dominated": r.truncation_dominated,
                    "tensors": r.tensors,
                }));
            }
        }
    }
    let worst = reports
        .iter()
        .filter_map(|r| r["max_rel_error"].as_f64())
        .fold(0.0, f64::max);
    let out = json!({
        "provenance": { "seed": args.seed, "h": args.h, "tol": args.tol },
        "passed": passed,
        "max_rel_error": worst,
        "instances": reports,
    });
    if let Some(path) = &args.out {
        write_json(path, &out)?;
    }
    println!("{}", json!({ "passed": passed, "max_rel_error": worst, "checked": reports.len() }));
    if passed {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "gradient check failed: max relative error {worst:e} >= {}",
            args.tol
        )))
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: args.classes,
        samples_per_class: args.samples,
        min_tokens: args.min_tokens,
        max_tokens: args.max_tokens,
        dim: args.dim,
        separation: args.separation,
        noise: args.noise,
        seed: args.seed,
        texts: args.texts,
    };
    let data = synth(&spec)?;
    write_dataset(&data, &args.out)?;
    // PLM1 has no room for text metadata, so provenance goes in a sidecar
    let sidecar = sidecar_path(&args.out);
    let spec_json = serde_json::to_vec(&spec).map_err(|e| Error::Format(e.to_string()))?;
    write_json(
        &sidecar,
        &json!({
            "spec_hash": hex::encode(Sha256::digest(&spec_json)),
            "seed": args.seed,
            "spec": spec,
            "decisions": ["class centers separation/sqrt(2) * e_c", "samples interleaved by class"],
        }),
    )
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".provenance.json");
    out.with_file_name(name)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Project(a) => cmd_project(a),
        Command::Faithfulness(a) => cmd_faithfulness(a),
        Command::ExportSpace(a) => cmd_export_space(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
