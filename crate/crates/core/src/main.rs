//! Command-line surface wiring the library into reproducible batch
//! workflows. Every command takes a mandatory --seed, merges flags over an
//! optional JSON config file (flags win), and writes a manifest describing
//! inputs, resolved config, and outputs. No wall-clock state enters any
//! output, so identical invocations produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use polyvisc::data::{
    fit_scaling, impute_pdi, load_dataset, write_dataset, PolymerSample, ScaledSample,
    ScalingSpec,
};
use polyvisc::eval::{
    classify_extrapolation, estimate_params_from_sweep, kl_divergence, ome, physical_split,
    r_squared, sweep_predict, write_curves_csv, Curve, CurveRow, EvalError, EvaluationReport,
    GprViscosityModel, SplitVariable, SweepSpec, Tallies, Thresholds, TrialMetrics,
    ViscosityModel, KL_BINS,
};
use polyvisc::fit::{fit_with_defaults, Law};
use polyvisc::gpr::{gpr_fit, gpr_search, GprDoc, GprModel};
use polyvisc::nn::{
    hyperparameter_search, train, MlpConfig, ModelKind, SearchGrid, TrainOptions, TrainedModel,
};
use polyvisc::synth::generate;

#[derive(Parser)]
#[command(name = "polyvisc", about = "Polymer melt viscosity modeling toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; command-line flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomness in this run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize a raw dataset CSV.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Produce a monomer-level physical split plan.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        variable: Option<String>,
    },
    /// Train a model (penn, ann, or gpr).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        kind: Option<String>,
        /// Optional split plan; its test records are excluded from training.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        w_alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Hyperparameter search budget (0 = defaults, no search).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Predict viscosities for every row of a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fit empirical laws per chemistry directly to measured data.
    FitParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        variable: Option<String>,
    },
    /// Sweep a model beyond the data and classify extrapolation outcomes.
    Extrapolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        variable: Option<String>,
        #[arg(long)]
        theta_acc: Option<f64>,
    },
    /// Full evaluation: held-out metrics, sweeps, parameter distributions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        variable: Option<String>,
        /// Ground-truth parameter JSON (synthetic datasets).
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        theta_acc: Option<f64>,
    },
    /// Generate a synthetic dataset with known parameters.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_chem: Option<usize>,
        #[arg(long)]
        pts: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Convert an evaluation report JSON into flat CSV tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

// ---------------------------------------------------------------------------
// error and exit-code plumbing

enum CliError {
    /// Bad flags, unresolvable paths, malformed config: exit 1.
    Usage(String),
    /// Failures during computation or IO on declared files: exit 2.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------------
// config resolution

/// Flat JSON config; flags win over file entries.
struct ConfigFile(serde_json::Map<String, serde_json::Value>);

impl ConfigFile {
    fn load(path: &Option<PathBuf>) -> CliResult<Self> {
        let Some(p) = path else { return Ok(ConfigFile(Default::default())) };
        let text = fs::read_to_string(p)
            .map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
        match v {
            serde_json::Value::Object(m) => Ok(ConfigFile(m)),
            _ => Err(usage(format!("--config {}: expected a JSON object", p.display()))),
        }
    }

    fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> CliResult<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| usage(format!("config key '{key}': {e}"))),
        }
    }
}

fn resolve<T: serde::de::DeserializeOwned>(
    flag: Option<T>,
    cfg: &ConfigFile,
    key: &str,
) -> CliResult<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.get(key),
    }
}

fn require<T: serde::de::DeserializeOwned>(
    flag: Option<T>,
    cfg: &ConfigFile,
    key: &str,
) -> CliResult<T> {
    resolve(flag, cfg, key)?.ok_or_else(|| usage(format!("missing required --{key}")))
}

fn require_input(path: PathBuf, key: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("--{key} {}: path does not exist", path.display())))
    }
}

fn parse_variable(s: &str) -> CliResult<SplitVariable> {
    match s {
        "mw" => Ok(SplitVariable::Mw),
        "shear" => Ok(SplitVariable::Shear),
        "temp" => Ok(SplitVariable::Temp),
        other => Err(usage(format!("--variable {other}: expected mw, shear, or temp"))),
    }
}

fn law_for(variable: SplitVariable) -> Law {
    match variable {
        SplitVariable::Mw => Law::Mw,
        SplitVariable::Shear => Law::Shear,
        SplitVariable::Temp => Law::Temp,
    }
}

fn variable_name(v: SplitVariable) -> &'static str {
    match v {
        SplitVariable::Mw => "mw",
        SplitVariable::Shear => "shear",
        SplitVariable::Temp => "temp",
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Serialize)]
struct Manifest {
    command: String,
    seed: u64,
    config_hash: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    versions: BTreeMap<String, String>,
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    resolved_config: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&str],
) -> CliResult<()> {
    let cfg_json = serde_json::to_string(resolved_config).map_err(runtime)?;
    let mut hasher = Sha256::new();
    hasher.update(cfg_json.as_bytes());
    let mut versions = BTreeMap::new();
    versions.insert("polyvisc".to_string(), env!("CARGO_PKG_VERSION").to_string());
    let manifest = Manifest {
        command: command.to_string(),
        seed,
        config_hash: format!("{:x}", hasher.finalize()),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        versions,
    };
    let path = out.join(format!("{command}_manifest.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest).map_err(runtime)?)
        .map_err(runtime)?;
    Ok(())
}

fn ensure_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| usage(format!("--out {}: {e}", out.display())))
}

// ---------------------------------------------------------------------------
// saved models

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SavedModel {
    Nn(TrainedModel),
    Gpr { gpr: GprDoc, scaling: ScalingSpec },
}

enum LoadedModel {
    Nn(TrainedModel),
    Gpr(GprViscosityModel),
}

impl LoadedModel {
    fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(runtime)?;
        let saved: SavedModel = serde_json::from_str(&text)
            .map_err(|e| runtime(format!("{}: not a model file: {e}", path.display())))?;
        Ok(match saved {
            SavedModel::Nn(m) => LoadedModel::Nn(m),
            SavedModel::Gpr { gpr, scaling } => {
                let model = GprModel::from_doc(&gpr).map_err(runtime)?;
                LoadedModel::Gpr(GprViscosityModel { model, scaling })
            }
        })
    }

    fn as_viscosity_model(&self) -> &dyn ViscosityModel {
        match self {
            LoadedModel::Nn(m) => m,
            LoadedModel::Gpr(m) => m,
        }
    }
}

// ---------------------------------------------------------------------------
// dataset helpers

fn load_and_impute(path: &Path) -> CliResult<Vec<PolymerSample>> {
    let mut samples = load_dataset(path).map_err(runtime)?;
    impute_pdi(&mut samples, true);
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
struct StoredSplit {
    variable: String,
    seed: u64,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
}

/// Train/validation partition: honors a split plan when given, otherwise a
/// seeded 90/10 random record split.
fn train_val_ids(
    samples: &[PolymerSample],
    split_path: &Option<PathBuf>,
    seed: u64,
) -> CliResult<(Vec<String>, Vec<String>)> {
    if let Some(p) = split_path {
        let text = fs::read_to_string(p).map_err(runtime)?;
        let plan: StoredSplit = serde_json::from_str(&text).map_err(runtime)?;
        return Ok((plan.train_ids, plan.test_ids));
    }
    let mut ids: Vec<String> = samples.iter().map(|s| s.record_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_val = (ids.len() / 10).max(1);
    let val = ids[..n_val].to_vec();
    let tr = ids[n_val..].to_vec();
    Ok((tr, val))
}

fn scale_subset(
    samples: &[PolymerSample],
    ids: &[String],
    scaling: &ScalingSpec,
) -> CliResult<Vec<ScaledSample>> {
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
    samples
        .iter()
        .filter(|s| wanted.contains(s.record_id.as_str()))
        .map(|s| scaling.scale_sample(s).map_err(runtime))
        .collect()
}

// ---------------------------------------------------------------------------
// commands

fn cmd_ingest(common: Common, dataset: Option<PathBuf>) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let dataset = require_input(require(dataset, &cfg, "dataset")?, "dataset")?;
    ensure_out(&out)?;

    let samples = load_and_impute(&dataset)?;
    write_dataset(&out.join("clean.csv"), &samples).map_err(runtime)?;
    let summary = serde_json::json!({
        "rows": samples.len(),
        "chemistries": samples
            .iter()
            .map(|s| s.chemistry_key())
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
    });
    fs::write(out.join("ingest_summary.json"), serde_json::to_string_pretty(&summary).unwrap())
        .map_err(runtime)?;
    write_manifest(
        &out,
        "ingest",
        seed,
        &serde_json::json!({"dataset": dataset.display().to_string()}),
        &[&dataset],
        &["clean.csv", "ingest_summary.json"],
    )
}

fn cmd_split(common: Common, dataset: Option<PathBuf>, variable: Option<String>) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let dataset = require_input(require(dataset, &cfg, "dataset")?, "dataset")?;
    let variable = parse_variable(&require::<String>(variable, &cfg, "variable")?)?;
    ensure_out(&out)?;

    let samples = load_and_impute(&dataset)?;
    let plan = physical_split(&samples, variable, seed).map_err(|e| match e {
        EvalError::TooFewMonomers(_) => usage(e.to_string()),
        other => runtime(other),
    })?;
    let name = format!("split_{}.json", variable_name(variable));
    fs::write(out.join(&name), serde_json::to_string_pretty(&plan).map_err(runtime)?)
        .map_err(runtime)?;
    write_manifest(
        &out,
        "split",
        seed,
        &serde_json::json!({
            "dataset": dataset.display().to_string(),
            "variable": variable_name(variable),
        }),
        &[&dataset],
        &[&name],
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: Common,
    dataset: Option<PathBuf>,
    kind: Option<String>,
    split: Option<PathBuf>,
    w_alpha: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    trials: Option<usize>,
) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let dataset = require_input(require(dataset, &cfg, "dataset")?, "dataset")?;
    let kind_str: String = require(kind, &cfg, "kind")?;
    let split = match resolve(split, &cfg, "split")? {
        Some(p) => Some(require_input(p, "split")?),
        None => None,
    };
    let w_alpha = resolve(w_alpha, &cfg, "w_alpha")?;
    let epochs = resolve(epochs, &cfg, "epochs")?.unwrap_or(500);
    let batch = resolve(batch, &cfg, "batch")?.unwrap_or(64);
    let trials = resolve(trials, &cfg, "trials")?.unwrap_or(0);
    ensure_out(&out)?;

    let samples = load_and_impute(&dataset)?;
    let (train_ids, val_ids) = train_val_ids(&samples, &split, seed)?;
    let train_phys: Vec<PolymerSample> = {
        let wanted: std::collections::BTreeSet<&str> =
            train_ids.iter().map(|s| s.as_str()).collect();
        samples.iter().filter(|s| wanted.contains(s.record_id.as_str())).cloned().collect()
    };
    if train_phys.is_empty() {
        return Err(usage("training split is empty".to_string()));
    }
    let scaling = fit_scaling(&train_phys).map_err(runtime)?;
    let tr = scale_subset(&samples, &train_ids, &scaling)?;
    let va = scale_subset(&samples, &val_ids, &scaling)?;
    let opts = TrainOptions { max_epochs: epochs, batch_size: batch };

    let model_json = match kind_str.as_str() {
        "penn" | "ann" => {
            let mk = if kind_str == "penn" { ModelKind::Penn } else { ModelKind::Ann };
            let mut config = if trials > 0 {
                hyperparameter_search(
                    &tr,
                    &scaling,
                    mk,
                    &SearchGrid::standard(mk),
                    trials,
                    seed,
                    &opts,
                )
                .map_err(runtime)?
            } else {
                MlpConfig::default_for(mk, seed)
            };
            config.seed = seed;
            if let Some(w) = w_alpha {
                config.w_alpha = w;
            }
            let model = train(&tr, &va, &config, mk, &scaling, &opts).map_err(runtime)?;
            let json = model.to_json().map_err(runtime)?;
            let train_preds: Vec<f64> = train_phys
                .iter()
                .map(|s| {
                    model
                        .predict_log_eta(&s.fingerprint, s.pdi.unwrap(), s.mw, s.temp, s.shear_rate)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let truth: Vec<f64> = train_phys.iter().map(|s| s.log_eta).collect();
            let metrics = serde_json::json!({
                "train_ome": ome(&train_preds, &truth).map_err(runtime)?,
                "epochs_run": model.training_log.len(),
            });
            fs::write(
                out.join("train_metrics.json"),
                serde_json::to_string_pretty(&metrics).unwrap(),
            )
            .map_err(runtime)?;
            json
        }
        "gpr" => {
            let x: Vec<Vec<f64>> = tr
                .iter()
                .map(|s| {
                    let mut v = s.fingerprint.clone();
                    v.extend_from_slice(&[s.pdi, s.cond.log_mw, s.cond.t, s.cond.log_g]);
                    v
                })
                .collect();
            let y: Vec<f64> = tr.iter().map(|s| s.log_eta).collect();
            let hp = if trials > 0 {
                gpr_search(&x, &y, trials, seed).map_err(runtime)?
            } else {
                Default::default()
            };
            let model = gpr_fit(&x, &y, hp).map_err(runtime)?;
            let gpr_model = GprViscosityModel { model, scaling: scaling.clone() };
            let train_preds: Vec<f64> = train_phys
                .iter()
                .map(|s| {
                    gpr_model
                        .predict_log_eta(&s.fingerprint, s.pdi.unwrap(), s.mw, s.temp, s.shear_rate)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let truth: Vec<f64> = train_phys.iter().map(|s| s.log_eta).collect();
            let metrics = serde_json::json!({
                "train_ome": ome(&train_preds, &truth).map_err(runtime)?,
            });
            fs::write(
                out.join("train_metrics.json"),
                serde_json::to_string_pretty(&metrics).unwrap(),
            )
            .map_err(runtime)?;
            let saved =
                SavedModel::Gpr { gpr: gpr_model.model.to_doc(), scaling };
            serde_json::to_string_pretty(&saved).map_err(runtime)?
        }
        other => return Err(usage(format!("--kind {other}: expected penn, ann, or gpr"))),
    };
    fs::write(out.join("model.json"), model_json).map_err(runtime)?;

    let mut inputs: Vec<&Path> = vec![&dataset];
    if let Some(p) = &split {
        inputs.push(p);
    }
    write_manifest(
        &out,
        "train",
        seed,
        &serde_json::json!({
            "dataset": dataset.display().to_string(),
            "kind": kind_str,
            "split": split.as_ref().map(|p| p.display().to_string()),
            "w_alpha": w_alpha,
            "epochs": epochs,
            "batch": batch,
            "trials": trials,
        }),
        &inputs,
        &["model.json", "train_metrics.json"],
    )
}

fn cmd_predict(common: Common, dataset: Option<PathBuf>, model: Option<PathBuf>) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let dataset = require_input(require(dataset, &cfg, "dataset")?, "dataset")?;
    let model_path = require_input(require(model, &cfg, "model")?, "model")?;
    ensure_out(&out)?;

    let samples = load_and_impute(&dataset)?;
    let loaded = LoadedModel::load(&model_path)?;
    let vm = loaded.as_viscosity_model();

    let mut w = csv::Writer::from_path(out.join("predictions.csv")).map_err(runtime)?;
    w.write_record(["record_id", "pred_log10_eta", "true_log10_eta"]).map_err(runtime)?;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for s in &samples {
        let pred = vm.predict_log_eta(&s.fingerprint, s.pdi.unwrap(), s.mw, s.temp, s.shear_rate);
        w.write_record([
            s.record_id.as_str(),
            &pred.map_or(String::new(), |v| format!("{v}")),
            &format!("{}", s.log_eta),
        ])
        .map_err(runtime)?;
        if let Some(p) = pred {
            preds.push(p);
            truths.push(s.log_eta);
        }
    }
    w.flush().map_err(runtime)?;

    let metrics = serde_json::json!({
        "n_predicted": preds.len(),
        "n_total": samples.len(),
        "ome": ome(&preds, &truths).ok(),
        "r_squared": r_squared(&preds, &truths).ok(),
    });
    fs::write(out.join("predict_metrics.json"), serde_json::to_string_pretty(&metrics).unwrap())
        .map_err(runtime)?;
    write_manifest(
        &out,
        "predict",
        seed,
        &serde_json::json!({
            "dataset": dataset.display().to_string(),
            "model": model_path.display().to_string(),
        }),
        &[&dataset, &model_path],
        &["predictions.csv", "predict_metrics.json"],
    )
}

fn cmd_fit_params(
    common: Common,
    dataset: Option<PathBuf>,
    variable: Option<String>,
) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let dataset = require_input(require(dataset, &cfg, "dataset")?, "dataset")?;
    let variable = parse_variable(&require::<String>(variable, &cfg, "variable")?)?;
    ensure_out(&out)?;

    let samples = load_and_impute(&dataset)?;
    let law = law_for(variable);
    let mut by_chem: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for s in &samples {
        let point = match variable {
            SplitVariable::Mw if s.shear_rate == 0.0 => Some((s.mw.log10(), s.log_eta)),
            SplitVariable::Shear => {
                Some(((s.shear_rate + polyvisc::data::SHEAR_OFFSET).log10(), s.log_eta))
            }
            SplitVariable::Temp if s.shear_rate == 0.0 => Some((s.temp, s.log_eta)),
            _ => None,
        };
        if let Some(p) = point {
            by_chem.entry(s.chemistry_key()).or_default().push(p);
        }
    }
    let mut w = csv::Writer::from_path(out.join("fitted_params.csv")).map_err(runtime)?;
    let mut header = vec!["chemistry".to_string(), "law".to_string()];
    header.extend((0..law.n_params()).map(|i| format!("p{i}")));
    header.extend(["residual_rms".to_string(), "converged".to_string()]);
    w.write_record(&header).map_err(runtime)?;
    for (chem, points) in &by_chem {
        let Ok(res) = fit_with_defaults(law, points) else { continue };
        let mut row = vec![chem.clone(), variable_name(variable).to_string()];
        row.extend(res.params.iter().map(|p| format!("{p}")));
        row.push(format!("{}", res.residual_rms));
        row.push(format!("{}", res.converged));
        w.write_record(&row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    write_manifest(
        &out,
        "fit-params",
        seed,
        &serde_json::json!({
            "dataset": dataset.display().to_string(),
            "variable": variable_name(variable),
        }),
        &[&dataset],
        &["fitted_params.csv"],
    )
}

/// One test monomer's sweep + classification inputs, shared by
/// `extrapolate` and `evaluate`.
struct MonomerCase {
    base: PolymerSample,
    held_pred: Vec<f64>,
    held_true: Vec<f64>,
}

fn collect_cases(
    samples: &[PolymerSample],
    variable: SplitVariable,
    seed: u64,
    vm: &dyn ViscosityModel,
) -> CliResult<(Vec<MonomerCase>, Vec<f64>, Vec<f64>)> {
    let plan = physical_split(samples, variable, seed).map_err(|e| match e {
        EvalError::TooFewMonomers(_) => usage(e.to_string()),
        other => runtime(other),
    })?;
    let test_set: std::collections::BTreeSet<&str> =
        plan.test_ids.iter().map(|s| s.as_str()).collect();
    let mut by_monomer: BTreeMap<String, Vec<&PolymerSample>> = BTreeMap::new();
    for s in samples {
        if test_set.contains(s.record_id.as_str()) {
            by_monomer.entry(s.chemistry_key()).or_default().push(s);
        }
    }
    let mut cases = Vec::new();
    let mut all_pred = Vec::new();
    let mut all_true = Vec::new();
    for records in by_monomer.values() {
        let mut held_pred = Vec::new();
        let mut held_true = Vec::new();
        for s in records {
            if let Some(p) =
                vm.predict_log_eta(&s.fingerprint, s.pdi.unwrap(), s.mw, s.temp, s.shear_rate)
            {
                held_pred.push(p);
                held_true.push(s.log_eta);
            }
        }
        if held_pred.is_empty() {
            continue;
        }
        all_pred.extend_from_slice(&held_pred);
        all_true.extend_from_slice(&held_true);
        cases.push(MonomerCase {
            base: records[records.len() / 2].clone(),
            held_pred,
            held_true,
        });
    }
    Ok((cases, all_pred, all_true))
}

fn curve_rows(curve: &Curve) -> Vec<CurveRow> {
    curve
        .points
        .iter()
        .map(|p| CurveRow {
            record_id: curve.record_id.clone(),
            variable: variable_name(curve.variable).to_string(),
            grid_value: p.grid_value,
            pred_log10_eta: p.pred_log10_eta,
            true_log10_eta: None,
        })
        .collect()
}

fn cmd_extrapolate(
    common: Common,
    dataset: Option<PathBuf>,
    model: Option<PathBuf>,
    variable: Option<String>,
    theta_acc: Option<f64>,
) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let dataset = require_input(require(dataset, &cfg, "dataset")?, "dataset")?;
    let model_path = require_input(require(model, &cfg, "model")?, "model")?;
    let variable = parse_variable(&require::<String>(variable, &cfg, "variable")?)?;
    let theta_acc = resolve(theta_acc, &cfg, "theta_acc")?.unwrap_or(polyvisc::eval::THETA_ACC);
    ensure_out(&out)?;

    let samples = load_and_impute(&dataset)?;
    let loaded = LoadedModel::load(&model_path)?;
    let vm = loaded.as_viscosity_model();
    let (cases, _, _) = collect_cases(&samples, variable, seed, vm)?;
    let th = Thresholds { acc: theta_acc, ..Default::default() };
    let law = law_for(variable);

    let mut tallies = Tallies::default();
    let mut rows = Vec::new();
    let mut outcomes = BTreeMap::new();
    for case in &cases {
        let spec = SweepSpec::standard(variable, &case.base, 30);
        let curve = sweep_predict(vm, &case.base, &spec);
        let outcome = classify_extrapolation(&curve, &case.held_pred, &case.held_true, law, &th)
            .map_err(runtime)?;
        tallies.add(outcome);
        outcomes.insert(case.base.chemistry_key(), format!("{outcome:?}"));
        rows.extend(curve_rows(&curve));
    }
    write_curves_csv(&out.join("curves.csv"), &rows).map_err(runtime)?;
    let summary = serde_json::json!({
        "variable": variable_name(variable),
        "theta_acc": theta_acc,
        "tallies": tallies,
        "outcomes": outcomes,
    });
    fs::write(out.join("extrapolation.json"), serde_json::to_string_pretty(&summary).unwrap())
        .map_err(runtime)?;
    write_manifest(
        &out,
        "extrapolate",
        seed,
        &serde_json::json!({
            "dataset": dataset.display().to_string(),
            "model": model_path.display().to_string(),
            "variable": variable_name(variable),
            "theta_acc": theta_acc,
        }),
        &[&dataset, &model_path],
        &["curves.csv", "extrapolation.json"],
    )
}

/// Parameters relevant to each law, as (label, index into physical params).
fn tracked_params(variable: SplitVariable) -> &'static [(&'static str, usize)] {
    match variable {
        SplitVariable::Mw => &[("alpha1", 1), ("alpha2", 2), ("log_mcr", 3)],
        SplitVariable::Shear => &[("n", 8), ("log_gcr", 9)],
        SplitVariable::Temp => &[("c1", 5), ("c2", 6)],
    }
}

/// Indices of each law's fitted parameter vector matching tracked_params.
fn fitted_index(variable: SplitVariable, label: &str) -> usize {
    match (variable, label) {
        (SplitVariable::Mw, "alpha1") => 1,
        (SplitVariable::Mw, "alpha2") => 2,
        (SplitVariable::Mw, "log_mcr") => 3,
        (SplitVariable::Shear, "n") => 1,
        (SplitVariable::Shear, "log_gcr") => 2,
        (SplitVariable::Temp, "c1") => 1,
        (SplitVariable::Temp, "c2") => 2,
        _ => unreachable!("unknown tracked parameter"),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    common: Common,
    dataset: Option<PathBuf>,
    model: Option<PathBuf>,
    variable: Option<String>,
    truth: Option<PathBuf>,
    bins: Option<usize>,
    theta_acc: Option<f64>,
) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let dataset = require_input(require(dataset, &cfg, "dataset")?, "dataset")?;
    let model_path = require_input(require(model, &cfg, "model")?, "model")?;
    let variable = parse_variable(&require::<String>(variable, &cfg, "variable")?)?;
    let truth = match resolve(truth, &cfg, "truth")? {
        Some(p) => Some(require_input(p, "truth")?),
        None => None,
    };
    let bins = resolve(bins, &cfg, "bins")?.unwrap_or(KL_BINS);
    let theta_acc = resolve(theta_acc, &cfg, "theta_acc")?.unwrap_or(polyvisc::eval::THETA_ACC);
    ensure_out(&out)?;

    let samples = load_and_impute(&dataset)?;
    let loaded = LoadedModel::load(&model_path)?;
    let vm = loaded.as_viscosity_model();
    let model_label = match &loaded {
        LoadedModel::Nn(m) => match m.kind {
            ModelKind::Penn => "penn",
            ModelKind::Ann => "ann",
        },
        LoadedModel::Gpr(_) => "gpr",
    };
    let (cases, all_pred, all_true) = collect_cases(&samples, variable, seed, vm)?;
    let th = Thresholds { acc: theta_acc, ..Default::default() };
    let law = law_for(variable);

    let mut tallies = Tallies::default();
    let mut rows = Vec::new();
    let mut dists: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for case in &cases {
        let spec = SweepSpec::standard(variable, &case.base, 30);
        let curve = sweep_predict(vm, &case.base, &spec);
        let outcome = classify_extrapolation(&curve, &case.held_pred, &case.held_true, law, &th)
            .map_err(runtime)?;
        tallies.add(outcome);
        rows.extend(curve_rows(&curve));
        // parameter distribution: read from the model when it predicts
        // parameters, otherwise fit the sweep curve
        if let Some(p) = &curve.params {
            let arr = p.to_array();
            for &(label, idx) in tracked_params(variable) {
                dists.entry(format!("{model_label}/{label}")).or_default().push(arr[idx]);
            }
        } else if let Ok(fitres) = estimate_params_from_sweep(&curve, law) {
            for &(label, _) in tracked_params(variable) {
                dists
                    .entry(format!("{model_label}/{label}"))
                    .or_default()
                    .push(fitres.params[fitted_index(variable, label)]);
            }
        }
    }

    // ground truth distributions and KL divergences
    let mut kl = BTreeMap::new();
    if let Some(truth_path) = &truth {
        let text = fs::read_to_string(truth_path).map_err(runtime)?;
        let chems: Vec<polyvisc::synth::SyntheticChemistry> =
            serde_json::from_str(&text).map_err(runtime)?;
        let test_ids: std::collections::BTreeSet<&str> =
            cases.iter().filter_map(|c| c.base.constituents.first()).map(|c| c.smiles.as_str()).collect();
        for chem in chems.iter().filter(|c| test_ids.contains(c.id.as_str())) {
            let arr = chem.true_params.to_array();
            for &(label, idx) in tracked_params(variable) {
                dists.entry(format!("truth/{label}")).or_default().push(arr[idx]);
            }
        }
        for &(label, _) in tracked_params(variable) {
            let t_key = format!("truth/{label}");
            let m_key = format!("{model_label}/{label}");
            if let (Some(t), Some(m)) = (dists.get(&t_key), dists.get(&m_key)) {
                if let Ok(v) = kl_divergence(m, t, bins) {
                    kl.insert(m_key.clone(), v);
                }
            }
        }
    }

    let report = EvaluationReport {
        ome: ome(&all_pred, &all_true).map_err(runtime)?,
        r_squared: r_squared(&all_pred, &all_true).map_err(runtime)?,
        per_trial: vec![TrialMetrics {
            label: format!("{model_label}/{}/seed{seed}", variable_name(variable)),
            ome: ome(&all_pred, &all_true).map_err(runtime)?,
            r_squared: r_squared(&all_pred, &all_true).map_err(runtime)?,
        }],
        parameter_distributions: dists,
        kl_per_parameter: kl,
        tallies: BTreeMap::from([(model_label.to_string(), tallies)]),
        theta_acc,
        theta_fit: th.fit_rms,
    };
    fs::write(out.join("report.json"), report.to_json()).map_err(runtime)?;
    write_curves_csv(&out.join("curves.csv"), &rows).map_err(runtime)?;

    let mut inputs: Vec<&Path> = vec![&dataset, &model_path];
    if let Some(t) = &truth {
        inputs.push(t);
    }
    write_manifest(
        &out,
        "evaluate",
        seed,
        &serde_json::json!({
            "dataset": dataset.display().to_string(),
            "model": model_path.display().to_string(),
            "variable": variable_name(variable),
            "truth": truth.as_ref().map(|p| p.display().to_string()),
            "bins": bins,
            "theta_acc": theta_acc,
        }),
        &inputs,
        &["report.json", "curves.csv"],
    )
}

fn cmd_synth(
    common: Common,
    n_chem: Option<usize>,
    pts: Option<usize>,
    noise_sigma: Option<f64>,
) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let n_chem = resolve(n_chem, &cfg, "n_chem")?.unwrap_or(93);
    let pts = resolve(pts, &cfg, "pts")?.unwrap_or(20);
    let noise_sigma = resolve(noise_sigma, &cfg, "noise_sigma")?.unwrap_or(0.1);
    ensure_out(&out)?;

    let ds = generate(n_chem, pts, noise_sigma, seed).map_err(|e| usage(e.to_string()))?;
    write_dataset(&out.join("dataset.csv"), &ds.samples).map_err(runtime)?;
    fs::write(
        out.join("truth.json"),
        serde_json::to_string_pretty(&ds.chemistries).map_err(runtime)?,
    )
    .map_err(runtime)?;
    write_manifest(
        &out,
        "synth",
        seed,
        &serde_json::json!({"n_chem": n_chem, "pts": pts, "noise_sigma": noise_sigma}),
        &[],
        &["dataset.csv", "truth.json"],
    )
}

fn cmd_report(common: Common, report: Option<PathBuf>) -> CliResult<()> {
    let cfg = ConfigFile::load(&common.config)?;
    let seed: u64 = require(common.seed, &cfg, "seed")?;
    let out: PathBuf = require(common.out, &cfg, "out")?;
    let report_path = require_input(require(report, &cfg, "report")?, "report")?;
    ensure_out(&out)?;

    let text = fs::read_to_string(&report_path).map_err(runtime)?;
    let rep: EvaluationReport = serde_json::from_str(&text).map_err(runtime)?;

    let mut w = csv::Writer::from_path(out.join("tallies.csv")).map_err(runtime)?;
    w.write_record(["model", "success", "fit_but_wrong_trend", "fail", "total"])
        .map_err(runtime)?;
    for (model, t) in &rep.tallies {
        w.write_record([
            model.as_str(),
            &t.success.to_string(),
            &t.fit_but_wrong_trend.to_string(),
            &t.fail.to_string(),
            &t.total().to_string(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;

    let mut w = csv::Writer::from_path(out.join("kl.csv")).map_err(runtime)?;
    w.write_record(["parameter", "kl"]).map_err(runtime)?;
    for (k, v) in &rep.kl_per_parameter {
        w.write_record([k.as_str(), &format!("{v}")]).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;

    let mut w = csv::Writer::from_path(out.join("trials.csv")).map_err(runtime)?;
    w.write_record(["label", "ome", "r_squared"]).map_err(runtime)?;
    for t in &rep.per_trial {
        w.write_record([t.label.as_str(), &format!("{}", t.ome), &format!("{}", t.r_squared)])
            .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;

    write_manifest(
        &out,
        "report",
        seed,
        &serde_json::json!({"report": report_path.display().to_string()}),
        &[&report_path],
        &["tallies.csv", "kl.csv", "trials.csv"],
    )
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest { common, dataset } => cmd_ingest(common, dataset),
        Command::Split { common, dataset, variable } => cmd_split(common, dataset, variable),
        Command::Train { common, dataset, kind, split, w_alpha, epochs, batch, trials } => {
            cmd_train(common, dataset, kind, split, w_alpha, epochs, batch, trials)
        }
        Command::Predict { common, dataset, model } => cmd_predict(common, dataset, model),
        Command::FitParams { common, dataset, variable } => {
            cmd_fit_params(common, dataset, variable)
        }
        Command::Extrapolate { common, dataset, model, variable, theta_acc } => {
            cmd_extrapolate(common, dataset, model, variable, theta_acc)
        }
        Command::Evaluate { common, dataset, model, variable, truth, bins, theta_acc } => {
            cmd_evaluate(common, dataset, model, variable, truth, bins, theta_acc)
        }
        Command::Synth { common, n_chem, pts, noise_sigma } => {
            cmd_synth(common, n_chem, pts, noise_sigma)
        }
        Command::Report { common, report } => cmd_report(common, report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RHEO_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
