//! `symptom-bench`: orchestrate the pipeline end to end from config files —
//! simulate, train, evaluate, benchmark and export CBD observations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use symptom_core::config::{
    parse_toml, seed_in_toml, BenchmarkFileConfig, EvalFileConfig, ExportFileConfig,
    TrainFileConfig,
};
use symptom_core::data::{load_dataset, write_dataset};
use symptom_core::error::{CoreError, ErrorClass};
use symptom_core::eval::{
    binarize, calibrate_thresholds, export_observations, read_scores_csv, read_thresholds_json,
    score_batch, write_scores_csv, write_thresholds_json,
};
use symptom_core::manifest::{config_digest, write_manifest, RunManifest, MANIFEST_SCHEMA_VERSION};
use symptom_core::model::{ModelKind, MultiVae};
use symptom_core::report::{metrics, run_benchmark, write_report};
use symptom_core::sim::{build_dataset, SimConfig};
use symptom_core::train::{grid_search, train, write_history_csv, TrainedModel};

const SEED_ENV: &str = "SYMPTOM_BENCH_SEED";

#[derive(Parser)]
#[command(
    name = "symptom-bench",
    version,
    about = "Subsystem-aware anomaly detection pipeline: simulate, train, evaluate, benchmark, export observations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file for this command.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Seed override; takes precedence over the config file and the
    /// SYMPTOM_BENCH_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulated dataset (healthy splits plus the labeled
    /// fault test set).
    Simulate(CommonArgs),
    /// Train one model kind on a dataset directory.
    Train(CommonArgs),
    /// Score a dataset's test split with a trained checkpoint and calibrate
    /// best-F1 thresholds.
    Evaluate(CommonArgs),
    /// Run the full four-model benchmark and write the report.
    Benchmark(CommonArgs),
    /// Turn scores and thresholds into binary health observations (JSON
    /// lines) for consistency-based diagnosis.
    ExportObservations(CommonArgs),
}

struct CommandContext {
    name: &'static str,
    config_path: PathBuf,
    config_text: String,
    digest: String,
    out: PathBuf,
    seed_flag: Option<u64>,
    started: Instant,
}

impl CommandContext {
    fn new(name: &'static str, args: &CommonArgs) -> Result<Self, CoreError> {
        let config_text = std::fs::read_to_string(&args.config).map_err(|e| CoreError::Schema {
            file: args.config.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        let digest = config_digest(config_text.as_bytes());
        Ok(CommandContext {
            name,
            config_path: args.config.clone(),
            config_text,
            digest,
            out: args.out.clone(),
            seed_flag: args.seed,
            started: Instant::now(),
        })
    }

    fn file_name(&self) -> String {
        self.config_path.display().to_string()
    }

    /// Seed resolution: `--seed` flag, then the config file, then the
    /// environment fallback.
    fn resolve_seed(&self) -> Option<u64> {
        self.seed_flag
            .or_else(|| seed_in_toml(&self.config_text))
            .or_else(|| std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()))
    }

    fn finish(
        &self,
        seed: Option<u64>,
        inputs: Vec<String>,
        outputs: Vec<String>,
    ) -> Result<(), CoreError> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.name.to_string(),
            config_path: self.file_name(),
            config_digest: self.digest.clone(),
            seed,
            inputs,
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        write_manifest(&self.out, &manifest)
    }
}

fn cmd_simulate(args: &CommonArgs) -> Result<(), CoreError> {
    let ctx = CommandContext::new("simulate", args)?;
    let mut cfg: SimConfig = parse_toml(&ctx.config_text, &ctx.file_name())?;
    if let Some(seed) = ctx.seed_flag {
        cfg.seed = seed;
    }
    let bundle = build_dataset(&cfg)?;
    std::fs::create_dir_all(&ctx.out)?;
    write_dataset(&bundle, &ctx.out)?;
    ctx.finish(
        Some(cfg.seed),
        vec![],
        ["meta.json", "train.csv", "val.csv", "test.csv", "test_labels.csv"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
}

fn cmd_train(args: &CommonArgs) -> Result<(), CoreError> {
    let ctx = CommandContext::new("train", args)?;
    let cfg: TrainFileConfig = parse_toml(&ctx.config_text, &ctx.file_name())?;
    let seed = ctx
        .seed_flag
        .or(cfg.seed)
        .or_else(|| std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()))
        .ok_or_else(|| {
            CoreError::Config(format!(
                "no seed: provide --seed, a seed in the config, or {SEED_ENV}"
            ))
        })?;
    let bundle = load_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(&ctx.out)?;

    let mut train_cfg = cfg.to_train_config(seed);
    let mut tuned_summary = None;
    if train_cfg.grid.is_some() && train_cfg.model_kind != ModelKind::Gmm {
        let search = grid_search(&train_cfg, &bundle)?;
        tuned_summary = Some(serde_json::json!({
            "learning_rate": search.best.learning_rate,
            "beta": search.best.beta,
            "evaluations": search
                .evaluations
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "learning_rate": e.config.learning_rate,
                        "beta": e.config.beta,
                        "val_loss": e.val_loss,
                    })
                })
                .collect::<Vec<_>>(),
        }));
        train_cfg = search.best;
    }
    let outcome = train(&train_cfg, &bundle)?;
    outcome.model.save_checkpoint(&ctx.out.join("checkpoint.json"))?;
    write_history_csv(&ctx.out.join("history.csv"), &outcome.history)?;

    let (param_count, latent) = match &outcome.model {
        TrainedModel::Vae(m) => (Some(m.param_count()), Some(m.arch.total_latent_dim())),
        TrainedModel::Gmm(_) => (None, None),
    };
    let summary = serde_json::json!({
        "model_kind": train_cfg.model_kind.name(),
        "seed": seed,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "epochs_run": outcome.history.len(),
        "parameter_count": param_count,
        "latent_dims": latent,
        "learning_rate": train_cfg.learning_rate,
        "beta": train_cfg.beta,
        "tuning": tuned_summary,
    });
    write_json(&ctx.out.join("train_summary.json"), &summary)?;

    ctx.finish(
        Some(seed),
        vec![cfg.dataset.display().to_string()],
        vec!["checkpoint.json".into(), "history.csv".into(), "train_summary.json".into()],
    )
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CoreError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    use std::io::Write;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Read a checkpoint of any kind, dispatching on `arch.kind`.
fn load_any_checkpoint(
    path: &Path,
    map: &symptom_core::data::SubsystemSignalsMap,
    expected: Option<ModelKind>,
) -> Result<TrainedModel, CoreError> {
    let doc: serde_json::Value =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let kind = doc["arch"]["kind"]
        .as_str()
        .and_then(ModelKind::parse)
        .ok_or_else(|| CoreError::CheckpointMismatch("missing or unknown kind".into()))?;
    if let Some(e) = expected {
        if e != kind {
            return Err(CoreError::KindMismatch {
                expected: e.name().into(),
                got: kind.name().into(),
            });
        }
    }
    match kind {
        ModelKind::Gmm => Ok(TrainedModel::Gmm(symptom_core::gmm::GmmSet::from_checkpoint_json(
            &doc, map,
        )?)),
        _ => Ok(TrainedModel::Vae(MultiVae::from_checkpoint_json(&doc, map, None)?)),
    }
}

fn cmd_evaluate(args: &CommonArgs) -> Result<(), CoreError> {
    let ctx = CommandContext::new("evaluate", args)?;
    let cfg: EvalFileConfig = parse_toml(&ctx.config_text, &ctx.file_name())?;
    let bundle = load_dataset(&cfg.dataset)?;
    let model = load_any_checkpoint(&cfg.checkpoint, &bundle.map, cfg.model_kind)?;
    std::fs::create_dir_all(&ctx.out)?;

    let records = score_batch(&model, &bundle.test, &bundle.map)?;
    let thresholds = calibrate_thresholds(&records, &bundle.labels, &bundle.map)?;
    write_scores_csv(&ctx.out.join("scores.csv"), &records, &bundle.labels, &bundle.map)?;
    write_thresholds_json(&ctx.out.join("thresholds.json"), &thresholds)?;

    let healths = binarize(&records, &thresholds)?;
    let mut doc = serde_json::Map::new();
    let mut all_targets: Vec<String> = bundle.map.subsystems().to_vec();
    all_targets.push("all".into());
    for target in &all_targets {
        let preds: Vec<u8> = healths
            .iter()
            .map(|h| Ok(if target == "all" { h.global as u8 } else { h.get(target)? as u8 }))
            .collect::<Result<Vec<_>, CoreError>>()?;
        let bits = bundle.label_bits(target)?;
        let m = metrics(&preds, &bits)?;
        doc.insert(target.clone(), serde_json::json!(m));
    }
    write_json(&ctx.out.join("metrics.json"), &serde_json::Value::Object(doc))?;

    ctx.finish(
        None,
        vec![cfg.dataset.display().to_string(), cfg.checkpoint.display().to_string()],
        vec!["scores.csv".into(), "thresholds.json".into(), "metrics.json".into()],
    )
}

fn cmd_benchmark(args: &CommonArgs) -> Result<(), CoreError> {
    let ctx = CommandContext::new("benchmark", args)?;
    let mut cfg: BenchmarkFileConfig = parse_toml(&ctx.config_text, &ctx.file_name())?;
    if let Some(seed) = ctx.seed_flag {
        cfg.simulator.seed = seed;
    }
    std::fs::create_dir_all(&ctx.out)?;
    let bundle = build_dataset(&cfg.simulator)?;
    write_dataset(&bundle, &ctx.out.join("data"))?;
    let report = run_benchmark(&bundle, &cfg.benchmark, Some(&ctx.out))?;
    write_report(&report, &bundle.map, &ctx.out)?;
    ctx.finish(
        Some(cfg.simulator.seed),
        vec![],
        vec!["data".into(), "runs".into(), "report.json".into(), "report.md".into()],
    )
}

fn cmd_export(args: &CommonArgs) -> Result<(), CoreError> {
    let ctx = CommandContext::new("export-observations", args)?;
    let cfg: ExportFileConfig = parse_toml(&ctx.config_text, &ctx.file_name())?;
    let bundle = load_dataset(&cfg.dataset)?;
    let (records, _) = read_scores_csv(&cfg.scores, &bundle.map)?;
    let thresholds = read_thresholds_json(&cfg.thresholds, &bundle.map)?;
    let healths = binarize(&records, &thresholds)?;
    let ids: Vec<u64> = records.iter().map(|r| r.window_id).collect();
    std::fs::create_dir_all(&ctx.out)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.out.join("observations.jsonl"))?);
    export_observations(&ids, &healths, &mut f)?;
    use std::io::Write;
    f.flush()?;
    ctx.finish(
        None,
        vec![
            cfg.dataset.display().to_string(),
            cfg.scores.display().to_string(),
            cfg.thresholds.display().to_string(),
        ],
        vec!["observations.jsonl".into()],
    )
}

fn run() -> Result<(), CoreError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints usage; unknown flags and subcommands exit 1,
            // --help and --version exit 0
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::ExportObservations(args) => cmd_export(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Validation => ExitCode::from(1),
                ErrorClass::Runtime => ExitCode::from(2),
            }
        }
    }
}
