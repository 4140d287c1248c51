//! Command-line entry point for training, evaluation, and data tooling.
//!
//! Every command is non-interactive and deterministic for a given flag set.
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or
//! checkpoint error, 4 numerical failure.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use topoadv::attacks::{AttackConfig, AttackObjective};
use topoadv::datasets::{self, Dataset};
use topoadv::error::{Error, Result};
use topoadv::evaluation::{self, EvalConfig, TopologyScoreConfig};
use topoadv::model::Mlp;
use topoadv::numerics::rng::Seed;
use topoadv::training::{self, DataSpec, TrainConfig};

#[derive(Parser)]
#[command(
    name = "topoadv",
    about = "Adversarial training laboratory with topology-preserving regularization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the standard and adversarial models from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracies and topology scores as JSON.
    Evaluate(EvaluateArgs),
    /// Compute the kNN topology score of a checkpoint.
    TopologyScore(TopologyScoreArgs),
    /// Train TRADES across a beta grid and correlate beta with the score.
    SweepBeta(SweepBetaArgs),
    /// Export penultimate-layer features as CSV for external plotting.
    ExportFeatures(ExportFeaturesArgs),
    /// Generate a synthetic dataset and write it as CSV.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file in the flat `key = value` format.
    #[arg(long)]
    config: PathBuf,
    /// Override any config key, e.g. `--set epochs=40`; repeatable, applied
    /// in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set run_id=...`.
    #[arg(long)]
    run_id: Option<String>,
    /// Shorthand for `--set out_dir=...`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Shorthand for `--set seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set epochs=...`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--set method=...`.
    #[arg(long)]
    method: Option<String>,
    /// Shorthand for `--set trades_beta=...`.
    #[arg(long)]
    trades_beta: Option<f64>,
    /// Shorthand for `--set lambda_base=...`.
    #[arg(long)]
    lambda_base: Option<f64>,
}

/// Dataset selection, shared by the evaluation-side commands. Synthetic
/// test splits come from a fresh draw of the same spec; a CSV dataset is
/// its own test split unless `--test-csv` names another file.
#[derive(Args)]
struct DataFlags {
    /// two_moons, gaussian_blobs, or csv.
    #[arg(long, default_value = "two_moons")]
    dataset: String,
    /// Sample count for synthetic datasets.
    #[arg(long, default_value_t = 2000)]
    data_n: usize,
    /// Gaussian noise sigma for two_moons.
    #[arg(long, default_value_t = 0.1)]
    data_noise: f64,
    /// Class count for gaussian_blobs.
    #[arg(long, default_value_t = 3)]
    data_classes: usize,
    /// Cluster spread for gaussian_blobs.
    #[arg(long, default_value_t = 0.08)]
    data_spread: f64,
    /// Input CSV path when --dataset csv.
    #[arg(long)]
    data_csv: Option<PathBuf>,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Separate test CSV when --dataset csv.
    #[arg(long)]
    test_csv: Option<PathBuf>,
}

impl DataFlags {
    fn spec(&self) -> Result<DataSpec> {
        Ok(match self.dataset.as_str() {
            "two_moons" => DataSpec::TwoMoons { n: self.data_n, noise: self.data_noise },
            "gaussian_blobs" => DataSpec::GaussianBlobs {
                n: self.data_n,
                classes: self.data_classes,
                spread: self.data_spread,
            },
            "csv" => DataSpec::Csv {
                path: self
                    .data_csv
                    .clone()
                    .ok_or_else(|| Error::config("--dataset csv needs --data-csv"))?,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown dataset {other:?} (expected two_moons, gaussian_blobs, or csv)"
                )))
            }
        })
    }

    fn support(&self) -> Result<Dataset> {
        self.spec()?.generate(Seed(self.data_seed))
    }

    fn test(&self) -> Result<Dataset> {
        match (self.spec()?, &self.test_csv) {
            (_, Some(path)) => datasets::load_csv(path),
            (spec @ DataSpec::Csv { .. }, None) => spec.generate(Seed(self.data_seed)),
            (spec, None) => spec.generate(Seed(self.data_seed).child_str("eval")),
        }
    }
}

/// Attack settings for evaluation commands; defaults give PGD-20.
#[derive(Args)]
struct AttackFlags {
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0125)]
    step: f64,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// cross_entropy, margin, or kl_to_natural.
    #[arg(long, default_value = "cross_entropy")]
    objective: String,
    /// Start from a random point in the epsilon ball.
    #[arg(long, default_value_t = false)]
    random_start: bool,
    /// Seed for attack randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AttackFlags {
    fn config(&self) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step,
            iters: self.iters,
            random_start: self.random_start,
            objective: AttackObjective::parse(&self.objective)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    attack: AttackFlags,
    /// Neighbor count for the topology score.
    #[arg(long, default_value_t = 30)]
    k: usize,
    /// Include attacked support points in the kNN support set.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    adversarial_support: bool,
}

#[derive(Args)]
struct TopologyScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long, default_value_t = 30)]
    k: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    adversarial_support: bool,
}

#[derive(Args)]
struct SweepBetaArgs {
    /// Base config file; each cell overrides method, beta, and seed.
    #[arg(long)]
    config: PathBuf,
    /// Config overrides applied before the sweep, as in train.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Comma-separated beta values.
    #[arg(long, default_value = "1,2,4,6", value_delimiter = ',')]
    betas: Vec<f64>,
    /// Comma-separated run seeds.
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated neighbor counts to score at.
    #[arg(long, default_value = "30", value_delimiter = ',')]
    k: Vec<usize>,
    /// Print the full result as JSON instead of a table.
    #[arg(long, default_value_t = false)]
    json: bool,
}

#[derive(Args)]
struct ExportFeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    attack: AttackFlags,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Value of the `split` column.
    #[arg(long, default_value = "test")]
    split: String,
    /// Skip the attacked rows.
    #[arg(long, default_value_t = false)]
    natural_only: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataFlags,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Written next to the other run artifacts as `{run_id}.manifest.json`.
/// The embedded snapshot is byte-identical to the resolved config file.
#[derive(Serialize)]
struct RunManifest {
    run_id: String,
    seed: u64,
    config_snapshot: String,
    started_unix: u64,
    finished_unix: u64,
    config_snapshot_path: String,
    metrics_path: String,
    checkpoint_paths: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Shape { .. } => 2,
                Error::Io(_) | Error::Checkpoint(_) | Error::Parse { .. } => 3,
                Error::NonFinite(_) | Error::Degenerate(_) => 4,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::TopologyScore(args) => cmd_topology_score(args),
        Command::SweepBeta(args) => cmd_sweep_beta(args),
        Command::ExportFeatures(args) => cmd_export_features(args),
        Command::GenData(args) => cmd_gen_data(args),
    }
}

fn parse_overrides(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|entry| {
            entry
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    Error::config(format!("--set expects KEY=VALUE, got {entry:?}"))
                })
        })
        .collect()
}

fn load_config(path: &PathBuf, overrides: Vec<(String, String)>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    TrainConfig::from_flat_str_with_overrides(&text, &overrides)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut overrides = parse_overrides(&args.sets)?;
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push((key.to_string(), v));
        }
    };
    push("run_id", args.run_id);
    push("out_dir", args.out_dir.map(|p| p.display().to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("epochs", args.epochs.map(|v| v.to_string()));
    push("method", args.method);
    push("trades_beta", args.trades_beta.map(|v| v.to_string()));
    push("lambda_base", args.lambda_base.map(|v| v.to_string()));

    let cfg = load_config(&args.config, overrides)?;
    let started_unix = unix_now();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let snapshot = cfg.to_flat_string();
    std::fs::write(cfg.snapshot_path(), &snapshot)?;

    let data = cfg.data.generate(Seed(cfg.data_seed))?;
    let (_, _, records) = training::train(&cfg, &data)?;

    let mut checkpoint_paths = Vec::new();
    let mut push_ckpt = |epoch: usize| {
        checkpoint_paths.push(cfg.checkpoint_path("standard", epoch).display().to_string());
        if cfg.method.robust_kind.trains_adversarial_model() {
            checkpoint_paths
                .push(cfg.checkpoint_path("adversarial", epoch).display().to_string());
        }
    };
    if cfg.checkpoint_every > 0 {
        for epoch in (cfg.checkpoint_every..cfg.epochs).step_by(cfg.checkpoint_every) {
            push_ckpt(epoch);
        }
    }
    push_ckpt(cfg.epochs);

    let manifest = RunManifest {
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        config_snapshot: snapshot,
        started_unix,
        finished_unix: unix_now(),
        config_snapshot_path: cfg.snapshot_path().display().to_string(),
        metrics_path: cfg.metrics_path().display().to_string(),
        checkpoint_paths,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    std::fs::write(cfg.manifest_path(), manifest_json + "\n")?;

    let last = records.last().expect("validated configs train at least one epoch");
    println!(
        "run {}: {} epochs, natural_acc {:.4}, robust_acc {:.4}",
        cfg.run_id, cfg.epochs, last.natural_acc, last.robust_acc
    );
    println!("metrics: {}", cfg.metrics_path().display());
    println!("manifest: {}", cfg.manifest_path().display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (model, _, _) = Mlp::load(&args.checkpoint)?;
    let support = args.data.support()?;
    let test = args.data.test()?;
    let attack = args.attack.config()?;
    let cfg = EvalConfig {
        score: TopologyScoreConfig {
            k: args.k,
            include_adversarial_support: args.adversarial_support,
            support_attack: attack.clone(),
        },
        attack,
    };
    let report = evaluation::evaluate(&model, &support, &test, &cfg, Seed(args.attack.seed))?;
    let json = serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?;
    println!("{json}");
    Ok(())
}

fn cmd_topology_score(args: TopologyScoreArgs) -> Result<()> {
    let (model, _, _) = Mlp::load(&args.checkpoint)?;
    let support = args.data.support()?;
    let test = args.data.test()?;
    let attack = args.attack.config()?;
    let cfg = TopologyScoreConfig {
        k: args.k,
        include_adversarial_support: args.adversarial_support,
        support_attack: attack,
    };
    let score = evaluation::topology_score(
        &model,
        &support,
        &test,
        &cfg,
        Seed(args.attack.seed).child_str("score-support"),
    )?;
    println!("{{\"k\": {}, \"topology_score\": {score}}}", args.k);
    Ok(())
}

fn cmd_sweep_beta(args: SweepBetaArgs) -> Result<()> {
    let overrides = parse_overrides(&args.sets)?;
    let cfg = load_config(&args.config, overrides)?;
    let score = TopologyScoreConfig::default();
    let result = evaluation::sweep_beta(&cfg, &args.betas, &args.seeds, &score, &args.k)?;

    if args.json {
        let json = serde_json::to_string_pretty(&result).map_err(std::io::Error::other)?;
        println!("{json}");
        return Ok(());
    }

    let score_headers: Vec<String> =
        result.ks.iter().map(|k| format!("score_k{k}")).collect();
    println!("beta\tseed\tnatural_acc\t{}", score_headers.join("\t"));
    for cell in &result.cells {
        let scores: Vec<String> = cell.scores.iter().map(|s| format!("{s:.4}")).collect();
        println!(
            "{}\t{}\t{:.4}\t{}",
            cell.beta,
            cell.seed,
            cell.natural_acc,
            scores.join("\t")
        );
    }
    for (ki, k) in result.ks.iter().enumerate() {
        let mean = match result.mean_spearman[ki] {
            Some(v) => format!("{v:.4}"),
            None => "undefined".to_string(),
        };
        let per_seed: Vec<String> = result.per_seed_spearman[ki]
            .iter()
            .map(|r| match r {
                Some(v) => format!("{v:.4}"),
                None => "undefined".to_string(),
            })
            .collect();
        println!("spearman k={k}: mean {mean} (per seed: {})", per_seed.join(", "));
    }
    Ok(())
}

fn cmd_export_features(args: ExportFeaturesArgs) -> Result<()> {
    let (model, _, _) = Mlp::load(&args.checkpoint)?;
    let data = args.data.support()?;
    let attack = if args.natural_only { None } else { Some(args.attack.config()?) };
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    evaluation::export_features(
        &model,
        &data,
        attack.as_ref(),
        &args.split,
        Seed(args.attack.seed),
        &mut out,
    )?;
    out.flush()?;
    let rows = data.len() * if args.natural_only { 1 } else { 2 };
    println!("wrote {rows} feature rows to {}", args.out.display());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let data = args.data.support()?;
    datasets::save_csv(&args.out, &data)?;
    println!(
        "wrote {} samples ({} classes) to {}",
        data.len(),
        data.num_classes,
        args.out.display()
    );
    Ok(())
}
