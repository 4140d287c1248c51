//! Run configuration: defaults, a flat key-value file format, validation,
//! and the canonical snapshot.
//!
//! The file format is one `key = value` pair per line; blank lines and lines
//! starting with `#` are ignored. Unknown and duplicate keys are errors, so
//! a typo cannot silently fall back to a default. [`TrainConfig::to_flat_string`]
//! writes every key explicitly in a fixed order; parsing that snapshot
//! reproduces the config exactly, which is what makes run directories
//! self-describing.

use std::path::PathBuf;

use crate::attacks::{AttackConfig, AttackObjective};
use crate::datasets::{self, Dataset};
use crate::error::{Error, Result};
use crate::numerics::rng::Seed;

/// Which robust loss the adversarial model trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustKind {
    /// No adversarial model at all; only the standard model trains.
    StandardOnly,
    /// Cross-entropy on attacked inputs.
    VanillaAt,
    /// Natural cross-entropy plus beta-weighted KL to attacked predictions.
    Trades,
    /// Vanilla AT plus logit coupling to the standard model.
    VanillaAtLbgat,
    /// TRADES plus logit coupling to the standard model.
    TradesLbgat,
}

impl RobustKind {
    pub fn parse(s: &str) -> Result<RobustKind> {
        match s {
            "standard_only" => Ok(RobustKind::StandardOnly),
            "vanilla_at" => Ok(RobustKind::VanillaAt),
            "trades" => Ok(RobustKind::Trades),
            "vanilla_at+lbgat" => Ok(RobustKind::VanillaAtLbgat),
            "trades+lbgat" => Ok(RobustKind::TradesLbgat),
            other => Err(Error::config(format!(
                "unknown method {other:?} (expected standard_only, vanilla_at, trades, \
                 vanilla_at+lbgat, or trades+lbgat)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RobustKind::StandardOnly => "standard_only",
            RobustKind::VanillaAt => "vanilla_at",
            RobustKind::Trades => "trades",
            RobustKind::VanillaAtLbgat => "vanilla_at+lbgat",
            RobustKind::TradesLbgat => "trades+lbgat",
        }
    }

    pub fn trains_adversarial_model(&self) -> bool {
        !matches!(self, RobustKind::StandardOnly)
    }

    pub fn uses_trades(&self) -> bool {
        matches!(self, RobustKind::Trades | RobustKind::TradesLbgat)
    }

    pub fn uses_lbgat(&self) -> bool {
        matches!(self, RobustKind::VanillaAtLbgat | RobustKind::TradesLbgat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSchedule {
    Constant,
    SigmoidRamp,
}

impl LambdaSchedule {
    pub fn parse(s: &str) -> Result<LambdaSchedule> {
        match s {
            "constant" => Ok(LambdaSchedule::Constant),
            "sigmoid_ramp" => Ok(LambdaSchedule::SigmoidRamp),
            other => Err(Error::config(format!(
                "unknown lambda schedule {other:?} (expected constant or sigmoid_ramp)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LambdaSchedule::Constant => "constant",
            LambdaSchedule::SigmoidRamp => "sigmoid_ramp",
        }
    }
}

/// Everything that selects and weights the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub robust_kind: RobustKind,
    /// Align the adversarial model's neighbor graph to the standard model's.
    pub use_topology_regularizer: bool,
    /// Ablation: penalize raw distance-matrix differences instead of graphs.
    pub use_absolute_relation: bool,
    /// Ablation: let the alignment gradient also reach the standard model
    /// (normally its side of the loss is a detached constant).
    pub topology_into_standard: bool,
    pub trades_beta: f64,
    pub lbgat_gamma: f64,
    pub lambda_base: f64,
    pub lambda_schedule: LambdaSchedule,
    /// Alternate reading of the ramp exponent's sign grouping; see
    /// [`super::lambda_at`].
    pub lambda_exp_variant: bool,
}

impl MethodSpec {
    pub fn regularizer_active(&self) -> bool {
        self.use_topology_regularizer || self.use_absolute_relation
    }
}

/// Which dataset a run trains on.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    TwoMoons { n: usize, noise: f64 },
    GaussianBlobs { n: usize, classes: usize, spread: f64 },
    Csv { path: PathBuf },
}

impl DataSpec {
    /// Materializes the dataset; generators draw from `seed`.
    pub fn generate(&self, seed: Seed) -> Result<Dataset> {
        match self {
            DataSpec::TwoMoons { n, noise } => datasets::two_moons(*n, *noise, seed),
            DataSpec::GaussianBlobs { n, classes, spread } => {
                datasets::gaussian_blobs(*n, *classes, *spread, seed)
            }
            DataSpec::Csv { path } => datasets::load_csv(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch fractions at which the learning rate decays.
    pub lr_milestones: Vec<f64>,
    pub lr_decay_factor: f64,
    /// Layer widths of the standard model.
    pub std_dims: Vec<usize>,
    /// Layer widths of the adversarial model.
    pub adv_dims: Vec<usize>,
    pub method: MethodSpec,
    pub attack: AttackConfig,
    /// Skip the standard model's update step (pair with `standard_init_ckpt`
    /// to train against a fixed pre-trained model).
    pub freeze_standard: bool,
    pub standard_init_ckpt: Option<PathBuf>,
    /// Write checkpoints every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Record real wall-clock times in metrics. Off by default so reruns of
    /// the same config are byte-identical.
    pub record_wall_clock: bool,
    pub data: DataSpec,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            run_id: "run".into(),
            out_dir: "runs".into(),
            seed: 0,
            epochs: 10,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            lr_milestones: vec![0.75, 0.9],
            lr_decay_factor: 0.1,
            std_dims: vec![2, 64, 32, 2],
            adv_dims: vec![2, 64, 32, 2],
            method: MethodSpec {
                robust_kind: RobustKind::VanillaAt,
                use_topology_regularizer: false,
                use_absolute_relation: false,
                topology_into_standard: false,
                trades_beta: 6.0,
                lbgat_gamma: 1.0,
                lambda_base: 5.0,
                lambda_schedule: LambdaSchedule::Constant,
                lambda_exp_variant: false,
            },
            attack: AttackConfig {
                epsilon: 0.05,
                step_size: 0.0125,
                iters: 10,
                random_start: true,
                objective: AttackObjective::CrossEntropy,
            },
            freeze_standard: false,
            standard_init_ckpt: None,
            checkpoint_every: 0,
            record_wall_clock: false,
            data: DataSpec::TwoMoons { n: 2000, noise: 0.1 },
            data_seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|part| parse_num(key, part.trim())).collect()
}

fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Parses the flat key-value format, starting from defaults.
    pub fn from_flat_str(text: &str) -> Result<TrainConfig> {
        TrainConfig::from_entries(TrainConfig::lex(text)?, &[])
    }

    /// Like [`TrainConfig::from_flat_str`], then applies `(key, value)`
    /// overrides on top. Overrides may repeat file keys and each other;
    /// the last occurrence wins.
    pub fn from_flat_str_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<TrainConfig> {
        TrainConfig::from_entries(TrainConfig::lex(text)?, overrides)
    }

    /// Splits the text into `(key, value)` pairs, rejecting malformed and
    /// duplicate lines.
    fn lex(text: &str) -> Result<Vec<(String, String)>> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (index, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got {raw:?}", index + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if entries.iter().any(|(k, _)| k == key) {
                return Err(Error::config(format!("duplicate key {key:?}")));
            }
            entries.push((key.to_string(), value.to_string()));
        }
        Ok(entries)
    }

    fn from_entries(
        entries: Vec<(String, String)>,
        overrides: &[(String, String)],
    ) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        // Dataset and attack-objective keys interact with others, so collect
        // first and resolve afterwards.
        let mut objective_set = false;
        let mut data_seed_set = false;
        let mut dataset = "two_moons".to_string();
        let (mut data_n, mut data_noise) = (2000usize, 0.1f64);
        let (mut data_classes, mut data_spread) = (3usize, 0.08f64);
        let mut data_csv = String::new();

        for (key, value) in entries.iter().chain(overrides) {
            let (key, value) = (key.as_str(), value.as_str());
            match key {
                "run_id" => cfg.run_id = value.to_string(),
                "out_dir" => cfg.out_dir = value.into(),
                "seed" => cfg.seed = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "lr" => cfg.lr = parse_num(key, value)?,
                "momentum" => cfg.momentum = parse_num(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
                "lr_milestones" => cfg.lr_milestones = parse_list(key, value)?,
                "lr_decay_factor" => cfg.lr_decay_factor = parse_num(key, value)?,
                "std_dims" => cfg.std_dims = parse_list(key, value)?,
                "adv_dims" => cfg.adv_dims = parse_list(key, value)?,
                "method" => cfg.method.robust_kind = RobustKind::parse(value)?,
                "trades_beta" => cfg.method.trades_beta = parse_num(key, value)?,
                "lbgat_gamma" => cfg.method.lbgat_gamma = parse_num(key, value)?,
                "use_topology_regularizer" => {
                    cfg.method.use_topology_regularizer = parse_bool(key, value)?
                }
                "use_absolute_relation" => {
                    cfg.method.use_absolute_relation = parse_bool(key, value)?
                }
                "topology_into_standard" => {
                    cfg.method.topology_into_standard = parse_bool(key, value)?
                }
                "lambda_base" => cfg.method.lambda_base = parse_num(key, value)?,
                "lambda_schedule" => {
                    cfg.method.lambda_schedule = LambdaSchedule::parse(value)?
                }
                "lambda_exp_variant" => {
                    cfg.method.lambda_exp_variant = parse_bool(key, value)?
                }
                "attack_epsilon" => cfg.attack.epsilon = parse_num(key, value)?,
                "attack_step" => cfg.attack.step_size = parse_num(key, value)?,
                "attack_iters" => cfg.attack.iters = parse_num(key, value)?,
                "attack_random_start" => cfg.attack.random_start = parse_bool(key, value)?,
                "attack_objective" => {
                    cfg.attack.objective = AttackObjective::parse(value)?;
                    objective_set = true;
                }
                "freeze_standard" => cfg.freeze_standard = parse_bool(key, value)?,
                "standard_init_ckpt" => {
                    cfg.standard_init_ckpt =
                        if value.is_empty() { None } else { Some(value.into()) }
                }
                "checkpoint_every" => cfg.checkpoint_every = parse_num(key, value)?,
                "record_wall_clock" => cfg.record_wall_clock = parse_bool(key, value)?,
                "dataset" => dataset = value.to_string(),
                "data_n" => data_n = parse_num(key, value)?,
                "data_noise" => data_noise = parse_num(key, value)?,
                "data_classes" => data_classes = parse_num(key, value)?,
                "data_spread" => data_spread = parse_num(key, value)?,
                "data_seed" => {
                    cfg.data_seed = parse_num(key, value)?;
                    data_seed_set = true;
                }
                "data_csv" => data_csv = value.to_string(),
                other => return Err(Error::config(format!("unknown key {other:?}"))),
            }
        }

        cfg.data = match dataset.as_str() {
            "two_moons" => DataSpec::TwoMoons { n: data_n, noise: data_noise },
            "gaussian_blobs" => DataSpec::GaussianBlobs {
                n: data_n,
                classes: data_classes,
                spread: data_spread,
            },
            "csv" => {
                if data_csv.is_empty() {
                    return Err(Error::config("dataset csv needs data_csv = <path>"));
                }
                DataSpec::Csv { path: data_csv.into() }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown dataset {other:?} (expected two_moons, gaussian_blobs, or csv)"
                )))
            }
        };
        if !objective_set && cfg.method.robust_kind.uses_trades() {
            cfg.attack.objective = AttackObjective::KlToNatural;
        }
        if !data_seed_set {
            cfg.data_seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        TrainConfig::from_flat_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Canonical snapshot: every key explicit, fixed order. Parsing the
    /// result reproduces `self` exactly.
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("run_id", self.run_id.clone());
        push("out_dir", self.out_dir.display().to_string());
        push("seed", self.seed.to_string());
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("lr", self.lr.to_string());
        push("momentum", self.momentum.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("lr_milestones", join_list(&self.lr_milestones));
        push("lr_decay_factor", self.lr_decay_factor.to_string());
        push("std_dims", join_list(&self.std_dims));
        push("adv_dims", join_list(&self.adv_dims));
        push("method", self.method.robust_kind.name().to_string());
        push("trades_beta", self.method.trades_beta.to_string());
        push("lbgat_gamma", self.method.lbgat_gamma.to_string());
        push(
            "use_topology_regularizer",
            self.method.use_topology_regularizer.to_string(),
        );
        push("use_absolute_relation", self.method.use_absolute_relation.to_string());
        push("topology_into_standard", self.method.topology_into_standard.to_string());
        push("lambda_base", self.method.lambda_base.to_string());
        push("lambda_schedule", self.method.lambda_schedule.name().to_string());
        push("lambda_exp_variant", self.method.lambda_exp_variant.to_string());
        push("attack_epsilon", self.attack.epsilon.to_string());
        push("attack_step", self.attack.step_size.to_string());
        push("attack_iters", self.attack.iters.to_string());
        push("attack_random_start", self.attack.random_start.to_string());
        push("attack_objective", self.attack.objective.name().to_string());
        push("freeze_standard", self.freeze_standard.to_string());
        push(
            "standard_init_ckpt",
            self.standard_init_ckpt
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        push("checkpoint_every", self.checkpoint_every.to_string());
        push("record_wall_clock", self.record_wall_clock.to_string());
        match &self.data {
            DataSpec::TwoMoons { n, noise } => {
                push("dataset", "two_moons".into());
                push("data_n", n.to_string());
                push("data_noise", noise.to_string());
            }
            DataSpec::GaussianBlobs { n, classes, spread } => {
                push("dataset", "gaussian_blobs".into());
                push("data_n", n.to_string());
                push("data_classes", classes.to_string());
                push("data_spread", spread.to_string());
            }
            DataSpec::Csv { path } => {
                push("dataset", "csv".into());
                push("data_csv", path.display().to_string());
            }
        }
        push("data_seed", self.data_seed.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || self.run_id.contains(std::path::is_separator)
            || self.run_id.contains('.')
        {
            return Err(Error::config(format!(
                "run_id {:?} must be non-empty and free of path separators and dots",
                self.run_id
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        let min_batch = if self.method.regularizer_active() { 3 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::config(format!(
                "batch_size {} too small (need >= {min_batch} for this method)",
                self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if !(self.lr_decay_factor.is_finite()
            && self.lr_decay_factor > 0.0
            && self.lr_decay_factor <= 1.0)
        {
            return Err(Error::config(format!(
                "lr_decay_factor {} must be in (0, 1]",
                self.lr_decay_factor
            )));
        }
        for &m in &self.lr_milestones {
            if !(m.is_finite() && 0.0 < m && m <= 1.0) {
                return Err(Error::config(format!(
                    "lr milestone {m} must be an epoch fraction in (0, 1]"
                )));
            }
        }
        for (name, dims) in [("std_dims", &self.std_dims), ("adv_dims", &self.adv_dims)] {
            if dims.len() < 3 || dims.iter().any(|&d| d == 0) {
                return Err(Error::config(format!(
                    "{name} {dims:?} needs at least in/hidden/out layers, all nonzero"
                )));
            }
        }
        if self.std_dims[0] != self.adv_dims[0]
            || self.std_dims.last() != self.adv_dims.last()
        {
            return Err(Error::config(
                "std_dims and adv_dims must share input width and class count",
            ));
        }
        let m = &self.method;
        if m.robust_kind.uses_trades() && !(m.trades_beta.is_finite() && m.trades_beta > 0.0) {
            return Err(Error::config(format!(
                "trades_beta {} must be > 0 for {}",
                m.trades_beta,
                m.robust_kind.name()
            )));
        }
        if m.robust_kind.uses_lbgat() && !(m.lbgat_gamma.is_finite() && m.lbgat_gamma > 0.0) {
            return Err(Error::config(format!(
                "lbgat_gamma {} must be > 0 for {}",
                m.lbgat_gamma,
                m.robust_kind.name()
            )));
        }
        if !(m.lambda_base.is_finite() && m.lambda_base >= 0.0) {
            return Err(Error::config(format!("lambda_base {} must be >= 0", m.lambda_base)));
        }
        if m.use_topology_regularizer && m.use_absolute_relation {
            return Err(Error::config(
                "use_topology_regularizer and use_absolute_relation are mutually exclusive",
            ));
        }
        if m.topology_into_standard && !m.regularizer_active() {
            return Err(Error::config(
                "topology_into_standard needs an active relation regularizer",
            ));
        }
        if m.regularizer_active() && !m.robust_kind.trains_adversarial_model() {
            return Err(Error::config(
                "the relation regularizer needs an adversarial model (method standard_only)",
            ));
        }
        self.attack.validate()?;
        if m.robust_kind.uses_trades() && self.attack.iters > 0 && self.attack.epsilon > 0.0 {
            if self.attack.objective != AttackObjective::KlToNatural {
                return Err(Error::config(format!(
                    "{} needs attack_objective = kl_to_natural, got {}",
                    m.robust_kind.name(),
                    self.attack.objective.name()
                )));
            }
            if !self.attack.random_start {
                return Err(Error::config(
                    "the kl_to_natural objective has a zero gradient at the clean input; \
                     set attack_random_start = true",
                ));
            }
        }
        Ok(())
    }

    /// Paths of the run's artifacts.
    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.metrics.jsonl", self.run_id))
    }

    pub fn checkpoint_path(&self, model: &str, epoch: usize) -> PathBuf {
        self.out_dir.join(format!("{}.{model}.{epoch}.ckpt", self.run_id))
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.config.txt", self.run_id))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.manifest.json", self.run_id))
    }
}
