//! Experiment configuration: a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid configuration. Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::norm::StatsMode;
use crate::switchable::{Omega, SigmaAggregation};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "NORMSWITCH_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormChoice {
    Bn,
    In,
    Ln,
    Gn,
    Sn,
    SnTied,
}

impl NormChoice {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "bn" => NormChoice::Bn,
            "in" => NormChoice::In,
            "ln" => NormChoice::Ln,
            "gn" => NormChoice::Gn,
            "sn" => NormChoice::Sn,
            "sn_tied" => NormChoice::SnTied,
            _ => return Err(Error::Config(format!("unknown norm `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            NormChoice::Bn => "bn",
            NormChoice::In => "in",
            NormChoice::Ln => "ln",
            NormChoice::Gn => "gn",
            NormChoice::Sn => "sn",
            NormChoice::SnTied => "sn_tied",
        }
    }

    pub fn is_switchable(self) -> bool {
        matches!(self, NormChoice::Sn | NormChoice::SnTied)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    RmsProp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Stepwise,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10Binary,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub network: String,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub norm: NormChoice,
    pub gn_groups: usize,
    pub omega: Omega,
    pub sigma_aggregation: SigmaAggregation,
    pub eps: f64,
    pub hard_init_from: Option<PathBuf>,
    pub shards: usize,
    pub per_shard: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub lr0: f64,
    pub lr_reference_batch: usize,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub milestones: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    pub synthetic_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_size: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
    pub fraction: f64,
    pub downsample: usize,
    pub bn_stats: StatsMode,
    pub bn_batches: usize,
    pub bn_decay: f64,
    pub eval_every: usize,
    pub snapshot_epochs: Vec<usize>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: "mini_resnet".into(),
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            norm: NormChoice::Sn,
            gn_groups: 8,
            omega: Omega::full(),
            sigma_aggregation: SigmaAggregation::Std,
            eps: crate::norm::DEFAULT_EPS,
            hard_init_from: None,
            shards: 1,
            per_shard: 32,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-8,
            lr0: 0.1,
            lr_reference_batch: 256,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Stepwise,
            milestones: vec![30, 60, 90],
            epochs: 100,
            seed: 0,
            dataset: DatasetKind::Synthetic,
            train_files: Vec::new(),
            test_files: Vec::new(),
            synthetic_classes: 10,
            synthetic_train: 512,
            synthetic_test: 256,
            synthetic_size: 8,
            synthetic_noise: 0.5,
            synthetic_seed: 0,
            fraction: 1.0,
            downsample: 1,
            bn_stats: StatsMode::BatchAverage,
            bn_batches: 100,
            bn_decay: 0.9,
            eval_every: 0,
            snapshot_epochs: Vec::new(),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| s.parse().map_err(|_| bad(key, v))).collect()
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("invalid value `{v}` for key `{key}`"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn paths(v: &str) -> Vec<PathBuf> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

impl ExperimentConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key. Values are checked individually; cross-key checks
    /// happen in [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let num = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad(key, v));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad(key, v));
        match key {
            "network" => {
                if v != "mini_resnet" {
                    return Err(bad(key, v));
                }
                self.network = v.into();
            }
            "widths" => self.widths = list(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = int(v)?,
            "norm" => self.norm = NormChoice::parse(v).map_err(|_| bad(key, v))?,
            "gn_groups" => self.gn_groups = int(v)?,
            "omega" => self.omega = Omega::parse(v).map_err(|_| bad(key, v))?,
            "sigma_aggregation" => self.sigma_aggregation = SigmaAggregation::parse(v).map_err(|_| bad(key, v))?,
            "eps" => self.eps = num(v)?,
            "hard_init_from" => self.hard_init_from = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "shards" => self.shards = int(v)?,
            "per_shard" => self.per_shard = int(v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd_momentum" => OptimizerKind::SgdMomentum,
                    "rmsprop" => OptimizerKind::RmsProp,
                    _ => return Err(bad(key, v)),
                }
            }
            "momentum" => self.momentum = num(v)?,
            "rmsprop_rho" => self.rmsprop_rho = num(v)?,
            "rmsprop_eps" => self.rmsprop_eps = num(v)?,
            "lr0" => self.lr0 = num(v)?,
            "lr_reference_batch" => self.lr_reference_batch = int(v)?,
            "weight_decay" => self.weight_decay = num(v)?,
            "schedule" => {
                self.schedule = match v {
                    "stepwise" => ScheduleKind::Stepwise,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(bad(key, v)),
                }
            }
            "milestones" => self.milestones = list(key, v)?,
            "epochs" => self.epochs = int(v)?,
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v))?,
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar10_binary" => DatasetKind::Cifar10Binary,
                    _ => return Err(bad(key, v)),
                }
            }
            "train_files" => self.train_files = paths(v),
            "test_files" => self.test_files = paths(v),
            "synthetic_classes" => self.synthetic_classes = int(v)?,
            "synthetic_train" => self.synthetic_train = int(v)?,
            "synthetic_test" => self.synthetic_test = int(v)?,
            "synthetic_size" => self.synthetic_size = int(v)?,
            "synthetic_noise" => self.synthetic_noise = num(v)?,
            "synthetic_seed" => self.synthetic_seed = v.parse().map_err(|_| bad(key, v))?,
            "fraction" => self.fraction = num(v)?,
            "downsample" => self.downsample = int(v)?,
            "bn_stats" => {
                self.bn_stats = match v {
                    "batch_average" => StatsMode::BatchAverage,
                    "moving_average" => StatsMode::MovingAverage,
                    _ => return Err(bad(key, v)),
                }
            }
            "bn_batches" => self.bn_batches = int(v)?,
            "bn_decay" => self.bn_decay = num(v)?,
            "eval_every" => self.eval_every = int(v)?,
            "snapshot_epochs" => self.snapshot_epochs = list(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: &str| Err(Error::Config(format!("key `{key}`: {why}")));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("widths", "need at least one positive width");
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage", "must be positive");
        }
        if self.norm == NormChoice::Gn && (self.gn_groups == 0 || self.widths.iter().any(|w| w % self.gn_groups != 0)) {
            return fail("gn_groups", "must divide every width");
        }
        if self.eps < 0.0 {
            return fail("eps", "must be non-negative");
        }
        if self.shards == 0 || self.per_shard == 0 {
            return fail(if self.shards == 0 { "shards" } else { "per_shard" }, "must be positive");
        }
        if self.lr0 <= 0.0 {
            return fail("lr0", "must be positive");
        }
        if self.lr_reference_batch == 0 {
            return fail("lr_reference_batch", "must be positive");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if !(self.rmsprop_rho > 0.0 && self.rmsprop_rho < 1.0) {
            return fail("rmsprop_rho", "must lie in (0, 1)");
        }
        if self.rmsprop_eps <= 0.0 {
            return fail("rmsprop_eps", "must be positive");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones", "must be strictly increasing");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return fail("fraction", "must lie in (0, 1]");
        }
        if self.downsample == 0 {
            return fail("downsample", "must be positive");
        }
        if self.bn_batches == 0 {
            return fail("bn_batches", "must be positive");
        }
        if !(self.bn_decay > 0.0 && self.bn_decay < 1.0) {
            return fail("bn_decay", "must lie in (0, 1)");
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.synthetic_classes < 2 {
                return fail("synthetic_classes", "need at least two classes");
            }
            if self.synthetic_size == 0 || self.synthetic_train == 0 {
                return fail("synthetic_size", "synthetic images and sets must be non-empty");
            }
            if self.synthetic_noise < 0.0 {
                return fail("synthetic_noise", "must be non-negative");
            }
        } else if self.train_files.is_empty() {
            return fail("train_files", "cifar10_binary needs at least one training file");
        }
        Ok(())
    }

    /// Applies `NORMSWITCH_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Total samples per optimization step.
    pub fn batch_size(&self) -> usize {
        self.shards * self.per_shard
    }

    /// Learning rate after linear scaling by the total batch.
    pub fn scaled_lr(&self) -> f64 {
        self.lr0 * self.batch_size() as f64 / self.lr_reference_batch as f64
    }

    /// Canonical text listing every key; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let paths = |p: &[PathBuf]| p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("network", self.network.clone()),
            ("widths", join(&self.widths)),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("norm", self.norm.name().into()),
            ("gn_groups", self.gn_groups.to_string()),
            ("omega", self.omega.label()),
            ("sigma_aggregation", self.sigma_aggregation.name().into()),
            ("eps", format!("{:e}", self.eps)),
            ("hard_init_from", opt_path(&self.hard_init_from)),
            ("shards", self.shards.to_string()),
            ("per_shard", self.per_shard.to_string()),
            (
                "optimizer",
                match self.optimizer {
                    OptimizerKind::SgdMomentum => "sgd_momentum",
                    OptimizerKind::RmsProp => "rmsprop",
                }
                .into(),
            ),
            ("momentum", self.momentum.to_string()),
            ("rmsprop_rho", self.rmsprop_rho.to_string()),
            ("rmsprop_eps", format!("{:e}", self.rmsprop_eps)),
            ("lr0", self.lr0.to_string()),
            ("lr_reference_batch", self.lr_reference_batch.to_string()),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            (
                "schedule",
                match self.schedule {
                    ScheduleKind::Stepwise => "stepwise",
                    ScheduleKind::Cosine => "cosine",
                }
                .into(),
            ),
            ("milestones", join(&self.milestones)),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            (
                "dataset",
                match self.dataset {
                    DatasetKind::Synthetic => "synthetic",
                    DatasetKind::Cifar10Binary => "cifar10_binary",
                }
                .into(),
            ),
            ("train_files", paths(&self.train_files)),
            ("test_files", paths(&self.test_files)),
            ("synthetic_classes", self.synthetic_classes.to_string()),
            ("synthetic_train", self.synthetic_train.to_string()),
            ("synthetic_test", self.synthetic_test.to_string()),
            ("synthetic_size", self.synthetic_size.to_string()),
            ("synthetic_noise", self.synthetic_noise.to_string()),
            ("synthetic_seed", self.synthetic_seed.to_string()),
            ("fraction", self.fraction.to_string()),
            ("downsample", self.downsample.to_string()),
            ("bn_stats", self.bn_stats.name().into()),
            ("bn_batches", self.bn_batches.to_string()),
            ("bn_decay", self.bn_decay.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("snapshot_epochs", join(&self.snapshot_epochs)),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = ExperimentConfig::parse(
            "norm = sn_tied\nomega = ln, bn # subset\nshards = 4\nper_shard = 2\nschedule = cosine\nsnapshot_epochs = 3,6\nsigma_aggregation = var\nbn_stats = moving_average\n",
        )
        .unwrap();
        assert_eq!(cfg.omega, Omega::parse("ln,bn").unwrap());
        assert_eq!(cfg.batch_size(), 8);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let msg = |t: &str| ExperimentConfig::parse(t).unwrap_err().to_string();
        assert!(msg("learning_rate = 0.1").contains("learning_rate"));
        assert!(msg("epochs = many").contains("epochs"));
        assert!(msg("seed = 1\nseed = 2").contains("seed"));
        assert!(msg("fraction = 0").contains("fraction"));
        assert!(msg("norm = gn\ngn_groups = 3").contains("gn_groups"));
        assert!(msg("just words").contains("line 1"));
    }

    #[test]
    fn scaled_lr_is_linear_in_batch() {
        let cfg = ExperimentConfig::parse("shards = 8\nper_shard = 32\nlr0 = 0.1\nlr_reference_batch = 256").unwrap();
        assert!((cfg.scaled_lr() - 0.1).abs() < 1e-15);
        let cfg = ExperimentConfig::parse("shards = 4\nper_shard = 2").unwrap();
        assert!((cfg.scaled_lr() - 0.1 * 8.0 / 256.0).abs() < 1e-15);
    }
}
