//! Run configuration: built-in defaults, TOML files and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use steallab::attack::AttackConfig;
use steallab::datasets::{progression_counts, TaskSpec, PRESETS};
use steallab::models::{Capacity, ClassifierFamily, ClassifierSpec, GeneratorSpec, InputKind};
use steallab::train::TrainConfig;
use steallab_autodiff::UpsampleMode;

/// Error raised for invalid configuration; maps to the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    RandomNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimConfig {
    /// Directory written by `train-victim`; when set, no victim is trained.
    pub path: Option<PathBuf>,
    pub capacity: Capacity,
    /// Per-class training counts; the victim trains on this subsample.
    pub class_counts: Option<Vec<usize>>,
    pub train: TrainConfig,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            path: None,
            capacity: Capacity::Small,
            class_counts: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloneConfig {
    /// Defaults to the victim's capacity.
    pub capacity: Option<Capacity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_blocks: usize,
    pub latent_dim: usize,
    /// Defaults to the preset width for the output kind.
    pub base_channels: Option<usize>,
    pub upsample: Upsample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            latent_dim: GeneratorSpec::DEFAULT_LATENT,
            base_channels: None,
            upsample: Upsample::Nearest,
        }
    }
}

impl GeneratorConfig {
    pub fn spec(&self, output: InputKind) -> GeneratorSpec {
        let preset = GeneratorSpec::for_output(output);
        GeneratorSpec {
            latent_dim: self.latent_dim,
            num_blocks: self.num_blocks,
            base_channels: self.base_channels.unwrap_or(preset.base_channels),
            upsample: match self.upsample {
                Upsample::Nearest => UpsampleMode::Nearest,
                Upsample::Bilinear => UpsampleMode::Bilinear,
            },
            ..preset
        }
    }
}

/// Everything needed to reproduce a run. Every field has a default, so a
/// config file only lists what it changes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<TaskSpec>,
    pub victim: VictimConfig,
    pub clone: CloneConfig,
    pub generator: GeneratorConfig,
    pub attack: AttackConfig,
    pub baseline: Option<Baseline>,
    /// Record wall-clock seconds in metric rows; off keeps reports byte-identical across reruns.
    pub timing: bool,
}

const TASK_FIELDS: [&str; 6] = [
    "family",
    "num_classes",
    "train_per_class",
    "test_per_class",
    "separation",
    "seed",
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        if let Some(task) = value.get("task").and_then(toml::Value::as_table) {
            if let Some(missing) = TASK_FIELDS.iter().find(|f| !task.contains_key(**f)) {
                return Err(config_error(format!("missing field `task.{missing}`")));
            }
        }
        RunConfig::deserialize(value).map_err(|e| config_error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Named desk-scale setups. Each sets the task and the model sizes and
    /// learning rates that suit it; the attack keeps its other defaults.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let base = name.strip_suffix("-unbalanced").unwrap_or(name);
        let mut task = TaskSpec::preset(base).ok_or_else(|| {
            config_error(format!(
                "unknown task `{name}`; expected one of {} or blobs-10-unbalanced",
                PRESETS.join(", ")
            ))
        })?;
        task.seed = seed;
        cfg.attack.seed = seed;
        cfg.attack.clone_lr = 0.01;
        cfg.attack.generator_lr = 1e-3;
        cfg.attack.batch_size = 64;
        match base {
            "digits" => {
                cfg.victim.capacity = Capacity::Medium;
                cfg.attack.budget = 500_000;
            }
            _ => cfg.victim.capacity = Capacity::Small,
        }
        if name.ends_with("-unbalanced") {
            if base != "blobs-10" {
                return Err(config_error(format!("no unbalanced variant of `{base}`")));
            }
            cfg.victim.class_counts = Some(progression_counts(10, 320, 40));
        }
        cfg.task = Some(task);
        Ok(cfg)
    }

    pub fn task(&self) -> Result<TaskSpec> {
        self.task
            .ok_or_else(|| config_error("missing field `task.family` (give --task or a [task] table)"))
    }

    pub fn victim_spec(&self, task: &TaskSpec) -> ClassifierSpec {
        classifier_spec(task.input_kind(), task.num_classes, self.victim.capacity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.victim.path.is_none() {
            let task = self.task()?;
            task.validate().map_err(|e| config_error(e.to_string()))?;
            if let Some(counts) = &self.victim.class_counts {
                if counts.len() != task.num_classes {
                    bail!(config_error(format!(
                        "victim.class_counts has {} entries for {} classes",
                        counts.len(),
                        task.num_classes
                    )));
                }
            }
            self.victim
                .train
                .validate()
                .map_err(|e| config_error(e.to_string()))?;
        }
        self.attack.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(())
    }
}

pub fn classifier_spec(input: InputKind, num_classes: usize, capacity: Capacity) -> ClassifierSpec {
    let family = match input {
        InputKind::Vector { .. } => ClassifierFamily::Mlp,
        InputKind::Image { .. } => ClassifierFamily::Conv,
    };
    ClassifierSpec {
        input,
        num_classes,
        capacity,
        family,
    }
}

/// Overrides collected from command-line flags; `None` leaves the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub budget: Option<u64>,
    pub batch_size: Option<usize>,
    pub n_g: Option<usize>,
    pub n_c: Option<usize>,
    pub diversity: Option<steallab::losses::DiversityVariant>,
    pub clone_loss: Option<steallab::losses::CloneLoss>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub baseline: Option<Baseline>,
    pub timing: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.attack;
        macro_rules! set {
            ($($field:ident => $target:expr),*) => {$(
                if let Some(v) = self.$field.clone() { $target = v; }
            )*};
        }
        set!(budget => a.budget, batch_size => a.batch_size, n_g => a.n_g, n_c => a.n_c,
             diversity => a.diversity, clone_loss => a.clone_loss, eval_every => a.eval_every);
        if let Some(seed) = self.seed {
            a.seed = seed;
            if let Some(task) = cfg.task.as_mut() {
                task.seed = seed;
            }
        }
        if let Some(b) = self.baseline {
            cfg.baseline = Some(b);
        }
        if self.timing {
            cfg.timing = true;
        }
    }
}

/// Defaults, then the task preset, then the config file, then flags.
pub fn resolve(task: Option<&str>, file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let seed = overrides.seed.unwrap_or(0);
    let mut cfg = match (task, file) {
        (_, Some(path)) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(name) = task {
                cfg.task = RunConfig::preset(name, seed)?.task;
            }
            cfg
        }
        (Some(name), None) => RunConfig::preset(name, seed)?,
        (None, None) => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}
