//! Single runs: victim training and attacks, with their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use steallab::attack::{Attack, AttackObserver, EvalPoint, EvalSet};
use steallab::datasets::{self, generate, make_unbalanced, LabeledDataset};
use steallab::metrics::{emit_report, MetricRow, ReportFormat};
use steallab::models::{
    load_classifier, save_classifier, save_generator, ClassifierModel, GeneratorModel,
};
use steallab::oracle::VictimOracle;
use steallab::seed::{fnv1a, SeedStreams, CLONE_INIT, GENERATOR_INIT, VICTIM_INIT};
use steallab::train::{fit, FitReport};

use crate::config::{classifier_spec, Baseline, RunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const VICTIM_MODEL: &str = "victim.model";
pub const TRAIN_DATA: &str = "train.data";
pub const TEST_DATA: &str = "test.data";
pub const CLONE_MODEL: &str = "clone.model";
pub const GENERATOR_MODEL: &str = "generator.model";
pub const METRICS: &str = "metrics.csv";
pub const TRANSCRIPT: &str = "transcript.csv";
pub const FIT_REPORT: &str = "victim-fit.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainVictim,
    Attack,
}

/// Artifact locations. Relative paths resolve against the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub victim: PathBuf,
    pub test_data: PathBuf,
    pub train_data: Option<PathBuf>,
    pub clone: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
}

/// Written before any work starts; enough to repeat the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub run_id: String,
    pub config: RunConfig,
    pub seed: u64,
    pub artifacts: Artifacts,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: Command, run_id: &str, config: &RunConfig) -> Self {
        let external = config.victim.path.clone();
        let victim_file = |name: &str| match &external {
            Some(dir) => dir.join(name),
            None => PathBuf::from(name),
        };
        let attack = command == Command::Attack;
        Self {
            command,
            run_id: run_id.to_string(),
            config: config.clone(),
            seed: config.attack.seed,
            artifacts: Artifacts {
                victim: victim_file(VICTIM_MODEL),
                test_data: victim_file(TEST_DATA),
                train_data: external.is_none().then(|| PathBuf::from(TRAIN_DATA)),
                clone: attack.then(|| PathBuf::from(CLONE_MODEL)),
                generator: (attack && config.baseline.is_none()).then(|| PathBuf::from(GENERATOR_MODEL)),
                report: attack.then(|| PathBuf::from(METRICS)),
                transcript: attack.then(|| PathBuf::from(TRANSCRIPT)),
            },
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Fingerprint of everything that defines a cell except seeds, paths and timing.
pub fn run_fingerprint(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.attack.seed = 0;
    if let Some(t) = c.task.as_mut() {
        t.seed = 0;
    }
    c.victim.path = None;
    c.timing = false;
    format!("{:016x}", fnv1a(serde_json::to_string(&c).expect("config serializes").as_bytes()))
}

fn prepare(command: Command, run_id: &str, cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest::new(command, run_id, cfg);
    manifest.write(out)?;
    Ok(manifest)
}

pub struct VictimOutcome {
    pub victim: ClassifierModel,
    pub test: LabeledDataset,
    pub fit: FitReport,
}

fn train_victim_into(cfg: &RunConfig, out: &Path) -> Result<VictimOutcome> {
    let task = cfg.task()?;
    let (train, test) = generate(&task)?;
    let train = match &cfg.victim.class_counts {
        Some(counts) => make_unbalanced(&train, counts, task.seed)?,
        None => train,
    };
    let spec = cfg.victim_spec(&task);
    let streams = SeedStreams::new(cfg.attack.seed);
    let mut victim = ClassifierModel::build(spec, &mut streams.rng(VICTIM_INIT))?;
    let fit = fit(&mut victim, &train, &test, &cfg.victim.train, cfg.attack.seed)?;
    info!(
        "victim: train accuracy {:.4}, test accuracy {:.4} ({} parameters)",
        fit.train_accuracy,
        fit.test_accuracy,
        victim.param_count()
    );
    save_classifier(&victim, &out.join(VICTIM_MODEL))?;
    datasets::save(&train, &out.join(TRAIN_DATA))?;
    datasets::save(&test, &out.join(TEST_DATA))?;
    fs::write(out.join(FIT_REPORT), serde_json::to_string_pretty(&fit)? + "\n")?;
    Ok(VictimOutcome { victim, test, fit })
}

/// Trains a victim on the configured task and saves it with its data splits.
pub fn train_victim(cfg: &RunConfig, out: &Path) -> Result<VictimOutcome> {
    prepare(Command::TrainVictim, "victim", cfg, out)?;
    train_victim_into(cfg, out)
}

pub struct AttackOutcome {
    pub trace: Vec<MetricRow>,
    pub victim_fit: Option<FitReport>,
}

impl AttackOutcome {
    pub fn final_row(&self) -> &MetricRow {
        self.trace.last().expect("attacks record their final round")
    }
}

/// Streams metric rows and checkpoints to the run directory.
struct RunWriter<'a> {
    out: &'a Path,
    rows: Vec<MetricRow>,
    fingerprint: String,
    timing: bool,
}

impl RunWriter<'_> {
    fn save_models(&self, clone: &ClassifierModel, generator: Option<&GeneratorModel>, suffix: &str) -> steallab::Result<()> {
        save_classifier(clone, &self.out.join(format!("{CLONE_MODEL}{suffix}")))?;
        if let Some(g) = generator {
            save_generator(g, &self.out.join(format!("{GENERATOR_MODEL}{suffix}")))?;
        }
        Ok(())
    }
}

impl AttackObserver for RunWriter<'_> {
    fn on_eval(&mut self, point: &EvalPoint<'_>) -> steallab::Result<()> {
        let mut row = point.row.clone();
        row.config_fingerprint = self.fingerprint.clone();
        if !self.timing {
            row.elapsed_s = 0.0;
        }
        self.rows.push(row);
        emit_report(&self.rows, &self.out.join(METRICS), ReportFormat::Csv)?;
        self.save_models(point.clone, point.generator, "")
    }

    fn on_abort(&mut self, clone: &ClassifierModel, generator: Option<&GeneratorModel>) -> steallab::Result<()> {
        self.save_models(clone, generator, ".aborted")
    }
}

/// Runs one attack (or the noise baseline), training the victim first unless
/// the config points at a saved one.
pub fn attack(cfg: &RunConfig, out: &Path, run_id: &str) -> Result<AttackOutcome> {
    let manifest = prepare(Command::Attack, run_id, cfg, out)?;
    let (victim, test, victim_fit) = match &cfg.victim.path {
        Some(dir) => {
            let victim = load_classifier(&manifest.artifacts.victim)
                .with_context(|| format!("loading the victim from {}", dir.display()))?;
            (victim, datasets::load(&manifest.artifacts.test_data)?, None)
        }
        None => {
            let v = train_victim_into(cfg, out)?;
            (v.victim, v.test, Some(v.fit))
        }
    };
    let input = victim.spec().input;
    let capacity = cfg.clone.capacity.unwrap_or(victim.spec().capacity);
    let clone_spec = classifier_spec(input, victim.num_classes(), capacity);
    let streams = SeedStreams::new(cfg.attack.seed);
    let clone = ClassifierModel::build(clone_spec, &mut streams.rng(CLONE_INIT))?;

    let oracle = VictimOracle::new(victim, cfg.attack.budget);
    let eval = EvalSet::new(test.inputs, test.labels, &oracle)?;
    let mut writer = RunWriter {
        out,
        rows: Vec::new(),
        fingerprint: run_fingerprint(cfg),
        timing: cfg.timing,
    };
    let runner = Attack::new(&cfg.attack, &oracle, &eval).with_run_id(run_id);
    let result = match cfg.baseline {
        Some(Baseline::RandomNoise) => runner.run_random_noise(clone, &mut writer),
        None => {
            let generator = GeneratorModel::build(cfg.generator.spec(input), &mut streams.rng(GENERATOR_INIT))?;
            runner.run(clone, generator, &mut writer)
        }
    };
    oracle.write_transcript(&out.join(TRANSCRIPT))?;
    result?;
    let outcome = AttackOutcome {
        trace: writer.rows,
        victim_fit,
    };
    let last = outcome.final_row();
    info!(
        "{run_id}: {} queries, accuracy {:.4}, agreement {:.4}, entropy {:.4} nats",
        last.queries_used, last.accuracy, last.agreement, last.entropy_nats
    );
    Ok(outcome)
}

/// Repeats the run described by a manifest into `out`.
pub fn rerun(manifest: &Path, out: &Path) -> Result<Option<AttackOutcome>> {
    let m = RunManifest::read(manifest)?;
    match m.command {
        Command::TrainVictim => train_victim(&m.config, out).map(|_| None),
        Command::Attack => attack(&m.config, out, &m.run_id).map(Some),
    }
}
