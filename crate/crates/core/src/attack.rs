//! The collaborative generator/clone stealing loop and the random-noise baseline.
//!
//! Each round runs `n_g` generator steps that minimize a diversity loss on the
//! clone's posteriors, then `n_c` clone steps that match the victim's
//! pseudo-logits on freshly generated queries. Every clone step buys one batch
//! of `batch_size` queries; generator steps cost nothing.
//!
//! With `per_round = n_c · batch_size` the budget splits into
//! `budget / per_round` full rounds and a final partial round of
//! `(budget mod per_round) / batch_size` clone steps, so the oracle is charged
//! exactly `batch_size · (n_c · full + partial)` samples. The partial round runs
//! its generator steps only when it has at least one clone step.

use std::time::Instant;

use log::{debug, info};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use steallab_autodiff::{LrSchedule, Optimizer, OptimizerKind, Tape, Tensor};

use crate::error::{Error, Result};
use crate::losses::{clone_loss, diversity_loss, CloneLoss, DiversityVariant, LabelGradient};
use crate::metrics::{EntropyAccumulator, MetricRow, Predictor};
use crate::models::{ClassifierModel, GeneratorModel};
use crate::oracle::{approx_logits, QueryLedger, VictimOracle};
use crate::seed::{fnv1a, SeedStreams, Z_STREAM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Total victim queries, in samples.
    pub budget: u64,
    pub n_g: usize,
    pub n_c: usize,
    pub batch_size: usize,
    pub diversity: DiversityVariant,
    pub clone_loss: CloneLoss,
    pub label_gradient: LabelGradient,
    /// Adam learning rate of the generator.
    pub generator_lr: f64,
    /// SGD learning rate of the clone.
    pub clone_lr: f64,
    pub clone_momentum: f64,
    pub clone_weight_decay: f64,
    /// Fractions of the total round count at which both learning rates decay.
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    pub seed: u64,
    /// Rounds between metric evaluations; the final round is always evaluated.
    pub eval_every: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: 200_000,
            n_g: 1,
            n_c: 5,
            batch_size: 256,
            diversity: DiversityVariant::Batch,
            clone_loss: CloneLoss::L1,
            label_gradient: LabelGradient::StraightThrough,
            generator_lr: 1e-4,
            clone_lr: 0.1,
            clone_momentum: 0.9,
            clone_weight_decay: 5e-4,
            lr_milestones: vec![0.1, 0.3, 0.5],
            lr_factor: 0.3,
            seed: 0,
            eval_every: 20,
        }
    }
}

/// Round counts implied by a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundPlan {
    pub full_rounds: u64,
    /// Clone steps in the trailing partial round (0 when there is none).
    pub partial_steps: u64,
}

impl RoundPlan {
    pub fn total_rounds(&self) -> u64 {
        self.full_rounds + u64::from(self.partial_steps > 0)
    }

    pub fn clone_steps(&self, n_c: usize) -> u64 {
        self.full_rounds * n_c as u64 + self.partial_steps
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(Error::config("n_c", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.budget < self.batch_size as u64 {
            return Err(Error::config(
                "budget",
                format!("{} is below one clone step ({} queries)", self.budget, self.batch_size),
            ));
        }
        for (field, lr) in [("generator_lr", self.generator_lr), ("clone_lr", self.clone_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.clone_momentum) {
            return Err(Error::config("clone_momentum", "must lie in [0, 1)"));
        }
        if !(self.clone_weight_decay >= 0.0) {
            return Err(Error::config("clone_weight_decay", "must be non-negative"));
        }
        self.schedule()
            .validate()
            .map_err(|e| Error::config("lr_milestones", e.to_string()))?;
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn plan(&self) -> RoundPlan {
        let n = self.batch_size as u64;
        let per_round = self.n_c as u64 * n;
        RoundPlan {
            full_rounds: self.budget / per_round,
            partial_steps: (self.budget % per_round) / n,
        }
    }

    /// Samples the loop will charge to the oracle.
    pub fn expected_queries(&self) -> u64 {
        self.plan().clone_steps(self.n_c) * self.batch_size as u64
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Milestones {
            milestones: self.lr_milestones.clone(),
            factor: self.lr_factor,
        }
    }

    /// Hex digest of every field except the seed, so runs that differ only in
    /// seed share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seed");
        }
        format!("{:016x}", fnv1a(v.to_string().as_bytes()))
    }
}

/// Held-out inputs with true labels and the victim's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub victim_labels: Vec<usize>,
}

impl EvalSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, victim: &dyn Predictor) -> Result<Self> {
        let victim_labels = victim.predict_labels(&inputs)?;
        if victim_labels.len() != labels.len() {
            return Err(Error::config("eval", "label count differs from input rows"));
        }
        Ok(Self {
            inputs,
            labels,
            victim_labels,
        })
    }

    /// (accuracy, agreement) of a model on this set.
    pub fn score(&self, model: &ClassifierModel) -> Result<(f64, f64)> {
        let pred = model.predict(&self.inputs)?;
        let n = pred.len() as f64;
        let hits = |refs: &[usize]| pred.iter().zip(refs).filter(|(a, b)| a == b).count() as f64 / n;
        Ok((hits(&self.labels), hits(&self.victim_labels)))
    }
}

/// State handed to observers at every evaluation point.
pub struct EvalPoint<'a> {
    pub round: u64,
    pub row: &'a MetricRow,
    pub clone: &'a ClassifierModel,
    pub generator: Option<&'a GeneratorModel>,
}

/// Hooks for streaming progress out of a run, e.g. checkpoints and report rows.
pub trait AttackObserver {
    fn on_eval(&mut self, _point: &EvalPoint<'_>) -> Result<()> {
        Ok(())
    }

    /// Called with the models as they were when a non-finite loss appeared.
    fn on_abort(&mut self, _clone: &ClassifierModel, _generator: Option<&GeneratorModel>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl AttackObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub clone: ClassifierModel,
    /// Absent for the random-noise baseline.
    pub generator: Option<GeneratorModel>,
    pub trace: Vec<MetricRow>,
    pub ledger: QueryLedger,
    pub rounds: u64,
}

impl AttackResult {
    pub fn final_row(&self) -> &MetricRow {
        self.trace.last().expect("every run records its final round")
    }
}

/// Everything a run needs besides the models it trains.
pub struct Attack<'a> {
    pub config: &'a AttackConfig,
    pub oracle: &'a VictimOracle,
    pub eval: &'a EvalSet,
    pub run_id: &'a str,
}

enum QuerySource {
    Generator(GeneratorModel),
    UniformNoise,
}

impl<'a> Attack<'a> {
    pub fn new(config: &'a AttackConfig, oracle: &'a VictimOracle, eval: &'a EvalSet) -> Self {
        Self {
            config,
            oracle,
            eval,
            run_id: "run",
        }
    }

    pub fn with_run_id(mut self, run_id: &'a str) -> Self {
        self.run_id = run_id;
        self
    }

    /// Trains `clone` and `generator` with the collaborative loop.
    pub fn run(&self, clone: ClassifierModel, generator: GeneratorModel, observer: &mut dyn AttackObserver) -> Result<AttackResult> {
        if generator.spec().output != self.oracle.input_kind() {
            return Err(Error::config(
                "generator",
                format!(
                    "produces {:?} but the victim expects {:?}",
                    generator.spec().output,
                    self.oracle.input_kind()
                ),
            ));
        }
        self.execute(clone, QuerySource::Generator(generator), observer)
    }

    /// Same clone loop on uniform noise in [−1, 1].
    pub fn run_random_noise(&self, clone: ClassifierModel, observer: &mut dyn AttackObserver) -> Result<AttackResult> {
        self.execute(clone, QuerySource::UniformNoise, observer)
    }

    fn check(&self, clone: &ClassifierModel) -> Result<()> {
        self.config.validate()?;
        if clone.spec().input != self.oracle.input_kind() || clone.num_classes() != self.oracle.num_classes() {
            return Err(Error::config("clone", "input shape or class count differs from the victim"));
        }
        let remaining = self.oracle.ledger().remaining();
        if remaining < self.config.budget {
            return Err(Error::config(
                "budget",
                format!("{} exceeds the oracle's remaining {remaining}", self.config.budget),
            ));
        }
        Ok(())
    }

    fn execute(&self, mut clone: ClassifierModel, mut source: QuerySource, observer: &mut dyn AttackObserver) -> Result<AttackResult> {
        self.check(&clone)?;
        let cfg = self.config;
        let start = Instant::now();
        let plan = cfg.plan();
        let total_rounds = plan.total_rounds();
        let schedule = cfg.schedule();
        let fingerprint = cfg.fingerprint();
        let mut z_rng = SeedStreams::new(cfg.seed).rng(Z_STREAM);
        let mut gen_opt = Optimizer::new(OptimizerKind::adam(), cfg.generator_lr)?;
        let mut clone_opt = Optimizer::new(
            OptimizerKind::Sgd {
                momentum: cfg.clone_momentum,
                weight_decay: cfg.clone_weight_decay,
            },
            cfg.clone_lr,
        )?;
        let used_before = self.oracle.ledger().used();
        let mut entropy = EntropyAccumulator::new(self.oracle.num_classes());
        let mut trace = Vec::new();

        info!(
            "{}: {} rounds ({} full, {} partial clone steps), fingerprint {fingerprint}",
            self.run_id, total_rounds, plan.full_rounds, plan.partial_steps
        );

        for round in 0..total_rounds {
            let progress = round as usize;
            gen_opt.set_lr(schedule.lr_at(cfg.generator_lr, progress, total_rounds as usize));
            clone_opt.set_lr(schedule.lr_at(cfg.clone_lr, progress, total_rounds as usize));
            let clone_steps = if round < plan.full_rounds {
                cfg.n_c as u64
            } else {
                plan.partial_steps
            };

            if let QuerySource::Generator(generator) = &mut source {
                for _ in 0..cfg.n_g {
                    let loss = generator_step(cfg, generator, &clone, &mut gen_opt, &mut z_rng)?;
                    debug!("round {round} diversity loss {loss:.6}");
                    if !loss.is_finite() {
                        return self.abort(observer, &clone, &source, "diversity loss", round);
                    }
                }
            }
            for _ in 0..clone_steps {
                let x = match &mut source {
                    QuerySource::Generator(g) => {
                        let z = Tensor::randn(&[cfg.batch_size, g.spec().latent_dim], &mut z_rng);
                        g.generate(&z)?
                    }
                    QuerySource::UniformNoise => {
                        let shape = self.oracle.input_kind().batch_shape(cfg.batch_size);
                        Tensor::rand_uniform(&shape, -1.0, 1.0, &mut z_rng)
                    }
                };
                let posteriors = self.oracle.query(&x)?;
                entropy.add(&posteriors)?;
                let loss = clone_step(cfg, &mut clone, &mut clone_opt, &x, &posteriors)?;
                debug!("round {round} clone loss {loss:.6}");
                if !loss.is_finite() {
                    return self.abort(observer, &clone, &source, "clone loss", round);
                }
            }

            if (round + 1) % cfg.eval_every as u64 == 0 || round + 1 == total_rounds {
                let (accuracy, agreement) = self.eval.score(&clone)?;
                let row = MetricRow {
                    run_id: self.run_id.to_string(),
                    queries_used: self.oracle.ledger().used() - used_before,
                    accuracy,
                    agreement,
                    entropy_nats: entropy.entropy(),
                    elapsed_s: start.elapsed().as_secs_f64(),
                    config_fingerprint: fingerprint.clone(),
                };
                info!(
                    "{}: round {}/{} queries {} acc {:.4} agr {:.4} entropy {:.4}",
                    self.run_id,
                    round + 1,
                    total_rounds,
                    row.queries_used,
                    accuracy,
                    agreement,
                    row.entropy_nats
                );
                observer.on_eval(&EvalPoint {
                    round: round + 1,
                    row: &row,
                    clone: &clone,
                    generator: match &source {
                        QuerySource::Generator(g) => Some(g),
                        QuerySource::UniformNoise => None,
                    },
                })?;
                trace.push(row);
            }
        }

        Ok(AttackResult {
            clone,
            generator: match source {
                QuerySource::Generator(g) => Some(g),
                QuerySource::UniformNoise => None,
            },
            trace,
            ledger: self.oracle.ledger(),
            rounds: total_rounds,
        })
    }

    fn abort(
        &self,
        observer: &mut dyn AttackObserver,
        clone: &ClassifierModel,
        source: &QuerySource,
        stage: &str,
        round: u64,
    ) -> Result<AttackResult> {
        let generator = match source {
            QuerySource::Generator(g) => Some(g),
            QuerySource::UniformNoise => None,
        };
        observer.on_abort(clone, generator)?;
        Err(Error::NonFinite {
            stage: stage.to_string(),
            round,
        })
    }
}

/// One generator update; returns the forward diversity loss.
fn generator_step(
    cfg: &AttackConfig,
    generator: &mut GeneratorModel,
    clone: &ClassifierModel,
    opt: &mut Optimizer,
    z_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let z = Tensor::randn(&[cfg.batch_size, generator.spec().latent_dim], z_rng);
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let x = generator.forward(&mut tape, zv, true)?;
    let logits = clone.forward(&mut tape, x, false)?;
    let probs = tape.softmax(logits)?;
    let loss = diversity_loss(&mut tape, probs, cfg.diversity, cfg.label_gradient)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    grads.accumulate_into(generator.params_mut());
    opt.step(generator.params_mut())?;
    Ok(value)
}

/// One clone update on already-answered queries; returns the loss.
fn clone_step(cfg: &AttackConfig, clone: &mut ClassifierModel, opt: &mut Optimizer, x: &Tensor, posteriors: &Tensor) -> Result<f64> {
    let target = approx_logits(posteriors)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = clone.forward(&mut tape, xv, true)?;
    let loss = clone_loss(&mut tape, cfg.clone_loss, &target, logits)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    grads.accumulate_into(clone.params_mut());
    opt.step(clone.params_mut())?;
    Ok(value)
}

/// Runs the collaborative loop without observers.
pub fn run_attack(
    config: &AttackConfig,
    oracle: &VictimOracle,
    clone: ClassifierModel,
    generator: GeneratorModel,
    eval: &EvalSet,
) -> Result<AttackResult> {
    Attack::new(config, oracle, eval).run(clone, generator, &mut NoObserver)
}

/// Runs the uniform-noise baseline without observers.
pub fn run_random_noise_baseline(config: &AttackConfig, oracle: &VictimOracle, clone: ClassifierModel, eval: &EvalSet) -> Result<AttackResult> {
    Attack::new(config, oracle, eval).run_random_noise(clone, &mut NoObserver)
}
