use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steallab::attack::*;
use steallab::losses::{diversity_loss, DiversityVariant, LabelGradient};
use steallab::models::*;
use steallab::oracle::VictimOracle;
use steallab::{Error, Result};
use steallab_autodiff::{Optimizer, OptimizerKind, Tape, Tensor};

const DIM: usize = 4;
const K: usize = 3;

fn victim(seed: u64) -> ClassifierModel {
    let spec = ClassifierSpec::mlp(DIM, K, Capacity::Tiny);
    ClassifierModel::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn generator(seed: u64, blocks: usize) -> GeneratorModel {
    let spec = GeneratorSpec {
        latent_dim: 8,
        num_blocks: blocks,
        base_channels: 8,
        ..GeneratorSpec::for_output(InputKind::Vector { dim: DIM })
    };
    GeneratorModel::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn eval_set(oracle: &VictimOracle) -> EvalSet {
    let x = Tensor::rand_uniform(&[40, DIM], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(99));
    let labels = vec![0; 40];
    EvalSet::new(x, labels, oracle).unwrap()
}

/// Closed form: N · (n_c · ⌊Q / (n_c N)⌋ + ⌊(Q mod n_c N) / N⌋).
fn closed_form_queries(q: u64, n: u64, n_c: u64) -> u64 {
    let per_round = n * n_c;
    n * (n_c * (q / per_round) + (q % per_round) / n)
}

#[test]
fn ledger_matches_closed_form_over_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..120 {
        let batch_size = rng.random_range(1..=32usize);
        let n_c = rng.random_range(1..=6usize);
        let budget = rng.random_range(batch_size as u64..=2500);
        let config = AttackConfig {
            budget,
            batch_size,
            n_c,
            n_g: rng.random_range(0..=2),
            clone_lr: 0.01,
            generator_lr: 1e-3,
            seed: case,
            eval_every: rng.random_range(1..=50),
            ..Default::default()
        };
        let oracle = VictimOracle::new(victim(case), budget + rng.random_range(0..100));
        let eval = eval_set(&oracle);
        let noise = rng.random_bool(0.25);
        let result = if noise {
            run_random_noise_baseline(&config, &oracle, victim(case + 1000), &eval)
        } else {
            run_attack(&config, &oracle, victim(case + 1000), generator(case, 1), &eval)
        }
        .unwrap_or_else(|e| panic!("case {case} {config:?}: {e}"));
        let expected = closed_form_queries(budget, batch_size as u64, n_c as u64);
        assert_eq!(result.ledger.used(), expected, "case {case} {config:?}");
        assert_eq!(config.expected_queries(), expected);
        assert_eq!(result.final_row().queries_used, expected);
        assert!(expected <= budget && budget - expected < batch_size as u64);
        let partial = (budget % (batch_size * n_c) as u64) / batch_size as u64;
        assert_eq!(result.rounds, budget / (batch_size * n_c) as u64 + u64::from(partial > 0));
    }
}

#[test]
fn paper_default_round_count() {
    let config = AttackConfig {
        budget: 10240,
        batch_size: 256,
        n_c: 5,
        clone_lr: 0.01,
        ..Default::default()
    };
    let plan = config.plan();
    assert_eq!((plan.full_rounds, plan.partial_steps), (8, 0));
    let oracle = VictimOracle::new(victim(1), 10240);
    let eval = eval_set(&oracle);
    let result = run_attack(&config, &oracle, victim(2), generator(3, 1), &eval).unwrap();
    assert_eq!(result.rounds, 8);
    assert_eq!(result.ledger.used(), 10240);
    assert_eq!(result.ledger.remaining(), 0);
}

#[test]
fn no_generator_steps_leaves_generator_untouched() {
    let config = AttackConfig {
        budget: 640,
        batch_size: 32,
        n_c: 2,
        n_g: 0,
        clone_lr: 0.01,
        ..Default::default()
    };
    let oracle = VictimOracle::new(victim(4), 640);
    let eval = eval_set(&oracle);
    let g = generator(5, 2);
    let weights = |g: &GeneratorModel| -> Vec<Tensor> {
        g.params().iter().filter(|p| p.trainable).map(|p| p.tensor.clone()).collect()
    };
    let before = weights(&g);
    let result = run_attack(&config, &oracle, victim(6), g, &eval).unwrap();
    assert_eq!(before, weights(&result.generator.unwrap()));
    assert_eq!(result.ledger.used(), 640);
}

fn diversity_on(g: &mut GeneratorModel, clone: &ClassifierModel, z: &Tensor, step: Option<&mut Optimizer>) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let x = g.forward(&mut tape, zv, true).unwrap();
    let logits = clone.forward(&mut tape, x, false).unwrap();
    let probs = tape.softmax(logits).unwrap();
    let loss = diversity_loss(&mut tape, probs, DiversityVariant::Batch, LabelGradient::StraightThrough).unwrap();
    let value = tape.value(loss).item().unwrap();
    if let Some(opt) = step {
        tape.backward(loss).unwrap().accumulate_into(g.params_mut());
        opt.step(g.params_mut()).unwrap();
    }
    value
}

#[test]
fn small_generator_step_does_not_increase_batch_diversity_loss() {
    for seed in 0..20 {
        let mut g = generator(seed, 2);
        let clone = victim(seed + 50);
        let z = Tensor::randn(&[64, 8], &mut ChaCha8Rng::seed_from_u64(seed + 7));
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-4).unwrap();
        let before = diversity_on(&mut g, &clone, &z, Some(&mut opt));
        let after = diversity_on(&mut g, &clone, &z, None);
        assert!(after <= before + 1e-8, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn runs_are_deterministic_given_seed() {
    let config = AttackConfig {
        budget: 1200,
        batch_size: 16,
        clone_lr: 0.01,
        generator_lr: 1e-3,
        eval_every: 3,
        seed: 17,
        ..Default::default()
    };
    let run = || {
        let oracle = VictimOracle::new(victim(8), 1200);
        let eval = eval_set(&oracle);
        let mut r = run_attack(&config, &oracle, victim(9), generator(10, 1), &eval).unwrap();
        r.trace.iter_mut().for_each(|row| row.elapsed_s = 0.0);
        (r.trace, r.clone, r.generator)
    };
    assert_eq!(run(), run());
}

struct Recorder {
    evals: Vec<u64>,
    aborted: bool,
}

impl AttackObserver for Recorder {
    fn on_eval(&mut self, point: &EvalPoint<'_>) -> Result<()> {
        self.evals.push(point.round);
        Ok(())
    }

    fn on_abort(&mut self, _clone: &ClassifierModel, _generator: Option<&GeneratorModel>) -> Result<()> {
        self.aborted = true;
        Ok(())
    }
}

#[test]
fn evaluation_points_include_the_final_round() {
    let config = AttackConfig {
        budget: 16 * 5 * 7 + 16 * 2,
        batch_size: 16,
        eval_every: 3,
        clone_lr: 0.01,
        ..Default::default()
    };
    let oracle = VictimOracle::new(victim(11), config.budget);
    let eval = eval_set(&oracle);
    let mut rec = Recorder { evals: vec![], aborted: false };
    Attack::new(&config, &oracle, &eval)
        .run(victim(12), generator(13, 1), &mut rec)
        .unwrap();
    assert_eq!(rec.evals, vec![3, 6, 8]);
}

#[test]
fn diverging_clone_aborts_with_non_finite_error() {
    let config = AttackConfig {
        budget: 64 * 5 * 40,
        batch_size: 64,
        clone_lr: 1e200,
        clone_momentum: 0.0,
        ..Default::default()
    };
    let oracle = VictimOracle::new(victim(14), config.budget);
    let eval = eval_set(&oracle);
    let mut rec = Recorder { evals: vec![], aborted: false };
    let err = Attack::new(&config, &oracle, &eval)
        .run_random_noise(victim(15), &mut rec)
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(rec.aborted);
}

#[test]
fn budget_below_one_clone_step_is_rejected() {
    let config = AttackConfig {
        budget: 63,
        batch_size: 64,
        n_c: 2,
        ..Default::default()
    };
    let oracle = VictimOracle::new(victim(16), 63);
    let eval = eval_set(&oracle);
    let err = run_random_noise_baseline(&config, &oracle, victim(17), &eval).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig { .. }));
    assert_eq!(oracle.ledger().used(), 0);
}

#[test]
fn budget_below_one_round_runs_only_the_partial_round() {
    let config = AttackConfig {
        budget: 200,
        batch_size: 64,
        n_c: 5,
        clone_lr: 0.01,
        ..Default::default()
    };
    let oracle = VictimOracle::new(victim(20), 200);
    let eval = eval_set(&oracle);
    let result = run_attack(&config, &oracle, victim(21), generator(22, 1), &eval).unwrap();
    assert_eq!((result.rounds, result.ledger.used()), (1, 192));
}

#[test]
fn mismatched_generator_output_is_rejected() {
    let config = AttackConfig {
        budget: 640,
        batch_size: 64,
        ..Default::default()
    };
    let oracle = VictimOracle::new(victim(18), 640);
    let eval = eval_set(&oracle);
    let spec = GeneratorSpec::for_output(InputKind::Vector { dim: DIM + 1 });
    let g = GeneratorModel::build(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(run_attack(&config, &oracle, victim(19), g, &eval).is_err());
}
