use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steallab::losses::*;
use steallab::metrics::query_set_entropy;
use steallab::oracle::{approx_logits, softmax_rows};
use steallab_autodiff::Tensor;

fn random_posteriors(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let scale = rng.random_range(0.1..6.0);
    let logits = Tensor::randn(&[n, k], rng).map(|v| v * scale);
    softmax_rows(&logits)
}

fn posteriors_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..12, 2usize..8)
        .prop_flat_map(|(n, k)| (Just(n), Just(k), prop::collection::vec(-8.0f64..8.0, n * k)))
        .prop_map(|(n, k, v)| softmax_rows(&Tensor::new(&[n, k], v).unwrap()))
}

#[test]
fn batch_level_never_exceeds_sample_level_on_1000_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let k = rng.random_range(2..12);
        let p = random_posteriors(&mut rng, n, k);
        let b = diversity_batch(&p).unwrap();
        let s = diversity_sample(&p).unwrap();
        assert!(b <= s + 1e-12, "batch {b} > sample {s}");
    }
}

#[test]
fn diversity_losses_lie_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let (n, k) = (rng.random_range(1..40), rng.random_range(2..11));
        let p = random_posteriors(&mut rng, n, k);
        let floor = -(k as f64).ln() - 1e-12;
        for v in [DiversityVariant::Batch, DiversityVariant::Sample, DiversityVariant::Label] {
            let d = diversity_value(v, &p).unwrap();
            assert!((floor..=1e-12).contains(&d), "{v:?} gave {d} for K={k}");
        }
    }
}

#[test]
fn uniform_column_mean_attains_the_floor() {
    let k = 7;
    let mut rows = Vec::new();
    for i in 0..k {
        let mut r = vec![0.0; k];
        r[i] = 1.0;
        rows.extend(r);
    }
    let p = Tensor::new(&[k, k], rows).unwrap();
    assert!((diversity_batch(&p).unwrap() + (k as f64).ln()).abs() < 1e-12);
    assert!((diversity_label(&p).unwrap() + (k as f64).ln()).abs() < 1e-12);
    assert!(diversity_sample(&p).unwrap().abs() < 1e-9);
}

#[test]
fn uniform_aggregate_entropy_is_ln_10() {
    let p = Tensor::new(&[3, 10], vec![0.1; 30]).unwrap();
    let h = query_set_entropy(&p).unwrap();
    assert!((h - 10f64.ln()).abs() < 1e-12);
    assert_eq!(format!("{h:.2}"), "2.30");
}

/// Sum of absolute differences per row, averaged over rows, by explicit indexing.
fn l1_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..k {
            row += (a.data()[i * k + j] - b.data()[i * k + j]).abs();
        }
        total += row;
    }
    total / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn permuting_rows_changes_no_diversity_loss(p in posteriors_strategy(), seed in any::<u64>()) {
        let n = p.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let q = p.select_rows(&order).unwrap();
        for v in [DiversityVariant::Batch, DiversityVariant::Sample, DiversityVariant::Label] {
            let (a, b) = (diversity_value(v, &p).unwrap(), diversity_value(v, &q).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_and_label_frequencies_ignore_logit_shifts(
        rows in 1usize..8,
        k in 2usize..6,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let victim = Tensor::randn(&[rows, k], &mut rng);
        let clone = Tensor::randn(&[rows, k], &mut rng);
        let shifted = clone.map(|v| v + shift);
        let a = clone_loss_value(CloneLoss::Kl, &victim, &clone).unwrap();
        let b = clone_loss_value(CloneLoss::Kl, &victim, &shifted).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        prop_assert_eq!(
            label_frequencies(&softmax_rows(&clone)),
            label_frequencies(&softmax_rows(&shifted))
        );
    }

    #[test]
    fn clone_loss_of_identical_logits_is_zero(rows in 1usize..8, k in 2usize..6, seed in any::<u64>()) {
        let a = Tensor::randn(&[rows, k], &mut ChaCha8Rng::seed_from_u64(seed));
        for v in [CloneLoss::L1, CloneLoss::L2, CloneLoss::Kl] {
            prop_assert!(clone_loss_value(v, &a, &a).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn l1_matches_scalar_loop(rows in 1usize..10, k in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[rows, k], &mut rng);
        let b = Tensor::randn(&[rows, k], &mut rng);
        let got = clone_loss_value(CloneLoss::L1, &a, &b).unwrap();
        prop_assert!((got - l1_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn approx_logits_round_trip_softmax(p in posteriors_strategy()) {
        let back = softmax_rows(&approx_logits(&p).unwrap());
        for (a, b) in back.data().iter().zip(p.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
