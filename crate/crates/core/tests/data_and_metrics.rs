use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steallab::datasets::*;
use steallab::metrics::*;
use steallab::models::*;
use steallab::Error;
use steallab_autodiff::Tensor;

fn row_keys(d: &LabeledDataset) -> HashSet<Vec<u64>> {
    let width = d.inputs.len() / d.len();
    d.inputs.data().chunks(width).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn train_and_test_rows_never_coincide() {
    for name in PRESETS {
        let spec = TaskSpec::preset(name).unwrap();
        let (train, test) = generate(&spec).unwrap();
        assert_eq!((train.split(), test.split()), (Split::Train, Split::Test));
        let shared = row_keys(&train).intersection(&row_keys(&test)).count();
        assert_eq!(shared, 0, "{name}: {shared} rows appear in both splits");
    }
}

#[test]
fn presets_are_balanced_and_in_range() {
    for name in PRESETS {
        let spec = TaskSpec::preset(name).unwrap();
        let (train, test) = generate(&spec).unwrap();
        assert_eq!(train.class_counts(), vec![spec.train_per_class; spec.num_classes]);
        assert_eq!(test.class_counts(), vec![spec.test_per_class; spec.num_classes]);
        assert!(train.labels.iter().all(|&l| l < spec.num_classes));
        assert!(train.inputs.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn progression_subsample_of_blobs_10() {
    let (train, _) = generate(&TaskSpec::preset("blobs-10").unwrap()).unwrap();
    let counts = progression_counts(10, 320, 40);
    assert_eq!(counts, vec![320, 360, 400, 440, 480, 520, 560, 600, 640, 680]);
    let u = make_unbalanced(&train, &counts, 3).unwrap();
    assert_eq!(u.class_counts(), counts);
    assert!(row_keys(&u).is_subset(&row_keys(&train)));
    assert_eq!(u.provenance.subsample.as_ref().unwrap().counts, counts);
}

struct RandomLabels {
    k: usize,
    seed: u64,
}

impl Predictor for RandomLabels {
    fn predict_labels(&self, x: &Tensor) -> steallab::Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..x.shape()[0]).map(|_| rng.random_range(0..self.k)).collect())
    }
}

#[test]
fn random_guessing_scores_chance_over_ten_seeds() {
    let (_, test) = generate(&TaskSpec::preset("blobs-10").unwrap()).unwrap();
    let accs: Vec<f64> = (0..10)
        .map(|seed| accuracy(&RandomLabels { k: 10, seed }, &test.inputs, &test.labels).unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() < 0.02, "mean accuracy {mean}");
}

#[test]
fn negated_binary_model_disagrees_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = ClassifierModel::build(ClassifierSpec::mlp(3, 2, Capacity::Small), &mut rng).unwrap();
    let x = Tensor::rand_uniform(&[500, 3], -1.0, 1.0, &mut rng);
    assert_eq!(agreement(&model, &model, &x).unwrap(), 1.0);
    assert_eq!(agreement(&model.negated(), &model, &x).unwrap(), 0.0);
}

fn rows() -> Vec<MetricRow> {
    (0..6)
        .map(|i| MetricRow {
            run_id: format!("seed-{}", i % 3),
            queries_used: 1000 * (1 + i as u64 / 3),
            accuracy: 0.1 + 0.123456789 * i as f64,
            agreement: 1.0 / (i as f64 + 3.0),
            entropy_nats: (i as f64 + 1.5).ln(),
            elapsed_s: 0.0,
            config_fingerprint: "abc".into(),
        })
        .collect()
}

#[test]
fn reports_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for file in ["m.csv", "m.json"] {
        let path = dir.path().join(file);
        emit_report(&rows(), &path, ReportFormat::from_path(&path)).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in rows().iter().zip(&back) {
            assert_eq!((&a.run_id, a.queries_used), (&b.run_id, b.queries_used));
            for (x, y) in [(a.accuracy, b.accuracy), (a.agreement, b.agreement), (a.entropy_nats, b.entropy_nats)] {
                assert!((x - y).abs() <= 5e-6 * x.abs(), "{x} vs {y}");
            }
        }
    }
}

#[test]
fn csv_missing_a_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "run_id,queries_used,accuracy,agreement,elapsed_s,config_fingerprint\na,1,0.5,0.5,0,f\n").unwrap();
    match read_report(&path) {
        Err(Error::Schema { column, .. }) => assert_eq!(column, "entropy_nats"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn summary_is_median_of_final_rows() {
    let summary = summarize(&rows());
    assert_eq!(summary.len(), 1);
    let finals: Vec<f64> = rows()[3..].iter().map(|r| r.agreement).collect();
    let mut sorted = finals.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(summary[0].agreement, sorted[1]);
    assert_eq!(summary[0].queries_used, 2000);
    assert_eq!(summary[0].run_id, "median-of-3");
}

#[test]
fn random_weight_models_score_chance_on_blobs_4() {
    let (_, test) = generate(&TaskSpec::preset("blobs-4").unwrap()).unwrap();
    let accs: Vec<f64> = (0..10)
        .map(|seed| {
            let spec = ClassifierSpec::mlp(16, 4, Capacity::Small);
            let m = ClassifierModel::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            accuracy(&m, &test.inputs, &test.labels).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 10.0;
    assert!((mean - 0.25).abs() <= 0.05, "mean {mean} from {accs:?}");
}

#[test]
fn entropy_equals_negated_batch_diversity_and_ignores_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let logits = Tensor::randn(&[20, 6], &mut rng).map(|v| v * 3.0);
        let p = steallab::oracle::softmax_rows(&logits);
        let h = query_set_entropy(&p).unwrap();
        assert!((h + steallab::losses::diversity_batch(&p).unwrap()).abs() < 1e-12);
        assert!(h <= 6f64.ln() + 1e-9);
        let cols: Vec<f64> = p.data().chunks(6).flat_map(|r| r.iter().rev().copied()).collect();
        let flipped = Tensor::new(&[20, 6], cols).unwrap();
        assert!((query_set_entropy(&flipped).unwrap() - h).abs() < 1e-12);
        let rows: Vec<usize> = (0..20).rev().collect();
        assert!((query_set_entropy(&p.select_rows(&rows).unwrap()).unwrap() - h).abs() < 1e-12);
    }
}
