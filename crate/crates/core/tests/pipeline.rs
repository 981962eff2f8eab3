//! Small end-to-end runs over a generated benchmark.

use std::collections::BTreeSet;

use spoofbench_core::backprop::{BatchSubset, Phase, TrainingSchedule};
use spoofbench_core::datapipe::{generate_synthetic_benchmark, load_manifest, Dataset, Split, SynthParams};
use spoofbench_core::model::ModelContainer;
use spoofbench_core::pipeline::{self, NetTrainingConfig, SearchConfig};
use spoofbench_core::protocol::ThresholdRule;
use spoofbench_core::{Error, Label};

fn small_benchmark(dir: &std::path::Path, dev: usize) -> spoofbench_core::datapipe::BenchmarkManifest {
    let params = SynthParams {
        individuals: 10,
        per_individual: 3,
        size: 32,
        dev_individuals: dev,
        seed: 4,
        ..SynthParams::default()
    };
    generate_synthetic_benchmark(&params, dir).unwrap();
    load_manifest(dir.join("manifest.jsonl")).unwrap()
}

#[test]
fn generated_manifest_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 2);
    assert_eq!(m.records.len(), 10 * 3 * 2);
    let individuals = |s: Split| -> BTreeSet<String> { m.split(s).into_iter().map(|r| r.individual_id).collect() };
    let (train, test, dev) = (
        individuals(Split::Train),
        individuals(Split::Test),
        individuals(Split::Dev),
    );
    assert_eq!((train.len(), test.len(), dev.len()), (3, 5, 2));
    assert!(train.is_disjoint(&test) && train.is_disjoint(&dev) && test.is_disjoint(&dev));
    for r in &m.records {
        assert!(m.resolve(r).is_file());
        assert_eq!(r.attack_type, if r.label == Label::Fake { "print" } else { "none" });
    }
    let again = tempfile::tempdir().unwrap();
    let m2 = small_benchmark(again.path(), 2);
    for (a, b) in m.records.iter().zip(&m2.records) {
        assert_eq!(a, b);
        assert_eq!(
            std::fs::read(m.resolve(a)).unwrap(),
            std::fs::read(m2.resolve(b)).unwrap()
        );
    }
}

#[test]
fn search_evaluate_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 2);
    let cfg = SearchConfig {
        budget: 3,
        seed: 2,
        folds: 3,
        ..SearchConfig::default()
    };
    let run = pipeline::run_search(&m, &cfg).unwrap();
    assert_eq!(run.outcome.trace.len(), 3);
    assert_eq!(run.cv_scores.len(), m.tally().train);
    let threshold = run.model.threshold.unwrap();
    assert_eq!(threshold.rule, ThresholdRule::CvEer);

    let path = dir.path().join("model.json");
    run.model.save(&path).unwrap();
    let loaded = ModelContainer::load(&path).unwrap();
    let test = Dataset::load(&m, Split::Test).unwrap();
    let a = run.model.scorer().unwrap().score_all(&test.images).unwrap();
    let b = loaded.scorer().unwrap().score_all(&test.images).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    for rule in [ThresholdRule::CvEer, ThresholdRule::DevEer, ThresholdRule::Fixed] {
        let r = pipeline::evaluate(&loaded, &m, rule).unwrap();
        assert_eq!(r.metrics.hter, (r.metrics.far + r.metrics.frr) / 2.0);
        assert_eq!(r.n_samples, m.tally().test);
        if rule == ThresholdRule::CvEer {
            assert_eq!(r.metrics.tau, threshold.tau);
        }
    }

    let features = pipeline::extract(&loaded, &m).unwrap();
    assert_eq!(features.len(), m.records.len());
    let len = features[0].features.len();
    assert!(len > 0 && features.iter().all(|f| f.features.len() == len));

    let again = pipeline::run_search(&m, &cfg).unwrap();
    assert_eq!(again.model.to_json().unwrap(), run.model.to_json().unwrap());
    assert_eq!(
        pipeline::trace_jsonl(&again.outcome, false).unwrap(),
        pipeline::trace_jsonl(&run.outcome, false).unwrap()
    );
}

#[test]
fn dev_threshold_needs_dev_split() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_benchmark(dir.path(), 0);
    let cfg = SearchConfig {
        budget: 1,
        seed: 1,
        folds: 3,
        ..SearchConfig::default()
    };
    let run = pipeline::run_search(&m, &cfg).unwrap();
    assert!(matches!(
        pipeline::evaluate(&run.model, &m, ThresholdRule::DevEer),
        Err(Error::Config(_))
    ));
}

fn phase1_only(epochs: usize, rate: f64) -> TrainingSchedule {
    TrainingSchedule {
        name: "phase-1".into(),
        phases: vec![Phase {
            epochs,
            learning_rate: rate,
            subset: BatchSubset::FirstThree,
        }],
    }
}

#[test]
fn fo_training_descends_and_saturates() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams {
        individuals: 4,
        per_individual: 2,
        size: 64,
        test_fraction: 0.25,
        seed: 8,
        ..SynthParams::default()
    };
    generate_synthetic_benchmark(&params, dir.path()).unwrap();
    let m = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    let mut schedule = phase1_only(30, 0.2);
    schedule.phases.push(Phase {
        epochs: 30,
        learning_rate: 0.2,
        subset: BatchSubset::All,
    });
    let cfg = NetTrainingConfig {
        reduced: true,
        schedule,
        seed: 3,
        minibatch: 8,
    };
    let run = pipeline::run_train_net(&m, &cfg).unwrap();
    assert_eq!(run.log.len(), 60);
    let phase1: Vec<_> = run.log.iter().filter(|e| e.phase == 1).collect();
    assert!(phase1.iter().all(|e| e.val_acc.is_some()));
    let losses: Vec<f64> = phase1.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 30);
    // Moving averages over 20 epochs never rise.
    let avg: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "moving average rose: {avg:?}");
    }

    let train = Dataset::load(&m, Split::Train).unwrap();
    let scorer = run.model.scorer().unwrap();
    for (img, label) in train.images.iter().zip(train.labels()) {
        let p_fake = scorer.score(img).unwrap();
        let p_true = if label == Label::Fake { p_fake } else { 1.0 - p_fake };
        assert!(p_true > 0.99, "p(true class) {p_true}");
    }

    let mut schedule = TrainingSchedule::desk();
    schedule.phases.iter_mut().for_each(|p| p.epochs = 1);
    let short = NetTrainingConfig { schedule, ..cfg };
    let a = pipeline::run_train_net(&m, &short).unwrap();
    let b = pipeline::run_train_net(&m, &short).unwrap();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
}

#[test]
fn inspect_writes_fig_structure() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams {
        individuals: 4,
        per_individual: 2,
        size: 64,
        seed: 9,
        ..SynthParams::default()
    };
    generate_synthetic_benchmark(&params, dir.path()).unwrap();
    let m = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    let cfg = NetTrainingConfig {
        reduced: true,
        schedule: phase1_only(1, 1e-2),
        seed: 1,
        minibatch: 8,
    };
    let model = pipeline::run_train_net(&m, &cfg).unwrap().model;
    let out = dir.path().join("inspect");
    let summary = pipeline::inspect(&model, &m, &out).unwrap();
    assert_eq!(summary.filters, 16);
    assert_eq!(summary.mean_images, 2);
    assert_eq!(summary.activation_maps, 32);
    assert_eq!(summary.files.len(), 16 + 2 + 32);
    assert!(summary.files.iter().all(|f| f.is_file()));
}
