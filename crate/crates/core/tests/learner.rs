use std::sync::Arc;

use incgan::datagen::{generate_dataset, ArchitectureData, Dataset, GeneratorConfig, Origin, Sample, SplitCounts};
use incgan::learner::{Learner, LearnerConfig, StopReason};
use incgan::memory::{squared_distance, Budget};
use incgan::model::Variant;
use incgan::Error;

fn data(archs: usize, train: usize) -> Dataset {
    let cfg = GeneratorConfig {
        image_size: 8,
        counts: SplitCounts {
            train,
            val: 20,
            test: 20,
        },
        seed: 5,
        ..Default::default()
    };
    generate_dataset(&cfg, archs).unwrap()
}

fn config(variant: Variant, budget: Budget, epochs: usize) -> LearnerConfig {
    let mut c = LearnerConfig::new(variant);
    c.network.input_size = 8;
    c.network.conv_width = 4;
    c.network.feature_dim = 8;
    c.train.max_epochs = epochs;
    c.train.batch_size = 16;
    c.budget = budget;
    c
}

fn archs(ds: &Dataset) -> Vec<&ArchitectureData> {
    ds.architectures.iter().collect()
}

#[test]
fn two_architecture_start_registers_four_classes() {
    let ds = data(2, 12);
    let a = archs(&ds);
    let (l, report) = Learner::initialize(config(Variant::MtSc, Budget::Limited(8), 1), &a).unwrap();
    assert_eq!(l.registry().len(), 4);
    assert_eq!(l.registry().group(Origin::Gan).len(), 2);
    assert_eq!(l.model().num_classes(), 4);
    assert_eq!(report.step, 1);
    // floor(8 / 4) per class
    for c in 0..4 {
        assert_eq!(l.store().count(c), 2);
    }
}

#[test]
fn initial_training_loss_decreases() {
    let cfg = GeneratorConfig {
        image_size: 16,
        counts: SplitCounts {
            train: 200,
            val: 40,
            test: 20,
        },
        ..Default::default()
    };
    let ds = generate_dataset(&cfg, 1).unwrap();
    let mut c = config(Variant::MtSc, Budget::Limited(32), 3);
    c.network.input_size = 16;
    let (_, report) = Learner::initialize(c, &archs(&ds)).unwrap();
    let l = &report.train_losses;
    assert_eq!(l.len(), 3);
    assert!(l[1] < l[0] + 1e-3 && l[2] < l[1] + 1e-3, "{l:?}");
}

#[test]
fn zero_budget_falls_back_to_head() {
    let ds = data(2, 12);
    let a = archs(&ds);
    let (mut l, _) = Learner::initialize(config(Variant::Finetune, Budget::Limited(0), 1), &a[..1]).unwrap();
    l.increment(a[1]).unwrap();
    assert_eq!(l.store().total(), 0);
    assert!(l.store().templates().is_empty());
    let m = l.evaluate(&a).unwrap();
    assert!((0.0..=1.0).contains(&m.detection_acc));
}

#[test]
fn flat_validation_stops_after_patience_plus_one() {
    let ds = data(1, 12);
    let mut c = config(Variant::BaseIcarl, Budget::Limited(4), 50);
    c.train.lr = 1e-12;
    let (_, report) = Learner::initialize(c, &archs(&ds)).unwrap();
    assert_eq!(report.epochs_run, 6);
    assert_eq!(report.stop_reason, StopReason::Patience);
    assert_eq!(report.best_epoch, Some(1));
}

#[test]
fn improving_validation_runs_to_the_cap() {
    let ds = data(1, 40);
    let (_, report) = Learner::initialize(config(Variant::MtSc, Budget::Limited(4), 3), &archs(&ds)).unwrap();
    let v = &report.val_losses;
    assert!(v.windows(2).all(|w| w[1] < w[0] - 1e-5), "{v:?}");
    assert_eq!(report.epochs_run, 3);
    assert_eq!(report.stop_reason, StopReason::MaxEpochs);
}

#[test]
fn best_epoch_parameters_are_restored() {
    // without a fingerprint the network can only memorize, so validation turns
    let cfg = GeneratorConfig {
        image_size: 8,
        amplitude: 0.0,
        counts: SplitCounts {
            train: 12,
            val: 20,
            test: 20,
        },
        seed: 5,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg, 1).unwrap();
    let mut c = config(Variant::MtSc, Budget::Limited(4), 40);
    c.train.lr = 0.02;
    c.train.patience = 3;
    let (full, report) = Learner::initialize(c.clone(), &archs(&ds)).unwrap();
    let best = report.best_epoch.unwrap();
    let v = &report.val_losses;
    let argmin = (0..v.len()).min_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap() + 1;
    assert_eq!(best, argmin);
    assert!(best < report.epochs_run, "{v:?}");
    c.train.max_epochs = best;
    let (short, _) = Learner::initialize(c, &archs(&ds)).unwrap();
    let (p, q) = (full.model().params(), short.model().params());
    for id in p.ids() {
        assert_eq!(p.value(id), q.value(id), "{}", p.name(id));
    }
}

#[test]
fn second_increment_quota() {
    let ds = data(3, 100);
    let a = archs(&ds);
    let (mut l, _) = Learner::initialize(config(Variant::MtSc, Budget::Limited(512), 1), &a[..1]).unwrap();
    assert!((0..2).all(|c| l.store().count(c) == 100));
    l.increment(a[1]).unwrap();
    assert!((0..4).all(|c| l.store().count(c) == 100));
    l.increment(a[2]).unwrap();
    assert_eq!(l.registry().len(), 6);
    assert!((0..6).all(|c| l.store().count(c) == 85));
    assert!(l.store().total() <= 512);
}

#[test]
fn untrained_increment_keeps_old_logits() {
    let ds = data(2, 12);
    let a = archs(&ds);
    let mut c = config(Variant::BaseIcarl, Budget::Limited(8), 2);
    c.loss.gamma = 1.0;
    c.loss.lambda = 0.0;
    let trained = Learner::initialize(c.clone(), &a[..1]).unwrap().0;
    let dir = tempfile::tempdir().unwrap();
    trained.save(dir.path()).unwrap();
    c.train.max_epochs = 0;
    let mut frozen = Learner::load(dir.path(), c, &a[..1]).unwrap();
    let probe: Vec<Arc<Sample>> = a[0].test.clone();
    let report = frozen.increment(a[1]).unwrap();
    assert_eq!(report.epochs_run, 0);
    let snap = frozen.snapshot().unwrap();
    let (new_logits, _) = frozen.model().class_scores(frozen.model().prepare(&probe).unwrap()).unwrap();
    let (old_logits, _) = snap.class_scores(snap.prepare(&probe).unwrap()).unwrap();
    for i in 0..probe.len() {
        assert_eq!(&new_logits.row(i)[..2], old_logits.row(i));
    }
    let id = |m: &incgan::model::ModelState<f32>| m.params().id("conv0.weight").unwrap();
    assert_eq!(frozen.model().params().value(id(frozen.model())), snap.params().value(id(snap)));
}

#[test]
fn detection_matches_exhaustive_oracle() {
    let ds = data(3, 30);
    let a = archs(&ds);
    let (mut l, _) = Learner::initialize(config(Variant::MtSc, Budget::Limited(24), 2), &a[..1]).unwrap();
    l.increment(a[1]).unwrap();
    l.increment(a[2]).unwrap();
    let samples: Vec<Arc<Sample>> = a.iter().flat_map(|x| x.iter().cloned()).take(200).collect();
    assert_eq!(samples.len(), 200);
    let detected = l.detect(&samples).unwrap();
    let features = l.model().features_of(&samples).unwrap();
    let templates = l.store().templates();
    for (f, d) in features.iter().zip(detected) {
        let mut best = (f64::INFINITY, usize::MAX);
        for (c, mu) in &templates {
            let dist = squared_distance(f, mu);
            if dist < best.0 {
                best = (dist, *c);
            }
        }
        let origin = l.registry().get(best.1).unwrap().origin;
        assert_eq!(origin, d);
    }
}

#[test]
fn evaluation_counts_and_determinism() {
    let ds = data(3, 30);
    let a = archs(&ds);
    let run = || {
        let (mut l, _) = Learner::initialize(config(Variant::MtMc, Budget::Limited(24), 2), &a[..1]).unwrap();
        l.increment(a[1]).unwrap();
        l.increment(a[2]).unwrap();
        (l.evaluate(&a).unwrap(), l)
    };
    let (m, l) = run();
    for (row, arch) in m.confusion.iter().zip(&m.architectures) {
        let gan_tests = a[*arch].test.iter().filter(|s| s.key.origin == Origin::Gan).count();
        assert_eq!(row.iter().sum::<usize>(), gan_tests);
    }
    for v in m.per_arch_detection.iter().chain([&m.detection_acc, &m.classification_acc]) {
        assert!((0.0..=1.0).contains(v));
    }
    assert!(m.aux_detector_acc.is_some());
    let (again, _) = run();
    assert_eq!(m, again);

    let dir = tempfile::tempdir().unwrap();
    l.save(dir.path()).unwrap();
    let restored = Learner::load(dir.path(), l.config().clone(), &a).unwrap();
    assert_eq!(restored.evaluate(&a).unwrap(), m);
}

#[test]
fn sixth_architecture_follows_the_same_protocol() {
    let ds = data(6, 12);
    let a = archs(&ds);
    let (mut l, _) = Learner::initialize(config(Variant::MtSc, Budget::Limited(36), 1), &a[..1]).unwrap();
    for arch in &a[1..] {
        let r = l.increment(arch).unwrap();
        assert_eq!(r.step, l.steps());
    }
    assert_eq!(l.registry().len(), 12);
    assert!((0..12).all(|c| l.store().count(c) == 3));
    let sizes = vec![6; 12];
    l.check_invariants(|c| sizes[c]).unwrap();
}

#[test]
fn empty_training_set_is_a_config_error() {
    let mut ds = data(1, 4);
    ds.architectures[0].train.clear();
    let r = Learner::initialize(config(Variant::MtSc, Budget::Limited(4), 1), &archs(&ds));
    assert!(matches!(r, Err(Error::Config(_))));
}
