use cpv_core::model::{ConditioningMode, CpvModel};
use cpv_core::planner::{generate_dataset, Dataset, DemoPair, PlannerConfig};
use cpv_core::train::{make_batch, train, train_on, TrainConfig, METRICS_HEADER};

fn dataset(n: usize, seed: u64) -> Dataset {
    generate_dataset(seed, n, 1, 2, 0.1, &PlannerConfig::default(), 1).unwrap()
}

fn pair_index(d: &Dataset, item_first: *const u8) -> usize {
    d.pairs.iter().position(|p| p.demo.first_obs().planes().as_ptr() == item_first).unwrap()
}

#[test]
fn batch_ranges_and_negatives() {
    let d = dataset(8, 1);
    let pairs: Vec<&DemoPair> = d.pairs.iter().collect();
    for seed in 0..50 {
        let b = make_batch(&pairs, seed, 16).unwrap();
        assert_eq!(b.len(), 16);
        for it in &b.items {
            let i = pair_index(&d, it.first.planes().as_ptr());
            let demo = &d.pairs[i].demo;
            let t = demo.observations.iter().position(|o| std::ptr::eq(o, it.current)).unwrap();
            let s = demo.observations.iter().position(|o| std::ptr::eq(o, it.split)).unwrap();
            assert!(t < demo.len());
            assert_eq!(it.action, demo.actions[t]);
            assert!(s >= 1 && s <= (demo.len() - 1).max(1));
            let j = it.negative.expect("several pairs in batch");
            assert_ne!(pair_index(&d, b.items[j].first.planes().as_ptr()), i);
        }
    }
}

#[test]
fn batches_are_deterministic_in_seed() {
    let d = dataset(5, 2);
    let pairs: Vec<&DemoPair> = d.pairs.iter().collect();
    let key = |s| {
        make_batch(&pairs, s, 12)
            .unwrap()
            .items
            .iter()
            .map(|it| (it.current.planes().as_ptr() as usize, it.negative))
            .collect::<Vec<_>>()
    };
    assert_eq!(key(7), key(7));
    assert_ne!(key(7), key(8));
}

#[test]
fn pair_sampling_is_uniform() {
    let d = dataset(10, 3);
    let pairs: Vec<&DemoPair> = d.pairs.iter().collect();
    let mut counts = [0usize; 10];
    for seed in 0..1000 {
        for it in make_batch(&pairs, seed, 10).unwrap().items {
            counts[pair_index(&d, it.first.planes().as_ptr())] += 1;
        }
    }
    let expected = 1000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 9 degrees of freedom, p = 0.001.
    assert!(chi2 < 27.88, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn single_pair_batch_has_no_negative() {
    let d = dataset(1, 4);
    let pairs: Vec<&DemoPair> = d.pairs.iter().collect();
    let b = make_batch(&pairs, 0, 4).unwrap();
    assert!(b.items.iter().all(|it| it.negative.is_none()));
    assert!(make_batch(&[], 0, 4).is_err());
}

fn small_config(dir: &std::path::Path, mode: ConditioningMode, hom: f64, pair: f64) -> TrainConfig {
    TrainConfig {
        mode,
        lambda_hom: hom,
        lambda_pair: pair,
        dim: 8,
        lr: 1e-3,
        batch_size: 4,
        epochs: 2,
        seed: 5,
        dataset: dir.join("d.cpvd"),
        checkpoint: dir.join("m.cpvm"),
        last_checkpoint: None,
        metrics: dir.join("metrics.csv"),
        eval_every: 3,
        eval_batches: 2,
        acc_pairs: 4,
    }
}

#[test]
fn training_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    dataset(12, 6).save(&dir.path().join("d.cpvd")).unwrap();
    let cfg = small_config(dir.path(), ConditioningMode::Cpv, 1.0, 1.0);
    let a = train(&cfg).unwrap();
    let csv_a = std::fs::read_to_string(&cfg.metrics).unwrap();
    let ckpt_a = std::fs::read(&cfg.checkpoint).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(csv_a, std::fs::read_to_string(&cfg.metrics).unwrap());
    assert_eq!(ckpt_a, std::fs::read(&cfg.checkpoint).unwrap());
    assert_eq!(a.last, b.last);

    let lines: Vec<&str> = csv_a.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    // 11 training pairs, 2 epochs: ticks every 3 steps plus epoch ends.
    assert_eq!(a.steps, 22);
    assert_eq!(lines.len() - 1, a.rows.len());
    assert_eq!(a.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 6, 9, 11, 12, 15, 18, 21, 22]);
    assert!(a.rows.iter().all(|r| r.loss.is_finite() && r.val.total.is_finite()));

    let (best, adam) = CpvModel::<f32>::load_checkpoint(&cfg.checkpoint).unwrap();
    assert_eq!(best, a.best);
    assert!(adam.is_some());
    let (last, _) = CpvModel::<f32>::load_checkpoint(&cfg.last_checkpoint_path()).unwrap();
    assert_eq!(last, a.last);
    assert!(std::fs::read_to_string(dir.path().join("metrics.csv.timing")).unwrap().starts_with("step,seconds"));
}

#[test]
fn plain_run_still_reports_aux_losses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dataset(30, 7);
    let mut cfg = small_config(dir.path(), ConditioningMode::Cpv, 0.0, 0.0);
    cfg.epochs = 1;
    let out = train_on(&cfg, &d).unwrap();
    for r in &out.rows {
        assert!(r.train.hom.is_finite() && r.train.pair.is_finite());
        assert!(r.val.hom.is_finite() && r.val.pair.is_finite());
        assert_eq!(r.train.total, r.train.il);
    }
}

#[test]
fn training_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let d = dataset(12, 8);
    let mut cfg = small_config(dir.path(), ConditioningMode::Naive, 0.0, 0.0);
    cfg.epochs = 6;
    cfg.eval_every = 0;
    let out = train_on(&cfg, &d).unwrap();
    let first = out.rows.first().unwrap().train.il;
    let last = out.rows.last().unwrap().train.il;
    assert!(last < first, "{first} -> {last}");
}
