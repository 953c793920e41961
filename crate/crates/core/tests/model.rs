use cpv_core::model::{
    check_total_loss, hom_loss, il_loss, jitter_biases, pair_loss, total_loss, triplet_margin, Batch, ConditioningMode,
    CpvModel, LossOptions, LossWeights, GRAD_TOLERANCE,
};
use cpv_core::planner::{generate_dataset, Dataset, DemoPair, PlannerConfig};
use cpv_core::train::{item_at, make_batch};
use cpv_core::CpvError;
use proptest::prelude::*;

fn dataset(n: usize, seed: u64) -> Dataset {
    generate_dataset(seed, n, 1, 2, 0.1, &PlannerConfig::default(), 1).unwrap()
}

fn pairs(d: &Dataset) -> Vec<&DemoPair> {
    d.pairs.iter().collect()
}

/// Two items from two distinct pairs, each the other's negative.
fn micro_batch(d: &Dataset) -> Batch<'_> {
    let a = &d.pairs[0];
    let b = &d.pairs[1];
    let h = |p: &DemoPair| p.demo.len();
    Batch {
        items: vec![
            item_at(a, h(a) / 2, (h(a) - 1).max(1), Some(1)),
            item_at(b, 0, 1.max(h(b) / 2), Some(0)),
        ],
    }
}

fn zero_model(mode: ConditioningMode) -> CpvModel<f64> {
    let mut m = CpvModel::<f64>::new(mode, 16, 3);
    if let Some(e) = m.encoder.as_mut() {
        for c in &mut e.conv.layers {
            c.weight.fill_zero();
            c.bias.fill_zero();
        }
        e.proj.weight.fill_zero();
        e.proj.bias.fill_zero();
    }
    m.policy.out.weight.fill_zero();
    m.policy.out.bias.fill_zero();
    m
}

#[test]
fn triplet_analytic_cases() {
    assert_eq!(triplet_margin(&[1.0f64, 2.0], &[1.0, 2.0], &[4.0, 2.0]), 0.0);
    assert_eq!(triplet_margin(&[0.5f64, -1.0], &[0.5, -1.0], &[0.5, -1.0]), 1.0);
    assert_eq!(triplet_margin(&[0.0f64], &[2.0], &[1.0]), 2.0);
}

proptest! {
    #[test]
    fn triplet_is_nonnegative_and_zero_iff_separated(
        v in prop::collection::vec(-3.0f64..3.0, 9)
    ) {
        let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
        let t = triplet_margin(a, p, n);
        prop_assert!(t >= 0.0);
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, w)| (u - w).powi(2)).sum::<f64>().sqrt();
        prop_assert_eq!(t == 0.0, d(a, n) >= d(a, p) + 1.0);
    }
}

#[test]
fn zero_encoder_full_loss_is_ln6_plus_two() {
    let d = dataset(6, 1);
    let p = pairs(&d);
    let batch = make_batch(&p, 9, 8).unwrap();
    let m = zero_model(ConditioningMode::Cpv);
    let out = total_loss(&m, &batch, LossWeights { hom: 1.0, pair: 1.0 }, LossOptions::default()).unwrap();
    assert_eq!(out.breakdown.hom, 1.0);
    assert_eq!(out.breakdown.pair, 1.0);
    assert!((out.breakdown.il - 6f64.ln()).abs() < 1e-12);
    assert!((out.total - (6f64.ln() + 2.0)).abs() < 1e-12);
    assert_eq!(hom_loss(&m, &batch).unwrap(), 1.0);
    assert_eq!(pair_loss(&m, &batch).unwrap(), 1.0);
}

#[test]
fn fresh_model_il_is_near_ln6() {
    let d = dataset(6, 2);
    let p = pairs(&d);
    let batch = make_batch(&p, 1, 32).unwrap();
    for mode in [ConditioningMode::Cpv, ConditioningMode::Te, ConditioningMode::Naive] {
        let il = il_loss(&CpvModel::<f32>::new(mode, 32, 5), &batch).unwrap();
        assert!((il - 6f64.ln()).abs() < 0.3, "{mode}: {il}");
    }
}

#[test]
fn zero_weights_total_equals_il_exactly() {
    let d = dataset(6, 3);
    let p = pairs(&d);
    let batch = make_batch(&p, 2, 8).unwrap();
    for mode in [ConditioningMode::Cpv, ConditioningMode::Te, ConditioningMode::Naive] {
        let m = CpvModel::<f32>::new(mode, 16, 1);
        let opts = LossOptions { aux: true, ..Default::default() };
        let out = total_loss(&m, &batch, LossWeights::default(), opts).unwrap();
        assert_eq!(out.breakdown.total, out.breakdown.il);
        assert_eq!(out.breakdown.il, il_loss(&m, &batch).unwrap());
        if mode != ConditioningMode::Naive {
            assert!(out.breakdown.hom.is_finite() && out.breakdown.pair.is_finite());
        }
    }
}

#[test]
fn il_is_invariant_to_item_order() {
    let d = dataset(6, 4);
    let p = pairs(&d);
    let batch = make_batch(&p, 3, 10).unwrap();
    let mut rev = batch.clone();
    rev.items.reverse();
    let n = rev.items.len();
    for it in &mut rev.items {
        it.negative = it.negative.map(|j| n - 1 - j);
    }
    let m = CpvModel::<f64>::new(ConditioningMode::Cpv, 16, 2);
    let w = LossWeights { hom: 1.0, pair: 1.0 };
    let a = total_loss(&m, &batch, w, LossOptions::default()).unwrap().breakdown;
    let b = total_loss(&m, &rev, w, LossOptions::default()).unwrap().breakdown;
    assert!((a.il - b.il).abs() < 1e-12);
    assert!((a.hom - b.hom).abs() < 1e-12);
    assert!((a.pair - b.pair).abs() < 1e-12);
}

#[test]
fn triplet_losses_need_a_negative() {
    let d = dataset(1, 5);
    let p = pairs(&d);
    let batch = make_batch(&p, 0, 1).unwrap();
    assert!(batch.items[0].negative.is_none());
    let m = CpvModel::<f32>::new(ConditioningMode::Cpv, 8, 0);
    assert!(matches!(hom_loss(&m, &batch), Err(CpvError::NoNegative)));
    assert!(matches!(pair_loss(&m, &batch), Err(CpvError::NoNegative)));
    assert!(il_loss(&m, &batch).is_ok());
    let naive = CpvModel::<f32>::new(ConditioningMode::Naive, 8, 0);
    assert!(hom_loss(&naive, &batch).is_err());
}

fn assert_gradients(mode: ConditioningMode, weights: LossWeights) {
    let d = dataset(2, 6);
    let batch = micro_batch(&d);
    let mut m = CpvModel::<f64>::new(mode, 8, 11);
    jitter_biases(&mut m, 12);
    let reports = check_total_loss(&m, &batch, weights, 12, 13).unwrap();
    assert_eq!(reports.len(), m.params().len());
    for (name, r) in reports {
        assert!(r.checked > 0, "{mode} {name}: every coordinate skipped");
        assert!(r.max_rel_error <= GRAD_TOLERANCE, "{mode} {name}: {r:?}");
    }
}

#[test]
fn full_cpv_gradients_match_finite_differences() {
    assert_gradients(ConditioningMode::Cpv, LossWeights { hom: 1.0, pair: 1.0 });
}

#[test]
fn te_and_naive_gradients_match_finite_differences() {
    assert_gradients(ConditioningMode::Te, LossWeights { hom: 0.5, pair: 2.0 });
    assert_gradients(ConditioningMode::Naive, LossWeights::default());
}
