use crate::craftworld::{Action, Observation};
use crate::error::{CpvError, Result};
use crate::nn::{softmax_cross_entropy, Tensor};
use crate::Scalar;

use super::{argmax, stack_images, ConditioningMode, CpvModel, Img};

pub const TRIPLET_MARGIN: f64 = 1.0;

/// `max(|a - p| - |a - n| + margin, 0)` with margin 1.
pub fn triplet_margin<T: Scalar>(a: &[T], p: &[T], n: &[T]) -> T {
    let margin = T::from_f64_lossy(TRIPLET_MARGIN);
    (dist(a, p) - dist(a, n) + margin).max(T::zero())
}

fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Gradients of [`triplet_margin`] w.r.t. `(a, p, n)`; `None` when the hinge is inactive.
pub fn triplet_grad<T: Scalar>(a: &[T], p: &[T], n: &[T]) -> Option<(Vec<T>, Vec<T>, Vec<T>)> {
    triplet(a, p, n).grads
}

/// Hinge argument and, when active, the gradients w.r.t. a, p, n.
struct Triplet<T> {
    arg: T,
    grads: Option<(Vec<T>, Vec<T>, Vec<T>)>,
}

fn triplet<T: Scalar>(a: &[T], p: &[T], n: &[T]) -> Triplet<T> {
    let dp = dist(a, p);
    let dn = dist(a, n);
    let arg = dp - dn + T::from_f64_lossy(TRIPLET_MARGIN);
    if arg <= T::zero() {
        return Triplet { arg, grads: None };
    }
    let unit = |x: &[T], y: &[T], d: T| -> Vec<T> {
        if d > T::zero() {
            x.iter().zip(y).map(|(&u, &v)| (u - v) / d).collect()
        } else {
            vec![T::zero(); x.len()]
        }
    };
    let up = unit(a, p, dp);
    let un = unit(a, n, dn);
    let ga = up.iter().zip(&un).map(|(&x, &y)| x - y).collect();
    let gp = up.iter().map(|&x| -x).collect();
    Triplet { arg, grads: Some((ga, gp, un)) }
}

/// One training example: a reference pair, a demonstration of the same task,
/// and the expert action at the demonstration's frame `current`.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub ref_first: &'a Observation,
    pub ref_last: &'a Observation,
    pub first: &'a Observation,
    pub current: &'a Observation,
    /// Intermediate frame splitting the demonstration for the homomorphism loss.
    pub split: &'a Observation,
    pub last: &'a Observation,
    pub action: Action,
    /// Batch position of an item from a different pair.
    pub negative: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Batch<'a> {
    pub items: Vec<TrainItem<'a>>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub hom: f64,
    pub pair: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Evaluate hom and pair terms even when their weights are zero.
    pub aux: bool,
    pub grads: bool,
    /// Record ReLU pre-activations and hinge arguments.
    pub kinks: bool,
}

/// Batch means. `hom` and `pair` are NaN when not evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub il: f64,
    pub hom: f64,
    pub pair: f64,
    pub total: f64,
    /// Items whose argmax logit matches the expert action.
    pub correct: usize,
    pub count: usize,
}

pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    pub total: T,
    pub grads: Option<CpvModel<T>>,
    pub kinks: Vec<T>,
}

/// `IL + lambda_hom * Hom + lambda_pair * Pair` with optional gradients.
pub fn total_loss<T: Scalar>(
    model: &CpvModel<T>,
    batch: &Batch<'_>,
    weights: LossWeights,
    opts: LossOptions,
) -> Result<LossOutput<T>> {
    let b = batch.len();
    if b == 0 {
        return Err(CpvError::Invalid("empty batch".into()));
    }
    let mode = model.mode;
    let aux = mode.has_encoder() && (opts.aux || weights.hom != 0.0 || weights.pair != 0.0);
    let negatives: Vec<usize> = if aux {
        batch.items.iter().map(|it| it.negative.ok_or(CpvError::NoNegative)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut kinks = Vec::new();
    let mut grads = opts.grads.then(|| model.zeros_like());
    let labels: Vec<usize> = batch.items.iter().map(|it| it.action.index()).collect();

    // Encoder rows: ref, [progress], [whole, first half, second half].
    let mut emb = None;
    let mut enc_cache = None;
    let (prog_off, whole_off, s1_off, s2_off) = (b, 2 * b, 3 * b, 4 * b);
    if let Some(enc) = &model.encoder {
        let mut rows: Vec<Vec<Img<'_, T>>> = Vec::new();
        rows.extend(batch.items.iter().map(|it| vec![Img::Obs(it.ref_first), Img::Obs(it.ref_last)]));
        rows.extend(batch.items.iter().map(|it| vec![Img::Obs(it.first), Img::Obs(it.current)]));
        if aux {
            rows.extend(batch.items.iter().map(|it| vec![Img::Obs(it.first), Img::Obs(it.last)]));
            rows.extend(batch.items.iter().map(|it| vec![Img::Obs(it.first), Img::Obs(it.split)]));
            rows.extend(batch.items.iter().map(|it| vec![Img::Obs(it.split), Img::Obs(it.last)]));
        }
        let (e, c) = enc.forward(&stack_images(&rows), opts.kinks.then_some(&mut kinks))?;
        emb = Some(e);
        enc_cache = Some(c);
    }
    let d = model.dim();
    let row = |e: &Tensor<T>, r: usize| -> Vec<T> { e.data()[r * d..(r + 1) * d].to_vec() };

    let (x, context) = match mode {
        ConditioningMode::Naive => {
            let rows: Vec<Vec<Img<'_, T>>> = batch
                .items
                .iter()
                .map(|it| vec![Img::Obs(it.ref_first), Img::Obs(it.ref_last), Img::Obs(it.first), Img::Obs(it.current)])
                .collect();
            (stack_images(&rows), None)
        }
        _ => {
            let e = emb.as_ref().unwrap();
            let mut ctx = Tensor::zeros(&[b, d]);
            for (i, dst) in ctx.data_mut().chunks_mut(d).enumerate() {
                let r = row(e, i);
                if mode == ConditioningMode::Cpv {
                    let p = row(e, prog_off + i);
                    for ((o, &u), &v) in dst.iter_mut().zip(&r).zip(&p) {
                        *o = u - v;
                    }
                } else {
                    dst.copy_from_slice(&r);
                }
            }
            let rows: Vec<Vec<Img<'_, T>>> = batch.items.iter().map(|it| vec![Img::Obs(it.current)]).collect();
            (stack_images(&rows), Some(ctx))
        }
    };
    let (logits, pol_cache) = model.policy.forward(&x, context.as_ref(), opts.kinks.then_some(&mut kinks))?;
    let (il, g_logits) = softmax_cross_entropy(&logits, &labels)?;
    let correct = logits
        .data()
        .chunks(Action::COUNT)
        .zip(&labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count();

    let mut g_emb = (grads.is_some() && emb.is_some()).then(|| Tensor::<T>::zeros(emb.as_ref().unwrap().shape()));
    let (mut hom, mut pair) = (T::nan(), T::nan());
    if aux {
        let e = emb.as_ref().unwrap();
        let inv_b = T::one() / T::from_usize(b).unwrap();
        let wh = T::from_f64_lossy(weights.hom) * inv_b;
        let wp = T::from_f64_lossy(weights.pair) * inv_b;
        let (mut hs, mut ps) = (T::zero(), T::zero());
        for (i, &j) in negatives.iter().enumerate() {
            let s1 = row(e, s1_off + i);
            let s2 = row(e, s2_off + i);
            let anchor: Vec<T> = s1.iter().zip(&s2).map(|(&u, &v)| u + v).collect();
            let th = triplet(&anchor, &row(e, whole_off + i), &row(e, whole_off + j));
            let tp = triplet(&row(e, whole_off + i), &row(e, i), &row(e, j));
            hs += th.arg.max(T::zero());
            ps += tp.arg.max(T::zero());
            if opts.kinks {
                kinks.extend([th.arg, tp.arg]);
            }
            if let Some(g) = g_emb.as_mut() {
                let mut acc = |r: usize, v: &[T], w: T| {
                    for (o, &x) in g.data_mut()[r * d..(r + 1) * d].iter_mut().zip(v) {
                        *o += w * x;
                    }
                };
                if weights.hom != 0.0 {
                    if let Some((ga, gp, gn)) = &th.grads {
                        acc(s1_off + i, ga, wh);
                        acc(s2_off + i, ga, wh);
                        acc(whole_off + i, gp, wh);
                        acc(whole_off + j, gn, wh);
                    }
                }
                if weights.pair != 0.0 {
                    if let Some((ga, gp, gn)) = &tp.grads {
                        acc(whole_off + i, ga, wp);
                        acc(i, gp, wp);
                        acc(j, gn, wp);
                    }
                }
            }
        }
        hom = hs * inv_b;
        pair = ps * inv_b;
    }

    let mut total = il;
    if aux && weights.hom != 0.0 {
        total += T::from_f64_lossy(weights.hom) * hom;
    }
    if aux && weights.pair != 0.0 {
        total += T::from_f64_lossy(weights.pair) * pair;
    }

    if let Some(gm) = grads.as_mut() {
        let g_ctx = model.policy.backward(&pol_cache, &g_logits, &mut gm.policy);
        if let (Some(enc), Some(g), Some(gc)) = (&model.encoder, g_emb.as_mut(), g_ctx) {
            for (i, src) in gc.data().chunks(d).enumerate() {
                for (k, &v) in src.iter().enumerate() {
                    g.data_mut()[i * d + k] += v;
                    if mode == ConditioningMode::Cpv {
                        g.data_mut()[(prog_off + i) * d + k] -= v;
                    }
                }
            }
            enc.backward(enc_cache.as_ref().unwrap(), g, gm.encoder.as_mut().unwrap());
        }
    }

    let f = |v: T| v.to_f64_lossy();
    Ok(LossOutput {
        breakdown: LossBreakdown { il: f(il), hom: f(hom), pair: f(pair), total: f(total), correct, count: b },
        total,
        grads,
        kinks,
    })
}

fn eval_only<T: Scalar>(model: &CpvModel<T>, batch: &Batch<'_>) -> Result<LossBreakdown> {
    Ok(total_loss(model, batch, LossWeights::default(), LossOptions { aux: true, ..Default::default() })?.breakdown)
}

/// Mean behavioral cloning cross-entropy.
pub fn il_loss<T: Scalar>(model: &CpvModel<T>, batch: &Batch<'_>) -> Result<f64> {
    Ok(total_loss(model, batch, LossWeights::default(), LossOptions::default())?.breakdown.il)
}

/// Mean triplet loss pulling `g(o_0,o_s) + g(o_s,o_T)` towards `g(o_0,o_T)`.
pub fn hom_loss<T: Scalar>(model: &CpvModel<T>, batch: &Batch<'_>) -> Result<f64> {
    require_encoder(model)?;
    Ok(eval_only(model, batch)?.hom)
}

/// Mean triplet loss pulling the demonstration embedding towards its reference.
pub fn pair_loss<T: Scalar>(model: &CpvModel<T>, batch: &Batch<'_>) -> Result<f64> {
    require_encoder(model)?;
    Ok(eval_only(model, batch)?.pair)
}

fn require_encoder<T: Scalar>(model: &CpvModel<T>) -> Result<()> {
    if model.mode.has_encoder() {
        Ok(())
    } else {
        Err(CpvError::Invalid("naive model has no plan vectors".into()))
    }
}
