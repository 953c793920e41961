use rand::Rng;

use crate::error::{CpvError, Result};
use crate::model::{total_loss, Batch, CpvModel, LossBreakdown, LossOptions, LossWeights, TrainItem};
use crate::planner::DemoPair;
use crate::{seed, Scalar};

/// Builds one item from `pair` at action step `t` with split frame `s`.
pub fn item_at(pair: &DemoPair, t: usize, s: usize, negative: Option<usize>) -> TrainItem<'_> {
    let demo = &pair.demo;
    TrainItem {
        ref_first: pair.reference.first_obs(),
        ref_last: pair.reference.last_obs(),
        first: demo.first_obs(),
        current: &demo.observations[t],
        split: &demo.observations[s],
        last: demo.last_obs(),
        action: demo.actions[t],
        negative,
    }
}

/// Samples `batch_size` (pair, timestep) items uniformly.
///
/// Action steps `t` lie in `[0, H-1]` and split frames in `[1, max(H-1, 1)]`.
/// Each item's negative is a uniformly chosen batch position holding a
/// different pair, or `None` if the batch holds a single pair.
pub fn sample_batch<'a, R: Rng>(pairs: &[&'a DemoPair], batch_size: usize, rng: &mut R) -> Result<Batch<'a>> {
    if pairs.is_empty() {
        return Err(CpvError::Invalid("cannot sample from an empty dataset".into()));
    }
    let mut chosen = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.gen_range(0..pairs.len());
        let h = pairs[i].demo.len();
        if h == 0 || !pairs[i].demo.has_all_frames() {
            return Err(CpvError::CorruptDataset(format!("pair {i} has no usable demonstration")));
        }
        let t = rng.gen_range(0..h);
        let s = rng.gen_range(1..=(h - 1).max(1));
        chosen.push((i, t, s));
    }
    let items = chosen
        .iter()
        .map(|&(i, t, s)| {
            let others: Vec<usize> = (0..chosen.len()).filter(|&j| chosen[j].0 != i).collect();
            let negative = (!others.is_empty()).then(|| others[rng.gen_range(0..others.len())]);
            item_at(pairs[i], t, s, negative)
        })
        .collect();
    Ok(Batch { items })
}

pub fn make_batch<'a>(pairs: &[&'a DemoPair], seed: u64, batch_size: usize) -> Result<Batch<'a>> {
    sample_batch(pairs, batch_size, &mut seed::rng(seed))
}

/// Fixed batches for metric evaluation, reused at every tick.
pub fn fixed_batches<'a>(pairs: &[&'a DemoPair], count: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch<'a>>> {
    let mut rng = seed::rng(seed);
    (0..count).map(|_| sample_batch(pairs, batch_size, &mut rng)).collect()
}

/// Mean losses over `batches`, with hom and pair evaluated regardless of
/// weights. Batches holding a single pair have no negatives and are left out
/// of the hom and pair means.
pub fn evaluate<T: Scalar>(model: &CpvModel<T>, batches: &[Batch<'_>], weights: LossWeights) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown { il: 0.0, hom: 0.0, pair: 0.0, total: 0.0, correct: 0, count: 0 };
    let mut aux_batches = 0usize;
    for b in batches {
        let has_negatives = b.items.iter().all(|it| it.negative.is_some());
        let opts = LossOptions { aux: has_negatives, ..Default::default() };
        let w = if has_negatives { weights } else { LossWeights::default() };
        let out = total_loss(model, b, w, opts)?.breakdown;
        acc.il += out.il;
        acc.total += out.total;
        if has_negatives {
            acc.hom += out.hom;
            acc.pair += out.pair;
            aux_batches += 1;
        }
        acc.correct += out.correct;
        acc.count += out.count;
    }
    let n = batches.len().max(1) as f64;
    acc.il /= n;
    acc.total /= n;
    if aux_batches == 0 {
        acc.hom = f64::NAN;
        acc.pair = f64::NAN;
    } else {
        acc.hom /= aux_batches as f64;
        acc.pair /= aux_batches as f64;
    }
    Ok(acc)
}

/// Teacher-forced accuracy: fraction of all demonstration steps of `pairs`
/// where the argmax action equals the expert's.
pub fn teacher_forced_accuracy<T: Scalar>(model: &CpvModel<T>, pairs: &[&DemoPair]) -> Result<f64> {
    const CHUNK: usize = 64;
    let items: Vec<TrainItem<'_>> =
        pairs.iter().flat_map(|p| (0..p.demo.len()).map(move |t| item_at(p, t, t.max(1).min(p.demo.len()), None))).collect();
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for chunk in items.chunks(CHUNK) {
        let b = Batch { items: chunk.to_vec() };
        correct += total_loss(model, &b, LossWeights::default(), LossOptions::default())?.breakdown.correct;
    }
    Ok(correct as f64 / items.len() as f64)
}
