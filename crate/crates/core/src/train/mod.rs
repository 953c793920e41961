//! Minibatch training with Adam, periodic metrics, and best-validation
//! checkpointing.

mod batch;
mod config;

pub use batch::{evaluate, fixed_batches, item_at, make_batch, sample_batch, teacher_forced_accuracy};
pub use config::{TrainConfig, Variant};

use std::path::PathBuf;
use std::time::Instant;

use crate::error::{CpvError, Result};
use crate::io::write_atomic;
use crate::model::{total_loss, CpvModel, LossBreakdown, LossOptions};
use crate::nn::{AdamConfig, AdamState};
use crate::planner::{Dataset, DemoPair};
use crate::seed;

pub const METRICS_HEADER: &str =
    "epoch,step,loss,train_il,train_hom,train_pair,train_total,val_il,val_hom,val_pair,val_total,train_acc,val_acc";

/// One metrics tick. Wall-clock time goes to a separate timing file so that
/// the metrics themselves are reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    /// Training loss of the most recent optimizer step.
    pub loss: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let (t, v) = (&self.train, &self.val);
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.step, self.loss, t.il, t.hom, t.pair, t.total, v.il, v.hom, v.pair, v.total, self.train_acc, self.val_acc
        )
    }
}

pub struct TrainOutcome {
    /// Parameters at the lowest validation IL loss.
    pub best: CpvModel<f32>,
    pub last: CpvModel<f32>,
    pub best_step: usize,
    pub best_val_il: f64,
    pub rows: Vec<MetricsRow>,
    pub steps: usize,
}

fn timing_path(metrics: &std::path::Path) -> PathBuf {
    let mut s = metrics.as_os_str().to_owned();
    s.push(".timing");
    PathBuf::from(s)
}

/// Loads the configured dataset and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = Dataset::load(&cfg.dataset)?;
    train_on(cfg, &dataset)
}

/// Trains on the dataset's 90% split; the 10% split is only evaluated.
///
/// One epoch is `n_train_pairs` optimizer steps of `batch_size` sampled
/// timesteps each.
pub fn train_on(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_idx, val_idx) = dataset.split();
    let train_pairs: Vec<&DemoPair> = train_idx.iter().map(|&i| &dataset.pairs[i]).collect();
    let val_pairs: Vec<&DemoPair> = val_idx.iter().map(|&i| &dataset.pairs[i]).collect();
    if train_pairs.is_empty() {
        return Err(CpvError::Invalid("dataset has no training pairs".into()));
    }
    let weights = cfg.weights();
    let train_eval = fixed_batches(&train_pairs, cfg.eval_batches, cfg.batch_size, seed::derive(cfg.seed, 3))?;
    let val_eval = if val_pairs.is_empty() {
        Vec::new()
    } else {
        fixed_batches(&val_pairs, cfg.eval_batches, cfg.batch_size, seed::derive(cfg.seed, 4))?
    };
    let acc_train: Vec<&DemoPair> = train_pairs.iter().take(cfg.acc_pairs).copied().collect();
    let acc_val: Vec<&DemoPair> = val_pairs.iter().take(cfg.acc_pairs).copied().collect();

    let mut model = CpvModel::<f32>::new(cfg.mode, cfg.dim, seed::derive(cfg.seed, 1));
    let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &sizes);
    let mut rng = seed::rng(seed::derive(cfg.seed, 2));

    // Both files are rewritten atomically at every tick.
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut timing = String::from("step,seconds\n");
    let timing_file = timing_path(&cfg.metrics);
    write_atomic(&cfg.metrics, metrics.as_bytes())?;
    let start = Instant::now();

    let steps_per_epoch = train_pairs.len();
    let total_steps = steps_per_epoch * cfg.epochs;
    log::info!(
        "training {} model: {} train / {} val pairs, {} steps ({} per epoch)",
        cfg.mode,
        train_pairs.len(),
        val_pairs.len(),
        total_steps,
        steps_per_epoch
    );
    let mut best: Option<(f64, usize, CpvModel<f32>)> = None;
    let mut rows = Vec::new();
    for step in 1..=total_steps {
        let batch = sample_batch(&train_pairs, cfg.batch_size, &mut rng)?;
        let out = total_loss(&model, &batch, weights, LossOptions { grads: true, ..Default::default() })?;
        if !out.total.is_finite() {
            return Err(CpvError::NonFinite { step, detail: format!("{:?}", out.breakdown) });
        }
        let last_loss = out.breakdown.total;
        let grads = out.grads.expect("gradients requested");
        let g: Vec<&[f32]> = grads.params().into_iter().map(|t| t.data()).collect();
        adam.update(model.params_mut().into_iter().map(|t| t.data_mut()).collect(), g);

        let epoch_end = step % steps_per_epoch == 0;
        let tick = epoch_end || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if !tick {
            continue;
        }
        let train_m = evaluate(&model, &train_eval, weights)?;
        let val_m = if val_eval.is_empty() { train_m } else { evaluate(&model, &val_eval, weights)? };
        let row = MetricsRow {
            epoch: (step - 1) / steps_per_epoch + 1,
            step,
            loss: last_loss,
            train: train_m,
            val: val_m,
            train_acc: teacher_forced_accuracy(&model, &acc_train)?,
            val_acc: if acc_val.is_empty() { f64::NAN } else { teacher_forced_accuracy(&model, &acc_val)? },
        };
        metrics.push_str(&row.to_csv());
        metrics.push('\n');
        write_atomic(&cfg.metrics, metrics.as_bytes())?;
        let secs = start.elapsed().as_secs_f64();
        timing.push_str(&format!("{step},{secs:.3}\n"));
        write_atomic(&timing_file, timing.as_bytes())?;
        log::info!(
            "epoch {} step {step}/{total_steps} loss {:.4} val il {:.4} hom {:.4} pair {:.4} acc {:.3}/{:.3} ({secs:.1}s)",
            row.epoch,
            last_loss,
            val_m.il,
            val_m.hom,
            val_m.pair,
            row.train_acc,
            row.val_acc
        );
        if best.as_ref().map_or(true, |(il, _, _)| val_m.il < *il) {
            model.save_checkpoint(&cfg.checkpoint, Some(&adam))?;
            best = Some((val_m.il, step, model.clone()));
        }
        rows.push(row);
    }
    model.save_checkpoint(&cfg.last_checkpoint_path(), Some(&adam))?;
    let (best_val_il, best_step, best_model) = best.unwrap_or((f64::NAN, total_steps, model.clone()));
    Ok(TrainOutcome { best: best_model, last: model, best_step, best_val_il, rows, steps: total_steps })
}
