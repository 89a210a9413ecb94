//! The training loop: seeded shuffling, combined BCE + soft IoU loss,
//! AdamW stepped on a cosine-annealed learning rate over the whole step
//! budget, held-out IoU after every epoch, and checkpointing.
//!
//! Everything stochastic (model init, batch order) derives from the
//! plan's seed, so two runs of the same plan produce bitwise-identical
//! parameters and therefore identical checkpoint checksums.

use crate::data::checkpoint::save_checkpoint;
use crate::data::{stack_batch, SampleRecord};
use crate::eval::validation_iou;
use crate::loss::{loss_terms, LossConfig};
use crate::model::{build, UcfConfig, UcfModel};
use crate::nn::{Mode, ModelState};
use crate::optim::{cosine_lr, AdamW, OptimConfig};
use crate::tensor::{NodeId, Scalar, Tape};
use crate::{Error, Result};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy)]
pub struct TrainPlan<'a> {
    pub model: &'a UcfConfig,
    pub optim: &'a OptimConfig,
    pub loss: &'a LossConfig,
    /// Seeds model init and batch shuffling.
    pub seed: u64,
    /// Checkpoints and `train_log.csv` land here when set; `None` keeps
    /// the run entirely in memory.
    pub out_dir: Option<&'a Path>,
    /// Extra snapshot cadence in epochs (0 disables; best and final are
    /// always written when `out_dir` is set).
    pub checkpoint_every: usize,
}

/// One CSV row of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean unweighted BCE over the epoch's samples (0 when disabled).
    pub bce: f64,
    /// Mean unweighted soft IoU loss (0 when disabled).
    pub soft_iou: f64,
    /// Mean weighted total.
    pub total: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Dataset IoU on the held-out set after the epoch.
    pub val_iou: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<S> {
    pub model: UcfModel,
    pub state: ModelState<S>,
    pub log: Vec<EpochLog>,
    pub best_val_iou: f64,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

fn scalar_value<S: Scalar>(tape: &Tape<'_, S>, id: NodeId) -> f64 {
    tape.value(id).data()[0].as_f64()
}

pub fn train_model<S: Scalar>(
    plan: &TrainPlan<'_>,
    train_set: &[SampleRecord<S>],
    val_set: &[SampleRecord<S>],
) -> Result<TrainOutcome<S>> {
    plan.optim.validate()?;
    plan.loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("train_model: empty training set"));
    }
    if val_set.is_empty() {
        return Err(Error::data("train_model: empty validation set"));
    }

    let (model, mut state) = build::<S>(plan.model, plan.seed)?;
    let mut opt = AdamW::new(plan.optim, &state.params)?;
    // Same seed as the init stream, distinct stream id: batch order and
    // weights stay independently reproducible.
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(1);

    let steps_per_epoch = train_set.len().div_ceil(plan.optim.batch_size);
    let total_steps = plan.optim.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(plan.optim.epochs);
    let mut best_val_iou = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_checkpoint = None;
    let mut final_checkpoint = None;
    let mut last_good: Option<PathBuf> = None;
    let mut global_step = 0usize;

    for epoch in 0..plan.optim.epochs {
        order.shuffle(&mut rng);
        let lr_logged = cosine_lr(global_step, total_steps, plan.optim.lr_max, plan.optim.lr_min);
        let (mut bce_sum, mut iou_sum, mut total_sum) = (0.0, 0.0, 0.0);

        for chunk in order.chunks(plan.optim.batch_size) {
            let records: Vec<&SampleRecord<S>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = stack_batch(&records)?;
            let ModelState { params, bufs } = &mut state;
            let mut tape = Tape::new(params);
            let x = tape.leaf(images);
            let logits = model.forward_on(&mut tape, bufs, Mode::Train, x)?;
            let terms = loss_terms(&mut tape, plan.loss, logits, &masks)?;

            let total_v = scalar_value(&tape, terms.total);
            if !total_v.is_finite() {
                let at = last_good
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into());
                return Err(Error::Numeric(format!(
                    "loss became {total_v} at epoch {epoch}, step {global_step}; \
                     last good checkpoint: {at}"
                )));
            }
            let n = records.len() as f64;
            bce_sum += terms.bce.map_or(0.0, |id| scalar_value(&tape, id)) * n;
            iou_sum += terms.soft_iou.map_or(0.0, |id| scalar_value(&tape, id)) * n;
            total_sum += total_v * n;

            let grads = tape.backward(terms.total)?;
            state.params.zero_grad();
            state.params.accumulate(grads.params());
            let lr = cosine_lr(global_step, total_steps, plan.optim.lr_max, plan.optim.lr_min);
            opt.step(&mut state.params, lr)?;
            global_step += 1;
        }

        let val_iou = validation_iou(&model, &state, val_set)?;
        let n_seen = train_set.len() as f64;
        log.push(EpochLog {
            epoch,
            bce: bce_sum / n_seen,
            soft_iou: iou_sum / n_seen,
            total: total_sum / n_seen,
            lr: lr_logged,
            val_iou,
        });
        log::info!(
            "epoch {epoch}: loss {:.4}, lr {:.2e}, val IoU {val_iou:.4}",
            total_sum / n_seen,
            lr_logged
        );

        let improved = val_iou > best_val_iou;
        if improved {
            best_val_iou = val_iou;
            best_epoch = epoch;
        }
        if let Some(dir) = plan.out_dir {
            if improved {
                let base = dir.join("ckpt_best");
                save_checkpoint(&base, plan.model, &state, None, global_step as u64)?;
                best_checkpoint = Some(base.clone());
                last_good = Some(base);
            }
            if plan.checkpoint_every > 0 && (epoch + 1) % plan.checkpoint_every == 0 {
                let base = dir.join(format!("ckpt_epoch_{:04}", epoch + 1));
                save_checkpoint(&base, plan.model, &state, Some(&opt), global_step as u64)?;
                last_good = Some(base);
            }
        }
    }

    if let Some(dir) = plan.out_dir {
        let base = dir.join("ckpt_final");
        save_checkpoint(&base, plan.model, &state, Some(&opt), global_step as u64)?;
        final_checkpoint = Some(base.clone());
        write_log_csv(&dir.join("train_log.csv"), &log)?;
    }

    Ok(TrainOutcome {
        model,
        state,
        log,
        best_val_iou,
        best_epoch,
        best_checkpoint,
        final_checkpoint,
    })
}

/// Writes the per-epoch log as CSV: epoch, bce, soft_iou, total, lr,
/// val_iou. Floats are written with full round-trip precision.
pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,bce,soft_iou,total,lr,val_iou")?;
    for e in log {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            e.epoch, e.bce, e.soft_iou, e.total, e.lr, e.val_iou
        )?;
    }
    Ok(())
}
