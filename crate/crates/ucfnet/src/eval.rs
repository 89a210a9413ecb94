//! Held-out evaluation: eval-mode inference per image, probabilities and
//! 0.5-threshold masks cropped back to each record's pre-padding size,
//! and the full metric suite over the results.

use crate::data::{crop_to, SampleRecord};
use crate::metrics::{
    confusion, curve_and_auc, descending_thresholds, iou_dataset, metric_report, Curves,
    MetricReport,
};
use crate::model::UcfModel;
use crate::nn::{Mode, ModelState};
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sweep size: thresholds run from 1.0 down to 0.0 inclusive.
    pub thresholds: usize,
    /// Centroid matching radius for Pd/Fa.
    pub match_distance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: 201,
            match_distance: 4.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds < 2 {
            return Err(Error::config(format!(
                "thresholds must be at least 2, got {}",
                self.thresholds
            )));
        }
        if !(self.match_distance.is_finite() && self.match_distance > 0.0) {
            return Err(Error::config(format!(
                "match_distance must be positive, got {}",
                self.match_distance
            )));
        }
        Ok(())
    }
}

/// Inference result for one record, cropped to its original size.
#[derive(Debug, Clone)]
pub struct Prediction<S> {
    pub id: String,
    /// Sigmoid of the logits, in [0, 1].
    pub probs: Tensor4<S>,
    /// probs >= 0.5.
    pub mask: Tensor4<S>,
}

fn predict_one<S: Scalar>(
    model: &UcfModel,
    state: &mut ModelState<S>,
    r: &SampleRecord<S>,
) -> Result<Prediction<S>> {
    let logits = model.forward(state, Mode::Eval, &r.image)?;
    let half = S::of_f64(0.5);
    let probs_data = logits
        .iter()
        .map(|z| S::one() / (S::one() + (-*z).exp()))
        .collect();
    let probs = crop_to(&Tensor4::from_vec(logits.shape(), probs_data)?, r.orig_hw)?;
    let mask_data = probs
        .iter()
        .map(|p| if *p >= half { S::one() } else { S::zero() })
        .collect();
    let mask = Tensor4::from_vec(probs.shape(), mask_data)?;
    Ok(Prediction {
        id: r.id.clone(),
        probs,
        mask,
    })
}

/// Runs eval-mode inference over a dataset. `threads > 1` fans images
/// out over a local thread pool, each worker on its own copy of the
/// state; results are ordered like the input either way, so the metrics
/// downstream never depend on the thread count.
pub fn predict_dataset<S: Scalar>(
    model: &UcfModel,
    state: &ModelState<S>,
    samples: &[SampleRecord<S>],
    threads: usize,
) -> Result<Vec<Prediction<S>>> {
    if threads <= 1 {
        let mut st = state.clone();
        return samples.iter().map(|r| predict_one(model, &mut st, r)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Data(format!("thread pool: {e}")))?;
    pool.install(|| {
        samples
            .par_iter()
            .map_init(|| state.clone(), |st, r| predict_one(model, st, r))
            .collect()
    })
}

/// Dataset IoU of thresholded predictions against the ground truth,
/// used as the per-epoch validation score during training.
pub fn validation_iou<S: Scalar>(
    model: &UcfModel,
    state: &ModelState<S>,
    samples: &[SampleRecord<S>],
) -> Result<f64> {
    let preds = predict_dataset(model, state, samples, 1)?;
    let counts = preds
        .iter()
        .zip(samples)
        .map(|(p, r)| confusion(&p.mask, &crop_to(&r.mask, r.orig_hw)?))
        .collect::<Result<Vec<_>>>()?;
    iou_dataset(&counts)
}

#[derive(Debug)]
pub struct EvalOutputs<S> {
    pub report: MetricReport,
    pub curves: Curves,
    pub predictions: Vec<Prediction<S>>,
}

/// Full evaluation: inference, pixel and object metrics, threshold
/// sweep. Ground-truth masks are cropped to original sizes so every
/// metric sees pre-padding geometry.
pub fn evaluate_dataset<S: Scalar>(
    model: &UcfModel,
    state: &ModelState<S>,
    samples: &[SampleRecord<S>],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<EvalOutputs<S>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("evaluate_dataset: no samples"));
    }
    let predictions = predict_dataset(model, state, samples, threads)?;
    let gts = samples
        .iter()
        .map(|r| crop_to(&r.mask, r.orig_hw))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Tensor4<S>> = predictions.iter().map(|p| p.mask.clone()).collect();
    let probs: Vec<Tensor4<S>> = predictions.iter().map(|p| p.probs.clone()).collect();
    let thresholds = descending_thresholds(cfg.thresholds);
    let report = metric_report(&masks, &probs, &gts, cfg.match_distance, &thresholds)?;
    let curves = curve_and_auc(&probs, &gts, &thresholds)?;
    Ok(EvalOutputs {
        report,
        curves,
        predictions,
    })
}
