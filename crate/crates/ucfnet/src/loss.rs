//! Training criterion: binary cross-entropy computed stably from logits,
//! plus the differentiable Jaccard relaxation ("soft IoU"), combined with
//! fixed weights.
//!
//! BCE is the mean over all pixels of -[y log s(z) + (1-y) log(1-s(z))],
//! evaluated as max(z,0) - z y + ln(1+e^-|z|) so large logits cannot
//! overflow. Soft IoU pools intersection and union over the whole batch:
//! 1 - (sum(p y) + eps) / (sum(p) + sum(y) - sum(p y) + eps).

use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub soft_iou_weight: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bce_weight: 1.0,
            soft_iou_weight: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bce_weight >= 0.0 && self.soft_iou_weight >= 0.0) {
            return Err(Error::config(format!(
                "loss weights must be >= 0, got bce_weight {} soft_iou_weight {}",
                self.bce_weight, self.soft_iou_weight
            )));
        }
        if self.bce_weight == 0.0 && self.soft_iou_weight == 0.0 {
            return Err(Error::config("bce_weight and soft_iou_weight are both zero"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// bce_weight * BCE(logits, target) + soft_iou_weight * softIoU(s(logits),
/// target) as a scalar tape node. Targets must be exact 0/1 masks. Terms
/// with zero weight are skipped entirely.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    cfg: &LossConfig,
    logits: NodeId,
    target: &Tensor4<S>,
) -> Result<NodeId> {
    Ok(loss_terms(tape, cfg, logits, target)?.total)
}

/// The weighted total plus its unweighted constituents, so training can
/// log each term separately. A term with weight zero is never built and
/// stays `None`.
pub struct LossTerms {
    pub bce: Option<NodeId>,
    pub soft_iou: Option<NodeId>,
    pub total: NodeId,
}

pub fn loss_terms<S: Scalar>(
    tape: &mut Tape<'_, S>,
    cfg: &LossConfig,
    logits: NodeId,
    target: &Tensor4<S>,
) -> Result<LossTerms> {
    cfg.validate()?;
    let mut terms = LossTerms {
        bce: None,
        soft_iou: None,
        total: logits, // placeholder, overwritten below
    };
    let mut acc: Option<NodeId> = None;
    if cfg.bce_weight > 0.0 {
        let bce = tape.bce_loss(logits, target)?;
        terms.bce = Some(bce);
        acc = Some(tape.scale(bce, cfg.bce_weight));
    }
    if cfg.soft_iou_weight > 0.0 {
        let p = tape.sigmoid(logits);
        let iou = tape.soft_iou_loss(p, target, cfg.epsilon)?;
        terms.soft_iou = Some(iou);
        let term = tape.scale(iou, cfg.soft_iou_weight);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    terms.total = acc.expect("validate() rejects all-zero weights");
    Ok(terms)
}
