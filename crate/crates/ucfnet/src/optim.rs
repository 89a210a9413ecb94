//! Adaptive-moment optimizer with decoupled weight decay and a cosine
//! learning-rate schedule.
//!
//! Decay is applied directly to the weights (p -= lr * wd * p), never
//! through the gradient path, and only to parameters registered with
//! `weight_decay = true` (convolution kernels; biases and norm affine
//! parameters are exempt).

use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_max: 1e-3,
            lr_min: 1e-5,
            betas: (0.9, 0.999),
            weight_decay: 1e-2,
            epochs: 300,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 < lr_min <= lr_max, got lr_min {} lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine annealing from lr_max at t = 0 down to lr_min at t = T:
/// lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2. T = 0 gives lr_max.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = (t.min(total)) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Optimizer state: first/second moment accumulators aligned with the
/// parameter registry, and the step counter for bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    m: Vec<Tensor4<S>>,
    v: Vec<Tensor4<S>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: &OptimConfig, params: &ParamSet<S>) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect();
        let v = params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect();
        Ok(AdamW {
            m,
            v,
            t: 0,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// First and second moment accumulators, in registry order (for
    /// checkpointing).
    pub fn moments(&self) -> (&[Tensor4<S>], &[Tensor4<S>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds optimizer state from checkpointed moments. Shapes must
    /// align with the registry the optimizer will step.
    pub fn restore(
        cfg: &OptimConfig,
        params: &ParamSet<S>,
        m: Vec<Tensor4<S>>,
        v: Vec<Tensor4<S>>,
        t: u64,
    ) -> Result<Self> {
        let mut opt = Self::new(cfg, params)?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {}/{} tensors for {} parameters",
                m.len(),
                v.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if m[i].shape() != p.value.shape() || v[i].shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape mismatch for parameter {}",
                    p.name
                )));
            }
        }
        opt.m = m;
        opt.v = v;
        opt.t = t;
        Ok(opt)
    }

    /// One update from the gradients stored in the registry. All gradients
    /// are checked for finiteness before anything mutates, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet<S>, lr: f64) -> Result<()> {
        assert_eq!(self.m.len(), params.len(), "optimizer built for a different registry");
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.as_f64().is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}; step rejected",
                    p.name
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.weight_decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grads = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[j].as_f64();
                let mj = self.beta1 * m[j].as_f64() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j].as_f64() + (1.0 - self.beta2) * g * g;
                m[j] = S::of_f64(mj);
                v[j] = S::of_f64(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                let wf = w.as_f64();
                *w = S::of_f64(wf - update - decay * wf);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, weight_decay: bool) -> ParamSet<f64> {
        let mut params = ParamSet::new();
        params.register("p", Tensor4::full([1, 1, 1, 1], value), weight_decay);
        params
    }

    fn set_grad(params: &mut ParamSet<f64>, g: f64) {
        let id = params.find("p").unwrap();
        params.get_mut(id).grad = Tensor4::full([1, 1, 1, 1], g);
    }

    fn value(params: &ParamSet<f64>) -> f64 {
        params.get(params.find("p").unwrap()).value.data()[0]
    }

    #[test]
    fn cosine_schedule_endpoints_midpoint_and_monotonicity() {
        let (hi, lo) = (1e-3, 1e-5);
        assert_eq!(cosine_lr(0, 100, hi, lo), hi);
        assert!((cosine_lr(100, 100, hi, lo) - lo).abs() < 1e-18);
        assert!((cosine_lr(50, 100, hi, lo) - (hi + lo) / 2.0).abs() < 1e-12);
        assert_eq!(cosine_lr(0, 0, hi, lo), hi, "degenerate schedule pins lr_max");
        let mut prev = f64::INFINITY;
        for t in 0..=200 {
            let lr = cosine_lr(t, 200, hi, lo);
            assert!(lr <= prev + 1e-18, "schedule rose at t={t}");
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_alone() {
        let mut params = one_param(0.75, false);
        let mut opt = AdamW::new(&OptimConfig::default(), &params).unwrap();
        for _ in 0..5 {
            opt.step(&mut params, 1e-3).unwrap();
        }
        assert_eq!(value(&params), 0.75);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient_path() {
        // Zero gradient, decay on: exactly p * (1 - lr*wd) per step.
        let mut params = one_param(1.0, true);
        let cfg = OptimConfig { weight_decay: 0.01, ..OptimConfig::default() };
        let mut opt = AdamW::new(&cfg, &params).unwrap();
        opt.step(&mut params, 0.1).unwrap();
        assert!((value(&params) - 0.999).abs() < 1e-15);

        // Parameters registered without decay (biases, norm affine) are
        // exempt even with the same config.
        let mut exempt = one_param(1.0, false);
        let mut opt = AdamW::new(&cfg, &exempt).unwrap();
        opt.step(&mut exempt, 0.1).unwrap();
        assert_eq!(value(&exempt), 1.0);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        let mut params = one_param(0.0, false);
        let mut opt = AdamW::new(&OptimConfig::default(), &params).unwrap();
        let lr = 0.01;
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..500 {
            set_grad(&mut params, 2.5);
            prev = value(&params);
            opt.step(&mut params, lr).unwrap();
            delta = value(&params) - prev;
        }
        let _ = prev;
        assert!(delta < 0.0, "update must move against the gradient");
        assert!(
            (delta.abs() - lr).abs() <= 0.05 * lr,
            "adaptive normalization should settle near lr, got step {delta}"
        );
    }

    #[test]
    fn quadratic_bowl_converges_within_500_steps() {
        // loss = (p - 3)^2, gradient fed manually; cosine-annealed lr.
        let mut params = one_param(0.0, false);
        let cfg = OptimConfig { lr_max: 0.1, ..OptimConfig::default() };
        let mut opt = AdamW::new(&cfg, &params).unwrap();
        let total = 500;
        for t in 0..total {
            let g = 2.0 * (value(&params) - 3.0);
            set_grad(&mut params, g);
            let lr = cosine_lr(t, total, cfg.lr_max, cfg.lr_min);
            opt.step(&mut params, lr).unwrap();
        }
        let p = value(&params);
        assert!((p - 3.0).abs() <= 1e-2, "expected p near 3, got {p}");
    }

    #[test]
    fn non_finite_gradients_reject_the_step_without_mutation() {
        let mut params = one_param(0.5, true);
        let mut opt = AdamW::new(&OptimConfig::default(), &params).unwrap();
        set_grad(&mut params, f64::NAN);
        let err = opt.step(&mut params, 1e-3).unwrap_err();
        assert!(err.to_string().contains("p"), "diagnostic names the parameter");
        assert_eq!(value(&params), 0.5, "rejected step must not touch weights");
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let ok = OptimConfig::default();
        assert!(ok.validate().is_ok());
        assert!(OptimConfig { lr_min: 2e-3, ..ok.clone() }.validate().is_err());
        assert!(OptimConfig { lr_min: 0.0, ..ok.clone() }.validate().is_err());
        assert!(OptimConfig { betas: (1.0, 0.999), ..ok.clone() }.validate().is_err());
        assert!(OptimConfig { betas: (0.9, -0.1), ..ok.clone() }.validate().is_err());
        assert!(OptimConfig { weight_decay: -0.1, ..ok.clone() }.validate().is_err());
        assert!(OptimConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(OptimConfig { batch_size: 0, ..ok }.validate().is_err());
    }
}
