//! Finite-difference verification of tape gradients.
//!
//! The checker replays a closure twice per probed element with the element
//! nudged by ±ε and compares the central difference (f(x+ε) − f(x−ε)) / 2ε
//! against the analytic gradient from [`Tape::backward`]. Always run in
//! 64-bit: 32-bit roundoff swamps the differences at usable ε.
//!
//! The per-tensor error is the largest |analytic − numeric| entry divided
//! by the largest gradient magnitude in that tensor. Normalizing by the
//! tensor's gradient scale (instead of each entry's own magnitude) keeps
//! near-zero entries from amplifying finite-difference roundoff into
//! spurious failures; genuine backward bugs (wrong sign, missing term,
//! shifted index) show up at the scale of the gradient itself.

use std::fmt;

use crate::nn::ParamSet;
use crate::{Error, Result};

use super::tape::{NodeId, Tape};
use super::{Scalar, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL_REL: f64 = 1e-4;

/// Outcome for one checked tensor (an input leaf or a parameter).
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    /// Number of elements probed.
    pub checked: usize,
    /// Largest |analytic − numeric| over the probed elements.
    pub max_abs_diff: f64,
    /// Normalization: max(|analytic|∞, |numeric|∞, 1e-8).
    pub scale: f64,
    /// max_abs_diff / scale; the pass criterion.
    pub rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

/// Report over all checked tensors. Passes iff every entry's relative
/// error is at most `tol_rel`.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub tol_rel: f64,
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.rel_err <= self.tol_rel)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "  {:<28} rel err {:.3e} ({} elements, worst at {}) {}",
                e.name,
                e.rel_err,
                e.checked,
                e.worst_index,
                if e.rel_err <= self.tol_rel { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "  overall: max rel err {:.3e} vs tol {:.1e} -> {}",
            self.max_rel_err(),
            self.tol_rel,
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

fn entry_from(name: &str, analytic: &[f64], numeric: &[f64]) -> Result<CheckEntry> {
    debug_assert_eq!(analytic.len(), numeric.len());
    let mut scale = 1e-8f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() {
            return Err(Error::Grad(format!("{name}: analytic gradient is non-finite")));
        }
        scale = scale.max(a.abs()).max(n.abs());
    }
    let (mut max_abs_diff, mut worst_index) = (0.0f64, 0usize);
    for (j, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let d = (a - n).abs();
        if d > max_abs_diff {
            max_abs_diff = d;
            worst_index = j;
        }
    }
    Ok(CheckEntry {
        name: name.to_string(),
        checked: analytic.len(),
        max_abs_diff,
        scale,
        rel_err: max_abs_diff / scale,
        worst_index,
    })
}

fn scalar_loss<S: crate::tensor::Scalar>(tape: &Tape<'_, S>, loss: NodeId) -> Result<f64> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Grad(format!(
            "gradient check: loss must be scalar, got {:?}",
            v.shape()
        )));
    }
    let out = v.data()[0].as_f64();
    if !out.is_finite() {
        return Err(Error::Grad("gradient check: loss evaluated non-finite".into()));
    }
    Ok(out)
}

/// Checks gradients with respect to explicit input tensors.
///
/// The closure receives a fresh tape plus one leaf node per input, builds
/// the computation, and returns the scalar loss node. It must be a pure
/// function of the leaves (same inputs, same loss), since it is re-run for
/// every probe.
pub fn finite_diff_check<F>(
    inputs: &[Tensor4<f64>],
    eps: f64,
    tol_rel: f64,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let no_params = ParamSet::<f64>::new();
    let eval = |probe: &[Tensor4<f64>]| -> Result<f64> {
        let mut tape = Tape::new(&no_params);
        let ids: Vec<NodeId> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        scalar_loss(&tape, loss)
    };

    // Analytic pass.
    let mut tape = Tape::new(&no_params);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    scalar_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, x)| match grads.wrt(id) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        })
        .collect();
    drop(grads);
    drop(tape);

    // Numeric probes.
    let mut probe: Vec<Tensor4<f64>> = inputs.to_vec();
    let mut report = CheckReport {
        tol_rel,
        entries: Vec::new(),
    };
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0f64; x.numel()];
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let fp = eval(&probe)
                .map_err(|e| Error::Grad(format!("input{i}[{j}] +eps probe: {e}")))?;
            probe[i].data_mut()[j] = orig - eps;
            let fm = eval(&probe)
                .map_err(|e| Error::Grad(format!("input{i}[{j}] -eps probe: {e}")))?;
            probe[i].data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * eps);
        }
        report
            .entries
            .push(entry_from(&format!("input{i}"), &analytic[i], &numeric)?);
    }
    Ok(report)
}

/// Checks gradients with respect to every parameter in a registry.
///
/// The closure builds the forward pass reading parameters only through
/// `tape.param(..)`, so the checker can rebind it to a perturbed copy of
/// the registry. It must be pure: leaves built from captured tensors,
/// no mutation of captured state that survives the call (clone batchnorm
/// buffers inside the closure when running in training mode).
pub fn finite_diff_check_params<F>(
    params: &ParamSet<f64>,
    eps: f64,
    tol_rel: f64,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<NodeId>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(ps);
        let loss = f(&mut tape)?;
        scalar_loss(&tape, loss)
    };

    // Analytic pass.
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    scalar_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| match grads.params().get(id) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; params.value(id).numel()],
        })
        .collect();
    drop(grads);
    drop(tape);

    let mut probe = params.clone();
    let mut report = CheckReport {
        tol_rel,
        entries: Vec::new(),
    };
    for (pi, id) in params.ids().enumerate() {
        let name = params.get(id).name.clone();
        let numel = params.value(id).numel();
        let mut numeric = vec![0.0f64; numel];
        for j in 0..numel {
            let orig = params.value(id).data()[j];
            probe.get_mut(id).value.data_mut()[j] = orig + eps;
            let fp =
                eval(&probe).map_err(|e| Error::Grad(format!("{name}[{j}] +eps probe: {e}")))?;
            probe.get_mut(id).value.data_mut()[j] = orig - eps;
            let fm =
                eval(&probe).map_err(|e| Error::Grad(format!("{name}[{j}] -eps probe: {e}")))?;
            probe.get_mut(id).value.data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * eps);
        }
        report.entries.push(entry_from(&name, &analytic[pi], &numeric)?);
    }
    Ok(report)
}
