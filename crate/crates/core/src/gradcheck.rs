//! Central finite-difference oracle for reverse-mode gradients.
//!
//! An entry passes when `|analytic − numeric| ≤ rel·max(|analytic|, |numeric|) + abs`.
//! Loss closures return `(value, pattern)`, where `pattern` fingerprints any
//! piecewise-linear activation state (e.g. [`crate::blocks::DitCache::relu_pattern`]).
//! If either perturbed evaluation lands on a different pattern than the base
//! point, the difference quotient straddles a kink and the entry is skipped
//! and counted, not compared.

use crate::nn::ParamTree;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradTolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        GradTolerance { step: 1e-5, rel: 1e-4, abs: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Largest `|a − n| / max(|a|, |n|)` among entries with `max(|a|, |n|) > 1e-4`;
    /// smaller entries are governed by the absolute floor.
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    #[track_caller]
    pub fn assert_ok(&self) {
        assert!(self.ok(), "gradient mismatches ({} of {}): {:?}", self.mismatches.len(), self.checked, &self.mismatches[..self.mismatches.len().min(5)]);
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.mismatches.extend(other.mismatches);
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, tol: &GradTolerance) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale > 1e-4 {
            self.max_rel_error = self.max_rel_error.max(diff / scale);
        }
        if diff > tol.rel * scale + tol.abs {
            self.mismatches.push(GradMismatch { name: name.to_string(), index, analytic, numeric });
        }
    }
}

/// Checks every entry of every tensor in `params` (or only those for which
/// `select(name, index)` is true, via [`check_param_grads_where`]).
pub fn check_param_grads<P: ParamTree>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> (f64, u64),
    tol: &GradTolerance,
) -> GradReport {
    check_param_grads_where(params, analytic, loss, tol, |_, _| true)
}

pub fn check_param_grads_where<P: ParamTree>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> (f64, u64),
    tol: &GradTolerance,
    select: impl Fn(&str, usize) -> bool,
) -> GradReport {
    let (_, base_pattern) = loss(params);
    let names: Vec<(String, usize)> = params.named_tensors().into_iter().map(|(n, t)| (n, t.numel())).collect();
    let grads: Vec<Vec<f64>> = analytic.named_tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut report = GradReport::default();
    let mut work = params.clone();
    for (ti, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            if !select(name, i) {
                continue;
            }
            let orig = work.tensors_mut()[ti].data()[i];
            work.tensors_mut()[ti].data_mut()[i] = orig + tol.step;
            let (fp, pp) = loss(&work);
            work.tensors_mut()[ti].data_mut()[i] = orig - tol.step;
            let (fm, pm) = loss(&work);
            work.tensors_mut()[ti].data_mut()[i] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            report.record(name, i, grads[ti][i], (fp - fm) / (2.0 * tol.step), tol);
        }
    }
    report
}

/// Same check for the gradient with respect to an input tensor.
pub fn check_input_grad(
    x: &Tensor,
    analytic: &Tensor,
    loss: impl Fn(&Tensor) -> (f64, u64),
    tol: &GradTolerance,
) -> GradReport {
    let (_, base_pattern) = loss(x);
    let mut report = GradReport::default();
    let mut work = x.clone();
    for i in 0..x.numel() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + tol.step;
        let (fp, pp) = loss(&work);
        work.data_mut()[i] = orig - tol.step;
        let (fm, pm) = loss(&work);
        work.data_mut()[i] = orig;
        if pp != base_pattern || pm != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        report.record("input", i, analytic.data()[i], (fp - fm) / (2.0 * tol.step), tol);
    }
    report
}

/// Sign pattern of a tensor, for kink detection around ReLU inputs.
pub fn sign_pattern(tensors: &[&Tensor]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for t in tensors {
        for v in t.data() {
            (*v > 0.0).hash(&mut h);
        }
    }
    h.finish()
}
