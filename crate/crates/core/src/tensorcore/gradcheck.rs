//! Central finite-difference check of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that two
    /// near-zero gradients do not register as a large relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    /// Set when probing hit a non-finite value.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error <= self.tol
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `d f / d point` from [`Graph::backward`] against central
/// differences. `f` builds a scalar from the registered point.
pub fn gradcheck<F>(f: F, point: &Tensor, cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone().requires_grad(true));
    let out = f(&mut g, x)?;
    let base = g.value(out).item();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        analytic: Vec::new(),
        numeric: Vec::with_capacity(point.numel()),
        tol: cfg.tol,
        failure: None,
    };
    if !base.is_finite() {
        report.failure = Some(format!("non-finite value {base} at the unperturbed point"));
        return Ok(report);
    }
    g.backward(out)?;
    report.analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t);
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += cfg.eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= cfg.eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            report.failure = Some(format!(
                "non-finite value while probing index {i}: f(+)={fp}, f(-)={fm}"
            ));
            return Ok(report);
        }
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let err = relative_error(report.analytic[i], numeric, cfg.floor);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
        report.numeric.push(numeric);
    }
    Ok(report)
}
