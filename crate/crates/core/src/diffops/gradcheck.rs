//! Central finite-difference verification of recorded adjoints.

use std::fmt;

use super::graph::{Graph, ParamStore, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Floor on the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter, evenly strided.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: DEFAULT_STEP, tol: DEFAULT_TOL, max_entries: None }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub label: String,
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {} max_rel_err={:.3e} tol={:.0e}", self.label, self.max_rel_err, self.tol)?;
        if let Some(w) = self.worst() {
            write!(f, " worst={}[{}] analytic={:.6e} numeric={:.6e}", w.name, w.worst_index, w.analytic, w.numeric)?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

fn entry_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n && m > 0 => {
            let stride = n as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Compares `analytic` adjoints against central differences of `value`.
pub fn compare_with_fd<F>(label: &str, value: F, params: &ParamStore, analytic: &ParamStore, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut reports = Vec::new();
    for name in params.names() {
        let n = params.require(&name)?.len();
        let a_grad = analytic.get(&name);
        let mut rep = ParamReport { name: name.clone(), checked: 0, max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for i in entry_indices(n, cfg.max_entries) {
            let orig = params.require(&name)?.data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + cfg.step;
            let fp = value(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - cfg.step;
            let fm = value(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = a_grad.map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            rep.checked += 1;
            if err > rep.max_rel_err || !err.is_finite() {
                rep.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                rep.worst_index = i;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        reports.push(rep);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport { label: label.to_string(), params: reports, max_rel_err, tol: cfg.tol })
}

/// Builds the graph with `f`, runs the backward pass and checks every
/// parameter entry against central differences.
pub fn finite_diff_check<F>(label: &str, f: F, params: &ParamStore, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss)?.params();
    let value = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        Ok(g.value(l).item())
    };
    compare_with_fd(label, value, params, &analytic, cfg)
}
