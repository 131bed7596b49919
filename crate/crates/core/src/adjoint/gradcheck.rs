use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Central differences of `loss` at `params`.
pub fn finite_diff_gradient<F>(mut loss: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut w = params.to_vec();
    let mut grad = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let w0 = w[i];
        w[i] = w0 + eps;
        let up = loss(&w)?;
        w[i] = w0 - eps;
        let down = loss(&w)?;
        w[i] = w0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Divergence {
                step: i,
                context: format!("loss is not finite when perturbing parameter {i}"),
            });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckEntry {
    pub index: usize,
    pub adjoint: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn new(indices: &[usize], adjoint: &[f64], finite_diff: &[f64], floor: f64) -> Self {
        let entries = indices
            .iter()
            .zip(adjoint.iter().zip(finite_diff))
            .map(|(&index, (&a, &f))| GradcheckEntry {
                index,
                adjoint: a,
                finite_diff: f,
                rel_err: rel_err(a, f, floor),
            })
            .collect();
        GradcheckReport { entries }
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn to_csv(&self, tol: f64) -> String {
        let mut out = String::from("component_index,adjoint_grad,fd_grad,rel_err\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.6e}",
                e.index, e.adjoint, e.finite_diff, e.rel_err
            );
        }
        let _ = writeln!(
            out,
            "# max_rel_err={:.6e} tolerance={tol:e} result={}",
            self.max_rel_err(),
            if self.passes(tol) { "pass" } else { "fail" }
        );
        out
    }
}
