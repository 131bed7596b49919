//! Checkpointed backward pass that stores only `h(0), h(τ), …, h(nτ)`.
//!
//! Iteration `i` (from the last segment down) rebuilds every segment from its
//! end checkpoint by reversing the forward steps, then integrates the adjoint
//! blocks `i..n` together: block `k + 1` feeds its delayed products into
//! block `k` at the same local time. The block terminals come from earlier
//! iterations, so only block `i` contributes to `dL/dw`.

use crate::dde::{delay_steps, History, Method, Stepper};
use crate::error::{check_len, Error, Result};
use crate::field::VectorField;

use super::{history_backprop, Diagnostics, GradientBundle, ObservationLoss};
use crate::dde::Grid;

#[allow(clippy::too_many_arguments)]
pub fn grad_piecewise(
    field: &dyn VectorField,
    params: &[f64],
    history: &History,
    tau: f64,
    step: f64,
    n_segments: usize,
    checkpoints: &[Vec<f64>],
    loss: &ObservationLoss,
    method: Method,
) -> Result<GradientBundle> {
    let d = field.dim();
    let n = n_segments;
    check_len("field parameters", field.param_count(), params.len())?;
    check_len("history", d, history.dim())?;
    if n == 0 {
        return Err(Error::config("at least one segment is required"));
    }
    check_len("checkpoints", n + 1, checkpoints.len())?;
    for c in checkpoints {
        check_len("checkpoint", d, c.len())?;
    }
    let m = delay_steps(tau, step)?;
    let grid = Grid::from_steps(0.0, step, n * m)?;
    let jumps = loss.on_grid(&grid, d)?;
    let trace = history.trace(step, tau, method)?;
    let hist_lag = |j: usize| -> &[f64] {
        match (&trace, history) {
            (Some(tr), _) => tr.back(m - j),
            (None, History::Constant(x0)) => x0,
            (None, _) => unreachable!(),
        }
    };

    let mut stepper = Stepper::new(field, params, method, step);
    // dL/dh(kτ) including everything downstream of it
    let mut node_grad = vec![vec![0.0; d]; n + 1];
    if let Some(g) = jumps[n * m] {
        node_grad[n].copy_from_slice(g);
    }
    let mut w_grad = vec![0.0; field.param_count()];
    let mut w_scratch = vec![0.0; field.param_count()];
    let mut history_lag_grad = vec![0.0; m * d];
    let mut recon_err: f64 = 0.0;
    let mut sup: f64 = node_grad[n].iter().fold(0.0, |a, v| a.max(v.abs()));

    let mut states = vec![0.0; n * d];
    let mut prev = vec![0.0; n * d];
    let mut lam = vec![0.0; n * d];
    let mut pending = vec![0.0; n * d];
    let mut ybuf = vec![0.0; d];

    for i in (0..n).rev() {
        for b in 0..n {
            states[b * d..(b + 1) * d].copy_from_slice(&checkpoints[b + 1]);
        }
        for b in i..n {
            lam[b * d..(b + 1) * d].copy_from_slice(&node_grad[b + 1]);
        }
        for j in (0..m).rev() {
            // only blocks up to n − 1 whose lag chain reaches block i matter,
            // but every block below them must be rebuilt to supply the lags
            for b in 0..n {
                let (done, rest) = prev.split_at_mut(b * d);
                let lag: &[f64] = if b == 0 { hist_lag(j) } else { &done[(b - 1) * d..] };
                let t = (b * m + j) as f64 * step;
                stepper
                    .invert(&states[b * d..(b + 1) * d], Some(lag), t, &mut rest[..d])
                    .map_err(|e| match e {
                        Error::Divergence { context, .. } => Error::Divergence {
                            step: b * m + j,
                            context,
                        },
                        other => other,
                    })?;
            }
            pending[i * d..].fill(0.0);
            for b in (i..n).rev() {
                let lag: &[f64] = if b == 0 { hist_lag(j) } else { &prev[(b - 1) * d..b * d] };
                let t = (b * m + j) as f64 * step;
                let (lo, hi) = pending.split_at_mut(b * d);
                let xbar = &mut hi[..d];
                ybuf.fill(0.0);
                let wbar = if b == i { &mut w_grad } else { &mut w_scratch };
                stepper.step_vjp(
                    &prev[b * d..(b + 1) * d],
                    Some(lag),
                    t,
                    &lam[b * d..(b + 1) * d],
                    xbar,
                    Some(&mut ybuf),
                    wbar,
                );
                if b > i {
                    for (p, y) in lo[(b - 1) * d..].iter_mut().zip(&ybuf) {
                        *p += y;
                    }
                } else if b == 0 {
                    for (p, y) in history_lag_grad[j * d..(j + 1) * d].iter_mut().zip(&ybuf) {
                        *p += y;
                    }
                }
                if let Some(g) = jumps[b * m + j] {
                    for (x, gi) in xbar.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
            for b in i..n {
                lam[b * d..(b + 1) * d].copy_from_slice(&pending[b * d..(b + 1) * d]);
            }
            if let Some(k) = lam[i * d..].iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    step: i * m + j,
                    context: format!("piecewise adjoint component {}", k % d),
                });
            }
            sup = lam[i * d..].iter().fold(sup, |a, v| a.max(v.abs()));
            std::mem::swap(&mut states, &mut prev);
        }
        for b in 0..n {
            for (x, c) in states[b * d..(b + 1) * d].iter().zip(&checkpoints[b]) {
                recon_err = recon_err.max((x - c).abs());
            }
        }
        node_grad[i].copy_from_slice(&lam[i * d..(i + 1) * d]);
    }

    let lag_grad = &history_lag_grad[..d * m.min(n * m)];
    let input = history_backprop(history, trace.as_ref(), &node_grad[0], lag_grad, m, step, method)?;
    Ok(GradientBundle {
        w_grad,
        input_grad: input.full,
        lambda0: input.lambda0,
        history_param_grad: input.history_params,
        diagnostics: Diagnostics {
            reconstruction_error: recon_err,
            adjoint_sup_norm: sup,
        },
    })
}
