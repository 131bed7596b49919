//! Reverse-mode gradients of losses on DDE solutions.
//!
//! The backward sweep runs the delayed adjoint
//! `λ̇ = −λ(t)ᵀ ∂f/∂h(t) − λ(t+τ)ᵀ ∂f(h(t+τ), h(t))/∂y`, discretised as the
//! exact reverse of the forward stepping scheme: each step's stage products
//! route `∂f/∂h` into the current row, `∂f/∂y` into the row one delay
//! earlier (or into the history for `t < τ`), and `∂f/∂w` into the
//! parameter gradient. Gradients are therefore exact for the discrete
//! forward map, which is what the finite-difference oracle measures.
//!
//! Observation losses add `∂L/∂h(t_k)` to λ at each observation node.

mod gradcheck;
mod node;
mod piecewise;


use crate::dde::{delay_steps, lag_for, Grid, History, HistoryTrace, Method, Stepper, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::field::VectorField;

pub use gradcheck::{finite_diff_gradient, rel_err, GradcheckEntry, GradcheckReport};
pub use node::{node_adjoint, NodeAdjoint};
pub use piecewise::grad_piecewise;

/// Per-observation covectors `∂L/∂h(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationLoss {
    times: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

impl ObservationLoss {
    /// `times` must be strictly increasing and positive.
    pub fn new(times: Vec<f64>, grads: Vec<Vec<f64>>) -> Result<Self> {
        check_len("observation covectors", times.len(), grads.len())?;
        if let Some(&t) = times.first() {
            if !(t > 0.0) {
                return Err(Error::config(format!("observation times must be positive, got {t}")));
            }
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("observation times must be strictly increasing"));
        }
        Ok(ObservationLoss { times, grads })
    }

    /// A loss depending only on the state at `t`.
    pub fn terminal(t: f64, grad: Vec<f64>) -> Result<Self> {
        ObservationLoss::new(vec![t], vec![grad])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    /// One optional covector per grid node.
    pub(crate) fn on_grid(&self, grid: &Grid, dim: usize) -> Result<Vec<Option<&[f64]>>> {
        let mut jumps = vec![None; grid.len()];
        for (t, g) in self.times.iter().zip(&self.grads) {
            check_len("observation covector", dim, g.len())?;
            let k = grid.index_of(*t)?;
            if k == 0 {
                return Err(Error::Alignment {
                    time: *t,
                    context: "observation at the initial node".into(),
                });
            }
            jumps[k] = Some(g.as_slice());
        }
        Ok(jumps)
    }
}

/// λ at every grid node of the forward solution, after the jump at that node.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    grid: Grid,
    dim: usize,
    /// Delay in grid steps; `None` for the plain ODE adjoint.
    delay_steps: Option<usize>,
    lambdas: Vec<f64>,
}

impl AdjointSolution {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn lambda(&self, k: usize) -> &[f64] {
        &self.lambdas[k * self.dim..(k + 1) * self.dim]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn sup_norm(&self) -> f64 {
        self.lambdas.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// Largest deviation between reconstructed and checkpointed states.
    pub reconstruction_error: f64,
    pub adjoint_sup_norm: f64,
}

/// Everything one backward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub w_grad: Vec<f64>,
    /// Gradient w.r.t. the history input: the constant value, or the seed
    /// state of an ODE-driven history.
    pub input_grad: Vec<f64>,
    /// λ(0) alone, without the delayed-history path.
    pub lambda0: Vec<f64>,
    /// Gradient w.r.t. the auxiliary history field's parameters.
    pub history_param_grad: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// The parts of the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub lambda0: Vec<f64>,
    /// `Σ` of the delayed-argument products over `[0, τ)`, i.e. the part
    /// flowing through `h(t − τ) = φ(t − τ)`.
    pub delayed: Vec<f64>,
    /// Constant: `lambda0 + delayed`. ODE-driven: gradient at the seed.
    /// Tabulated: gradient w.r.t. the row φ(0).
    pub full: Vec<f64>,
    pub history_params: Vec<f64>,
    /// Tabulated histories only, oldest row first.
    pub history_rows: Option<Vec<Vec<f64>>>,
}

fn check_forward(field: &dyn VectorField, params: &[f64], forward: &Trajectory) -> Result<()> {
    check_len("forward state", field.dim(), forward.dim())?;
    check_len("field parameters", field.param_count(), params.len())?;
    if forward.grid().t0().abs() > 1e-9 {
        return Err(Error::config("DDE adjoints need a forward grid starting at 0"));
    }
    Ok(())
}

/// Shared dense sweep. Returns λ, the parameter gradient and the delayed
/// products for the steps whose lag lies in the history.
struct DenseSweep {
    lambdas: Vec<f64>,
    w_grad: Vec<f64>,
    history_lag_grad: Vec<f64>,
    m: usize,
}

fn dense_sweep(
    field: &dyn VectorField,
    params: &[f64],
    forward: &Trajectory,
    tau: f64,
    loss: &ObservationLoss,
    method: Method,
) -> Result<DenseSweep> {
    check_forward(field, params, forward)?;
    let grid = *forward.grid();
    let d = field.dim();
    let n = grid.n_steps();
    let m = delay_steps(tau, grid.step())?;
    let jumps = loss.on_grid(&grid, d)?;
    let history = forward.history();
    let trace = forward.history_trace();
    if !matches!(history, History::Constant(_)) && trace.is_none() {
        return Err(Error::config("forward trajectory carries no history trace"));
    }

    let mut lambdas = vec![0.0; d * grid.len()];
    let mut w_grad = vec![0.0; field.param_count()];
    let mut history_lag_grad = vec![0.0; d * m.min(n)];
    let mut ybuf = vec![0.0; d];
    let mut stepper = Stepper::new(field, params, method, grid.step());
    if let Some(g) = jumps[n] {
        lambdas[n * d..].copy_from_slice(g);
    }
    let states = forward.states();
    for k in (0..n).rev() {
        let lag = lag_for(states, d, k, m, history, trace);
        let (head, tail) = lambdas.split_at_mut((k + 1) * d);
        ybuf.fill(0.0);
        stepper.step_vjp(
            &states[k * d..(k + 1) * d],
            Some(lag),
            grid.time(k),
            &tail[..d],
            &mut head[k * d..],
            Some(&mut ybuf),
            &mut w_grad,
        );
        let target = if k >= m {
            &mut head[(k - m) * d..(k - m + 1) * d]
        } else {
            &mut history_lag_grad[k * d..(k + 1) * d]
        };
        for (t, y) in target.iter_mut().zip(&ybuf) {
            *t += y;
        }
        if let Some(g) = jumps[k] {
            for (l, gi) in head[k * d..].iter_mut().zip(g) {
                *l += gi;
            }
        }
        if let Some(i) = head[k * d..].iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: k,
                context: format!("adjoint component {i}"),
            });
        }
    }
    Ok(DenseSweep {
        lambdas,
        w_grad,
        history_lag_grad,
        m,
    })
}

/// Integrates the delayed adjoint backward over the forward grid.
pub fn adjoint_backward(
    field: &dyn VectorField,
    params: &[f64],
    forward: &Trajectory,
    tau: f64,
    loss: &ObservationLoss,
    method: Method,
) -> Result<AdjointSolution> {
    let sweep = dense_sweep(field, params, forward, tau, loss, method)?;
    Ok(AdjointSolution {
        grid: *forward.grid(),
        dim: field.dim(),
        delay_steps: Some(sweep.m),
        lambdas: sweep.lambdas,
    })
}

fn check_adjoint(forward: &Trajectory, adj: &AdjointSolution) -> Result<usize> {
    if !forward.grid().same_as(&adj.grid) {
        return Err(Error::Alignment {
            time: adj.grid.t1(),
            context: "adjoint and forward grids differ".into(),
        });
    }
    check_len("adjoint dimension", forward.dim(), adj.dim)?;
    adj.delay_steps
        .ok_or_else(|| Error::config("adjoint solution was not computed for a delayed field"))
}

/// Visits every step's reverse-mode product given the stored λ rows.
#[allow(clippy::too_many_arguments)]
fn replay_steps(
    field: &dyn VectorField,
    params: &[f64],
    forward: &Trajectory,
    adj: &AdjointSolution,
    method: Method,
    steps: std::ops::Range<usize>,
    mut visit: impl FnMut(usize, &[f64]),
    w_grad: &mut [f64],
) -> Result<()> {
    let m = check_adjoint(forward, adj)?;
    let d = field.dim();
    let grid = forward.grid();
    let mut stepper = Stepper::new(field, params, method, grid.step());
    let mut xbar = vec![0.0; d];
    let mut ybuf = vec![0.0; d];
    for k in steps {
        let lag = lag_for(forward.states(), d, k, m, forward.history(), forward.history_trace());
        ybuf.fill(0.0);
        stepper.step_vjp(
            forward.row(k),
            Some(lag),
            grid.time(k),
            adj.lambda(k + 1),
            &mut xbar,
            Some(&mut ybuf),
            w_grad,
        );
        visit(k, &ybuf);
    }
    Ok(())
}

/// `dL/dw`: the step-weighted sum of `λᵀ ∂f/∂w` over all stages of all steps,
/// the quadrature that matches the forward scheme.
pub fn param_gradient(
    field: &dyn VectorField,
    params: &[f64],
    forward: &Trajectory,
    adj: &AdjointSolution,
    method: Method,
) -> Result<Vec<f64>> {
    check_forward(field, params, forward)?;
    let mut w_grad = vec![0.0; field.param_count()];
    let n = forward.grid().n_steps();
    replay_steps(field, params, forward, adj, method, 0..n, |_, _| {}, &mut w_grad)?;
    Ok(w_grad)
}

/// `dL/dφ`, split into λ(0) and the delayed-history path.
pub fn input_gradient(
    field: &dyn VectorField,
    params: &[f64],
    forward: &Trajectory,
    adj: &AdjointSolution,
    method: Method,
) -> Result<InputGradient> {
    check_forward(field, params, forward)?;
    let m = check_adjoint(forward, adj)?;
    let d = field.dim();
    let n = forward.grid().n_steps();
    let mut lag_grad = vec![0.0; d * m.min(n)];
    let mut scratch = vec![0.0; field.param_count()];
    replay_steps(
        field,
        params,
        forward,
        adj,
        method,
        0..m.min(n),
        |k, y| lag_grad[k * d..(k + 1) * d].copy_from_slice(y),
        &mut scratch,
    )?;
    history_backprop(
        forward.history(),
        forward.history_trace(),
        adj.lambda(0),
        &lag_grad,
        m,
        forward.grid().step(),
        method,
    )
}

/// Pulls λ(0) and the delayed products on `[0, τ)` back into the history.
/// `lag_grad[k]` is the product for step `k`, whose lag is φ(kh − τ).
pub(crate) fn history_backprop(
    history: &History,
    trace: Option<&HistoryTrace>,
    lambda0: &[f64],
    lag_grad: &[f64],
    m: usize,
    step: f64,
    method: Method,
) -> Result<InputGradient> {
    let d = lambda0.len();
    let mut delayed = vec![0.0; d];
    for row in lag_grad.chunks(d) {
        for (a, b) in delayed.iter_mut().zip(row) {
            *a += b;
        }
    }
    match history {
        History::Constant(_) => Ok(InputGradient {
            lambda0: lambda0.to_vec(),
            full: lambda0.iter().zip(&delayed).map(|(a, b)| a + b).collect(),
            delayed,
            history_params: Vec::new(),
            history_rows: None,
        }),
        History::OdeDriven(_) | History::Tabulated(_) => {
            let trace = trace.ok_or_else(|| Error::config("history trace missing"))?;
            let rows = trace.len();
            let mut zbar = vec![0.0; rows * d];
            zbar[(rows - 1) * d..].copy_from_slice(lambda0);
            for (k, y) in lag_grad.chunks(d).enumerate() {
                let q = rows - 1 - (m - k);
                for (z, v) in zbar[q * d..(q + 1) * d].iter_mut().zip(y) {
                    *z += v;
                }
            }
            if let History::OdeDriven(h) = history {
                let mut hp = vec![0.0; h.params.len()];
                let mut stepper = Stepper::new(h.field.as_ref(), &h.params, method, step);
                let t0 = -h.span;
                for q in (0..rows - 1).rev() {
                    let (head, tail) = zbar.split_at_mut((q + 1) * d);
                    stepper.step_vjp(
                        trace.row(q),
                        None,
                        t0 + q as f64 * step,
                        &tail[..d],
                        &mut head[q * d..],
                        None,
                        &mut hp,
                    );
                }
                Ok(InputGradient {
                    lambda0: lambda0.to_vec(),
                    delayed,
                    full: zbar[..d].to_vec(),
                    history_params: hp,
                    history_rows: None,
                })
            } else {
                Ok(InputGradient {
                    lambda0: lambda0.to_vec(),
                    delayed,
                    full: zbar[(rows - 1) * d..].to_vec(),
                    history_params: Vec::new(),
                    history_rows: Some(zbar.chunks(d).map(<[f64]>::to_vec).collect()),
                })
            }
        }
    }
}

/// One fused dense-store backward pass: λ, `dL/dw` and `dL/dφ` together.
pub fn gradient_dense(
    field: &dyn VectorField,
    params: &[f64],
    forward: &Trajectory,
    tau: f64,
    loss: &ObservationLoss,
    method: Method,
) -> Result<GradientBundle> {
    let sweep = dense_sweep(field, params, forward, tau, loss, method)?;
    let d = field.dim();
    let input = history_backprop(
        forward.history(),
        forward.history_trace(),
        &sweep.lambdas[..d],
        &sweep.history_lag_grad,
        sweep.m,
        forward.grid().step(),
        method,
    )?;
    Ok(GradientBundle {
        w_grad: sweep.w_grad,
        input_grad: input.full,
        lambda0: input.lambda0,
        history_param_grad: input.history_params,
        diagnostics: Diagnostics {
            reconstruction_error: 0.0,
            adjoint_sup_norm: sweep.lambdas.iter().fold(0.0, |a, v| a.max(v.abs())),
        },
    })
}
