//! Fixed-step integrators for ODEs and single-delay DDEs on uniform grids.
//!
//! DDEs are solved by the method of steps: the delayed argument `h(t − τ)` is
//! read from already computed grid rows, or from the history for `t − τ ≤ 0`,
//! and is held at its step-start value inside every step. Delays, observation
//! times and segment boundaries must all fall on the grid.

mod stacked;
pub(crate) mod step;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{check_len, Error, Result};
use crate::field::VectorField;

pub use stacked::{integrate_stacked, StackedSolution};
pub(crate) use step::Stepper;

const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

/// Uniform time grid `t0, t0 + step, …, t0 + n_steps·step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    t0: f64,
    step: f64,
    n_steps: usize,
}

impl Grid {
    /// Grid over `[t0, t1]`; `step` must divide the span.
    pub fn new(t0: f64, t1: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::config(format!("step must be positive, got {step}")));
        }
        if !(t1 >= t0) {
            return Err(Error::config(format!("grid end {t1} precedes start {t0}")));
        }
        let n = periods(t1 - t0, step, "grid span")?;
        Ok(Grid { t0, step, n_steps: n })
    }

    pub fn from_steps(t0: f64, step: f64, n_steps: usize) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::config(format!("step must be positive, got {step}")));
        }
        Ok(Grid { t0, step, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.step
    }

    /// Index of the node at `t`, within 1e-9.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = ((t - self.t0) / self.step).round();
        if k < 0.0 || k > self.n_steps as f64 || (self.time(k as usize) - t).abs() > ALIGN_TOL {
            return Err(Error::Alignment {
                time: t,
                context: format!("grid [{}, {}] with step {}", self.t0, self.t1(), self.step),
            });
        }
        Ok(k as usize)
    }

    /// Number of steps spanning `span`, which must be a grid multiple.
    pub fn steps_in(&self, span: f64, what: &str) -> Result<usize> {
        periods(span, self.step, what)
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.n_steps == other.n_steps
            && (self.t0 - other.t0).abs() <= ALIGN_TOL
            && (self.step - other.step).abs() <= 1e-12 * self.step
    }
}

/// `span / step` as an integer, rejecting misaligned spans.
fn periods(span: f64, step: f64, what: &str) -> Result<usize> {
    let ratio = span / step;
    let n = ratio.round();
    if !ratio.is_finite() || n < 0.0 || (ratio - n).abs() > ALIGN_TOL * n.max(1.0) {
        return Err(Error::config(format!(
            "{what} {span} is not a multiple of the step {step}"
        )));
    }
    Ok(n as usize)
}

/// φ on `[−span, 0]` given by an auxiliary ODE started from `seed` at `−span`.
#[derive(Clone)]
pub struct OdeHistory {
    pub field: Arc<dyn VectorField>,
    pub params: Vec<f64>,
    pub seed: Vec<f64>,
    pub span: f64,
}

/// φ given by grid-aligned samples; the last row is φ(0).
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedHistory {
    pub step: f64,
    pub rows: Vec<Vec<f64>>,
}

/// The DDE initial function φ(t) for t ≤ 0.
#[derive(Clone)]
pub enum History {
    Constant(Vec<f64>),
    OdeDriven(OdeHistory),
    Tabulated(TabulatedHistory),
}

impl fmt::Debug for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            History::Constant(x) => f.debug_tuple("Constant").field(x).finish(),
            History::OdeDriven(h) => f
                .debug_struct("OdeDriven")
                .field("seed", &h.seed)
                .field("span", &h.span)
                .field("n_params", &h.params.len())
                .finish(),
            History::Tabulated(t) => f.debug_tuple("Tabulated").field(t).finish(),
        }
    }
}

impl History {
    pub fn dim(&self) -> usize {
        match self {
            History::Constant(x) => x.len(),
            History::OdeDriven(h) => h.seed.len(),
            History::Tabulated(t) => t.rows.first().map_or(0, Vec::len),
        }
    }

    /// Evaluates φ on the grid `[−lookback, 0]` with the given step. Constant
    /// histories need no trace.
    pub fn trace(&self, step: f64, lookback: f64, method: Method) -> Result<Option<HistoryTrace>> {
        match self {
            History::Constant(_) => Ok(None),
            History::OdeDriven(h) => {
                if h.span + ALIGN_TOL < lookback {
                    return Err(Error::config(format!(
                        "history span {} is shorter than the delay {lookback}",
                        h.span
                    )));
                }
                check_len("history seed", h.field.dim(), h.seed.len())?;
                check_len("history parameters", h.field.param_count(), h.params.len())?;
                let grid = Grid::new(-h.span, 0.0, step)?;
                let traj = integrate_ode(h.field.as_ref(), &h.params, &h.seed, grid, method)?;
                Ok(Some(HistoryTrace {
                    dim: traj.dim,
                    rows: traj.states,
                }))
            }
            History::Tabulated(t) => {
                if (t.step - step).abs() > 1e-12 * step {
                    return Err(Error::config(format!(
                        "tabulated history step {} differs from the solver step {step}",
                        t.step
                    )));
                }
                let needed = periods(lookback, step, "delay")? + 1;
                if t.rows.len() < needed {
                    return Err(Error::config(format!(
                        "tabulated history has {} rows, the delay needs {needed}",
                        t.rows.len()
                    )));
                }
                let dim = self.dim();
                let mut rows = Vec::with_capacity(dim * t.rows.len());
                for r in &t.rows {
                    check_len("tabulated history row", dim, r.len())?;
                    rows.extend_from_slice(r);
                }
                Ok(Some(HistoryTrace { dim, rows }))
            }
        }
    }
}

/// φ sampled on grid nodes up to and including t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryTrace {
    dim: usize,
    rows: Vec<f64>,
}

impl HistoryTrace {
    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row `back` steps before t = 0.
    pub fn back(&self, back: usize) -> &[f64] {
        let q = self.len() - 1 - back;
        &self.rows[q * self.dim..(q + 1) * self.dim]
    }

    /// Rows oldest first.
    pub fn row(&self, q: usize) -> &[f64] {
        &self.rows[q * self.dim..(q + 1) * self.dim]
    }
}

/// A forward solution: one state row per grid node.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: Grid,
    dim: usize,
    states: Vec<f64>,
    history: History,
    trace: Option<HistoryTrace>,
}

impl Trajectory {
    pub fn from_rows(grid: Grid, rows: &[Vec<f64>], history: History) -> Result<Self> {
        check_len("trajectory rows", grid.len(), rows.len())?;
        let dim = rows.first().map_or(0, Vec::len);
        let mut states = Vec::with_capacity(dim * rows.len());
        for r in rows {
            check_len("trajectory row", dim, r.len())?;
            states.extend_from_slice(r);
        }
        if let Some(k) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step: k,
                context: "trajectory row".into(),
            });
        }
        Ok(Trajectory {
            grid,
            dim,
            states,
            history,
            trace: None,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn history_trace(&self) -> Option<&HistoryTrace> {
        self.trace.as_ref()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks(self.dim)
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.grid.n_steps)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Rows `from..=to` as a trajectory on the matching sub-grid.
    pub fn slice(&self, from: usize, to: usize, history: History) -> Result<Trajectory> {
        if from > to || to > self.grid.n_steps {
            return Err(Error::config(format!(
                "slice {from}..={to} outside a trajectory with {} rows",
                self.grid.len()
            )));
        }
        Ok(Trajectory {
            grid: Grid::from_steps(self.grid.time(from), self.grid.step, to - from)?,
            dim: self.dim,
            states: self.states[from * self.dim..(to + 1) * self.dim].to_vec(),
            history,
            trace: None,
        })
    }

    /// Keeps every `stride`-th row.
    pub fn subsample(&self, stride: usize) -> Result<Trajectory> {
        if stride == 0 || !self.grid.n_steps.is_multiple_of(stride) {
            return Err(Error::config(format!(
                "stride {stride} does not divide {} steps",
                self.grid.n_steps
            )));
        }
        let rows: Vec<Vec<f64>> = (0..=self.grid.n_steps / stride)
            .map(|k| self.row(k * stride).to_vec())
            .collect();
        let grid = Grid::from_steps(self.grid.t0, self.grid.step * stride as f64, rows.len() - 1)?;
        let mut t = Trajectory::from_rows(grid, &rows, self.history.clone())?;
        t.trace = None;
        Ok(t)
    }
}

fn check_finite(x: &[f64], step: usize, context: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            context: context.to_string(),
        })
    }
}

/// Integrates `ẋ = f(x, x, t)`: the field sees its own state as the delayed
/// argument.
pub fn integrate_ode(
    field: &dyn VectorField,
    params: &[f64],
    x0: &[f64],
    grid: Grid,
    method: Method,
) -> Result<Trajectory> {
    let d = field.dim();
    check_len("initial state", d, x0.len())?;
    check_len("field parameters", field.param_count(), params.len())?;
    check_finite(x0, 0, "initial state")?;
    let mut states = vec![0.0; d * grid.len()];
    states[..d].copy_from_slice(x0);
    let mut stepper = Stepper::new(field, params, method, grid.step);
    for k in 0..grid.n_steps {
        let (done, next) = states.split_at_mut((k + 1) * d);
        stepper.step(&done[k * d..], None, grid.time(k), &mut next[..d]);
        check_finite(&next[..d], k + 1, "ode integration")?;
    }
    Ok(Trajectory {
        grid,
        dim: d,
        states,
        history: History::Constant(x0.to_vec()),
        trace: None,
    })
}

/// Delay as a whole number of grid steps.
pub fn delay_steps(tau: f64, step: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("delay must be positive, got {tau}")));
    }
    let m = periods(tau, step, "delay")?;
    if m == 0 {
        return Err(Error::config(format!("delay {tau} is shorter than the step {step}")));
    }
    Ok(m)
}

/// The delayed argument for step `k` given `m` steps of delay.
pub(crate) fn lag_for<'a>(
    states: &'a [f64],
    d: usize,
    k: usize,
    m: usize,
    history: &'a History,
    trace: Option<&'a HistoryTrace>,
) -> &'a [f64] {
    if k >= m {
        &states[(k - m) * d..(k - m + 1) * d]
    } else {
        match (trace, history) {
            (Some(tr), _) => tr.back(m - k),
            (None, History::Constant(x0)) => x0,
            (None, _) => unreachable!("non-constant history without a trace"),
        }
    }
}

/// φ(0), the first trajectory row.
pub(crate) fn history_origin<'a>(history: &'a History, trace: Option<&'a HistoryTrace>) -> &'a [f64] {
    match (trace, history) {
        (Some(tr), _) => tr.back(0),
        (None, History::Constant(x0)) => x0,
        (None, _) => unreachable!("non-constant history without a trace"),
    }
}

/// Method-of-steps DDE integration on a grid starting at t = 0.
pub fn integrate_dde(
    field: &dyn VectorField,
    params: &[f64],
    history: &History,
    tau: f64,
    grid: Grid,
    method: Method,
) -> Result<Trajectory> {
    let d = field.dim();
    if grid.t0.abs() > ALIGN_TOL {
        return Err(Error::config(format!("DDE grids start at 0, got {}", grid.t0)));
    }
    check_len("history", d, history.dim())?;
    check_len("field parameters", field.param_count(), params.len())?;
    let m = delay_steps(tau, grid.step)?;
    let trace = history.trace(grid.step, tau, method)?;
    let origin = history_origin(history, trace.as_ref());
    check_finite(origin, 0, "history")?;

    let mut states = vec![0.0; d * grid.len()];
    states[..d].copy_from_slice(origin);
    let mut stepper = Stepper::new(field, params, method, grid.step);
    let mut next = vec![0.0; d];
    for k in 0..grid.n_steps {
        let lag = lag_for(&states, d, k, m, history, trace.as_ref());
        stepper.step(&states[k * d..(k + 1) * d], Some(lag), grid.time(k), &mut next);
        check_finite(&next, k + 1, "dde integration")?;
        states[(k + 1) * d..(k + 2) * d].copy_from_slice(&next);
    }
    Ok(Trajectory {
        grid,
        dim: d,
        states,
        history: history.clone(),
        trace,
    })
}

/// The stored rows at `times`; no interpolation.
pub fn sample_at(traj: &Trajectory, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    times
        .iter()
        .map(|&t| traj.grid.index_of(t).map(|k| traj.row(k).to_vec()))
        .collect()
}

impl Trajectory {
    /// CSV with header `t,x1,...,xd`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for (k, row) in self.rows().enumerate() {
            out.push_str(&format!("{:.16e}", self.grid.time(k)));
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Trajectory::to_csv`] output. The history is taken as the
    /// constant first row.
    pub fn from_csv(text: &str) -> Result<Trajectory> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") || cols[1..].iter().enumerate().any(|(i, c)| *c != format!("x{}", i + 1)) {
            return Err(Error::Parse(format!("bad trajectory header '{header}'")));
        }
        let dim = cols.len() - 1;
        let mut times = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", n + 1)))?;
            if vals.len() != dim + 1 {
                return Err(Error::Parse(format!("row {} has {} columns", n + 1, vals.len())));
            }
            times.push(vals[0]);
            rows.push(vals[1..].to_vec());
        }
        if rows.is_empty() {
            return Err(Error::Parse("trajectory csv has no rows".into()));
        }
        let grid = if times.len() == 1 {
            Grid::from_steps(times[0], 1.0, 0)?
        } else {
            let step = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
            let grid = Grid::from_steps(times[0], step, times.len() - 1)?;
            for (k, &t) in times.iter().enumerate() {
                if (grid.time(k) - t).abs() > ALIGN_TOL {
                    return Err(Error::Alignment {
                        time: t,
                        context: "trajectory csv is not uniformly spaced".into(),
                    });
                }
            }
            grid
        };
        let history = History::Constant(rows[0].clone());
        Trajectory::from_rows(grid, &rows, history)
    }
}
