//! The DDE rewritten as piecewise ODEs: on `[0, τ]` the segments
//! `h_b(s) = h(bτ + s)` are stacked into one state, each segment reading its
//! predecessor as the delayed argument and segment 0 reading the history.
//! `h(kτ)` is obtained by solving the `k`-segment stack from the
//! checkpoints `h(0), …, h((k−1)τ)`.

use crate::error::{check_len, Error, Result};
use crate::field::VectorField;

use super::{check_finite, delay_steps, history_origin, Grid, History, Method, Stepper, Trajectory};

#[derive(Debug, Clone)]
pub struct StackedSolution {
    /// `h(0), h(τ), …, h(nτ)`.
    pub checkpoints: Vec<Vec<f64>>,
    /// All grid rows of `[0, nτ]` when requested.
    pub trajectory: Option<Trajectory>,
    /// Largest disagreement between a re-solved segment end and its
    /// checkpoint from an earlier pass.
    pub consistency: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn integrate_stacked(
    field: &dyn VectorField,
    params: &[f64],
    history: &History,
    tau: f64,
    step: f64,
    n_segments: usize,
    method: Method,
    keep_rows: bool,
) -> Result<StackedSolution> {
    let d = field.dim();
    check_len("history", d, history.dim())?;
    check_len("field parameters", field.param_count(), params.len())?;
    if n_segments == 0 {
        return Err(Error::config("at least one segment is required"));
    }
    let m = delay_steps(tau, step)?;
    let trace = history.trace(step, tau, method)?;
    let mut checkpoints = vec![history_origin(history, trace.as_ref()).to_vec()];
    let mut stepper = Stepper::new(field, params, method, step);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut consistency: f64 = 0.0;

    for k in 1..=n_segments {
        let record = keep_rows && k == n_segments;
        let mut blocks: Vec<f64> = checkpoints.iter().flatten().copied().collect();
        let mut next = vec![0.0; blocks.len()];
        if record {
            rows = vec![Vec::new(); k * m + 1];
        }
        for j in 0..m {
            for b in 0..k {
                let lag: &[f64] = if b == 0 {
                    match (&trace, history) {
                        (Some(tr), _) => tr.back(m - j),
                        (None, History::Constant(x0)) => x0,
                        (None, _) => unreachable!(),
                    }
                } else {
                    &blocks[(b - 1) * d..b * d]
                };
                if record {
                    rows[b * m + j] = blocks[b * d..(b + 1) * d].to_vec();
                }
                let t = (b * m + j) as f64 * step;
                stepper.step(&blocks[b * d..(b + 1) * d], Some(lag), t, &mut next[b * d..(b + 1) * d]);
                check_finite(&next[b * d..(b + 1) * d], b * m + j + 1, "stacked segment integration")?;
            }
            std::mem::swap(&mut blocks, &mut next);
        }
        for b in 0..k - 1 {
            for i in 0..d {
                consistency = consistency.max((blocks[b * d + i] - checkpoints[b + 1][i]).abs());
            }
        }
        checkpoints.push(blocks[(k - 1) * d..k * d].to_vec());
        if record {
            rows[k * m] = blocks[(k - 1) * d..k * d].to_vec();
        }
    }
    let trajectory = if keep_rows {
        let grid = Grid::from_steps(0.0, step, n_segments * m)?;
        let mut traj = Trajectory::from_rows(grid, &rows, history.clone())?;
        traj.trace = trace;
        Some(traj)
    } else {
        None
    };
    Ok(StackedSolution {
        checkpoints,
        trajectory,
        consistency,
    })
}
