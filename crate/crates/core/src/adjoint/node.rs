//! The plain ODE adjoint, kept separate from the delayed sweep so the two can
//! be checked against each other.

use crate::dde::{Method, Stepper, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::field::VectorField;

use super::ObservationLoss;

#[derive(Debug, Clone)]
pub struct NodeAdjoint {
    pub lambdas: Vec<f64>,
    pub w_grad: Vec<f64>,
    pub x0_grad: Vec<f64>,
}

/// Backward pass for a trajectory from [`crate::dde::integrate_ode`].
pub fn node_adjoint(
    field: &dyn VectorField,
    params: &[f64],
    forward: &Trajectory,
    loss: &ObservationLoss,
    method: Method,
) -> Result<NodeAdjoint> {
    let d = field.dim();
    check_len("forward state", d, forward.dim())?;
    check_len("field parameters", field.param_count(), params.len())?;
    let grid = *forward.grid();
    let n = grid.n_steps();
    let jumps = loss.on_grid(&grid, d)?;
    let mut lambdas = vec![0.0; d * grid.len()];
    let mut w_grad = vec![0.0; field.param_count()];
    if let Some(g) = jumps[n] {
        lambdas[n * d..].copy_from_slice(g);
    }
    let mut stepper = Stepper::new(field, params, method, grid.step());
    for k in (0..n).rev() {
        let (head, tail) = lambdas.split_at_mut((k + 1) * d);
        stepper.step_vjp(
            forward.row(k),
            None,
            grid.time(k),
            &tail[..d],
            &mut head[k * d..],
            None,
            &mut w_grad,
        );
        if let Some(g) = jumps[k] {
            for (l, gi) in head[k * d..].iter_mut().zip(g) {
                *l += gi;
            }
        }
        if head[k * d..].iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: k,
                context: "ode adjoint".into(),
            });
        }
    }
    let x0_grad = lambdas[..d].to_vec();
    Ok(NodeAdjoint {
        lambdas,
        w_grad,
        x0_grad,
    })
}
