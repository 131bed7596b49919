//! The vector-field abstraction shared by the integrators and the adjoint.

/// Output buffers for a vector-Jacobian product. Every buffer is added into.
pub struct FieldGrads<'a> {
    pub h: &'a mut [f64],
    pub y: &'a mut [f64],
    pub w: &'a mut [f64],
}

/// A parametrised right-hand side `f(h, y, t; w)` where `y` is the delayed
/// state `h(t − τ)`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn param_count(&self) -> usize;

    /// False when `f` never reads `y`.
    fn uses_delay(&self) -> bool {
        true
    }

    fn eval(&self, w: &[f64], h: &[f64], y: &[f64], t: f64, out: &mut [f64]);

    /// Adds `vᵀ·∂f/∂h`, `vᵀ·∂f/∂y` and `vᵀ·∂f/∂w` into `grads`.
    fn vjp(&self, w: &[f64], h: &[f64], y: &[f64], t: f64, v: &[f64], grads: FieldGrads<'_>);

    /// Scratch needed by [`VectorField::eval_taped`]; 0 when taping buys nothing.
    fn tape_len(&self) -> usize {
        0
    }

    /// `eval` that also records intermediate values for a later `vjp_taped`
    /// at the same point.
    fn eval_taped(&self, w: &[f64], h: &[f64], y: &[f64], t: f64, out: &mut [f64], _tape: &mut [f64]) {
        self.eval(w, h, y, t, out);
    }

    /// `vjp` reusing the record of `eval_taped(w, h, y, t)`.
    #[allow(clippy::too_many_arguments)]
    fn vjp_taped(&self, w: &[f64], h: &[f64], y: &[f64], t: f64, v: &[f64], grads: FieldGrads<'_>, _tape: &[f64]) {
        self.vjp(w, h, y, t, v, grads);
    }
}

/// `f(h, y) = A·h + B·y` with `A` and `B` row-major `d × d` and learnable.
///
/// Parameters are laid out as `[A | B]`.
#[derive(Debug, Clone)]
pub struct LinearDelayField {
    dim: usize,
}

impl LinearDelayField {
    pub fn new(dim: usize) -> Self {
        LinearDelayField { dim }
    }

    /// Parameters for the scalar field `a·h + b·y`.
    pub fn scalar(a: f64, b: f64) -> (Self, Vec<f64>) {
        (LinearDelayField { dim: 1 }, vec![a, b])
    }
}

impl VectorField for LinearDelayField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn param_count(&self) -> usize {
        2 * self.dim * self.dim
    }

    fn eval(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        let d = self.dim;
        let (a, b) = w.split_at(d * d);
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += a[i * d + j] * h[j] + b[i * d + j] * y[j];
            }
            out[i] = acc;
        }
    }

    fn vjp(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, v: &[f64], grads: FieldGrads<'_>) {
        let d = self.dim;
        let (a, b) = w.split_at(d * d);
        let (ga, gb) = grads.w.split_at_mut(d * d);
        for i in 0..d {
            for j in 0..d {
                grads.h[j] += v[i] * a[i * d + j];
                grads.y[j] += v[i] * b[i * d + j];
                ga[i * d + j] += v[i] * h[j];
                gb[i * d + j] += v[i] * y[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_field_evaluates_both_terms() {
        let f = LinearDelayField::new(2);
        let w = [1.0, 2.0, 3.0, 4.0, 0.5, 0.0, 0.0, -1.0];
        let mut out = [0.0; 2];
        f.eval(&w, &[1.0, 1.0], &[2.0, 3.0], 0.0, &mut out);
        assert_eq!(out, [3.0 + 1.0, 7.0 - 3.0]);
    }

    #[test]
    fn linear_field_vjp_is_transpose() {
        let f = LinearDelayField::new(2);
        let w = [1.0, 2.0, 3.0, 4.0, 0.5, 0.0, 0.0, -1.0];
        let (mut gh, mut gy, mut gw) = ([0.0; 2], [0.0; 2], [0.0; 8]);
        f.vjp(
            &w,
            &[1.0, 1.0],
            &[2.0, 3.0],
            0.0,
            &[1.0, 0.0],
            FieldGrads {
                h: &mut gh,
                y: &mut gy,
                w: &mut gw,
            },
        );
        assert_eq!(gh, [1.0, 2.0]);
        assert_eq!(gy, [0.5, 0.0]);
        assert_eq!(gw, [1.0, 1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0]);
    }
}
