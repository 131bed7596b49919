use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{FieldGrads, VectorField};
use crate::nn::Mlp;

/// Which states the network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayInput {
    /// `net(h)`: no delay.
    Current,
    /// `net([h; y])`.
    Concat,
    /// `net(h + y)`.
    Sum,
    /// `net(y)`.
    DelayedOnly,
}

impl DelayInput {
    pub fn net_input_dim(self, state_dim: usize) -> usize {
        match self {
            DelayInput::Concat => 2 * state_dim,
            _ => state_dim,
        }
    }
}

impl fmt::Display for DelayInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DelayInput::Current => "current",
            DelayInput::Concat => "concat",
            DelayInput::Sum => "sum",
            DelayInput::DelayedOnly => "delayed",
        })
    }
}

impl FromStr for DelayInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(DelayInput::Current),
            "concat" => Ok(DelayInput::Concat),
            "sum" => Ok(DelayInput::Sum),
            "delayed" => Ok(DelayInput::DelayedOnly),
            other => Err(Error::config(format!("unknown delay input pattern `{other}`"))),
        }
    }
}

thread_local! {
    static INPUT: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// A vector field given by an MLP over the chosen combination of states.
#[derive(Debug, Clone)]
pub struct NetField {
    net: Mlp,
    dim: usize,
    input: DelayInput,
}

impl NetField {
    pub fn new(net: Mlp, input: DelayInput) -> Result<Self> {
        let dim = net.output_dim();
        let want = input.net_input_dim(dim);
        if net.input_dim() != want {
            return Err(Error::Shape {
                context: format!("{input} network input"),
                expected: want,
                actual: net.input_dim(),
            });
        }
        Ok(NetField { net, dim, input })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn input(&self) -> DelayInput {
        self.input
    }

    fn fill_input(&self, h: &[f64], y: &[f64], x: &mut [f64]) {
        let d = self.dim;
        match self.input {
            DelayInput::Current => x.copy_from_slice(h),
            DelayInput::DelayedOnly => x.copy_from_slice(y),
            DelayInput::Sum => {
                for i in 0..d {
                    x[i] = h[i] + y[i];
                }
            }
            DelayInput::Concat => {
                x[..d].copy_from_slice(h);
                x[d..].copy_from_slice(y);
            }
        }
    }
}

impl VectorField for NetField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn uses_delay(&self) -> bool {
        self.input != DelayInput::Current
    }

    fn eval(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        match self.input {
            DelayInput::Current => self.net.forward_into(w, h, out),
            DelayInput::DelayedOnly => self.net.forward_into(w, y, out),
            DelayInput::Sum | DelayInput::Concat => INPUT.with(|buf| {
                let mut buf = buf.borrow_mut();
                buf.clear();
                if self.input == DelayInput::Sum {
                    buf.extend(h.iter().zip(y).map(|(a, b)| a + b));
                } else {
                    buf.extend_from_slice(h);
                    buf.extend_from_slice(y);
                }
                self.net.forward_into(w, &buf, out);
            }),
        }
    }

    fn tape_len(&self) -> usize {
        self.net.input_dim() + self.net.tape_len()
    }

    fn eval_taped(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, out: &mut [f64], tape: &mut [f64]) {
        let (x, rec) = tape.split_at_mut(self.net.input_dim());
        self.fill_input(h, y, x);
        out.copy_from_slice(self.net.forward_taped(w, x, rec));
    }

    fn vjp_taped(&self, w: &[f64], _h: &[f64], _y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>, tape: &[f64]) {
        let d = self.dim;
        let (x, rec) = tape.split_at(self.net.input_dim());
        match self.input {
            DelayInput::Current => self.net.backprop(w, x, rec, v, g.h, g.w),
            DelayInput::DelayedOnly => self.net.backprop(w, x, rec, v, g.y, g.w),
            DelayInput::Sum | DelayInput::Concat => INPUT.with(|buf| {
                let mut xg = buf.borrow_mut();
                xg.clear();
                xg.resize(x.len(), 0.0);
                self.net.backprop(w, x, rec, v, &mut xg, g.w);
                for i in 0..d {
                    if self.input == DelayInput::Sum {
                        g.h[i] += xg[i];
                        g.y[i] += xg[i];
                    } else {
                        g.h[i] += xg[i];
                        g.y[i] += xg[d + i];
                    }
                }
            }),
        }
    }

    fn vjp(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>) {
        let d = self.dim;
        match self.input {
            DelayInput::Current => self.net.vjp_acc(w, h, v, g.h, g.w),
            DelayInput::DelayedOnly => self.net.vjp_acc(w, y, v, g.y, g.w),
            DelayInput::Sum | DelayInput::Concat => INPUT.with(|buf| {
                let mut buf = buf.borrow_mut();
                let n = self.input.net_input_dim(d);
                buf.clear();
                buf.resize(2 * n, 0.0);
                let (x, xg) = buf.split_at_mut(n);
                if self.input == DelayInput::Sum {
                    for i in 0..d {
                        x[i] = h[i] + y[i];
                    }
                } else {
                    x[..d].copy_from_slice(h);
                    x[d..].copy_from_slice(y);
                }
                self.net.vjp_acc(w, x, v, xg, g.w);
                for i in 0..d {
                    if self.input == DelayInput::Sum {
                        g.h[i] += xg[i];
                        g.y[i] += xg[i];
                    } else {
                        g.h[i] += xg[i];
                        g.y[i] += xg[d + i];
                    }
                }
            }),
        }
    }
}

/// `dh₁/dt = ‖y‖ − r`, all other components constant; the parameter is `[r]`.
#[derive(Debug, Clone)]
pub struct AnnulusField {
    dim: usize,
}

impl AnnulusField {
    pub fn new(dim: usize) -> Self {
        AnnulusField { dim }
    }
}

impl VectorField for AnnulusField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn param_count(&self) -> usize {
        1
    }

    fn eval(&self, w: &[f64], _h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
        out[0] = y.iter().map(|v| v * v).sum::<f64>().sqrt() - w[0];
    }

    fn vjp(&self, _w: &[f64], _h: &[f64], y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>) {
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.w[0] -= v[0];
        if norm > 0.0 {
            for (gy, yi) in g.y.iter_mut().zip(y) {
                *gy += v[0] * yi / norm;
            }
        }
    }
}

/// A parametrised map `ℝᵈ → ℝᵈ`.
pub trait StateMap: Send + Sync {
    fn dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn apply(&self, w: &[f64], x: &[f64], out: &mut [f64]);
    /// Adds `vᵀ·∂G/∂x` into `x_grad` and `vᵀ·∂G/∂w` into `w_grad`.
    fn vjp(&self, w: &[f64], x: &[f64], v: &[f64], x_grad: &mut [f64], w_grad: &mut [f64]);
}

impl StateMap for Mlp {
    fn dim(&self) -> usize {
        self.output_dim()
    }

    fn param_count(&self) -> usize {
        Mlp::param_count(self)
    }

    fn apply(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        self.forward_into(w, x, out);
    }

    fn vjp(&self, w: &[f64], x: &[f64], v: &[f64], x_grad: &mut [f64], w_grad: &mut [f64]) {
        self.vjp_acc(w, x, v, x_grad, w_grad);
    }
}

/// `G(x) = M·x` with `M` row-major and learnable.
#[derive(Debug, Clone)]
pub struct LinearMap {
    dim: usize,
}

impl LinearMap {
    pub fn new(dim: usize) -> Self {
        LinearMap { dim }
    }

    /// Parameters of `(F − I)/T` for a linear target `F`.
    pub fn universal_params(f: &[f64], dim: usize, t: f64) -> Vec<f64> {
        (0..dim * dim)
            .map(|k| (f[k] - if k / dim == k % dim { 1.0 } else { 0.0 }) / t)
            .collect()
    }
}

impl StateMap for LinearMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn param_count(&self) -> usize {
        self.dim * self.dim
    }

    fn apply(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = (0..d).map(|j| w[i * d + j] * x[j]).sum();
        }
    }

    fn vjp(&self, w: &[f64], x: &[f64], v: &[f64], x_grad: &mut [f64], w_grad: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                x_grad[j] += v[i] * w[i * d + j];
                w_grad[i * d + j] += v[i] * x[j];
            }
        }
    }
}

/// `f(h, y) = G(y)`: with `τ = T` and a constant history `x`, the flow gives
/// `h(T) = x + T·G(x)`.
#[derive(Debug, Clone)]
pub struct UniversalField<M> {
    map: M,
}

impl<M: StateMap> UniversalField<M> {
    pub fn new(map: M) -> Self {
        UniversalField { map }
    }
}

impl<M: StateMap> VectorField for UniversalField<M> {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn param_count(&self) -> usize {
        self.map.param_count()
    }

    fn eval(&self, w: &[f64], _h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        self.map.apply(w, y, out);
    }

    fn vjp(&self, w: &[f64], _h: &[f64], y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>) {
        self.map.vjp(w, y, v, g.y, g.w);
    }
}
