//! Ground-truth vector fields of the benchmark systems.

use crate::field::{FieldGrads, VectorField};

/// `ẋ = a·x(t − τ)`, parameter `[a]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyLinearField;

impl VectorField for ToyLinearField {
    fn dim(&self) -> usize {
        1
    }
    fn param_count(&self) -> usize {
        1
    }
    fn eval(&self, w: &[f64], _h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = w[0] * y[0];
    }
    fn vjp(&self, w: &[f64], _h: &[f64], y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>) {
        g.y[0] += v[0] * w[0];
        g.w[0] += v[0] * y[0];
    }
}

/// Delayed logistic growth `ẋ = r·x(t)·(1 − x(t − τ))`, parameter `[r]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PopulationField;

impl VectorField for PopulationField {
    fn dim(&self) -> usize {
        1
    }
    fn param_count(&self) -> usize {
        1
    }
    fn eval(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = w[0] * h[0] * (1.0 - y[0]);
    }
    fn vjp(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>) {
        g.h[0] += v[0] * w[0] * (1.0 - y[0]);
        g.y[0] -= v[0] * w[0] * h[0];
        g.w[0] += v[0] * h[0] * (1.0 - y[0]);
    }
}

/// `ẋ = β·y/(1 + yⁿ) − γ·x` with `y = x(t − τ)`, parameters `[β, n, γ]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MackeyGlassField;

impl VectorField for MackeyGlassField {
    fn dim(&self) -> usize {
        1
    }
    fn param_count(&self) -> usize {
        3
    }
    fn eval(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        let (beta, n, gamma) = (w[0], w[1], w[2]);
        out[0] = beta * y[0] / (1.0 + y[0].powf(n)) - gamma * h[0];
    }
    fn vjp(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>) {
        let (beta, n, gamma) = (w[0], w[1], w[2]);
        let y = y[0];
        let yn = y.powf(n);
        let den = 1.0 + yn;
        g.h[0] -= v[0] * gamma;
        g.y[0] += v[0] * beta * (1.0 + yn - n * yn) / (den * den);
        g.w[0] += v[0] * y / den;
        if y > 0.0 {
            g.w[1] -= v[0] * beta * y * yn * y.ln() / (den * den);
        }
        g.w[2] -= v[0] * h[0];
    }
}

/// `ẋ = A·tanh(x(t) + x(t − τ))` in the plane, parameters `A` row-major.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpiralField;

impl VectorField for SpiralField {
    fn dim(&self) -> usize {
        2
    }
    fn param_count(&self) -> usize {
        4
    }
    fn eval(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, out: &mut [f64]) {
        let s = [(h[0] + y[0]).tanh(), (h[1] + y[1]).tanh()];
        out[0] = w[0] * s[0] + w[1] * s[1];
        out[1] = w[2] * s[0] + w[3] * s[1];
    }
    fn vjp(&self, w: &[f64], h: &[f64], y: &[f64], _t: f64, v: &[f64], g: FieldGrads<'_>) {
        let s = [(h[0] + y[0]).tanh(), (h[1] + y[1]).tanh()];
        for j in 0..2 {
            let back = (v[0] * w[j] + v[1] * w[2 + j]) * (1.0 - s[j] * s[j]);
            g.h[j] += back;
            g.y[j] += back;
        }
        g.w[0] += v[0] * s[0];
        g.w[1] += v[0] * s[1];
        g.w[2] += v[1] * s[0];
        g.w[3] += v[1] * s[1];
    }
}
