//! Single fixed steps, their reverse-mode products, and their inverse.
//!
//! A step either freezes the delayed argument at its step-start grid value
//! (`Some(lag)`) or, for plain ODEs, feeds each stage its own state as the
//! delayed argument (`None`).

use crate::error::{Error, Result};
use crate::field::{FieldGrads, VectorField};

use super::Method;

pub(crate) struct Stepper<'a> {
    field: &'a dyn VectorField,
    w: &'a [f64],
    method: Method,
    h: f64,
    dim: usize,
    /// k1..k4 followed by x2, x3, x4.
    buf: Vec<f64>,
    /// Stage covectors and per-stage input gradients.
    adj: Vec<f64>,
    /// Scratch for the inverse iteration.
    inv: Vec<f64>,
    /// Per-stage field records for the reverse pass.
    tape: Vec<f64>,
    tape_len: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(field: &'a dyn VectorField, w: &'a [f64], method: Method, h: f64) -> Self {
        let dim = field.dim();
        Stepper {
            field,
            w,
            method,
            h,
            dim,
            buf: vec![0.0; 7 * dim],
            adj: vec![0.0; 3 * dim],
            inv: vec![0.0; 2 * dim],
            tape: Vec::new(),
            tape_len: field.tape_len(),
        }
    }

    fn eval(&self, x: &[f64], lag: Option<&[f64]>, t: f64, out: &mut [f64], tape: Option<&mut [f64]>) {
        match tape {
            Some(tape) => self.field.eval_taped(self.w, x, lag.unwrap_or(x), t, out, tape),
            None => self.field.eval(self.w, x, lag.unwrap_or(x), t, out),
        }
    }

    /// Fills `buf` with the stage derivatives and stage inputs, and the
    /// stage tapes when `record` is set.
    fn stages(&mut self, x: &[f64], lag: Option<&[f64]>, t: f64, record: bool) {
        let d = self.dim;
        let h = self.h;
        let mut buf = std::mem::take(&mut self.buf);
        let mut tape = std::mem::take(&mut self.tape);
        let tl = self.tape_len;
        if record {
            tape.resize(4 * tl, 0.0);
        }
        let mut tapes = tape.chunks_mut(tl.max(1));
        let mut next_tape = || if record && tl > 0 { tapes.next() } else { None };
        {
            let (k, xs) = buf.split_at_mut(4 * d);
            let (k1, rest) = k.split_at_mut(d);
            let (k2, rest) = rest.split_at_mut(d);
            let (k3, k4) = rest.split_at_mut(d);
            let (x2, rest) = xs.split_at_mut(d);
            let (x3, x4) = rest.split_at_mut(d);
            self.eval(x, lag, t, k1, next_tape());
            if self.method == Method::Rk4 {
                for i in 0..d {
                    x2[i] = x[i] + 0.5 * h * k1[i];
                }
                self.eval(x2, lag, t + 0.5 * h, k2, next_tape());
                for i in 0..d {
                    x3[i] = x[i] + 0.5 * h * k2[i];
                }
                self.eval(x3, lag, t + 0.5 * h, k3, next_tape());
                for i in 0..d {
                    x4[i] = x[i] + h * k3[i];
                }
                self.eval(x4, lag, t + h, k4, next_tape());
            }
        }
        self.buf = buf;
        self.tape = tape;
    }

    /// The step increment `Φ(x) − x`.
    fn increment(&mut self, x: &[f64], lag: Option<&[f64]>, t: f64, out: &mut [f64]) {
        self.stages(x, lag, t, false);
        let d = self.dim;
        let h = self.h;
        let k = &self.buf;
        match self.method {
            Method::Euler => {
                for i in 0..d {
                    out[i] = h * k[i];
                }
            }
            Method::Rk4 => {
                for i in 0..d {
                    out[i] = h / 6.0 * (k[i] + 2.0 * k[d + i] + 2.0 * k[2 * d + i] + k[3 * d + i]);
                }
            }
        }
    }

    pub fn step(&mut self, x: &[f64], lag: Option<&[f64]>, t: f64, out: &mut [f64]) {
        self.increment(x, lag, t, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    }

    /// Reverse-mode product of one step. `ubar` is the covector on the step
    /// output; adds into `xbar`, `ybar` (frozen-lag steps only) and `wbar`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_vjp(
        &mut self,
        x: &[f64],
        lag: Option<&[f64]>,
        t: f64,
        ubar: &[f64],
        xbar: &mut [f64],
        mut ybar: Option<&mut [f64]>,
        wbar: &mut [f64],
    ) {
        let d = self.dim;
        let h = self.h;
        self.stages(x, lag, t, true);
        let buf = std::mem::take(&mut self.buf);
        let tl = self.tape_len;
        let mut adj = std::mem::take(&mut self.adj);
        {
            let (kbar, rest) = adj.split_at_mut(d);
            let (g, gy) = rest.split_at_mut(d);
            let stage_in: [&[f64]; 4] = [x, &buf[4 * d..5 * d], &buf[5 * d..6 * d], &buf[6 * d..7 * d]];
            let stage_t = [t, t + 0.5 * h, t + 0.5 * h, t + h];
            // weight of ubar in each stage covector, and the feed from the next stage
            let (bw, feed): (&[f64], &[f64]) = match self.method {
                Method::Euler => (&[1.0], &[]),
                Method::Rk4 => (&[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0], &[0.5, 0.5, 1.0]),
            };
            let n_stages = bw.len();
            g.fill(0.0);
            for s in (0..n_stages).rev() {
                for i in 0..d {
                    kbar[i] = h * bw[s] * ubar[i];
                    if s + 1 < n_stages {
                        kbar[i] += h * feed[s] * g[i];
                    }
                }
                g.fill(0.0);
                gy.fill(0.0);
                let xs = stage_in[s];
                let grads = FieldGrads { h: g, y: gy, w: wbar };
                if tl > 0 {
                    let tape = &self.tape[s * tl..(s + 1) * tl];
                    self.field
                        .vjp_taped(self.w, xs, lag.unwrap_or(xs), stage_t[s], kbar, grads, tape);
                } else {
                    self.field.vjp(self.w, xs, lag.unwrap_or(xs), stage_t[s], kbar, grads);
                }
                match (&mut ybar, lag) {
                    (Some(yb), Some(_)) => {
                        for i in 0..d {
                            yb[i] += gy[i];
                        }
                    }
                    (None, Some(_)) => {}
                    (_, None) => {
                        for i in 0..d {
                            g[i] += gy[i];
                        }
                    }
                }
                for i in 0..d {
                    xbar[i] += g[i];
                }
            }
            for i in 0..d {
                xbar[i] += ubar[i];
            }
        }
        self.buf = buf;
        self.adj = adj;
    }

    /// Solves `x + Φ(x) − x = x_next` for the step-start state by fixed-point
    /// iteration. Returns the number of iterations used.
    pub fn invert(&mut self, x_next: &[f64], lag: Option<&[f64]>, t: f64, out: &mut [f64]) -> Result<usize> {
        const MAX_ITERS: usize = 200;
        let d = self.dim;
        let mut inv = std::mem::take(&mut self.inv);
        let result = (|| {
            let (incr, prev) = inv.split_at_mut(d);
            out.copy_from_slice(x_next);
            let mut last_delta = f64::INFINITY;
            let mut stalled = 0;
            for iter in 1..=MAX_ITERS {
                prev.copy_from_slice(out);
                self.increment(prev, lag, t, incr);
                let mut delta: f64 = 0.0;
                let mut scale: f64 = 1.0;
                for i in 0..d {
                    out[i] = x_next[i] - incr[i];
                    delta = delta.max((out[i] - prev[i]).abs());
                    scale = scale.max(out[i].abs());
                }
                if !delta.is_finite() {
                    break;
                }
                if delta <= 4.0 * f64::EPSILON * scale {
                    return Ok(iter);
                }
                // rounding can keep the last bits oscillating
                if delta >= last_delta {
                    stalled += 1;
                    if stalled >= 3 && delta <= 1e-12 * scale {
                        return Ok(iter);
                    }
                }
                last_delta = delta;
            }
            Err(Error::Divergence {
                step: 0,
                context: format!("reverse reconstruction did not converge at t = {t}"),
            })
        })();
        self.inv = inv;
        result
    }
}
