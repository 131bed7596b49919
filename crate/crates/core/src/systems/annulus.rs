use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Planar points labelled `+1` inside the disk of radius `r1` and `−1` in the
/// annulus `[r2, r3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<f64>,
    pub radii: (f64, f64, f64),
    pub seed: u64,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The label as a pure function of the norm; `None` in the gap.
    pub fn label_of(&self, x: [f64; 2]) -> Option<f64> {
        let (r1, r2, r3) = self.radii;
        let n = x[0].hypot(x[1]);
        if n <= r1 {
            Some(1.0)
        } else if (r2..=r3).contains(&n) {
            Some(-1.0)
        } else {
            None
        }
    }

    pub fn count(&self, label: f64) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,label\n");
        for (p, l) in self.points.iter().zip(&self.labels) {
            let _ = writeln!(out, "{:.16e},{:.16e},{l}", p[0], p[1]);
        }
        out
    }
}

pub fn gen_annulus(n_inner: usize, n_outer: usize, r1: f64, r2: f64, r3: f64, seed: u64) -> Result<LabeledSet> {
    if !(0.0 < r1 && r1 < r2 && r2 < r3) {
        return Err(Error::config(format!(
            "radii must satisfy 0 < r1 < r2 < r3, got {r1}, {r2}, {r3}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_inner + n_outer);
    let mut labels = Vec::with_capacity(n_inner + n_outer);
    let polar = |rng: &mut ChaCha8Rng, r: f64| {
        let a = rng.gen_range(0.0..TAU);
        [r * a.cos(), r * a.sin()]
    };
    for _ in 0..n_inner {
        let r = r1 * rng.gen::<f64>().sqrt();
        points.push(polar(&mut rng, r));
        labels.push(1.0);
    }
    for _ in 0..n_outer {
        let u: f64 = rng.gen();
        let r = (r2 * r2 + u * (r3 * r3 - r2 * r2)).sqrt().clamp(r2, r3);
        points.push(polar(&mut rng, r));
        labels.push(-1.0);
    }
    Ok(LabeledSet {
        points,
        labels,
        radii: (r1, r2, r3),
        seed,
    })
}
