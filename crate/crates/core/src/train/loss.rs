use std::fmt;
use std::str::FromStr;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
    SoftmaxCe,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::SoftmaxCe => "softmax_ce",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            other => Err(Error::config(format!("unknown loss `{other}`"))),
        }
    }
}

/// Mean loss over all observations and its gradient w.r.t. each prediction.
///
/// `mse` and `mae` average over every scalar entry; `softmax_ce` treats each
/// row as logits against a target distribution and averages over rows.
pub fn loss_eval(kind: LossKind, predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_len("loss targets", predictions.len(), targets.len())?;
    for (p, t) in predictions.iter().zip(targets) {
        check_len("loss target row", p.len(), t.len())?;
    }
    let rows = predictions.len();
    if rows == 0 {
        return Ok((0.0, Vec::new()));
    }
    let entries: usize = predictions.iter().map(Vec::len).sum();
    let mut total = 0.0;
    let grads = match kind {
        LossKind::Mse | LossKind::Mae => {
            let scale = 1.0 / entries as f64;
            predictions
                .iter()
                .zip(targets)
                .map(|(p, t)| {
                    p.iter()
                        .zip(t)
                        .map(|(a, b)| {
                            let r = a - b;
                            if kind == LossKind::Mse {
                                total += r * r;
                                2.0 * r * scale
                            } else {
                                total += r.abs();
                                if r > 0.0 {
                                    scale
                                } else if r < 0.0 {
                                    -scale
                                } else {
                                    0.0
                                }
                            }
                        })
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        }
        LossKind::SoftmaxCe => {
            let scale = 1.0 / rows as f64;
            predictions
                .iter()
                .zip(targets)
                .map(|(p, t)| {
                    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = p.iter().map(|v| (v - max).exp()).sum();
                    let log_z = max + z.ln();
                    total -= p.iter().zip(t).map(|(a, b)| b * (a - log_z)).sum::<f64>();
                    let mass: f64 = t.iter().sum();
                    p.iter()
                        .zip(t)
                        .map(|(a, b)| ((a - log_z).exp() * mass - b) * scale)
                        .collect()
                })
                .collect()
        }
    };
    let value = match kind {
        LossKind::SoftmaxCe => total / rows as f64,
        _ => total / entries as f64,
    };
    Ok((value, grads))
}
