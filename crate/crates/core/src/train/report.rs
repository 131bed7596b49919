use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::nn::ParamVector;

use super::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub epoch: Option<usize>,
    pub train_loss: f64,
    /// `(k, loss)` for the test window of length `kτ`.
    pub test_losses: Vec<(usize, f64)>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCheck {
    pub iteration: usize,
    pub index: usize,
    pub adjoint: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: String,
    pub seed: u64,
    /// Minibatch loss at every iteration, before the update.
    pub iter_loss: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub initial_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// Loss over the whole training set at the last evaluation.
    pub final_train_loss: f64,
    pub final_test_losses: Vec<(usize, f64)>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub fd_checks: Vec<FdCheck>,
    pub params: ParamVector,
    pub wall_clock: f64,
}

impl TrainReport {
    pub(crate) fn empty(cfg: &TrainConfig) -> Self {
        TrainReport {
            model: cfg.model.kind.to_string(),
            seed: cfg.seed,
            iter_loss: Vec::new(),
            evals: Vec::new(),
            initial_accuracy: None,
            final_accuracy: None,
            final_train_loss: f64::NAN,
            final_test_losses: Vec::new(),
            snapshots: Vec::new(),
            fd_checks: Vec::new(),
            params: ParamVector::raw("net", Vec::new()),
            wall_clock: 0.0,
        }
    }

    pub fn test_loss(&self, k: usize) -> Option<f64> {
        self.final_test_losses.iter().find(|(h, _)| *h == k).map(|p| p.1)
    }

    /// `iteration,train_loss`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iteration,train_loss\n");
        for (i, l) in self.iter_loss.iter().enumerate() {
            let _ = writeln!(out, "{i},{l:.16e}");
        }
        out
    }

    /// `iteration,epoch,train_loss,test_loss_<k>tau...,accuracy`.
    pub fn eval_csv(&self) -> String {
        let horizons: Vec<usize> = self
            .evals
            .first()
            .map(|e| e.test_losses.iter().map(|p| p.0).collect())
            .unwrap_or_default();
        let mut out = String::from("iteration,epoch,train_loss");
        for k in &horizons {
            let _ = write!(out, ",test_loss_{k}tau");
        }
        out.push_str(",accuracy\n");
        for e in &self.evals {
            let epoch = e.epoch.map_or(String::new(), |v| v.to_string());
            let _ = write!(out, "{},{epoch},{:.16e}", e.iteration, e.train_loss);
            for (_, l) in &e.test_losses {
                let _ = write!(out, ",{l:.16e}");
            }
            match e.accuracy {
                Some(a) => {
                    let _ = writeln!(out, ",{a:.6}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }

    /// `iteration,w0,w1,...`.
    pub fn params_csv(&self) -> String {
        let n = self.snapshots.first().map_or(0, |s| s.1.len());
        let mut out = String::from("iteration");
        for i in 0..n {
            let _ = write!(out, ",w{i}");
        }
        out.push('\n');
        for (it, w) in &self.snapshots {
            let _ = write!(out, "{it}");
            for v in w {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn fd_csv(&self) -> String {
        let mut out = String::from("iteration,component_index,adjoint_grad,fd_grad,rel_err\n");
        for c in &self.fd_checks {
            let _ = writeln!(
                out,
                "{},{},{:.16e},{:.16e},{:.6e}",
                c.iteration, c.index, c.adjoint, c.finite_diff, c.rel_err
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model={}", self.model);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "iterations={}", self.iter_loss.len());
        let _ = writeln!(s, "final_train_loss={:.10e}", self.final_train_loss);
        for (k, l) in &self.final_test_losses {
            let _ = writeln!(s, "final_test_loss_{k}tau={l:.10e}");
        }
        if let Some(a) = self.initial_accuracy {
            let _ = writeln!(s, "initial_accuracy={a:.6}");
        }
        if let Some(a) = self.final_accuracy {
            let _ = writeln!(s, "final_accuracy={a:.6}");
        }
        let worst = self.fd_checks.iter().fold(0.0f64, |m, c| m.max(c.rel_err));
        let _ = writeln!(s, "fd_checks={} max_rel_err={worst:.3e}", self.fd_checks.len());
        let _ = writeln!(s, "wall_clock_s={:.3}", self.wall_clock);
        s
    }

    /// Writes the CSV series and `summary.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train_loss.csv"), self.loss_csv())?;
        fs::write(dir.join("eval.csv"), self.eval_csv())?;
        fs::write(dir.join("params_trace.csv"), self.params_csv())?;
        fs::write(dir.join("fd_checks.csv"), self.fd_csv())?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}
