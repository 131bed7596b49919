//! Losses, Adam and the training loops for classification and time-series
//! regression.

mod adam;
mod loss;
mod report;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{finite_diff_gradient, rel_err, GradcheckReport, ObservationLoss};
use crate::dde::{Grid, History, Method};
use crate::error::{check_len, Error, Result};
use crate::models::{make_field, readout, readout_vjp, FieldSpec, Model, ModelKind, ReadoutHead};
use crate::nn::ParamVector;
use crate::systems::{LabeledSet, TrajectoryBatch};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use loss::{loss_eval, LossKind};
pub use report::{EvalRecord, FdCheck, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Epochs(usize),
    Iterations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    #[default]
    Dense,
    Piecewise,
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradMode::Dense => "dense",
            GradMode::Piecewise => "piecewise",
        })
    }
}

impl FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(GradMode::Dense),
            "piecewise" => Ok(GradMode::Piecewise),
            other => Err(Error::config(format!("unknown gradient mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: FieldSpec,
    pub readout: ReadoutHead,
    pub loss: LossKind,
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub budget: Budget,
    pub seed: u64,
    pub step: f64,
    pub method: Method,
    /// Integration horizon for classification.
    pub horizon: Option<f64>,
    pub mode: GradMode,
    /// Spot finite-difference check cadence in iterations; 0 disables.
    pub fd_check_every: usize,
    pub fd_tol: f64,
    /// Time series: evaluate train and test losses this often; 0 means only
    /// at the start and the end.
    pub eval_every: usize,
    /// Parameter snapshot cadence; 0 keeps only the first and last.
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn new(
        model: FieldSpec,
        readout: ReadoutHead,
        loss: LossKind,
        lr: f64,
        budget: Budget,
        seed: u64,
        step: f64,
    ) -> Self {
        TrainConfig {
            model,
            readout,
            loss,
            adam: AdamHyper::with_lr(lr),
            batch_size: 64,
            budget,
            seed,
            step,
            method: Method::Rk4,
            horizon: None,
            mode: GradMode::Dense,
            fd_check_every: 100,
            fd_tol: 1e-3,
            eval_every: 0,
            snapshot_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.adam.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.step > 0.0) {
            return Err(Error::config(format!("step must be positive, got {}", self.step)));
        }
        if let Some(tau) = self.model.tau {
            crate::dde::delay_steps(tau, self.step)?;
        }
        self.model.validate()
    }
}

pub enum TrainData<'a> {
    Classification(&'a LabeledSet),
    TimeSeries {
        train: &'a TrajectoryBatch,
        tests: &'a [(usize, TrajectoryBatch)],
    },
}

/// Training stopped early; `report` holds everything up to the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub report: Box<TrainReport>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training stopped after {} iterations: {}",
            self.report.iter_loss.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// One supervised rollout: input, grid and targets at grid nodes.
struct Sample {
    x: Vec<f64>,
    history: Option<History>,
    grid: Grid,
    obs: Vec<(usize, Vec<f64>)>,
}

struct Problem<'a> {
    model: Model,
    cfg: &'a TrainConfig,
}

type Predictions = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<crate::dde::Trajectory>);

struct BatchResult {
    loss: f64,
    grad: Vec<f64>,
}

impl Problem<'_> {
    fn history(&self, w: &[f64], s: &Sample) -> Result<History> {
        match &s.history {
            Some(h) => Ok(h.clone()),
            None => self.model.history(w, &s.x),
        }
    }

    /// Readouts, targets and the forward trajectories behind them.
    fn predictions(&self, w: &[f64], batch: &[&Sample]) -> Result<Predictions> {
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        let mut trajs = Vec::with_capacity(batch.len());
        for s in batch {
            let hist = self.history(w, s)?;
            let traj = self.model.forward_from(w, &hist, s.grid, self.cfg.method)?;
            for (k, target) in &s.obs {
                preds.push(readout(&self.cfg.readout, traj.row(*k))?);
                targets.push(target.clone());
            }
            trajs.push(traj);
        }
        Ok((preds, targets, trajs))
    }

    fn loss(&self, w: &[f64], batch: &[&Sample]) -> Result<f64> {
        let (p, t, _) = self.predictions(w, batch)?;
        Ok(loss_eval(self.cfg.loss, &p, &t)?.0)
    }

    fn loss_and_grad(&self, w: &[f64], batch: &[&Sample]) -> Result<BatchResult> {
        let (preds, targets, trajs) = self.predictions(w, batch)?;
        let (loss, grads) = loss_eval(self.cfg.loss, &preds, &targets)?;
        let mut grad = vec![0.0; w.len()];
        let dim = self.model.dim();
        let mut at = 0;
        for (s, traj) in batch.iter().zip(&trajs) {
            let n = s.obs.len();
            let times = s.obs.iter().map(|(k, _)| s.grid.time(*k) - s.grid.t0()).collect();
            let covs = grads[at..at + n]
                .iter()
                .map(|g| readout_vjp(&self.cfg.readout, dim, g))
                .collect::<Result<Vec<_>>>()?;
            at += n;
            let obs = ObservationLoss::new(times, covs)?;
            let bundle = match self.cfg.mode {
                GradMode::Dense => self.model.backward(w, traj, &obs, self.cfg.method)?,
                GradMode::Piecewise => {
                    let tau = self.model.tau().unwrap_or_default();
                    let n_seg =
                        s.grid.steps_in(s.grid.t1() - s.grid.t0(), "horizon")? / s.grid.steps_in(tau, "delay")?;
                    let hist = self.history(w, s)?;
                    self.model
                        .gradient_piecewise(w, &hist, self.cfg.step, n_seg, &obs, self.cfg.method)?
                        .1
                }
            };
            for (a, b) in grad.iter_mut().zip(&bundle.w_grad) {
                *a += b;
            }
        }
        Ok(BatchResult { loss, grad })
    }
}

fn check_piecewise(cfg: &TrainConfig, span: f64) -> Result<()> {
    if cfg.mode == GradMode::Piecewise {
        let tau = match cfg.model.tau {
            Some(t) if cfg.model.kind.is_delayed() => t,
            _ => return Err(Error::config("piecewise gradients need a delayed model")),
        };
        let n = (span / tau).round();
        if n < 1.0 || (n * tau - span).abs() > 1e-9 {
            return Err(Error::config(format!(
                "piecewise mode needs a horizon that is a multiple of tau, got {span}"
            )));
        }
    }
    Ok(())
}

fn classification_samples(cfg: &TrainConfig, set: &LabeledSet) -> Result<Vec<Sample>> {
    let t = cfg
        .horizon
        .ok_or_else(|| Error::config("classification needs a horizon"))?;
    check_piecewise(cfg, t)?;
    let grid = Grid::new(0.0, t, cfg.step)?;
    let out = cfg.readout.out_dim(cfg.model.effective_dim());
    Ok(set
        .points
        .iter()
        .zip(&set.labels)
        .map(|(p, &l)| {
            let target = if out == 1 {
                vec![l]
            } else {
                let mut v = vec![0.0; out];
                v[if l > 0.0 { 0 } else { 1 }] = 1.0;
                v
            };
            Sample {
                x: p.to_vec(),
                history: None,
                grid,
                obs: vec![(grid.n_steps(), target)],
            }
        })
        .collect())
}

/// Samples for trajectories in a batch, observed at every data row after the
/// first. `tabulated` seeds delayed models from the batch's own histories.
fn series_samples(cfg: &TrainConfig, batch: &TrajectoryBatch, tabulated: bool) -> Result<Vec<Sample>> {
    let Some(dgrid) = batch.grid() else {
        return Ok(Vec::new());
    };
    let stride = ratio(dgrid.step(), cfg.step)?;
    let span = dgrid.t1() - dgrid.t0();
    let grid = Grid::from_steps(0.0, cfg.step, dgrid.n_steps() * stride)?;
    let uses_tab = tabulated
        && matches!(
            cfg.model.kind,
            ModelKind::Ndde | ModelKind::Universal | ModelKind::AnalyticAnnulus
        );
    if uses_tab && stride != 1 {
        return Err(Error::config(
            "test rollouts of delayed models need the solver step to equal the sampling step",
        ));
    }
    if !tabulated {
        check_piecewise(cfg, span)?;
    }
    let head = cfg.readout.out_dim(cfg.model.effective_dim());
    if head != batch.dim() {
        return Err(Error::config(format!(
            "readout produces {head} components, the data has {}",
            batch.dim()
        )));
    }
    Ok(batch
        .trajectories
        .iter()
        .map(|t| Sample {
            x: t.row(0).to_vec(),
            history: if uses_tab { Some(t.history().clone()) } else { None },
            grid,
            obs: (1..dgrid.len()).map(|j| (j * stride, t.row(j).to_vec())).collect(),
        })
        .collect())
}

fn ratio(coarse: f64, fine: f64) -> Result<usize> {
    let r = (coarse / fine).round();
    if r < 1.0 || (r * fine - coarse).abs() > 1e-9 * coarse.max(1.0) {
        return Err(Error::config(format!(
            "solver step {fine} does not divide the sampling step {coarse}"
        )));
    }
    Ok(r as usize)
}

fn accuracy(problem: &Problem<'_>, w: &[f64], samples: &[Sample]) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let (preds, targets, _) = problem.predictions(w, &refs)?;
    let correct = preds
        .iter()
        .zip(&targets)
        .filter(|(p, t)| {
            if p.len() == 1 {
                p[0] * t[0] > 0.0
            } else {
                argmax(p) == argmax(t)
            }
        })
        .count();
    Ok(correct as f64 / preds.len().max(1) as f64)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Trains the configured model. Deterministic per `cfg.seed`.
pub fn train_run(cfg: &TrainConfig, data: TrainData<'_>) -> std::result::Result<TrainReport, TrainFailure> {
    let start = Instant::now();
    let init = cfg.validate().and_then(|_| make_field(&cfg.model, cfg.seed));
    let (model, params) = match init {
        Ok(v) => v,
        Err(error) => {
            return Err(TrainFailure {
                error,
                report: Box::new(TrainReport::empty(cfg)),
            })
        }
    };
    let mut report = TrainReport::empty(cfg);
    report.params = params.clone();
    let mut run = Runner {
        problem: Problem { model, cfg },
        adam: AdamState::new(params.len()),
        w: params.into_values(),
        report,
    };
    match run.run(data) {
        Ok(()) => {
            run.finish(start);
            Ok(run.report)
        }
        Err(error) => {
            run.finish(start);
            Err(TrainFailure {
                error,
                report: Box::new(run.report),
            })
        }
    }
}

/// Adjoint gradient of the training loss at `w`, restricted to the first
/// `members` training samples, against central differences with step `eps`.
pub fn gradcheck_run(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    w: &[f64],
    members: usize,
    eps: f64,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let (model, params) = make_field(&cfg.model, cfg.seed)?;
    check_len("parameter vector", params.len(), w.len())?;
    let samples = match data {
        TrainData::Classification(set) => classification_samples(cfg, set)?,
        TrainData::TimeSeries { train, .. } => series_samples(cfg, train, false)?,
    };
    let batch: Vec<&Sample> = samples.iter().take(members.max(1)).collect();
    let problem = Problem { model, cfg };
    let adjoint = problem.loss_and_grad(w, &batch)?.grad;
    let fd = finite_diff_gradient(|p| problem.loss(p, &batch), w, eps)?;
    let idx: Vec<usize> = (0..w.len()).collect();
    Ok(GradcheckReport::new(&idx, &adjoint, &fd, 1e-8))
}

struct Runner<'a> {
    problem: Problem<'a>,
    w: Vec<f64>,
    adam: AdamState,
    report: TrainReport,
}

impl<'a> Runner<'a> {
    fn cfg(&self) -> &'a TrainConfig {
        self.problem.cfg
    }

    fn finish(&mut self, start: Instant) {
        if let Ok(p) = ParamVector::new(self.w.clone(), self.report.params.manifest().clone()) {
            self.report.params = p;
        }
        let it = self.report.iter_loss.len();
        if self.report.snapshots.last().map(|s| s.0) != Some(it) {
            self.report.snapshots.push((it, self.w.clone()));
        }
        self.report.wall_clock = start.elapsed().as_secs_f64();
    }

    fn run(&mut self, data: TrainData<'_>) -> Result<()> {
        let cfg = self.cfg();
        match data {
            TrainData::Classification(set) => {
                let samples = classification_samples(cfg, set)?;
                let epochs = match cfg.budget {
                    Budget::Epochs(e) => e,
                    Budget::Iterations(_) => return Err(Error::config("classification budgets are in epochs")),
                };
                self.eval_classification(&samples, 0, Some(0))?;
                self.report.initial_accuracy = self.report.final_accuracy;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
                let mut order: Vec<usize> = (0..samples.len()).collect();
                for epoch in 1..=epochs {
                    order.shuffle(&mut rng);
                    for chunk in order.chunks(cfg.batch_size) {
                        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                        self.iterate(&batch)?;
                    }
                    let it = self.report.iter_loss.len();
                    self.eval_classification(&samples, it, Some(epoch))?;
                }
                Ok(())
            }
            TrainData::TimeSeries { train, tests } => {
                let samples = series_samples(cfg, train, false)?;
                let test_sets = tests
                    .iter()
                    .map(|(k, b)| Ok((*k, series_samples(cfg, b, true)?)))
                    .collect::<Result<Vec<_>>>()?;
                let iters = match cfg.budget {
                    Budget::Iterations(n) => n,
                    Budget::Epochs(e) => e * samples.len().div_ceil(cfg.batch_size),
                };
                self.eval_series(&samples, &test_sets, 0)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
                let mut order: Vec<usize> = (0..samples.len()).collect();
                let mut cursor = order.len();
                for it in 1..=iters {
                    let batch: Vec<&Sample> = if cfg.batch_size >= samples.len() {
                        samples.iter().collect()
                    } else {
                        if cursor + cfg.batch_size > order.len() {
                            order.shuffle(&mut rng);
                            cursor = 0;
                        }
                        cursor += cfg.batch_size;
                        order[cursor - cfg.batch_size..cursor]
                            .iter()
                            .map(|&i| &samples[i])
                            .collect()
                    };
                    self.iterate(&batch)?;
                    if it == iters || (cfg.eval_every > 0 && it % cfg.eval_every == 0) {
                        self.eval_series(&samples, &test_sets, it)?;
                    }
                }
                Ok(())
            }
        }
    }

    fn iterate(&mut self, batch: &[&Sample]) -> Result<()> {
        let cfg = self.problem.cfg;
        let it = self.report.iter_loss.len();
        let res = self.problem.loss_and_grad(&self.w, batch)?;
        if !res.loss.is_finite() {
            return Err(Error::Divergence {
                step: it,
                context: "training loss is not finite".into(),
            });
        }
        if let Some(i) = res.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: it,
                context: format!("gradient component {i} is not finite"),
            });
        }
        if cfg.fd_check_every > 0 && it.is_multiple_of(cfg.fd_check_every) && !self.w.is_empty() {
            self.fd_check(batch, &res.grad, it)?;
        }
        self.report.iter_loss.push(res.loss);
        adam_step(&mut self.adam, &mut self.w, &res.grad, &cfg.adam)?;
        if cfg.snapshot_every > 0 && (it + 1).is_multiple_of(cfg.snapshot_every) {
            self.report.snapshots.push((it + 1, self.w.clone()));
        }
        Ok(())
    }

    fn fd_check(&mut self, batch: &[&Sample], grad: &[f64], it: usize) -> Result<()> {
        let cfg = self.problem.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(it as u64).wrapping_mul(0x9e37_79b9));
        let i = rng.gen_range(0..self.w.len());
        let mut best = f64::INFINITY;
        let mut best_fd = 0.0;
        for eps in [1e-6, 1e-7, 1e-5] {
            let h = eps * self.w[i].abs().max(1.0);
            let mut w = self.w.clone();
            w[i] += h;
            let up = self.problem.loss(&w, batch)?;
            w[i] -= 2.0 * h;
            let down = self.problem.loss(&w, batch)?;
            let fd = (up - down) / (2.0 * h);
            let e = rel_err(grad[i], fd, 1e-6);
            if e < best {
                best = e;
                best_fd = fd;
            }
            if best <= cfg.fd_tol {
                break;
            }
        }
        self.report.fd_checks.push(FdCheck {
            iteration: it,
            index: i,
            adjoint: grad[i],
            finite_diff: best_fd,
            rel_err: best,
        });
        if best > cfg.fd_tol {
            return Err(Error::GradientCheck {
                iteration: it,
                index: i,
                adjoint: grad[i],
                finite_diff: best_fd,
            });
        }
        Ok(())
    }

    fn eval_classification(&mut self, samples: &[Sample], it: usize, epoch: Option<usize>) -> Result<()> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let loss = self.problem.loss(&self.w, &refs)?;
        let acc = accuracy(&self.problem, &self.w, samples)?;
        self.report.final_train_loss = loss;
        self.report.final_accuracy = Some(acc);
        self.report.evals.push(EvalRecord {
            iteration: it,
            epoch,
            train_loss: loss,
            test_losses: Vec::new(),
            accuracy: Some(acc),
        });
        Ok(())
    }

    fn eval_series(&mut self, samples: &[Sample], tests: &[(usize, Vec<Sample>)], it: usize) -> Result<()> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let loss = self.problem.loss(&self.w, &refs)?;
        let mut test_losses = Vec::with_capacity(tests.len());
        for (k, set) in tests {
            let refs: Vec<&Sample> = set.iter().collect();
            test_losses.push((*k, self.problem.loss(&self.w, &refs)?));
        }
        self.report.final_train_loss = loss;
        self.report.final_test_losses = test_losses.clone();
        self.report.evals.push(EvalRecord {
            iteration: it,
            epoch: None,
            train_loss: loss,
            test_losses,
            accuracy: None,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests;
