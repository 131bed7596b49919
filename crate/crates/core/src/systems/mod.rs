//! Synthetic datasets: the annulus classification set and the delayed
//! dynamical systems used for regression, plus splitting and persistence.

mod annulus;
mod fields;

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dde::{integrate_dde, Grid, History, Method, TabulatedHistory, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::field::VectorField;

pub use annulus::{gen_annulus, LabeledSet};
pub use fields::{MackeyGlassField, PopulationField, SpiralField, ToyLinearField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    ToyLinear,
    Population,
    MackeyGlass,
    Spiral,
}

impl SystemKind {
    pub fn field(self) -> &'static dyn VectorField {
        match self {
            SystemKind::ToyLinear => &ToyLinearField,
            SystemKind::Population => &PopulationField,
            SystemKind::MackeyGlass => &MackeyGlassField,
            SystemKind::Spiral => &SpiralField,
        }
    }

    pub fn default_params(self) -> Vec<f64> {
        match self {
            SystemKind::ToyLinear => vec![-2.0],
            SystemKind::Population => vec![1.8],
            SystemKind::MackeyGlass => vec![4.0, 9.65, 2.0],
            SystemKind::Spiral => vec![-1.0, 1.0, -1.0, -1.0],
        }
    }

    pub fn dim(self) -> usize {
        self.field().dim()
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::ToyLinear => "toy_linear",
            SystemKind::Population => "population",
            SystemKind::MackeyGlass => "mackey_glass",
            SystemKind::Spiral => "spiral",
        })
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "toy_linear" => SystemKind::ToyLinear,
            "population" => SystemKind::Population,
            "mackey_glass" => SystemKind::MackeyGlass,
            "spiral" => SystemKind::Spiral,
            other => return Err(Error::config(format!("unknown system `{other}`"))),
        })
    }
}

/// Trajectories of one system on a shared grid.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub system: SystemKind,
    pub params: Vec<f64>,
    pub tau: f64,
    pub seed: u64,
    pub split_time: Option<f64>,
}

impl TrajectoryBatch {
    pub fn new(
        trajectories: Vec<Trajectory>,
        system: SystemKind,
        params: Vec<f64>,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            for t in &trajectories[1..] {
                if !t.grid().same_as(first.grid()) || t.dim() != first.dim() {
                    return Err(Error::config("batch members must share grid and dimension"));
                }
            }
        }
        Ok(TrajectoryBatch {
            trajectories,
            system,
            params,
            tau,
            seed,
            split_time: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.trajectories.first().map(Trajectory::grid)
    }

    pub fn dim(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::dim)
    }

    /// Keeps every `stride`-th row of every member.
    pub fn subsample(&self, stride: usize) -> Result<TrajectoryBatch> {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| t.subsample(stride))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryBatch {
            trajectories,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> TrajectoryBatch {
        TrajectoryBatch {
            trajectories: Vec::new(),
            system: self.system,
            params: self.params.clone(),
            tau: self.tau,
            seed: self.seed,
            split_time: self.split_time,
        }
    }

    /// Writes `traj_NNN.csv` files and `meta.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, t) in self.trajectories.iter().enumerate() {
            fs::write(dir.join(format!("traj_{i:03}.csv")), t.to_csv())?;
        }
        fs::write(dir.join("meta.txt"), self.meta())?;
        Ok(())
    }

    fn meta(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "system={}", self.system);
        let params: Vec<String> = self.params.iter().map(|p| format!("{p:e}")).collect();
        let _ = writeln!(s, "params={}", params.join(","));
        let _ = writeln!(s, "tau={:e}", self.tau);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n_traj={}", self.len());
        match self.split_time {
            Some(t) => {
                let _ = writeln!(s, "split_time={t:e}");
            }
            None => s.push_str("split_time=none\n"),
        }
        s
    }

    /// Reads a directory written by [`TrajectoryBatch::save`].
    pub fn load(dir: &Path) -> Result<TrajectoryBatch> {
        let meta = fs::read_to_string(dir.join("meta.txt"))?;
        let mut kv = std::collections::BTreeMap::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("meta.txt: bad line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("meta.txt: missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|e| Error::Parse(format!("meta.txt: `{k}`: {e}")))
        };
        let system: SystemKind = get("system")?.parse()?;
        let params = get("params")?
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("meta.txt: params: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n: usize = get("n_traj")?
            .parse()
            .map_err(|e| Error::Parse(format!("meta.txt: n_traj: {e}")))?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|e| Error::Parse(format!("meta.txt: seed: {e}")))?;
        let split_time = match get("split_time")?.as_str() {
            "none" => None,
            _ => Some(num("split_time")?),
        };
        let trajectories = (0..n)
            .map(|i| Trajectory::from_csv(&fs::read_to_string(dir.join(format!("traj_{i:03}.csv")))?))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = TrajectoryBatch::new(trajectories, system, params, num("tau")?, seed)?;
        batch.split_time = split_time;
        Ok(batch)
    }
}

fn check_params(kind: SystemKind, params: &[f64]) -> Result<()> {
    if params.len() != kind.field().param_count() {
        return Err(Error::config(format!(
            "{kind} takes {} parameters, got {}",
            kind.field().param_count(),
            params.len()
        )));
    }
    Ok(())
}

/// Integrates `n_traj` trajectories from constant histories drawn uniformly
/// from `init_range`.
#[allow(clippy::too_many_arguments)]
pub fn gen_scalar_dde(
    kind: SystemKind,
    params: &[f64],
    n_traj: usize,
    grid: Grid,
    tau: f64,
    init_range: (f64, f64),
    seed: u64,
) -> Result<TrajectoryBatch> {
    if kind == SystemKind::Spiral {
        return Err(Error::config("the spiral is planar; use gen_spiral2d"));
    }
    check_params(kind, params)?;
    let (lo, hi) = init_range;
    if !(lo <= hi) {
        return Err(Error::config(format!("init_range ({lo}, {hi}) is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let x0 = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let traj = integrate_one(kind, params, &[x0], tau, grid, i)?;
        trajectories.push(traj);
    }
    TrajectoryBatch::new(trajectories, kind, params.to_vec(), tau, seed)
}

fn integrate_one(
    kind: SystemKind,
    params: &[f64],
    x0: &[f64],
    tau: f64,
    grid: Grid,
    index: usize,
) -> Result<Trajectory> {
    let name = |e: Error| match e {
        Error::Divergence { step, context } => Error::Divergence {
            step,
            context: format!("{kind} trajectory {index}: {context}"),
        },
        other => other,
    };
    let traj = integrate_dde(
        kind.field(),
        params,
        &History::Constant(x0.to_vec()),
        tau,
        grid,
        Method::Rk4,
    )
    .map_err(name)?;
    if matches!(kind, SystemKind::Population | SystemKind::MackeyGlass) {
        if let Some(k) = traj.states().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Divergence {
                step: k,
                context: format!("{kind} trajectory {index} left the positive regime"),
            });
        }
    }
    Ok(traj)
}

/// One trajectory of `ẋ = A·tanh(x(t) + x(t − τ))` with constant history `x0`.
pub fn gen_spiral2d(a: &[f64], x0: &[f64], tau: f64, grid: Grid) -> Result<Trajectory> {
    check_len("spiral matrix", 4, a.len())?;
    check_len("spiral initial state", 2, x0.len())?;
    integrate_one(SystemKind::Spiral, a, x0, tau, grid, 0)
}

/// Training window `[0, t_split]` and test windows `(t_split, t_split + kτ]`
/// for `k ∈ {1, 2, 5}`.
///
/// Test members start with the boundary row and carry the data on
/// `[t_split − τ, t_split]` as a tabulated history, padded with the constant
/// history where that window reaches before 0.
pub fn split_timeseries(
    batch: &TrajectoryBatch,
    t_split: f64,
) -> Result<(TrajectoryBatch, Vec<(usize, TrajectoryBatch)>)> {
    let grid = *batch
        .grid()
        .ok_or_else(|| Error::config("cannot split an empty batch"))?;
    let ks = grid.index_of(t_split)?;
    let m = grid.steps_in(batch.tau, "delay")?;
    let mut train = batch.clone_meta();
    train.split_time = Some(t_split);
    let mut horizons = Vec::new();
    for k in [1usize, 2, 5] {
        let end = ks + k * m;
        if end > grid.n_steps() {
            return Err(Error::config(format!(
                "test horizon {k}τ ends at {} beyond the generated span {}",
                t_split + k as f64 * batch.tau,
                grid.t1()
            )));
        }
        let mut test = batch.clone_meta();
        test.split_time = Some(t_split);
        for t in &batch.trajectories {
            let x0 = t.row(0).to_vec();
            let rows: Vec<Vec<f64>> = (0..=m)
                .map(|q| match (ks + q).checked_sub(m) {
                    Some(i) => t.row(i).to_vec(),
                    None => x0.clone(),
                })
                .collect();
            let hist = History::Tabulated(TabulatedHistory {
                step: grid.step(),
                rows,
            });
            test.trajectories.push(t.slice(ks, end, hist)?);
        }
        horizons.push((k, test));
    }
    for t in &batch.trajectories {
        train.trajectories.push(t.slice(0, ks, t.history().clone())?);
    }
    Ok((train, horizons))
}

#[cfg(test)]
mod tests;
