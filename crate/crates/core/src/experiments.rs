//! Ready-made datasets and training configurations for the benchmark
//! experiments, shared by the command-line tool and the test suites.

use crate::dde::Grid;
use crate::error::{Error, Result};
use crate::models::{DelayInput, FieldSpec, ModelKind, ReadoutHead};
use crate::nn::{Activation, MlpSpec};
use crate::systems::{
    gen_annulus, gen_scalar_dde, gen_spiral2d, split_timeseries, LabeledSet, SystemKind, TrajectoryBatch,
};
use crate::train::{Budget, LossKind, TrainConfig};

pub const ANNULUS_HORIZON: f64 = 10.0;
pub const ANNULUS_STEP: f64 = 0.1;

pub const SPIRAL_TAU: f64 = 0.5;
pub const SPIRAL_T: f64 = 2.5;
pub const SPIRAL_SAMPLE: f64 = 0.1;
pub const SPIRAL_STEP: f64 = 0.01;

pub const SERIES_TAU: f64 = 1.0;
pub const SERIES_T: f64 = 8.0;
pub const SERIES_SPLIT: f64 = 3.0;
pub const SERIES_GEN_STEP: f64 = 0.01;
pub const SERIES_SAMPLE: f64 = 0.05;
pub const SERIES_TRAJECTORIES: usize = 100;
pub const SERIES_INIT_RANGE: (f64, f64) = (0.1, 1.2);

fn mlp(dims: &[usize], act: Activation) -> MlpSpec {
    MlpSpec::new(dims.to_vec(), act, true).expect("preset architectures are valid")
}

pub fn annulus_set(seed: u64) -> Result<LabeledSet> {
    gen_annulus(1000, 2000, 0.5, 1.0, 1.5, seed)
}

/// 2→32→32→2 ReLU field, delayed-only for the NDDE with `τ = T`; the first
/// state component is regressed onto the ±1 label.
pub fn annulus_config(kind: ModelKind, seed: u64) -> Result<TrainConfig> {
    let net = mlp(&[2, 32, 32, 2], Activation::Relu);
    let model = match kind {
        ModelKind::Node => FieldSpec::node(net),
        ModelKind::Ndde => FieldSpec::ndde(net, ANNULUS_HORIZON, DelayInput::DelayedOnly),
        other => return Err(Error::config(format!("no annulus preset for {other}"))),
    };
    let mut cfg = TrainConfig::new(
        model,
        ReadoutHead::ProjectFirst(1),
        LossKind::Mse,
        1e-3,
        Budget::Epochs(5),
        seed,
        ANNULUS_STEP,
    );
    cfg.horizon = Some(ANNULUS_HORIZON);
    cfg.batch_size = 64;
    Ok(cfg)
}

/// The planar spiral observed every 0.1 on `[0, 2.5]`.
pub fn spiral_data() -> Result<TrajectoryBatch> {
    let a = SystemKind::Spiral.default_params();
    let fine = 0.005;
    let grid = Grid::new(0.0, SPIRAL_T, fine)?;
    let traj = gen_spiral2d(&a, &[0.0, 1.0], SPIRAL_TAU, grid)?;
    let obs = traj.subsample((SPIRAL_SAMPLE / fine).round() as usize)?;
    TrajectoryBatch::new(vec![obs], SystemKind::Spiral, a, SPIRAL_TAU, 0)
}

/// 2→10→2 tanh fields: `net(h)` for the NODE, `net(h + y)` for the NDDE.
pub fn spiral_config(kind: ModelKind, seed: u64) -> Result<TrainConfig> {
    let net = mlp(&[2, 10, 2], Activation::Tanh);
    let model = match kind {
        ModelKind::Node => FieldSpec::node(net),
        ModelKind::Ndde => FieldSpec::ndde(net, SPIRAL_TAU, DelayInput::Sum),
        other => return Err(Error::config(format!("no spiral preset for {other}"))),
    };
    let mut cfg = TrainConfig::new(
        model,
        ReadoutHead::Identity,
        LossKind::Mae,
        1e-2,
        Budget::Iterations(5000),
        seed,
        SPIRAL_STEP,
    );
    cfg.batch_size = 1;
    cfg.eval_every = 500;
    Ok(cfg)
}

pub type SeriesSplit = (TrajectoryBatch, Vec<(usize, TrajectoryBatch)>);

/// 100 trajectories on `[0, 8]` sampled every 0.05, split at 3.
pub fn series_data(system: SystemKind, seed: u64) -> Result<SeriesSplit> {
    if !matches!(system, SystemKind::Population | SystemKind::MackeyGlass) {
        return Err(Error::config(format!("no time-series preset for {system}")));
    }
    let grid = Grid::new(0.0, SERIES_T, SERIES_GEN_STEP)?;
    let batch = gen_scalar_dde(
        system,
        &system.default_params(),
        SERIES_TRAJECTORIES,
        grid,
        SERIES_TAU,
        SERIES_INIT_RANGE,
        seed,
    )?;
    let obs = batch.subsample((SERIES_SAMPLE / SERIES_GEN_STEP).round() as usize)?;
    split_timeseries(&obs, SERIES_SPLIT)
}

/// Two tanh hidden layers of width 10: `net(x)` for the NODE, `net([h; y])`
/// for the NDDE and `net(x_aug)` with one extra component for the ANODE.
pub fn series_config(kind: ModelKind, seed: u64) -> Result<TrainConfig> {
    let tanh = |d: &[usize]| mlp(d, Activation::Tanh);
    let (model, head) = match kind {
        ModelKind::Node => (FieldSpec::node(tanh(&[1, 10, 10, 1])), ReadoutHead::Identity),
        ModelKind::Ndde => (
            FieldSpec::ndde(tanh(&[2, 10, 10, 1]), SERIES_TAU, DelayInput::Concat),
            ReadoutHead::Identity,
        ),
        ModelKind::Anode => (
            FieldSpec::anode(1, 1, tanh(&[2, 10, 10, 2])),
            ReadoutHead::ProjectFirst(1),
        ),
        ModelKind::NodePlusNdde => (
            FieldSpec::node_plus_ndde(
                tanh(&[2, 10, 10, 1]),
                tanh(&[1, 10, 10, 1]),
                SERIES_TAU,
                DelayInput::Concat,
            ),
            ReadoutHead::Identity,
        ),
        other => return Err(Error::config(format!("no time-series preset for {other}"))),
    };
    let mut cfg = TrainConfig::new(
        model,
        head,
        LossKind::Mae,
        1e-2,
        Budget::Iterations(3000),
        seed,
        SERIES_SAMPLE,
    );
    cfg.batch_size = SERIES_TRAJECTORIES;
    cfg.eval_every = 100;
    Ok(cfg)
}
