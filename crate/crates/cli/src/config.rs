//! Experiment configuration files: TOML with `[system]`, `[model]`,
//! `[train]` and `[output]` tables. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ndde::dde::{Grid, Method};
use ndde::experiments;
use ndde::models::{DelayInput, FieldSpec, ModelKind, ReadoutHead};
use ndde::nn::{Activation, MlpSpec};
use ndde::systems::{
    gen_annulus, gen_scalar_dde, gen_spiral2d, split_timeseries, LabeledSet, SystemKind, TrajectoryBatch,
};
use ndde::train::{AdamHyper, Budget, GradMode, LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// `annulus`, `spiral`, `population`, `mackey_glass` or `toy_linear`.
    pub kind: String,
    pub seed: u64,
    pub params: Option<Vec<f64>>,
    pub tau: Option<f64>,
    pub t1: Option<f64>,
    pub gen_step: Option<f64>,
    pub sample: Option<f64>,
    pub n_traj: Option<usize>,
    pub init_range: Option<[f64; 2]>,
    pub x0: Option<Vec<f64>>,
    pub split: Option<f64>,
    pub n_inner: Option<usize>,
    pub n_outer: Option<usize>,
    pub radii: Option<[f64; 3]>,
    /// Directory written by `ndde gen`; replaces generation when set.
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Option<String>,
    pub bias: Option<bool>,
    pub delay_input: Option<String>,
    /// Defaults to the system delay.
    pub tau: Option<f64>,
    pub augment_dim: Option<usize>,
    pub init_hidden: Option<Vec<usize>>,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub loss: String,
    pub lr: f64,
    pub step: f64,
    pub epochs: Option<usize>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub method: Option<String>,
    pub horizon: Option<f64>,
    pub mode: Option<String>,
    pub fd_check_every: Option<usize>,
    pub fd_tol: Option<f64>,
    pub eval_every: Option<usize>,
    pub snapshot_every: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub params: bool,
    pub predictions: bool,
    pub plot_recipe: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            params: true,
            predictions: true,
            plot_recipe: true,
        }
    }
}

/// Data described by `[system]`, generated or loaded.
pub enum Dataset {
    Labeled(LabeledSet),
    Series {
        full: TrajectoryBatch,
        train: TrajectoryBatch,
        tests: Vec<(usize, TrajectoryBatch)>,
    },
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

/// Like `bad`, but a blow-up stays a numerical failure.
fn keyed(key: &str, e: ndde::Error) -> CliError {
    if e.is_numerical() {
        CliError::Numerical(format!("{key}: {e}"))
    } else {
        bad(key, e)
    }
}

fn parse<T: std::str::FromStr>(key: &str, s: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| bad(key, e))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        if let Some(dir) = &cfg.system.data {
            if !dir.join("meta.txt").is_file() && !dir.join("annulus.csv").is_file() {
                return Err(bad("system.data", format!("no dataset found in {}", dir.display())));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.system.seed = seed;
        self.train.seed = seed;
    }

    fn is_annulus(&self) -> bool {
        self.system.kind == "annulus"
    }

    fn series_kind(&self) -> Result<SystemKind, CliError> {
        parse("system.kind", &self.system.kind)
    }

    /// System delay, with the presets' values as defaults.
    pub fn system_tau(&self) -> Result<f64, CliError> {
        if let Some(t) = self.system.tau {
            return Ok(t);
        }
        Ok(match self.system.kind.as_str() {
            "annulus" => experiments::ANNULUS_HORIZON,
            "spiral" => experiments::SPIRAL_TAU,
            _ => experiments::SERIES_TAU,
        })
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let s = &self.system;
        if self.is_annulus() {
            if let Some(dir) = &s.data {
                return Ok(Dataset::Labeled(load_labeled(&dir.join("annulus.csv"), s.seed)?));
            }
            let [r1, r2, r3] = s.radii.unwrap_or([0.5, 1.0, 1.5]);
            let set = gen_annulus(s.n_inner.unwrap_or(1000), s.n_outer.unwrap_or(2000), r1, r2, r3, s.seed)
                .map_err(|e| bad("system.radii", e))?;
            return Ok(Dataset::Labeled(set));
        }
        let kind = self.series_kind()?;
        let tau = self.system_tau()?;
        let full = match &s.data {
            Some(dir) => TrajectoryBatch::load(dir).map_err(|e| bad("system.data", e))?,
            None => {
                let spiral = kind == SystemKind::Spiral;
                let t1 = s.t1.unwrap_or(if spiral {
                    experiments::SPIRAL_T
                } else {
                    experiments::SERIES_T
                });
                let gen_step = s
                    .gen_step
                    .unwrap_or(if spiral { 0.005 } else { experiments::SERIES_GEN_STEP });
                let sample = s.sample.unwrap_or(if spiral {
                    experiments::SPIRAL_SAMPLE
                } else {
                    experiments::SERIES_SAMPLE
                });
                let params = s.params.clone().unwrap_or_else(|| kind.default_params());
                let grid = Grid::new(0.0, t1, gen_step).map_err(|e| bad("system.gen_step", e))?;
                let stride = (sample / gen_step).round() as usize;
                if stride == 0 || (stride as f64 * gen_step - sample).abs() > 1e-9 {
                    return Err(bad(
                        "system.sample",
                        format!("{sample} is not a multiple of gen_step {gen_step}"),
                    ));
                }
                let batch = if spiral {
                    let x0 = s.x0.clone().unwrap_or_else(|| vec![0.0, 1.0]);
                    let traj = gen_spiral2d(&params, &x0, tau, grid).map_err(|e| keyed("system", e))?;
                    TrajectoryBatch::new(vec![traj], kind, params, tau, s.seed)
                } else {
                    let [lo, hi] = s
                        .init_range
                        .unwrap_or([experiments::SERIES_INIT_RANGE.0, experiments::SERIES_INIT_RANGE.1]);
                    let n = s.n_traj.unwrap_or(experiments::SERIES_TRAJECTORIES);
                    gen_scalar_dde(kind, &params, n, grid, tau, (lo, hi), s.seed)
                }
                .map_err(|e| keyed("system", e))?;
                let mut batch = batch.subsample(stride).map_err(|e| bad("system.sample", e))?;
                batch.split_time = s.split;
                batch
            }
        };
        let (train, tests) = match s.split.or(full.split_time) {
            Some(t) => split_timeseries(&full, t).map_err(|e| bad("system.split", e))?,
            None => (full.clone(), Vec::new()),
        };
        Ok(Dataset::Series { full, train, tests })
    }

    fn data_dim(&self) -> Result<usize, CliError> {
        Ok(if self.is_annulus() {
            2
        } else {
            self.series_kind()?.dim()
        })
    }

    pub fn field_spec(&self) -> Result<FieldSpec, CliError> {
        let m = &self.model;
        let kind: ModelKind = parse("model.kind", &m.kind)?;
        let d = self.data_dim()?;
        let default_act = if self.is_annulus() { "relu" } else { "tanh" };
        let act: Activation = parse("model.activation", m.activation.as_deref().unwrap_or(default_act))?;
        let bias = m.bias.unwrap_or(true);
        let tau = match m.tau {
            Some(t) => t,
            None => self.system_tau()?,
        };
        let input: DelayInput = parse("model.delay_input", m.delay_input.as_deref().unwrap_or("concat"))?;
        let net = |input_dim: usize, hidden: &[usize], out: usize, key: &str| {
            let mut dims = vec![input_dim];
            dims.extend_from_slice(hidden);
            dims.push(out);
            MlpSpec::new(dims, act, bias).map_err(|e| bad(key, e))
        };
        let hidden = &m.hidden;
        let spec = match kind {
            ModelKind::Node => FieldSpec::node(net(d, hidden, d, "model.hidden")?),
            ModelKind::Anode => {
                let p = m
                    .augment_dim
                    .ok_or_else(|| bad("model.augment_dim", "required for anode"))?;
                FieldSpec::anode(d, p, net(d + p, hidden, d + p, "model.hidden")?)
            }
            ModelKind::Ndde => FieldSpec::ndde(net(input.net_input_dim(d), hidden, d, "model.hidden")?, tau, input),
            ModelKind::NodePlusNdde => {
                let init = m
                    .init_hidden
                    .as_deref()
                    .ok_or_else(|| bad("model.init_hidden", "required for node_plus_ndde"))?;
                FieldSpec::node_plus_ndde(
                    net(input.net_input_dim(d), hidden, d, "model.hidden")?,
                    net(d, init, d, "model.init_hidden")?,
                    tau,
                    input,
                )
            }
            ModelKind::AnalyticAnnulus => FieldSpec::analytic_annulus(d, m.r.unwrap_or(0.75), tau),
            ModelKind::Universal => FieldSpec::universal(net(d, hidden, d, "model.hidden")?, tau),
        };
        spec.validate().map_err(|e| bad("model", e))?;
        Ok(spec)
    }

    fn readout(&self, spec: &FieldSpec) -> ReadoutHead {
        if self.is_annulus() {
            ReadoutHead::ProjectFirst(1)
        } else if spec.kind == ModelKind::Anode {
            ReadoutHead::ProjectFirst(spec.state_dim)
        } else {
            ReadoutHead::Identity
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let model = self.field_spec()?;
        let budget = match (t.epochs, t.iterations) {
            (Some(e), None) => Budget::Epochs(e),
            (None, Some(i)) => Budget::Iterations(i),
            _ => return Err(bad("train.epochs", "set exactly one of epochs and iterations")),
        };
        let loss: LossKind = parse("train.loss", &t.loss)?;
        let readout = self.readout(&model);
        let mut cfg = TrainConfig::new(model, readout, loss, t.lr, budget, t.seed, t.step);
        let defaults = AdamHyper::with_lr(t.lr);
        cfg.adam = AdamHyper {
            lr: t.lr,
            beta1: t.beta1.unwrap_or(defaults.beta1),
            beta2: t.beta2.unwrap_or(defaults.beta2),
            eps: t.eps.unwrap_or(defaults.eps),
        };
        if let Some(b) = t.batch_size {
            cfg.batch_size = b;
        }
        cfg.method = parse::<Method>("train.method", t.method.as_deref().unwrap_or("rk4"))?;
        cfg.horizon = match t.horizon {
            Some(h) => Some(h),
            None if self.is_annulus() => Some(self.system_tau()?),
            None => None,
        };
        if let Some(m) = &t.mode {
            cfg.mode = parse::<GradMode>("train.mode", m)?;
        }
        if let Some(v) = t.fd_check_every {
            cfg.fd_check_every = v;
        }
        if let Some(v) = t.fd_tol {
            cfg.fd_tol = v;
        }
        if let Some(v) = t.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = t.snapshot_every {
            cfg.snapshot_every = v;
        }
        cfg.validate().map_err(|e| bad("train", e))?;
        Ok(cfg)
    }
}

fn load_labeled(path: &Path, seed: u64) -> Result<LabeledSet, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| bad("system.data", e))?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad("system.data", format!("line {}: {e}", i + 1)))?;
        if v.len() != 3 {
            return Err(bad("system.data", format!("line {}: expected 3 columns", i + 1)));
        }
        points.push([v[0], v[1]]);
        labels.push(v[2]);
    }
    Ok(LabeledSet {
        points,
        labels,
        radii: (0.5, 1.0, 1.5),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPIRAL: &str = r#"
[system]
kind = "spiral"
seed = 0

[model]
kind = "ndde"
hidden = [10]
delay_input = "sum"

[train]
seed = 0
loss = "mae"
lr = 0.01
step = 0.01
iterations = 5000
"#;

    #[test]
    fn minimal_config_builds_the_preset() {
        let cfg = ExperimentConfig::parse(SPIRAL).unwrap();
        let tc = cfg.train_config().unwrap();
        let mut preset = experiments::spiral_config(ModelKind::Ndde, 0).unwrap();
        preset.batch_size = tc.batch_size;
        preset.eval_every = tc.eval_every;
        assert_eq!(tc, preset);
        match cfg.dataset().unwrap() {
            Dataset::Series { train, tests, .. } => {
                assert_eq!(train.grid().unwrap().len(), 26);
                assert!(tests.is_empty());
            }
            Dataset::Labeled(_) => panic!("expected a series"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SPIRAL.replace("lr = 0.01", "lr = 0.01\nlearning_rate = 0.1");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn seeds_are_mandatory() {
        let text = SPIRAL.replacen("seed = 0\n", "", 1);
        assert!(ExperimentConfig::parse(&text).unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn errors_name_the_key() {
        let cfg = ExperimentConfig::parse(&SPIRAL.replace("\"mae\"", "\"l3\"")).unwrap();
        assert!(cfg.train_config().unwrap_err().to_string().starts_with("train.loss"));
        let cfg = ExperimentConfig::parse(&SPIRAL.replace("kind = \"ndde\"", "kind = \"anode\"")).unwrap();
        assert!(cfg
            .train_config()
            .unwrap_err()
            .to_string()
            .starts_with("model.augment_dim"));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::parse(SPIRAL).unwrap();
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back.train_config().unwrap(), cfg.train_config().unwrap());
    }
}
