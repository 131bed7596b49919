//! Model catalogue: learned NODE/NDDE variants, the analytic annulus field,
//! the universal-approximation construction and readout heads.

mod fields;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::adjoint::{grad_piecewise, gradient_dense, node_adjoint, Diagnostics, GradientBundle, ObservationLoss};
use crate::dde::{integrate_dde, integrate_ode, integrate_stacked, Grid, History, Method, OdeHistory, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::field::VectorField;
use crate::nn::{mlp_init, BlockLayout, Manifest, Mlp, MlpSpec, ParamVector};

pub use fields::{AnnulusField, DelayInput, LinearMap, NetField, StateMap, UniversalField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Node,
    Ndde,
    Anode,
    NodePlusNdde,
    AnalyticAnnulus,
    Universal,
}

impl ModelKind {
    pub fn is_delayed(self) -> bool {
        !matches!(self, ModelKind::Node | ModelKind::Anode)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Node => "node",
            ModelKind::Ndde => "ndde",
            ModelKind::Anode => "anode",
            ModelKind::NodePlusNdde => "node_plus_ndde",
            ModelKind::AnalyticAnnulus => "analytic_annulus",
            ModelKind::Universal => "universal",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "node" => ModelKind::Node,
            "ndde" => ModelKind::Ndde,
            "anode" => ModelKind::Anode,
            "node_plus_ndde" => ModelKind::NodePlusNdde,
            "analytic_annulus" => ModelKind::AnalyticAnnulus,
            "universal" => ModelKind::Universal,
            other => return Err(Error::config(format!("unknown model kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub kind: ModelKind,
    pub state_dim: usize,
    /// Extra zero-initialised components (anode only).
    pub augment_dim: usize,
    pub tau: Option<f64>,
    pub net: Option<MlpSpec>,
    /// History ODE network (node_plus_ndde only).
    pub init_net: Option<MlpSpec>,
    pub r: Option<f64>,
    pub delay_input: DelayInput,
}

impl FieldSpec {
    fn base(kind: ModelKind, state_dim: usize) -> Self {
        FieldSpec {
            kind,
            state_dim,
            augment_dim: 0,
            tau: None,
            net: None,
            init_net: None,
            r: None,
            delay_input: if kind.is_delayed() {
                DelayInput::Concat
            } else {
                DelayInput::Current
            },
        }
    }

    pub fn node(net: MlpSpec) -> Self {
        FieldSpec {
            net: Some(net.clone()),
            ..FieldSpec::base(ModelKind::Node, net.output_dim())
        }
    }

    pub fn anode(data_dim: usize, augment_dim: usize, net: MlpSpec) -> Self {
        FieldSpec {
            augment_dim,
            net: Some(net),
            ..FieldSpec::base(ModelKind::Anode, data_dim)
        }
    }

    pub fn ndde(net: MlpSpec, tau: f64, delay_input: DelayInput) -> Self {
        FieldSpec {
            tau: Some(tau),
            net: Some(net.clone()),
            delay_input,
            ..FieldSpec::base(ModelKind::Ndde, net.output_dim())
        }
    }

    pub fn node_plus_ndde(net: MlpSpec, init_net: MlpSpec, tau: f64, delay_input: DelayInput) -> Self {
        FieldSpec {
            tau: Some(tau),
            net: Some(net.clone()),
            init_net: Some(init_net),
            delay_input,
            ..FieldSpec::base(ModelKind::NodePlusNdde, net.output_dim())
        }
    }

    pub fn analytic_annulus(dim: usize, r: f64, tau: f64) -> Self {
        FieldSpec {
            tau: Some(tau),
            r: Some(r),
            delay_input: DelayInput::DelayedOnly,
            ..FieldSpec::base(ModelKind::AnalyticAnnulus, dim)
        }
    }

    /// `G` is the network; `tau` is the horizon `T`.
    pub fn universal(net: MlpSpec, t: f64) -> Self {
        FieldSpec {
            tau: Some(t),
            net: Some(net.clone()),
            delay_input: DelayInput::DelayedOnly,
            ..FieldSpec::base(ModelKind::Universal, net.output_dim())
        }
    }

    /// Dimension of the integrated state.
    pub fn effective_dim(&self) -> usize {
        self.state_dim + self.augment_dim
    }

    fn need_net(&self) -> Result<&MlpSpec> {
        self.net
            .as_ref()
            .ok_or_else(|| Error::config(format!("model kind {} needs a network", self.kind)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim must be positive"));
        }
        if (self.kind == ModelKind::Anode) != (self.augment_dim > 0) {
            return Err(Error::config("augment_dim must be positive exactly for anode models"));
        }
        if self.kind.is_delayed() {
            match self.tau {
                Some(t) if t > 0.0 => {}
                _ => return Err(Error::config(format!("model kind {} needs a positive tau", self.kind))),
            }
        }
        if self.init_net.is_some() != (self.kind == ModelKind::NodePlusNdde) {
            return Err(Error::config("init_net is required for, and only for, node_plus_ndde"));
        }
        let d = self.effective_dim();
        let expect_input = match self.kind {
            ModelKind::Node | ModelKind::Anode => {
                if self.delay_input != DelayInput::Current {
                    return Err(Error::config("delay-free models read only the current state"));
                }
                d
            }
            ModelKind::Ndde | ModelKind::NodePlusNdde => {
                if self.delay_input == DelayInput::Current {
                    return Err(Error::config("ndde models must read the delayed state"));
                }
                self.delay_input.net_input_dim(d)
            }
            ModelKind::Universal => d,
            ModelKind::AnalyticAnnulus => {
                match self.r {
                    Some(r) if r > 0.0 => {}
                    _ => return Err(Error::config("analytic_annulus needs r > 0")),
                }
                return Ok(());
            }
        };
        let net = self.need_net()?;
        net.validate()?;
        dims("network input", expect_input, net.input_dim())?;
        dims("network output", d, net.output_dim())?;
        if let Some(init) = &self.init_net {
            init.validate()?;
            dims("init_net input", self.state_dim, init.input_dim())?;
            dims("init_net output", self.state_dim, init.output_dim())?;
        }
        Ok(())
    }
}

fn dims(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{context} dimension is {actual}, expected {expected}"
        )))
    }
}

/// A realised field spec: the main field, plus the history ODE for
/// node_plus_ndde models.
#[derive(Clone)]
pub struct Model {
    spec: FieldSpec,
    field: Arc<dyn VectorField>,
    init_field: Option<Arc<dyn VectorField>>,
    main_params: usize,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

/// Builds the model and its initial parameters. Main parameters come first,
/// then the history network's.
pub fn make_field(spec: &FieldSpec, seed: u64) -> Result<(Model, ParamVector)> {
    spec.validate()?;
    let (field, mut params): (Arc<dyn VectorField>, ParamVector) = match spec.kind {
        ModelKind::AnalyticAnnulus => {
            let mut manifest = Manifest {
                seed: Some(seed),
                ..Manifest::default()
            };
            manifest.push("r", BlockLayout::Raw(1));
            (
                Arc::new(AnnulusField::new(spec.state_dim)),
                ParamVector::new(vec![spec.r.unwrap_or_default()], manifest)?,
            )
        }
        ModelKind::Universal => {
            let net = Mlp::new(spec.need_net()?.clone())?;
            (Arc::new(UniversalField::new(net)), mlp_init(spec.need_net()?, seed)?)
        }
        _ => {
            let net = Mlp::new(spec.need_net()?.clone())?;
            (
                Arc::new(NetField::new(net, spec.delay_input)?),
                mlp_init(spec.need_net()?, seed)?,
            )
        }
    };
    let main_params = params.len();
    let init_field: Option<Arc<dyn VectorField>> = match &spec.init_net {
        Some(init) => {
            let p = mlp_init(init, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?.renamed("init_net");
            params = params.concat(p);
            Some(Arc::new(NetField::new(Mlp::new(init.clone())?, DelayInput::Current)?))
        }
        None => None,
    };
    Ok((
        Model {
            spec: spec.clone(),
            field,
            init_field,
            main_params,
        },
        params,
    ))
}

impl Model {
    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn field(&self) -> &dyn VectorField {
        self.field.as_ref()
    }

    pub fn field_arc(&self) -> Arc<dyn VectorField> {
        Arc::clone(&self.field)
    }

    /// Dimension of the integrated state.
    pub fn dim(&self) -> usize {
        self.spec.effective_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn tau(&self) -> Option<f64> {
        self.spec.tau
    }

    pub fn param_count(&self) -> usize {
        self.main_params + self.init_field.as_ref().map_or(0, |f| f.param_count())
    }

    /// `(main, history network)` parameter slices.
    pub fn split_params<'a>(&self, w: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        w.split_at(self.main_params)
    }

    /// Pads a data point with the zero augmentation.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("model input", self.spec.state_dim, x.len())?;
        let mut v = x.to_vec();
        v.resize(self.dim(), 0.0);
        Ok(v)
    }

    /// The history the model uses for input `x`.
    pub fn history(&self, w: &[f64], x: &[f64]) -> Result<History> {
        check_len("model parameters", self.param_count(), w.len())?;
        match &self.init_field {
            Some(init) => Ok(History::OdeDriven(OdeHistory {
                field: Arc::clone(init),
                params: self.split_params(w).1.to_vec(),
                seed: x.to_vec(),
                span: self.spec.tau.unwrap_or_default(),
            })),
            None => Ok(History::Constant(self.embed(x)?)),
        }
    }

    /// Forward solve from input `x` over `grid`.
    pub fn forward(&self, w: &[f64], x: &[f64], grid: Grid, method: Method) -> Result<Trajectory> {
        let history = self.history(w, x)?;
        self.forward_from(w, &history, grid, method)
    }

    /// Forward solve from an explicit history (delay-free models use φ(0)).
    pub fn forward_from(&self, w: &[f64], history: &History, grid: Grid, method: Method) -> Result<Trajectory> {
        check_len("model parameters", self.param_count(), w.len())?;
        let main = self.split_params(w).0;
        match self.spec.tau {
            Some(tau) if self.spec.kind.is_delayed() => integrate_dde(self.field(), main, history, tau, grid, method),
            _ => {
                let x0 = match history {
                    History::Constant(x) => x.clone(),
                    History::Tabulated(t) => t.rows.last().cloned().unwrap_or_default(),
                    History::OdeDriven(_) => {
                        return Err(Error::config("delay-free models take a constant initial state"))
                    }
                };
                integrate_ode(self.field(), main, &x0, grid, method)
            }
        }
    }

    /// Dense backward pass. `w_grad` covers all parameters in model order
    /// and `input_grad` is w.r.t. the embedded input.
    pub fn backward(
        &self,
        w: &[f64],
        forward: &Trajectory,
        loss: &ObservationLoss,
        method: Method,
    ) -> Result<GradientBundle> {
        let main = self.split_params(w).0;
        match self.spec.tau {
            Some(tau) if self.spec.kind.is_delayed() => {
                let mut g = gradient_dense(self.field(), main, forward, tau, loss, method)?;
                if self.init_field.is_some() {
                    g.w_grad.append(&mut g.history_param_grad);
                }
                Ok(g)
            }
            _ => {
                let a = node_adjoint(self.field(), main, forward, loss, method)?;
                Ok(GradientBundle {
                    w_grad: a.w_grad,
                    lambda0: a.x0_grad.clone(),
                    input_grad: a.x0_grad,
                    history_param_grad: Vec::new(),
                    diagnostics: Diagnostics {
                        reconstruction_error: 0.0,
                        adjoint_sup_norm: a.lambdas.iter().fold(0.0, |m, v| m.max(v.abs())),
                    },
                })
            }
        }
    }

    /// Checkpointed forward and backward over `[0, nτ]`. Returns the
    /// checkpoints `h(0), …, h(nτ)` and the gradients.
    pub fn gradient_piecewise(
        &self,
        w: &[f64],
        history: &History,
        step: f64,
        n_segments: usize,
        loss: &ObservationLoss,
        method: Method,
    ) -> Result<(Vec<Vec<f64>>, GradientBundle)> {
        let tau = match self.spec.tau {
            Some(t) if self.spec.kind.is_delayed() => t,
            _ => return Err(Error::config("piecewise gradients need a delayed model")),
        };
        let main = self.split_params(w).0;
        let st = integrate_stacked(self.field(), main, history, tau, step, n_segments, method, false)?;
        let mut g = grad_piecewise(
            self.field(),
            main,
            history,
            tau,
            step,
            n_segments,
            &st.checkpoints,
            loss,
            method,
        )?;
        if self.init_field.is_some() {
            g.w_grad.append(&mut g.history_param_grad);
        }
        Ok((st.checkpoints, g))
    }
}

/// The analytic annulus field and its parameter `[r]`.
pub fn analytic_annulus_field(r: f64, dim: usize) -> Result<(AnnulusField, Vec<f64>)> {
    if dim == 0 || !(r > 0.0) {
        return Err(Error::config(format!(
            "annulus field needs dim ≥ 1 and r > 0, got {dim}, {r}"
        )));
    }
    Ok((AnnulusField::new(dim), vec![r]))
}

/// The delay field `f(h, y) = G(y)`, to be run with `τ = T`.
pub fn universal_construct<M: StateMap>(g: M, t: f64) -> Result<(UniversalField<M>, f64)> {
    if !(t > 0.0) {
        return Err(Error::config(format!("horizon must be positive, got {t}")));
    }
    Ok((UniversalField::new(g), t))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReadoutHead {
    Identity,
    /// `W·x + b`, parameters row-major `W` then `b`.
    Linear {
        in_dim: usize,
        out_dim: usize,
        params: Vec<f64>,
    },
    ProjectFirst(usize),
}

impl ReadoutHead {
    pub fn linear(in_dim: usize, out_dim: usize, params: Vec<f64>) -> Result<Self> {
        check_len("linear readout parameters", out_dim * (in_dim + 1), params.len())?;
        Ok(ReadoutHead::Linear {
            in_dim,
            out_dim,
            params,
        })
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            ReadoutHead::Identity => in_dim,
            ReadoutHead::Linear { out_dim, .. } => *out_dim,
            ReadoutHead::ProjectFirst(k) => *k,
        }
    }
}

pub fn readout(head: &ReadoutHead, state: &[f64]) -> Result<Vec<f64>> {
    match head {
        ReadoutHead::Identity => Ok(state.to_vec()),
        ReadoutHead::ProjectFirst(k) => {
            if *k > state.len() {
                return Err(Error::shape("projection readout", *k, state.len()));
            }
            Ok(state[..*k].to_vec())
        }
        ReadoutHead::Linear {
            in_dim,
            out_dim,
            params,
        } => {
            check_len("linear readout input", *in_dim, state.len())?;
            let (m, b) = params.split_at(in_dim * out_dim);
            Ok((0..*out_dim)
                .map(|i| b[i] + (0..*in_dim).map(|j| m[i * in_dim + j] * state[j]).sum::<f64>())
                .collect())
        }
    }
}

/// Pulls an output covector back through the head to the state.
pub fn readout_vjp(head: &ReadoutHead, state_dim: usize, v: &[f64]) -> Result<Vec<f64>> {
    check_len("readout covector", head.out_dim(state_dim), v.len())?;
    match head {
        ReadoutHead::Identity => Ok(v.to_vec()),
        ReadoutHead::ProjectFirst(_) => {
            let mut g = v.to_vec();
            g.resize(state_dim, 0.0);
            Ok(g)
        }
        ReadoutHead::Linear {
            in_dim,
            out_dim,
            params,
        } => {
            check_len("linear readout input", *in_dim, state_dim)?;
            Ok((0..*in_dim)
                .map(|j| (0..*out_dim).map(|i| params[i * in_dim + j] * v[i]).sum())
                .collect())
        }
    }
}

#[cfg(test)]
mod tests;
