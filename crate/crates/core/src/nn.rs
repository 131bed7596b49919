//! Dense multilayer perceptrons with exact vector-Jacobian products.
//!
//! Parameters live in one flat `f64` slice. Each layer stores its weight
//! matrix row-major (`d_out × d_in`) followed by its bias when enabled.
//! The activation is applied after every layer except the last.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Derivative taken as 0 at exactly 0.
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Architecture of a dense network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// One flag per layer (`layer_dims.len() - 1` entries).
    pub bias: Vec<bool>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, bias: bool) -> Result<Self> {
        let layers = layer_dims.len().saturating_sub(1);
        let spec = MlpSpec {
            layer_dims,
            activation,
            bias: vec![bias; layers],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::config(format!(
                "network needs at least an input and an output dimension, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::config(format!(
                "network dimensions must be positive, got {:?}",
                self.layer_dims
            )));
        }
        if self.bias.len() != self.layer_dims.len() - 1 {
            return Err(Error::config(format!(
                "expected {} bias flags, got {}",
                self.layer_dims.len() - 1,
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .zip(&self.bias)
            .map(|(w, &b)| w[1] * w[0] + if b { w[1] } else { 0 })
            .sum()
    }

    /// Per-layer (weight offset, bias offset) into the flat parameter slice.
    fn offsets(&self) -> Vec<(usize, Option<usize>)> {
        let mut out = Vec::with_capacity(self.n_layers());
        let mut at = 0;
        for (w, &b) in self.layer_dims.windows(2).zip(&self.bias) {
            let weights = at;
            at += w[0] * w[1];
            let bias = if b {
                let o = at;
                at += w[1];
                Some(o)
            } else {
                None
            };
            out.push((weights, bias));
        }
        out
    }
}

/// Layout of one contiguous block inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub enum BlockLayout {
    Mlp(MlpSpec),
    Raw(usize),
}

impl BlockLayout {
    pub fn len(&self) -> usize {
        match self {
            BlockLayout::Mlp(spec) => spec.param_count(),
            BlockLayout::Raw(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub layout: BlockLayout,
}

/// Shape manifest for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub blocks: Vec<ParamBlock>,
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.layout.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, name: impl Into<String>, layout: BlockLayout) {
        let offset = self.len();
        self.blocks.push(ParamBlock {
            name: name.into(),
            offset,
            layout,
        });
    }
}

/// All learnable weights of a model, flat, with their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    manifest: Manifest,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, manifest: Manifest) -> Result<Self> {
        check_len("parameter vector", manifest.len(), values.len())?;
        Ok(ParamVector { values, manifest })
    }

    pub fn raw(name: &str, values: Vec<f64>) -> Self {
        let mut manifest = Manifest::default();
        manifest.push(name, BlockLayout::Raw(values.len()));
        ParamVector { values, manifest }
    }

    pub fn zeros(manifest: Manifest) -> Self {
        ParamVector {
            values: vec![0.0; manifest.len()],
            manifest,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A vector with the same manifest and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values, self.manifest.clone())
    }

    /// Appends `other`'s blocks after this vector's.
    pub fn concat(mut self, other: ParamVector) -> Self {
        for block in other.manifest.blocks {
            self.manifest.push(block.name, block.layout);
        }
        self.values.extend(other.values);
        self
    }

    /// Renames every block; meant for single-block vectors.
    pub fn renamed(mut self, name: &str) -> Self {
        for b in &mut self.manifest.blocks {
            b.name = name.to_string();
        }
        self
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.manifest
            .blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.offset..b.offset + b.layout.len()])
    }

    /// Splits into per-block vectors (the inverse of [`ParamVector::concat`]).
    pub fn split(&self) -> Vec<ParamVector> {
        self.manifest
            .blocks
            .iter()
            .map(|b| {
                let mut m = Manifest {
                    seed: self.manifest.seed,
                    ..Manifest::default()
                };
                m.push(b.name.clone(), b.layout.clone());
                ParamVector {
                    values: self.values[b.offset..b.offset + b.layout.len()].to_vec(),
                    manifest: m,
                }
            })
            .collect()
    }
}

const PARAMS_MAGIC: &str = "format=ndde-params-v1";

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad {what} entry '{v}'")))
        })
        .collect()
}

impl ParamVector {
    /// Text header of `key=value` lines closed by `end`, then the values as
    /// little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{PARAMS_MAGIC}\n");
        if let Some(seed) = self.manifest.seed {
            head += &format!("seed={seed}\n");
        }
        for b in &self.manifest.blocks {
            match &b.layout {
                BlockLayout::Mlp(s) => {
                    let bias: Vec<u8> = s.bias.iter().map(|&x| x as u8).collect();
                    head += &format!(
                        "block={};mlp;dims={};activation={};bias={}\n",
                        b.name,
                        join(&s.layer_dims),
                        s.activation,
                        join(&bias)
                    );
                }
                BlockLayout::Raw(n) => head += &format!("block={};raw;len={n}\n", b.name),
            }
        }
        head += &format!("count={}\nend\n", self.values.len());
        let mut out = head.into_bytes();
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const END: &[u8] = b"\nend\n";
        let split = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| Error::Parse("parameter file has no header terminator".into()))?;
        let head =
            std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Parse("parameter header is not UTF-8".into()))?;
        let blob = &bytes[split + END.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(PARAMS_MAGIC) {
            return Err(Error::Parse("not an ndde parameter file".into()));
        }
        let mut manifest = Manifest::default();
        let mut count = None;
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header line '{line}'")))?;
            match key {
                "seed" => manifest.seed = Some(value.parse().map_err(|_| Error::Parse(format!("bad seed '{value}'")))?),
                "count" => {
                    count = Some(
                        value
                            .parse::<usize>()
                            .map_err(|_| Error::Parse(format!("bad count '{value}'")))?,
                    )
                }
                "block" => {
                    let fields: Vec<&str> = value.split(';').collect();
                    let field = |k: &str| {
                        fields
                            .iter()
                            .find_map(|f| f.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                            .ok_or_else(|| Error::Parse(format!("block line '{line}' lacks {k}")))
                    };
                    let layout = match fields.get(1).copied() {
                        Some("mlp") => {
                            let bias: Vec<u8> = parse_list(field("bias")?, "bias")?;
                            BlockLayout::Mlp(MlpSpec {
                                layer_dims: parse_list(field("dims")?, "dims")?,
                                activation: field("activation")?.parse()?,
                                bias: bias.into_iter().map(|b| b != 0).collect(),
                            })
                        }
                        Some("raw") => BlockLayout::Raw(
                            field("len")?
                                .parse()
                                .map_err(|_| Error::Parse(format!("bad len in '{line}'")))?,
                        ),
                        _ => return Err(Error::Parse(format!("unknown block layout in '{line}'"))),
                    };
                    if let BlockLayout::Mlp(s) = &layout {
                        s.validate()?;
                    }
                    manifest.push(fields[0], layout);
                }
                other => return Err(Error::Parse(format!("unknown header key '{other}'"))),
            }
        }
        let count = count.ok_or_else(|| Error::Parse("parameter header lacks count".into()))?;
        check_len("parameter manifest", count, manifest.len())?;
        check_len("parameter blob bytes", count * 8, blob.len())?;
        let values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ParamVector::new(values, manifest)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        ParamVector::from_bytes(&std::fs::read(path)?)
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) weights, zero biases.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    for ((weights, _), w) in spec.offsets().into_iter().zip(spec.layer_dims.windows(2)) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        for v in &mut values[weights..weights + w[0] * w[1]] {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    let mut manifest = Manifest {
        seed: Some(seed),
        ..Manifest::default()
    };
    manifest.push("net", BlockLayout::Mlp(spec.clone()));
    ParamVector::new(values, manifest)
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static TAPE: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// A validated network, cheap to clone.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    offsets: Vec<(usize, Option<usize>)>,
    n_params: usize,
    /// Sum of layer dims excluding the input.
    n_units: usize,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let offsets = spec.offsets();
        let n_params = spec.param_count();
        let n_units = spec.layer_dims[1..].iter().sum();
        Ok(Mlp {
            spec,
            offsets,
            n_params,
            n_units,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn forward(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len("network parameters", self.n_params, w.len())?;
        check_len("network input", self.input_dim(), x.len())?;
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(w, x, &mut out);
        Ok(out)
    }

    /// Returns `(x_grad, w_grad)` for the covector `v`.
    pub fn vjp(&self, w: &[f64], x: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("network parameters", self.n_params, w.len())?;
        check_len("network input", self.input_dim(), x.len())?;
        check_len("network covector", self.output_dim(), v.len())?;
        let mut xg = vec![0.0; self.input_dim()];
        let mut wg = vec![0.0; self.n_params];
        self.vjp_acc(w, x, v, &mut xg, &mut wg);
        Ok((xg, wg))
    }

    /// Unchecked forward pass into `out`.
    pub fn forward_into(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        SCRATCH.with(|s| {
            let mut s = s.borrow_mut();
            s.resize(2 * self.n_units, 0.0);
            let (z, a) = s.split_at_mut(self.n_units);
            self.run(w, x, z, a);
            out.copy_from_slice(&a[self.n_units - self.output_dim()..]);
        });
    }

    /// Unchecked VJP; adds into `x_grad` and `w_grad`.
    pub fn vjp_acc(&self, w: &[f64], x: &[f64], v: &[f64], x_grad: &mut [f64], w_grad: &mut [f64]) {
        TAPE.with(|t| {
            let mut tape = t.borrow_mut();
            tape.resize(self.tape_len(), 0.0);
            self.forward_taped(w, x, &mut tape);
            self.backprop(w, x, &tape, v, x_grad, w_grad);
        });
    }

    /// Length of the activation record kept by [`Mlp::forward_taped`].
    pub fn tape_len(&self) -> usize {
        2 * self.n_units
    }

    /// Forward pass keeping pre-activations and activations in `tape`; the
    /// output is the tape's tail.
    pub fn forward_taped<'t>(&self, w: &[f64], x: &[f64], tape: &'t mut [f64]) -> &'t [f64] {
        let (z, a) = tape.split_at_mut(self.n_units);
        self.run(w, x, z, a);
        &a[self.n_units - self.output_dim()..]
    }

    /// Reverse pass over a tape written by [`Mlp::forward_taped`] at `(w, x)`.
    pub fn backprop(&self, w: &[f64], x: &[f64], tape: &[f64], v: &[f64], x_grad: &mut [f64], w_grad: &mut [f64]) {
        let (z, a) = tape.split_at(self.n_units);
        SCRATCH.with(|s| {
            let mut s = s.borrow_mut();
            let max_dim = *self.spec.layer_dims.iter().max().unwrap();
            s.resize(2 * max_dim, 0.0);
            let (delta, next) = s.split_at_mut(max_dim);

            let dims = &self.spec.layer_dims;
            let n_layers = self.spec.n_layers();
            let d_last = self.output_dim();
            delta[..d_last].copy_from_slice(v);
            let mut unit_end = self.n_units;
            for l in (0..n_layers).rev() {
                let (d_in, d_out) = (dims[l], dims[l + 1]);
                let unit_start = unit_end - d_out;
                if l + 1 < n_layers {
                    for j in 0..d_out {
                        delta[j] *= self.spec.activation.derivative(z[unit_start + j], a[unit_start + j]);
                    }
                }
                let input: &[f64] = if l == 0 { x } else { &a[unit_start - d_in..unit_start] };
                let (wo, bo) = self.offsets[l];
                if let Some(bo) = bo {
                    for j in 0..d_out {
                        w_grad[bo + j] += delta[j];
                    }
                }
                for j in 0..d_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    let row = &mut w_grad[wo + j * d_in..wo + (j + 1) * d_in];
                    for (g, &xi) in row.iter_mut().zip(input) {
                        *g += dj * xi;
                    }
                }
                let prop = &mut next[..d_in];
                prop.fill(0.0);
                for j in 0..d_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    let row = &w[wo + j * d_in..wo + (j + 1) * d_in];
                    for (p, &wij) in prop.iter_mut().zip(row) {
                        *p += dj * wij;
                    }
                }
                if l == 0 {
                    for (g, &p) in x_grad.iter_mut().zip(prop.iter()) {
                        *g += p;
                    }
                } else {
                    delta[..d_in].copy_from_slice(prop);
                }
                unit_end = unit_start;
            }
        });
    }

    /// Fills pre-activations `z` and activations `a`, layer after layer.
    fn run(&self, w: &[f64], x: &[f64], z: &mut [f64], a: &mut [f64]) {
        let dims = &self.spec.layer_dims;
        let n_layers = self.spec.n_layers();
        let mut unit = 0;
        for l in 0..n_layers {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let (wo, bo) = self.offsets[l];
            let (prev, cur) = a.split_at_mut(unit);
            let input: &[f64] = if l == 0 { x } else { &prev[unit - d_in..] };
            for j in 0..d_out {
                let row = &w[wo + j * d_in..wo + (j + 1) * d_in];
                let mut acc = bo.map_or(0.0, |b| w[b + j]);
                for (&wij, &xi) in row.iter().zip(input) {
                    acc += wij * xi;
                }
                z[unit + j] = acc;
                cur[j] = if l + 1 < n_layers {
                    self.spec.activation.apply(acc)
                } else {
                    acc
                };
            }
            unit += d_out;
        }
    }
}

/// Checked forward evaluation.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    Mlp::new(spec.clone())?.forward(params.values(), x)
}

/// Checked reverse-mode product `vᵀ·∂out/∂(x, w)`.
pub fn mlp_vjp(spec: &MlpSpec, params: &ParamVector, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, ParamVector)> {
    let (xg, wg) = Mlp::new(spec.clone())?.vjp(params.values(), x, v)?;
    Ok((xg, params.with_values(wg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_net(dims: &[usize]) -> MlpSpec {
        MlpSpec::new(dims.to_vec(), Activation::Tanh, true).unwrap()
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh, true).is_err());
        assert!(MlpSpec::new(vec![], Activation::Tanh, true).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1], Activation::Tanh, true).is_err());
    }

    #[test]
    fn scalar_linear_init_is_bounded_and_deterministic() {
        let spec = tanh_net(&[1, 1]);
        let a = mlp_init(&spec, 11).unwrap();
        let b = mlp_init(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.values()[0].abs() <= 1.0);
        assert_eq!(a.values()[1], 0.0);
        assert_ne!(mlp_init(&spec, 12).unwrap().values(), a.values());
    }

    #[test]
    fn param_count_matches_manifest_formula() {
        let spec = tanh_net(&[2, 32, 32, 2]);
        assert_eq!(spec.param_count(), 2 * 32 + 32 + 32 * 32 + 32 + 32 * 2 + 2);
        assert_eq!(spec.param_count(), 1218);
        assert_eq!(mlp_init(&spec, 0).unwrap().len(), 1218);
        let no_bias = MlpSpec::new(vec![2, 10, 2], Activation::Tanh, false).unwrap();
        assert_eq!(no_bias.param_count(), 40);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = tanh_net(&[3, 5, 2]);
        let p = ParamVector::zeros(mlp_init(&spec, 0).unwrap().manifest().clone());
        let y = mlp_forward(&spec, &p, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = tanh_net(&[2, 2]);
        let p = mlp_init(&spec, 0)
            .unwrap()
            .with_values(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(mlp_forward(&spec, &p, &[0.25, -3.0]).unwrap(), vec![0.25, -3.0]);
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        // 2 -> 3 -> 1 tanh, evaluated below with explicit matrix products.
        let spec = tanh_net(&[2, 3, 1]);
        let w1 = [[0.5, -0.2], [0.1, 0.3], [-0.7, 0.4]];
        let b1 = [0.05, -0.1, 0.2];
        let w2 = [0.3, -0.6, 0.9];
        let b2 = 0.01;
        let mut flat = Vec::new();
        for row in &w1 {
            flat.extend_from_slice(row);
        }
        flat.extend_from_slice(&b1);
        flat.extend_from_slice(&w2);
        flat.push(b2);
        let p = mlp_init(&spec, 0).unwrap().with_values(flat).unwrap();
        let x = [0.8, -1.3];
        let hidden: Vec<f64> = (0..3)
            .map(|i| (w1[i][0] * x[0] + w1[i][1] * x[1] + b1[i]).tanh())
            .collect();
        let expected = w2[0] * hidden[0] + w2[1] * hidden[1] + w2[2] * hidden[2] + b2;
        let y = mlp_forward(&spec, &p, &x).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let spec = tanh_net(&[2, 3, 1]);
        let p = mlp_init(&spec, 0).unwrap();
        assert!(matches!(mlp_forward(&spec, &p, &[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            mlp_vjp(&spec, &p, &[1.0, 2.0], &[1.0, 1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn linear_layer_vjp_is_transpose() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh, false).unwrap();
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = mlp_init(&spec, 0).unwrap().with_values(w).unwrap();
        let (xg, wg) = mlp_vjp(&spec, &p, &[0.1, 0.2, 0.3], &[1.0, -1.0]).unwrap();
        assert_eq!(xg, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
        assert_eq!(wg.values(), &[0.1, 0.2, 0.3, -0.1, -0.2, -0.3]);
        let (xg0, wg0) = mlp_vjp(&spec, &p, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(xg0.iter().chain(wg0.values()).all(|&g| g == 0.0));
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], eps: f64) -> Vec<f64> {
        let mut probe = at.to_vec();
        (0..at.len())
            .map(|i| {
                probe[i] = at[i] + eps;
                let up = f(&probe);
                probe[i] = at[i] - eps;
                let down = f(&probe);
                probe[i] = at[i];
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let spec = tanh_net(&[2, 10, 2]);
        let net = Mlp::new(spec.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..spec.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = [0.4, -0.7];
        let v = [0.9, -0.3];
        let (xg, wg) = net.vjp(&w, &x, &v).unwrap();
        let dot = |y: Vec<f64>| y[0] * v[0] + y[1] * v[1];
        let fd_x = central_diff(|xx| dot(net.forward(&w, xx).unwrap()), &x, 1e-6);
        let fd_w = central_diff(|ww| dot(net.forward(ww, &x).unwrap()), &w, 1e-6);
        for (a, b) in xg.iter().zip(&fd_x).chain(wg.iter().zip(&fd_w)) {
            if a.abs().max(b.abs()) > 1e-8 {
                assert!(rel_err(*a, *b) < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn relu_vjp_matches_finite_differences_off_kinks() {
        let spec = MlpSpec::new(vec![2, 8, 8, 2], Activation::Relu, true).unwrap();
        let net = Mlp::new(spec.clone()).unwrap();
        let mut w = mlp_init(&spec, 3).unwrap().into_values();
        // nonzero biases so hidden units sit away from the kink
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in w.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let x = [0.6, -0.2];
        let v = [1.0, 0.5];
        let (xg, _) = net.vjp(&w, &x, &v).unwrap();
        let fd = central_diff(
            |xx| {
                let y = net.forward(&w, xx).unwrap();
                y[0] * v[0] + y[1] * v[1]
            },
            &x,
            1e-7,
        );
        for (a, b) in xg.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn split_and_concat_are_inverse() {
        let a = mlp_init(&tanh_net(&[2, 3, 2]), 1).unwrap();
        let b = ParamVector::raw("r", vec![0.75]);
        let joined = a.clone().concat(b.clone());
        assert_eq!(joined.len(), a.len() + 1);
        assert_eq!(joined.block("r"), Some(&[0.75][..]));
        let parts = joined.split();
        assert_eq!(parts[0].values(), a.values());
        assert_eq!(parts[1].values(), b.values());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn vjp_is_linear_in_the_covector(
                seed in 0u64..1000,
                a in -2.0f64..2.0,
                b in -2.0f64..2.0,
                v1 in proptest::collection::vec(-1.0f64..1.0, 3),
                v2 in proptest::collection::vec(-1.0f64..1.0, 3),
                x in proptest::collection::vec(-1.0f64..1.0, 4),
            ) {
                let spec = tanh_net(&[4, 6, 3]);
                let net = Mlp::new(spec.clone()).unwrap();
                let w = mlp_init(&spec, seed).unwrap().into_values();
                let mix: Vec<f64> = v1.iter().zip(&v2).map(|(p, q)| a * p + b * q).collect();
                let (xm, wm) = net.vjp(&w, &x, &mix).unwrap();
                let (x1, w1) = net.vjp(&w, &x, &v1).unwrap();
                let (x2, w2) = net.vjp(&w, &x, &v2).unwrap();
                for i in 0..xm.len() {
                    prop_assert!((xm[i] - (a * x1[i] + b * x2[i])).abs() < 1e-12);
                }
                for i in 0..wm.len() {
                    prop_assert!((wm[i] - (a * w1[i] + b * w2[i])).abs() < 1e-12);
                }
            }

            #[test]
            fn forward_is_deterministic(seed in 0u64..1000, x in proptest::collection::vec(-1.0f64..1.0, 2)) {
                let spec = tanh_net(&[2, 5, 2]);
                let net = Mlp::new(spec.clone()).unwrap();
                let w = mlp_init(&spec, seed).unwrap().into_values();
                let y1 = net.forward(&w, &x).unwrap();
                let y2 = net.forward(&w, &x).unwrap();
                prop_assert_eq!(y1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                y2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn param_file_round_trips_bitwise() {
        let a = mlp_init(&tanh_net(&[2, 10, 2]), 4).unwrap();
        let mut relu = MlpSpec::new(vec![1, 3, 1], Activation::Relu, true).unwrap();
        relu.bias[1] = false;
        let p = a
            .concat(mlp_init(&relu, 1).unwrap().renamed("init_net"))
            .concat(ParamVector::raw("r", vec![f64::MIN_POSITIVE, -0.0]));
        let back = ParamVector::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back.manifest(), p.manifest());
        let bits = |v: &ParamVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&p));
        let head = String::from_utf8_lossy(&p.to_bytes()[..120]).into_owned();
        assert!(head.starts_with("format=ndde-params-v1\nseed=4\nblock=net;mlp;dims=2,10,2;activation=tanh;bias=1,1\n"));
    }

    #[test]
    fn param_file_rejects_damage() {
        let bytes = mlp_init(&tanh_net(&[2, 3, 1]), 0).unwrap().to_bytes();
        assert!(ParamVector::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(ParamVector::from_bytes(&bytes[1..]).is_err());
        let at = bytes.windows(8).position(|w| w == b"count=13").unwrap();
        let mut bad = bytes.clone();
        bad[at + 7] = b'2';
        assert!(matches!(ParamVector::from_bytes(&bad), Err(Error::Shape { .. })));
    }
}
