//! Minimal time-conditioned MLP with reverse-mode gradients.
//!
//! The network maps `[x, emb(t)]` to an output vector, where `emb(t)` are
//! sinusoidal features of `ln(t + 1e-8)`. Dropout follows every hidden
//! activation; its mask is a pure hash of `(ctx seed, row, layer, unit)`, so
//! two calls sharing a [`ForwardCtx`] see the same mask regardless of `t`.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::linalg::{gemm, View};
use crate::rng::{self, stage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Silu,
            time_embed_dim: 16,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be >= 1".to_string());
        }
        if self.output_dim == 0 {
            problems.push("output_dim must be >= 1".to_string());
        }
        if self.time_embed_dim == 0 {
            problems.push("time_embed_dim must be >= 1".to_string());
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            problems.push(format!("hidden_dims[{i}] must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named slices of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    slots: Vec<Slot>,
    len: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let slots = entries
            .into_iter()
            .map(|(name, shape)| {
                let slot = Slot {
                    name: name.into(),
                    offset,
                    shape,
                };
                offset += slot.len();
                slot
            })
            .collect();
        Self { slots, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn get(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// Flat network parameters plus the layout describing them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector of length {} does not match layout length {}",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
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

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .get(name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter layouts differ".into()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-call forward options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardCtx {
    pub dropout_seed: u64,
    pub train_mode: bool,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            dropout_seed: 0,
            train_mode: false,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            dropout_seed,
            train_mode: true,
        }
    }
}

const LOG_T_SHIFT: f64 = 1e-8;
const FREQ_MIN: f64 = 0.5;
const FREQ_MAX: f64 = 8.0;

/// Sinusoidal features of `ln(t + 1e-8) / 4` at geometrically spaced frequencies.
pub fn time_features(t: f64, out: &mut [f64]) {
    let u = (t + LOG_T_SHIFT).ln() * 0.25;
    let pairs = out.len().div_ceil(2);
    for (j, o) in out.iter_mut().enumerate() {
        let k = j / 2;
        let freq = if pairs <= 1 {
            FREQ_MIN
        } else {
            FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(k as f64 / (pairs - 1) as f64)
        };
        *o = if j % 2 == 0 {
            (freq * u).sin()
        } else {
            (freq * u).cos()
        };
    }
}

#[derive(Clone, Debug)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w_offset: usize,
    b_offset: usize,
}

/// Activations retained by a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    rows: usize,
    // input to each dense layer, rows × fan_in
    inputs: Vec<Vec<f64>>,
    // pre-activations of hidden layers
    pre: Vec<Vec<f64>>,
    // per hidden layer: 0 or 1/(1-p); empty when dropout is inactive
    masks: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Dropout multipliers per hidden layer (`rows × width`, row-major).
    pub fn dropout_masks(&self) -> &[Vec<f64>] {
        &self.masks
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: NetSpec,
    layers: Vec<Dense>,
    layout: Arc<Layout>,
}

impl Mlp {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input_dim + spec.time_embed_dim];
        widths.extend_from_slice(&spec.hidden_dims);
        widths.push(spec.output_dim);
        let mut entries = Vec::new();
        let mut layers = Vec::new();
        let mut offset = 0;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            entries.push((format!("dense{l}.weight"), vec![fan_out, fan_in]));
            entries.push((format!("dense{l}.bias"), vec![fan_out]));
            layers.push(Dense {
                fan_in,
                fan_out,
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            spec,
            layers,
            layout: Arc::new(Layout::new(entries)),
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(seed, stage::INIT, 0);
        let mut values = vec![0.0; self.layout.len()];
        for d in &self.layers {
            let bound = 1.0 / (d.fan_in as f64).sqrt();
            for v in &mut values[d.w_offset..d.w_offset + d.fan_in * d.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.layout.len()
            || !(Arc::ptr_eq(params.layout(), &self.layout) || **params.layout() == *self.layout)
        {
            return Err(Error::Shape(format!(
                "parameters (len {}) do not belong to this network (len {})",
                params.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        params: &ParamVector,
        x: &Batch,
        t: &[f64],
        ctx: &ForwardCtx,
    ) -> Result<Batch> {
        self.forward_cached(params, x, t, ctx).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        params: &ParamVector,
        x: &Batch,
        t: &[f64],
        ctx: &ForwardCtx,
    ) -> Result<(Batch, ForwardCache)> {
        self.check_params(params)?;
        if x.dim() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input dim {} but network expects {}",
                x.dim(),
                self.spec.input_dim
            )));
        }
        if t.len() != x.rows() {
            return Err(Error::Shape(format!(
                "{} noise levels for {} rows",
                t.len(),
                x.rows()
            )));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        if let Some(bad) = t.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!("invalid noise level {bad}")));
        }

        let rows = x.rows();
        let din = self.spec.input_dim;
        let width0 = din + self.spec.time_embed_dim;
        let mut input = vec![0.0; rows * width0];
        for (i, row) in input.chunks_exact_mut(width0).enumerate() {
            row[..din].copy_from_slice(x.row(i));
            time_features(t[i], &mut row[din..]);
        }

        let p = params.values();
        let act = self.spec.activation;
        let use_dropout = ctx.train_mode && self.spec.dropout_rate > 0.0;
        let keep_scale = 1.0 / (1.0 - self.spec.dropout_rate);
        let n_layers = self.layers.len();
        let mut cache = ForwardCache {
            rows,
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers.saturating_sub(1)),
            masks: Vec::new(),
        };
        let mut current = input;
        for (l, d) in self.layers.iter().enumerate() {
            let w = &p[d.w_offset..d.w_offset + d.fan_in * d.fan_out];
            let b = &p[d.b_offset..d.b_offset + d.fan_out];
            let mut z = Vec::with_capacity(rows * d.fan_out);
            for _ in 0..rows {
                z.extend_from_slice(b);
            }
            gemm(
                1.0,
                View::row_major(&current, rows, d.fan_in),
                View::row_major(w, d.fan_out, d.fan_in).t(),
                1.0,
                &mut z,
            );
            cache.inputs.push(current);
            if l + 1 == n_layers {
                current = z;
                break;
            }
            let mut h: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            if use_dropout {
                let mask = self.dropout_mask(ctx.dropout_seed, l, rows, d.fan_out, keep_scale);
                h.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                cache.masks.push(mask);
            }
            cache.pre.push(z);
            current = h;
        }
        let out = Batch::new(rows, self.spec.output_dim, current)?;
        Ok((out, cache))
    }

    fn dropout_mask(&self, seed: u64, layer: usize, rows: usize, width: usize, keep: f64) -> Vec<f64> {
        let rate = self.spec.dropout_rate;
        let mut mask = Vec::with_capacity(rows * width);
        for row in 0..rows {
            let row_seed = rng::derive_seed(seed, stage::DROPOUT, row as u64);
            for unit in 0..width {
                let h = rng::mix64(row_seed ^ ((layer as u64) << 32 | unit as u64));
                mask.push(if rng::unit_from_bits(h) < rate { 0.0 } else { keep });
            }
        }
        mask
    }

    /// Vector-Jacobian product: gradient of `Σ d_out ⊙ output` w.r.t. parameters.
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &ForwardCache,
        d_out: &Batch,
    ) -> Result<ParamVector> {
        self.check_params(params)?;
        let rows = cache.rows;
        if d_out.rows() != rows || d_out.dim() != self.spec.output_dim {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, expected {}x{}",
                d_out.rows(),
                d_out.dim(),
                rows,
                self.spec.output_dim
            )));
        }
        let p = params.values();
        let mut grad = vec![0.0; p.len()];
        let act = self.spec.activation;
        let mut dz = d_out.as_slice().to_vec();
        for l in (0..self.layers.len()).rev() {
            let d = &self.layers[l];
            let a = &cache.inputs[l];
            {
                let (gw, gb) = grad[d.w_offset..d.b_offset + d.fan_out].split_at_mut(d.fan_in * d.fan_out);
                gemm(
                    1.0,
                    View::row_major(&dz, rows, d.fan_out).t(),
                    View::row_major(a, rows, d.fan_in),
                    0.0,
                    gw,
                );
                for row in dz.chunks_exact(d.fan_out) {
                    gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
                }
            }
            if l == 0 {
                break;
            }
            let w = &p[d.w_offset..d.w_offset + d.fan_in * d.fan_out];
            let mut da = vec![0.0; rows * d.fan_in];
            gemm(
                1.0,
                View::row_major(&dz, rows, d.fan_out),
                View::row_major(w, d.fan_out, d.fan_in),
                0.0,
                &mut da,
            );
            let hidden = l - 1;
            if let Some(mask) = cache.masks.get(hidden) {
                da.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
            }
            let z = &cache.pre[hidden];
            da.iter_mut()
                .zip(z)
                .for_each(|(v, &zv)| *v *= act.derivative(zv));
            dz = da;
        }
        Ok(ParamVector {
            values: grad,
            layout: self.layout.clone(),
        })
    }
}

pub fn init_net(spec: &NetSpec, seed: u64) -> Result<ParamVector> {
    Ok(Mlp::new(spec.clone())?.init(seed))
}

/// Scalar function of a parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamVector) -> Result<f64>;

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Evaluate an objective and its gradient, rejecting non-finite results.
pub fn value_and_grad<O: Objective + ?Sized>(
    params: &ParamVector,
    objective: &O,
) -> Result<(f64, ParamVector)> {
    let (value, grad) = objective.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective value {value}")));
    }
    params.check_layout(&grad)?;
    if let Some(i) = grad.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient coordinate {i} is not finite")));
    }
    Ok((value, grad))
}

/// Central-difference gradient estimate.
pub fn finite_diff_grad<O: Objective + ?Sized>(
    params: &ParamVector,
    objective: &O,
    eps: f64,
) -> Result<ParamVector> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + eps;
        let plus = objective.value(&probe)?;
        probe.values[i] = orig - eps;
        let minus = objective.value(&probe)?;
        probe.values[i] = orig;
        grad.values[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `½ mean_i ‖net(x_i, t_i) − y_i‖²`.
pub struct RegressionObjective<'a> {
    pub net: &'a Mlp,
    pub x: &'a Batch,
    pub t: &'a [f64],
    pub target: &'a Batch,
    pub ctx: ForwardCtx,
}

impl Objective for RegressionObjective<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        let out = self.net.forward(params, self.x, self.t, &self.ctx)?;
        out.check_same_shape(self.target)?;
        let n = out.rows().max(1) as f64;
        Ok(out
            .as_slice()
            .iter()
            .zip(self.target.as_slice())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (out, cache) = self.net.forward_cached(params, self.x, self.t, &self.ctx)?;
        out.check_same_shape(self.target)?;
        let n = out.rows().max(1) as f64;
        let mut value = 0.0;
        let mut d = Vec::with_capacity(out.as_slice().len());
        for (a, b) in out.as_slice().iter().zip(self.target.as_slice()) {
            value += 0.5 * (a - b) * (a - b);
            d.push((a - b) / n);
        }
        let d = Batch::new(out.rows(), out.dim(), d)?;
        let grad = self.net.backward(params, &cache, &d)?;
        Ok((value / n, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NetSpec {
        NetSpec {
            input_dim: 2,
            hidden_dims: vec![8, 6],
            output_dim: 2,
            activation: Activation::Silu,
            time_embed_dim: 4,
            dropout_rate: 0.3,
        }
    }

    fn batch() -> (Batch, Vec<f64>) {
        let x = Batch::from_rows(&[[0.3, -1.0], [2.0, 0.5], [-0.7, 0.1]]).unwrap();
        (x, vec![0.5, 1.0, 3.0])
    }

    struct HalfNormSq;

    impl Objective for HalfNormSq {
        fn value(&self, p: &ParamVector) -> Result<f64> {
            Ok(0.5 * p.values().iter().map(|v| v * v).sum::<f64>())
        }

        fn value_and_grad(&self, p: &ParamVector) -> Result<(f64, ParamVector)> {
            Ok((self.value(p)?, p.clone()))
        }
    }

    struct Constant;

    impl Objective for Constant {
        fn value(&self, _: &ParamVector) -> Result<f64> {
            Ok(4.2)
        }

        fn value_and_grad(&self, p: &ParamVector) -> Result<(f64, ParamVector)> {
            Ok((4.2, p.zeros_like()))
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_net(&spec(), 1).unwrap();
        let b = init_net(&spec(), 1).unwrap();
        let c = init_net(&spec(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        assert!(a.slot("dense0.bias").unwrap().iter().all(|&v| v == 0.0));
        let w = a.slot("dense0.weight").unwrap();
        let bound = 1.0 / 6f64.sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.hidden_dims = vec![4, 0];
        assert!(matches!(Mlp::new(s), Err(Error::Config(_))));
        let mut s = spec();
        s.dropout_rate = 1.0;
        assert!(Mlp::new(s).is_err());
        let mut s = spec();
        s.output_dim = 0;
        assert!(init_net(&s, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Mlp::new(spec()).unwrap();
        let (x, t) = batch();
        let y = net.forward(&net.zeros(), &x, &t, &ForwardCtx::train(3)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_ignores_dropout_seed() {
        let net = Mlp::new(spec()).unwrap();
        let p = net.init(5);
        let (x, t) = batch();
        let eval = ForwardCtx::eval();
        let a = net.forward(&p, &x, &t, &ForwardCtx { dropout_seed: 1, ..eval }).unwrap();
        let b = net.forward(&p, &x, &t, &ForwardCtx { dropout_seed: 99, ..eval }).unwrap();
        assert_eq!(a, b);
        let c = net.forward(&p, &x, &t, &ForwardCtx::train(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shared_seed_shares_mask_across_noise_levels() {
        let net = Mlp::new(spec()).unwrap();
        let p = net.init(5);
        let (x, _) = batch();
        let ctx = ForwardCtx::train(1234);
        let (ya, ca) = net.forward_cached(&p, &x, &[1.0; 3], &ctx).unwrap();
        let (yb, cb) = net.forward_cached(&p, &x, &[2.0; 3], &ctx).unwrap();
        assert_eq!(ca.dropout_masks(), cb.dropout_masks());
        assert_eq!(ca.dropout_masks().len(), 2);
        assert_ne!(ya, yb);
        let (_, cc) = net.forward_cached(&p, &x, &[1.0; 3], &ForwardCtx::train(1235)).unwrap();
        assert_ne!(ca.dropout_masks(), cc.dropout_masks());
    }

    #[test]
    fn shape_and_value_errors() {
        let net = Mlp::new(spec()).unwrap();
        let p = net.init(0);
        let (x, t) = batch();
        assert!(matches!(net.forward(&p, &x, &t[..2], &ForwardCtx::eval()), Err(Error::Shape(_))));
        let x3 = Batch::zeros(3, 3);
        assert!(matches!(net.forward(&p, &x3, &t, &ForwardCtx::eval()), Err(Error::Shape(_))));
        let mut bad = x.clone();
        bad.row_mut(0)[0] = f64::NAN;
        assert!(matches!(net.forward(&p, &bad, &t, &ForwardCtx::eval()), Err(Error::Numeric(_))));
        let other = Mlp::new(NetSpec::new(2, &[3], 2)).unwrap().init(0);
        assert!(net.forward(&other, &x, &t, &ForwardCtx::eval()).is_err());
        // t = 0 is allowed
        assert!(net.forward(&p, &x, &[0.0; 3], &ForwardCtx::eval()).is_ok());
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let p = init_net(&spec(), 9).unwrap();
        let (v, g) = value_and_grad(&p, &HalfNormSq).unwrap();
        assert_eq!(g, p);
        assert!((v - 0.5 * p.norm().powi(2)).abs() < 1e-12);
        let fd = finite_diff_grad(&p, &HalfNormSq, 1e-4).unwrap();
        for (a, b) in fd.values().iter().zip(p.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = init_net(&spec(), 9).unwrap();
        let (_, g) = value_and_grad(&p, &Constant).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let fd = finite_diff_grad(&p, &Constant, 1e-3).unwrap();
        assert!(fd.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_step_is_rejected() {
        let p = init_net(&spec(), 9).unwrap();
        assert!(matches!(finite_diff_grad(&p, &HalfNormSq, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        for act in [Activation::Silu, Activation::Tanh] {
            let mut s = spec();
            s.activation = act;
            let net = Mlp::new(s).unwrap();
            let p = net.init(21);
            let (x, t) = batch();
            let target = Batch::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]]).unwrap();
            let obj = RegressionObjective {
                net: &net,
                x: &x,
                t: &t,
                target: &target,
                ctx: ForwardCtx::train(77),
            };
            let (_, g) = value_and_grad(&p, &obj).unwrap();
            let fd = finite_diff_grad(&p, &obj, 1e-5).unwrap();
            for (a, b) in g.values().iter().zip(fd.values()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn time_features_are_bounded_and_t_sensitive() {
        let mut a = [0.0; 5];
        let mut b = [0.0; 5];
        time_features(0.0, &mut a);
        time_features(80.0, &mut b);
        assert!(a.iter().chain(&b).all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
