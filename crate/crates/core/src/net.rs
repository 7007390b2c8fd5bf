//! A small MLP noise predictor whose linear layers can carry low-rank
//! adapters, with hand-written reverse-mode gradients, Adam, and a
//! central-difference gradient checker.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::SeededRng;

/// Width of the sinusoidal timestep features appended to every input.
pub const TIME_EMBED_DIM: usize = 8;
/// Negative-side slope of the hidden activations.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Low-rank update `ΔW = B·A` for one named layer of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layer_name: String,
    domain: String,
    /// r × d_in
    a: Matrix,
    /// d_out × r
    b: Matrix,
}

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, 1/r)`, `B = 0`, so `B·A` is exactly zero.
    pub fn init(layer_name: impl Into<String>, domain: impl Into<String>, d_out: usize, d_in: usize, rank: usize, rng: &mut SeededRng) -> Result<Self> {
        check_rank(rank, d_out, d_in)?;
        let a = Matrix::random_normal(rank, d_in, (1.0 / rank as f64).sqrt(), rng);
        let b = Matrix::zeros(d_out, rank);
        Self::from_factors(layer_name, domain, a, b)
    }

    /// Adapter from explicit factors `a` (r × d_in) and `b` (d_out × r).
    pub fn from_factors(layer_name: impl Into<String>, domain: impl Into<String>, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::shape("LoraAdapter", format!("A {}", a.shape_str()), format!("B {}", b.shape_str())));
        }
        check_rank(a.rows(), b.rows(), a.cols())?;
        Ok(Self { layer_name: layer_name.into(), domain: domain.into(), a, b })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// Materialized `B·A`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors compose by construction")
    }

    /// `‖A‖_F² + ‖B‖_F²`.
    pub fn frobenius_penalty(&self) -> f64 {
        self.a.frobenius_norm_sq() + self.b.frobenius_norm_sq()
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = domain.into();
        self
    }

    fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<()> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::invalid(format!("adapter rank {rank} must be in 1..={} for a {d_out}x{d_in} layer", d_out.min(d_in))));
    }
    Ok(())
}

/// Linear layer with a frozen base weight and an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    name: String,
    w0: Matrix,
    bias: Vec<f64>,
    adapter: Option<LoraAdapter>,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, w0: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != w0.rows() {
            return Err(Error::shape("LinearLayer", format!("w0 {}", w0.shape_str()), format!("bias of {}", bias.len())));
        }
        Ok(Self { name: name.into(), w0, bias, adapter: None })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_ref()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn set_adapter(&mut self, adapter: Option<LoraAdapter>) -> Result<()> {
        if let Some(ad) = &adapter {
            if ad.d_in() != self.d_in() || ad.d_out() != self.d_out() {
                return Err(Error::shape(
                    "set_adapter",
                    format!("layer {} is {}", self.name, self.w0.shape_str()),
                    format!("adapter delta {}x{}", ad.d_out(), ad.d_in()),
                ));
            }
        }
        self.adapter = adapter;
        Ok(())
    }

    /// `(W0 + B·A)·x + bias`, with the adapter applied as `B·(A·x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_parts(x)?.0)
    }

    fn forward_parts(&self, x: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut z = self.w0.matvec(x)?;
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        let ax = match &self.adapter {
            Some(ad) => {
                let ax = ad.a.matvec(x)?;
                let bax = ad.b.matvec(&ax)?;
                for (zi, d) in z.iter_mut().zip(&bax) {
                    *zi += d;
                }
                Some(ax)
            }
            None => None,
        };
        Ok((z, ax))
    }

    /// Effective dense weight `W0 + B·A`.
    pub fn effective_weight(&self) -> Matrix {
        match &self.adapter {
            Some(ad) => self.w0.add(&ad.delta()).expect("shapes checked on attach"),
            None => self.w0.clone(),
        }
    }
}

/// Which parameters a gradient or optimizer step addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    /// Base weights and biases of every layer (pretraining).
    Base,
    /// Adapter factors `A` then `B` of every adapted layer, in layer order.
    Adapters,
}

/// Activations saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    adapter_hidden: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    /// Sign pattern of every hidden pre-activation. Two evaluations with the
    /// same pattern lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let hidden = self.pre_activations.len().saturating_sub(1);
        self.pre_activations[..hidden].iter().flat_map(|z| z.iter().map(|&v| v > 0.0)).collect()
    }
}

/// MLP noise predictor: leaky-ReLU hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    data_dim: usize,
    cond_dim: usize,
    layers: Vec<LinearLayer>,
}

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl MlpDenoiser {
    /// Randomly initialized model mapping `data_dim + cond_dim + 8` inputs
    /// through `hidden` widths to `data_dim` outputs.
    pub fn new(data_dim: usize, cond_dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if data_dim == 0 || cond_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive with at least one hidden layer"));
        }
        let mut widths = vec![data_dim + cond_dim + TIME_EMBED_DIM];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (d_in, d_out) = (widths[i], widths[i + 1]);
                let gain = if i + 1 == n { 1.0 } else { 2.0 };
                let w0 = Matrix::random_normal(d_out, d_in, (gain / d_in as f64).sqrt(), rng);
                LinearLayer::new(layer_name(i, n), w0, vec![0.0; d_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(data_dim, cond_dim, layers)
    }

    /// Assembles a model from explicit layers, checking that widths chain.
    pub fn from_layers(data_dim: usize, cond_dim: usize, layers: Vec<LinearLayer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("model needs at least one layer"))?;
        let expected_in = data_dim + cond_dim + TIME_EMBED_DIM;
        if first.d_in() != expected_in {
            return Err(Error::shape("MlpDenoiser input", format!("{expected_in} features"), first.w0.shape_str()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::shape(
                    "MlpDenoiser chain",
                    format!("{} {}", pair[0].name, pair[0].w0.shape_str()),
                    format!("{} {}", pair[1].name, pair[1].w0.shape_str()),
                ));
            }
        }
        let last = layers.last().expect("nonempty");
        if last.d_out() != data_dim {
            return Err(Error::shape("MlpDenoiser output", format!("{data_dim} outputs"), last.w0.shape_str()));
        }
        let names: BTreeSet<&str> = layers.iter().map(|l| l.name()).collect();
        if names.len() != layers.len() {
            return Err(Error::invalid("layer names must be unique"));
        }
        Ok(Self { data_dim, cond_dim, layers })
    }

    /// A bare single-layer model, mostly useful for checks and examples.
    pub fn single_layer(layer: LinearLayer) -> Result<Self> {
        let extra = TIME_EMBED_DIM + 1;
        if layer.d_in() <= extra || layer.d_out() + extra != layer.d_in() {
            return Err(Error::invalid("single_layer expects d_in = d_out + 1 + time features"));
        }
        Self::from_layers(layer.d_out(), 1, vec![layer])
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.cond_dim + TIME_EMBED_DIM
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LinearLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Names of the hidden-to-hidden layers (every layer but the first and
    /// last), the default adapter targets.
    pub fn hidden_layer_names(&self) -> Vec<String> {
        let n = self.layers.len();
        if n <= 2 {
            return Vec::new();
        }
        self.layers[1..n - 1].iter().map(|l| l.name.clone()).collect()
    }

    /// Fresh adapters for the given layers.
    pub fn init_adapters(&self, layer_names: &[String], domain: &str, rank: usize, rng: &mut SeededRng) -> Result<Vec<LoraAdapter>> {
        layer_names
            .iter()
            .map(|name| {
                let layer = self.layer(name).ok_or_else(|| Error::invalid(format!("no layer named `{name}`")))?;
                LoraAdapter::init(name.clone(), domain, layer.d_out(), layer.d_in(), rank, rng)
            })
            .collect()
    }

    /// Replaces all adapters with `adapters` (matched by layer name).
    pub fn set_adapters(&mut self, adapters: &[LoraAdapter]) -> Result<()> {
        for ad in adapters {
            if self.layer(ad.layer_name()).is_none() {
                return Err(Error::invalid(format!("adapter targets unknown layer `{}`", ad.layer_name())));
            }
        }
        for layer in &mut self.layers {
            let ad = adapters.iter().find(|a| a.layer_name() == layer.name).cloned();
            layer.set_adapter(ad)?;
        }
        Ok(())
    }

    pub fn with_adapters(&self, adapters: &[LoraAdapter]) -> Result<Self> {
        let mut m = self.clone();
        m.set_adapters(adapters)?;
        Ok(m)
    }

    /// Copy of the model with every adapter removed.
    pub fn base(&self) -> Self {
        let mut m = self.clone();
        m.layers.iter_mut().for_each(|l| l.adapter = None);
        m
    }

    pub fn adapters(&self) -> Vec<LoraAdapter> {
        self.layers.iter().filter_map(|l| l.adapter.clone()).collect()
    }

    /// `Σ (‖A‖_F² + ‖B‖_F²)` over attached adapters.
    pub fn adapter_penalty(&self) -> f64 {
        self.layers.iter().filter_map(|l| l.adapter.as_ref()).map(LoraAdapter::frobenius_penalty).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&h)?;
            if i != last {
                z.iter_mut().for_each(|v| *v = leaky(*v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let n = self.layers.len();
        let mut cache = ForwardCache { inputs: Vec::with_capacity(n), pre_activations: Vec::with_capacity(n), adapter_hidden: Vec::with_capacity(n) };
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, ax) = layer.forward_parts(&h)?;
            let out = if i + 1 == n { z.clone() } else { z.iter().map(|&v| leaky(v)).collect() };
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre_activations.push(z);
            cache.adapter_hidden.push(ax);
        }
        Ok((h, cache))
    }

    /// Gradient of `upstream · output` with respect to `set`, for the input
    /// that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], set: ParamSet) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.param_count(set)];
        self.backward_into(cache, upstream, set, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: &[f64], set: ParamSet, grads: &mut [f64]) -> Result<()> {
        self.check_cache(cache)?;
        if upstream.len() != self.data_dim {
            return Err(Error::shape("backward", format!("{} outputs", self.data_dim), format!("upstream of {}", upstream.len())));
        }
        if grads.len() != self.param_count(set) {
            return Err(Error::shape("backward", format!("{} parameters", self.param_count(set)), format!("buffer of {}", grads.len())));
        }
        let offsets = self.offsets(set);
        let n = self.layers.len();
        let mut g = upstream.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let x = &cache.inputs[i];
            if i + 1 != n {
                for (gi, &z) in g.iter_mut().zip(&cache.pre_activations[i]) {
                    *gi *= leaky_grad(z);
                }
            }
            let bt_g = layer.adapter.as_ref().map(|ad| ad.b.matvec_t(&g)).transpose()?;
            match (set, offsets[i]) {
                (ParamSet::Base, Some(off)) => {
                    let (d_out, d_in) = layer.w0.shape();
                    for r in 0..d_out {
                        let gr = g[r];
                        if gr != 0.0 {
                            let row = &mut grads[off + r * d_in..off + (r + 1) * d_in];
                            for (o, &xv) in row.iter_mut().zip(x) {
                                *o += gr * xv;
                            }
                        }
                    }
                    let boff = off + d_out * d_in;
                    for (o, &gr) in grads[boff..boff + d_out].iter_mut().zip(&g) {
                        *o += gr;
                    }
                }
                (ParamSet::Adapters, Some(off)) => {
                    let ad = layer.adapter.as_ref().expect("offset implies adapter");
                    let ax = cache.adapter_hidden[i].as_ref().expect("cache checked");
                    let bt_g = bt_g.as_ref().expect("adapter present");
                    let (r, d_in) = ad.a.shape();
                    // dA = (Bᵀ g) xᵀ
                    for k in 0..r {
                        let s = bt_g[k];
                        if s != 0.0 {
                            let row = &mut grads[off + k * d_in..off + (k + 1) * d_in];
                            for (o, &xv) in row.iter_mut().zip(x) {
                                *o += s * xv;
                            }
                        }
                    }
                    // dB = g (A x)ᵀ
                    let boff = off + r * d_in;
                    for (row_i, &gr) in g.iter().enumerate() {
                        let row = &mut grads[boff + row_i * r..boff + (row_i + 1) * r];
                        for (o, &a) in row.iter_mut().zip(ax) {
                            *o += gr * a;
                        }
                    }
                }
                _ => {}
            }
            if i > 0 {
                let mut gx = layer.w0.matvec_t(&g)?;
                if let (Some(ad), Some(bt_g)) = (&layer.adapter, &bt_g) {
                    for (o, v) in gx.iter_mut().zip(ad.a.matvec_t(bt_g)?) {
                        *o += v;
                    }
                }
                g = gx;
            }
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::MissingForward(format!("cache has {} layers, model has {}", cache.inputs.len(), self.layers.len())));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if cache.inputs[i].len() != layer.d_in() || cache.pre_activations[i].len() != layer.d_out() {
                return Err(Error::MissingForward(format!("layer `{}` shapes differ from the cached pass", layer.name)));
            }
            let cached_rank = cache.adapter_hidden[i].as_ref().map(Vec::len);
            if cached_rank != layer.adapter.as_ref().map(LoraAdapter::rank) {
                return Err(Error::MissingForward(format!("layer `{}` adapter differs from the cached pass", layer.name)));
            }
        }
        Ok(())
    }

    /// Per-layer offset into the flat parameter vector of `set`.
    fn offsets(&self, set: ParamSet) -> Vec<Option<usize>> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let size = match set {
                    ParamSet::Base => Some(l.w0.data().len() + l.bias.len()),
                    ParamSet::Adapters => l.adapter.as_ref().map(LoraAdapter::param_count),
                };
                size.map(|s| {
                    let here = off;
                    off += s;
                    here
                })
            })
            .collect()
    }

    pub fn param_count(&self, set: ParamSet) -> usize {
        self.layers
            .iter()
            .map(|l| match set {
                ParamSet::Base => l.w0.data().len() + l.bias.len(),
                ParamSet::Adapters => l.adapter.as_ref().map_or(0, LoraAdapter::param_count),
            })
            .sum()
    }

    /// Flat copy of the parameters in `set`.
    pub fn params(&self, set: ParamSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count(set));
        for l in &self.layers {
            match set {
                ParamSet::Base => {
                    out.extend_from_slice(l.w0.data());
                    out.extend_from_slice(&l.bias);
                }
                ParamSet::Adapters => {
                    if let Some(ad) = &l.adapter {
                        out.extend_from_slice(ad.a.data());
                        out.extend_from_slice(ad.b.data());
                    }
                }
            }
        }
        out
    }

    /// Overwrites the parameters in `set` from a flat vector.
    pub fn set_params(&mut self, set: ParamSet, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count(set) {
            return Err(Error::shape("set_params", format!("{} parameters", self.param_count(set)), format!("{} values", values.len())));
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        let mut rest = values;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for l in &mut self.layers {
            match set {
                ParamSet::Base => {
                    take(l.w0.data_mut());
                    take(&mut l.bias);
                }
                ParamSet::Adapters => {
                    if let Some(ad) = &mut l.adapter {
                        take(ad.a.data_mut());
                        take(ad.b.data_mut());
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds `2·λ·θ` for every adapter parameter θ to `grads` (the gradient of
    /// `λ Σ (‖A‖_F² + ‖B‖_F²)`).
    pub fn add_penalty_grad(&self, lambda: f64, grads: &mut [f64]) -> Result<()> {
        let params = self.params(ParamSet::Adapters);
        if grads.len() != params.len() {
            return Err(Error::shape("add_penalty_grad", format!("{} parameters", params.len()), format!("{} grads", grads.len())));
        }
        for (g, p) in grads.iter_mut().zip(&params) {
            *g += 2.0 * lambda * p;
        }
        Ok(())
    }
}

fn layer_name(i: usize, n: usize) -> String {
    if i == 0 {
        "input".to_string()
    } else if i + 1 == n {
        "output".to_string()
    } else {
        format!("hidden{i}")
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", format!("{} accumulators", self.m.len()), format!("{} params / {} grads", params.len(), grads.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// A loss value with its analytic gradient and the activation pattern it was
/// evaluated on.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub pattern: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates skipped because a perturbation crossed an activation kink.
    pub resampled: usize,
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Relative error `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the analytic gradient of `loss` against central differences on
/// `n_coords` randomly chosen coordinates of `set`.
///
/// Coordinates whose ±h perturbation changes the activation pattern are
/// resampled (at most `8·n_coords` attempts in total). Only parameters in
/// `set` are ever sampled, so frozen base weights are excluded when `set` is
/// [`ParamSet::Adapters`].
pub fn grad_check<F>(model: &MlpDenoiser, set: ParamSet, loss: F, n_coords: usize, rng: &mut SeededRng) -> Result<GradCheckReport>
where
    F: Fn(&MlpDenoiser) -> Result<LossEval>,
{
    let n_params = model.param_count(set);
    let base = loss(model)?;
    if base.grad.len() != n_params {
        return Err(Error::shape("grad_check", format!("{n_params} parameters"), format!("gradient of {}", base.grad.len())));
    }
    let theta = model.params(set);
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, resampled: 0 };
    if n_params == 0 {
        return Ok(report);
    }
    let max_attempts = 8 * n_coords.max(1);
    let mut attempts = 0;
    while report.coords_checked < n_coords && attempts < max_attempts {
        attempts += 1;
        let idx = rng.below(n_params);
        let mut shifted = theta.clone();
        shifted[idx] = theta[idx] + GRAD_CHECK_STEP;
        probe.set_params(set, &shifted)?;
        let plus = loss(&probe)?;
        shifted[idx] = theta[idx] - GRAD_CHECK_STEP;
        probe.set_params(set, &shifted)?;
        let minus = loss(&probe)?;
        if plus.pattern != base.pattern || minus.pattern != base.pattern {
            report.resampled += 1;
            continue;
        }
        let fd = (plus.loss - minus.loss) / (2.0 * GRAD_CHECK_STEP);
        report.max_rel_error = report.max_rel_error.max(relative_error(base.grad[idx], fd));
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Squared-error loss `Σ_i ‖f(x_i) − y_i‖²` over a fixed set of pairs, with
/// gradient; a convenient objective for checks.
pub fn squared_error_loss(model: &MlpDenoiser, set: ParamSet, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<LossEval> {
    let mut grad = vec![0.0; model.param_count(set)];
    let mut loss = 0.0;
    let mut pattern = Vec::new();
    for (x, y) in inputs.iter().zip(targets) {
        let (out, cache) = model.forward_cached(x)?;
        let diff: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
        loss += dot(&diff, &diff);
        let upstream: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        model.backward_into(&cache, &upstream, set, &mut grad)?;
        pattern.extend(cache.activation_pattern());
    }
    Ok(LossEval { loss, grad, pattern })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(rng: &mut SeededRng) -> MlpDenoiser {
        MlpDenoiser::new(3, 2, &[6, 5, 4], rng).unwrap()
    }

    fn random_inputs(model: &MlpDenoiser, n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..n).map(|_| rng.normal_vec(model.input_dim())).collect()
    }

    #[test]
    fn fresh_adapter_is_exact_noop() {
        let mut rng = SeededRng::new(1);
        let base = toy_model(&mut rng);
        let ads = base.init_adapters(&base.hidden_layer_names(), "d", 2, &mut rng).unwrap();
        assert!(ads.iter().all(|a| a.delta().max_abs() == 0.0));
        let adapted = base.with_adapters(&ads).unwrap();
        for x in random_inputs(&base, 10, &mut rng) {
            let a = base.forward(&x).unwrap();
            let b = adapted.forward(&x).unwrap();
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn linear_forward_hand_example() {
        let mut layer = LinearLayer::new("l", Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let ad = LoraAdapter::from_factors("l", "d", Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), Matrix::from_rows(&[[1.0], [0.0]]).unwrap()).unwrap();
        layer.set_adapter(Some(ad)).unwrap();
        assert_eq!(layer.forward(&[1.0, 1.0]).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn factored_matches_dense() {
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let w0 = Matrix::random_normal(7, 5, 1.0, &mut rng);
            let bias = rng.normal_vec(7);
            let mut layer = LinearLayer::new("l", w0, bias.clone()).unwrap();
            let a = Matrix::random_normal(3, 5, 1.0, &mut rng);
            let b = Matrix::random_normal(7, 3, 1.0, &mut rng);
            layer.set_adapter(Some(LoraAdapter::from_factors("l", "d", a, b).unwrap())).unwrap();
            let x = rng.normal_vec(5);
            let fast = layer.forward(&x).unwrap();
            let dense: Vec<f64> = layer.effective_weight().matvec(&x).unwrap().iter().zip(&bias).map(|(v, b)| v + b).collect();
            for (p, q) in fast.iter().zip(&dense) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_rank_bounds() {
        let mut rng = SeededRng::new(3);
        assert!(LoraAdapter::init("l", "d", 4, 3, 0, &mut rng).is_err());
        assert!(LoraAdapter::init("l", "d", 4, 3, 4, &mut rng).is_err());
        assert!(LoraAdapter::init("l", "d", 4, 3, 3, &mut rng).is_ok());
    }

    #[test]
    fn linear_shape_mismatch() {
        let layer = LinearLayer::new("l", Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert!(layer.forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = SeededRng::new(4);
        let model = toy_model(&mut rng);
        let x = rng.normal_vec(model.input_dim());
        let (_, cache) = model.forward_cached(&x).unwrap();
        let g = model.backward(&cache, &[0.0; 3], ParamSet::Base).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_grad_of_identity_chain_is_one() {
        let mut rng = SeededRng::new(5);
        let w0 = Matrix::random_normal(1, 1 + 1 + TIME_EMBED_DIM, 1.0, &mut rng);
        let model = MlpDenoiser::single_layer(LinearLayer::new("only", w0, vec![0.3]).unwrap()).unwrap();
        let x = rng.normal_vec(model.input_dim());
        let (_, cache) = model.forward_cached(&x).unwrap();
        let g = model.backward(&cache, &[1.0], ParamSet::Base).unwrap();
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut rng = SeededRng::new(6);
        let model = toy_model(&mut rng);
        let other = MlpDenoiser::new(3, 2, &[6, 4], &mut rng).unwrap();
        let x = rng.normal_vec(other.input_dim());
        let (_, cache) = other.forward_cached(&x).unwrap();
        assert!(matches!(model.backward(&cache, &[1.0; 3], ParamSet::Base), Err(Error::MissingForward(_))));

        let ads = model.init_adapters(&model.hidden_layer_names(), "d", 2, &mut rng).unwrap();
        let adapted = model.with_adapters(&ads).unwrap();
        let (_, cache) = model.forward_cached(&x).unwrap();
        assert!(matches!(adapted.backward(&cache, &[1.0; 3], ParamSet::Adapters), Err(Error::MissingForward(_))));
    }

    #[test]
    fn base_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let model = toy_model(&mut rng);
        let xs = random_inputs(&model, 4, &mut rng);
        let ys: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3)).collect();
        let report = grad_check(&model, ParamSet::Base, |m| squared_error_loss(m, ParamSet::Base, &xs, &ys), 200, &mut rng).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.coords_checked, 200);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(8);
        let base = toy_model(&mut rng);
        let mut ads = base.init_adapters(&base.hidden_layer_names(), "d", 2, &mut rng).unwrap();
        // Non-zero B so both factors receive gradient.
        for ad in &mut ads {
            ad.b = Matrix::random_normal(ad.b.rows(), ad.b.cols(), 0.5, &mut rng);
        }
        let model = base.with_adapters(&ads).unwrap();
        let xs = random_inputs(&model, 4, &mut rng);
        let ys: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3)).collect();
        let report = grad_check(&model, ParamSet::Adapters, |m| squared_error_loss(m, ParamSet::Adapters, &xs, &ys), 100, &mut rng).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn quadratic_single_layer_check_is_tight() {
        let mut rng = SeededRng::new(9);
        let w0 = Matrix::random_normal(2, 2 + 1 + TIME_EMBED_DIM, 1.0, &mut rng);
        let model = MlpDenoiser::single_layer(LinearLayer::new("only", w0, vec![0.0; 2]).unwrap()).unwrap();
        let xs = random_inputs(&model, 3, &mut rng);
        let ys: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(2)).collect();
        let report = grad_check(&model, ParamSet::Base, |m| squared_error_loss(m, ParamSet::Base, &xs, &ys), 50, &mut rng).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn adapter_set_excludes_base_weights() {
        let mut rng = SeededRng::new(10);
        let base = toy_model(&mut rng);
        let ads = base.init_adapters(&base.hidden_layer_names(), "d", 2, &mut rng).unwrap();
        let model = base.with_adapters(&ads).unwrap();
        let expected: usize = ads.iter().map(|a| a.a().data().len() + a.b().data().len()).sum();
        assert_eq!(model.param_count(ParamSet::Adapters), expected);
        assert!(model.param_count(ParamSet::Base) > expected);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = SeededRng::new(11);
        let mut model = toy_model(&mut rng);
        let p = model.params(ParamSet::Base);
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        model.set_params(ParamSet::Base, &shifted).unwrap();
        assert_eq!(model.params(ParamSet::Base), shifted);
        assert!(model.set_params(ParamSet::Base, &shifted[1..]).is_err());
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut adam = AdamState::new(3, 3e-4);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = AdamState::new(1, 3e-4);
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0]).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = lr / (1 + 1e-8)
        assert!((p[0] + 3e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut adam = AdamState::new(2, 1e-3);
        assert!(adam.step(&mut [0.0; 2], &[1.0]).is_err());
    }

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
    }
}
