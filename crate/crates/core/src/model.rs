//! MLP encoder `f` and projection head `g` with a hand-written reverse pass.
//!
//! `forward` returns unit-norm embeddings `v = g(f(x)) / |g(f(x))|`, so cosine
//! similarity downstream is a plain dot product. `backprop` differentiates
//! `<dV, V>` through the normalization and every dense layer.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaseError};
use crate::scalar::Scalar;

/// Perturbation applied to an all-zero projector output before normalizing.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Layer widths. `encoder_dims[0]` is the input dimension; the encoder output
/// width is `encoder_dims.last()`. `proj_dims` lists the projector widths after
/// that, ending at the embedding dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub encoder_dims: Vec<usize>,
    pub proj_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(encoder_dims: Vec<usize>, proj_dims: Vec<usize>) -> Result<Self> {
        let spec = Self {
            encoder_dims,
            proj_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_dims.is_empty() {
            return Err(TaseError::config("encoder_dims must contain at least the input width"));
        }
        if self.proj_dims.is_empty() {
            return Err(TaseError::config("proj_dims must end at the embedding width"));
        }
        if self.encoder_dims.iter().chain(&self.proj_dims).any(|&w| w == 0) {
            return Err(TaseError::config("layer widths must be >= 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_dims.last().unwrap()
    }

    pub fn embed_dim(&self) -> usize {
        *self.proj_dims.last().unwrap()
    }

    pub fn num_encoder_layers(&self) -> usize {
        self.encoder_dims.len() - 1
    }

    /// `(fan_in, fan_out)` of every dense layer, encoder first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let enc = self.encoder_dims.windows(2).map(|w| (w[0], w[1]));
        let mut prev = self.feature_dim();
        let proj = self.proj_dims.iter().map(move |&w| {
            let shape = (prev, w);
            prev = w;
            shape
        });
        enc.chain(proj).collect()
    }
}

/// Dense layer `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn values(&self) -> impl Iterator<Item = &T> {
        self.weight.iter().chain(self.bias.iter())
    }
}

/// Encoder and projector weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    spec: MlpSpec,
    layers: Vec<Dense<T>>,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// All entries flattened in parameter order.
    pub fn flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform init with bound `sqrt(6 / (fan_in + fan_out))`, zero biases.
    /// Draws are made in `f64` so `f32` and `f64` models from the same rng agree.
    pub fn init<R: Rng>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    T::lit(rng.random_range(-bound..=bound))
                });
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Wrap explicit layers, checking them against `spec`.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Dense<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(TaseError::shape(format!(
                "spec has {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, ((i, o), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weight.dim() != (*i, *o) || l.bias.len() != *o {
                return Err(TaseError::shape(format!(
                    "layer {k}: expected {i}x{o}, got {:?} / bias {}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
        }
        let params = Self { spec, layers };
        if !params.is_finite() {
            return Err(TaseError::NonFinite("model parameters".into()));
        }
        Ok(params)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable access by flat index (weights then bias, layer by layer).
    pub fn param_mut(&mut self, mut idx: usize) -> &mut T {
        for l in &mut self.layers {
            let nw = l.weight.len();
            if idx < nw {
                return l.weight.as_slice_mut().expect("standard layout").get_mut(idx).unwrap();
            }
            idx -= nw;
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Convert every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|v| U::lit(v.as_f64())),
                    bias: l.bias.mapv(|v| U::lit(v.as_f64())),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.spec.input_dim() {
            return Err(TaseError::shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TaseError::NonFinite("model input".into()));
        }
        Ok(())
    }

    /// Encoder output `h = f(x)` (every encoder layer is followed by ReLU).
    pub fn features(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for l in &self.layers[..self.spec.num_encoder_layers()] {
            a = (a.dot(&l.weight) + &l.bias).mapv(relu);
        }
        Ok(a)
    }

    /// Unit-norm embeddings `v` without keeping a cache.
    pub fn embed(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&x)?;
        let n_layers = self.layers.len();
        let n_enc = self.spec.num_encoder_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.weight) + &l.bias;
            let last = k + 1 == n_layers;
            let next = if last { z.clone() } else { z.mapv(relu) };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        let mut u = a;
        let mut perturbed = Vec::new();
        let mut norms = Vec::with_capacity(u.nrows());
        for (r, mut row) in u.rows_mut().into_iter().enumerate() {
            let mut norm = row.dot(&row).sqrt();
            if norm < T::lit(ZERO_NORM_EPS) {
                row[0] += T::lit(ZERO_NORM_EPS);
                norm = row.dot(&row).sqrt();
                perturbed.push(r);
            }
            norms.push(norm);
        }
        let mut v = u.clone();
        for (mut row, &n) in v.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|e| e / n);
        }
        let cache = ForwardCache {
            inputs,
            pre,
            n_encoder: n_enc,
            unnormalized: u,
            norms,
            output: v.clone(),
            perturbed_rows: perturbed,
        };
        Ok((v, cache))
    }

    /// Gradients of `<dv, V>` with respect to every parameter.
    pub fn backprop(&self, cache: &ForwardCache<T>, dv: ArrayView2<T>) -> Result<Gradients<T>> {
        if dv.dim() != cache.output.dim() {
            return Err(TaseError::shape(format!(
                "cotangent {:?} does not match cached output {:?}",
                dv.dim(),
                cache.output.dim()
            )));
        }
        if cache.pre.len() != self.layers.len() {
            return Err(TaseError::shape("cache was produced by a different model"));
        }
        if dv.iter().any(|v| !v.is_finite()) {
            return Err(TaseError::NonFinite("embedding gradient".into()));
        }
        let mut g = normalize_backward(cache.output.view(), &cache.norms, dv);
        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            if k + 1 != self.layers.len() {
                Zip::from(&mut g).and(&cache.pre[k]).for_each(|gi, &z| {
                    if z <= T::zero() {
                        *gi = T::zero();
                    }
                });
            }
            let weight = cache.inputs[k].t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            if k > 0 {
                g = g.dot(&self.layers[k].weight.t());
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

fn relu<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

/// Reverse pass of row-wise `v = u / |u|`: `du = (dv - (dv.v) v) / |u|`.
pub fn normalize_backward<T: Scalar>(v: ArrayView2<T>, norms: &[T], dv: ArrayView2<T>) -> Array2<T> {
    let mut du = dv.to_owned();
    for ((mut row, vr), &n) in du.rows_mut().into_iter().zip(v.rows()).zip(norms) {
        let proj = row.dot(&vr);
        Zip::from(&mut row).and(&vr).for_each(|d, &vi| *d = (*d - proj * vi) / n);
    }
    du
}

/// Activations saved by [`ModelParams::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    n_encoder: usize,
    unnormalized: Array2<T>,
    norms: Vec<T>,
    output: Array2<T>,
    perturbed_rows: Vec<usize>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }

    /// Encoder output for the cached batch.
    pub fn features(&self) -> &Array2<T> {
        if self.n_encoder < self.inputs.len() {
            &self.inputs[self.n_encoder]
        } else {
            &self.output
        }
    }

    pub fn unnormalized(&self) -> &Array2<T> {
        &self.unnormalized
    }

    pub fn norms(&self) -> &[T] {
        &self.norms
    }

    /// Rows whose projector output was exactly zero and had to be nudged.
    pub fn perturbed_rows(&self) -> &[usize] {
        &self.perturbed_rows
    }
}

/// Linear warmup followed by cosine annealing, indexed by epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(TaseError::config("peak_lr must be finite and >= 0"));
        }
        if self.total_epochs == 0 {
            return Err(TaseError::config("total_epochs must be >= 1"));
        }
        Ok(())
    }

    /// `peak * (e+1)/W` for `e < W`, then `peak * (1 + cos(pi (e-W)/(E-W))) / 2`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(TaseError::Precondition(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let w = self.warmup_epochs;
        if epoch < w {
            return Ok(self.peak_lr * (epoch + 1) as f64 / w as f64);
        }
        let progress = (epoch - w) as f64 / (self.total_epochs - w) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// SGD with momentum and decoupled-into-gradient weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub schedule: LrSchedule,
    pub buffers: Gradients<T>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(spec: &MlpSpec, momentum: f64, weight_decay: f64, schedule: LrSchedule) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(TaseError::config("momentum must lie in [0, 1)"));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(TaseError::config("weight_decay must be finite and >= 0"));
        }
        schedule.validate()?;
        Ok(Self {
            momentum: T::lit(momentum),
            weight_decay: T::lit(weight_decay),
            schedule,
            buffers: Gradients::zeros(spec),
        })
    }
}

/// Learning rate for `epoch` under the optimizer's schedule.
pub fn lr_at<T: Scalar>(epoch: usize, opt: &OptimState<T>) -> Result<f64> {
    opt.schedule.lr_at(epoch)
}

/// `buf <- m buf + g + wd p; p <- p - lr buf`. Non-finite gradients abort
/// before anything is modified.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    opt: &mut OptimState<T>,
    lr: T,
) -> Result<()> {
    if lr.is_nan() || lr < T::zero() {
        return Err(TaseError::config("learning rate must be >= 0"));
    }
    if grads.layers.len() != params.layers.len() {
        return Err(TaseError::shape("gradient layout does not match parameters"));
    }
    if !grads.is_finite() {
        return Err(TaseError::NonFinite("gradient passed to sgd_step".into()));
    }
    let (m, wd) = (opt.momentum, opt.weight_decay);
    for ((p, g), b) in params.layers.iter_mut().zip(&grads.layers).zip(&mut opt.buffers.layers) {
        Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut b.weight)
            .for_each(|p, &g, b| {
                *b = m * *b + g + wd * *p;
                *p -= lr * *b;
            });
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut b.bias)
            .for_each(|p, &g, b| {
                *b = m * *b + g + wd * *p;
                *p -= lr * *b;
            });
    }
    Ok(())
}
