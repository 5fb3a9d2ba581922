//! The classifier: a shared fully connected layer applied to every context
//! row, ReLU, max-pooling over rows, then a ReLU MLP head and a linear
//! output layer trained with softmax cross-entropy and Adam.
//!
//! All parameters live in one flat `f64` vector split into named sections.
//! Row `j` of a sample is `anchor ++ context(j)`, so the shared layer is
//! evaluated as `b0 + W_a · anchor + W_c · context(j)`, with the anchor term
//! computed once per sample. Every sum runs in a fixed order that does not
//! depend on thread count or batch composition.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{ContextSource, Normalization, DEFAULT_K_GLOBAL, DEFAULT_K_LOCAL};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tract::DEFAULT_N_POINTS;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const MODEL_FORMAT: &str = "tractfov-model-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_points: usize,
    pub k_local: usize,
    pub k_global: usize,
    pub repr_dim: usize,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Drop probability for head activations during training.
    pub dropout: f64,
    /// Batch normalization before every head ReLU.
    pub batch_norm: bool,
    pub normalization: Normalization,
}

impl ModelConfig {
    /// Full-size defaults for a `num_classes`-way problem.
    pub fn new(num_classes: usize) -> ModelConfig {
        ModelConfig {
            n_points: DEFAULT_N_POINTS,
            k_local: DEFAULT_K_LOCAL,
            k_global: DEFAULT_K_GLOBAL,
            repr_dim: 64,
            head_widths: vec![128, 256],
            num_classes,
            learning_rate: 0.001,
            batch_size: 1024,
            epochs: 20,
            seed: 0,
            dropout: 0.0,
            batch_norm: false,
            normalization: Normalization::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_points < 2 {
            return bad("n_points must be at least 2");
        }
        if self.repr_dim == 0 || self.head_widths.contains(&0) {
            return bad("layer widths must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.normalization.scale > 0.0 && self.normalization.scale.is_finite()) {
            return bad("normalization scale must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            half_width: 3 * self.n_points,
            repr_dim: self.repr_dim,
            head_widths: self.head_widths.clone(),
            num_classes: self.num_classes,
            batch_norm: self.batch_norm,
        }
    }

    /// Context rows per sample, the anchor included.
    pub fn rows(&self) -> usize {
        1 + self.k_local + self.k_global
    }
}

/// The shape-determining part of a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `3 * n_points`; rows are twice this wide.
    pub half_width: usize,
    pub repr_dim: usize,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub batch_norm: bool,
}

/// One named block of the parameter or buffer vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Buffers are state (batch-norm running statistics), not trained.
    pub buffer: bool,
}

impl Section {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    bn: Option<BnOffsets>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnOffsets {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    arch: Architecture,
    repr: Dense,
    head: Vec<Dense>,
    output: Dense,
    n_params: usize,
    n_buffers: usize,
    sections: Vec<Section>,
}

impl Layout {
    fn new(arch: &Architecture) -> Layout {
        let mut sections = Vec::new();
        let mut n_params = 0;
        let mut n_buffers = 0;
        let mut add = |name: String, shape: Vec<usize>, buffer: bool| {
            let counter = if buffer { &mut n_buffers } else { &mut n_params };
            let offset = *counter;
            *counter += shape.iter().product::<usize>();
            sections.push(Section { name, shape, offset, buffer });
            offset
        };
        let mut dense = |name: &str, fan_in: usize, fan_out: usize, bn: bool| {
            let w = add(format!("{name}.weight"), vec![fan_out, fan_in], false);
            let b = add(format!("{name}.bias"), vec![fan_out], false);
            let bn = bn.then(|| BnOffsets {
                gamma: add(format!("{name}.bn_gamma"), vec![fan_out], false),
                beta: add(format!("{name}.bn_beta"), vec![fan_out], false),
                mean: add(format!("{name}.bn_running_mean"), vec![fan_out], true),
                var: add(format!("{name}.bn_running_var"), vec![fan_out], true),
            });
            Dense { fan_in, fan_out, w, b, bn }
        };
        let repr = dense("repr", 2 * arch.half_width, arch.repr_dim, false);
        let mut width = arch.repr_dim;
        let mut head = Vec::new();
        for (l, &h) in arch.head_widths.iter().enumerate() {
            head.push(dense(&format!("head.{l}"), width, h, arch.batch_norm));
            width = h;
        }
        let output = dense("output", width, arch.num_classes, false);
        Layout { arch: arch.clone(), repr, head, output, n_params, n_buffers, sections }
    }
}

/// Network weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    values: Vec<f64>,
    buffers: Vec<f64>,
}

impl ModelParams {
    /// All parameters zero, running variances one.
    pub fn zeros(arch: &Architecture) -> ModelParams {
        let layout = Layout::new(arch);
        let mut values = vec![0.0; layout.n_params];
        let mut buffers = vec![0.0; layout.n_buffers];
        for d in &layout.head {
            if let Some(bn) = d.bn {
                values[bn.gamma..bn.gamma + d.fan_out].fill(1.0);
                buffers[bn.var..bn.var + d.fan_out].fill(1.0);
            }
        }
        ModelParams { layout, values, buffers }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> ModelParams {
        let mut p = ModelParams::zeros(arch);
        let dense: Vec<Dense> =
            std::iter::once(&p.layout.repr).chain(&p.layout.head).chain([&p.layout.output]).cloned().collect();
        for d in dense {
            let bound = (6.0 / (d.fan_in + d.fan_out) as f64).sqrt();
            for v in &mut p.values[d.w..d.w + d.fan_in * d.fan_out] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn from_config(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = substream(config.seed, "init", &[]);
        Ok(ModelParams::init(&config.architecture(), &mut rng))
    }

    pub fn from_parts(arch: &Architecture, values: Vec<f64>, buffers: Vec<f64>) -> Result<ModelParams> {
        let layout = Layout::new(arch);
        if values.len() != layout.n_params || buffers.len() != layout.n_buffers {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters and {} buffers, got {} and {}",
                layout.n_params,
                layout.n_buffers,
                values.len(),
                buffers.len()
            )));
        }
        if values.iter().chain(&buffers).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(ModelParams { layout, values, buffers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.layout.arch
    }

    pub fn sections(&self) -> &[Section] {
        &self.layout.sections
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        let s = self.layout.sections.iter().find(|s| s.name == name)?;
        let store = if s.buffer { &self.buffers } else { &self.values };
        Some(&store[s.offset..s.offset + s.len()])
    }

    pub fn section_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.layout.sections.iter().find(|s| s.name == name)?.clone();
        let store = if s.buffer { &mut self.buffers } else { &mut self.values };
        Some(&mut store[s.offset..s.offset + s.len()])
    }

    /// Trainable parameters, in section order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.values[offset..offset + len]
    }
}

/// Per-sample class scores, row-major `samples x num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub num_classes: usize,
    pub scores: Vec<f64>,
}

impl Logits {
    pub fn len(&self) -> usize {
        self.scores.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.scores.chunks_exact(self.num_classes).map(argmax).collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log(sum(exp(v)))`, shifted by the maximum.
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Forward-pass weights rearranged for the row loop: the anchor and context
/// halves of the shared layer, each stored input-major.
struct Prepared<'a> {
    p: &'a ModelParams,
    wa_t: Vec<f64>,
    wc_t: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(p: &'a ModelParams) -> Prepared<'a> {
        let h = p.layout.arch.half_width;
        let d0 = p.layout.arch.repr_dim;
        let w = p.slice(p.layout.repr.w, d0 * 2 * h);
        let mut wa_t = vec![0.0; h * d0];
        let mut wc_t = vec![0.0; h * d0];
        for i in 0..d0 {
            for k in 0..h {
                wa_t[k * d0 + i] = w[i * 2 * h + k];
                wc_t[k * d0 + i] = w[i * 2 * h + h + k];
            }
        }
        Prepared { p, wa_t, wc_t }
    }

    /// Pooled representation of one sample and, per unit, the winning row.
    fn represent<S: ContextSource + ?Sized>(&self, src: &S, sample: usize, r: &mut [f64], arg: &mut [u32], z: &mut [f64]) {
        let d0 = r.len();
        let h = self.p.layout.arch.half_width;
        let mut base = self.p.slice(self.p.layout.repr.b, d0).to_vec();
        mat_acc(&mut base, &self.wa_t, src.anchor(sample), d0);
        for j in 0..src.num_rows(sample) {
            z.copy_from_slice(&base);
            mat_acc(z, &self.wc_t, &src.context(sample, j)[..h], d0);
            for i in 0..d0 {
                let a = if z[i] > 0.0 { z[i] } else { 0.0 };
                if j == 0 || a > r[i] {
                    r[i] = a;
                    arg[i] = j as u32;
                }
            }
        }
    }
}

/// `z += W^T x` for input-major `w_t` (`x.len()` blocks of `z.len()`).
#[inline]
fn mat_acc(z: &mut [f64], w_t: &[f64], x: &[f64], width: usize) {
    for (k, &xk) in x.iter().enumerate() {
        let w = &w_t[k * width..(k + 1) * width];
        for (zi, wi) in z.iter_mut().zip(w) {
            *zi += wi * xk;
        }
    }
}

/// `y = W x + b` for output-major `w`.
fn dense_forward(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * n..(o + 1) * n];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *yo = acc + b[o];
    }
}

fn check_source<S: ContextSource + ?Sized>(p: &ModelParams, src: &S, samples: &[usize]) -> Result<()> {
    if src.half_width() != p.layout.arch.half_width {
        return Err(Error::ShapeMismatch(format!(
            "inputs hold {} values per streamline, model expects {}",
            src.half_width(),
            p.layout.arch.half_width
        )));
    }
    for &s in samples {
        if s >= src.num_samples() {
            return Err(Error::IndexOutOfRange { index: s, len: src.num_samples() });
        }
        let m = src.num_rows(s);
        if m == 0 {
            return Err(Error::ShapeMismatch(format!("sample {s} has no context rows")));
        }
        let finite = src.anchor(s).iter().all(|v| v.is_finite())
            && (0..m).all(|j| src.context(s, j).iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFiniteInput);
        }
    }
    Ok(())
}

/// Inference-mode logits for `samples` of `src` (all samples when `None`).
/// Batch normalization uses running statistics; dropout is off.
pub fn forward<S: ContextSource + ?Sized>(p: &ModelParams, src: &S, samples: Option<&[usize]>) -> Result<Logits> {
    let all: Vec<usize>;
    let samples = match samples {
        Some(s) => s,
        None => {
            all = (0..src.num_samples()).collect();
            &all
        }
    };
    check_source(p, src, samples)?;
    let prep = Prepared::new(p);
    let c = p.layout.arch.num_classes;
    let d0 = p.layout.arch.repr_dim;
    let mut scores = vec![0.0; samples.len() * c];
    scores.par_chunks_mut(c).zip(samples.par_iter()).for_each_init(
        || (vec![0.0; d0], vec![0u32; d0], vec![0.0; d0]),
        |(r, arg, z), (out, &s)| {
            prep.represent(src, s, r, arg, z);
            head_inference(p, r, out);
        },
    );
    Ok(Logits { num_classes: c, scores })
}

fn head_inference(p: &ModelParams, r: &[f64], out: &mut [f64]) {
    let mut x = r.to_vec();
    for d in &p.layout.head {
        let mut y = vec![0.0; d.fan_out];
        dense_forward(p.slice(d.w, d.fan_in * d.fan_out), p.slice(d.b, d.fan_out), &x, &mut y);
        if let Some(bn) = d.bn {
            for (o, yo) in y.iter_mut().enumerate() {
                let mean = p.buffers[bn.mean + o];
                let var = p.buffers[bn.var + o];
                *yo = p.values[bn.gamma + o] * (*yo - mean) / (var + BN_EPSILON).sqrt() + p.values[bn.beta + o];
            }
        }
        for yo in &mut y {
            if *yo <= 0.0 {
                *yo = 0.0;
            }
        }
        x = y;
    }
    let d = &p.layout.output;
    dense_forward(p.slice(d.w, d.fan_in * d.fan_out), p.slice(d.b, d.fan_out), &x, out);
}

/// Predicted class per sample: argmax of the logits, lowest index on ties.
pub fn predict<S: ContextSource + ?Sized>(p: &ModelParams, src: &S, samples: Option<&[usize]>) -> Result<Vec<usize>> {
    Ok(forward(p, src, samples)?.predictions())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Training-pass options.
#[derive(Clone, Copy, Debug)]
struct PassMode {
    /// Dropout masks are drawn from this substream index when `Some`.
    dropout: Option<(u64, [u64; 2])>,
}

struct PassOutput {
    losses: Vec<f64>,
    predictions: Vec<usize>,
    grads: Vec<f64>,
    /// Batch mean and biased variance per batch-normalized layer.
    batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

struct LayerCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_relu: Vec<f64>,
    mask: Vec<f64>,
}

/// Layer-by-layer forward and backward pass over one batch in training
/// mode. Per-unit reductions over the batch run sequentially in sample
/// order; parallel loops only split independent outputs.
fn batch_pass<S: ContextSource + ?Sized>(
    p: &ModelParams,
    dropout_rate: f64,
    src: &S,
    samples: &[usize],
    labels: &[usize],
    mode: PassMode,
) -> PassOutput {
    let arch = &p.layout.arch;
    let (b, d0, c, h) = (samples.len(), arch.repr_dim, arch.num_classes, arch.half_width);
    let prep = Prepared::new(p);
    let mut rep = vec![0.0; b * d0];
    let mut arg = vec![0u32; b * d0];
    rep.par_chunks_mut(d0).zip(arg.par_chunks_mut(d0)).zip(samples.par_iter()).for_each_init(
        || vec![0.0; d0],
        |z, ((r, a), &s)| prep.represent(src, s, r, a, z),
    );

    let mut dropout_rng = mode.dropout.map(|(seed, idx)| substream(seed, "dropout", &idx));
    let mut caches = Vec::with_capacity(p.layout.head.len());
    let mut batch_stats = Vec::new();
    let mut x = rep.clone();
    for d in &p.layout.head {
        let (n_in, n_out) = (d.fan_in, d.fan_out);
        let mut y = vec![0.0; b * n_out];
        let (w, bias) = (p.slice(d.w, n_in * n_out), p.slice(d.b, n_out));
        y.par_chunks_mut(n_out)
            .zip(x.par_chunks(n_in))
            .for_each(|(yo, xi)| dense_forward(w, bias, xi, yo));
        let mut xhat = Vec::new();
        let mut inv_std = Vec::new();
        if let Some(bn) = d.bn {
            let mut mean = vec![0.0; n_out];
            let mut var = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = 0.0;
                for s in 0..b {
                    acc += y[s * n_out + o];
                }
                mean[o] = acc / b as f64;
                let mut acc = 0.0;
                for s in 0..b {
                    let dev = y[s * n_out + o] - mean[o];
                    acc += dev * dev;
                }
                var[o] = acc / b as f64;
            }
            inv_std = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
            xhat = vec![0.0; b * n_out];
            for s in 0..b {
                for o in 0..n_out {
                    let k = s * n_out + o;
                    xhat[k] = (y[k] - mean[o]) * inv_std[o];
                    y[k] = p.values[bn.gamma + o] * xhat[k] + p.values[bn.beta + o];
                }
            }
            batch_stats.push((mean, var));
        }
        let pre_relu = y.clone();
        let mut mask = Vec::new();
        if let Some(rng) = dropout_rng.as_mut() {
            let keep = 1.0 - dropout_rate;
            mask = (0..b * n_out)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
        }
        for (k, v) in y.iter_mut().enumerate() {
            if *v <= 0.0 {
                *v = 0.0;
            }
            if !mask.is_empty() {
                *v *= mask[k];
            }
        }
        caches.push(LayerCache { input: std::mem::replace(&mut x, y), xhat, inv_std, pre_relu, mask });
    }

    let out = &p.layout.output;
    let mut logits = vec![0.0; b * c];
    let (w, bias) = (p.slice(out.w, out.fan_in * c), p.slice(out.b, c));
    logits
        .par_chunks_mut(c)
        .zip(x.par_chunks(out.fan_in))
        .for_each(|(lo, xi)| dense_forward(w, bias, xi, lo));

    let mut losses = vec![0.0; b];
    let mut predictions = vec![0; b];
    let mut delta = vec![0.0; b * c];
    for s in 0..b {
        let l = &logits[s * c..(s + 1) * c];
        let lse = log_sum_exp(l);
        losses[s] = lse - l[labels[s]];
        predictions[s] = argmax(l);
        for k in 0..c {
            let mut g = (l[k] - lse).exp();
            if k == labels[s] {
                g -= 1.0;
            }
            delta[s * c + k] = g / b as f64;
        }
    }

    let mut grads = vec![0.0; p.layout.n_params];
    let mut da = dense_backward(p, out, &x, &delta, b, &mut grads);
    for (d, cache) in p.layout.head.iter().zip(caches).rev() {
        let n_out = d.fan_out;
        for (k, g) in da.iter_mut().enumerate() {
            if !cache.mask.is_empty() {
                *g *= cache.mask[k];
            }
            if cache.pre_relu[k] <= 0.0 {
                *g = 0.0;
            }
        }
        if let Some(bn) = d.bn {
            for o in 0..n_out {
                let gamma = p.values[bn.gamma + o];
                let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                for s in 0..b {
                    let k = s * n_out + o;
                    sum_dy += da[k];
                    sum_dy_xhat += da[k] * cache.xhat[k];
                }
                grads[bn.beta + o] = sum_dy;
                grads[bn.gamma + o] = sum_dy_xhat;
                let scale = gamma * cache.inv_std[o] / b as f64;
                for s in 0..b {
                    let k = s * n_out + o;
                    da[k] = scale * (b as f64 * da[k] - sum_dy - cache.xhat[k] * sum_dy_xhat);
                }
            }
        }
        da = dense_backward(p, d, &cache.input, &da, b, &mut grads);
    }

    // Shared layer: each unit's gradient flows to its winning row only, and
    // only where that row's activation was positive.
    for (k, g) in da.iter_mut().enumerate() {
        if rep[k] <= 0.0 {
            *g = 0.0;
        }
    }
    let repr = &p.layout.repr;
    let (gw, rest) = grads[repr.w..].split_at_mut(d0 * 2 * h);
    let gb = &mut rest[repr.b - repr.w - d0 * 2 * h..][..d0];
    gw.par_chunks_mut(2 * h).zip(gb.par_iter_mut()).enumerate().for_each(|(i, (row, gbi))| {
        for s in 0..b {
            let g = da[s * d0 + i];
            if g == 0.0 {
                continue;
            }
            *gbi += g;
            let anchor = src.anchor(samples[s]);
            let ctx = src.context(samples[s], arg[s * d0 + i] as usize);
            for k in 0..h {
                row[k] += g * anchor[k];
                row[h + k] += g * ctx[k];
            }
        }
    });

    PassOutput { losses, predictions, grads, batch_stats }
}

/// Accumulates weight and bias gradients of `d` and returns the gradient
/// with respect to its input.
fn dense_backward(p: &ModelParams, d: &Dense, input: &[f64], delta: &[f64], b: usize, grads: &mut [f64]) -> Vec<f64> {
    let (n_in, n_out) = (d.fan_in, d.fan_out);
    {
        let (gw, rest) = grads[d.w..].split_at_mut(n_in * n_out);
        let gb = &mut rest[d.b - d.w - n_in * n_out..][..n_out];
        gw.par_chunks_mut(n_in).zip(gb.par_iter_mut()).enumerate().for_each(|(o, (row, gbo))| {
            for s in 0..b {
                let g = delta[s * n_out + o];
                *gbo += g;
                let xi = &input[s * n_in..(s + 1) * n_in];
                for (r, x) in row.iter_mut().zip(xi) {
                    *r += g * x;
                }
            }
        });
    }
    let w = p.slice(d.w, n_in * n_out);
    let mut dx = vec![0.0; b * n_in];
    dx.par_chunks_mut(n_in).enumerate().for_each(|(s, dxs)| {
        for o in 0..n_out {
            let g = delta[s * n_out + o];
            let row = &w[o * n_in..(o + 1) * n_in];
            for (dxi, wi) in dxs.iter_mut().zip(row) {
                *dxi += g * wi;
            }
        }
    });
    dx
}

fn check_labels(p: &ModelParams, labels: &[usize], expected: usize) -> Result<()> {
    if labels.len() != expected {
        return Err(Error::ShapeMismatch(format!("{} labels for {expected} samples", labels.len())));
    }
    let c = p.layout.arch.num_classes;
    match labels.iter().find(|&&l| l >= c) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes: c }),
        None => Ok(()),
    }
}

/// Mean cross-entropy over `samples` and its gradient with respect to
/// [`ModelParams::values`]. Batch normalization, if enabled, uses the
/// statistics of this batch; dropout is off.
pub fn loss_and_grad<S: ContextSource + ?Sized>(
    p: &ModelParams,
    src: &S,
    samples: &[usize],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_source(p, src, samples)?;
    check_labels(p, labels, samples.len())?;
    let out = batch_pass(p, 0.0, src, samples, labels, PassMode { dropout: None });
    let loss = out.losses.iter().sum::<f64>() / samples.len() as f64;
    Ok((loss, out.grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimState {
    pub fn new(n: usize) -> OptimState {
        OptimState { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, epsilon: ADAM_EPSILON }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut OptimState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batch passes.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Whether this epoch's parameters became the retained best.
    pub best: bool,
}

pub type TrainLog = Vec<EpochRecord>;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the highest validation accuracy, the
    /// earliest on ties; the final parameters without a validation set.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub final_params: ModelParams,
    pub log: TrainLog,
}

/// Mini-batch Adam on `train`. Each epoch visits the samples in an order
/// drawn from substream `("train-shuffle", [epoch])` of the config seed.
pub fn train<S, V>(
    config: &ModelConfig,
    train: &S,
    train_labels: &[usize],
    val: Option<(&V, &[usize])>,
) -> Result<TrainOutcome>
where
    S: ContextSource + ?Sized,
    V: ContextSource + ?Sized,
{
    config.validate()?;
    train_unchecked(config, train, train_labels, val)
}

/// [`train`] without config validation, so a zero learning rate can be run.
fn train_unchecked<S, V>(
    config: &ModelConfig,
    train: &S,
    train_labels: &[usize],
    val: Option<(&V, &[usize])>,
) -> Result<TrainOutcome>
where
    S: ContextSource + ?Sized,
    V: ContextSource + ?Sized,
{
    let n = train.num_samples();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut params = ModelParams::init(&config.architecture(), &mut substream(config.seed, "init", &[]));
    let all: Vec<usize> = (0..n).collect();
    check_source(&params, train, &all)?;
    check_labels(&params, train_labels, n)?;
    if let Some((v, vl)) = val {
        let vall: Vec<usize> = (0..v.num_samples()).collect();
        check_source(&params, v, &vall)?;
        check_labels(&params, vl, vall.len())?;
    }

    let mut state = OptimState::new(params.values.len());
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        let mut order = all.clone();
        order.shuffle(&mut substream(config.seed, "train-shuffle", &[epoch as u64]));
        let mut losses = vec![0.0; n];
        let mut correct = vec![false; n];
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&s| train_labels[s]).collect();
            let mode = PassMode {
                dropout: (config.dropout > 0.0).then_some((config.seed, [epoch as u64, bi as u64])),
            };
            let out = batch_pass(&params, config.dropout, train, batch, &labels, mode);
            for (k, &s) in batch.iter().enumerate() {
                losses[s] = out.losses[k];
                correct[s] = out.predictions[k] == labels[k];
            }
            adam_step(&mut state, &mut params.values, &out.grads, config.learning_rate)?;
            update_running_stats(&mut params, &out.batch_stats);
        }
        let train_loss = losses.iter().sum::<f64>() / n as f64;
        let train_accuracy = correct.iter().filter(|&&c| c).count() as f64 / n as f64;
        let val_accuracy = match val {
            Some((v, vl)) if v.num_samples() > 0 => {
                let preds = predict(&params, v, None)?;
                Some(preds.iter().zip(vl).filter(|(p, t)| p == t).count() as f64 / vl.len() as f64)
            }
            _ => None,
        };
        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_accuracy.is_some() && score > *b,
        };
        if improved {
            best = Some((score, epoch, params.clone()));
        }
        log.push(EpochRecord { epoch, train_loss, train_accuracy, val_accuracy, best: improved });
    }
    let (best, best_epoch) = match best {
        Some((_, e, p)) if val.is_some_and(|(v, _)| v.num_samples() > 0) => (p, e),
        _ => (params.clone(), config.epochs),
    };
    Ok(TrainOutcome { best, best_epoch, final_params: params, log })
}

fn update_running_stats(p: &mut ModelParams, stats: &[(Vec<f64>, Vec<f64>)]) {
    let layers: Vec<(BnOffsets, usize)> =
        p.layout.head.iter().filter_map(|d| d.bn.map(|bn| (bn, d.fan_out))).collect();
    for ((bn, width), (mean, var)) in layers.into_iter().zip(stats) {
        for o in 0..width {
            let rm = &mut p.buffers[bn.mean + o];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[o];
            let rv = &mut p.buffers[bn.var + o];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[o];
        }
    }
}

/// JSON half of a saved model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub sections: Vec<Section>,
    /// File name of the little-endian `f64` blob, next to the manifest.
    pub blob: String,
    /// Parameter values in the blob, followed by buffer values.
    pub n_params: usize,
    pub n_buffers: usize,
}

/// A trained classifier with its configuration and class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub params: ModelParams,
}

impl Model {
    /// Writes `path` (JSON) and the parameter blob beside it with a `.bin`
    /// extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidSpec(format!("bad model path {}", path.display())))?
            .to_string();
        let manifest = ModelManifest {
            format: MODEL_FORMAT.to_string(),
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            sections: self.params.sections().to_vec(),
            blob: blob_name,
            n_params: self.params.values.len(),
            n_buffers: self.params.buffers.len(),
        };
        let mut bytes = Vec::with_capacity(8 * (manifest.n_params + manifest.n_buffers));
        for v in self.params.values.iter().chain(&self.params.buffers) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&blob_path, bytes)?;
        fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let manifest: ModelManifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::InvalidSpec(format!("unknown model format `{}`", manifest.format)));
        }
        manifest.config.validate()?;
        let arch = manifest.config.architecture();
        let layout = Layout::new(&arch);
        if layout.sections != manifest.sections {
            return Err(Error::ShapeMismatch("section manifest disagrees with the config".into()));
        }
        if manifest.class_names.len() != manifest.config.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} class names for {} classes",
                manifest.class_names.len(),
                manifest.config.num_classes
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let bytes = fs::read(dir.join(&manifest.blob))?;
        if bytes.len() != 8 * (manifest.n_params + manifest.n_buffers) {
            return Err(Error::TruncatedFile(format!(
                "parameter blob holds {} bytes, manifest implies {}",
                bytes.len(),
                8 * (manifest.n_params + manifest.n_buffers)
            )));
        }
        let mut all: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let buffers = all.split_off(manifest.n_params);
        let params = ModelParams::from_parts(&arch, all, buffers)?;
        Ok(Model { config: manifest.config, class_names: manifest.class_names, params })
    }
}
