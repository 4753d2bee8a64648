//! Residual lowlight adapter: `clip(I + lambda * tanh(delta(I)))` where
//! `delta` is a small convolutional residual stack.
//!
//! Feature maps are planar (`channel x height x width`). Convolutions use
//! replicate padding so spatial size is preserved. Conv weights are indexed
//! `[out][in][ky][kx]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{pixel_loss, ssim_loss, Image, PixelLossKind, SSIM_WINDOW};
use crate::rng::SeededRng;

pub const DEFAULT_LAMBDA: f64 = 0.5;
const INIT_RANGE: f64 = 0.05;
const ADAPTER_MAGIC: &str = "lowsplat-adapter";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterArch {
    /// A single 3 -> 3 convolution.
    Linear { kernel: usize },
    /// Stem conv 3 -> width with ReLU, `blocks` residual blocks of
    /// `[conv, ReLU, conv, +skip]`, then a head conv width -> 3.
    Residual { width: usize, kernel: usize, blocks: usize },
}

impl Default for AdapterArch {
    fn default() -> Self {
        AdapterArch::Residual {
            width: 16,
            kernel: 3,
            blocks: 2,
        }
    }
}

impl AdapterArch {
    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        match *self {
            AdapterArch::Linear { kernel } => vec![(3, 3, kernel)],
            AdapterArch::Residual { width, kernel, blocks } => {
                let mut v = vec![(3, width, kernel)];
                for _ in 0..2 * blocks {
                    v.push((width, width, kernel));
                }
                v.push((width, 3, kernel));
                v
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (k, w) = match *self {
            AdapterArch::Linear { kernel } => (kernel, 3),
            AdapterArch::Residual { width, kernel, .. } => (kernel, width),
        };
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(format!("adapter kernel must be odd, got {k}")));
        }
        if w == 0 {
            return Err(Error::invalid("adapter width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            kernel,
            weights: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub lambda: f64,
    pub arch: AdapterArch,
    pub layers: Vec<ConvLayer>,
}

/// Gradients shaped like [`AdapterParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGradients {
    pub layers: Vec<ConvLayer>,
}

impl AdapterGradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    fn zeros_like(params: &AdapterParams) -> Self {
        AdapterGradients {
            layers: params
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.in_ch, l.out_ch, l.kernel))
                .collect(),
        }
    }

    fn add_scaled(&mut self, other: &AdapterGradients, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += s * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += s * y);
        }
    }
}

fn flatten_layers(layers: &[ConvLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

impl AdapterParams {
    /// All-zero parameters (`delta == 0`, so `adapt` is the identity).
    pub fn zeros(arch: AdapterArch, lambda: f64) -> Result<Self> {
        arch.validate()?;
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
        }
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o, k)| ConvLayer::zeros(i, o, k))
            .collect();
        Ok(AdapterParams { lambda, arch, layers })
    }

    /// Uniform `+-0.05` weights with a zero head, so the adapter starts at identity.
    pub fn init(arch: AdapterArch, lambda: f64, seed: u64) -> Result<Self> {
        let mut p = AdapterParams::zeros(arch, lambda)?;
        let mut rng = SeededRng::for_view(seed, "adapter-init", 0);
        let last = p.layers.len() - 1;
        for layer in &mut p.layers[..last] {
            for w in &mut layer.weights {
                *w = rng.uniform(-INIT_RANGE, INIT_RANGE);
            }
            for b in &mut layer.bias {
                *b = rng.uniform(-INIT_RANGE, INIT_RANGE);
            }
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "adapter has {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&values[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check(&self) -> Result<()> {
        let shapes = self.arch.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::DimensionMismatch("layer count does not match architecture".into()));
        }
        for (l, (i, o, k)) in self.layers.iter().zip(shapes) {
            if l.in_ch != i || l.out_ch != o || l.kernel != k {
                return Err(Error::DimensionMismatch(format!(
                    "layer {}->{} k{} does not match architecture {i}->{o} k{k}",
                    l.in_ch, l.out_ch, l.kernel
                )));
            }
            if l.weights.len() != o * i * k * k || l.bias.len() != o {
                return Err(Error::DimensionMismatch("layer weight count".into()));
            }
        }
        Ok(())
    }

    /// Text container: header line then one value per line at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let arch = match self.arch {
            AdapterArch::Linear { kernel } => format!("arch=linear kernel={kernel}"),
            AdapterArch::Residual { width, kernel, blocks } => {
                format!("arch=residual width={width} kernel={kernel} blocks={blocks}")
            }
        };
        let _ = writeln!(
            out,
            "{ADAPTER_MAGIC} v1 lambda={:.16e} {arch} count={}",
            self.lambda,
            self.param_count()
        );
        for v in self.flatten() {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let bad = |line: usize, reason: String| Error::MalformedRecord { line, reason };
        let mut parts = header.split_ascii_whitespace();
        if parts.next() != Some(ADAPTER_MAGIC) || parts.next() != Some("v1") {
            return Err(bad(1, "expected `lowsplat-adapter v1` header".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(1, format!("bad header field `{kv}`")))?;
            fields.insert(k, v);
        }
        let get_usize = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(1, format!("missing or invalid `{k}`")))
        };
        let lambda: f64 = fields
            .get("lambda")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1, "missing lambda".into()))?;
        let arch = match fields.get("arch").copied() {
            Some("linear") => AdapterArch::Linear {
                kernel: get_usize("kernel")?,
            },
            Some("residual") => AdapterArch::Residual {
                width: get_usize("width")?,
                kernel: get_usize("kernel")?,
                blocks: get_usize("blocks")?,
            },
            other => return Err(bad(1, format!("unknown arch {other:?}"))),
        };
        let count = get_usize("count")?;
        let mut params = AdapterParams::zeros(arch, lambda).map_err(|e| bad(1, e.to_string()))?;
        let values: Vec<f64> = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| l.trim().parse::<f64>().map_err(|e| bad(i + 2, e.to_string())))
            .collect::<Result<_>>()?;
        if values.len() != count || count != params.param_count() {
            return Err(bad(
                1,
                format!(
                    "expected {} weights for the architecture, header says {count}, found {}",
                    params.param_count(),
                    values.len()
                ),
            ));
        }
        params.set_flat(&values)?;
        Ok(params)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AdapterParams::from_text(&text)
    }
}

/// Planar feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Planes {
    fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Planes {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut p = Planes::zeros(3, w, h);
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                p.data[c * w * h + i] = px[c];
            }
        }
        p
    }

    pub fn to_image(&self) -> Image {
        let (w, h) = (self.width, self.height);
        Image::from_fn(w, h, |x, y| {
            let i = y * w + x;
            [self.data[i], self.data[w * h + i], self.data[2 * w * h + i]]
        })
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Replicate-padded copy of one plane.
fn pad_plane(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let mut out = vec![0.0; pw * ph];
    for py in 0..ph {
        let sy = (py as isize - r as isize).clamp(0, h as isize - 1) as usize;
        for px in 0..pw {
            let sx = (px as isize - r as isize).clamp(0, w as isize - 1) as usize;
            out[py * pw + px] = src[sy * w + sx];
        }
    }
    out
}

/// Adjoint of [`pad_plane`].
fn unpad_plane_add(padded: &[f64], w: usize, h: usize, r: usize, dst: &mut [f64]) {
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    for py in 0..ph {
        let sy = (py as isize - r as isize).clamp(0, h as isize - 1) as usize;
        for px in 0..pw {
            let sx = (px as isize - r as isize).clamp(0, w as isize - 1) as usize;
            dst[sy * w + sx] += padded[py * pw + px];
        }
    }
}

fn conv_forward(layer: &ConvLayer, input: &Planes) -> Planes {
    let (w, h) = (input.width, input.height);
    let r = layer.kernel / 2;
    let pw = w + 2 * r;
    let padded: Vec<Vec<f64>> = (0..layer.in_ch).map(|i| pad_plane(input.plane(i), w, h, r)).collect();
    let mut out = Planes::zeros(layer.out_ch, w, h);
    for o in 0..layer.out_ch {
        let bias = layer.bias[o];
        let dst = out.plane_mut(o);
        dst.fill(bias);
        for (i, pad) in padded.iter().enumerate() {
            for ky in 0..layer.kernel {
                for kx in 0..layer.kernel {
                    let wt = layer.weights[layer.weight_index(o, i, ky, kx)];
                    if wt == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let src = &pad[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let row = &mut dst[y * w..(y + 1) * w];
                        for (d, s) in row.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient; accumulates weight/bias gradients into `grad`.
fn conv_backward(layer: &ConvLayer, input: &Planes, d_out: &Planes, grad: &mut ConvLayer) -> Planes {
    let (w, h) = (input.width, input.height);
    let r = layer.kernel / 2;
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let padded: Vec<Vec<f64>> = (0..layer.in_ch).map(|i| pad_plane(input.plane(i), w, h, r)).collect();
    let mut d_padded = vec![vec![0.0; pw * ph]; layer.in_ch];
    for o in 0..layer.out_ch {
        let g = d_out.plane(o);
        grad.bias[o] += g.iter().sum::<f64>();
        for (i, pad) in padded.iter().enumerate() {
            for ky in 0..layer.kernel {
                for kx in 0..layer.kernel {
                    let wi = layer.weight_index(o, i, ky, kx);
                    let wt = layer.weights[wi];
                    let mut acc = 0.0;
                    let dp = &mut d_padded[i];
                    for y in 0..h {
                        let base = (y + ky) * pw + kx;
                        let src = &pad[base..base + w];
                        let grow = &g[y * w..(y + 1) * w];
                        acc += src.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        if wt != 0.0 {
                            for (d, gv) in dp[base..base + w].iter_mut().zip(grow) {
                                *d += wt * gv;
                            }
                        }
                    }
                    grad.weights[wi] += acc;
                }
            }
        }
    }
    let mut d_in = Planes::zeros(layer.in_ch, w, h);
    for (i, dp) in d_padded.iter().enumerate() {
        unpad_plane_add(dp, w, h, r, d_in.plane_mut(i));
    }
    d_in
}

fn relu(p: &Planes) -> Planes {
    let mut out = p.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn relu_backward(pre: &Planes, d: &mut Planes) {
    for (g, &x) in d.data.iter_mut().zip(&pre.data) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Activations kept for the backward pass.
struct Trace {
    /// Input to each conv layer, in layer order.
    inputs: Vec<Planes>,
    /// Pre-activation outputs of convs followed by ReLU, keyed by layer index.
    pre_relu: Vec<Option<Planes>>,
    output: Planes,
}

fn forward_trace(params: &AdapterParams, x: &Planes) -> Trace {
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre_relu = vec![None; n];
    match params.arch {
        AdapterArch::Linear { .. } => {
            inputs.push(x.clone());
            let output = conv_forward(&params.layers[0], x);
            Trace {
                inputs,
                pre_relu,
                output,
            }
        }
        AdapterArch::Residual { blocks, .. } => {
            inputs.push(x.clone());
            let stem = conv_forward(&params.layers[0], x);
            let mut h = relu(&stem);
            pre_relu[0] = Some(stem);
            for b in 0..blocks {
                let l1 = 1 + 2 * b;
                inputs.push(h.clone());
                let a = conv_forward(&params.layers[l1], &h);
                let act = relu(&a);
                pre_relu[l1] = Some(a);
                inputs.push(act.clone());
                let c = conv_forward(&params.layers[l1 + 1], &act);
                for (hv, cv) in h.data.iter_mut().zip(&c.data) {
                    *hv += cv;
                }
            }
            inputs.push(h.clone());
            let output = conv_forward(&params.layers[n - 1], &h);
            Trace {
                inputs,
                pre_relu,
                output,
            }
        }
    }
}

/// Backpropagates `d_out` (gradient on delta's output) through the stack.
fn backward_trace(params: &AdapterParams, trace: &Trace, d_out: &Planes, grads: &mut AdapterGradients) -> Planes {
    let n = params.layers.len();
    match params.arch {
        AdapterArch::Linear { .. } => conv_backward(&params.layers[0], &trace.inputs[0], d_out, &mut grads.layers[0]),
        AdapterArch::Residual { blocks, .. } => {
            let mut d_h = conv_backward(&params.layers[n - 1], &trace.inputs[n - 1], d_out, &mut grads.layers[n - 1]);
            for b in (0..blocks).rev() {
                let l1 = 1 + 2 * b;
                let mut d_act = conv_backward(
                    &params.layers[l1 + 1],
                    &trace.inputs[l1 + 1],
                    &d_h,
                    &mut grads.layers[l1 + 1],
                );
                relu_backward(trace.pre_relu[l1].as_ref().expect("block pre-activation"), &mut d_act);
                let d_skip = conv_backward(&params.layers[l1], &trace.inputs[l1], &d_act, &mut grads.layers[l1]);
                for (a, b) in d_h.data.iter_mut().zip(&d_skip.data) {
                    *a += b;
                }
            }
            relu_backward(trace.pre_relu[0].as_ref().expect("stem pre-activation"), &mut d_h);
            conv_backward(&params.layers[0], &trace.inputs[0], &d_h, &mut grads.layers[0])
        }
    }
}

/// Residual field `delta(img)` as an `H x W x 3` image (values unbounded).
pub fn delta_forward(img: &Image, params: &AdapterParams) -> Result<Image> {
    params.check()?;
    Ok(forward_trace(params, &Planes::from_image(img)).output.to_image())
}

/// `clip(img + lambda * tanh(delta(img)), 0, 1)`.
pub fn adapt(img: &Image, params: &AdapterParams) -> Result<Image> {
    if params.lambda == 0.0 {
        return Ok(img.clipped());
    }
    let delta = delta_forward(img, params)?;
    let lambda = params.lambda;
    let mut out = img.clone();
    for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o = (*o + lambda * d.tanh()).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Gradients of `sum(upstream * adapt(img))` w.r.t. the conv parameters and the input image.
pub fn adapt_backward(img: &Image, params: &AdapterParams, upstream: &Image) -> Result<(AdapterGradients, Image)> {
    params.check()?;
    if !img.same_shape(upstream) {
        return Err(Error::DimensionMismatch("upstream gradient does not match image".into()));
    }
    let x = Planes::from_image(img);
    let trace = forward_trace(params, &x);
    let lambda = params.lambda;
    let up = Planes::from_image(upstream);
    let mut d_pre = up.clone();
    let mut d_delta = Planes::zeros(3, x.width, x.height);
    for i in 0..x.data.len() {
        let th = trace.output.data[i].tanh();
        let pre = x.data[i] + lambda * th;
        // Clip subgradient: identity on [0, 1] inclusive, zero outside.
        if !(0.0..=1.0).contains(&pre) {
            d_pre.data[i] = 0.0;
        }
        d_delta.data[i] = d_pre.data[i] * lambda * (1.0 - th * th);
    }
    let mut grads = AdapterGradients::zeros_like(params);
    let d_x_net = backward_trace(params, &trace, &d_delta, &mut grads);
    let mut d_x = d_pre;
    for (a, b) in d_x.data.iter_mut().zip(&d_x_net.data) {
        *a += b;
    }
    Ok((grads, d_x.to_image()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    /// Multiplied into the step size after `patience` epochs without improvement.
    pub decay: f64,
    pub patience: usize,
    pub lambda_per: f64,
    pub pixel_loss: PixelLossKind,
    pub optimizer: Optimizer,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            epochs: 200,
            step_size: 0.01,
            decay: 0.5,
            patience: 10,
            lambda_per: 0.2,
            pixel_loss: PixelLossKind::L2,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    /// Adam with `beta = (0.9, 0.999)`.
    Adam,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    /// Mean objective at the start of each epoch.
    pub loss_trace: Vec<f64>,
    pub best_loss: f64,
}

/// Objective `pixel_loss + lambda_per * ssim_loss` averaged over pairs, with gradient.
pub fn adapter_objective(
    pairs: &[(Image, Image)],
    params: &AdapterParams,
    lambda_per: f64,
    kind: PixelLossKind,
) -> Result<(f64, AdapterGradients)> {
    let per_pair: Vec<(f64, AdapterGradients)> = pairs
        .par_iter()
        .map(|(degraded, clean)| {
            let out = adapt(degraded, params)?;
            let pl = pixel_loss(&out, clean, kind)?;
            let mut value = pl.value;
            let mut up = pl.gradient;
            if lambda_per != 0.0 && out.width() >= SSIM_WINDOW && out.height() >= SSIM_WINDOW {
                let sl = ssim_loss(&out, clean)?;
                value += lambda_per * sl.value;
                for (u, g) in up.data_mut().iter_mut().zip(sl.gradient.data()) {
                    *u += lambda_per * g;
                }
            }
            let (g, _) = adapt_backward(degraded, params, &up)?;
            Ok((value, g))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let mut grads = AdapterGradients::zeros_like(params);
    for (v, g) in &per_pair {
        total += v;
        grads.add_scaled(g, 1.0 / n);
    }
    Ok((total / n, grads))
}

/// Full-batch descent on the adapter objective; returns the best parameters seen.
pub fn train_adapter(
    pairs: &[(Image, Image)],
    init: AdapterParams,
    cfg: &AdapterTrainConfig,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("adapter training needs at least one pair".into()));
    }
    for (a, b) in pairs {
        if !a.same_shape(b) {
            return Err(Error::DimensionMismatch("training pair sizes differ".into()));
        }
    }
    let mut opt = OptimizerState::new(cfg, init.param_count());
    let mut params = init;
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut best = (f64::INFINITY, params.clone());
    for _ in 0..cfg.epochs {
        let (loss, grads) = adapter_objective(pairs, &params, cfg.lambda_per, cfg.pixel_loss)?;
        trace.push(loss);
        opt.observe(loss, cfg);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        let mut flat = params.flatten();
        opt.step(&mut flat, &grads.flatten(), cfg);
        params.set_flat(&flat)?;
        if !params.is_finite() {
            break;
        }
    }
    let (final_loss, _) = adapter_objective(pairs, &params, cfg.lambda_per, cfg.pixel_loss)?;
    trace.push(final_loss);
    if final_loss < best.0 {
        best = (final_loss, params);
    }
    Ok(TrainOutcome {
        params: best.1,
        loss_trace: trace,
        best_loss: best.0,
    })
}

struct OptimizerState {
    step_size: f64,
    best: f64,
    since_best: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(cfg: &AdapterTrainConfig, n: usize) -> Self {
        OptimizerState {
            step_size: cfg.step_size,
            best: f64::INFINITY,
            since_best: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn observe(&mut self, loss: f64, cfg: &AdapterTrainConfig) {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= cfg.patience {
                self.step_size *= cfg.decay;
                self.since_best = 0;
            }
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], cfg: &AdapterTrainConfig) {
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (xi, gi) in x.iter_mut().zip(g) {
                    *xi -= self.step_size * gi;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..x.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
                    x[i] -= self.step_size * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = SeededRng::for_view(seed, "adapter-test", 0);
        Image::from_fn(w, h, |_, _| [rng.uniform01(), rng.uniform01(), rng.uniform01()])
    }

    fn random_params(arch: AdapterArch, seed: u64, scale: f64) -> AdapterParams {
        let mut p = AdapterParams::zeros(arch, 0.5).unwrap();
        let mut rng = SeededRng::for_view(seed, "adapter-test-params", 0);
        let flat: Vec<f64> = (0..p.param_count()).map(|_| rng.uniform(-scale, scale)).collect();
        p.set_flat(&flat).unwrap();
        p
    }

    /// Direct-summation reference for one conv layer with replicate padding.
    fn naive_conv(layer: &ConvLayer, input: &[Vec<f64>], w: usize, h: usize) -> Vec<Vec<f64>> {
        let r = (layer.kernel / 2) as isize;
        let mut out = vec![vec![0.0; w * h]; layer.out_ch];
        for o in 0..layer.out_ch {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = layer.bias[o];
                    for i in 0..layer.in_ch {
                        for ky in 0..layer.kernel as isize {
                            for kx in 0..layer.kernel as isize {
                                let sy = (y + ky - r).clamp(0, h as isize - 1) as usize;
                                let sx = (x + kx - r).clamp(0, w as isize - 1) as usize;
                                acc += layer.weights[layer.weight_index(o, i, ky as usize, kx as usize)]
                                    * input[i][sy * w + sx];
                            }
                        }
                    }
                    out[o][y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_params_give_zero_residual() {
        let p = AdapterParams::zeros(AdapterArch::default(), 0.5).unwrap();
        let d = delta_forward(&noise_image(8, 6, 1), &p).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_identity_layer_returns_input() {
        let mut p = AdapterParams::zeros(AdapterArch::Linear { kernel: 1 }, 0.5).unwrap();
        for c in 0..3 {
            let i = p.layers[0].weight_index(c, c, 0, 0);
            p.layers[0].weights[i] = 1.0;
        }
        let img = noise_image(5, 4, 2);
        assert_eq!(delta_forward(&img, &p).unwrap(), img);
    }

    #[test]
    fn residual_stack_matches_naive_convolution() {
        let arch = AdapterArch::Residual {
            width: 4,
            kernel: 3,
            blocks: 1,
        };
        let p = random_params(arch, 3, 0.4);
        let img = noise_image(7, 6, 4);
        let (w, h) = (7, 6);
        let planes = Planes::from_image(&img);
        let x: Vec<Vec<f64>> = (0..3).map(|c| planes.plane(c).to_vec()).collect();
        let relu_v = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.into_iter().map(|p| p.into_iter().map(|a| a.max(0.0)).collect()).collect()
        };
        let h0 = relu_v(naive_conv(&p.layers[0], &x, w, h));
        let a = relu_v(naive_conv(&p.layers[1], &h0, w, h));
        let c = naive_conv(&p.layers[2], &a, w, h);
        let h1: Vec<Vec<f64>> = h0
            .iter()
            .zip(&c)
            .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect())
            .collect();
        let out = naive_conv(&p.layers[3], &h1, w, h);
        let got = Planes::from_image(&delta_forward(&img, &p).unwrap());
        for ch in 0..3 {
            for (g, e) in got.plane(ch).iter().zip(&out[ch]) {
                assert!((g - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adapt_identity_cases_and_bound() {
        let img = noise_image(9, 9, 5);
        let mut p = random_params(AdapterArch::default(), 6, 0.3);
        p.lambda = 0.0;
        assert_eq!(adapt(&img, &p).unwrap(), img);
        let z = AdapterParams::zeros(AdapterArch::default(), 0.5).unwrap();
        assert_eq!(adapt(&img, &z).unwrap(), img);
        p.lambda = 0.2;
        let out = adapt(&img, &p).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!((o - i).abs() <= 0.2 + 1e-15);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let p = random_params(AdapterArch::default(), 7, 0.3);
        let img = noise_image(6, 6, 8);
        let (g, dx) = adapt_backward(&img, &p, &Image::new(6, 6)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_pixel_has_no_gradient() {
        // Linear 1x1 with a large positive bias: every pixel at 1.0 saturates.
        let mut p = AdapterParams::zeros(AdapterArch::Linear { kernel: 1 }, 0.5).unwrap();
        p.layers[0].bias = vec![5.0; 3];
        let img = Image::filled(3, 3, [1.0; 3]);
        let up = Image::filled(3, 3, [1.0; 3]);
        let (g, dx) = adapt_backward(&img, &p, &up).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = AdapterArch::Residual {
            width: 4,
            kernel: 3,
            blocks: 1,
        };
        let p = random_params(arch, 9, 0.5);
        let img = noise_image(6, 5, 10).map(|v| 0.2 + 0.5 * v);
        let up = noise_image(6, 5, 11).map(|v| v - 0.5);
        let (g, dx) = adapt_backward(&img, &p, &up).unwrap();
        let f = |q: &AdapterParams, x: &Image| -> f64 {
            adapt(x, q).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let flat = p.flatten();
        let analytic = g.flatten();
        let h = 1e-5;
        let mut ok = 0;
        for i in 0..flat.len() {
            let mut q = p.clone();
            let mut v = flat.clone();
            v[i] += h;
            q.set_flat(&v).unwrap();
            let fp = f(&q, &img);
            v[i] -= 2.0 * h;
            q.set_flat(&v).unwrap();
            let fm = f(&q, &img);
            let fd = (fp - fm) / (2.0 * h);
            if (fd - analytic[i]).abs() <= 1e-3 * fd.abs().max(analytic[i].abs()) + 1e-7 {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * flat.len() as f64, "{ok}/{}", flat.len());
        for i in 0..img.data().len() {
            let mut xp = img.clone();
            xp.data_mut()[i] += h;
            let mut xm = img.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() <= 1e-3 * fd.abs().max(dx.data()[i].abs()) + 1e-7);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let p = random_params(AdapterArch::default(), 12, 0.3);
        let back = AdapterParams::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        let lin = AdapterParams::init(AdapterArch::Linear { kernel: 3 }, 0.25, 1).unwrap();
        assert_eq!(AdapterParams::from_text(&lin.to_text()).unwrap(), lin);
        assert!(AdapterParams::from_text("lowsplat-adapter v1 lambda=0.5 arch=linear kernel=1 count=3\n1\n").is_err());
    }

    #[test]
    fn init_starts_at_identity() {
        let p = AdapterParams::init(AdapterArch::default(), 0.5, 3).unwrap();
        let img = noise_image(8, 8, 13);
        assert_eq!(adapt(&img, &p).unwrap(), img);
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= 0.05));
        assert!(p.layers[0].weights.iter().any(|&w| w != 0.0));
    }

    #[test]
    fn training_rejects_empty_set() {
        let p = AdapterParams::zeros(AdapterArch::default(), 0.5).unwrap();
        assert!(train_adapter(&[], p, &AdapterTrainConfig::default()).is_err());
    }

    #[test]
    fn clean_pairs_stay_at_zero_loss() {
        let img = noise_image(12, 12, 14);
        let pairs = vec![(img.clone(), img)];
        let p = AdapterParams::init(AdapterArch::default(), 0.5, 1).unwrap();
        let cfg = AdapterTrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let out = train_adapter(&pairs, p, &cfg).unwrap();
        assert!(out.best_loss < 1e-12);
        assert!(out.loss_trace[0] < 1e-12);
    }
}
