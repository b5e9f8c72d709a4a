//! Prompt predictor: a small dual-encoder CNN producing a prompt confidence
//! map from an image and its encoder embedding.
//!
//! ```text
//! image [3,S,S]     -> conv3x3/2 -> relu -> conv3x3/2 -> relu -> conv3x3 -> relu -> [32,P,P]
//! embedding [c,P,P] -> conv1x1 -> relu ------------------------------------------> [32,P,P]
//! concat [64,P,P]   -> conv3x3 -> relu -> conv3x3 -> relu -> conv1x1 -> sigmoid -> [1,P,P]
//! ```
//!
//! with `S = 4·P`. Gradients are derived by hand per layer.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_tensor, write_tensor};
use crate::sampler::pixel_to_cell;
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, gaussian_kernel, relu, relu_backward, sigmoid,
    sigmoid_backward, split_channels, Tensor,
};

pub const BRANCH_CHANNELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub image_size: usize,
    pub embed_channels: usize,
    pub fused_channels: usize,
    pub pcm_size: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            image_size: 256,
            embed_channels: 32,
            fused_channels: 2 * BRANCH_CHANNELS,
            pcm_size: 64,
        }
    }
}

impl PredictorConfig {
    /// Config for an embedding of `embed_channels × pcm_size × pcm_size`.
    pub fn for_embedding(embed_channels: usize, pcm_size: usize) -> Self {
        PredictorConfig {
            image_size: 4 * pcm_size,
            embed_channels,
            fused_channels: 2 * BRANCH_CHANNELS,
            pcm_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pcm_size == 0 || self.embed_channels == 0 {
            return Err(Error::Config("pcm_size and embed_channels must be positive".into()));
        }
        if self.image_size != 4 * self.pcm_size {
            return Err(Error::Config(format!(
                "image_size ({}) must be 4 × pcm_size ({})",
                self.image_size, self.pcm_size
            )));
        }
        if self.fused_channels != 2 * BRANCH_CHANNELS {
            return Err(Error::Config(format!(
                "fused_channels must be {}",
                2 * BRANCH_CHANNELS
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub const IMG0: usize = 0;
pub const IMG1: usize = 1;
pub const IMG2: usize = 2;
pub const VIT0: usize = 3;
pub const DEC0: usize = 4;
pub const DEC1: usize = 5;
pub const DEC2: usize = 6;
pub const NUM_LAYERS: usize = 7;

pub fn layer_plan(embed_channels: usize) -> [LayerSpec; NUM_LAYERS] {
    let l = |name, in_ch, out_ch, kernel, stride, padding| LayerSpec {
        name,
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    };
    [
        l("img_enc.0", 3, 16, 3, 2, 1),
        l("img_enc.1", 16, 32, 3, 2, 1),
        l("img_enc.2", 32, BRANCH_CHANNELS, 3, 1, 1),
        l("vit_enc.0", embed_channels, BRANCH_CHANNELS, 1, 1, 0),
        l("decoder.0", 2 * BRANCH_CHANNELS, 32, 3, 1, 1),
        l("decoder.1", 32, 16, 3, 1, 1),
        l("decoder.2", 16, 1, 1, 1, 0),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(spec: LayerSpec) -> Self {
        ConvLayer {
            spec,
            weight: Tensor::zeros(&[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel]),
            bias: Tensor::zeros(&[spec.out_ch]),
        }
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight, &self.bias, self.spec.stride, self.spec.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    pub layers: Vec<ConvLayer>,
}

impl PredictorWeights {
    pub fn zeros(embed_channels: usize) -> Self {
        PredictorWeights {
            layers: layer_plan(embed_channels).into_iter().map(ConvLayer::zeros).collect(),
        }
    }

    /// Kaiming (fan-in) normal initialization, zero biases.
    pub fn init(embed_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(embed_channels);
        for layer in &mut w.layers {
            let fan_in = layer.spec.in_ch * layer.spec.kernel * layer.spec.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in layer.weight.data_mut() {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        w
    }

    /// Sets the output bias so a silent network predicts `mean_target`
    /// everywhere.
    pub fn with_output_prior(mut self, mean_target: f64) -> Self {
        let p = mean_target.clamp(1e-4, 1.0 - 1e-4);
        self.layers[DEC2].bias.data_mut()[0] = (p / (1.0 - p)).ln() as f32;
        self
    }

    pub fn embed_channels(&self) -> usize {
        self.layers[VIT0].spec.in_ch
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Visits every parameter tensor in a fixed order (weight then bias, layer by layer).
    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, params: &[f32]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfidenceMap {
    /// `[pcm_size, pcm_size]` values in `[0, 1]`.
    pub values: Tensor,
    /// `(H, W)` of the image the map refers to.
    pub source_image_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    pub values: Tensor,
}

struct Activations {
    image: Tensor,
    embedding: Tensor,
    img: [Tensor; 3],
    vit: Tensor,
    fused: Tensor,
    dec: [Tensor; 2],
    out: Tensor,
}

fn check_inputs(cfg: &PredictorConfig, image: &Tensor, embedding: &Tensor) -> Result<()> {
    cfg.validate()?;
    let s = cfg.image_size;
    let p = cfg.pcm_size;
    if image.shape() != [3, s, s] {
        return Err(Error::dim(format!(
            "predictor image must be [3, {s}, {s}], got {:?}",
            image.shape()
        )));
    }
    if embedding.shape() != [cfg.embed_channels, p, p] {
        return Err(Error::dim(format!(
            "predictor embedding must be [{}, {p}, {p}], got {:?}",
            cfg.embed_channels,
            embedding.shape()
        )));
    }
    Ok(())
}

fn forward_cached(
    weights: &PredictorWeights,
    cfg: &PredictorConfig,
    image: &Tensor,
    embedding: &Tensor,
) -> Result<Activations> {
    check_inputs(cfg, image, embedding)?;
    if weights.embed_channels() != cfg.embed_channels {
        return Err(Error::dim(format!(
            "weights expect {} embedding channels, config has {}",
            weights.embed_channels(),
            cfg.embed_channels
        )));
    }
    let l = &weights.layers;
    let i0 = relu(&l[IMG0].forward(image)?);
    let i1 = relu(&l[IMG1].forward(&i0)?);
    let i2 = relu(&l[IMG2].forward(&i1)?);
    let vit = relu(&l[VIT0].forward(embedding)?);
    let fused = concat_channels(&[&i2, &vit])?;
    let d0 = relu(&l[DEC0].forward(&fused)?);
    let d1 = relu(&l[DEC1].forward(&d0)?);
    let out = sigmoid(&l[DEC2].forward(&d1)?);
    Ok(Activations {
        image: image.clone(),
        embedding: embedding.clone(),
        img: [i0, i1, i2],
        vit,
        fused,
        dec: [d0, d1],
        out,
    })
}

pub fn forward(
    weights: &PredictorWeights,
    cfg: &PredictorConfig,
    image: &Tensor,
    embedding: &Tensor,
) -> Result<PromptConfidenceMap> {
    let acts = forward_cached(weights, cfg, image, embedding)?;
    let p = cfg.pcm_size;
    let (h, w) = image.hw();
    Ok(PromptConfidenceMap {
        values: acts.out.reshape(&[p, p])?,
        source_image_size: (h, w),
    })
}

/// Gradient of the loss with respect to each parameter tensor, in the order
/// of [`PredictorWeights::flat_params`].
struct Gradients {
    flat: Vec<f32>,
}

impl Gradients {
    fn zeros(n: usize) -> Self {
        Gradients { flat: vec![0.0; n] }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += b;
        }
    }
}

/// Mean-squared error between prediction and target, and its gradient w.r.t.
/// the prediction.
fn mse(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let n = pred.numel() as f64;
    let mut loss = 0.0f64;
    let grad: Vec<f32> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    (loss / n, Tensor::from_vec(pred.shape(), grad).expect("same shape"))
}

fn backward(weights: &PredictorWeights, acts: &Activations, grad_out: &Tensor) -> Result<Gradients> {
    let l = &weights.layers;
    let mut grads: Vec<(Tensor, Tensor)> = Vec::with_capacity(NUM_LAYERS);
    grads.resize_with(NUM_LAYERS, || (Tensor::zeros(&[0]), Tensor::zeros(&[0])));

    let conv_back = |idx: usize, g: &Tensor, input: &Tensor| {
        conv2d_backward(g, input, &l[idx].weight, l[idx].spec.stride, l[idx].spec.padding)
    };

    let g = sigmoid_backward(grad_out, &acts.out)?;
    let c = conv_back(DEC2, &g, &acts.dec[1])?;
    grads[DEC2] = (c.weights, c.bias);
    let g = relu_backward(&c.input, &acts.dec[1])?;
    let c = conv_back(DEC1, &g, &acts.dec[0])?;
    grads[DEC1] = (c.weights, c.bias);
    let g = relu_backward(&c.input, &acts.dec[0])?;
    let c = conv_back(DEC0, &g, &acts.fused)?;
    grads[DEC0] = (c.weights, c.bias);

    let (g_img, g_vit) = split_channels(&c.input, BRANCH_CHANNELS)?;

    let g = relu_backward(&g_vit, &acts.vit)?;
    let c = conv_back(VIT0, &g, &acts.embedding)?;
    grads[VIT0] = (c.weights, c.bias);

    let g = relu_backward(&g_img, &acts.img[2])?;
    let c = conv_back(IMG2, &g, &acts.img[1])?;
    grads[IMG2] = (c.weights, c.bias);
    let g = relu_backward(&c.input, &acts.img[1])?;
    let c = conv_back(IMG1, &g, &acts.img[0])?;
    grads[IMG1] = (c.weights, c.bias);
    let g = relu_backward(&c.input, &acts.img[0])?;
    let c = conv_back(IMG0, &g, &acts.image)?;
    grads[IMG0] = (c.weights, c.bias);

    let flat = grads
        .iter()
        .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
        .collect();
    Ok(Gradients { flat })
}

/// A training example: image `[3,S,S]`, embedding `[c,P,P]`, target map `[P,P]`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Tensor,
    pub embedding: Tensor,
    pub target: GroundTruthMap,
}

/// Mean target value over a dataset.
pub fn mean_target(dataset: &[TrainingSample]) -> f64 {
    let total: f64 = dataset
        .iter()
        .map(|s| s.target.values.sum() / s.target.values.numel().max(1) as f64)
        .sum();
    total / dataset.len().max(1) as f64
}

/// Loss and parameter gradient of one sample.
fn sample_loss_grad(
    weights: &PredictorWeights,
    cfg: &PredictorConfig,
    s: &TrainingSample,
) -> Result<(f64, Gradients)> {
    let acts = forward_cached(weights, cfg, &s.image, &s.embedding)?;
    let p = cfg.pcm_size;
    let target = s.target.values.clone().reshape(&[1, p, p])?;
    let (loss, g) = mse(&acts.out, &target);
    Ok((loss, backward(weights, &acts, &g)?))
}

/// Mean loss and mean gradient over a set of samples. Per-sample work may run
/// in parallel; the reduction order is fixed so results are deterministic.
pub fn loss_and_gradient(
    weights: &PredictorWeights,
    cfg: &PredictorConfig,
    samples: &[&TrainingSample],
) -> Result<(f64, Vec<f32>)> {
    let per_sample: Vec<Result<(f64, Gradients)>> = samples
        .par_iter()
        .map(|s| sample_loss_grad(weights, cfg, s))
        .collect();
    let mut total = Gradients::zeros(weights.num_parameters());
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.add(&g);
    }
    let n = samples.len().max(1) as f32;
    total.flat.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n as f64, total.flat))
}

pub fn dataset_loss(
    weights: &PredictorWeights,
    cfg: &PredictorConfig,
    dataset: &[TrainingSample],
) -> Result<f64> {
    let losses: Vec<Result<f64>> = dataset
        .par_iter()
        .map(|s| {
            let pcm = forward(weights, cfg, &s.image, &s.embedding)?;
            Ok(mse(&pcm.values, &s.target.values).0)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / dataset.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Ground-truth maps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtMapParams {
    pub uniform_radius: usize,
    pub gauss_sigma: f32,
}

impl Default for GtMapParams {
    fn default() -> Self {
        GtMapParams {
            uniform_radius: 2,
            gauss_sigma: 1.5,
        }
    }
}

/// Confidence-map side that cell-denominated defaults refer to.
pub const REFERENCE_GRID: usize = 64;

impl GtMapParams {
    /// Defaults rescaled from [`REFERENCE_GRID`] to `pcm_size` cells, so the
    /// kernel covers the same fraction of the image.
    pub fn for_grid(pcm_size: usize) -> Self {
        let s = pcm_size as f32 / REFERENCE_GRID as f32;
        let d = GtMapParams::default();
        GtMapParams {
            uniform_radius: (d.uniform_radius as f32 * s).round() as usize,
            gauss_sigma: d.gauss_sigma * s,
        }
    }
}

/// Target map for a set of `(x, y)` image points: unit impulses on the
/// confidence grid, spread by a `(2r+1)²` box and a Gaussian, then scaled so
/// the maximum is 1.
///
/// The two kernels are folded into one separable kernel and splatted per
/// point, so the result is the convolution over an unbounded plane cropped to
/// the grid. Points near the border keep their peak in place.
pub fn build_gt_map(
    points: &[(usize, usize)],
    image_size: (usize, usize),
    pcm_size: usize,
    params: GtMapParams,
) -> Result<GroundTruthMap> {
    let (img_h, img_w) = image_size;
    let mut cells = Vec::with_capacity(points.len());
    for &(x, y) in points {
        if x >= img_w || y >= img_h {
            return Err(Error::Config(format!(
                "point ({x}, {y}) outside image {img_w}x{img_h}"
            )));
        }
        cells.push((pixel_to_cell(y, img_h, pcm_size), pixel_to_cell(x, img_w, pcm_size)));
    }
    cells.sort_unstable();
    cells.dedup();
    let mut map = Tensor::zeros(&[pcm_size, pcm_size]);
    if cells.is_empty() {
        return Ok(GroundTruthMap { values: map });
    }
    let kernel = gt_kernel_1d(params);
    let half = (kernel.len() / 2) as isize;
    let n = pcm_size as isize;
    let acc = map.data_mut();
    for &(r, c) in &cells {
        for (i, ky) in kernel.iter().enumerate() {
            let y = r as isize + i as isize - half;
            if !(0..n).contains(&y) {
                continue;
            }
            for (j, kx) in kernel.iter().enumerate() {
                let x = c as isize + j as isize - half;
                if (0..n).contains(&x) {
                    acc[(y * n + x) as usize] += ky * kx;
                }
            }
        }
    }
    let max = map.max_value();
    map.data_mut().iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    Ok(GroundTruthMap { values: map })
}

/// Full 1-D convolution of a `2r+1` box with the Gaussian taps.
fn gt_kernel_1d(params: GtMapParams) -> Vec<f32> {
    let gauss = if params.gauss_sigma > 0.0 {
        gaussian_kernel(params.gauss_sigma)
    } else {
        vec![1.0]
    };
    let width = 2 * params.uniform_radius + 1;
    let mut out = vec![0.0f32; width + gauss.len() - 1];
    for b in 0..width {
        for (g, &v) in gauss.iter().enumerate() {
            out[b + g] += v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    /// Samples per micro-batch.
    pub batch: usize,
    /// Micro-batches whose gradients are averaged before each update.
    pub accum_steps: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            lr: 1e-3,
            batch: 8,
            accum_steps: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PredictorWeights,
    /// Mean per-sample loss of each epoch, measured as the epoch runs.
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f32], grads: &[f32], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Adam on the mean squared error, with gradient accumulation over
/// `accum_steps` micro-batches. Sample order is reshuffled each epoch from
/// `cfg.seed`; results are deterministic.
pub fn train(
    weights: &PredictorWeights,
    pcfg: &PredictorConfig,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    use rand::seq::SliceRandom;

    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if !(cfg.lr >= 0.0) || cfg.batch == 0 || cfg.accum_steps == 0 {
        return Err(Error::Config(
            "lr must be non-negative and batch/accum_steps positive".into(),
        ));
    }
    let mut weights = weights.clone();
    let mut params = weights.flat_params();
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let group = cfg.batch * cfg.accum_steps;
    let mut loss_history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (g_idx, chunk) in order.chunks(group).enumerate() {
            let samples: Vec<&TrainingSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grad) = loss_and_gradient(&weights, pcfg, &samples)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDivergence {
                    epoch,
                    sample: g_idx * group,
                    loss,
                });
            }
            epoch_loss += loss * samples.len() as f64;
            adam.update(&mut params, &grad, cfg);
            weights.set_flat_params(&params);
        }
        let mean = epoch_loss / dataset.len() as f64;
        loss_history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainOutcome {
        weights,
        loss_history,
    })
}

// ---------------------------------------------------------------------------
// Weight files
// ---------------------------------------------------------------------------

pub const WEIGHTS_MAGIC: &[u8; 4] = b"AOPW";
pub const WEIGHTS_VERSION: u8 = 1;

/// AOPW layout: magic, `u8` version, `u16` LE entry count, then per entry a
/// `u16` LE name length, the UTF-8 name (`<layer>.weight` / `<layer>.bias`)
/// and an AOPT tensor.
pub fn write_weights<W: Write>(w: &mut W, weights: &PredictorWeights) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&[WEIGHTS_VERSION])?;
    let count = (weights.layers.len() * 2) as u16;
    w.write_all(&count.to_le_bytes())?;
    for layer in &weights.layers {
        for (suffix, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            let name = format!("{}.{suffix}", layer.spec.name);
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(r: &mut R) -> Result<PredictorWeights> {
    let eof = |e: std::io::Error| Error::format(format!("truncated weights file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::format(format!("bad weights magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(eof)?;
    if version[0] != WEIGHTS_VERSION {
        return Err(Error::format(format!(
            "unsupported weights version {}",
            version[0]
        )));
    }
    let mut count = [0u8; 2];
    r.read_exact(&mut count).map_err(eof)?;
    let count = u16::from_le_bytes(count) as usize;

    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(eof)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(eof)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("layer name is not valid UTF-8"))?;
        let tensor = read_tensor(r)?;
        entries.push((name, tensor));
    }

    let embed_channels = entries
        .iter()
        .find(|(n, _)| n == "vit_enc.0.weight")
        .and_then(|(_, t)| t.shape().get(1).copied())
        .ok_or_else(|| Error::format("missing layer vit_enc.0.weight"))?;
    let plan = layer_plan(embed_channels);
    let mut slots: Vec<[Option<Tensor>; 2]> = (0..NUM_LAYERS).map(|_| [None, None]).collect();
    for (name, tensor) in entries {
        let (layer, kind) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::format(format!("unknown layer {name:?}")))?;
        let idx = plan
            .iter()
            .position(|s| s.name == layer)
            .ok_or_else(|| Error::format(format!("unknown layer {name:?}")))?;
        let spec = plan[idx];
        let (slot, expected) = match kind {
            "weight" => (0, vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel]),
            "bias" => (1, vec![spec.out_ch]),
            _ => return Err(Error::format(format!("unknown layer {name:?}"))),
        };
        if tensor.shape() != expected.as_slice() {
            return Err(Error::format(format!(
                "layer {name:?} has shape {:?}, expected {expected:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::format(format!("layer {name:?} has non-finite values")));
        }
        if slots[idx][slot].replace(tensor).is_some() {
            return Err(Error::format(format!("duplicate layer {name:?}")));
        }
    }
    let mut layers = Vec::with_capacity(NUM_LAYERS);
    for (spec, [w, b]) in plan.into_iter().zip(slots) {
        let weight = w.ok_or_else(|| Error::format(format!("missing layer {}.weight", spec.name)))?;
        let bias = b.ok_or_else(|| Error::format(format!("missing layer {}.bias", spec.name)))?;
        layers.push(ConvLayer { spec, weight, bias });
    }
    Ok(PredictorWeights { layers })
}

pub fn save_weights(weights: &PredictorWeights, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(&mut buf, weights).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<PredictorWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let w = read_weights(&mut r).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if !r.is_empty() {
        return Err(Error::format(format!(
            "{}: trailing bytes after weights",
            path.display()
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> PredictorConfig {
        PredictorConfig::for_embedding(4, 4)
    }

    fn tiny_sample(seed: u64) -> TrainingSample {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny_cfg();
        let s = cfg.image_size;
        let p = cfg.pcm_size;
        TrainingSample {
            image: Tensor::from_fn(&[3, s, s], |_| rng.random::<f32>()),
            embedding: Tensor::from_fn(&[cfg.embed_channels, p, p], |_| rng.random::<f32>() - 0.5),
            target: build_gt_map(&[(5, 9)], (s, s), p, GtMapParams::default()).unwrap(),
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let cfg = PredictorConfig::for_embedding(8, 8);
        let w = PredictorWeights::zeros(8);
        let img = Tensor::full(&[3, 32, 32], 0.3);
        let emb = Tensor::full(&[8, 8, 8], 1.0);
        let pcm = forward(&w, &cfg, &img, &emb).unwrap();
        assert_eq!(pcm.values.shape(), [8, 8]);
        assert!(pcm.values.data().iter().all(|&v| v == 0.5));
        assert_eq!(pcm.source_image_size, (32, 32));
    }

    #[test]
    fn output_prior_sets_the_silent_prediction() {
        let cfg = PredictorConfig::for_embedding(8, 8);
        let w = PredictorWeights::zeros(8).with_output_prior(0.1);
        let pcm = forward(&w, &cfg, &Tensor::full(&[3, 32, 32], 0.3), &Tensor::full(&[8, 8, 8], 1.0)).unwrap();
        assert!(pcm.values.data().iter().all(|&v| (v - 0.1).abs() < 1e-6));
        let data = [tiny_sample(1), tiny_sample(2)];
        let m = mean_target(&data);
        assert!(m > 0.0 && m < 1.0);
        let t = &data[0].target.values;
        assert!((mean_target(&data[..1]) - t.sum() / t.numel() as f64).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let cfg = PredictorConfig::for_embedding(8, 8);
        let w = PredictorWeights::init(8, 1);
        let emb = Tensor::zeros(&[8, 8, 8]);
        assert!(forward(&w, &cfg, &Tensor::zeros(&[3, 30, 30]), &emb).is_err());
        assert!(forward(&w, &cfg, &Tensor::zeros(&[3, 32, 32]), &Tensor::zeros(&[4, 8, 8])).is_err());
        let bad = PredictorConfig { image_size: 30, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let s = tiny_sample(3);
        let w = PredictorWeights::init(4, 9);
        let a = forward(&w, &tiny_cfg(), &s.image, &s.embedding).unwrap();
        let b = forward(&w, &tiny_cfg(), &s.image, &s.embedding).unwrap();
        assert_eq!(a, b);
        assert!(a.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn parameter_count_is_small() {
        let w = PredictorWeights::init(256, 0);
        assert!(w.num_parameters() < 1_000_000);
    }

    #[test]
    fn gt_map_examples() {
        let empty = build_gt_map(&[], (64, 64), 16, GtMapParams::default()).unwrap();
        assert!(empty.values.data().iter().all(|&v| v == 0.0));

        let one = build_gt_map(&[(20, 36)], (64, 64), 16, GtMapParams::default()).unwrap();
        assert_eq!(one.values.max_value(), 1.0);
        assert_eq!(one.values.at2(9, 5), 1.0);
        assert!(one.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        assert!(build_gt_map(&[(64, 0)], (64, 64), 16, GtMapParams::default()).is_err());
    }

    #[test]
    fn gt_map_two_far_points_are_local_maxima() {
        let pts = [(10usize, 12usize), (200, 180)];
        let gt = build_gt_map(&pts, (256, 256), 64, GtMapParams::default()).unwrap();
        let peaks = crate::sampler::find_peaks(&gt.values, 3, 0.5).unwrap();
        let mut cells: Vec<_> = peaks.iter().map(|p| (p.row, p.col)).collect();
        cells.sort();
        let mut expected: Vec<_> = pts
            .iter()
            .map(|&(x, y)| (pixel_to_cell(y, 256, 64), pixel_to_cell(x, 256, 64)))
            .collect();
        expected.sort();
        assert_eq!(cells, expected);
    }

    /// Central differences along a random sign direction, one parameter
    /// tensor at a time. ReLU kinks crossed by the step leave a few percent
    /// of bias at this size, so the bound only catches wiring mistakes.
    #[test]
    fn gradient_matches_directional_difference() {
        use rand::Rng;
        for seed in 0..3u64 {
            let s = tiny_sample(seed);
            let w = PredictorWeights::init(4, seed);
            let (_, grad) = loss_and_gradient(&w, &tiny_cfg(), &[&s]).unwrap();
            let base = w.flat_params();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut offset = 0;
            for (ti, n) in w.tensors().map(Tensor::numel).enumerate() {
                let mut dir = vec![0.0f32; base.len()];
                for d in &mut dir[offset..offset + n] {
                    *d = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                }
                offset += n;
                let eps = 1e-4f32;
                let at = |sign: f32| {
                    let mut shifted = w.clone();
                    let p: Vec<f32> = base.iter().zip(&dir).map(|(p, d)| p + sign * eps * d).collect();
                    shifted.set_flat_params(&p);
                    dataset_loss(&shifted, &tiny_cfg(), std::slice::from_ref(&s)).unwrap()
                };
                let numeric = (at(1.0) - at(-1.0)) / (2.0 * eps as f64);
                let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| (g * d) as f64).sum();
                let tol = 5e-2 * analytic.abs().max(numeric.abs()) + 1e-4;
                assert!(
                    (numeric - analytic).abs() <= tol,
                    "seed {seed} tensor {ti}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    /// Ten probes in the output layer, where the loss is smooth, so
    /// coordinate differences are tight.
    #[test]
    fn full_batch_gradient_matches_probe_differences() {
        let data = [tiny_sample(4), tiny_sample(5), tiny_sample(6)];
        let refs: Vec<&TrainingSample> = data.iter().collect();
        let w = PredictorWeights::init(4, 21);
        let (_, grad) = loss_and_gradient(&w, &tiny_cfg(), &refs).unwrap();
        let base = w.flat_params();
        let n = base.len();
        for i in n - 10..n {
            let eps = 1e-2f32;
            let at = |d: f32| {
                let mut p = base.clone();
                p[i] += d;
                let mut shifted = w.clone();
                shifted.set_flat_params(&p);
                dataset_loss(&shifted, &tiny_cfg(), &data).unwrap()
            };
            let numeric = (at(eps) - at(-eps)) / (2.0 * eps as f64);
            let analytic = grad[i] as f64;
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-3, "param {i}: analytic {analytic} numeric {numeric} rel {rel}");
        }
    }

    #[test]
    fn lr_zero_leaves_weights_unchanged() {
        let data = vec![tiny_sample(1), tiny_sample(2)];
        let w = PredictorWeights::init(4, 5);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch: 1,
            accum_steps: 1,
            ..Default::default()
        };
        let out = train(&w, &tiny_cfg(), &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.loss_history.len(), 3);
    }

    #[test]
    fn training_rejects_empty_dataset() {
        let w = PredictorWeights::init(4, 5);
        assert!(matches!(
            train(&w, &tiny_cfg(), &[], &TrainConfig::default(), |_, _| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let mut s = tiny_sample(1);
        s.image.data_mut()[0] = f32::NAN;
        let w = PredictorWeights::init(4, 5);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(
            train(&w, &tiny_cfg(), &[s], &cfg, |_, _| {}),
            Err(Error::TrainingDivergence { .. })
        ));
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let w = PredictorWeights::init(6, 11);
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        let back = read_weights(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &PredictorWeights::init(4, 0)).unwrap();
        buf[1] = b'X';
        assert!(matches!(read_weights(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_layer_is_named() {
        let w = PredictorWeights::init(4, 0);
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        // First entry name "img_enc.0.weight" starts after magic, version, count, len.
        let start = 4 + 1 + 2 + 2;
        buf[start..start + 7].copy_from_slice(b"mystery");
        match read_weights(&mut buf.as_slice()) {
            Err(Error::Format(msg)) => assert!(msg.contains("mystery.0.weight"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_weights_rejected() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &PredictorWeights::init(4, 0)).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_weights(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
