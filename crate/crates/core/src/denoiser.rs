//! Text-conditioned video UNet whose temporal blocks are pluggable: an STI
//! layer, a plain residual temporal convolution, or nothing.
//!
//! Per resolution level the encoder applies a per-frame residual conv
//! block with time conditioning, cross-attention to the caption tokens and
//! then the configured temporal block. The decoder upsamples, concatenates
//! the skip connection and runs another residual block. The output
//! convolution is zero-initialized, so a fresh network predicts zero noise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{attention, Conv3dSpec, Tape, Var};
use crate::clip::{CHANNELS, FRAMES, SIZE};
use crate::diffusion::{draw_noise, loss_on_tape, NoiseDraw, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{self, accumulate, clip_global_norm, conv, init_conv, init_linear, init_normal, join, linear, Adam, Bound, ParamStore};
use crate::random::{derive_seed, named_rng, seeded, Rng};
use crate::sti::{check_kernel_size, StiConfig, StiLayer};
use crate::tensor::Tensor;
use crate::text::TextEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    Sti,
    Conv1d,
    None,
}

impl core::str::FromStr for TemporalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sti" => Ok(Self::Sti),
            "conv1d" => Ok(Self::Conv1d),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown temporal layer `{other}` (expected sti, conv1d or none)"
            ))),
        }
    }
}

impl core::fmt::Display for TemporalKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Sti => "sti",
            Self::Conv1d => "conv1d",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of 2x spatial downsamplings; the network has `depth + 1` levels.
    pub depth: usize,
    pub temporal: TemporalKind,
    pub gamma: usize,
    pub k: usize,
    pub text_dim: usize,
    pub vocab: usize,
    pub time_dim: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            temporal: TemporalKind::Sti,
            gamma: 2,
            k: 3,
            text_dim: 32,
            vocab: 512,
            time_dim: 32,
            frames: FRAMES,
            height: SIZE,
            width: SIZE,
            channels: CHANNELS,
        }
    }
}

impl DenoiserConfig {
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * if level == 0 { 1 } else { 2 }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.text_dim == 0 || self.frames == 0 || self.channels == 0 {
            return err("channel counts, text dim and frames must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return err(format!("time embedding dim must be even, got {}", self.time_dim));
        }
        if self.vocab < 2 {
            return err("vocabulary needs at least two entries".into());
        }
        let scale = 1usize << self.depth;
        if !self.height.is_multiple_of(scale) || !self.width.is_multiple_of(scale) || self.height == 0 || self.width == 0 {
            return err(format!(
                "spatial size {}x{} not divisible by 2^depth = {scale}",
                self.height, self.width
            ));
        }
        if self.temporal != TemporalKind::None {
            check_kernel_size(self.k)?;
        }
        if self.temporal == TemporalKind::Sti {
            if self.gamma == 0 {
                return err("gamma must be positive".into());
            }
            for level in 0..=self.depth {
                let (h, w) = (self.height >> level, self.width >> level);
                if h % self.gamma != 0 || w % self.gamma != 0 {
                    return err(format!("gamma {} does not divide level {level} size {h}x{w}", self.gamma));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
}

const SPATIAL: [usize; 3] = [1, 3, 3];

fn level_prefix(level: usize, part: &str) -> String {
    format!("unet.l{level}.{part}")
}

fn init_resblock(store: &mut ParamStore, prefix: &str, ch: usize, time_dim: usize, rng: &mut Rng) {
    init_conv(store, &join(prefix, "conv1"), SPATIAL, ch, ch, false, rng);
    init_conv(store, &join(prefix, "conv2"), SPATIAL, ch, ch, false, rng);
    init_linear(store, &join(prefix, "time"), time_dim, ch, false, rng);
}

fn init_cross_attention(store: &mut ParamStore, prefix: &str, ch: usize, text_dim: usize, rng: &mut Rng) {
    let s = libm::sqrt(1.0 / ch as f64);
    let st = libm::sqrt(1.0 / text_dim as f64);
    store.insert(join(prefix, "q"), init_normal(rng, &[ch, ch], s));
    store.insert(join(prefix, "k"), init_normal(rng, &[text_dim, ch], st));
    store.insert(join(prefix, "v"), init_normal(rng, &[text_dim, ch], st));
    store.insert(join(prefix, "o"), Tensor::zeros(&[ch, ch]));
}

/// Sinusoidal embedding of the diffusion step.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let j = i % half;
        let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half as f64);
        let arg = t as f64 * freq;
        if i < half {
            libm::sin(arg)
        } else {
            libm::cos(arg)
        }
    })
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = |name: &str| named_rng(seed, name);
        let mut store = ParamStore::new();
        let c0 = config.level_channels(0);
        TextEncoder::init(&mut store, "text", config.vocab, config.text_dim, &mut rng("text"))?;
        init_linear(&mut store, "time.mlp", config.time_dim, config.time_dim, false, &mut rng("time.mlp"));
        init_conv(&mut store, "unet.stem", SPATIAL, config.channels, c0, false, &mut rng("unet.stem"));
        for level in 0..=config.depth {
            let ch = config.level_channels(level);
            let name = |part: &str| level_prefix(level, part);
            if level > 0 {
                let prev = config.level_channels(level - 1);
                init_conv(&mut store, &name("down"), SPATIAL, prev, ch, false, &mut rng(&name("down")));
            }
            init_resblock(&mut store, &name("enc"), ch, config.time_dim, &mut rng(&name("enc")));
            init_cross_attention(&mut store, &name("xattn"), ch, config.text_dim, &mut rng(&name("xattn")));
            match config.temporal {
                TemporalKind::Sti => {
                    let sti = StiConfig {
                        channels: ch,
                        gamma: config.gamma,
                        k: config.k,
                    };
                    let prefix = StiLayer::prefix_for(level);
                    StiLayer::init(&mut store, prefix.clone(), sti, &mut rng(&prefix))?;
                }
                TemporalKind::Conv1d => {
                    store.insert(name("tconv.kernel"), Tensor::zeros(&[config.k, ch]));
                }
                TemporalKind::None => {}
            }
            if level < config.depth {
                let below = config.level_channels(level + 1);
                init_conv(&mut store, &name("fuse"), SPATIAL, below + ch, ch, false, &mut rng(&name("fuse")));
                init_resblock(&mut store, &name("dec"), ch, config.time_dim, &mut rng(&name("dec")));
            }
        }
        init_conv(&mut store, "unet.head", SPATIAL, c0, config.channels, true, &mut rng("unet.head"));
        Ok(Self { config, params: store })
    }

    /// Rebuilds a network from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint tensor", got.shape(), t.shape()));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn text_encoder(&self) -> TextEncoder {
        TextEncoder {
            prefix: "text".into(),
            vocab: self.config.vocab,
            dim: self.config.text_dim,
        }
    }

    fn resblock<'t>(&self, p: &Bound<'t>, prefix: &str, h: Var<'t>, temb: Var<'t>) -> Result<Var<'t>> {
        let spec = Conv3dSpec::same(SPATIAL);
        let ch = *h.shape().last().expect("4-D features");
        let r = conv(p, &join(prefix, "conv1"), h.layer_norm_rows().silu(), spec)?;
        let shift = linear(p, &join(prefix, "time"), temb)?.reshape(&[ch])?;
        let r = r.bias_add(shift)?;
        let r = conv(p, &join(prefix, "conv2"), r.layer_norm_rows().silu(), spec)?;
        h.add(r)
    }

    fn cross_attention<'t>(&self, p: &Bound<'t>, prefix: &str, h: Var<'t>, text: Var<'t>) -> Result<Var<'t>> {
        let shape = h.shape();
        let ch = shape[3];
        let tokens = h.layer_norm_rows().reshape(&[shape[0] * shape[1] * shape[2], ch])?;
        let q = tokens.matmul(p.get(&join(prefix, "q"))?)?;
        let k = text.matmul(p.get(&join(prefix, "k"))?)?;
        let v = text.matmul(p.get(&join(prefix, "v"))?)?;
        let out = attention(q, k, v)?.matmul(p.get(&join(prefix, "o"))?)?;
        h.add(out.reshape(&shape)?)
    }

    fn temporal<'t>(&self, p: &Bound<'t>, level: usize, h: Var<'t>) -> Result<Var<'t>> {
        match self.config.temporal {
            TemporalKind::None => Ok(h),
            TemporalKind::Conv1d => h.add(h.temporal_conv(p.get(&level_prefix(level, "tconv.kernel"))?)?),
            TemporalKind::Sti => {
                let layer = StiLayer {
                    prefix: StiLayer::prefix_for(level),
                    config: StiConfig {
                        channels: self.config.level_channels(level),
                        gamma: self.config.gamma,
                        k: self.config.k,
                    },
                };
                Ok(layer.forward(p, h)?.features)
            }
        }
    }

    /// Predicted noise for `x_t`, same shape as the input clip.
    pub fn denoise<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, t: usize, caption: &str) -> Result<Var<'t>> {
        let cfg = &self.config;
        let expected = cfg.clip_shape();
        if x_t.shape() != expected {
            return Err(Error::shape("denoise", &x_t.shape(), &expected));
        }
        let tape = x_t.tape();
        let spec = Conv3dSpec::same(SPATIAL);
        let text = self.text_encoder().embed(p, caption)?;
        let temb = linear(p, "time.mlp", tape.constant(timestep_embedding(t, cfg.time_dim)))?.silu();

        let mut h = conv(p, "unet.stem", x_t, spec)?;
        let mut skips = Vec::with_capacity(cfg.depth + 1);
        for level in 0..=cfg.depth {
            if level > 0 {
                h = conv(p, &level_prefix(level, "down"), h.avg_pool3([1, 2, 2])?, spec)?;
            }
            h = self.resblock(p, &level_prefix(level, "enc"), h, temb)?;
            h = self.cross_attention(p, &level_prefix(level, "xattn"), h, text)?;
            h = self.temporal(p, level, h)?;
            skips.push(h);
        }
        for level in (0..cfg.depth).rev() {
            let up = h.upsample3([1, 2, 2])?;
            let joined = Var::concat_last(&[up, skips[level]])?;
            h = conv(p, &level_prefix(level, "fuse"), joined, spec)?;
            h = self.resblock(p, &level_prefix(level, "dec"), h, temb)?;
        }
        conv(p, "unet.head", h.layer_norm_rows().silu(), spec)
    }
}

impl NoisePredictor for Denoiser {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn predict<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, t: usize, caption: &str) -> Result<Var<'t>> {
        self.denoise(p, x_t, t, caption)
    }
}

/// One training pair in model space (`[-1, 1]` pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub clip: Tensor,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            lr: 1e-3,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean batch loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// Deterministic sequence of dataset indices: consecutive seeded
/// permutations of `0..n`.
pub struct EpochSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }
}

impl Iterator for EpochSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.n == 0 {
            return None;
        }
        if self.pos == self.order.len() {
            use rand::seq::SliceRandom;
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut seeded(derive_seed(self.seed, self.epoch)));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }
}

/// Gradients of the mean noise-prediction loss over `batch`.
fn batch_gradients(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &[(&TrainItem, NoiseDraw)],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut grads = BTreeMap::new();
    let mut total = 0.0;
    for (item, draw) in batch {
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let loss = loss_on_tape(&tape, &p, net, schedule, &item.clip, &item.caption, draw)?;
        total += loss.item();
        let g = tape.backward(loss)?;
        accumulate(&mut grads, p.gradients(&g));
    }
    let inv = 1.0 / batch.len() as f64;
    nn::scale_grads(&mut grads, inv);
    Ok((total * inv, grads))
}

/// One clipped Adam update on a batch of items with explicit noise draws.
/// Returns the batch loss measured before the update.
pub fn train_step(
    net: &mut Denoiser,
    opt: &mut Adam,
    schedule: &NoiseSchedule,
    batch: &[(&TrainItem, NoiseDraw)],
    max_grad_norm: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (loss, mut grads) = batch_gradients(net, schedule, batch)?;
    clip_global_norm(&mut grads, max_grad_norm);
    opt.step(&mut net.params, &grads)?;
    if !net.params.is_finite() {
        return Err(Error::Numeric("parameters diverged".into()));
    }
    Ok(loss)
}

/// Adam training of `net` on `data`, `options.steps` optimizer steps.
/// The loss curve is a pure function of the network, data and options.
pub fn fit(net: &mut Denoiser, schedule: &NoiseSchedule, data: &[TrainItem], options: &FitOptions) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::Invalid("no training items".into()));
    }
    if options.steps == 0 || options.batch_size == 0 {
        return Err(Error::Config("steps and batch size must be at least 1".into()));
    }
    let shape = net.config.clip_shape();
    for item in data {
        if item.clip.shape() != shape {
            return Err(Error::shape("fit item", item.clip.shape(), &shape));
        }
    }
    let mut sampler = EpochSampler::new(data.len(), options.seed);
    let mut opt = Adam::new(options.lr);
    let mut losses = Vec::with_capacity(options.steps);
    for step in 0..options.steps {
        let batch: Vec<(&TrainItem, NoiseDraw)> = (0..options.batch_size)
            .map(|b| {
                let idx = sampler.next().expect("non-empty data");
                let seed = derive_seed(options.seed, ((step * options.batch_size + b) as u64) << 1 | 1);
                (&data[idx], draw_noise(schedule, &shape, seed))
            })
            .collect();
        let loss = train_step(net, &mut opt, schedule, &batch, options.max_grad_norm)
            .map_err(|e| annotate(e, step))?;
        log::debug!("denoiser step {step}: loss {loss:.6}");
        losses.push(loss);
    }
    Ok(FitReport { losses })
}

fn annotate(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} (optimizer step {step})")),
        other => other,
    }
}

/// Mean noise-prediction loss over `data` with `draws_per_item` fixed
/// `(t, eps)` draws per item derived from `seed`.
pub fn validation_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    data: &[TrainItem],
    draws_per_item: usize,
    seed: u64,
) -> Result<f64> {
    let shape = net.config.clip_shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, item) in data.iter().enumerate() {
        for d in 0..draws_per_item {
            let draw = draw_noise(schedule, &shape, derive_seed(seed, (i * draws_per_item + d) as u64));
            let tape = Tape::new();
            let p = net.params.bind_frozen(&tape);
            total += loss_on_tape(&tape, &p, net, schedule, &item.clip, &item.caption, &draw)?.item();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("empty validation set".into()));
    }
    Ok(total / count as f64)
}
