//! Vector-quantized clip tokenizer and a caption-conditioned masked-token
//! prior over the resulting code grid.
//!
//! The tokenizer halves every axis with a strided 3-D convolution, snaps
//! each cell to its nearest codebook entry and decodes by upsampling. The
//! prior is a small pre-norm transformer over `[caption tokens; grid codes]`
//! trained to recover codes at positions replaced by the MASK symbol.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{attention, Conv3dSpec, Tape, Var};
use crate::clip::{CHANNELS, FRAMES, SIZE};
use crate::error::{Error, Result};
use crate::nn::{accumulate, clip_global_norm, conv, init_conv, init_linear, init_normal, linear, scale_grads, Adam, Bound, ParamStore};
use crate::random::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, MAX_TOKENS};

pub const CODEBOOK_SIZE: usize = 64;
pub const CODE_DIM: usize = 16;
pub const COMMITMENT: f64 = 0.25;

/// Codebook entries `[K, dim]` with per-entry assignment counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let s = entries.shape();
        if s.len() != 2 || s[0] < 2 || s[1] == 0 {
            return Err(Error::Invalid(format!("codebook must be [K >= 2, dim], got {s:?}")));
        }
        if !entries.is_finite() {
            return Err(Error::Numeric("non-finite codebook entry".into()));
        }
        let usage = alloc::vec![0; s[0]];
        Ok(Self { entries, usage })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, code: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data()[code * d..(code + 1) * d]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Index of the closest entry in squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, feature: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size() {
            let d: f64 = self.entry(k).iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Quantizes rows of a flat `[n * dim]` feature buffer and counts usage.
    pub fn assign(&mut self, features: &[f64]) -> Result<Vec<usize>> {
        let d = self.dim();
        if !features.len().is_multiple_of(d) {
            return Err(Error::shape("codebook assign", &[features.len()], &[d]));
        }
        let codes: Vec<usize> = features.chunks(d).map(|f| self.nearest(f)).collect();
        for &c in &codes {
            self.usage[c] += 1;
        }
        Ok(codes)
    }
}

/// Grid of codes in `0..K`, with `K` itself marking masked cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    dims: [usize; 3],
    codebook_size: usize,
    codes: Vec<usize>,
}

impl TokenGrid {
    pub fn new(dims: [usize; 3], codebook_size: usize, codes: Vec<usize>) -> Result<Self> {
        let cells: usize = dims.iter().product();
        if codes.len() != cells {
            return Err(Error::shape("token grid", &[codes.len()], &dims));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > codebook_size) {
            return Err(Error::Invalid(format!("code {bad} outside 0..={codebook_size}")));
        }
        Ok(Self { dims, codebook_size, codes })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn mask_symbol(&self) -> usize {
        self.codebook_size
    }

    pub fn cells(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn is_masked(&self, cell: usize) -> bool {
        self.codes[cell] == self.codebook_size
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.cells()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.codes.iter().filter(|&&c| c == self.codebook_size).count()
    }
}

/// Replaces exactly `floor(rate * cells)` positions, chosen by a seeded
/// shuffle, with the MASK symbol.
pub fn mask_corrupt(grid: &TokenGrid, rate: f64, seed: u64) -> Result<TokenGrid> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!("mask rate {rate} outside [0, 1]")));
    }
    let n = grid.cells();
    let m = libm::floor(rate * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut out = grid.clone();
    for &i in &order[..m] {
        out.codes[i] = grid.codebook_size;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub commitment: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: CODEBOOK_SIZE,
            code_dim: CODE_DIM,
            hidden: 16,
            commitment: COMMITMENT,
            frames: FRAMES,
            height: SIZE,
            width: SIZE,
            channels: CHANNELS,
        }
    }
}

impl VqConfig {
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        [self.frames / 2, self.height / 2, self.width / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs K >= 2".into()));
        }
        if self.code_dim == 0 || self.hidden == 0 || self.channels == 0 {
            return Err(Error::Config("code dim, hidden width and channels must be positive".into()));
        }
        if [self.frames, self.height, self.width].iter().any(|&e| e < 2 || e % 2 != 0) {
            return Err(Error::Config(format!(
                "clip extents {}x{}x{} must be even",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }
}

const SAME3: [usize; 3] = [3, 3, 3];
const POINT: [usize; 3] = [1, 1, 1];
const DOWN: Conv3dSpec = Conv3dSpec { stride: [2, 2, 2], pad: [0, 0, 0] };

/// Convolutional encoder/decoder plus codebook, all stored under `vq.`.
#[derive(Debug, Clone, PartialEq)]
pub struct VqTokenizer {
    config: VqConfig,
    params: ParamStore,
}

impl VqTokenizer {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let (c, h, d) = (config.channels, config.hidden, config.code_dim);
        init_conv(&mut s, "vq.enc.in", SAME3, c, h, false, &mut rng);
        init_conv(&mut s, "vq.enc.down", [2, 2, 2], h, h, false, &mut rng);
        init_conv(&mut s, "vq.enc.out", POINT, h, d, false, &mut rng);
        init_conv(&mut s, "vq.dec.in", POINT, d, h, false, &mut rng);
        init_conv(&mut s, "vq.dec.mid", SAME3, h, h, false, &mut rng);
        init_conv(&mut s, "vq.dec.out", SAME3, h, c, false, &mut rng);
        s.insert("vq.codebook", init_normal(&mut rng, &[config.codebook_size, d], 1.0));
        Ok(Self { config, params: s })
    }

    pub fn from_params(config: VqConfig, params: ParamStore) -> Result<Self> {
        check_against(&Self::new(config, 0)?.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.params.get("vq.codebook")?.clone())
    }

    /// Continuous encoder output, one row of `code_dim` per grid cell.
    pub fn encode_features<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let expected = self.config.clip_shape();
        if x.shape() != expected {
            return Err(Error::shape("vq_encode", &x.shape(), &expected));
        }
        let h = conv(p, "vq.enc.in", x, Conv3dSpec::same(SAME3))?.silu();
        let h = conv(p, "vq.enc.down", h, DOWN)?.silu();
        let z = conv(p, "vq.enc.out", h, Conv3dSpec::same(POINT))?;
        let cells: usize = self.config.grid_dims().iter().product();
        z.reshape(&[cells, self.config.code_dim])
    }

    /// Clip in model space from per-cell code vectors `[cells, code_dim]`.
    pub fn decode_features<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let [f, h, w] = self.config.grid_dims();
        let z = z.reshape(&[f, h, w, self.config.code_dim])?;
        let y = conv(p, "vq.dec.in", z, Conv3dSpec::same(POINT))?.silu();
        let y = y.upsample3([2, 2, 2])?;
        let y = conv(p, "vq.dec.mid", y, Conv3dSpec::same(SAME3))?.silu();
        conv(p, "vq.dec.out", y, Conv3dSpec::same(SAME3))
    }

    fn features(&self, clip: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.encode_features(&p, tape.constant(clip.clone()))?.value())
    }

    /// Code grid of a model-space clip, counting assignments in `codebook`.
    pub fn vq_encode_with(&self, clip: &Tensor, codebook: &mut Codebook) -> Result<TokenGrid> {
        let codes = codebook.assign(self.features(clip)?.data())?;
        TokenGrid::new(self.config.grid_dims(), self.config.codebook_size, codes)
    }

    pub fn vq_encode(&self, clip: &Tensor) -> Result<TokenGrid> {
        self.vq_encode_with(clip, &mut self.codebook()?)
    }

    pub fn vq_decode(&self, grid: &TokenGrid) -> Result<Tensor> {
        if grid.dims() != self.config.grid_dims() || grid.codebook_size() != self.config.codebook_size {
            return Err(Error::shape("vq_decode", &grid.dims(), &self.config.grid_dims()));
        }
        if grid.num_masked() > 0 {
            return Err(Error::Invalid("cannot decode a grid with masked cells".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let e = p.get("vq.codebook")?.index_rows(grid.codes())?;
        Ok(self.decode_features(&p, e)?.value())
    }

    /// Mean squared distance between encoder features and their codes.
    pub fn quantization_error(&self, clip: &Tensor) -> Result<f64> {
        let z = self.features(clip)?;
        let book = self.codebook()?;
        let d = book.dim();
        let total: f64 = z
            .data()
            .chunks(d)
            .map(|f| book.entry(book.nearest(f)).iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        Ok(total / z.numel() as f64)
    }

    /// Mean squared error of `decode(encode(x))` over `clips`.
    pub fn round_trip_error(&self, clips: &[Tensor]) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::Invalid("no clips".into()));
        }
        let mut total = 0.0;
        for c in clips {
            let back = self.vq_decode(&self.vq_encode(c)?)?;
            total += back.data().iter().zip(c.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c.numel() as f64;
        }
        Ok(total / clips.len() as f64)
    }

    /// Reconstruction plus codebook and commitment terms, with the
    /// straight-through estimator carrying decoder gradients to the encoder.
    pub fn loss_on_tape<'t>(&self, tape: &'t Tape, p: &Bound<'t>, clip: &Tensor) -> Result<Var<'t>> {
        let x = tape.constant(clip.clone());
        let z = self.encode_features(p, x)?;
        let book = Codebook::new(p.get("vq.codebook")?.value())?;
        let codes: Vec<usize> = z.value().data().chunks(book.dim()).map(|f| book.nearest(f)).collect();
        let e = p.get("vq.codebook")?.index_rows(&codes)?;
        let st = z.add(e.sub(z)?.detach())?;
        let recon = self.decode_features(p, st)?.mse(x)?;
        let codebook_term = e.mse(z.detach())?;
        let commit = z.mse(e.detach())?.scale(self.config.commitment);
        recon.add(codebook_term)?.add(commit)
    }

    /// Overwrites the codebook with encoder features sampled from `clips`.
    pub fn init_codebook_from(&mut self, clips: &[Tensor], seed: u64) -> Result<()> {
        let d = self.config.code_dim;
        let mut rows = Vec::new();
        for c in clips {
            rows.extend_from_slice(self.features(c)?.data());
        }
        let n = rows.len() / d;
        if n == 0 {
            return Err(Error::Invalid("no features to seed the codebook".into()));
        }
        let mut rng = seeded(seed);
        let k = self.config.codebook_size;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let entries = Tensor::from_fn(&[k, d], |i| {
            let (code, j) = (i / d, i % d);
            let src = order[code % n];
            // repeated picks get a small jitter so entries stay distinct
            let jitter = if code >= n { 1e-3 * rng.random_range(-1.0..1.0) } else { 0.0 };
            rows[src * d + j] + jitter
        });
        self.params.insert("vq.codebook", entries);
        Ok(())
    }
}

fn check_against(reference: &ParamStore, params: &ParamStore) -> Result<()> {
    for (name, t) in reference.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::shape("checkpoint tensor", got.shape(), t.shape()));
        }
    }
    if params.len() != reference.len() {
        return Err(Error::Invalid(format!(
            "expected {} parameter tensors, found {}",
            reference.len(),
            params.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqFitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Round-trip error is logged every `log_every` steps and after the last.
    pub log_every: usize,
    /// Number of leading items the round-trip error is measured on.
    pub probe: usize,
}

impl Default for VqFitOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            lr: 2e-3,
            max_grad_norm: 1.0,
            seed: 0,
            log_every: 25,
            probe: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqFitReport {
    pub losses: Vec<f64>,
    /// `(steps completed, round-trip MSE)` checkpoints.
    pub round_trip: Vec<(usize, f64)>,
}

fn check_fit(steps: usize, batch: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Invalid("no training items".into()));
    }
    if steps == 0 || batch == 0 {
        return Err(Error::Config("steps and batch size must be at least 1".into()));
    }
    Ok(())
}

fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let epoch_len = n.div_ceil(batch).max(1);
    let epoch = (step / epoch_len) as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(seed, epoch)));
    let start = (step % epoch_len) * batch;
    (0..batch).map(|b| order[(start + b) % n]).collect()
}

/// Trains the tokenizer on model-space clips. The codebook is first seeded
/// from encoder features of the first batch.
pub fn fit_vq(tok: &mut VqTokenizer, data: &[Tensor], options: &VqFitOptions) -> Result<VqFitReport> {
    check_fit(options.steps, options.batch_size, data.len())?;
    let probe = &data[..options.probe.clamp(1, data.len())];
    let first: Vec<Tensor> = batch_indices(data.len(), options.batch_size, 0, options.seed)
        .into_iter()
        .map(|i| data[i].clone())
        .collect();
    tok.init_codebook_from(&first, derive_seed(options.seed, u64::MAX))?;
    let mut opt = Adam::new(options.lr);
    let mut losses = Vec::with_capacity(options.steps);
    let mut round_trip = alloc::vec![(0, tok.round_trip_error(probe)?)];
    for step in 0..options.steps {
        let mut grads = alloc::collections::BTreeMap::new();
        let mut total = 0.0;
        for i in batch_indices(data.len(), options.batch_size, step, options.seed) {
            let tape = Tape::new();
            let p = tok.params.bind(&tape);
            let loss = tok.loss_on_tape(&tape, &p, &data[i])?;
            total += loss.item();
            let g = tape.backward(loss)?;
            accumulate(&mut grads, p.gradients(&g));
        }
        let inv = 1.0 / options.batch_size as f64;
        scale_grads(&mut grads, inv);
        clip_global_norm(&mut grads, options.max_grad_norm);
        opt.step(&mut tok.params, &grads)?;
        if !tok.params.is_finite() || !total.is_finite() {
            return Err(Error::Numeric(format!("tokenizer diverged at optimizer step {step}")));
        }
        losses.push(total * inv);
        let done = step + 1;
        if done % options.log_every.max(1) == 0 || done == options.steps {
            let err = tok.round_trip_error(probe)?;
            log::debug!("vq step {done}: loss {:.6} round-trip {err:.6}", total * inv);
            round_trip.push((done, err));
        }
    }
    Ok(VqFitReport { losses, round_trip })
}

/// Log-probabilities over the `K` codes at every cell of a corrupted grid.
pub trait TokenPredictor {
    fn params(&self) -> &ParamStore;

    /// `[cells, K]` log-probabilities given `[caption; corrupted]`.
    fn log_probs<'t>(&self, p: &Bound<'t>, corrupted: &TokenGrid, caption: &str) -> Result<Var<'t>>;
}

/// Mean negative log-likelihood of `truth` over the listed positions.
pub fn masked_nll<'t>(log_probs: Var<'t>, positions: &[usize], truth: &TokenGrid) -> Result<Var<'t>> {
    if positions.is_empty() {
        return Ok(log_probs.tape().constant(Tensor::scalar(0.0)));
    }
    let targets: Vec<usize> = positions.iter().map(|&i| truth.codes()[i]).collect();
    Ok(log_probs.index_rows(positions)?.pick_per_row(&targets)?.mean().neg())
}

/// Masked-token objective: mean `-log p(z | caption, z_bar)` over the cells
/// masked in `z_bar`; zero when nothing is masked.
pub fn prior_loss_on_tape<'t, P: TokenPredictor + ?Sized>(
    tape: &'t Tape,
    p: &Bound<'t>,
    predictor: &P,
    z: &TokenGrid,
    z_bar: &TokenGrid,
    caption: &str,
) -> Result<Var<'t>> {
    if z.dims() != z_bar.dims() || z.codebook_size() != z_bar.codebook_size() {
        return Err(Error::shape("prior_loss", &z.dims(), &z_bar.dims()));
    }
    if z.num_masked() > 0 {
        return Err(Error::Invalid("target grid contains masked cells".into()));
    }
    let positions = z_bar.masked_positions();
    if positions.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let logp = predictor.log_probs(p, z_bar, caption)?;
    let expected = [z.cells(), z.codebook_size()];
    if logp.shape() != expected {
        return Err(Error::shape("prior log-probs", &logp.shape(), &expected));
    }
    masked_nll(logp, &positions, z)
}

pub fn prior_loss<P: TokenPredictor + ?Sized>(predictor: &P, z: &TokenGrid, z_bar: &TokenGrid, caption: &str) -> Result<f64> {
    let tape = Tape::new();
    let p = predictor.params().bind_frozen(&tape);
    Ok(prior_loss_on_tape(&tape, &p, predictor, z, z_bar, caption)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub codebook_size: usize,
    pub grid: [usize; 3],
    pub dim: usize,
    pub layers: usize,
    pub vocab: usize,
}

impl PriorConfig {
    pub fn for_tokenizer(vq: &VqConfig) -> Self {
        Self {
            codebook_size: vq.codebook_size,
            grid: vq.grid_dims(),
            dim: 32,
            layers: 2,
            vocab: 512,
        }
    }

    fn cells(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Pre-norm single-head transformer predicting masked codes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPrior {
    config: PriorConfig,
    params: ParamStore,
}

impl MaskedPrior {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        if config.codebook_size < 2 || config.dim == 0 || config.cells() == 0 {
            return Err(Error::Config("prior needs K >= 2, positive width and a non-empty grid".into()));
        }
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let d = config.dim;
        TextEncoder::init(&mut s, "prior.text", config.vocab, d, &mut rng)?;
        s.insert("prior.code", init_normal(&mut rng, &[config.codebook_size + 1, d], 1.0));
        s.insert("prior.pos", init_normal(&mut rng, &[MAX_TOKENS + config.cells(), d], 0.1));
        let sd = libm::sqrt(1.0 / d as f64);
        for l in 0..config.layers {
            for m in ["q", "k", "v", "o"] {
                s.insert(format!("prior.l{l}.{m}"), init_normal(&mut rng, &[d, d], sd));
            }
            init_linear(&mut s, &format!("prior.l{l}.fc1"), d, 2 * d, false, &mut rng);
            init_linear(&mut s, &format!("prior.l{l}.fc2"), 2 * d, d, false, &mut rng);
        }
        init_linear(&mut s, "prior.head", d, config.codebook_size, false, &mut rng);
        Ok(Self { config, params: s })
    }

    pub fn from_params(config: PriorConfig, params: ParamStore) -> Result<Self> {
        check_against(&Self::new(config, 0)?.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl TokenPredictor for MaskedPrior {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn log_probs<'t>(&self, p: &Bound<'t>, corrupted: &TokenGrid, caption: &str) -> Result<Var<'t>> {
        let cfg = &self.config;
        if corrupted.dims() != cfg.grid || corrupted.codebook_size() != cfg.codebook_size {
            return Err(Error::shape("prior input", &corrupted.dims(), &cfg.grid));
        }
        let encoder = TextEncoder {
            prefix: "prior.text".into(),
            vocab: cfg.vocab,
            dim: cfg.dim,
        };
        let text = encoder.embed(p, caption)?;
        let l = text.shape()[0];
        let cells = cfg.cells();
        let pos = p.get("prior.pos")?;
        let text_pos: Vec<usize> = (0..l).collect();
        let grid_pos: Vec<usize> = (MAX_TOKENS..MAX_TOKENS + cells).collect();
        let codes = p.get("prior.code")?.index_rows(corrupted.codes())?;
        let mut x = Var::concat_rows(&[
            text.add(pos.index_rows(&text_pos)?)?,
            codes.add(pos.index_rows(&grid_pos)?)?,
        ])?;
        for i in 0..cfg.layers {
            let name = |m: &str| format!("prior.l{i}.{m}");
            let h = x.layer_norm_rows();
            let a = attention(
                h.matmul(p.get(&name("q"))?)?,
                h.matmul(p.get(&name("k"))?)?,
                h.matmul(p.get(&name("v"))?)?,
            )?;
            x = x.add(a.matmul(p.get(&name("o"))?)?)?;
            let h = linear(p, &name("fc1"), x.layer_norm_rows())?.silu();
            x = x.add(linear(p, &name("fc2"), h)?)?;
        }
        let rows: Vec<usize> = (l..l + cells).collect();
        let grid = x.index_rows(&rows)?.layer_norm_rows();
        Ok(linear(p, "prior.head", grid)?.log_softmax_rows())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorFitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PriorFitOptions {
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

/// Trains the prior on `(grid, caption)` pairs; every example gets a fresh
/// mask rate drawn uniformly from `[0, 1]`.
pub fn fit_prior(prior: &mut MaskedPrior, data: &[(TokenGrid, String)], options: &PriorFitOptions) -> Result<Vec<f64>> {
    check_fit(options.steps, options.batch_size, data.len())?;
    let mut opt = Adam::new(options.lr);
    let mut losses = Vec::with_capacity(options.steps);
    for step in 0..options.steps {
        let mut grads = alloc::collections::BTreeMap::new();
        let mut total = 0.0;
        for (b, i) in batch_indices(data.len(), options.batch_size, step, options.seed).into_iter().enumerate() {
            let stream = derive_seed(options.seed, ((step * options.batch_size + b) as u64) << 1 | 1);
            let rate = seeded(stream).random_range(0.0..=1.0);
            let (z, caption) = &data[i];
            let z_bar = mask_corrupt(z, rate, derive_seed(stream, 1))?;
            let tape = Tape::new();
            let p = prior.params.bind(&tape);
            let loss = prior_loss_on_tape(&tape, &p, prior, z, &z_bar, caption)?;
            total += loss.item();
            let g = tape.backward(loss)?;
            accumulate(&mut grads, p.gradients(&g));
        }
        let inv = 1.0 / options.batch_size as f64;
        scale_grads(&mut grads, inv);
        clip_global_norm(&mut grads, options.max_grad_norm);
        opt.step(&mut prior.params, &grads)?;
        if !prior.params.is_finite() {
            return Err(Error::Numeric(format!("prior diverged at optimizer step {step}")));
        }
        losses.push(total * inv);
    }
    Ok(losses)
}

/// Iterative parallel decoding: starting from an all-MASK grid, each round
/// samples every masked cell and keeps the most confident samples until
/// none remain after `rounds` rounds.
pub fn sample_tokens<P: TokenPredictor + ?Sized>(
    predictor: &P,
    caption: &str,
    dims: [usize; 3],
    codebook_size: usize,
    rounds: usize,
    seed: u64,
) -> Result<TokenGrid> {
    if rounds == 0 {
        return Err(Error::Config("need at least one decoding round".into()));
    }
    let cells: usize = dims.iter().product();
    let mut grid = TokenGrid::new(dims, codebook_size, alloc::vec![codebook_size; cells])?;
    let mut rng = seeded(seed);
    for r in 0..rounds {
        let tape = Tape::new();
        let p = predictor.params().bind_frozen(&tape);
        let logp = predictor.log_probs(&p, &grid, caption)?.value();
        let mut proposals: Vec<(f64, usize, usize)> = Vec::new();
        for cell in grid.masked_positions() {
            let row = &logp.data()[cell * codebook_size..(cell + 1) * codebook_size];
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut pick = codebook_size - 1;
            for (k, &lp) in row.iter().enumerate() {
                acc += libm::exp(lp);
                if u < acc {
                    pick = k;
                    break;
                }
            }
            proposals.push((row[pick], cell, pick));
        }
        let remaining = cells * (rounds - 1 - r) / rounds;
        let keep = proposals.len().saturating_sub(remaining);
        proposals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, cell, code) in &proposals[..keep] {
            grid.codes[cell] = code;
        }
    }
    Ok(grid)
}
