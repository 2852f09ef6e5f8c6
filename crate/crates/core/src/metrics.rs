//! Evaluation: Fréchet distance between clip feature populations, a
//! contrastive video/text dual encoder for retrieval scores, and a temporal
//! discreteness measure.
//!
//! The feature extractor is the locally trained video tower, so distances
//! are only comparable between runs that share one encoder checkpoint.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv3dSpec, Tape, Var};
use crate::clip::{Clip, CHANNELS, FRAMES, SIZE};
use crate::error::{Error, Result};
use crate::nn::{accumulate, clip_global_norm, conv, init_conv, init_linear, linear, Adam, Bound, ParamStore};
use crate::random::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::text::TextEncoder;

pub const TEMPERATURE: f64 = 0.07;

pub const ENCODER_NOTE: &str = "fvd uses the locally trained toy video tower as feature extractor; \
scores are comparable only between runs sharing the same encoder checkpoint";

/// Mean and unbiased covariance of a feature population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Invalid(format!("need at least 2 samples, got {}", rows.len())));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("feature rows must share a positive dimension".into()));
        }
        let n = rows.len() as f64;
        let mut mean = alloc::vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = alloc::vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        let s = Self { mean, cov, count: rows.len() };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(Error::shape("feature stats", &[self.cov.len()], &[d, d]));
        }
        if !self.mean.iter().chain(&self.cov).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite feature statistics".into()));
        }
        Ok(())
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, evaluated through
/// the symmetric form `(sqrt(S_a) S_b sqrt(S_a))^(1/2)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    a.check()?;
    b.check()?;
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(sa.clone());
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| libm::sqrt(l.max(0.0)))
        .sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub hidden: usize,
    pub features: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub vocab: usize,
    pub temperature: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            features: 32,
            embed_dim: 32,
            text_dim: 32,
            vocab: 512,
            temperature: TEMPERATURE,
            frames: FRAMES,
            height: SIZE,
            width: SIZE,
            channels: CHANNELS,
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.features == 0 || self.embed_dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("dual encoder widths must be positive".into()));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.frames == 0 {
            return Err(Error::Config("clip height and width must be multiples of 4".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Contrastive video/text encoder pair sharing one embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: DualConfig,
    params: ParamStore,
}

const SPACETIME_K: [usize; 3] = [3, 3, 3];

impl DualEncoder {
    pub fn new(config: DualConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let (h, f) = (config.hidden, config.features);
        init_conv(&mut s, "dual.video.c1", SPACETIME_K, 2 * config.channels, h, false, &mut rng);
        init_conv(&mut s, "dual.video.c2", SPACETIME_K, h, f, false, &mut rng);
        init_linear(&mut s, "dual.video.proj", 2 * f, config.embed_dim, false, &mut rng);
        TextEncoder::init(&mut s, "dual.text", config.vocab, config.text_dim, &mut rng)?;
        init_linear(&mut s, "dual.text.proj", config.text_dim, config.embed_dim, false, &mut rng);
        Ok(Self { config, params: s })
    }

    pub fn from_params(config: DualConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::shape("checkpoint tensor", params.get(name)?.shape(), t.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DualConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Pooled video-tower features `[1, 2 * features]` of a model-space clip:
    /// mean and log-mean-exp pooling of a two-layer spatio-temporal conv
    /// stack over the half-resolution clip and its forward frame differences.
    pub fn video_features<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        let expected = [c.frames, c.height, c.width, c.channels];
        if x.shape() != expected {
            return Err(Error::shape("video tower", &x.shape(), &expected));
        }
        let diff_kernel = Tensor::from_fn(&[3, c.channels], |i| match i / c.channels {
            1 => -1.0,
            2 => 1.0,
            _ => 0.0,
        });
        let diff = x.temporal_conv(x.tape().constant(diff_kernel))?;
        let h = Var::concat_last(&[x, diff])?.avg_pool3([1, 2, 2])?;
        let h = conv(p, "dual.video.c1", h, Conv3dSpec::same(SPACETIME_K))?.silu();
        let h = h.avg_pool3([1, 2, 2])?;
        let h = conv(p, "dual.video.c2", h, Conv3dSpec::same(SPACETIME_K))?.silu();
        let rows = c.frames * (c.height / 4) * (c.width / 4);
        let h = h.reshape(&[rows, c.features])?;
        let mean = h.mean_rows()?.reshape(&[1, c.features])?;
        let soft_max = h.exp().mean_rows()?.ln().reshape(&[1, c.features])?;
        Var::concat_last(&[mean, soft_max])
    }

    pub fn video_embedding<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.video_features(p, x)?;
        Ok(linear(p, "dual.video.proj", f)?.l2_normalize_rows())
    }

    pub fn text_embedding<'t>(&self, p: &Bound<'t>, caption: &str) -> Result<Var<'t>> {
        let enc = TextEncoder {
            prefix: "dual.text".into(),
            vocab: self.config.vocab,
            dim: self.config.text_dim,
        };
        let tokens = enc.embed(p, caption)?;
        let pooled = tokens.mean_rows()?.reshape(&[1, self.config.text_dim])?;
        Ok(linear(p, "dual.text.proj", pooled)?.l2_normalize_rows())
    }

    /// Symmetric in-batch InfoNCE loss over paired clips and captions.
    pub fn contrastive_loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, clips: &[Tensor], captions: &[&str]) -> Result<Var<'t>> {
        if clips.len() != captions.len() || clips.is_empty() {
            return Err(Error::Invalid("contrastive batch needs matching non-empty clips and captions".into()));
        }
        let v: Vec<Var<'t>> = clips
            .iter()
            .map(|c| self.video_embedding(p, tape.constant(c.clone())))
            .collect::<Result<_>>()?;
        let t: Vec<Var<'t>> = captions.iter().map(|c| self.text_embedding(p, c)).collect::<Result<_>>()?;
        let (v, t) = (Var::concat_rows(&v)?, Var::concat_rows(&t)?);
        let inv_t = 1.0 / self.config.temperature;
        let diag: Vec<usize> = (0..clips.len()).collect();
        let v2t = v.matmul_t(t, false, true)?.scale(inv_t).log_softmax_rows();
        let t2v = t.matmul_t(v, false, true)?.scale(inv_t).log_softmax_rows();
        let a = v2t.pick_per_row(&diag)?.mean();
        let b = t2v.pick_per_row(&diag)?.mean();
        Ok(a.add(b)?.scale(-0.5))
    }

    pub fn embed_clip(&self, clip: &Clip) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.video_embedding(&p, tape.constant(clip.to_model_space()))?.value().to_vec())
    }

    pub fn embed_text(&self, caption: &str) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.text_embedding(&p, caption)?.value().to_vec())
    }

    pub fn clip_features(&self, clip: &Clip) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.video_features(&p, tape.constant(clip.to_model_space()))?.value().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualFitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for DualFitOptions {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            lr: 3e-3,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

/// Trains the dual encoder on `(clip, caption)` pairs with in-batch negatives.
pub fn fit_dual(enc: &mut DualEncoder, data: &[(Clip, String)], options: &DualFitOptions) -> Result<Vec<f64>> {
    if data.len() < 2 {
        return Err(Error::Invalid("contrastive training needs at least 2 pairs".into()));
    }
    if options.steps == 0 || options.batch_size < 2 {
        return Err(Error::Config("need at least one step and a batch of 2".into()));
    }
    use rand::seq::SliceRandom;
    let model_space: Vec<Tensor> = data.iter().map(|(c, _)| c.to_model_space()).collect();
    let batch = options.batch_size.min(data.len());
    let per_epoch = data.len() / batch;
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Adam::new(options.lr);
    let mut losses = Vec::with_capacity(options.steps);
    for step in 0..options.steps {
        let slot = step % per_epoch;
        if slot == 0 {
            order = (0..data.len()).collect();
            order.shuffle(&mut seeded(derive_seed(options.seed, (step / per_epoch) as u64)));
        }
        let idx = &order[slot * batch..(slot + 1) * batch];
        let clips: Vec<Tensor> = idx.iter().map(|&i| model_space[i].clone()).collect();
        let captions: Vec<&str> = idx.iter().map(|&i| data[i].1.as_str()).collect();
        let tape = Tape::new();
        let p = enc.params.bind(&tape);
        let loss = enc.contrastive_loss(&tape, &p, &clips, &captions)?;
        let value = loss.item();
        let g = tape.backward(loss)?;
        let mut grads = alloc::collections::BTreeMap::new();
        accumulate(&mut grads, p.gradients(&g));
        clip_global_norm(&mut grads, options.max_grad_norm);
        opt.step(&mut enc.params, &grads)?;
        if !value.is_finite() || !enc.params.is_finite() {
            return Err(Error::Numeric(format!("dual encoder diverged at optimizer step {step}")));
        }
        log::debug!("dual step {step}: loss {value:.5}");
        losses.push(value);
    }
    Ok(losses)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scores: Vec<f64>,
    /// 1-based: one plus the number of candidates scoring strictly higher
    /// than the paired caption.
    pub rank: usize,
}

/// Rank of `scores[truth]` among all scores.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    1 + scores.iter().filter(|&&s| s > scores[truth]).count()
}

pub fn similarity_from_embeddings(video: &[f64], candidates: &[Vec<f64>], truth: usize) -> Result<Similarity> {
    if candidates.is_empty() {
        return Err(Error::Invalid("empty candidate set".into()));
    }
    if truth >= candidates.len() {
        return Err(Error::Invalid(format!("true caption index {truth} out of range")));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| cosine(video, c)).collect();
    let rank = rank_of(&scores, truth);
    Ok(Similarity { scores, rank })
}

/// Cosine similarity of `clip` against every candidate caption.
pub fn clip_similarity(enc: &DualEncoder, clip: &Clip, candidates: &[String], truth: usize) -> Result<Similarity> {
    let texts: Vec<Vec<f64>> = candidates.iter().map(|c| enc.embed_text(c)).collect::<Result<_>>()?;
    similarity_from_embeddings(&enc.embed_clip(clip)?, &texts, truth)
}

/// Mean over consecutive frame pairs of the RMS pixel difference, in `[0, 1]`
/// for pixels in `[0, 1]`.
pub fn discreteness(clip: &Clip) -> f64 {
    let f = clip.frames();
    if f < 2 {
        log::warn!("discreteness of a single-frame clip is defined as 0");
        return 0.0;
    }
    let n = clip.frame_len() as f64;
    let total: f64 = (0..f - 1)
        .map(|t| {
            let sq: f64 = clip.frame(t).iter().zip(clip.frame(t + 1)).map(|(a, b)| (a - b) * (a - b)).sum();
            libm::sqrt(sq / n)
        })
        .sum();
    total / (f - 1) as f64
}

pub fn population_stats(enc: &DualEncoder, clips: &[Clip]) -> Result<FeatureStats> {
    if clips.len() < 2 {
        return Err(Error::Invalid(format!("fvd needs at least 2 clips per side, got {}", clips.len())));
    }
    let rows: Vec<Vec<f64>> = clips.iter().map(|c| enc.clip_features(c)).collect::<Result<_>>()?;
    FeatureStats::from_rows(&rows)
}

/// Fréchet distance between video-tower features of two clip populations.
pub fn fvd(enc: &DualEncoder, real: &[Clip], generated: &[Clip]) -> Result<f64> {
    frechet_distance(&population_stats(enc, real)?, &population_stats(enc, generated)?)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fvd: f64,
    pub clip_sim_mean: f64,
    pub clip_rank_median: f64,
    pub discreteness_mean: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub note: String,
}

/// Scores generated clips against a real population. Each generated clip is
/// paired with its prompt, which must appear in `candidates`.
pub fn evaluate(enc: &DualEncoder, real: &[Clip], generated: &[(Clip, String)], candidates: &[String]) -> Result<MetricReport> {
    let gen_clips: Vec<Clip> = generated.iter().map(|(c, _)| c.clone()).collect();
    let fvd = fvd(enc, real, &gen_clips)?;
    let texts: Vec<Vec<f64>> = candidates.iter().map(|c| enc.embed_text(c)).collect::<Result<_>>()?;
    let mut sims = Vec::with_capacity(generated.len());
    let mut ranks = Vec::with_capacity(generated.len());
    for (clip, prompt) in generated {
        let truth = candidates
            .iter()
            .position(|c| c == prompt)
            .ok_or_else(|| Error::Invalid(format!("prompt `{prompt}` missing from candidates")))?;
        let s = similarity_from_embeddings(&enc.embed_clip(clip)?, &texts, truth)?;
        sims.push(s.scores[truth]);
        ranks.push(s.rank as f64);
    }
    let n = generated.len() as f64;
    Ok(MetricReport {
        fvd,
        clip_sim_mean: sims.iter().sum::<f64>() / n,
        clip_rank_median: median(&ranks),
        discreteness_mean: gen_clips.iter().map(discreteness).sum::<f64>() / n,
        n_real: real.len(),
        n_gen: generated.len(),
        note: ENCODER_NOTE.to_string(),
    })
}

#[cfg(test)]
mod tests;
