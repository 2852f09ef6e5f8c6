//! Spatial-temporal interaction layer.
//!
//! For a clip feature map `h: [F, H, W, d]` the layer combines two branches:
//!
//! * semantic interaction: average-pool space by `gamma`, flatten all frames
//!   and positions into `F * (H/gamma) * (W/gamma)` tokens, run single-head
//!   self-attention across every token of every frame, then upsample back
//!   with nearest-neighbour repetition;
//! * detail preservation: a per-channel `k x 1 x 1` temporal convolution.
//!
//! ```text
//! out = h + sigmoid(lambda) * semantic(h) + (1 - sigmoid(lambda)) * detail(h)
//! ```
//!
//! The output projection and the temporal kernel start at zero, so a freshly
//! initialized layer is the identity map.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::autodiff::{attention_with_weights, Var};
use crate::error::{Error, Result};
use crate::nn::{init_normal, join, Bound, ParamStore};
use crate::random::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StiConfig {
    pub channels: usize,
    /// Spatial downsampling factor of the semantic branch.
    pub gamma: usize,
    /// Temporal kernel size of the detail branch; odd.
    pub k: usize,
}

impl StiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("STI channels must be positive".into()));
        }
        if self.gamma == 0 {
            return Err(Error::Config("STI gamma must be a positive integer".into()));
        }
        check_kernel_size(self.k)
    }
}

pub(crate) fn check_kernel_size(k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("temporal kernel size must be odd, got {k}")))
    }
}

/// Result of one STI forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StiOutput<'t> {
    pub features: Var<'t>,
    /// `sigmoid(lambda)`, the weight of the semantic branch.
    pub gate: f64,
    /// Number of entries in the materialized attention matrix.
    pub attention_entries: usize,
}

/// Handle to one STI layer whose parameters live under `prefix` in a
/// [`ParamStore`]: `q`, `k`, `v`, `out` (each `[d, d]`), `kernel` (`[k, d]`)
/// and `lambda` (`[1]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StiLayer {
    pub prefix: String,
    pub config: StiConfig,
}

impl StiLayer {
    /// Conventional name prefix for layer `index`.
    pub fn prefix_for(index: usize) -> String {
        format!("sti.{index}")
    }

    pub fn init(store: &mut ParamStore, prefix: impl Into<String>, config: StiConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let prefix = prefix.into();
        let d = config.channels;
        let std = libm::sqrt(1.0 / d as f64);
        for name in ["q", "k", "v"] {
            store.insert(join(&prefix, name), init_normal(rng, &[d, d], std));
        }
        store.insert(join(&prefix, "out"), Tensor::zeros(&[d, d]));
        store.insert(join(&prefix, "kernel"), Tensor::zeros(&[config.k, d]));
        store.insert(join(&prefix, "lambda"), Tensor::scalar(0.0));
        Ok(Self { prefix, config })
    }

    fn param<'t>(&self, p: &Bound<'t>, name: &str) -> Result<Var<'t>> {
        p.get(&join(&self.prefix, name))
    }

    fn check_input(&self, h: Var<'_>) -> Result<[usize; 4]> {
        let s = h.shape();
        if s.len() != 4 || s[3] != self.config.channels {
            return Err(Error::shape("sti", &s, &[self.config.channels]));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Attention across all frames on the `gamma`-downsampled grid,
    /// restored to the input size. Returns the branch output and the
    /// number of attention-matrix entries.
    pub fn semantic_interaction<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<(Var<'t>, usize)> {
        let [f, height, width, d] = self.check_input(h)?;
        let g = self.config.gamma;
        if height % g != 0 || width % g != 0 {
            return Err(Error::Config(format!(
                "gamma {g} does not divide spatial extent {height}x{width}"
            )));
        }
        let (hg, wg) = (height / g, width / g);
        let tokens_n = f * hg * wg;
        let pooled = if g == 1 { h } else { h.avg_pool3([1, g, g])? };
        let tokens = pooled.reshape(&[tokens_n, d])?;
        let q = tokens.matmul(self.param(p, "q")?)?;
        let k = tokens.matmul(self.param(p, "k")?)?;
        let v = tokens.matmul(self.param(p, "v")?)?;
        let (mixed, _) = attention_with_weights(q, k, v)?;
        let projected = mixed.matmul(self.param(p, "out")?)?;
        let grid = projected.reshape(&[f, hg, wg, d])?;
        let restored = if g == 1 { grid } else { grid.upsample3([1, g, g])? };
        Ok((restored, tokens_n * tokens_n))
    }

    /// Per-channel temporal convolution at every spatial location.
    pub fn detail_preserve<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
        self.check_input(h)?;
        check_kernel_size(self.config.k)?;
        h.temporal_conv(self.param(p, "kernel")?)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<StiOutput<'t>> {
        let (semantic, attention_entries) = self.semantic_interaction(p, h)?;
        let detail = self.detail_preserve(p, h)?;
        let gate = self.param(p, "lambda")?.sigmoid();
        let inverse = gate.neg().add_scalar(1.0);
        let features = h
            .add(semantic.scale_by(gate)?)?
            .add(detail.scale_by(inverse)?)?;
        Ok(StiOutput {
            features,
            gate: gate.item(),
            attention_entries,
        })
    }
}
