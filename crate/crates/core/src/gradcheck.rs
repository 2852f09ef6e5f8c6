//! Central finite-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{attention, Tape, Var};
use crate::denoiser::{Denoiser, DenoiserConfig, TemporalKind};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::random::{derive_seed, normal_tensor, seeded};
use crate::sti::{StiConfig, StiLayer};
use crate::tensor::Tensor;
use crate::vq::{mask_corrupt, prior_loss_on_tape, MaskedPrior, PriorConfig, TokenGrid, TokenPredictor};

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every coordinate
/// of `x`, where `numeric` is the central difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !x.is_finite() {
        return Err(Error::Numeric("grad_check point is not finite".into()));
    }
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    check_finite(loss.item(), "loss at the base point")?;
    let analytic = tape.backward(loss)?.get_or_zeros(xv);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new(x.shape(), data)?);
        let y = f(&tape, xv)?;
        if y.numel() != 1 {
            return Err(Error::Graph("grad_check function must return a scalar"));
        }
        Ok(y.item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fp = check_finite(eval(plus)?, "perturbed loss")?;
        let fm = check_finite(eval(minus)?, "perturbed loss")?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = libm::fabs(a - numeric) / libm::fabs(a).max(1.0);
        check_finite(err, "gradient difference")?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {v}")))
    }
}

/// Tolerance every suite entry must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

/// Replaces all-zero tensors (zero-initialized outputs, gates) with small
/// random values so every path carries gradient.
pub fn randomize_zeros(store: &mut ParamStore, seed: u64) {
    let mut rng = seeded(seed);
    let zero: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|(_, t)| t.data().iter().all(|&v| v == 0.0))
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in zero {
        store.insert(name, normal_tensor(&mut rng, &shape).map(|v| 0.3 * v));
    }
}

fn weighted_sum<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(y.tape().constant(w.clone()))?.sum())
}

fn check_param<F>(store: &ParamStore, name: &str, f: F) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let x = store.get(name)?.clone();
    let err = grad_check(
        |tape, x| {
            let mut p = store.bind_frozen(tape);
            p.replace(name, x)?;
            f(tape, &p)
        },
        &x,
        1e-5,
    )?;
    Ok(CheckResult {
        name: String::new(),
        max_rel_error: err,
        coordinates: x.numel(),
    })
}

fn named(mut r: CheckResult, name: &str) -> CheckResult {
    r.name = name.to_string();
    r
}

/// Central-difference checks of every differentiable building block:
/// attention, temporal convolution, the STI layer, the denoiser end to end
/// on a 4x8x8 clip, and the masked-token prior.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    let eps = 1e-5;

    let q = normal_tensor(&mut rng, &[5, 3]);
    let k = normal_tensor(&mut rng, &[4, 3]);
    let v = normal_tensor(&mut rng, &[4, 2]);
    let w = normal_tensor(&mut rng, &[5, 2]);
    for (name, which) in [("attention.q", 0), ("attention.k", 1), ("attention.v", 2)] {
        let x = [&q, &k, &v][which].clone();
        let err = grad_check(
            |tape, x| {
                let mut args = [tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone())];
                args[which] = x;
                weighted_sum(attention(args[0], args[1], args[2])?, &w)
            },
            &x,
            eps,
        )?;
        out.push(CheckResult { name: name.to_string(), max_rel_error: err, coordinates: x.numel() });
    }

    let h = normal_tensor(&mut rng, &[5, 2, 3, 4]);
    let kernel = normal_tensor(&mut rng, &[3, 4]);
    let wh = normal_tensor(&mut rng, &[5, 2, 3, 4]);
    let err = grad_check(
        |tape, x| weighted_sum(x.temporal_conv(tape.constant(kernel.clone()))?, &wh),
        &h,
        eps,
    )?;
    out.push(CheckResult { name: "temporal_conv.input".into(), max_rel_error: err, coordinates: h.numel() });
    let err = grad_check(
        |tape, x| weighted_sum(tape.constant(h.clone()).temporal_conv(x)?, &wh),
        &kernel,
        eps,
    )?;
    out.push(CheckResult { name: "temporal_conv.kernel".into(), max_rel_error: err, coordinates: kernel.numel() });

    let mut store = ParamStore::new();
    let sti_cfg = StiConfig { channels: 4, gamma: 2, k: 3 };
    let layer = StiLayer::init(&mut store, StiLayer::prefix_for(0), sti_cfg, &mut rng)?;
    randomize_zeros(&mut store, derive_seed(seed, 1));
    let hs = normal_tensor(&mut rng, &[3, 4, 4, 4]);
    let ws = normal_tensor(&mut rng, &[3, 4, 4, 4]);
    let err = grad_check(
        |tape, x| {
            let p = store.bind_frozen(tape);
            weighted_sum(layer.forward(&p, x)?.features, &ws)
        },
        &hs,
        eps,
    )?;
    out.push(CheckResult { name: "sti.input".into(), max_rel_error: err, coordinates: hs.numel() });
    for param in ["lambda", "q", "kernel"] {
        let name = alloc::format!("{}.{param}", layer.prefix);
        let r = check_param(&store, &name, |tape, p| {
            weighted_sum(layer.forward(p, tape.constant(hs.clone()))?.features, &ws)
        })?;
        out.push(named(r, &alloc::format!("sti.{param}")));
    }

    let toy = DenoiserConfig {
        base_channels: 4,
        depth: 1,
        temporal: TemporalKind::Sti,
        gamma: 2,
        k: 3,
        text_dim: 4,
        vocab: 32,
        time_dim: 4,
        frames: 4,
        height: 8,
        width: 8,
        channels: 3,
    };
    let mut net = Denoiser::new(toy, derive_seed(seed, 2))?;
    randomize_zeros(net.params_mut(), derive_seed(seed, 3));
    let x = normal_tensor(&mut rng, &[4, 8, 8, 3]);
    let wx = normal_tensor(&mut rng, &[4, 8, 8, 3]);
    let caption = "cartoon\ta red star spinning in a circle";
    let err = grad_check(
        |tape, x| {
            let p = net.params().bind_frozen(tape);
            weighted_sum(net.denoise(&p, x, 321, caption)?, &wx)
        },
        &x,
        eps,
    )?;
    out.push(CheckResult { name: "denoiser.input".into(), max_rel_error: err, coordinates: x.numel() });
    for param in ["unet.l1.xattn.q", "unet.l0.fuse.w", "text.embed"] {
        let r = check_param(net.params(), param, |tape, p| {
            weighted_sum(net.denoise(p, tape.constant(x.clone()), 321, caption)?, &wx)
        })?;
        out.push(named(r, &alloc::format!("denoiser.{param}")));
    }

    let prior = MaskedPrior::new(
        PriorConfig {
            codebook_size: 8,
            grid: [2, 2, 2],
            dim: 8,
            layers: 2,
            vocab: 16,
        },
        derive_seed(seed, 4),
    )?;
    let codes: Vec<usize> = (0..8).map(|_| rng.random_range(0..8)).collect();
    let z = TokenGrid::new([2, 2, 2], 8, codes)?;
    let z_bar = mask_corrupt(&z, 0.5, derive_seed(seed, 5))?;
    for param in ["prior.code", "prior.l0.q", "prior.l1.fc1.w", "prior.head.w"] {
        let r = check_param(prior.params(), param, |tape, p| prior_loss_on_tape(tape, p, &prior, &z, &z_bar, "real\ta blue circle"))?;
        out.push(named(r, &alloc::format!("vq_prior.{}", param.trim_start_matches("prior."))));
    }
    Ok(out)
}
