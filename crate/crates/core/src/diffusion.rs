//! Forward noising, the noise-prediction objective and deterministic DDIM
//! sampling.
//!
//! The noising coefficient is the cumulative product
//! `alpha_bar_t = prod_{s <= t} (1 - beta_s)`, so a noised sample is drawn in
//! one shot as `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::random::{derive_seed, normal_tensor, seeded};
use crate::tensor::Tensor;

/// Number of DDIM sampling steps.
pub const DDIM_STEPS: usize = 25;
pub const DEFAULT_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

impl core::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown noise schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha_bar[t - 1]` for `t = 1..=T`.
    alpha_bar: Vec<f64>,
    /// Ascending sampling sub-sequence of step indices in `1..=T`.
    ddim_steps: Vec<usize>,
}

pub fn make_schedule(timesteps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if timesteps < DDIM_STEPS {
        return Err(Error::Config(format!(
            "schedule needs at least {DDIM_STEPS} steps, got {timesteps}"
        )));
    }
    let alpha_bar = match kind {
        ScheduleKind::Linear => {
            let mut acc = 1.0;
            (0..timesteps)
                .map(|i| {
                    let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (timesteps - 1) as f64;
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
    };
    let mut schedule = NoiseSchedule {
        alpha_bar,
        ddim_steps: Vec::new(),
    };
    schedule.set_sampling_steps(DDIM_STEPS)?;
    Ok(schedule)
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `alpha_bar_t` for `t` in `1..=T`; `t = 0` is the clean signal (1.0).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.timesteps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::Invalid(format!("step {t} outside 1..={}", self.timesteps()))),
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sampling_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// Replaces the sampling sub-sequence with `n` indices evenly spaced
    /// over `1..=T`; `n = 1` samples in a single step from `T`.
    pub fn set_sampling_steps(&mut self, n: usize) -> Result<()> {
        let total = self.timesteps();
        if n == 0 || n > total {
            return Err(Error::Config(format!("cannot pick {n} sampling steps from {total}")));
        }
        self.ddim_steps = if n == 1 {
            alloc::vec![total]
        } else {
            (0..n)
                .map(|i| 1 + libm::round(i as f64 * (total - 1) as f64 / (n - 1) as f64) as usize)
                .collect()
        };
        Ok(())
    }

    pub fn with_sampling_steps(mut self, n: usize) -> Result<Self> {
        self.set_sampling_steps(n)?;
        Ok(self)
    }

    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        q_sample(x0, self.alpha_bar(t)?, eps)
    }
}

/// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`.
pub fn q_sample(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let (a, b) = (libm::sqrt(alpha_bar), libm::sqrt(1.0 - alpha_bar));
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}

/// A network that predicts the noise in `x_t` given the step and caption.
pub trait NoisePredictor {
    fn params(&self) -> &ParamStore;

    /// `p` holds [`NoisePredictor::params`] recorded on the tape of `x_t`.
    fn predict<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, t: usize, caption: &str) -> Result<Var<'t>>;
}

/// The step and noise drawn for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

/// Uniform step in `1..=T` and standard normal noise, both from `seed`.
pub fn draw_noise(schedule: &NoiseSchedule, shape: &[usize], seed: u64) -> NoiseDraw {
    let mut rng = seeded(seed);
    let t = rng.random_range(1..=schedule.timesteps());
    let eps = normal_tensor(&mut seeded(derive_seed(seed, 1)), shape);
    NoiseDraw { t, eps }
}

/// Records the mean squared error between the predicted and the true noise.
pub fn loss_on_tape<'t, N: NoisePredictor + ?Sized>(
    tape: &'t Tape,
    p: &Bound<'t>,
    net: &N,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    caption: &str,
    draw: &NoiseDraw,
) -> Result<Var<'t>> {
    let x_t = schedule.q_sample(x0, draw.t, &draw.eps)?;
    let pred = net.predict(p, tape.constant(x_t), draw.t, caption)?;
    let loss = pred.mse(tape.constant(draw.eps.clone()))?;
    if !loss.item().is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss at step t={}", draw.t)));
    }
    Ok(loss)
}

/// Noise-prediction loss for one clip with `(t, eps)` drawn from `seed`.
pub fn training_loss<N: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    caption: &str,
    net: &N,
    seed: u64,
) -> Result<f64> {
    let draw = draw_noise(schedule, x0.shape(), seed);
    let tape = Tape::new();
    let p = net.params().bind_frozen(&tape);
    Ok(loss_on_tape(&tape, &p, net, schedule, x0, caption, &draw)?.item())
}

/// Deterministic (eta = 0) DDIM sampling over the schedule's sampling steps,
/// starting from standard normal noise drawn from `seed`. The result is
/// clamped to `[-1, 1]`.
pub fn ddim_sample<N: NoisePredictor + ?Sized>(
    net: &N,
    caption: &str,
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let x_start = normal_tensor(&mut seeded(seed), shape);
    let x0 = ddim_from(net, caption, schedule, x_start)?;
    Ok(x0.map(|v| v.clamp(-1.0, 1.0)))
}

/// DDIM trajectory from a given `x_T`. Each step's clean estimate is
/// clipped to `[-1, 1]` and the noise estimate re-derived from it; the
/// returned tensor itself is not clamped.
pub fn ddim_from<N: NoisePredictor + ?Sized>(
    net: &N,
    caption: &str,
    schedule: &NoiseSchedule,
    x_start: Tensor,
) -> Result<Tensor> {
    let steps = schedule.sampling_steps();
    let mut x = x_start;
    for (i, &t) in steps.iter().enumerate().rev() {
        let t_next = if i == 0 { 0 } else { steps[i - 1] };
        let (a, a_next) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_next)?);
        let eps_hat = {
            let tape = Tape::new();
            let p = net.params().bind_frozen(&tape);
            net.predict(&p, tape.constant(x.clone()), t, caption)?.value()
        };
        if eps_hat.shape() != x.shape() {
            return Err(Error::shape("ddim_sample", x.shape(), eps_hat.shape()));
        }
        let (sa, sb) = (libm::sqrt(a), libm::sqrt(1.0 - a));
        let (na, nb) = (libm::sqrt(a_next), libm::sqrt(1.0 - a_next));
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&xt, &e)| {
                let x0_hat = (xt - sb * e) / sa;
                if (-1.0..=1.0).contains(&x0_hat) {
                    return na * x0_hat + nb * e;
                }
                let x0_hat = x0_hat.clamp(-1.0, 1.0);
                na * x0_hat + nb * (xt - sa * x0_hat) / sb
            })
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at DDIM step {} (t={t})",
                steps.len() - i
            )));
        }
        x = Tensor::new(x.shape(), data)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use alloc::vec;
    use alloc::vec::Vec;

    use super::*;
    use crate::random::normal_tensor;

    struct Fixed<F>(ParamStore, F);

    impl<F> NoisePredictor for Fixed<F>
    where
        F: Fn(&Tensor, usize) -> Tensor,
    {
        fn params(&self) -> &ParamStore {
            &self.0
        }

        fn predict<'t>(&self, _: &Bound<'t>, x_t: Var<'t>, t: usize, _: &str) -> Result<Var<'t>> {
            Ok(x_t.tape().constant((self.1)(&x_t.value(), t)))
        }
    }

    fn fixed<F: Fn(&Tensor, usize) -> Tensor>(f: F) -> Fixed<F> {
        Fixed(ParamStore::new(), f)
    }

    #[test]
    fn linear_schedule_values() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.9999);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // cumulative product evaluated independently: 4.035829765375676e-05
        let last = s.alpha_bar(1000).unwrap();
        assert!(last < 0.01);
        assert!((last - 4.035829765375676e-05).abs() < 1e-15);
        let steps = s.sampling_steps();
        assert_eq!(steps.len(), 25);
        assert_eq!((steps[0], steps[24]), (1, 1000));
    }

    #[test]
    fn short_schedules() {
        let s = make_schedule(25, ScheduleKind::Linear).unwrap();
        assert_eq!(s.sampling_steps(), (1..=25).collect::<Vec<_>>().as_slice());
        assert!(matches!(make_schedule(24, ScheduleKind::Linear), Err(Error::Config(_))));
        assert!("cosine".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn q_sample_cases() {
        let x0 = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let eps = Tensor::new(&[2], vec![1.5, 2.0]).unwrap();
        assert_eq!(q_sample(&x0, 1.0, &eps).unwrap(), x0);
        assert_eq!(q_sample(&x0, 0.0, &eps).unwrap(), eps);
        let one = Tensor::scalar(1.0);
        let v = q_sample(&one, 0.25, &one).unwrap().data()[0];
        assert!((v - 1.366_025_403_784_438_6).abs() < 1e-15);
        assert!(q_sample(&x0, 0.5, &one).is_err());
    }

    #[test]
    fn noising_is_exactly_invertible_and_bounded() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let mut rng = seeded(3);
        let x0 = normal_tensor(&mut rng, &[4, 3]);
        let eps = normal_tensor(&mut rng, &[4, 3]);
        let norm = |t: &Tensor| libm::sqrt(t.data().iter().map(|x| x * x).sum::<f64>());
        for t in [1, 10, 500, 1000] {
            let a = s.alpha_bar(t).unwrap();
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = Tensor::from_fn(&[4, 3], |i| (xt.data()[i] - libm::sqrt(1.0 - a) * eps.data()[i]) / libm::sqrt(a));
            assert!(back.max_abs_diff(&x0) < 1e-10);
            assert!(norm(&xt) <= libm::sqrt(a) * norm(&x0) + libm::sqrt(1.0 - a) * norm(&eps) + 1e-12);
        }
    }

    #[test]
    fn loss_of_oracle_and_zero_predictors() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let x0 = Tensor::full(&[2, 2, 2, 3], 0.1);
        let shape = x0.shape().to_vec();
        for seed in 0..5u64 {
            let draw = draw_noise(&s, &shape, seed);
            let oracle = fixed(move |_: &Tensor, _| draw.eps.clone());
            assert_eq!(training_loss(&s, &x0, "", &oracle, seed).unwrap(), 0.0);
        }
        let zero = fixed(|x: &Tensor, _| Tensor::zeros(x.shape()));
        let a = training_loss(&s, &x0, "", &zero, 9).unwrap();
        assert_eq!(a, training_loss(&s, &x0, "", &zero, 9).unwrap());

        // Averaged over many seeds the zero predictor scores the variance of
        // a standard normal: mean of chi-square(1)/1 with sd sqrt(2/n).
        let seeds = 400;
        let per_clip = 24.0;
        let mean: f64 = (0..seeds).map(|sd| training_loss(&s, &x0, "", &zero, sd).unwrap()).sum::<f64>() / seeds as f64;
        let sd = libm::sqrt(2.0 / (seeds as f64 * per_clip));
        assert!((mean - 1.0).abs() < 3.0 * sd, "{mean}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let s = make_schedule(100, ScheduleKind::Linear).unwrap();
        let nan = fixed(|x: &Tensor, _| Tensor::full(x.shape(), f64::NAN));
        let err = training_loss(&s, &Tensor::zeros(&[3]), "", &nan, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(msg) if msg.contains("t=")));
        assert!(matches!(
            ddim_sample(&nan, "", &s, &[3], 0),
            Err(Error::Numeric(msg)) if msg.contains("step 1")
        ));
    }

    #[test]
    fn single_step_oracle_recovers_clean_clip() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap().with_sampling_steps(1).unwrap();
        let x0 = normal_tensor(&mut seeded(4), &[2, 3, 3, 3]).map(|v| 0.4 * libm::tanh(v));
        let a = s.alpha_bar(1000).unwrap();
        let target = x0.clone();
        let oracle = fixed(move |xt: &Tensor, _| {
            Tensor::from_fn(xt.shape(), |i| (xt.data()[i] - libm::sqrt(a) * target.data()[i]) / libm::sqrt(1.0 - a))
        });
        let out = ddim_sample(&oracle, "", &s, x0.shape(), 77).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-10);
    }

    #[test]
    fn clean_estimate_is_clipped_each_step() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap().with_sampling_steps(2).unwrap();
        let (t1, t0) = (s.sampling_steps()[1], s.sampling_steps()[0]);
        let (a1, a0) = (s.alpha_bar(t1).unwrap(), s.alpha_bar(t0).unwrap());
        let k = 0.99;
        let net = fixed(move |x: &Tensor, _| x.map(|v| k * v));
        let out = ddim_sample(&net, "", &s, &[64], 21).unwrap();
        let step = |x: f64, a: f64, an: f64, clip: bool| {
            let (sa, sb) = (libm::sqrt(a), libm::sqrt(1.0 - a));
            let x0 = (x - sb * k * x) / sa;
            let c = if clip { x0.clamp(-1.0, 1.0) } else { x0 };
            libm::sqrt(an) * c + libm::sqrt(1.0 - an) * (x - sa * c) / sb
        };
        let xt = normal_tensor(&mut seeded(21), &[64]);
        let mut clipping_mattered = false;
        for (&x, &o) in xt.data().iter().zip(out.data()) {
            let want = step(step(x, a1, a0, true), a0, 1.0, true).clamp(-1.0, 1.0);
            assert!((o - want).abs() < 1e-12, "{o} vs {want}");
            let plain = step(step(x, a1, a0, false), a0, 1.0, false).clamp(-1.0, 1.0);
            clipping_mattered |= (plain - want).abs() > 1e-3;
        }
        assert!(clipping_mattered);
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let net = fixed(|x: &Tensor, t| x.map(|v| v * (t as f64 / 2000.0)));
        let a = ddim_sample(&net, "", &s, &[2, 4, 4, 3], 5).unwrap();
        let b = ddim_sample(&net, "", &s, &[2, 4, 4, 3], 5).unwrap();
        assert_eq!(a.to_vsdt_bytes(), b.to_vsdt_bytes());
        let c = ddim_sample(&net, "", &s, &[2, 4, 4, 3], 6).unwrap();
        assert_ne!(a, c);
    }

    /// Exact optimal noise prediction for one-dimensional `N(mu, sd^2)` data.
    fn gaussian_eps(x: f64, a: f64, mu: f64, sd: f64) -> f64 {
        libm::sqrt(1.0 - a) * (x - libm::sqrt(a) * mu) / (a * sd * sd + 1.0 - a)
    }

    /// Mean and variance of the sampler output from an affine propagation of
    /// `x_T ~ N(0, 1)` through every deterministic step.
    fn affine_oracle(s: &NoiseSchedule, mu: f64, sd: f64) -> (f64, f64) {
        let steps = s.sampling_steps();
        let (mut gain, mut offset) = (1.0, 0.0);
        for (i, &t) in steps.iter().enumerate().rev() {
            let a = s.alpha_bar(t).unwrap();
            let an = if i == 0 { 1.0 } else { s.alpha_bar(steps[i - 1]).unwrap() };
            let c = libm::sqrt(1.0 - a) / (a * sd * sd + 1.0 - a);
            // eps = c x - c sqrt(a) mu;  x' = sqrt(an) (x - sqrt(1-a) eps)/sqrt(a) + sqrt(1-an) eps
            let ke = libm::sqrt(1.0 - an) - libm::sqrt(an) * libm::sqrt(1.0 - a) / libm::sqrt(a);
            let kx = libm::sqrt(an) / libm::sqrt(a) + ke * c;
            let k0 = -ke * c * libm::sqrt(a) * mu;
            gain *= kx;
            offset = kx * offset + k0;
        }
        (offset, gain * gain)
    }

    fn sample_moments(s: &NoiseSchedule, mu: f64, sd: f64, n: u64) -> (f64, f64) {
        let mut xs = Vec::new();
        for seed in 0..n {
            let sched = s.clone();
            let net = fixed(move |x: &Tensor, t| {
                let a = sched.alpha_bar(t).unwrap();
                x.map(|v| gaussian_eps(v, a, mu, sd))
            });
            xs.push(ddim_sample(&net, "", s, &[1], seed).unwrap().data()[0]);
        }
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        (m, v)
    }

    #[test]
    fn gaussian_target_moments() {
        let (mu, sd) = (0.3, 0.2);
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let (m, v) = sample_moments(&s, mu, sd, 1000);
        assert!((m - mu).abs() < 0.05 * mu, "mean {m}");
        let (om, ov) = affine_oracle(&s, mu, sd);
        assert!((m - om).abs() < 0.05 * mu);
        assert!((v - ov).abs() < 0.1 * ov, "variance {v} vs oracle {ov}");

        let fine = s.with_sampling_steps(1000).unwrap();
        let (om, ov) = affine_oracle(&fine, mu, sd);
        assert!((om - mu).abs() < 0.05 * mu && (ov - sd * sd).abs() < 0.05 * sd * sd, "{om} {ov}");
        let (m, v) = sample_moments(&fine, mu, sd, 300);
        assert!((m - mu).abs() < 0.05 * mu, "fine mean {m}");
        assert!((v - sd * sd).abs() < 0.2 * sd * sd, "fine variance {v}");
    }
}
