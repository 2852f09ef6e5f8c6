use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::gradcheck::grad_check;
use crate::random::uniform_tensor;
use crate::synth::gen_dataset;

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FeatureStats {
    FeatureStats { mean, cov, count: 10 }
}

#[test]
fn frechet_closed_forms() {
    let a = stats(vec![0.0], vec![1.0]);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    let b = stats(vec![1.0], vec![1.0]);
    assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    let a = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
    let b = stats(vec![1.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]);
    assert!((frechet_distance(&a, &b).unwrap() - 3.0).abs() < 1e-6);
    assert!(frechet_distance(&a, &stats(vec![0.0], vec![1.0])).is_err());
    assert!(frechet_distance(&a, &stats(vec![0.0, f64::NAN], vec![1.0, 0.0, 0.0, 1.0])).is_err());
}

#[test]
fn unbiased_covariance() {
    let s = FeatureStats::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
    assert_eq!(s.mean, vec![2.0, 4.0]);
    assert_eq!(s.cov, vec![2.0, 4.0, 4.0, 8.0]);
    assert!(FeatureStats::from_rows(&[vec![1.0]]).is_err());
}

fn random_rows(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| uniform_tensor(&mut rng, &[d], -1.0, 1.0).data().iter().map(|x| x + shift).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frechet_is_symmetric_and_non_negative(seed in 0u64..1000, d in 1usize..6, n in 2usize..12, shift in -2.0f64..2.0) {
        let a = FeatureStats::from_rows(&random_rows(seed, n, d, 0.0)).unwrap();
        let b = FeatureStats::from_rows(&random_rows(seed + 1, n + 3, d, shift)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn discreteness_ignores_brightness_shift(seed in 0u64..1000, shift in -0.3f64..0.3) {
        let base = uniform_tensor(&mut seeded(seed), &[4, 4, 4, 3], 0.3, 0.7);
        let a = Clip::new(base.clone()).unwrap();
        let b = Clip::new(base.map(|x| x + shift)).unwrap();
        prop_assert!((discreteness(&a) - discreteness(&b)).abs() < 1e-12);
    }
}

#[test]
fn cosine_cases() {
    assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    assert_eq!(rank_of(&[0.1, 0.9, 0.5, 0.9], 2), 3);
    assert!(similarity_from_embeddings(&[1.0], &[], 0).is_err());
}

#[test]
fn discreteness_cases() {
    let still = Clip::new(Tensor::full(&[4, 2, 2, 3], 0.4)).unwrap();
    assert_eq!(discreteness(&still), 0.0);
    let flicker = Clip::new(Tensor::from_fn(&[6, 2, 2, 3], |i| ((i / 12) % 2) as f64)).unwrap();
    assert_eq!(discreteness(&flicker), 1.0);
    let single = Clip::new(Tensor::full(&[1, 2, 2, 3], 0.4)).unwrap();
    assert_eq!(discreteness(&single), 0.0);
}

#[test]
fn moving_clip_is_more_discrete_than_padded_still() {
    for item in gen_dataset(10, 2).unwrap() {
        let still = crate::curation::flip_pad(&[item.clip.frame(0).to_vec()], FRAMES).unwrap();
        let still = Clip::from_frames(&still, SIZE, SIZE, CHANNELS).unwrap();
        assert!(discreteness(&item.clip) > discreteness(&still));
    }
}

fn tiny() -> DualConfig {
    DualConfig {
        hidden: 3,
        features: 4,
        embed_dim: 4,
        text_dim: 4,
        vocab: 16,
        frames: 2,
        height: 4,
        width: 4,
        ..DualConfig::default()
    }
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let enc = DualEncoder::new(tiny(), 3).unwrap();
    let mut rng = seeded(4);
    let clips: Vec<Tensor> = (0..3).map(|_| uniform_tensor(&mut rng, &[2, 4, 4, 3], -1.0, 1.0)).collect();
    let captions = ["real\ta", "cartoon\tb c", "real\td"];
    for name in ["dual.video.c2.w", "dual.text.embed", "dual.text.proj.w"] {
        let x = enc.params.get(name).unwrap().clone();
        let err = grad_check(
            |tape, x| {
                let mut p = enc.params.bind_frozen(tape);
                p.replace(name, x)?;
                enc.contrastive_loss(tape, &p, &clips, &captions)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }
}

fn small_corpus(n: usize, seed: u64) -> Vec<(Clip, String)> {
    gen_dataset(n, seed).unwrap().into_iter().map(|i| (i.clip, i.caption)).collect()
}

#[test]
fn fvd_population_properties() {
    let enc = DualEncoder::new(DualConfig::default(), 5).unwrap();
    let data: Vec<Clip> = small_corpus(80, 6).into_iter().map(|(c, _)| c).collect();
    assert!(fvd(&enc, &data, &data).unwrap() < 1e-6);
    let mut rev = data.clone();
    rev.reverse();
    let other: Vec<Clip> = small_corpus(70, 7).into_iter().map(|(c, _)| c).collect();
    let base = fvd(&enc, &data, &other).unwrap();
    assert!((fvd(&enc, &rev, &other).unwrap() - base).abs() < 1e-9 * (1.0 + base));
    let doubled: Vec<Clip> = other.iter().chain(other.iter()).cloned().collect();
    // duplication keeps the mean; the unbiased covariance scales by 2(n-1)/(2n-1)
    let n = other.len() as f64;
    let mut scaled = population_stats(&enc, &other).unwrap();
    scaled.cov.iter_mut().for_each(|c| *c *= 2.0 * (n - 1.0) / (2.0 * n - 1.0));
    let expected = frechet_distance(&population_stats(&enc, &data).unwrap(), &scaled).unwrap();
    let dup = fvd(&enc, &data, &doubled).unwrap();
    assert!((dup - expected).abs() < 1e-7 * (1.0 + expected), "{dup} vs {expected}");
    assert!(fvd(&enc, &data[..1], &other).is_err());
}

#[test]
fn evaluation_report_fields() {
    let enc = DualEncoder::new(DualConfig::default(), 8).unwrap();
    let data = small_corpus(6, 9);
    let real: Vec<Clip> = data.iter().map(|(c, _)| c.clone()).collect();
    let candidates: Vec<String> = data.iter().map(|(_, t)| t.clone()).collect();
    let report = evaluate(&enc, &real, &data, &candidates).unwrap();
    assert_eq!((report.n_real, report.n_gen), (6, 6));
    assert!(report.fvd < 1e-6);
    assert!(report.clip_rank_median >= 1.0);
    assert!(report.note.contains("toy video tower"));
    let json = serde_json::to_value(&report).unwrap();
    for key in ["fvd", "clip_sim_mean", "clip_rank_median", "discreteness_mean", "n_real", "n_gen"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let missing = vec![(real[0].clone(), "real\tnot a candidate".to_string())];
    assert!(evaluate(&enc, &real, &missing, &candidates).is_err());
}

#[test]
fn contrastive_training_reduces_loss() {
    let mut enc = DualEncoder::new(DualConfig::default(), 10).unwrap();
    let data = small_corpus(16, 11);
    let opts = DualFitOptions { steps: 40, batch_size: 8, ..DualFitOptions::default() };
    let losses = fit_dual(&mut enc, &data, &opts).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn median_cases() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}
