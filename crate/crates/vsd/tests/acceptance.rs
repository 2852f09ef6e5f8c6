//! Acceptance suite. Every test prints one `criterion N [PASS|FAIL]` line
//! and then asserts. Tests hold a shared lock so timed criteria are not
//! measured against each other on a single core.

use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use vsd_core::autodiff::Tape;
use vsd_core::clip::Clip;
use vsd_core::curation::{
    aspect_filter, entropy_bits, entropy_filter, flip_pad, manifest_stats, ocr_length_filter, split_dataset, Domain,
    ManifestRecord, Split,
};
use vsd_core::denoiser::{fit, validation_loss, Denoiser, DenoiserConfig, FitOptions, TemporalKind, TrainItem};
use vsd_core::diffusion::{ddim_sample, make_schedule, q_sample, NoisePredictor, NoiseSchedule, ScheduleKind};
use vsd_core::gradcheck::{gradient_suite, randomize_zeros, SUITE_TOLERANCE};
use vsd_core::metrics::{
    fit_dual, frechet_distance, fvd, median, similarity_from_embeddings, DualConfig, DualEncoder, DualFitOptions,
    FeatureStats,
};
use vsd_core::nn::{Bound, ParamStore};
use vsd_core::random::{derive_seed, normal_tensor, seeded};
use vsd_core::sti::{StiConfig, StiLayer};
use vsd_core::synth::gen_dataset;
use vsd_core::vq::{fit_vq, prior_loss, TokenGrid, TokenPredictor, VqConfig, VqFitOptions, VqTokenizer};
use vsd_core::{Result as CoreResult, Tensor, Var};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, checks: &[(&str, bool)], detail: &str) {
    let pass = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    println!(
        "criterion {n} [{}] {name}: {detail}{}",
        if pass { "PASS" } else { "FAIL" },
        if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
    );
    assert!(pass, "criterion {n} failed: {failed:?}");
}

// ---------------------------------------------------------------- 1

const GRADIENT_BUDGET: Duration = Duration::from_secs(5 * 60);

#[test]
fn criterion_1_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let results = gradient_suite(7).unwrap();
    let elapsed = start.elapsed();
    for r in &results {
        println!("  {:<28} max rel err {:.3e} over {} coordinates", r.name, r.max_rel_error, r.coordinates);
    }
    let groups = ["attention", "temporal_conv", "sti", "denoiser", "vq_prior"];
    let covered = groups.iter().all(|g| results.iter().any(|r| r.name.starts_with(g)));
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    verdict(
        1,
        "gradient suite",
        &[
            ("all below tolerance", results.iter().all(|r| r.max_rel_error < SUITE_TOLERANCE)),
            ("every operation covered", covered),
            ("runtime", elapsed < GRADIENT_BUDGET),
        ],
        &format!("{} checks, worst {worst:.2e} < {SUITE_TOLERANCE:e}, {elapsed:.1?}", results.len()),
    );
}

// ---------------------------------------------------------------- 2

struct Oracle<F>(ParamStore, F);

impl<F: Fn(&Tensor, usize) -> Tensor> NoisePredictor for Oracle<F> {
    fn params(&self) -> &ParamStore {
        &self.0
    }

    fn predict<'t>(&self, _: &Bound<'t>, x_t: Var<'t>, t: usize, _: &str) -> CoreResult<Var<'t>> {
        Ok(x_t.tape().constant((self.1)(&x_t.value(), t)))
    }
}

const RECONSTRUCTION_TOL: f64 = 1e-10;

#[test]
fn criterion_2_diffusion_algebra() {
    let _g = serial();
    let mut rng = seeded(21);
    let x0 = normal_tensor(&mut rng, &[8, 4, 4, 3]).map(|v| 0.5 * v.tanh());
    let eps = normal_tensor(&mut rng, &[8, 4, 4, 3]);
    let endpoints = q_sample(&x0, 1.0, &eps).unwrap() == x0 && q_sample(&x0, 0.0, &eps).unwrap() == eps;

    let one_step = make_schedule(1000, ScheduleKind::Linear).unwrap().with_sampling_steps(1).unwrap();
    let a = one_step.alpha_bar(1000).unwrap();
    let target = x0.clone();
    let oracle = Oracle(ParamStore::new(), move |xt: &Tensor, _| {
        Tensor::from_fn(xt.shape(), |i| (xt.data()[i] - a.sqrt() * target.data()[i]) / (1.0 - a).sqrt())
    });
    let recon = ddim_sample(&oracle, "", &one_step, x0.shape(), 3).unwrap().max_abs_diff(&x0);

    let schedule = make_schedule(1000, ScheduleKind::Linear).unwrap();
    let cfg = DenoiserConfig {
        base_channels: 4,
        depth: 1,
        text_dim: 4,
        vocab: 32,
        time_dim: 4,
        frames: 4,
        height: 8,
        width: 8,
        ..DenoiserConfig::default()
    };
    let mut net = Denoiser::new(cfg, 5).unwrap();
    randomize_zeros(net.params_mut(), 6);
    let run = |seed| ddim_sample(&net, "cartoon\ta red star", &schedule, &cfg.clip_shape(), seed).unwrap();
    let (first, second, other) = (run(11), run(11), run(12));
    let identical = first.to_vsdt_bytes() == second.to_vsdt_bytes();
    verdict(
        2,
        "diffusion algebra",
        &[
            ("q_sample endpoints exact", endpoints),
            ("single-step oracle reconstruction", recon < RECONSTRUCTION_TOL),
            ("DDIM-25 bit-identical per seed", identical),
            ("seeds differ", first != other),
        ],
        &format!(
            "endpoints exact: {endpoints}, reconstruction error {recon:.1e}, {} steps, rerun identical: {identical}",
            schedule.sampling_steps().len()
        ),
    );
}

// ---------------------------------------------------------------- 3

fn sti_layer(d: usize, gamma: usize, k: usize, seed: u64) -> (ParamStore, StiLayer) {
    let mut store = ParamStore::new();
    let l = StiLayer::init(&mut store, "sti.0", StiConfig { channels: d, gamma, k }, &mut seeded(seed)).unwrap();
    (store, l)
}

fn frame_zero_moves(kind: TemporalKind) -> bool {
    let cfg = DenoiserConfig {
        base_channels: 4,
        depth: 1,
        temporal: kind,
        text_dim: 4,
        vocab: 32,
        time_dim: 4,
        frames: 4,
        height: 8,
        width: 8,
        ..DenoiserConfig::default()
    };
    let mut net = Denoiser::new(cfg, 31).unwrap();
    randomize_zeros(net.params_mut(), 32);
    let a = normal_tensor(&mut seeded(33), &[4, 8, 8, 3]);
    let plane = 8 * 8 * 3;
    let b = Tensor::from_fn(a.shape(), |i| if i / plane == 2 { a.data()[i] + 1.0 } else { a.data()[i] });
    let out = |x: &Tensor| {
        let tape = Tape::new();
        let p = net.params().bind_frozen(&tape);
        net.denoise(&p, tape.constant(x.clone()), 400, "real\ta blue circle").unwrap().value()
    };
    out(&a).data()[..plane] != out(&b).data()[..plane]
}

#[test]
fn criterion_3_sti_mechanism() {
    let _g = serial();
    let mut shapes_ok = true;
    for (gamma, k) in [(1, 1), (1, 3), (2, 3), (2, 5), (4, 3), (8, 7)] {
        let (mut store, l) = sti_layer(3, gamma, k, gamma as u64 * 10 + k as u64);
        randomize_zeros(&mut store, 1);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let h = tape.constant(normal_tensor(&mut seeded(2), &[8, 16, 16, 3]));
        let out = l.forward(&p, h).unwrap();
        shapes_ok &= out.features.shape() == [8, 16, 16, 3];
    }

    let entries: Vec<usize> = [1, 2, 4, 8]
        .iter()
        .map(|&g| {
            let (store, l) = sti_layer(2, g, 3, 3);
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            l.semantic_interaction(&p, tape.constant(Tensor::zeros(&[8, 32, 32, 2]))).unwrap().1
        })
        .collect();
    let sixteen = entries.windows(2).all(|w| w[0] == 16 * w[1]);

    let (sti_dep, none_dep) = (frame_zero_moves(TemporalKind::Sti), frame_zero_moves(TemporalKind::None));

    let (store, l) = sti_layer(5, 2, 3, 4);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let h = normal_tensor(&mut seeded(5), &[8, 8, 8, 5]);
    let identity = l.forward(&p, tape.constant(h.clone())).unwrap().features.value() == h;

    verdict(
        3,
        "STI mechanism",
        &[
            ("shape preservation", shapes_ok),
            ("16x fewer entries per gamma doubling", sixteen),
            ("sti output depends on other frames", sti_dep),
            ("none output independent of other frames", !none_dep),
            ("identity at initialization", identity),
        ],
        &format!("attention entries for gamma 1/2/4/8: {entries:?}, cross-frame sti {sti_dep} none {none_dep}, identity {identity}"),
    );
}

// ---------------------------------------------------------------- 4

const ABLATION_CLIPS: usize = 2000;
const ABLATION_VAL: usize = 200;
const ABLATION_STEPS: usize = 1200;
const ABLATION_BATCH: usize = 4;
const ABLATION_DRAWS: usize = 4;
const ABLATION_SAMPLES: usize = 48;
const FVD_RATIO: f64 = 5.0;

fn ablation_config(temporal: TemporalKind) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        gamma: 4,
        temporal,
        ..DenoiserConfig::default()
    }
}

/// Trains one temporal kind. Every kind sees the same initial shared
/// weights, batch order and noise draws.
fn train_ablation(kind: TemporalKind, schedule: &NoiseSchedule, data: &[TrainItem]) -> Denoiser {
    let mut net = Denoiser::new(ablation_config(kind), 1).unwrap();
    let opts = FitOptions { steps: ABLATION_STEPS, batch_size: ABLATION_BATCH, seed: 3, ..FitOptions::default() };
    fit(&mut net, schedule, data, &opts).unwrap();
    net
}

#[test]
fn criterion_4_ablation_ranking() {
    let _g = serial();
    let start = Instant::now();
    let items = gen_dataset(ABLATION_CLIPS, 7).unwrap();
    let (train_items, val_items) = items.split_at(ABLATION_CLIPS - ABLATION_VAL);
    let to_train = |v: &[vsd_core::synth::SynthItem]| -> Vec<TrainItem> {
        v.iter()
            .map(|i| TrainItem {
                clip: i.clip.to_model_space(),
                caption: i.caption.clone(),
            })
            .collect()
    };
    let (train, val) = (to_train(train_items), to_train(val_items));
    let schedule = make_schedule(1000, ScheduleKind::Linear).unwrap();

    let mut rows = Vec::new();
    let mut sti_net = None;
    for kind in [TemporalKind::Sti, TemporalKind::Conv1d, TemporalKind::None] {
        let t0 = Instant::now();
        let net = train_ablation(kind, &schedule, &train);
        let mse = validation_loss(&net, &schedule, &val, ABLATION_DRAWS, 99).unwrap();
        rows.push((kind, net.num_parameters(), mse, t0.elapsed()));
        if kind == TemporalKind::Sti {
            sti_net = Some(net);
        }
    }
    let sti_net = sti_net.unwrap();

    let pairs: Vec<(Clip, String)> = train_items.iter().map(|i| (i.clip.clone(), i.caption.clone())).collect();
    let mut enc = DualEncoder::new(DualConfig::default(), 7).unwrap();
    fit_dual(&mut enc, &pairs, &DualFitOptions { seed: 8, ..DualFitOptions::default() }).unwrap();
    let real: Vec<Clip> = val_items.iter().map(|i| i.clip.clone()).collect();
    let shape = sti_net.config().clip_shape();
    let samples: Vec<Clip> = (0..ABLATION_SAMPLES)
        .map(|i| {
            let x = ddim_sample(&sti_net, &val_items[i].caption, &schedule, &shape, derive_seed(9, i as u64)).unwrap();
            Clip::from_model_space(&x).unwrap()
        })
        .collect();
    let noise: Vec<Clip> = (0..ABLATION_SAMPLES)
        .map(|i| Clip::from_model_space(&normal_tensor(&mut seeded(derive_seed(10, i as u64)), &shape)).unwrap())
        .collect();
    let fvd_sti = fvd(&enc, &real, &samples).unwrap();
    let fvd_noise = fvd(&enc, &real, &noise).unwrap();

    println!("  {:<8} {:>10} {:>14} {:>10}", "temporal", "params", "val eps-MSE", "train");
    for (kind, params, mse, took) in &rows {
        println!("  {:<8} {params:>10} {mse:>14.6} {:>9.0}s", kind.to_string(), took.as_secs_f64());
    }
    println!("  FVD(real, sti samples) = {fvd_sti:.4}   FVD(real, noise) = {fvd_noise:.4}");
    let (sti, conv, none) = (rows[0].2, rows[1].2, rows[2].2);
    verdict(
        4,
        "ablation ranking",
        &[
            ("sti <= conv1d", sti <= conv),
            ("conv1d <= none", conv <= none),
            ("sti <= none", sti <= none),
            ("FVD(real, sti) x5 < FVD(real, noise)", fvd_sti * FVD_RATIO < fvd_noise),
        ],
        &format!(
            "val eps-MSE sti {sti:.5} conv1d {conv:.5} none {none:.5}; FVD ratio {:.1}; {:.0?}",
            fvd_noise / fvd_sti,
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- 5

const FRECHET_TOL: f64 = 1e-6;
const MAX_MEDIAN_RANK: f64 = 5.0;

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FeatureStats {
    FeatureStats { mean, cov, count: 10 }
}

#[test]
fn criterion_5_metrics_kernel() {
    let _g = serial();
    let a = stats(vec![0.3, -1.0], vec![2.0, 0.5, 0.5, 1.0]);
    let zero = frechet_distance(&a, &a).unwrap();
    let uni = frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![1.0])).unwrap();
    let two_d = frechet_distance(
        &stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
        &stats(vec![1.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]),
    )
    .unwrap();
    let analytic = zero.abs() < FRECHET_TOL && (uni - 1.0).abs() < FRECHET_TOL && (two_d - 3.0).abs() < FRECHET_TOL;

    let all = gen_dataset(600, 42).unwrap();
    let (train_items, test_items) = all.split_at(500);
    let train: Vec<(Clip, String)> = train_items.iter().map(|i| (i.clip.clone(), i.caption.clone())).collect();
    let mut enc = DualEncoder::new(DualConfig::default(), 1).unwrap();
    fit_dual(&mut enc, &train, &DualFitOptions::default()).unwrap();

    let set: Vec<Clip> = train_items[..150].iter().map(|i| i.clip.clone()).collect();
    let mut shuffled = set.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let other: Vec<Clip> = train_items[150..300].iter().map(|i| i.clip.clone()).collect();
    let self_fvd = fvd(&enc, &set, &set).unwrap();
    let base = fvd(&enc, &set, &other).unwrap();
    let permuted = fvd(&enc, &shuffled, &other).unwrap();
    let swapped = fvd(&enc, &other, &set).unwrap();
    let fvd_ok = self_fvd.abs() < FRECHET_TOL && (base - permuted).abs() < FRECHET_TOL * base.max(1.0) && (base - swapped).abs() < FRECHET_TOL * base.max(1.0);

    let mut candidates: Vec<String> = test_items.iter().map(|i| i.caption.clone()).collect();
    candidates.extend(train_items.iter().take(400).map(|i| i.caption.clone()));
    let texts: Vec<Vec<f64>> = candidates.iter().map(|c| enc.embed_text(c).unwrap()).collect();
    let ranks: Vec<f64> = test_items
        .iter()
        .enumerate()
        .map(|(i, it)| similarity_from_embeddings(&enc.embed_clip(&it.clip).unwrap(), &texts, i).unwrap().rank as f64)
        .collect();
    let med = median(&ranks);
    verdict(
        5,
        "metrics kernel",
        &[
            ("Frechet analytic cases", analytic),
            ("fvd zero on itself, order invariant, symmetric", fvd_ok),
            ("median true-caption rank", med <= MAX_MEDIAN_RANK),
        ],
        &format!(
            "frechet {zero:.1e}/{uni:.9}/{two_d:.9}; fvd self {self_fvd:.1e}, fvd {base:.4} permuted diff {:.1e} swapped diff {:.1e}; median rank {med} of {} candidates over {} clips",
            (base - permuted).abs(),
            (base - swapped).abs(),
            candidates.len(),
            ranks.len()
        ),
    );
}

// ---------------------------------------------------------------- 6

fn record(id: usize, domain: Domain, words: &[&str], frames: usize, caption: &str) -> ManifestRecord {
    ManifestRecord {
        id: format!("r{id:04}"),
        path: format!("media/r{id:04}.gif"),
        frame_count: frames,
        width: 64,
        height: 64,
        domain,
        caption: caption.to_string(),
        trigger_words: words.iter().map(|w| w.to_string()).collect(),
        ocr_text: Some(String::new()),
        split: Split::Unassigned,
    }
}

fn synthetic_manifest(n: usize) -> Vec<ManifestRecord> {
    let words = ["bear", "cat", "dog", "hello", "love", "wow", "ok", "sad", "happy", "party", "cry", "run"];
    (0..n)
        .map(|i| {
            let h = derive_seed(61, i as u64) as usize;
            let domain = if h.is_multiple_of(2) { Domain::Cartoon } else { Domain::Real };
            let a = words[(h >> 8) % words.len()];
            let b = words[(h >> 16) % (words.len() / 2)];
            record(i, domain, &[a, b], 1 + (h >> 24) % 19, "a sticker")
        })
        .collect()
}

#[test]
fn criterion_6_curation() {
    let _g = serial();
    let constant = entropy_filter(&[77u8; 64], 3.0);
    let half: Vec<u8> = (0..64).map(|i| if i % 2 == 0 { 0 } else { 255 }).collect();
    let uniform: Vec<u8> = (0..=255u8).collect();
    let entropy_ok = constant.score == 0.0
        && !constant.keep
        && (entropy_bits(&half) - 1.0).abs() < 1e-12
        && (entropy_bits(&uniform) - 8.0).abs() < 1e-12
        && entropy_filter(&uniform, 3.0).keep;
    let aspect_ok = aspect_filter(256, 256, 2.0).keep && !aspect_filter(1000, 100, 2.0).keep && aspect_filter(512, 256, 2.0).keep;
    let mut r = record(0, Domain::Real, &[], 1, "x");
    let mut ocr = |text: Option<&str>| {
        r.ocr_text = text.map(str::to_string);
        ocr_length_filter(&r, 30).keep()
    };
    let ocr_ok = ocr(Some("")) && !ocr(Some(&"a".repeat(31))) && ocr(Some(&"a".repeat(30))) && ocr(None);

    let expected: [(usize, Vec<usize>); 5] = [
        (1, vec![1; 8]),
        (2, vec![1, 2, 1, 2, 1, 2, 1, 2]),
        (5, vec![1, 2, 3, 4, 5, 4, 3, 2]),
        (8, (1..=8).collect()),
        (12, (1..=8).collect()),
    ];
    let flip_ok = expected.iter().all(|(n, want)| flip_pad(&(1..=*n).collect::<Vec<_>>(), 8).unwrap() == *want);

    let manifest = synthetic_manifest(1000);
    let first = split_dataset(&manifest, 5);
    let again = split_dataset(&manifest, 5);
    let train_ids: std::collections::BTreeSet<&str> =
        first.records.iter().filter(|r| r.split == Split::Train).map(|r| r.id.as_str()).collect();
    let test: Vec<&ManifestRecord> = first.records.iter().filter(|r| matches!(r.split, Split::TestR | Split::TestC)).collect();
    let disjoint = test.iter().all(|r| !train_ids.contains(r.id.as_str())) && train_ids.len() + test.len() == 1000;
    let domains_ok = test.iter().all(|r| r.split == r.domain.test_split());
    let split_ok = first == again && disjoint && domains_ok && test.len() == 10;

    let s = manifest_stats(&[
        record(0, Domain::Cartoon, &[], 1, "a b"),
        record(1, Domain::Real, &[], 4, "a b c d"),
        record(2, Domain::Cartoon, &[], 10, "a b c"),
    ]);
    let stats_ok = s.multi_frame_ratio == 2.0 / 3.0
        && s.avg_frames_multi == 7.0
        && s.cartoon_ratio == 2.0 / 3.0
        && s.avg_description_length == 3.0
        && manifest_stats(&[record(0, Domain::Cartoon, &[], 2, "x")]).cartoon_ratio == 1.0;
    verdict(
        6,
        "curation",
        &[
            ("entropy boundaries", entropy_ok),
            ("aspect boundaries", aspect_ok),
            ("ocr boundaries", ocr_ok),
            ("flip_pad sequences", flip_ok),
            ("split determinism and disjointness", split_ok),
            ("manifest_stats ratios", stats_ok),
        ],
        &format!("{} test records from 1000, stats {:?}", test.len(), (s.multi_frame_ratio, s.avg_frames_multi, s.avg_description_length)),
    );
}

// ---------------------------------------------------------------- 7

const PRIOR_TOL: f64 = 1e-9;
const ROUND_TRIP_JITTER: f64 = 0.05;

struct Table(ParamStore, Tensor);

impl TokenPredictor for Table {
    fn params(&self) -> &ParamStore {
        &self.0
    }

    fn log_probs<'t>(&self, p: &Bound<'t>, _: &TokenGrid, _: &str) -> CoreResult<Var<'t>> {
        Ok(p.get("anchor")?.tape().constant(self.1.clone()))
    }
}

fn table(logp: Tensor) -> Table {
    let mut params = ParamStore::new();
    params.insert("anchor", Tensor::scalar(0.0));
    Table(params, logp)
}

#[test]
fn criterion_7_masked_token_baseline() {
    let _g = serial();
    let k = 6;
    let z = TokenGrid::new([1, 2, 4], k, vec![0, 5, 2, 3, 1, 4, 4, 0]).unwrap();
    let z_bar = TokenGrid::new([1, 2, 4], k, vec![k, 5, k, k, 1, k, 4, k]).unwrap();
    let perfect = table(Tensor::from_fn(&[8, k], |i| if z.codes()[i / k] == i % k { 0.0 } else { -1e6 }));
    let uniform = table(Tensor::full(&[8, k], -(k as f64).ln()));
    let three_quarters = table(Tensor::from_fn(&[8, k], |i| {
        if z.codes()[i / k] == i % k { 0.75f64.ln() } else { (0.25f64 / (k - 1) as f64).ln() }
    }));
    let l0 = prior_loss(&perfect, &z, &z_bar, "x").unwrap();
    let lk = prior_loss(&uniform, &z, &z_bar, "x").unwrap();
    let l34 = prior_loss(&three_quarters, &z, &z_bar, "x").unwrap();
    // ln 6 and -ln 0.75
    let analytic = l0.abs() < PRIOR_TOL
        && (lk - 1.791_759_469_228_055).abs() < PRIOR_TOL
        && (l34 - 0.287_682_072_451_780_9).abs() < PRIOR_TOL;

    let clips: Vec<Tensor> = gen_dataset(64, 71).unwrap().iter().map(|i| i.clip.to_model_space()).collect();
    let mut tok = VqTokenizer::new(VqConfig::default(), 72).unwrap();
    let opts = VqFitOptions { steps: 300, log_every: 25, seed: 73, ..VqFitOptions::default() };
    let report = fit_vq(&mut tok, &clips, &opts).unwrap();
    let mut best = f64::INFINITY;
    let mut monotone = true;
    for &(_, e) in &report.round_trip {
        monotone &= e <= best * (1.0 + ROUND_TRIP_JITTER);
        best = best.min(e);
    }
    let (first, last) = (report.round_trip[0].1, report.round_trip.last().unwrap().1);
    let log: Vec<String> = report.round_trip.iter().map(|(s, e)| format!("{s}:{e:.4}")).collect();
    println!("  round-trip log {}", log.join(" "));
    verdict(
        7,
        "masked-token baseline",
        &[
            ("prior_loss analytic values", analytic),
            ("round-trip monotone within 5%", monotone),
            ("round-trip improves", last < first),
        ],
        &format!("losses {l0:.1e}/{lk:.12}/{l34:.12}; round-trip {first:.4} -> {last:.4} over {} logs", report.round_trip.len()),
    );
}

// ---------------------------------------------------------------- 8

const SMOKE_BUDGET: Duration = Duration::from_secs(30 * 60);

fn vsd(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vsd"))
        .args(args)
        .env_remove("VSD_SEED")
        .output()
        .expect("vsd binary runs");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.success(), text)
}

/// Every file an artifact list names must exist with the recorded size.
fn artifacts_present(dir: &Path, required: &[&str]) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join("artifacts.json")) else {
        return false;
    };
    let list: serde_json::Value = serde_json::from_str(&text).unwrap();
    let files = list["files"].as_array().unwrap();
    let listed_ok = files.iter().all(|f| {
        std::fs::metadata(dir.join(f["path"].as_str().unwrap())).is_ok_and(|m| Some(m.len()) == f["bytes"].as_u64())
    });
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    listed_ok && required.iter().all(|r| names.contains(r)) && names.contains(&"config.json")
}

#[test]
fn criterion_8_end_to_end_smoke() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name).display().to_string();
    let config = tmp.path().join("smoke.json");
    std::fs::write(&config, r#"{"denoiser.base_channels": 8, "denoiser.gamma": 4}"#).unwrap();
    let config = config.display().to_string();
    let curated = format!("{}/manifest.jsonl", d("curated"));
    let start = Instant::now();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen", vec!["gen".into(), "--n".into(), "200".into(), "--out".into(), d("corpus"), "--seed".into(), "1".into()]),
        ("curate", vec!["curate".into(), "--manifest".into(), format!("{}/manifest.jsonl", d("corpus")), "--out".into(), d("curated")]),
        (
            "train",
            vec![
                "train".into(), "denoiser".into(), "--manifest".into(), curated.clone(), "--out".into(), d("denoiser"),
                "--steps".into(), "300".into(), "--config".into(), config.clone(), "--seed".into(), "2".into(),
            ],
        ),
        (
            "train dual",
            vec!["train".into(), "dual".into(), "--manifest".into(), curated.clone(), "--out".into(), d("dual"), "--seed".into(), "3".into()],
        ),
        (
            "sample",
            vec![
                "sample".into(), "--checkpoint".into(), format!("{}/model.ckpt", d("denoiser")), "--prompts".into(), curated.clone(),
                "--count".into(), "8".into(), "--out".into(), d("samples"), "--seed".into(), "4".into(),
            ],
        ),
        (
            "eval",
            vec![
                "eval".into(), "--encoder".into(), format!("{}/model.ckpt", d("dual")), "--real".into(), curated.clone(),
                "--generated".into(), d("samples"), "--out".into(), d("eval"),
            ],
        ),
    ];
    let mut log = Vec::new();
    let mut all_ok = true;
    for (name, args) in &steps {
        let t0 = Instant::now();
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (ok, output) = vsd(&args);
        log.push(format!("{name} {:.0}s", t0.elapsed().as_secs_f64()));
        if !ok {
            println!("  `{name}` failed:\n{output}");
            all_ok = false;
            break;
        }
    }
    let elapsed = start.elapsed();
    let sample_files: Vec<String> = (0..8)
        .flat_map(|i| [format!("samples/sample_{i:03}.gif"), format!("samples/sample_{i:03}.vsdt")])
        .collect();
    let mut sample_required: Vec<&str> = sample_files.iter().map(String::as_str).collect();
    sample_required.push("samples.jsonl");
    let present = all_ok
        && artifacts_present(&tmp.path().join("corpus"), &["manifest.jsonl", "clips/syn00000.gif", "clips/syn00199.gif"])
        && artifacts_present(&tmp.path().join("curated"), &["manifest.jsonl", "filter_report.json", "stats.json"])
        && artifacts_present(&tmp.path().join("denoiser"), &["model.ckpt", "losses.json"])
        && artifacts_present(&tmp.path().join("dual"), &["model.ckpt", "losses.json"])
        && artifacts_present(&tmp.path().join("samples"), &sample_required)
        && artifacts_present(&tmp.path().join("eval"), &["metrics.json"]);
    let metrics = std::fs::read_to_string(tmp.path().join("eval/metrics.json")).unwrap_or_default();
    let fields_ok = serde_json::from_str::<serde_json::Value>(&metrics).is_ok_and(|m| {
        ["fvd", "clip_sim_mean", "clip_rank_median", "discreteness_mean", "n_real", "n_gen"]
            .iter()
            .all(|k| m.get(k).is_some())
            && m["n_gen"] == 8
    });
    println!("  stages: {}", log.join(", "));
    verdict(
        8,
        "end-to-end smoke",
        &[
            ("every stage exits 0", all_ok),
            ("declared artifacts present", present),
            ("metrics report fields", fields_ok),
            ("under 30 minutes", elapsed < SMOKE_BUDGET),
        ],
        &format!("{:.0}s total", elapsed.as_secs_f64()),
    );
}
