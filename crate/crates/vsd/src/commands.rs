//! The pipeline commands. Each one resolves its settings, writes its outputs
//! through a [`RunDir`] and echoes the resolved configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vsd_core::clip::Clip;
use vsd_core::curation::{apply_filters, manifest_stats, split_dataset, FilterConfig, ManifestRecord};
use vsd_core::denoiser::{fit, Denoiser, DenoiserConfig, FitOptions, TrainItem};
use vsd_core::diffusion::{ddim_sample, make_schedule, NoiseSchedule, ScheduleKind, DDIM_STEPS, DEFAULT_TIMESTEPS};
use vsd_core::gradcheck::{gradient_suite, CheckResult, SUITE_TOLERANCE};
use vsd_core::metrics::{evaluate, fit_dual, DualConfig, DualEncoder, DualFitOptions, MetricReport};
use vsd_core::random::derive_seed;
use vsd_core::synth::gen_dataset;
use vsd_core::vq::{fit_prior, fit_vq, sample_tokens, MaskedPrior, PriorConfig, PriorFitOptions, TokenPredictor, VqConfig, VqFitOptions, VqTokenizer};
use vsd_core::Tensor;

use crate::checkpoint::{partition, Checkpoint};
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::manifest::{is_test, is_train, media_path, read_manifest, to_jsonl, training_caption};
use crate::media::{first_frame_gray, load_clip, write_gif};
use crate::rundir::{Artifact, RunDir, CONFIG_FILE};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSSES_FILE: &str = "losses.json";

/// Settings shared by every command.
pub struct Context {
    pub settings: Settings,
    pub seed: u64,
}

impl Context {
    pub fn new(settings: Settings, seed: Option<u64>) -> Result<Self> {
        let seed = settings.value("seed", seed.unwrap_or(0))?;
        Ok(Self { settings, seed })
    }

    fn record_path(&self, key: &str, p: &Path) -> Result<()> {
        self.settings.value(&format!("paths.{key}"), p.display().to_string())?;
        Ok(())
    }

    fn finish(&self, mut run: RunDir) -> Result<Vec<Artifact>> {
        for k in self.settings.unused() {
            warn!("config key `{k}` is not used by `{}`", run.command());
        }
        let echo = Value::Object(self.settings.resolved());
        run.write_json(CONFIG_FILE, &echo)?;
        run.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionSettings {
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub sampling_steps: usize,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            schedule: ScheduleKind::Linear,
            sampling_steps: DDIM_STEPS,
        }
    }
}

impl DiffusionSettings {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.timesteps, self.schedule)?.with_sampling_steps(self.sampling_steps)?)
    }
}

/// Which records of a manifest a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    /// Test records, or every record when there are none.
    Test,
    All,
}

/// Decodes the selected records; undecodable media are skipped with a warning.
pub fn load_records(manifest: &Path, subset: Subset, frames: usize, size: usize) -> Result<Vec<(ManifestRecord, Clip)>> {
    let records = read_manifest(manifest)?;
    let mut chosen: Vec<&ManifestRecord> = match subset {
        Subset::Train => records.iter().filter(|r| is_train(r)).collect(),
        Subset::Test => records.iter().filter(|r| is_test(r)).collect(),
        Subset::All => records.iter().collect(),
    };
    if subset == Subset::Test && chosen.is_empty() {
        warn!("{}: no test records, using the whole manifest", manifest.display());
        chosen = records.iter().collect();
    }
    let mut out = Vec::with_capacity(chosen.len());
    for r in chosen {
        match load_clip(&media_path(manifest, r), frames, size as u32) {
            Ok(c) => out.push((r.clone(), c)),
            Err(e) => warn!("skipping {}: {e}", r.id),
        }
    }
    if out.is_empty() {
        return Err(Error::Manifest(format!("{}: no decodable records selected", manifest.display())));
    }
    Ok(out)
}

/// Writes `count` synthetic clips as GIFs plus their manifest.
pub fn gen(ctx: &Context, count: Option<usize>, out: &Path) -> Result<Vec<Artifact>> {
    let n = ctx.settings.value("gen.count", count.unwrap_or(200))?;
    ctx.record_path("out", out)?;
    let mut run = RunDir::create(out, "gen")?;
    let items = gen_dataset(n, ctx.seed)?;
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        write_gif_artifact(&mut run, &item.record.path, &item.clip)?;
        records.push(item.record);
    }
    run.write(MANIFEST_FILE, to_jsonl(&records).as_bytes())?;
    info!("generated {n} clips in {}", out.display());
    ctx.finish(run)
}

fn write_gif_artifact(run: &mut RunDir, rel: &str, clip: &Clip) -> Result<PathBuf> {
    run.write_with(rel, |p| write_gif(p, clip))
}

/// Filters a manifest, assigns splits and reports statistics. Media paths in
/// the output manifest are absolute.
pub fn curate(ctx: &Context, manifest: &Path, k: Option<usize>, out: &Path) -> Result<Vec<Artifact>> {
    let cfg = ctx.settings.section("filter", FilterConfig::default())?;
    let k = ctx.settings.value("split.k", k.unwrap_or(500))?;
    ctx.record_path("manifest", manifest)?;
    ctx.record_path("out", out)?;
    let records = read_manifest(manifest)?;
    let mut run = RunDir::create(out, "curate")?;
    let (kept, report) = apply_filters(
        &records,
        |r| first_frame_gray(&media_path(manifest, r)).map_err(|e| e.to_string()),
        &cfg,
    );
    info!("kept {} of {} records", report.kept, report.input);
    let mut kept = kept;
    for r in &mut kept {
        let p = media_path(manifest, r);
        r.path = std::fs::canonicalize(&p).unwrap_or(p).display().to_string();
    }
    let split = split_dataset(&kept, k);
    let stats = manifest_stats(&split.records);
    run.write(MANIFEST_FILE, to_jsonl(&split.records).as_bytes())?;
    run.write_json("filter_report.json", &report)?;
    run.write_json(
        "stats.json",
        &json!({
            "stats": stats,
            "test_words": split.test_words,
            "warnings": split.warnings,
        }),
    )?;
    ctx.finish(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Denoiser,
    Vq,
    Dual,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Denoiser => "denoiser",
            ModelKind::Vq => "vq",
            ModelKind::Dual => "dual",
        }
    }

    fn options_section(self) -> &'static str {
        match self {
            ModelKind::Denoiser => "train",
            ModelKind::Vq => "vq_train",
            ModelKind::Dual => "dual_train",
        }
    }
}

/// Flags that override the config file for `train`.
#[derive(Debug, Clone, Default)]
pub struct TrainFlags {
    pub steps: Option<usize>,
    pub temporal: Option<String>,
    pub gamma: Option<usize>,
    pub k: Option<usize>,
}

pub fn train(ctx: &mut Context, model: ModelKind, manifest: &Path, flags: &TrainFlags, out: &Path) -> Result<Vec<Artifact>> {
    if let Some(s) = flags.steps {
        ctx.settings.set(format!("{}.steps", model.options_section()), s.into());
    }
    if model == ModelKind::Denoiser {
        if let Some(t) = &flags.temporal {
            ctx.settings.set("denoiser.temporal", Value::String(t.clone()));
        }
        if let Some(g) = flags.gamma {
            ctx.settings.set("denoiser.gamma", g.into());
        }
        if let Some(k) = flags.k {
            ctx.settings.set("denoiser.k", k.into());
        }
    } else if flags.temporal.is_some() || flags.gamma.is_some() || flags.k.is_some() {
        return Err(Error::Config("--temporal, --gamma and --k apply to the denoiser only".into()));
    }
    ctx.record_path("manifest", manifest)?;
    ctx.record_path("out", out)?;
    match model {
        ModelKind::Denoiser => train_denoiser(ctx, manifest, out),
        ModelKind::Vq => train_vq(ctx, manifest, out),
        ModelKind::Dual => train_dual(ctx, manifest, out),
    }
}

fn train_denoiser(ctx: &Context, manifest: &Path, out: &Path) -> Result<Vec<Artifact>> {
    let cfg = ctx.settings.section("denoiser", DenoiserConfig::default())?;
    cfg.validate()?;
    let diffusion = ctx.settings.section("diffusion", DiffusionSettings::default())?;
    let options = ctx.settings.section(
        "train",
        FitOptions {
            seed: ctx.seed,
            ..FitOptions::default()
        },
    )?;
    let schedule = diffusion.schedule()?;
    let data: Vec<TrainItem> = load_records(manifest, Subset::Train, cfg.frames, cfg.height)?
        .into_iter()
        .map(|(r, c)| TrainItem {
            clip: c.to_model_space(),
            caption: training_caption(&r),
        })
        .collect();
    if cfg.height != cfg.width {
        return Err(Error::Config("training clips are square; set denoiser.height = denoiser.width".into()));
    }
    let mut run = RunDir::create(out, "train")?;
    let mut net = Denoiser::new(cfg, derive_seed(ctx.seed, 1))?;
    info!(
        "training {} denoiser ({} parameters) on {} clips for {} steps",
        cfg.temporal,
        net.num_parameters(),
        data.len(),
        options.steps
    );
    let report = fit(&mut net, &schedule, &data, &options)?;
    info!("final loss {:.5}", report.losses.last().copied().unwrap_or(f64::NAN));
    let ckpt = Checkpoint::new("denoiser", &json!({ "denoiser": cfg, "diffusion": diffusion }), net.into_params())?
        .with_meta(json!({ "steps": options.steps, "train_items": data.len() }));
    run.write(CHECKPOINT_FILE, &ckpt.to_bytes()?)?;
    run.write_json(LOSSES_FILE, &json!({ "loss": report.losses }))?;
    ctx.finish(run)
}

fn train_vq(ctx: &Context, manifest: &Path, out: &Path) -> Result<Vec<Artifact>> {
    let vq_cfg = ctx.settings.section("vq", VqConfig::default())?;
    vq_cfg.validate()?;
    let prior_cfg = ctx.settings.section("prior", PriorConfig::for_tokenizer(&vq_cfg))?;
    let vq_opts = ctx.settings.section(
        "vq_train",
        VqFitOptions {
            seed: ctx.seed,
            ..VqFitOptions::default()
        },
    )?;
    let prior_opts = ctx.settings.section(
        "prior_train",
        PriorFitOptions {
            seed: derive_seed(ctx.seed, 2),
            ..PriorFitOptions::default()
        },
    )?;
    let items = load_records(manifest, Subset::Train, vq_cfg.frames, vq_cfg.height)?;
    let clips: Vec<Tensor> = items.iter().map(|(_, c)| c.to_model_space()).collect();
    let mut run = RunDir::create(out, "train")?;
    let mut tok = VqTokenizer::new(vq_cfg, derive_seed(ctx.seed, 1))?;
    let vq_report = fit_vq(&mut tok, &clips, &vq_opts)?;
    info!("tokenizer round-trip error {:?}", vq_report.round_trip.last());
    let grids = clips
        .iter()
        .zip(&items)
        .map(|(c, (r, _))| Ok((tok.vq_encode(c)?, training_caption(r))))
        .collect::<Result<Vec<_>>>()?;
    let mut prior = MaskedPrior::new(prior_cfg, derive_seed(ctx.seed, 3))?;
    let prior_losses = fit_prior(&mut prior, &grids, &prior_opts)?;
    let mut params = tok.params().clone();
    for (name, t) in prior.params().iter() {
        params.insert(name, t.clone());
    }
    let ckpt = Checkpoint::new("vq", &json!({ "vq": vq_cfg, "prior": prior_cfg }), params)?
        .with_meta(json!({ "train_items": clips.len() }));
    run.write(CHECKPOINT_FILE, &ckpt.to_bytes()?)?;
    run.write_json(
        LOSSES_FILE,
        &json!({
            "tokenizer": vq_report.losses,
            "round_trip": vq_report.round_trip,
            "prior": prior_losses,
        }),
    )?;
    ctx.finish(run)
}

fn train_dual(ctx: &Context, manifest: &Path, out: &Path) -> Result<Vec<Artifact>> {
    let cfg = ctx.settings.section("dual", DualConfig::default())?;
    cfg.validate()?;
    let options = ctx.settings.section(
        "dual_train",
        DualFitOptions {
            seed: ctx.seed,
            ..DualFitOptions::default()
        },
    )?;
    let data: Vec<(Clip, String)> = load_records(manifest, Subset::Train, cfg.frames, cfg.height)?
        .into_iter()
        .map(|(r, c)| (c, training_caption(&r)))
        .collect();
    let mut run = RunDir::create(out, "train")?;
    let mut enc = DualEncoder::new(cfg, derive_seed(ctx.seed, 1))?;
    let losses = fit_dual(&mut enc, &data, &options)?;
    info!("final contrastive loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    let ckpt = Checkpoint::new("dual", &cfg, enc.params().clone())?.with_meta(json!({ "train_items": data.len() }));
    run.write(CHECKPOINT_FILE, &ckpt.to_bytes()?)?;
    run.write_json(LOSSES_FILE, &json!({ "loss": losses }))?;
    ctx.finish(run)
}

pub fn load_denoiser(ckpt: &Checkpoint) -> Result<(Denoiser, DiffusionSettings)> {
    ckpt.expect_kind("denoiser")?;
    #[derive(Deserialize)]
    struct Saved {
        denoiser: DenoiserConfig,
        diffusion: DiffusionSettings,
    }
    let saved: Saved = ckpt.config_as()?;
    Ok((Denoiser::from_params(saved.denoiser, ckpt.params.clone())?, saved.diffusion))
}

pub fn load_vq(ckpt: &Checkpoint) -> Result<(VqTokenizer, MaskedPrior)> {
    ckpt.expect_kind("vq")?;
    #[derive(Deserialize)]
    struct Saved {
        vq: VqConfig,
        prior: PriorConfig,
    }
    let saved: Saved = ckpt.config_as()?;
    let (prior, tok) = partition(ckpt.params.clone(), "prior.");
    Ok((VqTokenizer::from_params(saved.vq, tok)?, MaskedPrior::from_params(saved.prior, prior)?))
}

pub fn load_dual(ckpt: &Checkpoint) -> Result<DualEncoder> {
    ckpt.expect_kind("dual")?;
    Ok(DualEncoder::from_params(ckpt.config_as()?, ckpt.params.clone())?)
}

/// One line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub caption: String,
    pub seed: u64,
    pub gif: String,
    pub vsdt: String,
}

/// Where `sample` takes its prompts from.
#[derive(Debug, Clone)]
pub enum Prompts {
    Captions(Vec<String>),
    /// Training-layout captions of a manifest's test records.
    Manifest(PathBuf),
}

fn prompt_list(prompts: &Prompts) -> Result<Vec<String>> {
    let list = match prompts {
        Prompts::Captions(c) => c.clone(),
        Prompts::Manifest(m) => {
            let records = read_manifest(m)?;
            let test: Vec<&ManifestRecord> = records.iter().filter(|r| is_test(r)).collect();
            let chosen = if test.is_empty() { records.iter().collect() } else { test };
            chosen.into_iter().map(training_caption).collect()
        }
    };
    if list.is_empty() {
        return Err(Error::Config("no prompts to sample from".into()));
    }
    Ok(list)
}

/// Samples `count` clips, cycling through the prompts. Sample `i` starts from
/// noise seeded with `derive_seed(seed, i)`.
pub fn sample(ctx: &Context, checkpoint: &Path, prompts: &Prompts, count: Option<usize>, out: &Path) -> Result<Vec<Artifact>> {
    let count = ctx.settings.value("sample.count", count.unwrap_or(8))?;
    ctx.record_path("checkpoint", checkpoint)?;
    if let Prompts::Manifest(m) = prompts {
        ctx.record_path("prompts", m)?;
    }
    ctx.record_path("out", out)?;
    if count == 0 {
        return Err(Error::Config("sample.count must be at least 1".into()));
    }
    let prompts = prompt_list(prompts)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let generate: Box<dyn Fn(&str, u64) -> Result<Clip>> = match ckpt.kind.as_str() {
        "denoiser" => {
            let (net, mut diffusion) = load_denoiser(&ckpt)?;
            diffusion.sampling_steps = ctx.settings.value("diffusion.sampling_steps", diffusion.sampling_steps)?;
            let schedule = diffusion.schedule()?;
            let shape = net.config().clip_shape();
            Box::new(move |caption, seed| {
                let x = ddim_sample(&net, caption, &schedule, &shape, seed)?;
                Ok(Clip::from_model_space(&x)?)
            })
        }
        "vq" => {
            let (tok, prior) = load_vq(&ckpt)?;
            let rounds = ctx.settings.value("sample.rounds", 8usize)?;
            Box::new(move |caption, seed| {
                let cfg = tok.config();
                let grid = sample_tokens(&prior, caption, cfg.grid_dims(), cfg.codebook_size, rounds, seed)?;
                Ok(Clip::from_model_space(&tok.vq_decode(&grid)?)?)
            })
        }
        other => return Err(Error::Checkpoint(format!("cannot sample from a {other} checkpoint"))),
    };
    let mut run = RunDir::create(out, "sample")?;
    let mut lines = String::new();
    for i in 0..count {
        let caption = &prompts[i % prompts.len()];
        let seed = derive_seed(ctx.seed, i as u64);
        let clip = generate(caption, seed)?;
        let id = format!("sample_{i:03}");
        let rec = SampleRecord {
            id: id.clone(),
            caption: caption.clone(),
            seed,
            gif: format!("samples/{id}.gif"),
            vsdt: format!("samples/{id}.vsdt"),
        };
        write_gif_artifact(&mut run, &rec.gif, &clip)?;
        run.write(&rec.vsdt, &clip.pixels().to_vsdt_bytes())?;
        lines.push_str(&serde_json::to_string(&rec).expect("sample records serialize"));
        lines.push('\n');
        info!("sample {i}: {caption:?}");
    }
    run.write(SAMPLES_FILE, lines.as_bytes())?;
    ctx.finish(run)
}

/// Reads the clips listed in a sample directory's `samples.jsonl`.
pub fn read_samples(dir: &Path) -> Result<Vec<(Clip, String)>> {
    let path = dir.join(SAMPLES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let rec: SampleRecord =
                serde_json::from_str(l).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
            let p = dir.join(&rec.vsdt);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Ok((Clip::new(Tensor::from_vsdt_bytes(&bytes)?)?, rec.caption))
        })
        .collect()
}

/// Scores a sample directory against the test records of a real manifest.
/// Candidate texts are the test captions followed by any prompt not among them.
pub fn eval(ctx: &Context, encoder: &Path, real: &Path, generated: &Path, out: &Path) -> Result<MetricReport> {
    ctx.record_path("encoder", encoder)?;
    ctx.record_path("real", real)?;
    ctx.record_path("generated", generated)?;
    ctx.record_path("out", out)?;
    let enc = load_dual(&Checkpoint::load(encoder)?)?;
    let cfg = *enc.config();
    let real_items = load_records(real, Subset::Test, cfg.frames, cfg.height)?;
    let gen_items = read_samples(generated)?;
    let mut seen = BTreeSet::new();
    let mut candidates = Vec::new();
    let prompts = gen_items.iter().map(|(_, c)| c.clone());
    for c in real_items.iter().map(|(r, _)| training_caption(r)).chain(prompts) {
        if seen.insert(c.clone()) {
            candidates.push(c);
        }
    }
    let real_clips: Vec<Clip> = real_items.into_iter().map(|(_, c)| c).collect();
    let mut run = RunDir::create(out, "eval")?;
    let report = evaluate(&enc, &real_clips, &gen_items, &candidates)?;
    run.write_json(METRICS_FILE, &report)?;
    ctx.finish(run)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

pub fn gradcheck(ctx: &Context, out: Option<&Path>) -> Result<GradcheckReport> {
    let checks = gradient_suite(ctx.seed)?;
    let report = GradcheckReport {
        seed: ctx.seed,
        tolerance: SUITE_TOLERANCE,
        passed: checks.iter().all(CheckResult::passed),
        checks,
    };
    if let Some(out) = out {
        ctx.record_path("out", out)?;
        let mut run = RunDir::create(out, "gradcheck")?;
        run.write_json("gradcheck.json", &report)?;
        ctx.finish(run)?;
    }
    Ok(report)
}
