//! Manifest records and the sample filtering, padding, splitting and
//! statistics applied to a sticker corpus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Real,
    Cartoon,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Real => "real",
            Domain::Cartoon => "cartoon",
        }
    }

    pub fn test_split(self) -> Split {
        match self {
            Domain::Real => Split::TestR,
            Domain::Cartoon => Split::TestC,
        }
    }
}

impl core::fmt::Display for Domain {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestR,
    TestC,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub domain: Domain,
    pub caption: String,
    #[serde(default)]
    pub trigger_words: Vec<String>,
    #[serde(default)]
    pub ocr_text: Option<String>,
    #[serde(default)]
    pub split: Split,
}

impl ManifestRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!("record {}: frame count and size must be positive", self.id)));
        }
        let bad_split = matches!(
            (self.domain, self.split),
            (Domain::Real, Split::TestC) | (Domain::Cartoon, Split::TestR)
        );
        if bad_split {
            return Err(Error::Invalid(format!(
                "record {}: split {:?} does not match domain {}",
                self.id, self.split, self.domain
            )));
        }
        Ok(())
    }
}

pub const DEFAULT_ENTROPY_BITS: f64 = 3.0;
pub const DEFAULT_MAX_ASPECT: f64 = 2.0;
pub const DEFAULT_MAX_OCR_CHARS: usize = 30;

/// ITU-R BT.601 luma of interleaved RGB bytes.
pub fn grayscale(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            libm::round(y).clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Shannon entropy in bits of the 256-bin histogram of `gray`.
pub fn entropy_bits(gray: &[u8]) -> f64 {
    if gray.is_empty() {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &g in gray {
        hist[g as usize] += 1;
    }
    let n = gray.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * libm::log2(p)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub keep: bool,
    pub score: f64,
}

pub fn entropy_filter(first_frame_gray: &[u8], threshold: f64) -> Decision {
    let score = entropy_bits(first_frame_gray);
    Decision {
        keep: score >= threshold,
        score,
    }
}

/// Keeps `max(w, h) / min(w, h) <= max_ratio`; degenerate sizes are dropped.
pub fn aspect_filter(width: usize, height: usize, max_ratio: f64) -> Decision {
    if width == 0 || height == 0 {
        return Decision {
            keep: false,
            score: f64::INFINITY,
        };
    }
    let score = width.max(height) as f64 / width.min(height) as f64;
    Decision {
        keep: score <= max_ratio,
        score,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcrDecision {
    Keep { chars: usize },
    Drop { chars: usize },
    /// The record has no OCR field; it is kept.
    Missing,
}

impl OcrDecision {
    pub fn keep(self) -> bool {
        !matches!(self, OcrDecision::Drop { .. })
    }
}

pub fn ocr_length_filter(record: &ManifestRecord, max_chars: usize) -> OcrDecision {
    match &record.ocr_text {
        None => OcrDecision::Missing,
        Some(t) => {
            let chars = t.chars().count();
            if chars > max_chars {
                OcrDecision::Drop { chars }
            } else {
                OcrDecision::Keep { chars }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub entropy_bits: f64,
    pub max_aspect: f64,
    pub max_ocr_chars: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            entropy_bits: DEFAULT_ENTROPY_BITS,
            max_aspect: DEFAULT_MAX_ASPECT,
            max_ocr_chars: DEFAULT_MAX_OCR_CHARS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Entropy,
    Aspect,
    Ocr,
}

pub const RULES: [Rule; 3] = [Rule::Entropy, Rule::Aspect, Rule::Ocr];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDecision {
    pub id: String,
    pub kept: bool,
    /// Entropy of the first frame in bits; `None` when it could not be decoded.
    pub entropy: Option<f64>,
    pub aspect: f64,
    pub ocr_chars: Option<usize>,
    pub failed: Vec<Rule>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub dropped_entropy: usize,
    pub dropped_aspect: usize,
    pub dropped_ocr: usize,
    pub undecodable: usize,
    pub missing_ocr: usize,
    pub decisions: Vec<RecordDecision>,
}

/// First frame of a record as grayscale bytes, or a reason it failed to decode.
pub type FirstFrame = core::result::Result<Vec<u8>, String>;

/// Runs a single rule on one record.
pub fn passes(rule: Rule, record: &ManifestRecord, first_frame: &FirstFrame, cfg: &FilterConfig) -> bool {
    match rule {
        Rule::Entropy => match first_frame {
            Ok(g) => entropy_filter(g, cfg.entropy_bits).keep,
            Err(_) => false,
        },
        Rule::Aspect => aspect_filter(record.width, record.height, cfg.max_aspect).keep,
        Rule::Ocr => ocr_length_filter(record, cfg.max_ocr_chars).keep(),
    }
}

/// Evaluates every rule on every record. `first_frame(i)` decodes record `i`.
pub fn apply_filters<F>(records: &[ManifestRecord], mut first_frame: F, cfg: &FilterConfig) -> (Vec<ManifestRecord>, FilterReport)
where
    F: FnMut(&ManifestRecord) -> FirstFrame,
{
    let mut report = FilterReport {
        input: records.len(),
        ..FilterReport::default()
    };
    let mut kept = Vec::new();
    for r in records {
        let frame = first_frame(r);
        let mut notes = Vec::new();
        let entropy = match &frame {
            Ok(g) => Some(entropy_bits(g)),
            Err(e) => {
                report.undecodable += 1;
                notes.push(format!("undecodable: {e}"));
                None
            }
        };
        let ocr = ocr_length_filter(r, cfg.max_ocr_chars);
        if ocr == OcrDecision::Missing {
            report.missing_ocr += 1;
            log::warn!("record {} has no OCR field; keeping it", r.id);
            notes.push("ocr field missing".to_string());
        }
        let failed: Vec<Rule> = RULES.into_iter().filter(|&rule| !passes(rule, r, &frame, cfg)).collect();
        for rule in &failed {
            match rule {
                Rule::Entropy => report.dropped_entropy += 1,
                Rule::Aspect => report.dropped_aspect += 1,
                Rule::Ocr => report.dropped_ocr += 1,
            }
        }
        let ok = failed.is_empty();
        if ok {
            kept.push(r.clone());
        }
        report.decisions.push(RecordDecision {
            id: r.id.clone(),
            kept: ok,
            entropy,
            aspect: aspect_filter(r.width, r.height, cfg.max_aspect).score,
            ocr_chars: match ocr {
                OcrDecision::Keep { chars } | OcrDecision::Drop { chars } => Some(chars),
                OcrDecision::Missing => None,
            },
            failed,
            notes,
        });
    }
    report.kept = kept.len();
    report.dropped = records.len() - kept.len();
    (kept, report)
}

/// Ping-pong extension to exactly `target` frames: `f1..fn, f(n-1)..f1, f2..`.
pub fn flip_pad<T: Clone>(frames: &[T], target: usize) -> Result<Vec<T>> {
    let n = frames.len();
    if n == 0 {
        return Err(Error::Invalid("flip_pad needs at least one frame".into()));
    }
    if n == 1 {
        return Ok(alloc::vec![frames[0].clone(); target]);
    }
    let period = 2 * (n - 1);
    Ok((0..target)
        .map(|i| {
            let p = i % period;
            frames[if p < n { p } else { period - p }].clone()
        })
        .collect())
}

/// Per-domain trigger-word frequencies: number of records carrying the word.
fn trigger_frequencies(records: &[ManifestRecord], domain: Domain) -> BTreeMap<&str, usize> {
    let mut freq = BTreeMap::new();
    for r in records.iter().filter(|r| r.domain == domain) {
        let words: BTreeSet<&str> = r.trigger_words.iter().map(String::as_str).collect();
        for w in words {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    freq
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub records: Vec<ManifestRecord>,
    /// Top trigger words per domain, most frequent first.
    pub test_words: BTreeMap<Domain, Vec<String>>,
    pub warnings: Vec<String>,
}

/// For each domain, takes the `k` most frequent trigger words (ties by
/// word) and moves the first record in id order carrying each word into
/// that domain's test split. Everything else becomes train.
pub fn split_dataset(records: &[ManifestRecord], k: usize) -> SplitOutcome {
    let mut out: Vec<ManifestRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            r.split = Split::Train;
            r
        })
        .collect();
    let mut by_id: Vec<usize> = (0..out.len()).collect();
    by_id.sort_by(|&a, &b| out[a].id.cmp(&out[b].id).then(a.cmp(&b)));
    let mut warnings = Vec::new();
    let mut test_words = BTreeMap::new();
    for domain in [Domain::Real, Domain::Cartoon] {
        let freq = trigger_frequencies(records, domain);
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if ranked.len() < k && records.iter().any(|r| r.domain == domain) {
            let msg = format!("{domain}: only {} distinct trigger words for k = {k}", ranked.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let words: Vec<String> = ranked.iter().take(k).map(|(w, _)| (*w).to_string()).collect();
        for w in &words {
            let pick = by_id.iter().copied().find(|&i| {
                out[i].domain == domain && out[i].split == Split::Train && out[i].trigger_words.iter().any(|t| t == w)
            });
            if let Some(i) = pick {
                out[i].split = domain.test_split();
            }
        }
        test_words.insert(domain, words);
    }
    SplitOutcome {
        records: out,
        test_words,
        warnings,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub records: usize,
    pub multi_frame_ratio: f64,
    /// Mean frame count over multi-frame records only.
    pub avg_frames_multi: f64,
    pub cartoon_ratio: f64,
    /// Mean whitespace-token count of captions.
    pub avg_description_length: f64,
    pub ocr_ratio: f64,
    pub avg_trigger_words: f64,
    pub caption_word_freq: BTreeMap<String, usize>,
    pub trigger_word_freq: BTreeMap<Domain, BTreeMap<String, usize>>,
}

pub fn manifest_stats(records: &[ManifestRecord]) -> ManifestStats {
    if records.is_empty() {
        log::warn!("empty manifest; statistics are all zero");
        return ManifestStats::default();
    }
    let n = records.len() as f64;
    let multi: Vec<&ManifestRecord> = records.iter().filter(|r| r.frame_count > 1).collect();
    let avg_frames_multi = if multi.is_empty() {
        0.0
    } else {
        multi.iter().map(|r| r.frame_count as f64).sum::<f64>() / multi.len() as f64
    };
    let mut caption_word_freq = BTreeMap::new();
    let mut tokens = 0usize;
    for r in records {
        for w in r.caption.split_whitespace() {
            tokens += 1;
            *caption_word_freq.entry(w.to_lowercase()).or_insert(0) += 1;
        }
    }
    let mut trigger_word_freq: BTreeMap<Domain, BTreeMap<String, usize>> = BTreeMap::new();
    for d in [Domain::Real, Domain::Cartoon] {
        let f = trigger_frequencies(records, d);
        if !f.is_empty() {
            trigger_word_freq.insert(d, f.into_iter().map(|(w, c)| (w.to_string(), c)).collect());
        }
    }
    ManifestStats {
        records: records.len(),
        multi_frame_ratio: multi.len() as f64 / n,
        avg_frames_multi,
        cartoon_ratio: records.iter().filter(|r| r.domain == Domain::Cartoon).count() as f64 / n,
        avg_description_length: tokens as f64 / n,
        ocr_ratio: records
            .iter()
            .filter(|r| r.ocr_text.as_deref().is_some_and(|t| !t.is_empty()))
            .count() as f64
            / n,
        avg_trigger_words: records.iter().map(|r| r.trigger_words.len() as f64).sum::<f64>() / n,
        caption_word_freq,
        trigger_word_freq,
    }
}

#[cfg(test)]
mod tests;
