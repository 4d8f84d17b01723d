//! Quality-score data filtering: two transcripts per clip, their character
//! error rate, a quality-model score and a silence gate.
//!
//! `quality = dnsmos − cer`. Records whose silence proportion exceeds the
//! threshold are dropped; the rest are ranked by quality (descending, ties
//! by id ascending) and the top `k` kept.

mod cer;
mod scorers;

use std::cmp::Ordering;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use cer::{cer, cer_normalized, Normalization};
pub use scorers::{AudioScorer, CommandScorer, ConstantScorer, EnergyVad, FnScorer, ScoreRequest, TableTranscriber, Transcriber};

use crate::error::{Error, Result};

/// Silence-proportion gate: records above it are excluded.
pub const VAD_THRESHOLD: f64 = 0.14;

/// Input manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: PathBuf,
    #[serde(default)]
    pub text: String,
}

/// Scored manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredRecord {
    pub id: String,
    pub audio: PathBuf,
    #[serde(default)]
    pub text: String,
    pub transcript_a: String,
    pub transcript_b: String,
    pub dnsmos: f64,
    pub cer: f64,
    pub vad_proportion: f64,
    pub quality: f64,
}

/// What the transcripts are compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CerMode {
    /// Transcript B against transcript A.
    #[default]
    Transcripts,
    /// Mean CER of both transcripts against the manifest text.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreOptions {
    pub mode: CerMode,
    pub normalization: Normalization,
    /// Worker threads; output order does not depend on it.
    pub jobs: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            mode: CerMode::default(),
            normalization: Normalization::default(),
            jobs: 1,
        }
    }
}

pub struct ScorerSuite {
    pub transcriber_a: Box<dyn Transcriber>,
    pub transcriber_b: Box<dyn Transcriber>,
    pub quality: Box<dyn AudioScorer>,
    /// Silence proportion in `[0, 1]`.
    pub vad: Box<dyn AudioScorer>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreOutcome {
    /// In input order.
    pub scored: Vec<ScoredRecord>,
    pub failed: Vec<Failure>,
}

fn assemble(
    entry: &ManifestEntry,
    a: Result<String>,
    b: Result<String>,
    dnsmos: Result<f64>,
    vad: Result<f64>,
    opts: &ScoreOptions,
) -> Result<ScoredRecord> {
    let (a, b, dnsmos, vad) = (a?, b?, dnsmos?, vad?);
    if !dnsmos.is_finite() {
        return Err(Error::Scorer(format!("quality score {dnsmos} is not finite")));
    }
    if !(0.0..=1.0).contains(&vad) {
        return Err(Error::Scorer(format!("silence proportion {vad} is outside [0, 1]")));
    }
    let n = opts.normalization;
    let cer = match opts.mode {
        CerMode::Transcripts => cer_normalized(&a, &b, n)?,
        CerMode::Reference => (cer_normalized(&entry.text, &a, n)? + cer_normalized(&entry.text, &b, n)?) / 2.0,
    };
    Ok(ScoredRecord {
        id: entry.id.clone(),
        audio: entry.audio.clone(),
        text: entry.text.clone(),
        transcript_a: a,
        transcript_b: b,
        dnsmos,
        cer,
        vad_proportion: vad,
        quality: dnsmos - cer,
    })
}

fn score_chunk(entries: &[ManifestEntry], suite: &ScorerSuite, opts: &ScoreOptions) -> Vec<Result<ScoredRecord>> {
    let requests: Vec<ScoreRequest> = entries
        .iter()
        .map(|e| ScoreRequest {
            id: e.id.clone(),
            audio: e.audio.clone(),
        })
        .collect();
    let n = requests.len();
    let ta = suite.transcriber_a.transcribe(&requests);
    let tb = suite.transcriber_b.transcribe(&requests);
    let q = suite.quality.score(&requests);
    let v = suite.vad.score(&requests);
    if [ta.len(), tb.len(), q.len(), v.len()].iter().any(|&l| l != n) {
        let msg = "a scorer returned the wrong number of results";
        return (0..n).map(|_| Err(Error::Scorer(msg.into()))).collect();
    }
    entries
        .iter()
        .zip(ta.into_iter().zip(tb))
        .zip(q.into_iter().zip(v))
        .map(|((e, (a, b)), (q, v))| assemble(e, a, b, q, v, opts))
        .collect()
}

/// Score one record.
pub fn score_record(entry: &ManifestEntry, suite: &ScorerSuite, opts: &ScoreOptions) -> Result<ScoredRecord> {
    score_chunk(std::slice::from_ref(entry), suite, opts)
        .pop()
        .expect("one result per entry")
}

/// Score every entry. A scorer failure marks that record failed; the rest
/// continue.
pub fn score_records(entries: &[ManifestEntry], suite: &ScorerSuite, opts: &ScoreOptions) -> ScoreOutcome {
    let jobs = opts.jobs.max(1).min(entries.len().max(1));
    let chunk = entries.len().div_ceil(jobs).max(1);
    let results: Vec<Result<ScoredRecord>> = if jobs == 1 {
        score_chunk(entries, suite, opts)
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = entries.chunks(chunk).map(|c| s.spawn(move || score_chunk(c, suite, opts))).collect();
            handles.into_iter().flat_map(|h| h.join().expect("scoring thread panicked")).collect()
        })
    };
    let mut out = ScoreOutcome::default();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(rec) => out.scored.push(rec),
            Err(err) => out.failed.push(Failure {
                id: e.id.clone(),
                reason: err.to_string(),
            }),
        }
    }
    out
}

/// Quality descending, then id ascending.
pub fn rank_order(a: &ScoredRecord, b: &ScoredRecord) -> Ordering {
    b.quality.total_cmp(&a.quality).then_with(|| a.id.cmp(&b.id))
}

/// Drop records above the silence gate, rank the rest and keep `top_k`.
pub fn filter_dataset(records: &[ScoredRecord], top_k: usize, vad_threshold: f64) -> Vec<ScoredRecord> {
    let mut kept: Vec<ScoredRecord> = records.iter().filter(|r| r.vad_proportion <= vad_threshold).cloned().collect();
    kept.sort_by(rank_order);
    kept.truncate(top_k);
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curation {
    pub selected: Vec<ScoredRecord>,
    pub failed: Vec<Failure>,
    pub scored: usize,
    pub vad_excluded: usize,
}

/// Score, gate, rank and select.
pub fn curate(entries: &[ManifestEntry], suite: &ScorerSuite, opts: &ScoreOptions, top_k: usize, vad_threshold: f64) -> Curation {
    let outcome = score_records(entries, suite, opts);
    Curation {
        selected: filter_dataset(&outcome.scored, top_k, vad_threshold),
        vad_excluded: outcome.scored.iter().filter(|r| r.vad_proportion > vad_threshold).count(),
        scored: outcome.scored.len(),
        failed: outcome.failed,
    }
}
