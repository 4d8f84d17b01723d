use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use audiocodec::adversary::{dlt_train, reconstruction_mel_loss, DiscriminatorBank, GanState, StepMetrics};
use audiocodec::codec::{build_codec, CodecModel, CodecSpec};
use audiocodec::datafilter::{curate, Failure, ManifestEntry, ScorerSuite};
use audiocodec::distill::{run_dms, PhaseSummary};
use audiocodec::dsp::{read_wav_at, write_wav, AudioBuffer};
use audiocodec::lpo::{lpo_batch, PreferencePair};
use audiocodec::quantizer::mean_perplexity_usage;
use audiocodec::synth::{mixed_corpus, DEFAULT_CLASS_WEIGHTS};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{DecodeArgs, EncodeArgs, EvalArgs, FilterArgs, LpoArgs, SynthArgs, TrainArgs};

/// Rates listed for the single-codebook codec in published comparisons.
const PUBLISHED_TPS: f64 = 93.0;
const PUBLISHED_BPS: f64 = 1300.0;

pub struct Context {
    pub cfg: RunConfig,
    pub source: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl Context {
    fn log_config(&self, cfg: &RunConfig) -> Result<()> {
        let from = self.source.as_ref().map_or("built-in defaults".to_string(), |p| p.display().to_string());
        eprintln!("# resolved config (from {from})\n{}", cfg.to_toml()?);
        Ok(())
    }

    fn jobs(&self, fallback: usize) -> usize {
        self.jobs.unwrap_or(fallback).max(1)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

/// Manifest lines with audio paths resolved against the manifest's directory.
fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
    for e in &mut entries {
        if e.audio.is_relative() {
            e.audio = base.join(&e.audio);
        }
    }
    Ok(entries)
}

fn load_corpus(path: &Path, sample_rate: u32) -> Result<Vec<AudioBuffer>> {
    let entries = load_manifest(path)?;
    ensure!(!entries.is_empty(), "manifest {} lists no clips", path.display());
    entries
        .iter()
        .map(|e| read_wav_at(&e.audio, sample_rate).with_context(|| format!("clip `{}`", e.id)))
        .collect()
}

/// Ordered map over `items` on up to `jobs` threads.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

fn progress(phase: &str, m: &StepMetrics) {
    if m.step == 1 || m.step % 10 == 0 {
        eprintln!(
            "[{phase}] step {:>5} epoch {:>3} mel {:.4} adv_g {:.4} adv_d {:.4} fm {:.4} ppl {:.2} usage {:.3}",
            m.step, m.epoch, m.mel, m.adv_g, m.adv_d, m.fm, m.ppl, m.usage
        );
    }
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    id: &'a str,
    audio: &'a str,
    text: &'a str,
}

pub fn synth_corpus(ctx: &Context, a: &SynthArgs) -> Result<()> {
    ensure!(a.sample_rate > 0, "--sample-rate must be positive");
    ensure!(a.duration.is_finite() && a.duration > 0.0, "--duration must be positive, got {}", a.duration);
    let len = (a.duration * a.sample_rate as f64).round() as usize;
    ensure!(len > 0, "--duration {} s is shorter than one sample", a.duration);
    ctx.log_config(&ctx.cfg)?;
    create_dir(&a.out_dir)?;
    let clips = mixed_corpus(a.n_clips, a.sample_rate, len, a.seed, DEFAULT_CLASS_WEIGHTS)?;
    let mut lines = Vec::with_capacity(clips.len());
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (class, audio)) in clips.iter().enumerate() {
        let id = format!("clip_{i:05}");
        let file = format!("{id}.wav");
        write_wav(a.out_dir.join(&file), audio)?;
        *counts.entry(class.name()).or_default() += 1;
        lines.push((id, file, format!("{} clip {i}", class.name())));
    }
    let manifest = a.out_dir.join("manifest.jsonl");
    write_jsonl(
        &manifest,
        lines.iter().map(|(id, audio, text)| ManifestLine { id, audio, text }),
    )?;
    print_json(&json!({ "manifest": manifest, "clips": clips.len(), "classes": counts }))
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    phase: &'a str,
    #[serde(flatten)]
    m: &'a StepMetrics,
}

pub fn train_teacher(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.codec.seed = s;
        cfg.train.seed = s;
    }
    ctx.log_config(&cfg)?;
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("config.resolved.toml"), &cfg.to_toml()?)?;
    let corpus = load_corpus(&a.corpus, cfg.codec.mel.sample_rate)?;
    let mut model = build_codec(&cfg.codec)?;
    let mut gan = GanState::new(DiscriminatorBank::new(&cfg.discriminators)?, cfg.train.seed)?;
    let report = dlt_train(&corpus, &mut model, &mut gan, &cfg.train, |m| progress("teacher", m))?;
    let ckpt = a.out_dir.join("model.ckpt");
    model.save(&ckpt)?;
    write_jsonl(
        &a.out_dir.join("metrics.jsonl"),
        report.metrics.iter().map(|m| MetricsLine { phase: "teacher", m }),
    )?;
    let summary = PhaseSummary::from_report(&report)?;
    write_file(&a.out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    print_json(&json!({ "checkpoint": ckpt, "summary": summary }))
}

pub fn distill(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = a.steps {
        cfg.train.steps = s;
        cfg.student_train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.codec.seed = s;
        cfg.train.seed = s;
        cfg.student.seed = s.wrapping_add(1);
        cfg.student_train.seed = s.wrapping_add(1);
    }
    ctx.log_config(&cfg)?;
    let plan = cfg.plan();
    plan.validate()?;
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("config.resolved.toml"), &cfg.to_toml()?)?;
    let corpus = load_corpus(&a.corpus, plan.teacher.mel.sample_rate)?;
    let mut log: Vec<(String, StepMetrics)> = Vec::new();
    let outcome = run_dms(&plan, &corpus, |phase, m| {
        progress(phase, m);
        log.push((phase.to_string(), m.clone()));
    })?;
    outcome.teacher.save(a.out_dir.join("teacher.ckpt"))?;
    outcome.student.save(a.out_dir.join("student.ckpt"))?;
    write_jsonl(
        &a.out_dir.join("metrics.jsonl"),
        log.iter().map(|(phase, m)| MetricsLine { phase, m }),
    )?;
    let summary = outcome.summary()?;
    let text = serde_json::to_string_pretty(&summary)?;
    write_file(&a.out_dir.join("summary.json"), &text)?;
    print_json(&summary)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodesLine {
    id: String,
    audio: PathBuf,
    /// `codes[codebook][frame]`.
    codes: Vec<Vec<u32>>,
}

fn encode_file(model: &CodecModel, path: &Path) -> Result<CodesLine> {
    let audio = read_wav_at(path, model.spec().mel.sample_rate)?;
    let q = model.quantize(&model.encode(&audio)?)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(CodesLine {
        id,
        audio: path.to_path_buf(),
        codes: q.indices,
    })
}

pub fn encode(ctx: &Context, a: &EncodeArgs) -> Result<()> {
    ctx.log_config(&ctx.cfg)?;
    let model = CodecModel::load(&a.model)?;
    let results = par_map(&a.wavs, ctx.jobs(1), |p| encode_file(&model, p));
    let lines = results.into_iter().collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(p) => write_jsonl(p, &lines),
        None => lines.iter().try_for_each(print_json),
    }
}

pub fn decode(ctx: &Context, a: &DecodeArgs) -> Result<()> {
    ctx.log_config(&ctx.cfg)?;
    let model = CodecModel::load(&a.model)?;
    let lines: Vec<CodesLine> = read_jsonl(&a.codes)?;
    create_dir(&a.out_dir)?;
    let mut written = Vec::with_capacity(lines.len());
    for l in &lines {
        ensure!(
            !l.id.is_empty() && !l.id.contains(['/', '\\']) && l.id != "." && l.id != "..",
            "code stream id `{}` is not usable as a file name",
            l.id
        );
        let audio = model.decode_codes(&l.codes).with_context(|| format!("decoding `{}`", l.id))?;
        let path = a.out_dir.join(format!("{}.wav", l.id));
        write_wav(&path, &audio)?;
        written.push(path);
    }
    print_json(&json!({ "decoded": written }))
}

#[derive(Serialize)]
struct Published {
    tokens_per_second: f64,
    bandwidth_bps: f64,
}

#[derive(Serialize)]
struct EvalReport {
    source: String,
    sample_rate: u32,
    hop: usize,
    n_codebooks: usize,
    n_codes: usize,
    tokens_per_second: f64,
    bandwidth_bps: f64,
    /// Published rounded rates; present when the configuration matches them.
    #[serde(skip_serializing_if = "Option::is_none")]
    published: Option<Published>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clips: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mel_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    usage: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed: Vec<Failure>,
}

fn preset(name: &str) -> Result<CodecSpec> {
    Ok(match name {
        "full-teacher" => CodecSpec::teacher(),
        "full-student" => CodecSpec::student("teacher.ckpt"),
        "desk-teacher" => CodecSpec::desk_teacher(),
        "desk-student" => CodecSpec::desk_student(),
        other => bail!("unknown preset `{other}` (expected full-teacher, full-student, desk-teacher or desk-student)"),
    })
}

fn rate_report(source: String, spec: &CodecSpec) -> Result<EvalReport> {
    spec.validate()?;
    let tps = spec.tokens_per_second();
    let bps = spec.bandwidth_bps();
    let n_codebooks = spec.n_residual * spec.n_group;
    let published = (n_codebooks == 1 && tps == 93.75 && bps == 1406.25).then_some(Published {
        tokens_per_second: PUBLISHED_TPS,
        bandwidth_bps: PUBLISHED_BPS,
    });
    Ok(EvalReport {
        source,
        sample_rate: spec.mel.sample_rate,
        hop: spec.mel.hop,
        n_codebooks,
        n_codes: spec.n_codes,
        tokens_per_second: tps,
        bandwidth_bps: bps,
        published,
        clips: None,
        mel_distance: None,
        perplexity: None,
        usage: None,
        failed: Vec::new(),
    })
}

pub fn eval_codec(ctx: &Context, a: &EvalArgs) -> Result<()> {
    ctx.log_config(&ctx.cfg)?;
    let report = match (&a.model, &a.preset) {
        (None, None) => bail!("give --model or --preset"),
        (_, Some(name)) => rate_report(format!("preset:{name}"), &preset(name)?)?,
        (Some(path), None) => {
            let model = CodecModel::load(path)?;
            let mut report = rate_report(path.display().to_string(), model.spec())?;
            if let Some(manifest) = &a.manifest {
                let entries = load_manifest(manifest)?;
                let sr = model.spec().mel.sample_rate;
                let mut clips = Vec::new();
                for e in &entries {
                    match read_wav_at(&e.audio, sr) {
                        Ok(c) => clips.push(c),
                        Err(err) => report.failed.push(Failure {
                            id: e.id.clone(),
                            reason: err.to_string(),
                        }),
                    }
                }
                ensure!(!clips.is_empty(), "no readable clips in {}", manifest.display());
                let scales = ctx.cfg.train.scales(&model);
                report.mel_distance = Some(reconstruction_mel_loss(&model, &clips, &scales)?);
                let k = model.spec().n_codes;
                let mut hist = vec![vec![0u64; k]; report.n_codebooks];
                for c in &clips {
                    let q = model.quantize(&model.encode(c)?)?;
                    for (h, idx) in hist.iter_mut().zip(&q.indices) {
                        for &i in idx {
                            h[i as usize] += 1;
                        }
                    }
                }
                let (ppl, usage) = mean_perplexity_usage(&hist)?;
                report.clips = Some(clips.len());
                report.perplexity = Some(ppl);
                report.usage = Some(usage);
            }
            report
        }
    };
    print_json(&report)
}

pub fn filter(ctx: &Context, a: &FilterArgs) -> Result<()> {
    ctx.log_config(&ctx.cfg)?;
    let f = &ctx.cfg.filter;
    let entries = load_manifest(&a.manifest)?;
    let suite = ScorerSuite {
        transcriber_a: f.transcriber_a.transcriber(&entries)?,
        transcriber_b: f.transcriber_b.transcriber(&entries)?,
        quality: f.quality.scorer()?,
        vad: f.vad.scorer()?,
    };
    let mut opts = f.score.clone();
    opts.jobs = ctx.jobs(opts.jobs);
    let c = curate(&entries, &suite, &opts, a.top_k, f.vad_threshold);
    write_jsonl(&a.out, &c.selected)?;
    for fail in &c.failed {
        eprintln!("skipped `{}`: {}", fail.id, fail.reason);
    }
    print_json(&json!({
        "out": a.out,
        "input": entries.len(),
        "scored": c.scored,
        "vad_excluded": c.vad_excluded,
        "selected": c.selected.len(),
        "top_k": a.top_k,
        "failed": c.failed,
    }))
}

pub fn lpo(ctx: &Context, a: &LpoArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    let h = &mut cfg.lpo;
    for (slot, flag) in [
        (&mut h.beta, a.beta),
        (&mut h.r1, a.r1),
        (&mut h.r2, a.r2),
        (&mut h.lambda, a.lambda),
        (&mut h.epsilon, a.epsilon),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    ctx.log_config(&cfg)?;
    cfg.lpo.validate()?;
    let pairs: Vec<PreferencePair> = read_jsonl(&a.pairs)?;
    let batch = lpo_batch(&pairs, &cfg.lpo)?;
    print_json(&json!({ "hyper": cfg.lpo, "gamma": cfg.lpo.gamma(), "batch": batch }))
}
