//! `audiocodec` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "audiocodec", version, about = "Train, distill and run a VQ audio codec; curate data; evaluate preference losses")]
struct Cli {
    /// TOML config; defaults to $AUDIOCODEC_CONFIG, then the built-in desk profile
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for clip-parallel encoding and scoring [default: 1, or filter.score.jobs]
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic corpus (WAVs + manifest.jsonl)
    SynthCorpus(SynthArgs),
    /// Train a codec with the adversarial loop
    TrainTeacher(TrainArgs),
    /// Train a multi-codebook teacher, then a single-codebook student that inherits it
    Distill(TrainArgs),
    /// Encode WAV files to code streams (JSONL)
    Encode(EncodeArgs),
    /// Decode code streams back to WAV files
    Decode(DecodeArgs),
    /// Token rate, bandwidth and (with a manifest) reconstruction and codebook statistics
    EvalCodec(EvalArgs),
    /// Score a manifest and keep the best records
    Filter(FilterArgs),
    /// Evaluate the linear preference loss on pairs (JSONL)
    Lpo(LpoArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n_clips: usize,
    /// Seconds per clip
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest JSONL of the training clips
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override the step count of every training phase
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override the training seed (student phases use seed + 1)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output JSONL; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(required = true)]
    pub wavs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub codes: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint
    #[arg(long, conflicts_with = "preset")]
    pub model: Option<PathBuf>,
    /// Built-in architecture (rates only): full-teacher, full-student, desk-teacher, desk-student
    #[arg(long)]
    pub preset: Option<String>,
    /// Clips to reconstruct (requires --model)
    #[arg(long, requires = "model")]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub top_k: usize,
    /// Curated (scored) manifest
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LpoArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub r1: Option<f64>,
    #[arg(long)]
    pub r2: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

fn error_json(kind: &str, err: &anyhow::Error) -> String {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    serde_json::json!({ "error": { "kind": kind, "message": format!("{err:#}"), "causes": chain } }).to_string()
}

fn kind_of(err: &anyhow::Error) -> &'static str {
    use audiocodec::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Shape { .. } => "shape",
                E::Config(_) => "config",
                E::Input(_) => "input",
                E::NonFinite(_) => "non_finite",
                E::Checkpoint(_) | E::MissingTensor(_) => "checkpoint",
                E::TrainingAborted(_) => "training_aborted",
                E::Scorer(_) => "scorer",
                E::Io { .. } | E::Wav { .. } => "io",
                E::Json(_) | E::Toml(_) => "parse",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return "parse";
        }
    }
    "cli"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = anyhow::anyhow!(e.render().to_string().trim().to_string());
            eprintln!("{}", error_json("usage", &err));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_json(kind_of(&err), &err));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (cfg, source) = config::RunConfig::resolve(cli.config.as_deref())?;
    let ctx = commands::Context { cfg, source, jobs: cli.jobs };
    match cli.command {
        Command::SynthCorpus(a) => commands::synth_corpus(&ctx, &a),
        Command::TrainTeacher(a) => commands::train_teacher(&ctx, &a),
        Command::Distill(a) => commands::distill(&ctx, &a),
        Command::Encode(a) => commands::encode(&ctx, &a),
        Command::Decode(a) => commands::decode(&ctx, &a),
        Command::EvalCodec(a) => commands::eval_codec(&ctx, &a),
        Command::Filter(a) => commands::filter(&ctx, &a),
        Command::Lpo(a) => commands::lpo(&ctx, &a),
    }
}
