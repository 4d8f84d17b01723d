use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, VadConfig};
use crate::error::{Error, Result};

/// One audio file to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub audio: PathBuf,
}

/// Audio → text. Results are returned in request order.
pub trait Transcriber: Send + Sync {
    fn transcribe(&self, requests: &[ScoreRequest]) -> Vec<Result<String>>;
}

/// Audio → number (quality model, voice-activity detector).
pub trait AudioScorer: Send + Sync {
    fn score(&self, requests: &[ScoreRequest]) -> Vec<Result<f64>>;
}

/// Per-request closure adapter, used for deterministic stubs.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&ScoreRequest) -> Result<String> + Send + Sync> Transcriber for FnScorer<F> {
    fn transcribe(&self, requests: &[ScoreRequest]) -> Vec<Result<String>> {
        requests.iter().map(&self.0).collect()
    }
}

impl<F: Fn(&ScoreRequest) -> Result<f64> + Send + Sync> AudioScorer for FnScorer<F> {
    fn score(&self, requests: &[ScoreRequest]) -> Vec<Result<f64>> {
        requests.iter().map(&self.0).collect()
    }
}

/// Returns the same value for every request.
pub struct ConstantScorer(pub f64);

impl AudioScorer for ConstantScorer {
    fn score(&self, requests: &[ScoreRequest]) -> Vec<Result<f64>> {
        requests.iter().map(|_| Ok(self.0)).collect()
    }
}

/// Looks transcripts up by id; unknown ids fail.
pub struct TableTranscriber(pub BTreeMap<String, String>);

impl Transcriber for TableTranscriber {
    fn transcribe(&self, requests: &[ScoreRequest]) -> Vec<Result<String>> {
        requests
            .iter()
            .map(|r| {
                self.0
                    .get(&r.id)
                    .cloned()
                    .ok_or_else(|| Error::Scorer(format!("no transcript for `{}`", r.id)))
            })
            .collect()
    }
}

/// Silence proportion of the WAV file from the energy detector.
pub struct EnergyVad(pub VadConfig);

impl AudioScorer for EnergyVad {
    fn score(&self, requests: &[ScoreRequest]) -> Vec<Result<f64>> {
        requests
            .iter()
            .map(|r| read_wav(&r.audio).and_then(|a| self.0.proportion(&a)))
            .collect()
    }
}

/// External scorer speaking JSONL over stdin/stdout.
///
/// The program receives one `{"id","audio"}` line per request and must
/// print one line per request: `{"id","text"}` for transcribers,
/// `{"id","score"}` for scorers, or `{"id","error"}`. Lines may come in any
/// order; they are matched by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandScorer {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Deserialize)]
struct Response {
    id: String,
    text: Option<String>,
    score: Option<f64>,
    error: Option<String>,
}

impl CommandScorer {
    fn exchange(&self, requests: &[ScoreRequest]) -> Result<BTreeMap<String, Response>> {
        let mut input = Vec::new();
        for r in requests {
            serde_json::to_writer(&mut input, r)?;
            input.push(b'\n');
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(&self.program, e))?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let out = child.wait_with_output().map_err(|e| Error::io(&self.program, e))?;
        writer
            .join()
            .map_err(|_| Error::Scorer("stdin writer panicked".into()))?
            .map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::Scorer(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let mut map = BTreeMap::new();
        for (i, line) in String::from_utf8_lossy(&out.stdout).lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Response = serde_json::from_str(line)
                .map_err(|e| Error::Scorer(format!("{} output line {}: {e}", self.program.display(), i + 1)))?;
            map.insert(r.id.clone(), r);
        }
        Ok(map)
    }

    fn collect<T>(&self, requests: &[ScoreRequest], pick: impl Fn(&Response) -> Option<T>, what: &str) -> Vec<Result<T>> {
        match self.exchange(requests) {
            Err(e) => {
                let msg = e.to_string();
                requests.iter().map(|_| Err(Error::Scorer(msg.clone()))).collect()
            }
            Ok(map) => requests
                .iter()
                .map(|r| match map.get(&r.id) {
                    None => Err(Error::Scorer(format!("no response for `{}`", r.id))),
                    Some(resp) => match (&resp.error, pick(resp)) {
                        (Some(e), _) => Err(Error::Scorer(format!("`{}`: {e}", r.id))),
                        (None, Some(v)) => Ok(v),
                        (None, None) => Err(Error::Scorer(format!("response for `{}` has no {what}", r.id))),
                    },
                })
                .collect(),
        }
    }
}

impl Transcriber for CommandScorer {
    fn transcribe(&self, requests: &[ScoreRequest]) -> Vec<Result<String>> {
        self.collect(requests, |r| r.text.clone(), "\"text\"")
    }
}

impl AudioScorer for CommandScorer {
    fn score(&self, requests: &[ScoreRequest]) -> Vec<Result<f64>> {
        self.collect(requests, |r| r.score.filter(|s| s.is_finite()), "finite \"score\"")
    }
}
