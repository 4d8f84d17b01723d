use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use audiocodec::adversary::{BankConfig, TrainConfig};
use audiocodec::codec::CodecSpec;
use audiocodec::datafilter::{AudioScorer, CommandScorer, ConstantScorer, EnergyVad, ManifestEntry, ScoreOptions, TableTranscriber, Transcriber, VAD_THRESHOLD};
use audiocodec::distill::DistillPlan;
use audiocodec::dsp::VadConfig;
use audiocodec::lpo::LpoHyper;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "AUDIOCODEC_CONFIG";

/// Everything a run can be configured with. Unset sections take the desk
/// profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Codec trained by `train-teacher` and the teacher of `distill`.
    pub codec: CodecSpec,
    pub train: TrainConfig,
    pub discriminators: BankConfig,
    pub student: CodecSpec,
    pub student_train: TrainConfig,
    pub freeze_inherited: bool,
    pub filter: FilterConfig,
    pub lpo: LpoHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = DistillPlan::desk();
        Self {
            codec: plan.teacher,
            train: plan.teacher_train,
            discriminators: plan.discriminators,
            student: plan.student,
            student_train: plan.student_train,
            freeze_inherited: plan.freeze_inherited,
            filter: FilterConfig::default(),
            lpo: LpoHyper::default(),
        }
    }
}

impl RunConfig {
    /// Explicit path, else the environment variable, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<(Self, Option<PathBuf>)> {
        let path = path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            None => Ok((Self::default(), None)),
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))?;
                Ok((cfg, Some(p)))
            }
        }
    }

    /// Overlay a TOML document on the defaults: tables merge key by key,
    /// everything else (including enum-valued keys) replaces.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(Self::default())?;
        overlay(&mut base, user);
        Ok(toml::Value::Table(base).try_into()?)
    }

    pub fn plan(&self) -> DistillPlan {
        DistillPlan {
            teacher: self.codec.clone(),
            student: self.student.clone(),
            teacher_train: self.train.clone(),
            student_train: self.student_train.clone(),
            discriminators: self.discriminators.clone(),
            freeze_inherited: self.freeze_inherited,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Keys whose values are enums or lists: replaced whole, never merged.
const ATOMIC_KEYS: &[&str] = &[
    "transcriber_a",
    "transcriber_b",
    "quality",
    "vad",
    "encoder_init",
    "decoder_init",
    "vq_init",
    "mel_scales",
    "frozen",
];

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !ATOMIC_KEYS.contains(&k.as_str()) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// How one scorer of the filter suite is provided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    /// Transcriber echoing the manifest's `text`.
    ManifestText,
    /// The same number for every clip.
    Constant(f64),
    /// JSONL file of `{"id","text"}` or `{"id","score"}` lines.
    Table(PathBuf),
    /// External program speaking the JSONL request/response protocol.
    Command(CommandScorer),
    /// Built-in energy detector (silence proportion).
    EnergyVad(VadConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub transcriber_a: ScorerConfig,
    pub transcriber_b: ScorerConfig,
    pub quality: ScorerConfig,
    pub vad: ScorerConfig,
    pub vad_threshold: f64,
    pub score: ScoreOptions,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            transcriber_a: ScorerConfig::ManifestText,
            transcriber_b: ScorerConfig::ManifestText,
            quality: ScorerConfig::Constant(4.0),
            vad: ScorerConfig::EnergyVad(VadConfig::default()),
            vad_threshold: VAD_THRESHOLD,
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableLine {
    id: String,
    text: Option<String>,
    score: Option<f64>,
}

fn read_table(path: &Path) -> Result<Vec<TableLine>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

struct TableScorer(BTreeMap<String, f64>);

impl AudioScorer for TableScorer {
    fn score(&self, requests: &[audiocodec::datafilter::ScoreRequest]) -> Vec<audiocodec::Result<f64>> {
        requests
            .iter()
            .map(|r| {
                self.0
                    .get(&r.id)
                    .copied()
                    .ok_or_else(|| audiocodec::Error::Scorer(format!("no score for `{}`", r.id)))
            })
            .collect()
    }
}

impl ScorerConfig {
    pub fn transcriber(&self, manifest: &[ManifestEntry]) -> Result<Box<dyn Transcriber>> {
        Ok(match self {
            ScorerConfig::ManifestText => Box::new(TableTranscriber(manifest.iter().map(|e| (e.id.clone(), e.text.clone())).collect())),
            ScorerConfig::Table(p) => {
                let mut map = BTreeMap::new();
                for l in read_table(p)? {
                    let text = l.text.with_context(|| format!("{}: `{}` has no \"text\"", p.display(), l.id))?;
                    map.insert(l.id, text);
                }
                Box::new(TableTranscriber(map))
            }
            ScorerConfig::Command(c) => Box::new(c.clone()),
            ScorerConfig::Constant(_) | ScorerConfig::EnergyVad(_) => bail!("{self:?} cannot act as a transcriber"),
        })
    }

    pub fn scorer(&self) -> Result<Box<dyn AudioScorer>> {
        Ok(match self {
            ScorerConfig::Constant(v) => Box::new(ConstantScorer(*v)),
            ScorerConfig::EnergyVad(v) => Box::new(EnergyVad(v.clone())),
            ScorerConfig::Command(c) => Box::new(c.clone()),
            ScorerConfig::Table(p) => {
                let mut map = BTreeMap::new();
                for l in read_table(p)? {
                    let s = l.score.with_context(|| format!("{}: `{}` has no \"score\"", p.display(), l.id))?;
                    map.insert(l.id, s);
                }
                Box::new(TableScorer(map))
            }
            ScorerConfig::ManifestText => bail!("manifest_text is a transcriber, not a scorer"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.plan().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nstepz = 3").is_err());
    }

    #[test]
    fn sections_overlay_the_desk_profile() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 3\n[train.generator]\nlr = 0.5\n[filter]\nquality = { table = \"q.jsonl\" }").unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.generator.lr, 0.5);
        assert_eq!(cfg.train.generator.beta1, d.train.generator.beta1);
        assert_eq!(cfg.train.batch_size, d.train.batch_size);
        assert_eq!(cfg.filter.quality, ScorerConfig::Table("q.jsonl".into()));
        assert_eq!(cfg.codec, d.codec);
    }
}
