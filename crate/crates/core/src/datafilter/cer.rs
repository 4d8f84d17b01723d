use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text clean-up applied to both strings before comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Compare as given, whitespace and punctuation included.
    #[default]
    None,
    /// Lowercase, drop punctuation and collapse whitespace runs.
    CaseAndPunctuation,
}

impl Normalization {
    pub fn apply(self, s: &str) -> String {
        match self {
            Normalization::None => s.to_string(),
            Normalization::CaseAndPunctuation => s
                .chars()
                .filter(|c| c.is_alphanumeric() || c.is_whitespace())
                .flat_map(char::to_lowercase)
                .collect::<String>()
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Character error rate: Levenshtein distance over Unicode scalar values
/// divided by the reference length. Not clipped at 1.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::Input("CER reference is empty".into()));
    }
    Ok(strsim::levenshtein(reference, hypothesis) as f64 / n as f64)
}

/// [`cer`] after normalising both strings.
pub fn cer_normalized(reference: &str, hypothesis: &str, norm: Normalization) -> Result<f64> {
    cer(&norm.apply(reference), &norm.apply(hypothesis))
}
