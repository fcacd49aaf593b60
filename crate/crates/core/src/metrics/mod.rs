//! Score statistics: dimension scores, alignment against Hofstede anchors,
//! Welch's t-test, pole preference from token probabilities, concept
//! similarity, bias magnitude and the probe-type ablation.

mod special;
mod ttest;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::DimensionScoreSet;
use crate::probe::{CulturalDimension, ProbeDataset, ProbeType};

pub use special::{beta_reg, ln_gamma, student_t_two_tailed};
pub use ttest::{welch_t, TTestResult};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("anchor dimension {anchor} does not match score dimension {scores}")]
    DimensionMismatch {
        scores: CulturalDimension,
        anchor: CulturalDimension,
    },
    #[error("t-test needs at least two observations per sample (got {n_w} and {n_e})")]
    TooFewSamples { n_w: usize, n_e: usize },
    #[error("non-finite observation")]
    NonFinite,
    #[error("no log-probability for lexicon word `{0}`")]
    MissingWord(String),
    #[error("probability mass of pole {0} is zero")]
    ZeroMass(&'static str),
    #[error("vector dimensionality mismatch: {0} vs {1}")]
    DimensionalityMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("Hofstede raw score {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("invalid lexicon `{label}`: {message}")]
    InvalidLexicon { label: String, message: String },
    #[error("{path}: {message}")]
    Data { path: String, message: String },
}

/// Cultural dimension score: the mean of a model's final per-probe scores.
pub fn cds(scores: &DimensionScoreSet) -> Result<f64, MetricsError> {
    mean(scores.scores.iter().map(|s| s.final_score))
}

fn mean(values: impl Iterator<Item = f64>) -> Result<f64, MetricsError> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sum / n as f64)
}

/// Maps a raw Hofstede index onto the annotation scale: [0, 100] → [−2, 2].
pub fn normalize_hofstede(raw_score: f64) -> Result<f64, MetricsError> {
    if !(0.0..=100.0).contains(&raw_score) {
        return Err(MetricsError::OutOfRange(raw_score));
    }
    Ok(raw_score / 100.0 * 4.0 - 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HofstedeAnchor {
    pub country: String,
    pub dimension: CulturalDimension,
    pub raw_score: f64,
    pub normalized: f64,
}

impl HofstedeAnchor {
    pub fn new(
        country: impl Into<String>,
        dimension: CulturalDimension,
        raw_score: f64,
    ) -> Result<Self, MetricsError> {
        Ok(HofstedeAnchor {
            country: country.into(),
            dimension,
            raw_score,
            normalized: normalize_hofstede(raw_score)?,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnchor {
    country: String,
    dimension: CulturalDimension,
    raw_score: f64,
}

pub const DEFAULT_ANCHORS_JSON: &str = include_str!("../../data/hofstede_anchors.json");

/// Parses an anchor file: a JSON array of `{country, dimension, raw_score}`.
pub fn parse_anchors(text: &str, origin: &str) -> Result<Vec<HofstedeAnchor>, MetricsError> {
    let raw: Vec<RawAnchor> = serde_json::from_str(text).map_err(|e| MetricsError::Data {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .map(|r| {
            if !seen.insert((r.country.clone(), r.dimension)) {
                return Err(MetricsError::Data {
                    path: origin.to_string(),
                    message: format!("duplicate anchor {} {}", r.country, r.dimension),
                });
            }
            HofstedeAnchor::new(r.country, r.dimension, r.raw_score)
        })
        .collect()
}

pub fn load_anchors(path: impl AsRef<Path>) -> Result<Vec<HofstedeAnchor>, MetricsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Data {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_anchors(&text, &path.display().to_string())
}

pub fn default_anchors() -> Vec<HofstedeAnchor> {
    parse_anchors(DEFAULT_ANCHORS_JSON, "<builtin anchors>").expect("builtin anchors are valid")
}

/// Cultural alignment index: 1 / (1 + |cds − anchor|), in (0, 1].
pub fn cai(
    cds_value: f64,
    dimension: CulturalDimension,
    anchor: &HofstedeAnchor,
) -> Result<f64, MetricsError> {
    if anchor.dimension != dimension {
        return Err(MetricsError::DimensionMismatch {
            scores: dimension,
            anchor: anchor.dimension,
        });
    }
    Ok(1.0 / (1.0 + (cds_value - anchor.normalized).abs()))
}

/// Two disjoint word sets marking the poles of one dimension.
///
/// Pole A is the positive end of the scale (individualist for IDV, high power
/// distance for PDI).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLexicon {
    pub label: String,
    pub pole_a_words: BTreeSet<String>,
    pub pole_b_words: BTreeSet<String>,
}

impl TargetLexicon {
    pub fn new(
        label: impl Into<String>,
        pole_a: impl IntoIterator<Item = impl Into<String>>,
        pole_b: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, MetricsError> {
        let lex = TargetLexicon {
            label: label.into(),
            pole_a_words: pole_a.into_iter().map(Into::into).collect(),
            pole_b_words: pole_b.into_iter().map(Into::into).collect(),
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let err = |message: &str| MetricsError::InvalidLexicon {
            label: self.label.clone(),
            message: message.to_string(),
        };
        if self.pole_a_words.is_empty() || self.pole_b_words.is_empty() {
            return Err(err("both poles need at least one word"));
        }
        if let Some(w) = self.pole_a_words.intersection(&self.pole_b_words).next() {
            return Err(err(&format!("`{w}` appears in both poles")));
        }
        if self.words().any(|w| w.trim().is_empty()) {
            return Err(err("empty word"));
        }
        Ok(())
    }

    pub fn swapped(&self) -> TargetLexicon {
        TargetLexicon {
            label: format!("{} (swapped)", self.label),
            pole_a_words: self.pole_b_words.clone(),
            pole_b_words: self.pole_a_words.clone(),
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.pole_a_words.iter().chain(&self.pole_b_words)
    }

    /// +1 for pole A, −1 for pole B, 0 otherwise.
    pub fn polarity(&self, word: &str) -> i8 {
        if self.pole_a_words.contains(word) {
            1
        } else if self.pole_b_words.contains(word) {
            -1
        } else {
            0
        }
    }
}

/// One lexicon per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconSet(pub BTreeMap<CulturalDimension, TargetLexicon>);

pub const DEFAULT_LEXICONS_JSON: &str = include_str!("../../data/lexicons.json");

impl LexiconSet {
    pub fn parse(text: &str, origin: &str) -> Result<Self, MetricsError> {
        let set: LexiconSet = serde_json::from_str(text).map_err(|e| MetricsError::Data {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        for lex in set.0.values() {
            lex.validate()?;
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LEXICONS_JSON, "<builtin lexicons>").expect("builtin lexicons are valid")
    }

    pub fn get(&self, dimension: CulturalDimension) -> Option<&TargetLexicon> {
        self.0.get(&dimension)
    }
}

/// Natural-log ratio of the probability mass on pole A over pole B.
///
/// Positive values prefer pole A. Every lexicon word must have a log-probability.
pub fn preference_log_ratio(
    logprobs: &BTreeMap<String, f64>,
    lexicon: &TargetLexicon,
) -> Result<f64, MetricsError> {
    let mass = |words: &BTreeSet<String>| -> Result<f64, MetricsError> {
        words.iter().try_fold(0.0, |acc, w| {
            logprobs
                .get(w)
                .map(|lp| acc + lp.exp())
                .ok_or_else(|| MetricsError::MissingWord(w.clone()))
        })
    };
    let a = mass(&lexicon.pole_a_words)?;
    let b = mass(&lexicon.pole_b_words)?;
    if a <= 0.0 {
        return Err(MetricsError::ZeroMass("A"));
    }
    if b <= 0.0 {
        return Err(MetricsError::ZeroMass("B"));
    }
    Ok((a / b).ln())
}

/// Cosine similarity of two embeddings.
pub fn concept_similarity(response: &[f64], concept: &[f64]) -> Result<f64, MetricsError> {
    if response.len() != concept.len() {
        return Err(MetricsError::DimensionalityMismatch(response.len(), concept.len()));
    }
    let dot: f64 = response.iter().zip(concept).map(|(a, b)| a * b).sum();
    let na = response.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = concept.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(MetricsError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// L2 norm of a model's (IDV, PDI) score vector.
pub fn bias_magnitude(cds_idv: f64, cds_pdi: f64) -> f64 {
    cds_idv.hypot(cds_pdi)
}

/// Mean absolute final score per (probe type, model). Empty cells are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: BTreeMap<ProbeType, BTreeMap<String, f64>>,
}

pub fn ablation_by_probe_type(score_sets: &[DimensionScoreSet], ds: &ProbeDataset) -> AblationTable {
    let types: BTreeMap<&str, ProbeType> =
        ds.probes.iter().map(|p| (p.id.as_str(), p.probe_type)).collect();
    let mut acc: BTreeMap<ProbeType, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for set in score_sets {
        for s in &set.scores {
            let Some(t) = types.get(s.probe_id.as_str()) else {
                continue;
            };
            let cell = acc
                .entry(*t)
                .or_default()
                .entry(set.model_id.clone())
                .or_insert((0.0, 0));
            cell.0 += s.final_score.abs();
            cell.1 += 1;
        }
    }
    AblationTable {
        rows: acc
            .into_iter()
            .map(|(t, models)| {
                let cols = models
                    .into_iter()
                    .map(|(m, (sum, n))| (m, sum / n as f64))
                    .collect();
                (t, cols)
            })
            .collect(),
    }
}
