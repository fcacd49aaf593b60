//! Likert annotation records, score aggregation and inter-annotator agreement.

mod kappa;
mod session;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ModelResponse, ResponseKey};
use crate::metrics::TargetLexicon;
use crate::probe::{CulturalDimension, ProbeDataset};

pub use kappa::{fleiss_kappa, kappa_fully_rated, CountMatrix, FleissKappaResult};
pub use session::{
    scale_legend, AnnotationItem, AnnotationSession, AnnotatorSpec, ScalePoint, SessionItem,
};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("empty input")]
    EmptyInput,
    #[error("records belong to different responses")]
    MixedResponses,
    #[error("count matrix row {row} has a different rater total or width")]
    RaggedMatrix { row: usize },
    #[error("kappa needs at least two raters per item (got {0})")]
    TooFewRaters(usize),
    #[error("Likert score {0} outside -2..=2")]
    OutOfRange(i64),
    #[error("lexicon `{0}` has an empty pole")]
    EmptyLexicon(String),
    #[error("responses below the annotation minimum for probes: {}", .probe_ids.join(", "))]
    IncompleteAnnotation { probe_ids: Vec<String> },
}

/// A point on the five-level scale, −2..=+2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct LikertScore(i8);

impl LikertScore {
    pub const ALL: [LikertScore; 5] = [
        LikertScore(-2),
        LikertScore(-1),
        LikertScore(0),
        LikertScore(1),
        LikertScore(2),
    ];

    pub fn new(value: i8) -> Result<Self, AnnotationError> {
        Self::try_from(i64::from(value))
    }

    pub fn value(self) -> i8 {
        self.0
    }

    /// Column index in a count matrix.
    pub fn index(self) -> usize {
        (self.0 + 2) as usize
    }

    pub fn label(self) -> String {
        format!("{:+}", self.0).replace("+0", "0")
    }
}

impl TryFrom<i64> for LikertScore {
    type Error = AnnotationError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        if (-2..=2).contains(&v) {
            Ok(LikertScore(v as i8))
        } else {
            Err(AnnotationError::OutOfRange(v))
        }
    }
}

impl From<LikertScore> for i64 {
    fn from(s: LikertScore) -> i64 {
        i64::from(s.0)
    }
}

impl fmt::Display for LikertScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One annotator's judgment of one response. Corrections are new records;
/// the latest record per (response, annotator) wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub response_ref: ResponseKey,
    pub annotator_id: String,
    pub score: LikertScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub submitted_at: DateTime<Utc>,
}

/// Latest score per annotator, in the order given.
fn latest_per_annotator<'a>(
    records: impl IntoIterator<Item = &'a AnnotationRecord>,
) -> BTreeMap<&'a str, LikertScore> {
    let mut latest = BTreeMap::new();
    for r in records {
        latest.insert(r.annotator_id.as_str(), r.score);
    }
    latest
}

/// Mean of the latest score of each annotator for a single response.
pub fn aggregate_final_score(records: &[AnnotationRecord]) -> Result<f64, AnnotationError> {
    let first = records.first().ok_or(AnnotationError::EmptyInput)?;
    if records.iter().any(|r| r.response_ref != first.response_ref) {
        return Err(AnnotationError::MixedResponses);
    }
    let latest = latest_per_annotator(records);
    let sum: f64 = latest.values().map(|s| f64::from(s.value())).sum();
    Ok(sum / latest.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub probe_id: String,
    pub final_score: f64,
}

/// Final per-probe scores of one model on one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScoreSet {
    pub model_id: String,
    pub dimension: CulturalDimension,
    pub scores: Vec<ProbeScore>,
}

impl DimensionScoreSet {
    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.final_score).collect()
    }
}

/// Everything score-set construction needs from a run.
pub struct RunData<'a> {
    pub dataset: &'a ProbeDataset,
    pub responses: &'a [ModelResponse],
    /// In log order.
    pub annotations: &'a [AnnotationRecord],
    pub min_annotations: usize,
    /// Skip under-annotated responses instead of failing.
    pub allow_partial: bool,
}

/// One score set per (model, dimension), sorted by model id then dimension.
///
/// A probe's final score is the mean over its responses (languages and
/// samples) of each response's aggregated annotation score. Probes keep
/// dataset order.
pub fn build_score_sets(run: &RunData<'_>) -> Result<Vec<DimensionScoreSet>, AnnotationError> {
    let mut by_response: HashMap<&ResponseKey, Vec<&AnnotationRecord>> = HashMap::new();
    for a in run.annotations {
        by_response.entry(&a.response_ref).or_default().push(a);
    }

    let mut incomplete = BTreeSet::new();
    // (model, probe) -> response final scores
    let mut per_probe: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    let mut models = BTreeSet::new();
    for resp in run.responses {
        if run.dataset.probe(&resp.probe_id).is_none() {
            continue;
        }
        models.insert(resp.model_id.as_str());
        let key = resp.key();
        let records = by_response.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let latest = latest_per_annotator(records.iter().copied());
        if latest.len() < run.min_annotations.max(1) {
            incomplete.insert(resp.probe_id.clone());
            continue;
        }
        let mean = latest.values().map(|s| f64::from(s.value())).sum::<f64>() / latest.len() as f64;
        per_probe
            .entry((resp.model_id.as_str(), resp.probe_id.as_str()))
            .or_default()
            .push(mean);
    }
    if !incomplete.is_empty() && !run.allow_partial {
        return Err(AnnotationError::IncompleteAnnotation {
            probe_ids: incomplete.into_iter().collect(),
        });
    }

    let mut sets = Vec::new();
    for model in models {
        for dim in CulturalDimension::ALL {
            let scores: Vec<ProbeScore> = run
                .dataset
                .probes
                .iter()
                .filter(|p| p.dimension == dim)
                .filter_map(|p| {
                    let vals = per_probe.get(&(model, p.id.as_str()))?;
                    Some(ProbeScore {
                        probe_id: p.id.clone(),
                        final_score: vals.iter().sum::<f64>() / vals.len() as f64,
                    })
                })
                .collect();
            if !scores.is_empty() {
                sets.push(DimensionScoreSet {
                    model_id: model.to_string(),
                    dimension: dim,
                    scores,
                });
            }
        }
    }
    Ok(sets)
}

/// Occurrences of (pole A, pole B) lexicon entries in `text`, case-insensitive.
///
/// An entry whose edge is an ASCII letter or digit only matches where the
/// neighbouring character is not one; other scripts match as substrings.
pub fn count_pole_keywords(text: &str, lexicon: &TargetLexicon) -> (usize, usize) {
    let hay = text.to_lowercase();
    let count = |words: &BTreeSet<String>| -> usize {
        words.iter().map(|w| count_word(&hay, &w.to_lowercase())).sum()
    };
    (count(&lexicon.pole_a_words), count(&lexicon.pole_b_words))
}

fn count_word(hay: &str, word: &str) -> usize {
    if word.is_empty() {
        return 0;
    }
    let word_first = word.chars().next().is_some_and(|c| c.is_ascii_alphanumeric());
    let word_last = word.chars().next_back().is_some_and(|c| c.is_ascii_alphanumeric());
    let mut n = 0;
    let mut from = 0;
    while let Some(pos) = hay[from..].find(word) {
        let start = from + pos;
        let end = start + word.len();
        let before_ok = !word_first
            || hay[..start]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_ascii_alphanumeric());
        let after_ok = !word_last
            || hay[end..]
                .chars()
                .next()
                .is_none_or(|c| !c.is_ascii_alphanumeric());
        if before_ok && after_ok {
            n += 1;
            from = end;
        } else {
            from = start + word.chars().next().map_or(1, char::len_utf8);
        }
    }
    n
}

/// Thresholds on the normalized keyword difference (a − b) / (a + b).
/// Fixed test-plumbing constants.
pub const AUTO_SCORE_STRONG: f64 = 0.6;
pub const AUTO_SCORE_WEAK: f64 = 0.2;

/// Maps keyword counts to the five-level scale.
pub fn score_keyword_counts(pole_a: usize, pole_b: usize) -> LikertScore {
    if pole_a + pole_b == 0 {
        return LikertScore(0);
    }
    let d = (pole_a as f64 - pole_b as f64) / (pole_a + pole_b) as f64;
    let v = if d >= AUTO_SCORE_STRONG {
        2
    } else if d >= AUTO_SCORE_WEAK {
        1
    } else if d <= -AUTO_SCORE_STRONG {
        -2
    } else if d <= -AUTO_SCORE_WEAK {
        -1
    } else {
        0
    };
    LikertScore(v)
}

pub fn score_text(text: &str, lexicon: &TargetLexicon) -> Result<LikertScore, AnnotationError> {
    if lexicon.pole_a_words.is_empty() || lexicon.pole_b_words.is_empty() {
        return Err(AnnotationError::EmptyLexicon(lexicon.label.clone()));
    }
    let (a, b) = count_pole_keywords(text, lexicon);
    Ok(score_keyword_counts(a, b))
}

/// Machine annotator: pole-keyword balance of the response text.
pub fn lexicon_auto_score(
    response: &ModelResponse,
    lexicon: &TargetLexicon,
) -> Result<LikertScore, AnnotationError> {
    score_text(&response.text, lexicon)
}
