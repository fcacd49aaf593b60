//! Blind annotation sessions.
//!
//! Annotators see opaque item ids, the probe and response text, the dimension
//! and the scale legend. The producing model never leaves the server side.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{ModelResponse, ResponseKey};
use crate::probe::{CulturalDimension, ProbeDataset};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorSpec {
    pub id: String,
    /// Bearer token; generated at service start when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Restricts the queue to responses in these languages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<String>>,
}

impl AnnotatorSpec {
    pub fn new(id: impl Into<String>) -> Self {
        AnnotatorSpec {
            id: id.into(),
            token: None,
            languages: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub score: i8,
    pub label: String,
}

pub fn scale_legend(dimension: CulturalDimension) -> Vec<ScalePoint> {
    let labels: [&str; 5] = match dimension {
        CulturalDimension::Idv => [
            "strongly collectivistic",
            "somewhat collectivistic",
            "neutral or balanced",
            "somewhat individualistic",
            "strongly individualistic",
        ],
        CulturalDimension::Pdi => [
            "very low power distance",
            "low power distance",
            "neutral or balanced",
            "high power distance",
            "very high power distance",
        ],
    };
    labels
        .iter()
        .zip(-2i8..=2)
        .map(|(label, score)| ScalePoint {
            score,
            label: label.to_string(),
        })
        .collect()
}

/// Annotator-facing payload. Its field set is the blindness contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationItem {
    pub item_id: String,
    pub probe_text: String,
    pub response_text: String,
    pub dimension: CulturalDimension,
    pub scale_legend: Vec<ScalePoint>,
}

/// Server-side view of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionItem {
    pub item_id: String,
    pub response_ref: ResponseKey,
    pub dimension: CulturalDimension,
    pub probe_text: String,
    pub response_text: String,
}

impl SessionItem {
    pub fn payload(&self) -> AnnotationItem {
        AnnotationItem {
            item_id: self.item_id.clone(),
            probe_text: self.probe_text.clone(),
            response_text: self.response_text.clone(),
            dimension: self.dimension,
            scale_legend: scale_legend(self.dimension),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnnotationSession {
    pub session_id: String,
    pub roster: Vec<AnnotatorSpec>,
    pub presentation_order_seed: u64,
    items: Vec<SessionItem>,
    by_id: HashMap<String, usize>,
    queues: HashMap<String, Vec<usize>>,
}

impl AnnotationSession {
    /// One item per response whose probe is in the dataset, in response order.
    pub fn new(
        session_id: impl Into<String>,
        dataset: &ProbeDataset,
        responses: &[ModelResponse],
        roster: Vec<AnnotatorSpec>,
        presentation_order_seed: u64,
    ) -> Self {
        let mut items = Vec::new();
        let mut by_id = HashMap::new();
        for r in responses {
            let Some(probe) = dataset.probe(&r.probe_id) else {
                continue;
            };
            let key = r.key();
            let item_id = key.item_id();
            if by_id.contains_key(&item_id) {
                continue;
            }
            let probe_text = probe
                .variant(&r.language)
                .or_else(|| probe.variants.first())
                .map(|v| v.text.clone())
                .unwrap_or_default();
            by_id.insert(item_id.clone(), items.len());
            items.push(SessionItem {
                item_id,
                response_ref: key,
                dimension: probe.dimension,
                probe_text,
                response_text: r.text.clone(),
            });
        }
        let queues = roster
            .iter()
            .map(|a| (a.id.clone(), shuffled_queue(&items, a, presentation_order_seed)))
            .collect();
        AnnotationSession {
            session_id: session_id.into(),
            roster,
            presentation_order_seed,
            items,
            by_id,
            queues,
        }
    }

    pub fn items(&self) -> &[SessionItem] {
        &self.items
    }

    pub fn item(&self, item_id: &str) -> Option<&SessionItem> {
        self.by_id.get(item_id).map(|&i| &self.items[i])
    }

    pub fn item_for_response(&self, key: &ResponseKey) -> Option<&SessionItem> {
        self.item(&key.item_id())
    }

    pub fn annotator(&self, id: &str) -> Option<&AnnotatorSpec> {
        self.roster.iter().find(|a| a.id == id)
    }

    /// The annotator's items in presentation order.
    pub fn queue(&self, annotator_id: &str) -> Vec<&SessionItem> {
        self.queues
            .get(annotator_id)
            .map(|q| q.iter().map(|&i| &self.items[i]).collect())
            .unwrap_or_default()
    }

    pub fn is_assigned(&self, annotator_id: &str, item_id: &str) -> bool {
        match (self.queues.get(annotator_id), self.by_id.get(item_id)) {
            (Some(q), Some(i)) => q.contains(i),
            _ => false,
        }
    }

    /// First queued item the annotator has not scored.
    pub fn next_for(&self, annotator_id: &str, scored: &HashSet<String>) -> Option<&SessionItem> {
        self.queue(annotator_id)
            .into_iter()
            .find(|item| !scored.contains(&item.item_id))
    }
}

fn annotator_seed(seed: u64, annotator_id: &str) -> u64 {
    let h = Sha256::digest(annotator_id.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn shuffled_queue(items: &[SessionItem], annotator: &AnnotatorSpec, seed: u64) -> Vec<usize> {
    let mut queue: Vec<usize> = items
        .iter()
        .enumerate()
        .filter(|(_, it)| {
            annotator
                .languages
                .as_ref()
                .is_none_or(|langs| langs.contains(&it.response_ref.language))
        })
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(annotator_seed(seed, &annotator.id));
    queue.shuffle(&mut rng);
    queue
}
