//! Cultural probe dataset: schema, loading, balance checks and filtering.
//!
//! A dataset is a single JSON document `{name, version, probes: [...]}`. Every
//! probe targets exactly one cultural dimension and is written in one of three
//! elicitation formats. Probes may carry several language variants, each with a
//! translation provenance state.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("{path}: cannot read dataset: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed dataset document: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: schema error at {location}: {message}")]
    Schema {
        path: String,
        location: String,
        message: String,
    },
    #[error("{path}: invariant violated at {location}: {message}")]
    Invariant {
        path: String,
        location: String,
        message: String,
    },
}

/// Hofstede dimension a probe is diagnostic for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CulturalDimension {
    /// Individualism vs. collectivism. Positive scores are individualistic.
    #[serde(rename = "IDV")]
    Idv,
    /// Power distance. Positive scores accept high power distance.
    #[serde(rename = "PDI")]
    Pdi,
}

impl CulturalDimension {
    pub const ALL: [CulturalDimension; 2] = [CulturalDimension::Idv, CulturalDimension::Pdi];

    pub fn code(self) -> &'static str {
        match self {
            CulturalDimension::Idv => "IDV",
            CulturalDimension::Pdi => "PDI",
        }
    }
}

impl fmt::Display for CulturalDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for CulturalDimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "IDV" => Ok(CulturalDimension::Idv),
            "PDI" => Ok(CulturalDimension::Pdi),
            other => Err(format!("unknown dimension code `{other}` (expected IDV or PDI)")),
        }
    }
}

/// Elicitation format of a probe; the grouping key of the probe-type ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProbeType {
    /// Value dilemma: forced choice between the two poles.
    #[serde(rename = "VDP")]
    Vdp,
    /// Scenario judgment: evaluate a character's action.
    #[serde(rename = "SJP")]
    Sjp,
    /// Stereotype association: sentence completion.
    #[serde(rename = "SAP")]
    Sap,
}

impl ProbeType {
    pub const ALL: [ProbeType; 3] = [ProbeType::Vdp, ProbeType::Sjp, ProbeType::Sap];

    pub fn code(self) -> &'static str {
        match self {
            ProbeType::Vdp => "VDP",
            ProbeType::Sjp => "SJP",
            ProbeType::Sap => "SAP",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            ProbeType::Vdp => "Value-Dilemma",
            ProbeType::Sjp => "Scenario-Judgment",
            ProbeType::Sap => "Stereotype-Association",
        }
    }
}

impl fmt::Display for ProbeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for ProbeType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "VDP" => Ok(ProbeType::Vdp),
            "SJP" => Ok(ProbeType::Sjp),
            "SAP" => Ok(ProbeType::Sap),
            other => Err(format!("unknown probe type `{other}` (expected VDP, SJP or SAP)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Translated,
    BackTranslated,
    Reconciled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocaleVariant {
    /// BCP-47 language tag, e.g. `en` or `zh-Hans`.
    pub language: String,
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_trip_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub id: String,
    pub dimension: CulturalDimension,
    pub probe_type: ProbeType,
    pub variants: Vec<LocaleVariant>,
    /// Which answer direction maps to which pole. Documentation only.
    #[serde(default)]
    pub polarity_note: String,
}

impl Probe {
    pub fn variant(&self, language: &str) -> Option<&LocaleVariant> {
        self.variants.iter().find(|v| v.language == language)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.variants.iter().map(|v| v.language.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDataset {
    pub name: String,
    pub version: String,
    pub probes: Vec<Probe>,
}

/// Non-fatal findings raised while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    pub probe_id: String,
    pub message: String,
}

impl ProbeDataset {
    pub fn probe(&self, id: &str) -> Option<&Probe> {
        self.probes.iter().find(|p| p.id == id)
    }

    /// Checks every type invariant, reporting the first violation.
    pub fn check_invariants(&self, path: &str) -> Result<Vec<LoadWarning>, ProbeError> {
        let invariant = |location: String, message: String| ProbeError::Invariant {
            path: path.to_string(),
            location,
            message,
        };
        let mut seen = HashSet::new();
        let mut warnings = Vec::new();
        for (i, probe) in self.probes.iter().enumerate() {
            let loc = format!("probes[{i}]");
            if probe.id.trim().is_empty() {
                return Err(invariant(format!("{loc}.id"), "probe id is empty".into()));
            }
            if !seen.insert(probe.id.as_str()) {
                return Err(invariant(
                    format!("{loc}.id"),
                    format!("duplicate probe id `{}`", probe.id),
                ));
            }
            if probe.variants.is_empty() {
                return Err(invariant(
                    format!("{loc}.variants"),
                    format!("probe `{}` has no language variants", probe.id),
                ));
            }
            let mut langs = HashSet::new();
            for (j, v) in probe.variants.iter().enumerate() {
                let vloc = format!("{loc}.variants[{j}]");
                if v.language.trim().is_empty() {
                    return Err(invariant(format!("{vloc}.language"), "empty language tag".into()));
                }
                if !langs.insert(v.language.as_str()) {
                    return Err(invariant(
                        format!("{vloc}.language"),
                        format!("probe `{}` has two `{}` variants", probe.id, v.language),
                    ));
                }
                if v.text.trim().is_empty() {
                    return Err(invariant(format!("{vloc}.text"), "variant text is empty".into()));
                }
                if v.provenance == Provenance::Reconciled
                    && v.round_trip_note.as_deref().is_none_or(|n| n.trim().is_empty())
                {
                    return Err(invariant(
                        format!("{vloc}.round_trip_note"),
                        "reconciled variant requires a round_trip_note".into(),
                    ));
                }
            }
            if probe.variants.len() == 1 {
                warnings.push(LoadWarning {
                    probe_id: probe.id.clone(),
                    message: format!("only one language variant ({})", probe.variants[0].language),
                });
            }
        }
        Ok(warnings)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
        s.push('\n');
        s
    }
}

/// Loads and validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<ProbeDataset, ProbeError> {
    load_dataset_with_warnings(path).map(|(ds, _)| ds)
}

pub fn load_dataset_with_warnings(
    path: impl AsRef<Path>,
) -> Result<(ProbeDataset, Vec<LoadWarning>), ProbeError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| ProbeError::Io {
        path: display.clone(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| ProbeError::Parse {
        path: display.clone(),
        message: format!("not valid UTF-8: {e}"),
    })?;
    parse_dataset(&text, &display)
}

/// Parses a dataset document. `origin` qualifies error messages.
pub fn parse_dataset(
    text: &str,
    origin: &str,
) -> Result<(ProbeDataset, Vec<LoadWarning>), ProbeError> {
    // Syntax first so that malformed JSON and schema violations are distinguishable.
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ProbeError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let ds = decode_schema(&value, origin)?;
    let warnings = ds.check_invariants(origin)?;
    Ok((ds, warnings))
}

fn decode_schema(value: &serde_json::Value, origin: &str) -> Result<ProbeDataset, ProbeError> {
    let schema = |location: String, message: String| ProbeError::Schema {
        path: origin.to_string(),
        location,
        message,
    };
    let obj = value
        .as_object()
        .ok_or_else(|| schema("$".into(), "top level must be an object".into()))?;
    for key in ["name", "version", "probes"] {
        if !obj.contains_key(key) {
            return Err(schema("$".into(), format!("missing field `{key}`")));
        }
    }
    let probes = obj["probes"]
        .as_array()
        .ok_or_else(|| schema("$.probes".into(), "must be an array".into()))?;
    // Decode probe by probe so the error names the offending index.
    let mut decoded = Vec::with_capacity(probes.len());
    for (i, p) in probes.iter().enumerate() {
        let probe: Probe = serde_json::from_value(p.clone())
            .map_err(|e| schema(format!("probes[{i}]"), e.to_string()))?;
        decoded.push(probe);
    }
    let name = obj["name"]
        .as_str()
        .ok_or_else(|| schema("$.name".into(), "must be a string".into()))?;
    let version = obj["version"]
        .as_str()
        .ok_or_else(|| schema("$.version".into(), "must be a string".into()))?;
    if let Some(extra) = obj.keys().find(|k| !matches!(k.as_str(), "name" | "version" | "probes")) {
        return Err(schema("$".into(), format!("unknown field `{extra}`")));
    }
    Ok(ProbeDataset {
        name: name.to_string(),
        version: version.to_string(),
        probes: decoded,
    })
}

pub fn save_dataset(ds: &ProbeDataset, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, ds.to_json_pretty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalancePolicy {
    /// Per-dimension counts must be equal.
    #[default]
    EqualDimensions,
    /// Report counts only.
    CountsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub total: usize,
    pub per_dimension: BTreeMap<CulturalDimension, usize>,
    pub per_dimension_type: BTreeMap<CulturalDimension, BTreeMap<ProbeType, usize>>,
    pub balanced: bool,
    /// Largest minus smallest per-dimension count.
    pub delta: usize,
}

impl fmt::Display for BalanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "probes: {}", self.total)?;
        for (dim, count) in &self.per_dimension {
            write!(f, "  {dim}: {count} (")?;
            let types = &self.per_dimension_type[dim];
            let parts: Vec<String> =
                types.iter().map(|(t, c)| format!("{t} {c}")).collect();
            writeln!(f, "{})", parts.join(", "))?;
        }
        write!(
            f,
            "balanced: {} (delta {})",
            if self.balanced { "yes" } else { "no" },
            self.delta
        )
    }
}

pub fn validate_balance(ds: &ProbeDataset, policy: BalancePolicy) -> BalanceReport {
    let mut per_dimension: BTreeMap<_, _> =
        CulturalDimension::ALL.iter().map(|d| (*d, 0usize)).collect();
    let mut per_dimension_type: BTreeMap<_, BTreeMap<_, _>> = CulturalDimension::ALL
        .iter()
        .map(|d| (*d, ProbeType::ALL.iter().map(|t| (*t, 0usize)).collect()))
        .collect();
    for p in &ds.probes {
        *per_dimension.get_mut(&p.dimension).unwrap() += 1;
        *per_dimension_type
            .get_mut(&p.dimension)
            .unwrap()
            .get_mut(&p.probe_type)
            .unwrap() += 1;
    }
    let max = per_dimension.values().copied().max().unwrap_or(0);
    let min = per_dimension.values().copied().min().unwrap_or(0);
    let delta = max - min;
    let balanced = match policy {
        BalancePolicy::EqualDimensions => delta == 0,
        BalancePolicy::CountsOnly => true,
    };
    BalanceReport {
        total: ds.probes.len(),
        per_dimension,
        per_dimension_type,
        balanced,
        delta,
    }
}

/// Conjunctive filter preserving dataset order.
pub fn filter_probes<'a>(
    ds: &'a ProbeDataset,
    dimension: Option<CulturalDimension>,
    probe_type: Option<ProbeType>,
    language: Option<&str>,
) -> Vec<&'a Probe> {
    ds.probes
        .iter()
        .filter(|p| dimension.is_none_or(|d| p.dimension == d))
        .filter(|p| probe_type.is_none_or(|t| p.probe_type == t))
        .filter(|p| language.is_none_or(|l| p.variant(l).is_some()))
        .collect()
}

/// Illustrative dataset built around the two published case-study probes.
pub const SAMPLE_DATASET_JSON: &str = include_str!("../data/sample_dataset.json");

pub fn sample_dataset() -> ProbeDataset {
    parse_dataset(SAMPLE_DATASET_JSON, "<builtin sample>")
        .expect("builtin sample dataset is valid")
        .0
}
