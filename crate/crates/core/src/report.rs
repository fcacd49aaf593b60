//! Run report: the computed panels plus canonical JSON and markdown renderings.
//!
//! Canonical JSON sorts object keys, prints every real with six fixed
//! decimals and integers verbatim, indents by two spaces and ends with a
//! newline. Non-finite reals are written as `null`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::annotation::FleissKappaResult;
use crate::metrics::{AblationTable, HofstedeAnchor, TTestResult};
use crate::probe::{CulturalDimension, ProbeType};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub version: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionPanel {
    pub model_id: String,
    pub dimension: CulturalDimension,
    pub n_probes: usize,
    pub cds: f64,
    /// Alignment per anchor country.
    pub cai: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestPanel {
    pub dimension: CulturalDimension,
    pub model_w: String,
    pub model_e: String,
    #[serde(flatten)]
    pub result: ReportTTest,
}

/// [`TTestResult`] with nullable reals, as stored in report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTTest {
    #[serde(deserialize_with = "nullable_f64")]
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_two_tailed: f64,
    pub mean_w: f64,
    pub mean_e: f64,
    pub variance_w: f64,
    pub variance_e: f64,
    pub n_w: usize,
    pub n_e: usize,
    pub degenerate: bool,
}

impl From<TTestResult> for ReportTTest {
    fn from(r: TTestResult) -> Self {
        ReportTTest {
            t_statistic: r.t_statistic,
            degrees_of_freedom: r.degrees_of_freedom,
            p_two_tailed: r.p_two_tailed,
            mean_w: r.mean_w,
            mean_e: r.mean_e,
            variance_w: r.variance_w,
            variance_e: r.variance_e,
            n_w: r.n_w,
            n_e: r.n_e,
            degenerate: r.degenerate,
        }
    }
}

fn nullable_f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KappaPanel {
    /// Over all fully rated responses; `None` with fewer than two raters.
    pub pooled: Option<FleissKappaResult>,
    pub per_dimension: BTreeMap<CulturalDimension, Option<FleissKappaResult>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEntry {
    pub model_id: String,
    pub dimension: CulturalDimension,
    pub n_responses: usize,
    pub mean_log_ratio: f64,
    /// Lexicon words scored from a partial token or a floor value.
    pub approximated_words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub model_id: String,
    pub concept: String,
    pub n_responses: usize,
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CulturalReport {
    pub format_version: u32,
    pub run_id: String,
    pub manifest_digest: String,
    pub dataset: DatasetRef,
    /// Manifest order; t-tests compare earlier models against later ones.
    pub models: Vec<String>,
    pub anchors: Vec<ReportAnchor>,
    pub hofstede_normalization: String,
    pub dimension_scores: Vec<DimensionPanel>,
    pub t_tests: Vec<TTestPanel>,
    pub bias_magnitude: BTreeMap<String, f64>,
    pub kappa: KappaPanel,
    pub ablation: AblationTable,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preference: Vec<PreferenceEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub similarity: Vec<SimilarityEntry>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAnchor {
    pub country: String,
    pub dimension: CulturalDimension,
    pub raw_score: f64,
    pub normalized: f64,
}

impl From<&HofstedeAnchor> for ReportAnchor {
    fn from(a: &HofstedeAnchor) -> Self {
        ReportAnchor {
            country: a.country.clone(),
            dimension: a.dimension,
            raw_score: a.raw_score,
            normalized: a.normalized,
        }
    }
}

impl CulturalReport {
    pub fn panel(&self, model_id: &str, dimension: CulturalDimension) -> Option<&DimensionPanel> {
        self.dimension_scores
            .iter()
            .find(|p| p.model_id == model_id && p.dimension == dimension)
    }

    pub fn t_test(&self, dimension: CulturalDimension) -> Option<&TTestPanel> {
        self.t_tests.iter().find(|t| t.dimension == dimension)
    }

    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        canonical_json(&value)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_markdown(&self) -> String {
        render_markdown(self)
    }
}

/// Canonical rendering of a JSON value; see the module docs.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, value: &Value, indent: usize) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fixed6(n.as_f64().expect("f64 number")));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, indent + 1);
                write_value(out, item, indent + 1);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(out, indent + 1);
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push_str(": ");
                write_value(out, &map[*k], indent + 1);
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

fn pad(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}

fn fixed6(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn num(x: f64, decimals: usize) -> String {
    if x.is_finite() {
        let s = format!("{x:.decimals$}");
        if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
            s[1..].to_string()
        } else {
            s
        }
    } else if x.is_nan() {
        "n/a".into()
    } else if x > 0.0 {
        "+inf".into()
    } else {
        "-inf".into()
    }
}

fn p_value(p: f64) -> String {
    if p > 0.0 && p < 0.001 {
        format!("{p:.2e}")
    } else {
        num(p, 4)
    }
}

fn kappa_text(k: &Option<FleissKappaResult>) -> String {
    match k {
        None => "insufficient overlap (fewer than two raters per item)".into(),
        Some(r) => match r.kappa {
            Some(v) => format!(
                "κ = {} over {} items × {} raters",
                num(v, 3),
                r.n_items,
                r.n_raters
            ),
            None => format!(
                "undefined (all ratings in one category; {} items × {} raters)",
                r.n_items, r.n_raters
            ),
        },
    }
}

fn render_markdown(r: &CulturalReport) -> String {
    let mut md = String::new();
    let countries: Vec<String> = {
        let mut c: Vec<String> = r.anchors.iter().map(|a| a.country.clone()).collect();
        c.sort();
        c.dedup();
        c
    };
    let _ = writeln!(md, "# Cultural value report: {}\n", r.run_id);
    let _ = writeln!(
        md,
        "Dataset `{}` v{} (sha256 `{}`), manifest sha256 `{}`.\n",
        r.dataset.name,
        r.dataset.version,
        short(&r.dataset.digest),
        short(&r.manifest_digest)
    );

    let _ = writeln!(md, "## Cultural Dimension Scores and Alignment\n");
    let _ = writeln!(
        md,
        "CDS is on a scale from -2 to +2. CAI is on a scale from 0 to 1 (columns: {}).\n",
        countries.join(" / ")
    );
    let mut header = String::from("| Dimension |");
    let mut rule = String::from("|---|");
    for m in &r.models {
        let _ = write!(header, " CDS {m} |");
        rule.push_str("---:|");
    }
    for m in &r.models {
        let _ = write!(header, " CAI {m} |");
        rule.push_str("---:|");
    }
    let _ = writeln!(md, "{header}\n{rule}");
    for dim in CulturalDimension::ALL {
        let mut row = format!("| {dim} |");
        for m in &r.models {
            let cell = r.panel(m, dim).map_or("n/a".into(), |p| num(p.cds, 2));
            let _ = write!(row, " {cell} |");
        }
        for m in &r.models {
            let cell = r.panel(m, dim).map_or("n/a".into(), |p| {
                countries
                    .iter()
                    .map(|c| p.cai.get(c).map_or("n/a".into(), |v| num(*v, 2)))
                    .collect::<Vec<_>>()
                    .join(" / ")
            });
            let _ = write!(row, " {cell} |");
        }
        let _ = writeln!(md, "{row}");
    }

    if !r.t_tests.is_empty() {
        let _ = writeln!(md, "\n## Significance (Welch's t-test)\n");
        let _ = writeln!(md, "| Dimension | Comparison | t | df | p (two-tailed) |\n|---|---|---:|---:|---:|");
        for t in &r.t_tests {
            let _ = writeln!(
                md,
                "| {} | {} vs {} | {} | {} | {}{} |",
                t.dimension,
                t.model_w,
                t.model_e,
                num(t.result.t_statistic, 3),
                num(t.result.degrees_of_freedom, 1),
                p_value(t.result.p_two_tailed),
                if t.result.degenerate { " (degenerate)" } else { "" }
            );
        }
    }

    if !r.bias_magnitude.is_empty() {
        let _ = writeln!(md, "\n## Bias Magnitude\n\n| Model | BiasMag |\n|---|---:|");
        for m in &r.models {
            if let Some(b) = r.bias_magnitude.get(m) {
                let _ = writeln!(md, "| {m} | {} |", num(*b, 3));
            }
        }
    }

    let _ = writeln!(md, "\n## Inter-Annotator Agreement (Fleiss' Kappa)\n");
    let _ = writeln!(md, "- pooled: {}", kappa_text(&r.kappa.pooled));
    for (dim, k) in &r.kappa.per_dimension {
        let _ = writeln!(md, "- {dim}: {}", kappa_text(k));
    }

    let _ = writeln!(md, "\n## Mean Absolute CDS by Probe Type\n");
    let mut header = String::from("| Probe Type |");
    let mut rule = String::from("|---|");
    for m in &r.models {
        let _ = write!(header, " Mean Abs. CDS ({m}) |");
        rule.push_str("---:|");
    }
    let _ = writeln!(md, "{header}\n{rule}");
    for t in ProbeType::ALL {
        let Some(row) = r.ablation.rows.get(&t) else {
            continue;
        };
        let mut line = format!("| {} ({}) |", t.long_name(), t.code());
        for m in &r.models {
            let cell = row.get(m).map_or("n/a".into(), |v| num(*v, 2));
            let _ = write!(line, " {cell} |");
        }
        let _ = writeln!(md, "{line}");
    }

    if !r.preference.is_empty() {
        let _ = writeln!(md, "\n## Pole Preference (log-probability ratio)\n");
        let _ = writeln!(md, "| Model | Dimension | Responses | Mean ln ratio | Approximated words |\n|---|---|---:|---:|---|");
        for p in &r.preference {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                p.model_id,
                p.dimension,
                p.n_responses,
                num(p.mean_log_ratio, 3),
                if p.approximated_words.is_empty() {
                    "none".to_string()
                } else {
                    p.approximated_words.join(", ")
                }
            );
        }
    }

    if !r.similarity.is_empty() {
        let _ = writeln!(md, "\n## Concept Similarity\n");
        let _ = writeln!(md, "| Model | Concept | Responses | Mean cosine |\n|---|---|---:|---:|");
        for s in &r.similarity {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                s.model_id,
                s.concept,
                s.n_responses,
                num(s.mean_cosine, 3)
            );
        }
    }

    if !r.notes.is_empty() {
        let _ = writeln!(md, "\n## Notes\n");
        for n in &r.notes {
            let _ = writeln!(md, "- {n}");
        }
    }
    md
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}
