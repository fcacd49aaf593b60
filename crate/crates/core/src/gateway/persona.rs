//! Offline "cultural persona" provider with planted bias.
//!
//! For a probe on dimension D with type T, the persona draws a latent pole
//! score
//!
//! ```text
//! latent = clamp(bias_D * gain_T + noise_sd * z, -2, 2),   z ~ N(0, 1)
//! ```
//!
//! where `z` comes from a ChaCha8 stream seeded by (seed, probe id, language,
//! sample). The latent is rounded to a Likert level and the response text is
//! assembled from a labeled template bank so that the pole-keyword balance of
//! the text encodes that level: level +2 uses three pole-A sentences, +1 two
//! pole-A and one pole-B, 0 one of each, and symmetrically below zero. The
//! level is recorded as the response's hidden ground truth.
//!
//! Token log-probabilities follow
//!
//! ```text
//! log P(w) = PERSONA_LOGIT_SCALE * bias_D(w) * polarity(w) - PERSONA_LOG_VOCAB
//! ```
//!
//! with polarity +1/−1 for pole-A/pole-B words of the built-in lexicons and 0
//! for any other word, so for equal-size poles the preference log-ratio equals
//! `2 * PERSONA_LOGIT_SCALE * bias_D`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::LexiconSet;
use crate::probe::{CulturalDimension, Probe, ProbeType};

pub const PERSONA_LOGIT_SCALE: f64 = 0.5;
/// ln of the nominal vocabulary size that absorbs the remaining probability mass.
pub const PERSONA_LOG_VOCAB: f64 = 10.819_778_284_410_283; // ln(50_000)
pub const SYNTHETIC_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaConfig {
    pub idv_bias: f64,
    pub pdi_bias: f64,
    pub noise_sd: f64,
    /// Mandatory: there is no implicit default seed.
    pub seed: u64,
    /// Multiplier on the bias per probe type; missing types use 1.0.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub type_gain: BTreeMap<ProbeType, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonaOutput {
    pub text: String,
    pub latent: f64,
    pub level: i8,
}

impl PersonaConfig {
    pub fn new(idv_bias: f64, pdi_bias: f64, noise_sd: f64, seed: u64) -> Self {
        PersonaConfig {
            idv_bias,
            pdi_bias,
            noise_sd,
            seed,
            type_gain: BTreeMap::new(),
        }
    }

    pub fn with_type_gain(mut self, probe_type: ProbeType, gain: f64) -> Self {
        self.type_gain.insert(probe_type, gain);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, b) in [("idv_bias", self.idv_bias), ("pdi_bias", self.pdi_bias)] {
            if !(-2.0..=2.0).contains(&b) {
                return Err(format!("{name} {b} outside [-2, 2]"));
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(format!("noise_sd {} must be finite and non-negative", self.noise_sd));
        }
        if let Some((t, g)) = self.type_gain.iter().find(|(_, g)| !(g.is_finite() && **g >= 0.0)) {
            return Err(format!("type_gain for {t} must be finite and non-negative, got {g}"));
        }
        Ok(())
    }

    pub fn bias(&self, dimension: CulturalDimension) -> f64 {
        match dimension {
            CulturalDimension::Idv => self.idv_bias,
            CulturalDimension::Pdi => self.pdi_bias,
        }
    }

    fn gain(&self, probe_type: ProbeType) -> f64 {
        self.type_gain.get(&probe_type).copied().unwrap_or(1.0)
    }

    fn rng_for(&self, probe_id: &str, language: &str, sample: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for part in [probe_id.as_bytes(), language.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(sample.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    pub fn respond(&self, probe: &Probe, language: &str, sample: u32) -> PersonaOutput {
        let mut rng = self.rng_for(&probe.id, language, sample);
        let z: f64 = rng.sample(StandardNormal);
        let latent = (self.bias(probe.dimension) * self.gain(probe.probe_type) + self.noise_sd * z)
            .clamp(-2.0, 2.0);
        let level = latent.round() as i8;
        let text = TemplateBank::builtin().compose(probe.dimension, language, level, &mut rng);
        PersonaOutput {
            text,
            latent,
            level,
        }
    }

    /// Analytic next-token log-probabilities; see the module docs.
    pub fn logprobs(&self, words: &[String]) -> BTreeMap<String, f64> {
        let lexicons = builtin_lexicons();
        words
            .iter()
            .map(|w| {
                let logit = CulturalDimension::ALL
                    .iter()
                    .find_map(|d| {
                        let lex = lexicons.get(*d)?;
                        match lex.polarity(w) {
                            0 => None,
                            p => Some(PERSONA_LOGIT_SCALE * self.bias(*d) * f64::from(p)),
                        }
                    })
                    .unwrap_or(0.0);
                (w.clone(), logit - PERSONA_LOG_VOCAB)
            })
            .collect()
    }
}

fn builtin_lexicons() -> &'static LexiconSet {
    static LEX: OnceLock<LexiconSet> = OnceLock::new();
    LEX.get_or_init(LexiconSet::builtin)
}

/// Labeled sentences used to assemble persona responses.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoleSentences {
    pub pole_a: Vec<String>,
    pub pole_b: Vec<String>,
    pub openers: Vec<String>,
    pub closers: Vec<String>,
    #[serde(default = "default_joiner")]
    pub joiner: String,
}

fn default_joiner() -> String {
    " ".into()
}

#[derive(Debug, Clone, Deserialize)]
pub struct TemplateBank(pub BTreeMap<CulturalDimension, BTreeMap<String, PoleSentences>>);

pub const TEMPLATE_BANK_JSON: &str = include_str!("../../data/persona_bank.json");
const FALLBACK_LANGUAGE: &str = "en";

impl TemplateBank {
    pub fn builtin() -> &'static TemplateBank {
        static BANK: OnceLock<TemplateBank> = OnceLock::new();
        BANK.get_or_init(|| serde_json::from_str(TEMPLATE_BANK_JSON).expect("builtin bank parses"))
    }

    pub fn sentences(&self, dimension: CulturalDimension, language: &str) -> &PoleSentences {
        let langs = &self.0[&dimension];
        langs
            .get(language)
            .unwrap_or_else(|| &langs[FALLBACK_LANGUAGE])
    }

    /// Pole-A and pole-B sentence counts encoding a Likert level.
    pub fn mix(level: i8) -> (usize, usize) {
        match level {
            2.. => (3, 0),
            1 => (2, 1),
            0 => (1, 1),
            -1 => (1, 2),
            _ => (0, 3),
        }
    }

    fn compose(
        &self,
        dimension: CulturalDimension,
        language: &str,
        level: i8,
        rng: &mut ChaCha8Rng,
    ) -> String {
        let bank = self.sentences(dimension, language);
        let (na, nb) = Self::mix(level);
        let pick = |pool: &[String], n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            rand::seq::index::sample(rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        };
        let mut body = pick(&bank.pole_a, na, rng);
        body.extend(pick(&bank.pole_b, nb, rng));
        // Fisher–Yates over the body so pole order carries no signal
        for i in (1..body.len()).rev() {
            let j = rng.random_range(0..=i);
            body.swap(i, j);
        }
        let opener = &bank.openers[rng.random_range(0..bank.openers.len())];
        let closer = &bank.closers[rng.random_range(0..bank.closers.len())];
        let mut parts = vec![opener.clone()];
        parts.extend(body);
        parts.push(closer.clone());
        parts.join(&bank.joiner)
    }
}

/// Hashed bag-of-tokens embedding; texts sharing tokens point in similar directions.
pub fn synthetic_embedding(text: &str) -> Vec<f64> {
    let mut acc = vec![0.0; SYNTHETIC_EMBEDDING_DIM];
    let tokens = tokenize(text);
    let fallback = [text.to_string()];
    let tokens: &[String] = if tokens.is_empty() { &fallback } else { &tokens };
    for tok in tokens {
        let mut rng = ChaCha8Rng::from_seed(Sha256::digest(tok.as_bytes()).into());
        for v in acc.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
    }
    acc
}

/// Lowercased ASCII alphanumeric runs; every other alphanumeric char is its own token.
fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if c.is_alphanumeric() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::count_pole_keywords;
    use crate::probe::sample_dataset;

    #[test]
    fn log_vocab_constant() {
        assert!((PERSONA_LOG_VOCAB - 50_000f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn every_bank_sentence_carries_exactly_its_pole() {
        let lexicons = LexiconSet::builtin();
        let bank = TemplateBank::builtin();
        for (dim, langs) in &bank.0 {
            let lex = lexicons.get(*dim).unwrap();
            for (lang, s) in langs {
                assert!(s.pole_a.len() >= 3 && s.pole_b.len() >= 3, "{dim}/{lang}");
                for text in &s.pole_a {
                    assert_eq!(count_pole_keywords(text, lex), (1, 0), "{dim}/{lang}: {text}");
                }
                for text in &s.pole_b {
                    assert_eq!(count_pole_keywords(text, lex), (0, 1), "{dim}/{lang}: {text}");
                }
                for text in s.openers.iter().chain(&s.closers) {
                    for other in lexicons.0.values() {
                        assert_eq!(count_pole_keywords(text, other), (0, 0), "{lang}: {text}");
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_per_probe() {
        let ds = sample_dataset();
        let probe = ds.probe("idv-vdp-001").unwrap();
        let persona = PersonaConfig::new(2.0, 0.0, 0.0, 1);
        let a = persona.respond(probe, "en", 0);
        let b = persona.respond(probe, "en", 0);
        assert_eq!(a, b);
        assert_eq!(a.level, 2);
        let bank = TemplateBank::builtin().sentences(CulturalDimension::Idv, "en");
        assert!(bank.pole_a.iter().any(|s| a.text.contains(s.as_str())));
        assert!(!bank.pole_b.iter().any(|s| a.text.contains(s.as_str())));
    }

    #[test]
    fn noise_free_levels_round_the_bias() {
        let ds = sample_dataset();
        let probe = ds.probe("pdi-sjp-001").unwrap();
        for (bias, level) in [(-2.0, -2), (-1.2, -1), (0.3, 0), (0.5, 1), (1.6, 2)] {
            let p = PersonaConfig::new(0.0, bias, 0.0, 9);
            assert_eq!(p.respond(probe, "zh-Hans", 0).level, level, "bias {bias}");
        }
    }

    #[test]
    fn type_gain_scales_the_latent() {
        let ds = sample_dataset();
        let sap = ds.probe("idv-sap-001").unwrap();
        let p = PersonaConfig::new(1.0, 0.0, 0.0, 3).with_type_gain(ProbeType::Sap, 0.4);
        assert!((p.respond(sap, "en", 0).latent - 0.4).abs() < 1e-15);
        let vdp = ds.probe("idv-vdp-001").unwrap();
        assert_eq!(p.respond(vdp, "en", 0).latent, 1.0);
    }

    #[test]
    fn unknown_language_falls_back_to_english_bank() {
        let mut probe = sample_dataset().probe("idv-vdp-001").unwrap().clone();
        probe.variants[0].language = "fr".into();
        let out = PersonaConfig::new(-2.0, 0.0, 0.0, 5).respond(&probe, "fr", 0);
        let bank = TemplateBank::builtin().sentences(CulturalDimension::Idv, "en");
        assert!(bank.pole_b.iter().any(|s| out.text.contains(s.as_str())));
    }

    #[test]
    fn logprob_formula() {
        let words = vec!["freedom".to_string(), "harmony".to_string(), "banana".to_string()];
        let neutral = PersonaConfig::new(0.0, 0.0, 0.0, 1).logprobs(&words);
        assert_eq!(neutral["freedom"], neutral["harmony"]);
        let ind = PersonaConfig::new(2.0, 0.0, 0.0, 1).logprobs(&words);
        assert!((ind["freedom"] - (1.0 - PERSONA_LOG_VOCAB)).abs() < 1e-15);
        assert!((ind["harmony"] - (-1.0 - PERSONA_LOG_VOCAB)).abs() < 1e-15);
        assert_eq!(ind["banana"], -PERSONA_LOG_VOCAB);
    }

    #[test]
    fn embeddings_are_deterministic_and_token_based() {
        let a = synthetic_embedding("group harmony");
        assert_eq!(a, synthetic_embedding("group harmony"));
        assert_eq!(a, synthetic_embedding("Group, HARMONY!"));
        assert_eq!(a.len(), SYNTHETIC_EMBEDDING_DIM);
        assert_ne!(a, synthetic_embedding("personal freedom"));
        assert_eq!(tokenize("团队和谐 ok"), ["团", "队", "和", "谐", "ok"]);
    }

    #[test]
    fn validation() {
        assert!(PersonaConfig::new(2.1, 0.0, 0.0, 1).validate().is_err());
        assert!(PersonaConfig::new(0.0, 0.0, -0.1, 1).validate().is_err());
        assert!(PersonaConfig::new(0.0, 0.0, 0.0, 1)
            .with_type_gain(ProbeType::Vdp, f64::NAN)
            .validate()
            .is_err());
        assert!(serde_json::from_str::<PersonaConfig>(
            r#"{"idv_bias":1,"pdi_bias":0,"noise_sd":0}"#
        )
        .is_err());
    }
}
