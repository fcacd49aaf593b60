//! Run stages over a [`RunStore`]: response collection, machine annotation
//! and analysis into a [`CulturalReport`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use chrono::Utc;

use crate::annotation::{
    build_score_sets, kappa_fully_rated, score_text, AnnotationRecord, FleissKappaResult,
    LikertScore, RunData,
};
use crate::gateway::{
    render_prompt, CacheMode, Gateway, GatewayError, ModelProfile, ModelResponse, ProviderKind,
    ReplayCache, ResponseKey, RetryPolicy,
};
use crate::metrics::{
    ablation_by_probe_type, bias_magnitude, cai, cds, concept_similarity, preference_log_ratio,
    welch_t, LexiconSet,
};
use crate::probe::{CulturalDimension, ProbeDataset};
use crate::report::{
    CulturalReport, DatasetRef, DimensionPanel, KappaPanel, PreferenceEntry, ReportAnchor,
    SimilarityEntry, TTestPanel, REPORT_FORMAT_VERSION,
};
use crate::store::{
    EmbeddingRecord, EmbeddingSubject, RunStore, StoreError, DEFAULT_PARALLELISM, REPORT_JSON_FILE,
    REPORT_MD_FILE,
};

/// Annotator id used for machine scores.
pub const AUTO_ANNOTATOR_ID: &str = "auto-lexicon";

pub const NORMALIZATION_NOTE: &str =
    "Hofstede raw scores (0 to 100) are mapped linearly onto -2 to +2 as raw / 100 * 4 - 2.";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the manifest setting.
    pub parallelism: Option<usize>,
    /// Serve from the replay cache only; any miss fails that job.
    pub replay_only: bool,
    pub retry: Option<RetryPolicy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobFailure {
    pub key: ResponseKey,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    /// Jobs needing work at start (missing responses or embeddings).
    pub planned: usize,
    pub completed: usize,
    /// Responses already present in the run store.
    pub skipped: usize,
    pub failures: Vec<JobFailure>,
    /// Cache misses that reached a provider.
    pub provider_calls: u64,
}

struct Job {
    model: usize,
    probe: usize,
    language: String,
    sample: u32,
    existing: Option<ModelResponse>,
}

enum JobResult {
    Done {
        response: Option<ModelResponse>,
        embedding: Option<EmbeddingRecord>,
    },
    Failed(JobFailure),
}

struct Caches {
    run: ReplayCache,
    replay: HashMap<String, ReplayCache>,
}

impl Caches {
    fn open(store: &RunStore) -> Result<Self, StoreError> {
        let mut replay = HashMap::new();
        for m in &store.manifest().models {
            if m.provider_kind == ProviderKind::Replay {
                let p = store.resolve(m.cache_path.as_deref().expect("validated"));
                replay.insert(m.model_id.clone(), ReplayCache::open(p, CacheMode::ReadOnly)?);
            }
        }
        Ok(Caches {
            run: store.open_cache(CacheMode::ReadWrite)?,
            replay,
        })
    }

    fn for_model(&self, profile: &ModelProfile) -> &ReplayCache {
        self.replay.get(&profile.model_id).unwrap_or(&self.run)
    }
}

/// Collects every missing response (and embedding) of the run.
///
/// Work already in the store is skipped. Per-job failures are reported in the
/// outcome; everything completed before and after a failure stays recorded.
pub fn collect_responses(store: &RunStore, options: &RunOptions) -> Result<RunOutcome, StoreError> {
    let manifest = store.manifest();
    let dataset = store.dataset()?;
    let lexicons = store.lexicons()?;
    let caches = Caches::open(store)?;
    let mut gateway = Gateway::new(options.replay_only);
    if let Some(retry) = options.retry {
        gateway = gateway.with_retry(retry);
    }

    let existing: HashMap<ResponseKey, ModelResponse> =
        store.responses()?.into_iter().map(|r| (r.key(), r)).collect();
    let prior_embeddings = store.embeddings()?;
    let embedded: HashSet<(String, ResponseKey)> = prior_embeddings
        .iter()
        .filter_map(|e| match &e.subject {
            EmbeddingSubject::Response { response_ref } => {
                Some((e.model_id.clone(), response_ref.clone()))
            }
            EmbeddingSubject::Concept { .. } => None,
        })
        .collect();
    let concepts_done: HashSet<(String, String)> = prior_embeddings
        .iter()
        .filter_map(|e| match &e.subject {
            EmbeddingSubject::Concept { concept } => Some((e.model_id.clone(), concept.clone())),
            EmbeddingSubject::Response { .. } => None,
        })
        .collect();
    let want_embeddings = |m: &ModelProfile| !manifest.concepts.is_empty() && m.supports_embeddings;

    let responses_log = store.responses_log()?;
    let embeddings_log = store.embeddings_log()?;
    let mut outcome = RunOutcome::default();

    for m in manifest.models.iter().filter(|m| want_embeddings(m)) {
        for concept in &manifest.concepts {
            if concepts_done.contains(&(m.model_id.clone(), concept.clone())) {
                continue;
            }
            let v = gateway.embed_text(m, concept, caches.for_model(m))?;
            embeddings_log.append(&EmbeddingRecord {
                model_id: m.model_id.clone(),
                subject: EmbeddingSubject::Concept {
                    concept: concept.clone(),
                },
                values: v.values,
            })?;
        }
    }

    let mut jobs = Vec::new();
    for (mi, m) in manifest.models.iter().enumerate() {
        for (pi, probe) in dataset.probes.iter().enumerate() {
            for language in &manifest.languages {
                if probe.variant(language).is_none() {
                    continue;
                }
                for sample in 0..manifest.samples {
                    let key = ResponseKey {
                        model_id: m.model_id.clone(),
                        probe_id: probe.id.clone(),
                        language: language.clone(),
                        sample,
                    };
                    let prior = existing.get(&key).cloned();
                    let needs_embedding =
                        want_embeddings(m) && !embedded.contains(&(m.model_id.clone(), key.clone()));
                    if prior.is_some() {
                        outcome.skipped += 1;
                        if !needs_embedding {
                            continue;
                        }
                    }
                    jobs.push(Job {
                        model: mi,
                        probe: pi,
                        language: language.clone(),
                        sample,
                        existing: prior,
                    });
                }
            }
        }
    }
    outcome.planned = jobs.len();

    let workers = options
        .parallelism
        .or(manifest.parallelism)
        .unwrap_or(DEFAULT_PARALLELISM)
        .max(1)
        .min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<JobResult>();

    let write_result = std::thread::scope(|scope| -> Result<(), StoreError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, gateway, caches, dataset, lexicons) =
                (&jobs, &next, &gateway, &caches, &dataset, &lexicons);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else {
                    break;
                };
                let result = run_job(store, job, gateway, caches, dataset, lexicons);
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: appends happen here, in completion order.
        for result in rx {
            match result {
                JobResult::Done {
                    response,
                    embedding,
                } => {
                    if let Some(e) = embedding {
                        embeddings_log.append(&e)?;
                    }
                    if let Some(r) = response {
                        responses_log.append(&r)?;
                    }
                    outcome.completed += 1;
                }
                JobResult::Failed(f) => {
                    tracing::warn!(probe = %f.key.probe_id, model = %f.key.model_id, error = %f.message, "job failed");
                    outcome.failures.push(f);
                }
            }
        }
        Ok(())
    });
    write_result?;
    outcome
        .failures
        .sort_by(|a, b| a.key.cmp(&b.key));
    outcome.provider_calls = gateway.provider_calls();
    Ok(outcome)
}

fn run_job(
    store: &RunStore,
    job: &Job,
    gateway: &Gateway,
    caches: &Caches,
    dataset: &ProbeDataset,
    lexicons: &LexiconSet,
) -> JobResult {
    let manifest = store.manifest();
    let profile = &manifest.models[job.model];
    let probe = &dataset.probes[job.probe];
    let key = ResponseKey {
        model_id: profile.model_id.clone(),
        probe_id: probe.id.clone(),
        language: job.language.clone(),
        sample: job.sample,
    };
    let cache = caches.for_model(profile);
    let attempt = || -> Result<(Option<ModelResponse>, Option<EmbeddingRecord>), GatewayError> {
        let (response, fresh) = match &job.existing {
            Some(r) => (r.clone(), false),
            None => {
                let mut r = gateway.query_model(
                    profile,
                    probe,
                    &job.language,
                    &manifest.params,
                    job.sample,
                    cache,
                )?;
                if manifest.preference_panel && profile.supports_logprobs {
                    if let Some(lex) = lexicons.get(probe.dimension) {
                        let prompt = render_prompt(probe, &job.language, &manifest.params)?;
                        let words: Vec<String> = lex.words().cloned().collect();
                        let lp = gateway.query_logprobs(profile, &prompt, &words, cache)?;
                        r.approximated_logprobs = lp.multi_token.union(&lp.floored).cloned().collect();
                        r.token_logprobs = Some(lp.logprobs);
                    }
                }
                (r, true)
            }
        };
        let embedding = if !manifest.concepts.is_empty() && profile.supports_embeddings {
            let v = gateway.embed_text(profile, &response.text, cache)?;
            Some(EmbeddingRecord {
                model_id: profile.model_id.clone(),
                subject: EmbeddingSubject::Response {
                    response_ref: response.key(),
                },
                values: v.values,
            })
        } else {
            None
        };
        Ok((fresh.then_some(response), embedding))
    };
    match attempt() {
        Ok((response, embedding)) => JobResult::Done {
            response,
            embedding,
        },
        Err(e) => JobResult::Failed(JobFailure {
            key,
            message: e.to_string(),
        }),
    }
}

/// Appends a lexicon-based score for every response not yet scored by
/// `annotator_id`. Returns the number of records written.
pub fn auto_annotate(store: &RunStore, annotator_id: &str) -> Result<usize, StoreError> {
    let dataset = store.dataset()?;
    let lexicons = store.lexicons()?;
    let responses = store.responses()?;
    if responses.is_empty() {
        return Err(StoreError::EmptyRun);
    }
    let done: HashSet<ResponseKey> = store
        .annotations()?
        .into_iter()
        .filter(|a| a.annotator_id == annotator_id)
        .map(|a| a.response_ref)
        .collect();
    let log = store.annotations_log()?;
    let mut written = 0;
    for r in &responses {
        let key = r.key();
        if done.contains(&key) {
            continue;
        }
        let Some(probe) = dataset.probe(&r.probe_id) else {
            continue;
        };
        let Some(lex) = lexicons.get(probe.dimension) else {
            continue;
        };
        let score: LikertScore = score_text(&r.text, lex)?;
        log.append(&AnnotationRecord {
            response_ref: key,
            annotator_id: annotator_id.to_string(),
            score,
            note: None,
            submitted_at: Utc::now(),
        })?;
        written += 1;
    }
    Ok(written)
}

fn kappa_over<'a>(
    records: impl Iterator<Item = &'a AnnotationRecord>,
) -> Option<FleissKappaResult> {
    kappa_fully_rated(records.map(|a| (a.response_ref.clone(), a.annotator_id.clone(), a.score)))
        .and_then(Result::ok)
}

/// Computes the full report from the run store. Pure in its inputs: the same
/// store contents always give the same report.
pub fn analyze(store: &RunStore, allow_partial: bool) -> Result<CulturalReport, StoreError> {
    let manifest = store.manifest();
    let dataset = store.dataset()?;
    let anchors = store.anchors()?;
    let lexicons = store.lexicons()?;
    let responses = store.responses()?;
    if responses.is_empty() {
        return Err(StoreError::EmptyRun);
    }
    let response_keys: HashSet<ResponseKey> = responses.iter().map(ModelResponse::key).collect();
    let annotations: Vec<AnnotationRecord> = store
        .annotations()?
        .into_iter()
        .filter(|a| response_keys.contains(&a.response_ref))
        .collect();

    let sets = build_score_sets(&RunData {
        dataset: &dataset,
        responses: &responses,
        annotations: &annotations,
        min_annotations: manifest.annotation.min_annotations,
        allow_partial,
    })?;
    let mut notes = vec![NORMALIZATION_NOTE.to_string()];
    if allow_partial {
        let mut raters: HashMap<&ResponseKey, HashSet<&str>> = HashMap::new();
        for a in &annotations {
            raters.entry(&a.response_ref).or_default().insert(&a.annotator_id);
        }
        let min = manifest.annotation.min_annotations;
        let below = responses
            .iter()
            .filter(|r| dataset.probe(&r.probe_id).is_some())
            .filter(|r| raters.get(&r.key()).map_or(0, HashSet::len) < min)
            .count();
        if below > 0 {
            notes.push(format!(
                "{below} response(s) below the annotation minimum of {min} were left out."
            ));
        }
    }
    let set_for = |model: &str, dim: CulturalDimension| {
        sets.iter().find(|s| s.model_id == model && s.dimension == dim)
    };
    let model_order: Vec<String> = manifest.models.iter().map(|m| m.model_id.clone()).collect();

    let mut dimension_scores = Vec::new();
    let mut cds_by: BTreeMap<(String, CulturalDimension), f64> = BTreeMap::new();
    for model in &model_order {
        for dim in CulturalDimension::ALL {
            let Some(set) = set_for(model, dim) else {
                continue;
            };
            let value = cds(set)?;
            let mut per_country = BTreeMap::new();
            for a in anchors.iter().filter(|a| a.dimension == dim) {
                per_country.insert(a.country.clone(), cai(value, dim, a)?);
            }
            cds_by.insert((model.clone(), dim), value);
            dimension_scores.push(DimensionPanel {
                model_id: model.clone(),
                dimension: dim,
                n_probes: set.scores.len(),
                cds: value,
                cai: per_country,
            });
        }
    }

    let mut t_tests = Vec::new();
    for dim in CulturalDimension::ALL {
        for (i, w) in model_order.iter().enumerate() {
            for e in &model_order[i + 1..] {
                let (Some(sw), Some(se)) = (set_for(w, dim), set_for(e, dim)) else {
                    continue;
                };
                match welch_t(&sw.values(), &se.values()) {
                    Ok(r) => t_tests.push(TTestPanel {
                        dimension: dim,
                        model_w: w.clone(),
                        model_e: e.clone(),
                        result: r.into(),
                    }),
                    Err(err) => notes.push(format!("{dim} t-test {w} vs {e} skipped: {err}")),
                }
            }
        }
    }

    let bias = model_order
        .iter()
        .filter_map(|m| {
            let idv = cds_by.get(&(m.clone(), CulturalDimension::Idv))?;
            let pdi = cds_by.get(&(m.clone(), CulturalDimension::Pdi))?;
            Some((m.clone(), bias_magnitude(*idv, *pdi)))
        })
        .collect();

    let dim_of: HashMap<&str, CulturalDimension> = dataset
        .probes
        .iter()
        .map(|p| (p.id.as_str(), p.dimension))
        .collect();
    let kappa = KappaPanel {
        pooled: kappa_over(annotations.iter()),
        per_dimension: CulturalDimension::ALL
            .into_iter()
            .map(|d| {
                let k = kappa_over(
                    annotations
                        .iter()
                        .filter(|a| dim_of.get(a.response_ref.probe_id.as_str()) == Some(&d)),
                );
                (d, k)
            })
            .collect(),
    };
    notes.push(
        "Kappa uses the responses rated by the largest number of distinct annotators.".into(),
    );

    let mut preference = Vec::new();
    for model in &model_order {
        for dim in CulturalDimension::ALL {
            let Some(lex) = lexicons.get(dim) else {
                continue;
            };
            let mut sum = 0.0;
            let mut n = 0usize;
            let mut approximated = BTreeSet::new();
            for r in responses.iter().filter(|r| {
                &r.model_id == model && dim_of.get(r.probe_id.as_str()) == Some(&dim)
            }) {
                let Some(lp) = &r.token_logprobs else {
                    continue;
                };
                match preference_log_ratio(lp, lex) {
                    Ok(v) => {
                        sum += v;
                        n += 1;
                        approximated.extend(r.approximated_logprobs.iter().cloned());
                    }
                    Err(err) => notes.push(format!(
                        "preference for {} {} {} skipped: {err}",
                        r.model_id, r.probe_id, r.language
                    )),
                }
            }
            if n > 0 {
                preference.push(PreferenceEntry {
                    model_id: model.clone(),
                    dimension: dim,
                    n_responses: n,
                    mean_log_ratio: sum / n as f64,
                    approximated_words: approximated.into_iter().collect(),
                });
            }
        }
    }

    let similarity = similarity_panel(store, &model_order, &response_keys, &mut notes)?;

    Ok(CulturalReport {
        format_version: REPORT_FORMAT_VERSION,
        run_id: manifest.run_id.clone(),
        manifest_digest: store.manifest_digest().to_string(),
        dataset: DatasetRef {
            name: dataset.name.clone(),
            version: dataset.version.clone(),
            digest: manifest.dataset.digest.to_lowercase(),
        },
        models: model_order,
        anchors: anchors.iter().map(ReportAnchor::from).collect(),
        hofstede_normalization: "linear".into(),
        dimension_scores,
        t_tests,
        bias_magnitude: bias,
        kappa,
        ablation: ablation_by_probe_type(&sets, &dataset),
        preference,
        similarity,
        notes,
    })
}

fn similarity_panel(
    store: &RunStore,
    models: &[String],
    response_keys: &HashSet<ResponseKey>,
    notes: &mut Vec<String>,
) -> Result<Vec<SimilarityEntry>, StoreError> {
    let concepts = &store.manifest().concepts;
    if concepts.is_empty() {
        return Ok(Vec::new());
    }
    let records = store.embeddings()?;
    let mut concept_vecs: HashMap<(&str, &str), &[f64]> = HashMap::new();
    let mut response_vecs: BTreeMap<(&str, &ResponseKey), &[f64]> = BTreeMap::new();
    for r in &records {
        match &r.subject {
            EmbeddingSubject::Concept { concept } => {
                concept_vecs
                    .entry((r.model_id.as_str(), concept.as_str()))
                    .or_insert(&r.values);
            }
            EmbeddingSubject::Response { response_ref } if response_keys.contains(response_ref) => {
                response_vecs
                    .entry((r.model_id.as_str(), response_ref))
                    .or_insert(&r.values);
            }
            EmbeddingSubject::Response { .. } => {}
        }
    }
    let mut out = Vec::new();
    for model in models {
        for concept in concepts {
            let Some(cv) = concept_vecs.get(&(model.as_str(), concept.as_str())) else {
                continue;
            };
            let mut sum = 0.0;
            let mut n = 0usize;
            for (_, rv) in response_vecs.iter().filter(|((m, _), _)| *m == model.as_str()) {
                match concept_similarity(rv, cv) {
                    Ok(c) => {
                        sum += c;
                        n += 1;
                    }
                    Err(e) => notes.push(format!("similarity for {model} / {concept} skipped: {e}")),
                }
            }
            if n > 0 {
                out.push(SimilarityEntry {
                    model_id: model.clone(),
                    concept: concept.clone(),
                    n_responses: n,
                    mean_cosine: sum / n as f64,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Json,
    Markdown,
    #[default]
    Both,
}

/// Writes the report files requested by `format` into the run directory.
pub fn write_report(
    store: &RunStore,
    report: &CulturalReport,
    format: ReportFormat,
) -> Result<(), StoreError> {
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let p = store.file(REPORT_JSON_FILE);
        std::fs::write(&p, report.to_canonical_json()).map_err(|source| StoreError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    if matches!(format, ReportFormat::Markdown | ReportFormat::Both) {
        let p = store.file(REPORT_MD_FILE);
        std::fs::write(&p, report.to_markdown()).map_err(|source| StoreError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Re-renders `report.md` from an existing `report.json` without recomputing.
pub fn rerender_report(dir: &std::path::Path) -> Result<CulturalReport, StoreError> {
    let p = dir.join(REPORT_JSON_FILE);
    let text = std::fs::read_to_string(&p).map_err(|source| StoreError::Io {
        path: p.display().to_string(),
        source,
    })?;
    let report = CulturalReport::from_json(&text).map_err(|e| StoreError::Report {
        path: p.display().to_string(),
        message: e.to_string(),
    })?;
    let md = dir.join(REPORT_MD_FILE);
    std::fs::write(&md, report.to_markdown()).map_err(|source| StoreError::Io {
        path: md.display().to_string(),
        source,
    })?;
    Ok(report)
}
