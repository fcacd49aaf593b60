//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cprobe_core::annotation::{fleiss_kappa, AnnotationRecord, CountMatrix, DimensionScoreSet, LikertScore, ProbeScore};
use cprobe_core::gateway::{ModelProfile, PersonaConfig};
use cprobe_core::metrics::{
    bias_magnitude, cai, cds, concept_similarity, preference_log_ratio, welch_t, HofstedeAnchor,
    TargetLexicon,
};
use cprobe_core::pipeline::{analyze, auto_annotate, collect_responses, RunOptions, AUTO_ANNOTATOR_ID};
use cprobe_core::probe::{CulturalDimension, ProbeType};
use cprobe_core::report::CulturalReport;
use cprobe_core::store::{RunStore, ANNOTATIONS_FILE, REPORT_JSON_FILE, RESPONSES_FILE};

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------- oracles

/// Two-tailed Student t p-value by quadrature, independent of the library's
/// incomplete beta. With x = sqrt(df)·tan(θ) the density becomes cos^(df-1)(θ),
/// so p = ∫[θ0, π/2] / ∫[0, π/2] with θ0 = atan(|t| / sqrt(df)).
fn oracle_p(t: f64, df: f64) -> f64 {
    let f = |th: f64| th.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    };
    let theta0 = (t.abs() / df.sqrt()).atan();
    simpson(theta0, FRAC_PI_2, 20_000) / simpson(0.0, FRAC_PI_2, 20_000)
}

fn oracle_welch(w: &[f64], e: &[f64]) -> (f64, f64) {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
    };
    let (a, b) = (var(w) / w.len() as f64, var(e) / e.len() as f64);
    let t = (mean(w) - mean(e)) / (a + b).sqrt();
    let df = (a + b).powi(2) / (a * a / (w.len() - 1) as f64 + b * b / (e.len() - 1) as f64);
    (t, df)
}

// ---------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 60;

    for _ in 0..cases {
        let n = rng.random_range(1..40);
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-2..=2) as f64).collect();
        let set = DimensionScoreSet {
            model_id: "m".into(),
            dimension: CulturalDimension::Idv,
            scores: vals
                .iter()
                .enumerate()
                .map(|(i, v)| ProbeScore {
                    probe_id: i.to_string(),
                    final_score: *v,
                })
                .collect(),
        };
        let oracle = vals.iter().rev().fold(0.0, |a, v| a + v) / n as f64;
        check(close(cds(&set).map_err(|e| e.to_string())?, oracle, 1e-12), "CDS")?;
    }

    for _ in 0..cases {
        let c: f64 = rng.random_range(-2.0..2.0);
        let raw: f64 = rng.random_range(0.0..=100.0);
        let anchor = HofstedeAnchor::new("X", CulturalDimension::Pdi, raw).map_err(|e| e.to_string())?;
        let h = 4.0 * raw / 100.0 - 2.0;
        let oracle = 1.0 / (1.0 + (c - h).abs());
        let got = cai(c, CulturalDimension::Pdi, &anchor).map_err(|e| e.to_string())?;
        check(close(got, oracle, 1e-12), format!("CAI({c}, {raw})"))?;
    }

    let words = |p: &str, n: usize| -> Vec<String> { (0..n).map(|i| format!("{p}{i}")).collect() };
    for _ in 0..cases {
        let (na, nb) = (rng.random_range(1..6), rng.random_range(1..6));
        let lex = TargetLexicon::new("t", words("a", na), words("b", nb)).map_err(|e| e.to_string())?;
        let mut lp = BTreeMap::new();
        for w in lex.words() {
            lp.insert(w.clone(), rng.random_range(-30.0..-0.01));
        }
        // log-sum-exp per pole
        let lse = |ws: &[String]| {
            let m = ws.iter().map(|w| lp[w]).fold(f64::NEG_INFINITY, f64::max);
            m + ws.iter().map(|w| (lp[w] - m).exp()).sum::<f64>().ln()
        };
        let oracle = lse(&words("a", na)) - lse(&words("b", nb));
        let got = preference_log_ratio(&lp, &lex).map_err(|e| e.to_string())?;
        check(close(got, oracle, 1e-12), "preference")?;
    }

    for _ in 0..cases {
        let d = rng.random_range(2..64);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nb) = (norm(&a), norm(&b));
        let oracle: f64 = a.iter().zip(&b).map(|(x, y)| (x / na) * (y / nb)).sum();
        let got = concept_similarity(&a, &b).map_err(|e| e.to_string())?;
        check(close(got, oracle, 1e-12), "cosine")?;
    }

    for _ in 0..cases {
        let (x, y): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        check(close(bias_magnitude(x, y), (x * x + y * y).sqrt(), 1e-12), "BiasMag")?;
    }

    // frozen high-precision values
    let usa_idv = HofstedeAnchor::new("USA", CulturalDimension::Idv, 91.0).map_err(|e| e.to_string())?;
    check(
        close(cai(1.21, CulturalDimension::Idv, &usa_idv).unwrap(), 0.6993006993006993007, 1e-12),
        "CAI fixture",
    )?;
    check(close(bias_magnitude(1.21, -1.05), 1.6020611723651503564, 1e-12), "BiasMag fixture")?;
    check(
        close(concept_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 0.97463184619707627108, 1e-12),
        "cosine fixture",
    )?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("5 formulas x {cases} cases within 1e-12, BiasMag(1.21,-1.05)=1.602061, {elapsed:.1?}"))
}

fn criterion_2() -> Outcome {
    let s = |v| LikertScore::new(v).unwrap();
    let unanimous = CountMatrix::likert(vec![vec![s(2); 3], vec![s(-1); 3], vec![s(0); 3]]);
    let k = fleiss_kappa(&unanimous).map_err(|e| e.to_string())?;
    check(k.kappa == Some(1.0), format!("unanimous kappa {:?}", k.kappa))?;

    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let random = CountMatrix::likert(
        (0..500).map(|_| (0..3).map(|_| LikertScore::ALL[rng.random_range(0..5)]).collect::<Vec<_>>()),
    );
    let kr = fleiss_kappa(&random).map_err(|e| e.to_string())?.kappa.unwrap();
    check(kr.abs() < 0.1, format!("uniform kappa {kr}"))?;

    let fixture = CountMatrix::likert(vec![
        vec![s(2), s(2), s(1)],
        vec![s(0), s(0), s(0)],
        vec![s(-1), s(-2), s(-1)],
        vec![s(1), s(0), s(-1)],
    ]);
    let kf = fleiss_kappa(&fixture).map_err(|e| e.to_string())?.kappa.unwrap();
    check((kf - 13.0 / 55.0).abs() < 1e-12, format!("fixture kappa {kf}"))?;
    Ok(format!("unanimous=1, uniform 500x3 kappa={kr:.4}, fixture={kf:.12}"))
}

fn criterion_3() -> Outcome {
    let same = [0.5, 1.5, -0.5, 2.0];
    let r = welch_t(&same, &same).map_err(|e| e.to_string())?;
    check(r.t_statistic == 0.0 && r.p_two_tailed == 1.0, "identical samples")?;

    // (w, e, t, df, p) with t/df/p frozen from an arbitrary-precision computation
    let fixtures: [(&[f64], &[f64], f64, f64, f64); 3] = [
        (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], -1.0, 8.0, 0.34659350708733424783),
        (
            &[1.2, 2.4, 1.9, 3.3],
            &[0.1, -0.4, 0.8, 0.3, -1.1, 0.2],
            4.2930037532309776692,
            5.1881908559581904093,
            0.0071462591461430237009,
        ),
        (
            &[-2.0, -1.0, 0.0, 1.0, 2.0, 2.0],
            &[1.0, 1.0, 2.0, 2.0, 2.0],
            -1.783428366962941892,
            6.2976565125729475389,
            0.12244663379835862783,
        ),
    ];
    for (w, e, t, df, p) in fixtures {
        let r = welch_t(w, e).map_err(|e| e.to_string())?;
        let (ot, odf) = oracle_welch(w, e);
        let op = oracle_p(ot, odf);
        check(close(r.t_statistic, ot, 1e-9) && close(r.degrees_of_freedom, odf, 1e-9), "t/df vs oracle")?;
        check((r.p_two_tailed - op).abs() < 1e-6, format!("p {} vs quadrature {op}", r.p_two_tailed))?;
        check(close(r.t_statistic, t, 1e-9) && close(r.degrees_of_freedom, df, 1e-9), "t/df frozen")?;
        check((r.p_two_tailed - p).abs() < 1e-6, "p frozen")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200 {
        let nw = rng.random_range(2..30);
        let ne = rng.random_range(2..30);
        let w: Vec<f64> = (0..nw).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = (0..ne).map(|_| rng.random_range(-2.0..2.0)).collect();
        let base = welch_t(&w, &e).map_err(|e| e.to_string())?;
        let swapped = welch_t(&e, &w).map_err(|e| e.to_string())?;
        check(
            close(base.t_statistic, -swapped.t_statistic, 1e-9) && close(base.p_two_tailed, swapped.p_two_tailed, 1e-9),
            format!("antisymmetry case {i}"),
        )?;
        let c: f64 = rng.random_range(-10.0..10.0);
        let k: f64 = rng.random_range(0.1..10.0);
        let tw: Vec<f64> = w.iter().map(|x| k * x + c).collect();
        let te: Vec<f64> = e.iter().map(|x| k * x + c).collect();
        let moved = welch_t(&tw, &te).map_err(|e| e.to_string())?;
        check(
            close(base.t_statistic, moved.t_statistic, 1e-9)
                && close(base.degrees_of_freedom, moved.degrees_of_freedom, 1e-9)
                && close(base.p_two_tailed, moved.p_two_tailed, 1e-9),
            format!("shift/scale case {i}"),
        )?;
    }
    Ok("identical -> t=0,p=1; 3 fixtures match quadrature oracle; 200 antisymmetry + shift/scale cases".into())
}

/// Builds, runs and auto-annotates a synthetic two-persona study.
fn synthetic_study(dir: &Path, w: PersonaConfig, e: PersonaConfig) -> Result<(RunStore, u64), String> {
    let dataset = synthetic_dataset(100);
    write_run(
        dir,
        &dataset,
        vec![ModelProfile::synthetic("persona-w", w), ModelProfile::synthetic("persona-e", e)],
        |_| {},
    );
    let store = RunStore::open(dir).map_err(|e| e.to_string())?;
    let outcome = collect_responses(&store, &RunOptions::default()).map_err(|e| e.to_string())?;
    check(outcome.failures.is_empty(), format!("{} failed jobs", outcome.failures.len()))?;
    auto_annotate(&store, AUTO_ANNOTATOR_ID).map_err(|e| e.to_string())?;
    Ok((store, outcome.provider_calls))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (store, calls) = synthetic_study(dir.path(), persona_w(101), persona_e(202))?;
    let report = analyze(&store, false).map_err(|e| e.to_string())?;
    let planted = [
        ("persona-w", CulturalDimension::Idv, 1.2),
        ("persona-w", CulturalDimension::Pdi, -1.0),
        ("persona-e", CulturalDimension::Idv, -0.9),
        ("persona-e", CulturalDimension::Pdi, 0.8),
    ];
    let mut summary = Vec::new();
    for (m, d, bias) in planted {
        let p = report.panel(m, d).ok_or(format!("no panel {m} {d}"))?;
        check((p.cds - bias).abs() <= 0.2, format!("{m} {d} CDS {:.3} vs planted {bias}", p.cds))?;
        summary.push(format!("{m}/{d}={:.2}", p.cds));
    }
    for d in CulturalDimension::ALL {
        let t = report.t_test(d).ok_or(format!("no t-test for {d}"))?;
        check(t.result.p_two_tailed < 0.001, format!("{d} p = {}", t.result.p_two_tailed))?;
    }
    for d in CulturalDimension::ALL {
        let w = &report.panel("persona-w", d).unwrap().cai;
        let e = &report.panel("persona-e", d).unwrap().cai;
        check(w["USA"] > w["CHN"], format!("{d}: W closer to CHN"))?;
        check(e["CHN"] > e["USA"], format!("{d}: E closer to USA"))?;
    }
    check(calls == 400, format!("expected 400 synthetic calls, saw {calls}"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("{}; p<0.001 both dims; CAI pattern holds; {elapsed:.1?}", summary.join(" ")))
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gains = |p: PersonaConfig| {
        p.with_type_gain(ProbeType::Vdp, 1.3)
            .with_type_gain(ProbeType::Sjp, 1.0)
            .with_type_gain(ProbeType::Sap, 0.7)
    };
    let (store, _) = synthetic_study(dir.path(), gains(persona_w(303)), gains(persona_e(404)))?;
    let report = analyze(&store, false).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for m in ["persona-w", "persona-e"] {
        let cell = |t: ProbeType| report.ablation.rows.get(&t).and_then(|r| r.get(m)).copied();
        let (v, j, a) = (cell(ProbeType::Vdp), cell(ProbeType::Sjp), cell(ProbeType::Sap));
        let (Some(v), Some(j), Some(a)) = (v, j, a) else {
            return Err(format!("missing ablation cells for {m}"));
        };
        check(v > j && j > a, format!("{m}: VDP {v:.3} SJP {j:.3} SAP {a:.3}"))?;
        summary.push(format!("{m}: {v:.2} > {j:.2} > {a:.2}"));
    }
    Ok(summary.join("; "))
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = dir.path().join("run");
    let dataset = synthetic_dataset(30);
    let manifest = write_run(
        &run,
        &dataset,
        vec![
            ModelProfile::synthetic("persona-w", persona_w(5)),
            ModelProfile::synthetic("persona-e", persona_e(6)),
        ],
        |m| {
            m.concepts = vec!["freedom".into(), "harmony".into()];
            m.preference_panel = true;
        },
    );
    let run_s = run.to_str().unwrap();
    let out = cprobe(&["run", manifest.to_str().unwrap()]);
    check(out.status.success(), format!("run failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    let out = cprobe(&["auto-annotate", run_s]);
    check(out.status.success(), "auto-annotate failed")?;

    let mut reports = Vec::new();
    for _ in 0..2 {
        let out = cprobe(&["analyze", run_s]);
        check(out.status.success(), format!("analyze failed: {}", String::from_utf8_lossy(&out.stderr)))?;
        reports.push(std::fs::read(run.join(REPORT_JSON_FILE)).map_err(|e| e.to_string())?);
    }
    check(reports[0] == reports[1], "report.json differs between analyze runs")?;
    let parsed = CulturalReport::from_json(std::str::from_utf8(&reports[0]).unwrap()).map_err(|e| e.to_string())?;
    check(!parsed.preference.is_empty() && !parsed.similarity.is_empty(), "optional panels missing")?;

    // Warm cache: the response log is gone but every provider result is cached.
    let before = std::fs::read(run.join(RESPONSES_FILE)).map_err(|e| e.to_string())?;
    std::fs::rename(run.join(RESPONSES_FILE), run.join("responses.old")).map_err(|e| e.to_string())?;
    std::fs::remove_file(run.join("embeddings.jsonl")).map_err(|e| e.to_string())?;
    let out = cprobe(&["run", manifest.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    check(out.status.success(), "warm rerun failed")?;
    check(stdout.contains(" 0 provider call(s)"), format!("warm rerun: {stdout}"))?;
    let store = RunStore::open(&run).map_err(|e| e.to_string())?;
    let old: Vec<cprobe_core::gateway::ModelResponse> =
        cprobe_core::jsonl::read_jsonl(&run.join("responses.old")).map_err(|e| e.to_string())?;
    let mut new = store.responses().map_err(|e| e.to_string())?;
    let mut old = old;
    old.sort_by_key(|r| r.key());
    new.sort_by_key(|r| r.key());
    check(old == new, "replayed responses differ")?;
    check(!before.is_empty(), "empty response log")?;

    // Complete store: nothing to do at all.
    let out = cprobe(&["run", manifest.to_str().unwrap(), "--replay-only"]);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    check(out.status.success() && stdout.contains("0 job(s) planned"), format!("third run: {stdout}"))?;
    let out = cprobe(&["analyze", run_s]);
    check(out.status.success(), "analyze after replay failed")?;
    let third = std::fs::read(run.join(REPORT_JSON_FILE)).map_err(|e| e.to_string())?;
    check(third == reports[0], "report after cache replay differs")?;
    Ok("two analyze runs byte-identical; warm-cache rerun made 0 provider calls".into())
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = dir.path().join("run");
    let manifest = write_run(
        &run,
        &synthetic_dataset(6),
        vec![ModelProfile::synthetic("persona-w", persona_w(9))],
        |_| {},
    );
    let out = cprobe(&["run", manifest.to_str().unwrap()]);
    check(out.status.success(), "run failed")?;

    let mut acked: Vec<(String, i64)> = Vec::new();
    let mut server = spawn_server(&run);
    let token = server.tokens.iter().find(|(id, _)| id == "ann-a").unwrap().1.clone();
    for i in 0..7 {
        let (status, body) = http(server.addr, "GET", "/api/session/next", Some(&token), None);
        check(status == 200, format!("next returned {status}"))?;
        let item: serde_json::Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
        let id = item["item_id"].as_str().unwrap().to_string();
        let score = (i % 5) as i64 - 2;
        let (status, _) = http(
            server.addr,
            "POST",
            &format!("/api/items/{id}/score"),
            Some(&token),
            Some(&format!("{{\"score\": {score}}}")),
        );
        check(status == 200, format!("score returned {status}"))?;
        acked.push((id, score));
    }
    server.child.kill().map_err(|e| e.to_string())?;
    server.child.wait().map_err(|e| e.to_string())?;
    drop(server);

    let server = spawn_server(&run);
    let (status, body) = http(server.addr, "GET", "/api/session/progress", Some(&token), None);
    check(status == 200, "progress after restart")?;
    let progress: serde_json::Value = serde_json::from_str(&body).unwrap();
    check(progress["scored"] == 7, format!("progress after restart: {body}"))?;
    let (_, body) = http(server.addr, "GET", "/api/session/next", Some(&token), None);
    let next: serde_json::Value = serde_json::from_str(&body).unwrap();
    check(
        !acked.iter().any(|(id, _)| next["item_id"] == id.as_str()),
        "restarted server re-offers a scored item",
    )?;
    let records: Vec<AnnotationRecord> =
        cprobe_core::jsonl::read_jsonl(&run.join(ANNOTATIONS_FILE)).map_err(|e| e.to_string())?;
    for (id, score) in &acked {
        check(
            records
                .iter()
                .any(|r| &r.response_ref.item_id() == id && i64::from(r.score.value()) == *score),
            format!("acknowledged score for {id} lost"),
        )?;
    }
    drop(server);

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/invalid");
    let mut n = 0;
    for entry in std::fs::read_dir(&fixtures).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let out = cprobe(&["validate", path.to_str().unwrap()]);
        check(
            out.status.code() == Some(1),
            format!("validate {} exited {:?}", path.display(), out.status.code()),
        )?;
        n += 1;
    }
    check(n >= 10, format!("only {n} schema fixtures"))?;
    Ok(format!("7 acknowledged scores survive SIGKILL + restart; validate rejects all {n} schema fixtures"))
}

fn main() {
    // libtest arguments such as --nocapture are accepted and ignored.
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 formula oracles", criterion_1),
        ("2 Fleiss kappa", criterion_2),
        ("3 Welch t-test", criterion_3),
        ("4 synthetic end-to-end", criterion_4),
        ("5 probe-type ablation", criterion_5),
        ("6 determinism and replay", criterion_6),
        ("7 durability and validation", criterion_7),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS criterion {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL criterion {name}: panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
