#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use cprobe_core::annotation::AnnotatorSpec;
use cprobe_core::gateway::{ModelProfile, PersonaConfig, QueryParams};
use cprobe_core::probe::{
    save_dataset, CulturalDimension, LocaleVariant, Probe, ProbeDataset, ProbeType, Provenance,
};
use cprobe_core::store::{
    sha256_file, AnnotationConfig, DatasetBinding, RunManifest, MANIFEST_FILE,
};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_cprobe"))
}

pub fn cprobe(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("CPROBE_PARALLELISM")
        .env_remove("CPROBE_REPLAY_ONLY")
        .output()
        .expect("spawn cprobe")
}

/// `per_dimension` probes per dimension, probe types in rotation.
pub fn synthetic_dataset(per_dimension: usize) -> ProbeDataset {
    let mut probes = Vec::new();
    for dim in CulturalDimension::ALL {
        for i in 0..per_dimension {
            let probe_type = ProbeType::ALL[i % 3];
            let text = match probe_type {
                ProbeType::Sap => format!("{dim} completion item {i}: a good employee values ____"),
                _ => format!("{dim} {} scenario {i}", probe_type.long_name()),
            };
            probes.push(Probe {
                id: format!("{}-{}-{i:03}", dim.code().to_lowercase(), probe_type.code().to_lowercase()),
                dimension: dim,
                probe_type,
                variants: vec![
                    LocaleVariant {
                        language: "en".into(),
                        text: text.clone(),
                        provenance: Provenance::Original,
                        round_trip_note: None,
                    },
                    LocaleVariant {
                        language: "zh-Hans".into(),
                        text: format!("{text}（中文）"),
                        provenance: Provenance::Translated,
                        round_trip_note: None,
                    },
                ],
                polarity_note: String::new(),
            });
        }
    }
    ProbeDataset {
        name: "synthetic".into(),
        version: "1".into(),
        probes,
    }
}

pub fn persona_w(seed: u64) -> PersonaConfig {
    PersonaConfig::new(1.2, -1.0, 0.5, seed)
}

pub fn persona_e(seed: u64) -> PersonaConfig {
    PersonaConfig::new(-0.9, 0.8, 0.5, seed)
}

pub fn manifest(dataset_digest: String, models: Vec<ModelProfile>) -> RunManifest {
    RunManifest {
        run_id: "test-run".into(),
        dataset: DatasetBinding {
            path: "dataset.json".into(),
            digest: dataset_digest,
        },
        models,
        params: QueryParams::default(),
        languages: vec!["en".into()],
        samples: 1,
        annotation: AnnotationConfig {
            roster: vec![
                AnnotatorSpec {
                    token: Some("token-a".into()),
                    ..AnnotatorSpec::new("ann-a")
                },
                AnnotatorSpec {
                    token: Some("token-b".into()),
                    ..AnnotatorSpec::new("ann-b")
                },
            ],
            min_annotations: 1,
            session_seed: 77,
        },
        anchors_path: None,
        lexicons_path: None,
        concepts: vec![],
        preference_panel: false,
        parallelism: Some(4),
        cache_path: None,
    }
}

/// Writes the dataset and a manifest built by `edit` into `dir`.
pub fn write_run(
    dir: &Path,
    dataset: &ProbeDataset,
    models: Vec<ModelProfile>,
    edit: impl FnOnce(&mut RunManifest),
) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    save_dataset(dataset, dir.join("dataset.json")).unwrap();
    let digest = sha256_file(&dir.join("dataset.json")).unwrap();
    let mut m = manifest(digest, models);
    edit(&mut m);
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    path
}

/// Minimal HTTP/1.1 client. Returns (status, body).
pub fn http(addr: SocketAddr, method: &str, path: &str, token: Option<&str>, body: Option<&str>) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).expect("connect");
    let body = body.unwrap_or("");
    let mut req = format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n");
    if let Some(t) = token {
        req.push_str(&format!("Authorization: Bearer {t}\r\n"));
    }
    if !body.is_empty() {
        req.push_str("Content-Type: application/json\r\n");
    }
    req.push_str(&format!("Content-Length: {}\r\n\r\n{body}", body.len()));
    stream.write_all(req.as_bytes()).unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let raw = String::from_utf8_lossy(&raw).to_string();
    let status: u16 = raw.split(' ').nth(1).and_then(|s| s.parse().ok()).expect("status line");
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

pub struct ServerProcess {
    pub child: Child,
    pub addr: SocketAddr,
    pub tokens: Vec<(String, String)>,
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts `cprobe annotate-serve` on an ephemeral port and waits until it listens.
pub fn spawn_server(run_dir: &Path) -> ServerProcess {
    let mut child = Command::new(bin())
        .args(["annotate-serve", run_dir.to_str().unwrap(), "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .expect("spawn server");
    let stdout = child.stdout.take().unwrap();
    let mut tokens = Vec::new();
    let mut addr = None;
    for line in BufReader::new(stdout).lines() {
        let line = line.unwrap();
        if let Some(rest) = line.strip_prefix("annotator ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            tokens.push((parts[0].to_string(), parts[2].to_string()));
        } else if let Some(a) = line.strip_prefix("listening on http://") {
            addr = Some(a.parse().unwrap());
            break;
        }
    }
    ServerProcess {
        child,
        addr: addr.expect("server did not report its address"),
        tokens,
    }
}
