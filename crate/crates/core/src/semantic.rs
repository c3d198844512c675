//! Label embeddings, open-vocabulary query scoring, and 3D query localization.
//!
//! The default provider derives embeddings from a hash of the lowercased label,
//! so results are reproducible without any model. An external HTTP encoder can
//! be attached instead (`BELIEF_EMBED_URL`): `POST /embed` with
//! `{"label": .., "dim": ..}` answered by `{"vector": [..]}`.

use std::collections::HashMap;
use std::sync::RwLock;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::image::ImageBuf;
use crate::scene::{normalized, SceneBelief};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_MIN_SCORE: f64 = 0.6;
/// Mixed into every synthetic label hash. Chosen so that the simulator
/// vocabulary stays pairwise separated (|cos| < 0.45) at 16 dimensions.
pub const SYNTHETIC_SEED: u64 = 0x5EED_0000_0000_0133;
pub const EMBED_URL_ENV: &str = "BELIEF_EMBED_URL";

/// Semantic classes known to the simulator and the voxel sampler. Class id is
/// the index plus one; id 0 means "no class".
pub const CLASS_NAMES: [&str; 12] = [
    "wall",
    "floor",
    "door",
    "table",
    "chair",
    "sofa",
    "bed",
    "shelf",
    "plant",
    "television",
    "lamp",
    "panel",
];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

pub fn class_id(name: &str) -> Option<u8> {
    let lower = name.to_lowercase();
    CLASS_NAMES.iter().position(|c| *c == lower).map(|i| i as u8 + 1)
}

pub fn class_name(id: u8) -> Option<&'static str> {
    (id as usize).checked_sub(1).and_then(|i| CLASS_NAMES.get(i).copied())
}

/// Display color per class id, used for imagined primitives. Id 0 is gray.
pub fn class_color(id: u8) -> [f64; 3] {
    match class_name(id) {
        Some("wall") => [0.85, 0.83, 0.78],
        Some("floor") => [0.55, 0.42, 0.30],
        Some("door") => [0.45, 0.30, 0.18],
        Some("table") => [0.60, 0.45, 0.25],
        Some("chair") => [0.35, 0.25, 0.55],
        Some("sofa") => [0.20, 0.35, 0.70],
        Some("bed") => [0.85, 0.35, 0.35],
        Some("shelf") => [0.50, 0.35, 0.20],
        Some("plant") => [0.20, 0.65, 0.25],
        Some("television") => [0.10, 0.10, 0.12],
        Some("lamp") => [0.95, 0.90, 0.50],
        Some("panel") => [0.70, 0.70, 0.72],
        _ => [0.5, 0.5, 0.5],
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("label is empty")]
    EmptyLabel,
    #[error("embedding service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Unit-norm semantic vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Option<Self> {
        normalized(values).map(Self)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &[f64]) -> f64 {
        cosine(&self.0, other)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EmbeddingMode {
    SyntheticHash,
    ExternalService { url: String, timeout_ms: u64 },
}

pub struct EmbeddingProvider {
    mode: EmbeddingMode,
    dim: usize,
    cache: RwLock<HashMap<String, Embedding>>,
}

impl std::fmt::Debug for EmbeddingProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingProvider")
            .field("mode", &self.mode)
            .field("dim", &self.dim)
            .finish()
    }
}

impl EmbeddingProvider {
    pub fn synthetic(dim: usize) -> Self {
        Self::with_mode(EmbeddingMode::SyntheticHash, dim)
    }

    pub fn with_mode(mode: EmbeddingMode, dim: usize) -> Self {
        Self {
            mode,
            dim,
            cache: RwLock::new(HashMap::new()),
        }
    }

    /// External mode when `BELIEF_EMBED_URL` is set, synthetic otherwise.
    pub fn from_env(dim: usize) -> Self {
        match std::env::var(EMBED_URL_ENV) {
            Ok(url) if !url.is_empty() => Self::with_mode(EmbeddingMode::ExternalService { url, timeout_ms: 2000 }, dim),
            _ => Self::synthetic(dim),
        }
    }

    pub fn mode(&self) -> &EmbeddingMode {
        &self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_label(&self, label: &str) -> Result<Embedding, SemanticError> {
        let key = label.trim().to_lowercase();
        if key.is_empty() {
            return Err(SemanticError::EmptyLabel);
        }
        if let Some(e) = self.cache.read().expect("embedding cache poisoned").get(&key) {
            return Ok(e.clone());
        }
        let e = match &self.mode {
            EmbeddingMode::SyntheticHash => synthetic_embedding(&key, self.dim),
            EmbeddingMode::ExternalService { url, timeout_ms } => fetch_embedding(url, *timeout_ms, &key, self.dim)?,
        };
        self.cache
            .write()
            .expect("embedding cache poisoned")
            .entry(key)
            .or_insert(e.clone());
        Ok(e)
    }

    /// Embedding of a vocabulary class id (0 maps to `None`).
    pub fn embed_class(&self, id: u8) -> Option<Embedding> {
        class_name(id).and_then(|n| self.embed_label(n).ok())
    }

    /// Nearest vocabulary class to a feature vector, with its cosine.
    pub fn classify(&self, feature: &[f64]) -> Option<(u8, f64)> {
        (1..=NUM_CLASSES as u8)
            .filter_map(|id| self.embed_class(id).map(|e| (id, e.cosine(feature))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn synthetic_embedding(key: &str, dim: usize) -> Embedding {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()) ^ SYNTHETIC_SEED);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(e) = Embedding::new(v) {
            return e;
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    label: &'a str,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

fn fetch_embedding(url: &str, timeout_ms: u64, label: &str, dim: usize) -> Result<Embedding, SemanticError> {
    let endpoint = format!("{}/embed", url.trim_end_matches('/'));
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(timeout_ms))
        .build();
    let resp = agent
        .post(&endpoint)
        .send_json(serde_json::to_value(EmbedRequest { label, dim }).expect("request serializes"))
        .map_err(|e| SemanticError::ServiceUnavailable(e.to_string()))?;
    let body: EmbedResponse = resp
        .into_json()
        .map_err(|e| SemanticError::ServiceUnavailable(format!("bad response body: {e}")))?;
    if body.vector.len() != dim {
        return Err(SemanticError::ServiceUnavailable(format!(
            "expected {dim} values, got {}",
            body.vector.len()
        )));
    }
    Embedding::new(body.vector).ok_or_else(|| SemanticError::ServiceUnavailable("zero vector".into()))
}

/// Per-pixel cosine similarity between a feature image and a query; pixels
/// with a zero feature score -1.
pub fn query_heatmap(semantic: &ImageBuf, query: &Embedding) -> Result<Vec<f64>, SemanticError> {
    if semantic.channels != query.dim() {
        return Err(SemanticError::ShapeMismatch(format!(
            "feature image has {} channels, query has {}",
            semantic.channels,
            query.dim()
        )));
    }
    let q = query.values();
    Ok(semantic
        .data
        .chunks_exact(semantic.channels.max(1))
        .map(|f| {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                -1.0
            } else {
                (f.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / n).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Best primitive for a query by opacity-weighted cosine. `None` when the best
/// score is below `min_score`.
pub fn localize(belief: &SceneBelief, query: &Embedding, min_score: f64) -> Option<(Vec3, f64)> {
    localize_filtered(belief, query, min_score, |_| true)
}

/// [`localize`] restricted to primitives whose mean passes `keep`.
pub fn localize_filtered(
    belief: &SceneBelief,
    query: &Embedding,
    min_score: f64,
    keep: impl Fn(&Vec3) -> bool,
) -> Option<(Vec3, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in belief.primitives.iter().enumerate() {
        if !keep(p.mean()) {
            continue;
        }
        let s = p.opacity() * query.cosine(p.embedding());
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.filter(|(_, s)| *s >= min_score)
        .map(|(i, s)| (*belief.primitives[i].mean(), s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{GaussianPrimitive, Origin};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn synthetic_is_deterministic_and_case_folded() {
        let p = EmbeddingProvider::synthetic(16);
        let a = p.embed_label("sofa").unwrap();
        let b = EmbeddingProvider::synthetic(16).embed_label("sofa").unwrap();
        assert_eq!(a, b);
        assert_eq!(p.embed_label("Sofa").unwrap(), a);
        assert_eq!(p.embed_label("").unwrap_err(), SemanticError::EmptyLabel);
    }

    #[test]
    fn synthetic_norms() {
        let p = EmbeddingProvider::synthetic(16);
        for k in 0..1000 {
            let e = p.embed_label(&format!("label-{k}-x")).unwrap();
            let n: f64 = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn vocabulary_is_separated() {
        let p = EmbeddingProvider::synthetic(DEFAULT_EMBED_DIM);
        let embs: Vec<Embedding> = CLASS_NAMES.iter().map(|c| p.embed_label(c).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let c = embs[i].cosine(embs[j].values());
                assert!(c.abs() < 0.5, "{} vs {}: {c}", CLASS_NAMES[i], CLASS_NAMES[j]);
            }
        }
    }

    #[test]
    fn classify_recovers_class() {
        let p = EmbeddingProvider::synthetic(16);
        for id in 1..=NUM_CLASSES as u8 {
            let e = p.embed_class(id).unwrap();
            assert_eq!(p.classify(e.values()).unwrap().0, id);
        }
    }

    #[test]
    fn heatmap_cases() {
        let q = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        let same = ImageBuf::from_vec(2, 1, 3, vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(query_heatmap(&same, &q).unwrap(), vec![1.0, 1.0]);
        let ortho = ImageBuf::from_vec(2, 1, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(query_heatmap(&ortho, &q).unwrap(), vec![0.0, -1.0]);
        let wrong = ImageBuf::new(2, 1, 4);
        assert!(query_heatmap(&wrong, &q).is_err());
    }

    #[test]
    fn heatmap_matches_loop_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h, d) = (7, 5, 6);
        let data: Vec<f64> = (0..w * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = ImageBuf::from_vec(w, h, d, data).unwrap();
        let q = Embedding::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let got = query_heatmap(&img, &q).unwrap();
        for r in 0..h {
            for c in 0..w {
                let f = img.px(c, r);
                let mut dot = 0.0;
                let mut nf = 0.0;
                let mut nq = 0.0;
                for k in 0..d {
                    dot += f[k] * q.values()[k];
                    nf += f[k] * f[k];
                    nq += q.values()[k] * q.values()[k];
                }
                let expect = dot / (nf.sqrt() * nq.sqrt());
                let v = got[r * w + c];
                assert!((v - expect).abs() < 1e-9);
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    fn prim_with(e: &[f64], opacity: f64, x: f64) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(Vec3::new(x, 0.0, 0.0), 0.1, opacity, [0.5; 3], e.to_vec(), Origin::Observed).unwrap()
    }

    #[test]
    fn localize_cases() {
        let q = Embedding::new(vec![1.0, 0.0]).unwrap();
        assert!(localize(&SceneBelief::default(), &q, 0.6).is_none());
        let mut b = SceneBelief::default();
        b.primitives.push(prim_with(&[1.0, 0.0], 1.0, 3.0));
        let (pos, s) = localize(&b, &q, 0.6).unwrap();
        assert_eq!(pos, Vec3::new(3.0, 0.0, 0.0));
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn localize_argmax_is_scale_invariant() {
        let q = Embedding::new(vec![1.0, 0.0]).unwrap();
        let c9 = [0.9, (1.0f64 - 0.81).sqrt()];
        let c7 = [0.7, (1.0f64 - 0.49).sqrt()];
        let mut b = SceneBelief::default();
        b.primitives = vec![prim_with(&c7, 1.0, 1.0), prim_with(&c9, 1.0, 2.0)];
        let (pos, s) = localize(&b, &q, 0.6).unwrap();
        assert_eq!(pos.x, 2.0);
        assert!((s - 0.9).abs() < 1e-12);
        let mut half = b.clone();
        half.primitives = b.primitives.iter().map(|p| p.with_opacity(p.opacity() * 0.5)).collect();
        let (pos2, _) = localize(&half, &q, 0.0).unwrap();
        assert_eq!(pos2, pos);
        // below threshold after scaling
        assert!(localize(&half, &q, 0.6).is_none());
    }

    fn serve_once(body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req_body = vec![0u8; len];
            reader.read_exact(&mut req_body).unwrap();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            format!("{}{}", request_line.trim(), String::from_utf8(req_body).unwrap())
        });
        (url, handle)
    }

    #[test]
    fn external_service_protocol() {
        let (url, handle) = serve_once(r#"{"vector": [3.0, 4.0]}"#);
        let p = EmbeddingProvider::with_mode(EmbeddingMode::ExternalService { url, timeout_ms: 5000 }, 2);
        let e = p.embed_label("Chair").unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-12 && (e.values()[1] - 0.8).abs() < 1e-12);
        let seen = handle.join().unwrap();
        assert!(seen.starts_with("POST /embed"));
        let v: serde_json::Value = serde_json::from_str(&seen[seen.find('{').unwrap()..]).unwrap();
        assert_eq!(v["label"], "chair");
        assert_eq!(v["dim"], 2);
        // second lookup is served from the cache (the server is gone)
        assert_eq!(p.embed_label("chair").unwrap(), e);
    }

    #[test]
    fn external_service_down() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let p = EmbeddingProvider::with_mode(EmbeddingMode::ExternalService { url, timeout_ms: 300 }, 4);
        assert!(matches!(p.embed_label("lamp"), Err(SemanticError::ServiceUnavailable(_))));
    }
}
