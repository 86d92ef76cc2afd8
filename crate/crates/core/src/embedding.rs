//! Text-to-vector mapping and exact top-k cosine search.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::Record;
use crate::text::{fnv1a64, word_tokens};

pub const DEFAULT_DIM: usize = 256;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector for `{0}` is not unit-normalized")]
    NotNormalized(String),
    #[error("unknown candidate id `{0}`")]
    UnknownCandidateId(String),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("id `{0}` already indexed with a different vector")]
    DuplicateId(String),
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;
}

/// Feature-hash embedder over lowercase word unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    fn features(text: &str) -> Vec<String> {
        let words = word_tokens(text);
        let mut feats: Vec<String> = words.clone();
        feats.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
        if feats.is_empty() {
            feats.push(text.trim().to_lowercase());
        }
        feats
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for f in Self::features(text) {
            v[(fnv1a64(f.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        normalize(&mut v);
        Ok(v)
    }
}

/// Embedding service speaking the common `{model, input}` -> `data[0].embedding`
/// request/response shape.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    endpoint_url: String,
    model_name: String,
    dim: usize,
    api_key: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(endpoint_url: &str, model_name: &str, dim: usize, timeout_ms: u64, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .build()
            .into();
        Self {
            agent,
            endpoint_url: endpoint_url.to_string(),
            model_name: model_name.to_string(),
            dim,
            api_key,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let body = serde_json::json!({ "model": self.model_name, "input": text });
        let mut req = self.agent.post(&self.endpoint_url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| EmbeddingError::ProviderUnreachable(e.to_string()))?;
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::ProviderUnreachable(e.to_string()))?;
        let mut v = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| EmbeddingError::ProviderUnreachable("empty embedding response".into()))?;
        if v.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        normalize(&mut v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderBackend {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub backend: EmbedderBackend,
    pub dim: usize,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
    pub api_key_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: EmbedderBackend::Hash,
            dim: DEFAULT_DIM,
            endpoint_url: None,
            model_name: "text-embedding-3-small".into(),
            timeout_ms: 30_000,
            api_key_env: "STITCH_API_KEY".into(),
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbeddingError> {
        match self.backend {
            EmbedderBackend::Hash => Ok(Box::new(HashEmbedder::new(self.dim))),
            EmbedderBackend::Remote => {
                let url = self.endpoint_url.as_deref().ok_or_else(|| {
                    EmbeddingError::ProviderUnreachable("remote embedder needs endpoint_url".into())
                })?;
                let key = std::env::var(&self.api_key_env).ok();
                Ok(Box::new(RemoteEmbedder::new(url, &self.model_name, self.dim, self.timeout_ms, key)))
            }
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub text: String,
    pub vector: Vec<f64>,
}

impl Record for EmbeddingRecord {
    const KIND: &'static str = "embedding";
}

/// Exhaustive-scan vector index.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    dim: Option<usize>,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Checks dimension and norm without inserting.
    pub fn check(&self, record: &EmbeddingRecord) -> Result<bool, EmbeddingError> {
        if let Some(d) = self.dim {
            if record.vector.len() != d {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: d,
                    found: record.vector.len(),
                });
            }
        }
        if (norm(&record.vector) - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbeddingError::NotNormalized(record.id.clone()));
        }
        match self.get(&record.id) {
            Some(existing) if existing.vector == record.vector => Ok(false),
            Some(_) => Err(EmbeddingError::DuplicateId(record.id.clone())),
            None => Ok(true),
        }
    }

    /// Inserts a record; re-inserting an identical record is a no-op.
    /// Returns whether the record was new.
    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<bool, EmbeddingError> {
        if !self.check(&record)? {
            return Ok(false);
        }
        self.dim = Some(record.vector.len());
        self.by_id.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(true)
    }

    /// Highest-cosine candidates, descending, ties by ascending id.
    pub fn top_k<S: AsRef<str>>(
        &self,
        query: &[f64],
        candidate_ids: &[S],
        k: usize,
    ) -> Result<Vec<(String, f64)>, EmbeddingError> {
        if k == 0 {
            return Err(EmbeddingError::InvalidK);
        }
        if candidate_ids.is_empty() {
            return Err(EmbeddingError::EmptyCandidates);
        }
        let mut q = query.to_vec();
        normalize(&mut q);
        let mut scored = Vec::with_capacity(candidate_ids.len());
        let mut seen = std::collections::HashSet::new();
        for id in candidate_ids {
            let id = id.as_ref();
            if !seen.insert(id) {
                continue;
            }
            let rec = self
                .get(id)
                .ok_or_else(|| EmbeddingError::UnknownCandidateId(id.to_string()))?;
            scored.push((rec.id.clone(), dot(&q, &rec.vector)));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let mut v = v;
        normalize(&mut v);
        v
    }

    #[test]
    fn hash_embedding_is_deterministic_and_unit() {
        let e = HashEmbedder::default();
        let a = e.embed("x").unwrap();
        assert_eq!(a, e.embed("x").unwrap());
        assert_eq!(a.len(), 256);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-6);
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert_eq!(e.embed("  "), Err(EmbeddingError::EmptyText));
        assert!((norm(&e.embed("!!!").unwrap()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shared_tokens_score_higher_than_unrelated_text() {
        let e = HashEmbedder::default();
        let p = e.embed("price inquiry").unwrap();
        let related = cosine(&p, &e.embed("ask about price").unwrap());
        let unrelated = cosine(&p, &e.embed("volcanic eruption").unwrap());
        assert!(related > unrelated, "{related} vs {unrelated}");
    }

    #[test]
    fn top_k_edge_cases() {
        let mut idx = EmbeddingIndex::new();
        idx.insert(EmbeddingRecord { id: "a".into(), text: "a".into(), vector: vec![1.0, 0.0] }).unwrap();
        idx.insert(EmbeddingRecord { id: "b".into(), text: "b".into(), vector: vec![0.0, 1.0] }).unwrap();
        idx.insert(EmbeddingRecord { id: "c".into(), text: "c".into(), vector: vec![0.0, 1.0] }).unwrap();
        let q = [0.0, 2.0];
        assert_eq!(idx.top_k(&q, &["a"], 1).unwrap()[0].0, "a");
        let all: Vec<_> = idx.top_k(&q, &["c", "a", "b"], 10).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(all, vec!["b", "c", "a"]);
        assert_eq!(idx.top_k(&q, &["zz"], 1), Err(EmbeddingError::UnknownCandidateId("zz".into())));
        assert_eq!(idx.top_k::<&str>(&q, &[], 1), Err(EmbeddingError::EmptyCandidates));
        assert_eq!(idx.top_k(&q, &["a"], 0), Err(EmbeddingError::InvalidK));
    }

    #[test]
    fn index_rejects_bad_records() {
        let mut idx = EmbeddingIndex::new();
        idx.insert(EmbeddingRecord { id: "a".into(), text: "a".into(), vector: vec![1.0, 0.0] }).unwrap();
        assert!(!idx.insert(EmbeddingRecord { id: "a".into(), text: "a".into(), vector: vec![1.0, 0.0] }).unwrap());
        assert!(matches!(
            idx.insert(EmbeddingRecord { id: "a".into(), text: "a".into(), vector: vec![0.0, 1.0] }),
            Err(EmbeddingError::DuplicateId(_))
        ));
        assert!(matches!(
            idx.insert(EmbeddingRecord { id: "b".into(), text: "b".into(), vector: vec![1.0] }),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            idx.insert(EmbeddingRecord { id: "b".into(), text: "b".into(), vector: vec![2.0, 0.0] }),
            Err(EmbeddingError::NotNormalized(_))
        ));
    }

    fn random_index(vectors: &[Vec<f64>]) -> (EmbeddingIndex, Vec<String>) {
        let mut idx = EmbeddingIndex::new();
        let mut ids = Vec::new();
        for (i, v) in vectors.iter().enumerate() {
            let id = format!("id{i:03}");
            idx.insert(EmbeddingRecord { id: id.clone(), text: id.clone(), vector: unit(v.clone()) }).unwrap();
            ids.push(id);
        }
        (idx, ids)
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn top_k_equals_brute_force(
            vectors in prop::collection::vec(vec_strategy(8), 1..50),
            query in vec_strategy(8),
            k in 1usize..10,
        ) {
            let (idx, ids) = random_index(&vectors);
            let got = idx.top_k(&query, &ids, k).unwrap();
            let mut oracle: Vec<(String, f64)> = idx
                .records()
                .iter()
                .map(|r| (r.id.clone(), cosine(&query, &r.vector)))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            prop_assert_eq!(got.len(), k.min(ids.len()));
            for (g, o) in got.iter().zip(&oracle) {
                prop_assert_eq!(&g.0, &o.0);
                prop_assert!((g.1 - o.1).abs() < 1e-12);
            }
        }

        #[test]
        fn ranking_is_scale_invariant(
            vectors in prop::collection::vec(vec_strategy(6), 1..30),
            query in vec_strategy(6),
            c in 0.01f64..100.0,
        ) {
            let (idx, ids) = random_index(&vectors);
            let scaled: Vec<f64> = query.iter().map(|x| x * c).collect();
            let a: Vec<String> = idx.top_k(&query, &ids, ids.len()).unwrap().into_iter().map(|x| x.0).collect();
            let b: Vec<String> = idx.top_k(&scaled, &ids, ids.len()).unwrap().into_iter().map(|x| x.0).collect();
            prop_assert_eq!(a, b);
        }
    }
}
