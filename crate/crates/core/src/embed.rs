//! Embedding providers and similarity primitives.
//!
//! Three providers share the [`EmbeddingProvider`] trait: a remote
//! OpenAI-compatible embeddings service, a precomputed `EMB1` cache file, and
//! a deterministic hash embedder for offline tests.
//!
//! `EMB1` layout (little endian): the magic `EMB1`, `u32` rows, `u32` dim,
//! `rows * dim` `f32` values row-major, then a JSON object mapping each row
//! index to the SHA-256 hex digest of the text that produced it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taskgraph::NodeId;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("embedding cache has no entry for text {0:?}")]
    CacheMiss(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cannot take cosine similarity of a zero vector")]
    ZeroVector,
    #[error("row {0} out of range")]
    RowOutOfRange(usize),
    #[error("embedding values must be finite")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no texts to embed")]
    Empty,
    #[error("invalid embedding cache file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix of finite reals. Node features, final node
/// embeddings, step embeddings and GNN weights all use this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, EmbedError> {
        if data.len() != rows * dim {
            return Err(EmbedError::Shape(format!(
                "{} values for a {rows}x{dim} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EmbedError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    /// `self * other`.
    pub fn matmul(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix, EmbedError> {
        if self.dim != other.rows {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                got: other.rows,
            });
        }
        let mut out = EmbeddingMatrix::zeros(self.rows, other.dim);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.dim..(i + 1) * other.dim];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix, EmbedError> {
        if self.rows != other.rows {
            return Err(EmbedError::DimMismatch {
                expected: self.rows,
                got: other.rows,
            });
        }
        let mut out = EmbeddingMatrix::zeros(self.dim, other.dim);
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.dim..(i + 1) * other.dim];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix, EmbedError> {
        if self.dim != other.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut out = EmbeddingMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    /// Row `i` of the result is row `permutation^-1[i]` of `self`, i.e. row
    /// `i` moves to position `permutation[i]`.
    pub fn permute_rows(&self, permutation: &[usize]) -> EmbeddingMatrix {
        let mut out = EmbeddingMatrix::zeros(self.rows, self.dim);
        for (old, &new) in permutation.iter().enumerate() {
            out.row_mut(new).copy_from_slice(self.row(old));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &EmbeddingMatrix) -> f64 {
        assert_eq!((self.rows, self.dim), (other.rows, other.dim));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Raw inner products `<h_v, x>` for each candidate, in candidate order.
pub fn dot_scores(
    h: &EmbeddingMatrix,
    x: &[f64],
    candidate_ids: &[NodeId],
) -> Result<Vec<(NodeId, f64)>, EmbedError> {
    if x.len() != h.dim() {
        return Err(EmbedError::DimMismatch {
            expected: h.dim(),
            got: x.len(),
        });
    }
    candidate_ids
        .iter()
        .map(|&v| {
            if v >= h.rows() {
                Err(EmbedError::RowOutOfRange(v))
            } else {
                Ok((v, dot(h.row(v), x)))
            }
        })
        .collect()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteService,
    FileCache,
    TestHash,
}

/// Anything that turns texts into fixed-dimension vectors. Identical texts
/// embed identically within one provider instance.
pub trait EmbeddingProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;
    fn dim(&self) -> usize;
    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed_texts(&[text.to_string()])?.row(0).to_vec())
    }
}

/// Deterministic stand-in for a sentence encoder: the SHA-256 of
/// `seed || text` seeds a ChaCha stream that fills `dim` values, which are
/// then L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim, seed }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = l2_norm(&v);
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::TestHash
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::Empty);
        }
        let data = texts.iter().flat_map(|t| self.vector(t)).collect();
        EmbeddingMatrix::new(texts.len(), self.dim, data)
    }
}

/// Serves embeddings from an `EMB1` file, keyed by text digest.
#[derive(Debug, Clone)]
pub struct FileCacheEmbedder {
    matrix: EmbeddingMatrix,
    by_digest: HashMap<String, usize>,
}

impl FileCacheEmbedder {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let (matrix, digests) = read_cache(path)?;
        Ok(Self::from_parts(matrix, digests))
    }

    pub fn from_parts(matrix: EmbeddingMatrix, digests: Vec<String>) -> Self {
        let mut by_digest = HashMap::new();
        for (i, d) in digests.into_iter().enumerate() {
            by_digest.entry(d).or_insert(i);
        }
        Self { matrix, by_digest }
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }
}

impl EmbeddingProvider for FileCacheEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::FileCache
    }

    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::Empty);
        }
        let mut data = Vec::with_capacity(texts.len() * self.dim());
        for t in texts {
            let row = self
                .by_digest
                .get(&text_digest(t))
                .ok_or_else(|| EmbedError::CacheMiss(t.clone()))?;
            data.extend_from_slice(self.matrix.row(*row));
        }
        EmbeddingMatrix::new(texts.len(), self.dim(), data)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"EMB1";

pub fn encode_cache(matrix: &EmbeddingMatrix, texts: &[String]) -> Result<Vec<u8>, EmbedError> {
    if texts.len() != matrix.rows() {
        return Err(EmbedError::Shape(format!(
            "{} texts for {} rows",
            texts.len(),
            matrix.rows()
        )));
    }
    let mut out = Vec::with_capacity(12 + matrix.data().len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
    for &v in matrix.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let trailer: BTreeMap<u32, String> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| (i as u32, text_digest(t)))
        .collect();
    out.extend_from_slice(serde_json::to_string(&trailer).expect("json").as_bytes());
    Ok(out)
}

pub fn decode_cache(bytes: &[u8]) -> Result<(EmbeddingMatrix, Vec<String>), EmbedError> {
    if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
        return Err(EmbedError::Format("missing EMB1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_end = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| EmbedError::Format("truncated matrix body".into()))?;
    let data = bytes[12..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let trailer: BTreeMap<u32, String> = serde_json::from_slice(&bytes[body_end..])
        .map_err(|e| EmbedError::Format(format!("bad trailer: {e}")))?;
    if trailer.len() != rows || trailer.keys().enumerate().any(|(i, &k)| k as usize != i) {
        return Err(EmbedError::Format("trailer does not cover every row".into()));
    }
    Ok((
        EmbeddingMatrix::new(rows, dim, data)?,
        trailer.into_values().collect(),
    ))
}

pub fn write_cache(
    path: impl AsRef<Path>,
    matrix: &EmbeddingMatrix,
    texts: &[String],
) -> Result<(), EmbedError> {
    crate::write_atomic(path.as_ref(), &encode_cache(matrix, texts)?)?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<(EmbeddingMatrix, Vec<String>), EmbedError> {
    decode_cache(&std::fs::read(path)?)
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    /// Service root, e.g. `http://localhost:8080`; `/v1/embeddings` is appended.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub batch_size: usize,
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint. Responses are
/// cached per text so repeated calls return bit-identical vectors.
pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            cfg,
            agent,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn fetch(&self, batch: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = format!("{}/v1/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.cfg.model, "input": batch });
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| EmbedError::ServiceUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(EmbedError::ServiceUnavailable(format!("HTTP {status}")));
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::ServiceUnavailable(format!("bad response: {e}")))?;
        if parsed.data.len() != batch.len() {
            return Err(EmbedError::ServiceUnavailable(format!(
                "{} embeddings for {} inputs",
                parsed.data.len(),
                batch.len()
            )));
        }
        let mut out = vec![Vec::new(); batch.len()];
        for (pos, d) in parsed.data.into_iter().enumerate() {
            let slot = d.index.unwrap_or(pos);
            if slot >= out.len() || d.embedding.len() != self.cfg.dim {
                return Err(EmbedError::DimMismatch {
                    expected: self.cfg.dim,
                    got: d.embedding.len(),
                });
            }
            out[slot] = d.embedding;
        }
        Ok(out)
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::RemoteService
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::Empty);
        }
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        for batch in missing.chunks(self.cfg.batch_size.max(1)) {
            let vectors = self.fetch(batch)?;
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            for (t, v) in batch.iter().zip(vectors) {
                cache.entry(t.clone()).or_insert(v);
            }
        }
        let cache = self.cache.lock().expect("embedding cache poisoned");
        let data = texts.iter().flat_map(|t| cache[t].iter().copied()).collect();
        EmbeddingMatrix::new(texts.len(), self.cfg.dim, data)
    }
}
