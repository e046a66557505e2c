//! Forward passes of the retrieval scorers.
//!
//! SGC is parameter-free (`Â^K X`). GCN applies `Â H W` per layer with ReLU
//! between layers. The one-layer GraphSAGE variant combines a node's own
//! features with the mean of its neighbors' features. Message passing runs
//! over the symmetrized edge set; direction only matters when decoding.
//!
//! `GNN1` weight files are little endian: magic `GNN1`, `u8` arch code
//! (0 = sgc, 1 = gcn, 2 = sage), `u32` K, `u32` dim_in, `u32` dim_out, then
//! every weight matrix in declared order as row-major `f32`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingMatrix};
use crate::taskgraph::{NodeId, TaskGraph};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model architecture {got:?} cannot be used here (expected {expected:?})")]
    WrongArch { expected: GnnArch, got: GnnArch },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EmbedError> for GnnError {
    fn from(e: EmbedError) -> Self {
        GnnError::ShapeMismatch(e.to_string())
    }
}

/// `D^-1/2 (A_sym + I) D^-1/2` as a row-sorted sparse list.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
    row_start: Vec<usize>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::zeros(self.n, self.n);
        for &(r, c, w) in &self.entries {
            m.data_mut()[r * self.n + c] = w;
        }
        m
    }

    /// Sparse `Â X`.
    pub fn propagate(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix, GnnError> {
        if x.rows() != self.n {
            return Err(GnnError::ShapeMismatch(format!(
                "features have {} rows for {} nodes",
                x.rows(),
                self.n
            )));
        }
        let mut out = EmbeddingMatrix::zeros(self.n, x.dim());
        for r in 0..self.n {
            let out_row = out.row_mut(r);
            for &(_, c, w) in &self.entries[self.row_start[r]..self.row_start[r + 1]] {
                for (o, &v) in out_row.iter_mut().zip(x.row(c)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }
}

pub fn build_adjacency(g: &TaskGraph) -> NormalizedAdjacency {
    let sym = g.undirected_neighbors();
    let n = g.node_count();
    let deg: Vec<f64> = sym.iter().map(|s| (s.len() + 1) as f64).collect();
    let mut entries = Vec::new();
    let mut row_start = Vec::with_capacity(n + 1);
    for (i, nbrs) in sym.iter().enumerate() {
        row_start.push(entries.len());
        let mut cols: Vec<usize> = nbrs.iter().copied().chain(std::iter::once(i)).collect();
        cols.sort_unstable();
        for j in cols {
            entries.push((i, j, 1.0 / (deg[i] * deg[j]).sqrt()));
        }
    }
    row_start.push(entries.len());
    NormalizedAdjacency {
        n,
        entries,
        row_start,
    }
}

/// `Â^k X`; `k = 0` returns `X` unchanged.
pub fn sgc_forward(
    adj: &NormalizedAdjacency,
    x: &EmbeddingMatrix,
    k: usize,
) -> Result<EmbeddingMatrix, GnnError> {
    if x.rows() != adj.n() {
        return Err(GnnError::ShapeMismatch(format!(
            "features have {} rows for {} nodes",
            x.rows(),
            adj.n()
        )));
    }
    let mut h = x.clone();
    for _ in 0..k {
        h = adj.propagate(&h)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnArch {
    Sgc,
    Gcn,
    Sage,
}

impl GnnArch {
    fn code(self) -> u8 {
        match self {
            GnnArch::Sgc => 0,
            GnnArch::Gcn => 1,
            GnnArch::Sage => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GnnArch::Sgc),
            1 => Some(GnnArch::Gcn),
            2 => Some(GnnArch::Sage),
            _ => None,
        }
    }
}

/// Scorer weights. SGC has none; GCN has one matrix per layer (the first is
/// `dim_in x dim_out`, later ones `dim_out x dim_out`); SAGE has `W_self`
/// then `W_neigh`, both `dim_in x dim_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub arch: GnnArch,
    pub layers: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    pub weights: Vec<EmbeddingMatrix>,
}

impl GnnModel {
    pub fn sgc(k: usize, dim: usize) -> Self {
        Self {
            arch: GnnArch::Sgc,
            layers: k,
            dim_in: dim,
            dim_out: dim,
            weights: Vec::new(),
        }
    }

    pub fn new(
        arch: GnnArch,
        layers: usize,
        dim_in: usize,
        dim_out: usize,
        weights: Vec<EmbeddingMatrix>,
    ) -> Result<Self, GnnError> {
        let m = Self {
            arch,
            layers,
            dim_in,
            dim_out,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    /// Weight matrix shapes for this architecture, in file order.
    pub fn expected_shapes(arch: GnnArch, layers: usize, dim_in: usize, dim_out: usize) -> Vec<(usize, usize)> {
        match arch {
            GnnArch::Sgc => Vec::new(),
            GnnArch::Sage => vec![(dim_in, dim_out); 2],
            GnnArch::Gcn => (0..layers)
                .map(|l| (if l == 0 { dim_in } else { dim_out }, dim_out))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        match self.arch {
            GnnArch::Sgc if self.dim_in != self.dim_out => {
                return Err(GnnError::InvalidModel("sgc requires dim_in == dim_out".into()))
            }
            GnnArch::Sage if self.layers != 1 => {
                return Err(GnnError::InvalidModel("sage is single-layer".into()))
            }
            GnnArch::Gcn if self.layers == 0 => {
                return Err(GnnError::InvalidModel("gcn needs at least one layer".into()))
            }
            _ => {}
        }
        let shapes = Self::expected_shapes(self.arch, self.layers, self.dim_in, self.dim_out);
        if shapes.len() != self.weights.len() {
            return Err(GnnError::InvalidModel(format!(
                "{} weight matrices, expected {}",
                self.weights.len(),
                shapes.len()
            )));
        }
        for (w, (r, c)) in self.weights.iter().zip(shapes) {
            if (w.rows(), w.dim()) != (r, c) {
                return Err(GnnError::InvalidModel(format!(
                    "weight is {}x{}, expected {r}x{c}",
                    w.rows(),
                    w.dim()
                )));
            }
        }
        Ok(())
    }

    /// Uniform(-a, a) init with `a = sqrt(6 / (dim_in + dim_out))`.
    pub fn init(arch: GnnArch, layers: usize, dim_in: usize, dim_out: usize, seed: u64) -> Result<Self, GnnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Self::expected_shapes(arch, layers, dim_in, dim_out)
            .into_iter()
            .map(|(r, c)| {
                let a = (6.0 / (r + c) as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-a..a)).collect();
                EmbeddingMatrix::new(r, c, data).expect("finite init")
            })
            .collect();
        Self::new(arch, layers, dim_in, dim_out, weights)
    }

    pub fn zeroed(arch: GnnArch, layers: usize, dim_in: usize, dim_out: usize) -> Result<Self, GnnError> {
        let weights = Self::expected_shapes(arch, layers, dim_in, dim_out)
            .into_iter()
            .map(|(r, c)| EmbeddingMatrix::zeros(r, c))
            .collect();
        Self::new(arch, layers, dim_in, dim_out, weights)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.param_count() * 4);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.push(self.arch.code());
        out.extend_from_slice(&(self.layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim_out as u32).to_le_bytes());
        for w in &self.weights {
            for &v in w.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GnnError> {
        if bytes.len() < 17 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(GnnError::Format("missing GNN1 header".into()));
        }
        let arch = GnnArch::from_code(bytes[4])
            .ok_or_else(|| GnnError::Format(format!("unknown arch code {}", bytes[4])))?;
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (layers, dim_in, dim_out) = (read_u32(5), read_u32(9), read_u32(13));
        let shapes = Self::expected_shapes(arch, layers, dim_in, dim_out);
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if bytes.len() != 17 + total * 4 {
            return Err(GnnError::Format(format!(
                "expected {} bytes of weights, found {}",
                total * 4,
                bytes.len() - 17
            )));
        }
        let mut offset = 17;
        let mut weights = Vec::with_capacity(shapes.len());
        for (r, c) in shapes {
            let data = bytes[offset..offset + r * c * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            offset += r * c * 4;
            weights.push(EmbeddingMatrix::new(r, c, data).map_err(|e| GnnError::Format(e.to_string()))?);
        }
        Self::new(arch, layers, dim_in, dim_out, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GnnError> {
        crate::write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GnnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"GNN1";

/// Graph structure precomputed once for repeated forward passes.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub adjacency: NormalizedAdjacency,
    pub neighborhoods: Vec<Vec<NodeId>>,
}

impl GraphContext {
    pub fn new(g: &TaskGraph) -> Self {
        Self {
            adjacency: build_adjacency(g),
            neighborhoods: g.undirected_neighbors(),
        }
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    /// Row `v` is the mean of `x` over the symmetrized neighborhood of `v`;
    /// an empty neighborhood gives a zero row.
    pub fn neighbor_mean(&self, x: &EmbeddingMatrix) -> EmbeddingMatrix {
        let mut out = EmbeddingMatrix::zeros(x.rows(), x.dim());
        for (v, nbrs) in self.neighborhoods.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let scale = 1.0 / nbrs.len() as f64;
            let row = out.row_mut(v);
            for &u in nbrs {
                for (o, &val) in row.iter_mut().zip(x.row(u)) {
                    *o += scale * val;
                }
            }
        }
        out
    }

    /// Dispatches to the forward pass of `m.arch`.
    pub fn forward(&self, x: &EmbeddingMatrix, m: &GnnModel) -> Result<EmbeddingMatrix, GnnError> {
        if x.rows() != self.n() {
            return Err(GnnError::ShapeMismatch(format!(
                "features have {} rows for {} nodes",
                x.rows(),
                self.n()
            )));
        }
        match m.arch {
            GnnArch::Sgc => sgc_forward(&self.adjacency, x, m.layers),
            GnnArch::Gcn => gcn_forward(&self.adjacency, x, m),
            GnnArch::Sage => sage_forward_ctx(self, x, m),
        }
    }
}

fn check_input(x: &EmbeddingMatrix, m: &GnnModel, arch: GnnArch) -> Result<(), GnnError> {
    if m.arch != arch {
        return Err(GnnError::WrongArch {
            expected: arch,
            got: m.arch,
        });
    }
    m.validate()?;
    if x.dim() != m.dim_in {
        return Err(GnnError::ShapeMismatch(format!(
            "feature dim {} but model expects {}",
            x.dim(),
            m.dim_in
        )));
    }
    Ok(())
}

/// `h_v = x_v W_self + mean_{u in N(v)} x_u W_neigh`, linear, one layer.
pub fn sage_forward(g: &TaskGraph, x: &EmbeddingMatrix, m: &GnnModel) -> Result<EmbeddingMatrix, GnnError> {
    sage_forward_ctx(&GraphContext::new(g), x, m)
}

fn sage_forward_ctx(ctx: &GraphContext, x: &EmbeddingMatrix, m: &GnnModel) -> Result<EmbeddingMatrix, GnnError> {
    check_input(x, m, GnnArch::Sage)?;
    if x.rows() != ctx.n() {
        return Err(GnnError::ShapeMismatch("feature rows do not match node count".into()));
    }
    let mut h = x.matmul(&m.weights[0])?;
    let neigh = ctx.neighbor_mean(x).matmul(&m.weights[1])?;
    for (a, b) in h.data_mut().iter_mut().zip(neigh.data()) {
        *a += b;
    }
    Ok(h)
}

/// Per layer `Â H W`, ReLU between layers, linear output.
pub fn gcn_forward(adj: &NormalizedAdjacency, x: &EmbeddingMatrix, m: &GnnModel) -> Result<EmbeddingMatrix, GnnError> {
    check_input(x, m, GnnArch::Gcn)?;
    let mut h = x.clone();
    for (l, w) in m.weights.iter().enumerate() {
        h = adj.propagate(&h)?.matmul(w)?;
        if l + 1 < m.weights.len() {
            for v in h.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
    Ok(h)
}
