//! Heterogeneous graph construction over audio and video segments.
//!
//! Each modality gets temporal edges governed by an [`EdgeRule`]; audio nodes
//! additionally receive edges from the video nodes around their
//! time-aligned anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How far (`span`, in neighbours per direction) and with which stride
/// (`dilation`) a node connects along the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRule {
    pub span: usize,
    pub dilation: usize,
}

impl EdgeRule {
    pub const fn new(span: usize, dilation: usize) -> Self {
        EdgeRule { span, dilation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::Config("edge rule dilation must be >= 1".into()));
        }
        Ok(())
    }
}

/// The six construction hyperparameters, one rule per edge type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRules {
    pub audio: EdgeRule,
    pub video: EdgeRule,
    pub cross: EdgeRule,
}

impl Default for EdgeRules {
    fn default() -> Self {
        EdgeRules {
            audio: EdgeRule::new(6, 3),
            video: EdgeRule::new(4, 4),
            cross: EdgeRule::new(3, 1),
        }
    }
}

impl EdgeRules {
    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.video.validate()?;
        self.cross.validate()
    }
}

/// Dense boolean adjacency (`rows x cols`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryAdjacency {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryAdjacency {
    pub fn empty(rows: usize, cols: usize) -> Self {
        BinaryAdjacency {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_edges(rows: usize, cols: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = Self::empty(rows, cols);
        for (i, j) in edges {
            adj.set(i, j, true);
        }
        adj
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.bits[i * self.cols + j] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Number of `true` entries in row `i`.
    pub fn row_degree(&self, i: usize) -> usize {
        self.bits[i * self.cols..(i + 1) * self.cols].iter().filter(|b| **b).count()
    }

    pub fn col_degree(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| self.get(i, j)).count()
    }

    /// All `(row, col)` pairs that are set, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Undirected edges `(i, j)` with `i < j` of a symmetric adjacency.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.edges().into_iter().filter(|(i, j)| i < j).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(self.rows, self.cols, |i, j| if self.get(i, j) { T::one() } else { T::zero() })
    }
}

/// Undirected temporal edges: node `i` links to `i ± dilation * k` for
/// `k = 1..=span`, dropping targets outside `[0, n)`. No self-edges.
pub fn temporal_edges(n_nodes: usize, rule: EdgeRule) -> BinaryAdjacency {
    let mut adj = BinaryAdjacency::empty(n_nodes, n_nodes);
    let step = rule.dilation.max(1);
    for i in 0..n_nodes {
        for k in 1..=rule.span {
            let j = i + step * k;
            if j >= n_nodes {
                break;
            }
            adj.set(i, j, true);
            adj.set(j, i, true);
        }
    }
    adj
}

/// Index of the video node time-aligned with audio node `i`:
/// `round(i * (n_video - 1) / (n_audio - 1))`, halves rounded up.
pub fn anchor(i: usize, n_audio: usize, n_video: usize) -> usize {
    if n_audio <= 1 {
        return 0;
    }
    let num = 2 * i * (n_video - 1) + (n_audio - 1);
    num / (2 * (n_audio - 1))
}

/// Bipartite video-to-audio edges; rows are receiving audio nodes.
///
/// Audio node `i` connects to `anchor(i) + dilation * k` for
/// `k = -span..=span`, clipped to the video range.
pub fn cross_modal_edges(n_audio: usize, n_video: usize, rule: EdgeRule) -> BinaryAdjacency {
    let mut adj = BinaryAdjacency::empty(n_audio, n_video);
    if n_video == 0 {
        return adj;
    }
    let step = rule.dilation.max(1) as isize;
    for i in 0..n_audio {
        let c = anchor(i, n_audio, n_video) as isize;
        for k in -(rule.span as isize)..=(rule.span as isize) {
            let j = c + step * k;
            if (0..n_video as isize).contains(&j) {
                adj.set(i, j as usize, true);
            }
        }
    }
    adj
}

/// Symmetric GCN normalization `D^-1/2 (A + I) D^-1/2`, with `D` the degree
/// matrix of `A + I`.
pub fn normalize_adjacency<T: Element>(adj: &BinaryAdjacency) -> Result<Tensor<T>> {
    if adj.rows() != adj.cols() {
        return Err(Error::Graph(format!("adjacency must be square, got {:?}", adj.shape())));
    }
    if !adj.is_symmetric() {
        return Err(Error::Graph("adjacency must be symmetric".into()));
    }
    let n = adj.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = adj.row_degree(i) + usize::from(!adj.get(i, i));
            1.0 / (d as f64).sqrt()
        })
        .collect();
    Ok(Tensor::from_fn(n, n, |i, j| {
        if i == j || adj.get(i, j) {
            T::of(inv_sqrt[i] * inv_sqrt[j])
        } else {
            T::zero()
        }
    }))
}

/// Degree normalization for a bipartite mask: entry `(i, j)` becomes
/// `1 / sqrt(deg(i) * deg(j))` on edges, zero elsewhere.
pub fn normalize_bipartite<T: Element>(mask: &BinaryAdjacency) -> Tensor<T> {
    let row_deg: Vec<usize> = (0..mask.rows()).map(|i| mask.row_degree(i)).collect();
    let col_deg: Vec<usize> = (0..mask.cols()).map(|j| mask.col_degree(j)).collect();
    Tensor::from_fn(mask.rows(), mask.cols(), |i, j| {
        if mask.get(i, j) {
            T::of(1.0 / ((row_deg[i] * col_deg[j]) as f64).sqrt())
        } else {
            T::zero()
        }
    })
}

/// One audio-visual clip as a heterogeneous graph.
#[derive(Clone, Debug)]
pub struct HeteroGraph<T: Element = f32> {
    pub audio_feats: Tensor<T>,
    pub video_feats: Tensor<T>,
    /// Normalized audio-audio adjacency.
    pub adj_audio: Tensor<T>,
    /// Normalized video-video adjacency.
    pub adj_video: Tensor<T>,
    /// Binary video-to-audio mask, `n_audio x n_video`.
    pub cross_mask: BinaryAdjacency,
    /// Degree-normalized `cross_mask`, used when fusion runs without attention.
    pub cross_norm: Tensor<T>,
    /// Undirected audio edge count (before self-loops).
    pub audio_edges: usize,
    pub video_edges: usize,
}

impl<T: Element> HeteroGraph<T> {
    pub fn n_audio(&self) -> usize {
        self.audio_feats.rows()
    }

    pub fn n_video(&self) -> usize {
        self.video_feats.rows()
    }

    pub fn d_audio(&self) -> usize {
        self.audio_feats.cols()
    }

    pub fn d_video(&self) -> usize {
        self.video_feats.cols()
    }

    pub fn cast<U: Element>(&self) -> HeteroGraph<U> {
        HeteroGraph {
            audio_feats: self.audio_feats.cast(),
            video_feats: self.video_feats.cast(),
            adj_audio: self.adj_audio.cast(),
            adj_video: self.adj_video.cast(),
            cross_mask: self.cross_mask.clone(),
            cross_norm: self.cross_norm.cast(),
            audio_edges: self.audio_edges,
            video_edges: self.video_edges,
        }
    }

    /// Same structure with replaced node features.
    pub fn with_features(&self, audio_feats: Tensor<T>, video_feats: Tensor<T>) -> Result<Self> {
        if audio_feats.rows() != self.n_audio() || video_feats.rows() != self.n_video() {
            return Err(Error::shape("with_features", audio_feats.shape(), video_feats.shape()));
        }
        Ok(HeteroGraph {
            audio_feats,
            video_feats,
            ..self.clone()
        })
    }
}

pub fn build_hetero_graph<T: Element>(
    audio_feats: Tensor<T>,
    video_feats: Tensor<T>,
    rules: &EdgeRules,
) -> Result<HeteroGraph<T>> {
    rules.validate()?;
    if audio_feats.is_empty() || video_feats.is_empty() {
        return Err(Error::Graph(format!(
            "feature matrices must be non-empty, got audio {:?} video {:?}",
            audio_feats.shape(),
            video_feats.shape()
        )));
    }
    let (n_a, n_v) = (audio_feats.rows(), video_feats.rows());
    let aa = temporal_edges(n_a, rules.audio);
    let vv = temporal_edges(n_v, rules.video);
    let va = cross_modal_edges(n_a, n_v, rules.cross);
    Ok(HeteroGraph {
        adj_audio: normalize_adjacency(&aa)?,
        adj_video: normalize_adjacency(&vv)?,
        cross_norm: normalize_bipartite(&va),
        cross_mask: va,
        audio_edges: aa.edge_count() / 2,
        video_edges: vv.edge_count() / 2,
        audio_feats,
        video_feats,
    })
}
