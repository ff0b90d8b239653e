//! Independent reference implementations shared by the integration tests.
//! Everything here works on nested `Vec`s with explicit loops.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hgav::data::{generate_synthetic, Dataset, SynthMode, SynthSpec};
use hgav::graph::{build_hetero_graph, EdgeRule, EdgeRules, HeteroGraph};
use hgav::layers::{FusionMode, HgnnModel, ModalityMask, ModelConfig, PoolingMode};
use hgav::tensor::{rng_from_seed, Tape, Tensor};
use hgav::training::focal_loss;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn max_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            worst = worst.max((x - b.get(i, j)).abs());
        }
    }
    worst
}

/// Undirected temporal pairs `(i, j)` with `i < j` by exhaustive search.
pub fn temporal_oracle(n: usize, span: usize, dilation: usize) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let gap = j - i;
            if gap % dilation == 0 && gap / dilation <= span {
                out.insert((i, j));
            }
        }
    }
    out
}

pub fn anchor_oracle(i: usize, n_a: usize, n_v: usize) -> usize {
    if n_a <= 1 {
        return 0;
    }
    let exact = i as f64 * (n_v - 1) as f64 / (n_a - 1) as f64;
    (exact + 0.5).floor() as usize
}

/// Directed `(audio, video)` pairs by exhaustive search.
pub fn cross_oracle(n_a: usize, n_v: usize, span: usize, dilation: usize) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..n_a {
        let c = anchor_oracle(i, n_a, n_v) as i64;
        for j in 0..n_v as i64 {
            let off = (j - c).abs();
            if off % dilation as i64 == 0 && off / dilation as i64 <= span as i64 {
                out.insert((i, j as usize));
            }
        }
    }
    out
}

/// `D^-1/2 (A + I) D^-1/2` entry by entry from an edge set.
pub fn normalize_oracle(n: usize, edges: &BTreeSet<(usize, usize)>) -> Mat {
    let linked = |i: usize, j: usize| i == j || edges.contains(&(i.min(j), i.max(j)));
    let deg: Vec<f64> = (0..n).map(|i| (0..n).filter(|&j| linked(i, j)).count() as f64).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if linked(i, j) { 1.0 / (deg[i] * deg[j]).sqrt() } else { 0.0 })
                .collect()
        })
        .collect()
}

fn row_times(h: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols).map(|c| h.iter().zip(w).map(|(x, wr)| x * wr[c]).sum()).collect()
}

/// GCN layer as message passing: every node sums `A[i][j] * (h_j W)` over
/// its neighbours, then applies ReLU.
pub fn gcn_oracle(h: &Mat, w: &Mat, adj: &Mat) -> Mat {
    let msgs: Vec<Vec<f64>> = h.iter().map(|row| row_times(row, w)).collect();
    let d_out = w[0].len();
    (0..h.len())
        .map(|i| {
            let mut acc = vec![0.0; d_out];
            for (j, m) in msgs.iter().enumerate() {
                if adj[i][j] != 0.0 {
                    for (a, x) in acc.iter_mut().zip(m) {
                        *a += adj[i][j] * x;
                    }
                }
            }
            acc.into_iter().map(|x| x.max(0.0)).collect()
        })
        .collect()
}

/// Attention fusion per audio node over its masked video neighbours.
/// Returns the fused rows and the attention matrix.
pub fn gat_oracle(h_v: &Mat, mask: &[Vec<bool>], h_a: &Mat, w_src: &Mat, w_dst: &Mat, a_dst: &[f64], a_src: &[f64]) -> (Mat, Mat) {
    let wv: Vec<Vec<f64>> = h_v.iter().map(|r| row_times(r, w_src)).collect();
    let wa: Vec<Vec<f64>> = h_a.iter().map(|r| row_times(r, w_dst)).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let d_out = w_src[0].len();
    let mut out = Vec::new();
    let mut alpha = Vec::new();
    for i in 0..h_a.len() {
        let nbrs: Vec<usize> = (0..h_v.len()).filter(|&j| mask[i][j]).collect();
        let mut a_row = vec![0.0; h_v.len()];
        let mut o_row = vec![0.0; d_out];
        if !nbrs.is_empty() {
            let e: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let s = dot(&wa[i], a_dst) + dot(&wv[j], a_src);
                    if s > 0.0 {
                        s
                    } else {
                        0.2 * s
                    }
                })
                .collect();
            let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|x| (x - top).exp()).sum();
            for (k, &j) in nbrs.iter().enumerate() {
                a_row[j] = (e[k] - top).exp() / z;
                for (o, x) in o_row.iter_mut().zip(&wv[j]) {
                    *o += a_row[j] * x;
                }
            }
        }
        out.push(o_row.into_iter().map(|x| x.max(0.0)).collect());
        alpha.push(a_row);
    }
    (out, alpha)
}

pub fn desk_rules() -> EdgeRules {
    EdgeRules {
        audio: EdgeRule::new(1, 1),
        video: EdgeRule::new(2, 1),
        cross: EdgeRule::new(1, 1),
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_audio: 3,
        d_video: 4,
        n_audio: 3,
        n_video: 3,
        hidden: 8,
        layers: 2,
        num_classes: 2,
        pooling: PoolingMode::Learned,
        fusion: FusionMode::Attention,
        modality: ModalityMask::Both,
    }
}

pub fn random_graph(cfg: &ModelConfig, rules: &EdgeRules, seed: u64) -> HeteroGraph<f64> {
    let mut rng = rng_from_seed(seed);
    let a = random_mat(cfg.n_audio, cfg.d_audio, &mut rng);
    let v = random_mat(cfg.n_video, cfg.d_video, &mut rng);
    build_hetero_graph(a, v, rules).unwrap()
}

pub fn model_loss(model: &HgnnModel<f64>, graph: &HeteroGraph<f64>, labels: &[bool]) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, graph).unwrap();
    let loss = focal_loss(&mut tape, out.probs, labels, 2.0).unwrap();
    tape.value(loss).get(0, 0)
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    /// Entries outside tolerance as `(param, index, analytic, numeric)`.
    pub failures: Vec<(String, usize, f64, f64)>,
    pub worst_rel: f64,
}

/// Central finite differences (h = 1e-5) against the tape gradient for every
/// scalar parameter. An entry passes if `|a - n| <= 1e-4 * max(|a|, |n|)` or
/// both magnitudes are under the 1e-6 floor.
pub fn finite_difference_check(model: &HgnnModel<f64>, graph: &HeteroGraph<f64>, labels: &[bool]) -> GradReport {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, graph).unwrap();
    let loss = focal_loss(&mut tape, out.probs, labels, 2.0).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = out
        .params
        .all
        .iter()
        .map(|v| tape.grad(*v).cloned().unwrap())
        .collect();
    let names = model.param_names();
    let h = 1e-5;
    let mut report = GradReport {
        checked: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
    };
    for (p, name) in names.iter().enumerate() {
        for k in 0..analytic[p].len() {
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[k] -= h;
            let numeric = (model_loss(&plus, graph, labels) - model_loss(&minus, graph, labels)) / (2.0 * h);
            let a = analytic[p].data()[k];
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            if scale < 1e-6 {
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            report.worst_rel = report.worst_rel.max(rel);
            if rel >= 1e-4 {
                report.failures.push((name.clone(), k, a, numeric));
            }
        }
    }
    report
}

pub fn synthetic(mode: SynthMode, n_items: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        n_items,
        mode,
        seed,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec).unwrap().to_dataset(&desk_rules()).unwrap()
}
