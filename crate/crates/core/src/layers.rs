//! The heterogeneous GNN: per-modality GCN branches, video-to-audio
//! attention fusion, pooling and the multi-label classification head.
//!
//! Parameters live in plain structs ([`HgnnModel`] and its layers). A forward
//! pass first binds every parameter onto a [`Tape`] as a trainable leaf, in
//! the fixed order reported by [`HgnnModel::param_names`], and then records
//! the computation against those handles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::tensor::{xavier_init, Element, Rng, Tape, Tensor, Var};

/// Negative slope of the attention score non-linearity.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    Learned,
    Mean,
    Max,
    Sum,
}

/// How video information reaches the audio branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Graph attention over each audio node's video neighbours.
    #[default]
    Attention,
    /// GCN over the degree-normalized bipartite adjacency.
    Gcn,
    /// No cross-modal term.
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMask {
    #[default]
    Both,
    AudioOnly,
    VideoOnly,
}

impl ModalityMask {
    pub fn uses_audio(self) -> bool {
        self != ModalityMask::VideoOnly
    }

    pub fn uses_video(self) -> bool {
        self != ModalityMask::AudioOnly
    }
}

/// Shape of a model; everything needed to rebuild its parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_audio: usize,
    pub d_video: usize,
    /// Node counts, needed for learned pooling weights.
    pub n_audio: usize,
    pub n_video: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub pooling: PoolingMode,
    pub fusion: FusionMode,
    pub modality: ModalityMask,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_audio", self.d_audio),
            ("d_video", self.d_video),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.pooling == PoolingMode::Learned && (self.n_audio == 0 || self.n_video == 0) {
            return Err(Error::Config("learned pooling needs fixed node counts >= 1".into()));
        }
        Ok(())
    }

    /// The cross-modal term only exists when both modalities are present.
    pub fn fusion_active(&self) -> bool {
        self.modality == ModalityMask::Both && self.fusion != FusionMode::Off
    }

    fn pooled_width(&self) -> usize {
        let branches = usize::from(self.modality.uses_audio()) + usize::from(self.modality.uses_video());
        branches * self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer<T: Element = f32> {
    pub weight: Tensor<T>,
}

impl<T: Element> GcnLayer<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        GcnLayer {
            weight: xavier_init(d_in, d_out, rng),
        }
    }
}

/// Single-head bipartite graph attention from video to audio nodes.
///
/// `w_src` projects video nodes; audio nodes are projected by `w_dst` when
/// the two input widths differ, otherwise by the shared `w_src`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatFusionLayer<T: Element = f32> {
    pub w_src: Tensor<T>,
    pub w_dst: Option<Tensor<T>>,
    /// Audio (receiving) half of the attention vector.
    pub att_dst: Tensor<T>,
    /// Video (sending) half of the attention vector.
    pub att_src: Tensor<T>,
}

impl<T: Element> GatFusionLayer<T> {
    pub fn new(d_audio_in: usize, d_video_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let w_src = xavier_init(d_video_in, d_out, rng);
        let w_dst = (d_audio_in != d_video_in).then(|| xavier_init(d_audio_in, d_out, rng));
        let att: Tensor<T> = xavier_init(2 * d_out, 1, rng);
        let (dst, src) = att.data().split_at(d_out);
        GatFusionLayer {
            w_src,
            w_dst,
            att_dst: Tensor::from_vec(d_out, 1, dst.to_vec()).expect("split"),
            att_src: Tensor::from_vec(d_out, 1, src.to_vec()).expect("split"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionLayer<T: Element = f32> {
    Attention(GatFusionLayer<T>),
    Gcn(GcnLayer<T>),
}

/// One step of the three-flow update.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroLayer<T: Element = f32> {
    pub audio: Option<GcnLayer<T>>,
    pub video: Option<GcnLayer<T>>,
    pub fusion: Option<FusionLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HgnnModel<T: Element = f32> {
    pub config: ModelConfig,
    pub layers: Vec<HeteroLayer<T>>,
    /// Per-position pooling weights, `n x 1`; present in learned mode.
    pub pool_audio: Option<Tensor<T>>,
    pub pool_video: Option<Tensor<T>>,
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

/// Tape handles for the attention fusion parameters.
#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub w_src: Var,
    pub w_dst: Option<Var>,
    pub att_dst: Var,
    pub att_src: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum FusionVars {
    Attention(GatVars),
    Gcn(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub audio: Option<Var>,
    pub video: Option<Var>,
    pub fusion: Option<FusionVars>,
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub layers: Vec<LayerVars>,
    pub pool_audio: Option<Var>,
    pub pool_video: Option<Var>,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
    /// Every handle in declared parameter order.
    pub all: Vec<Var>,
}

/// Graph structure placed on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub audio: Var,
    pub video: Var,
    pub adj_audio: Var,
    pub adj_video: Var,
    pub cross_norm: Var,
}

impl GraphVars {
    pub fn bind<T: Element>(tape: &mut Tape<T>, graph: &HeteroGraph<T>) -> Self {
        GraphVars {
            audio: tape.constant(graph.audio_feats.clone()),
            video: tape.constant(graph.video_feats.clone()),
            adj_audio: tape.constant(graph.adj_audio.clone()),
            adj_video: tape.constant(graph.adj_video.clone()),
            cross_norm: tape.constant(graph.cross_norm.clone()),
        }
    }
}

/// `ReLU(A H W)`.
pub fn gcn_forward<T: Element>(tape: &mut Tape<T>, weight: Var, h: Var, adj: Var) -> Result<Var> {
    let hw = tape.matmul(h, weight)?;
    let ahw = tape.matmul(adj, hw)?;
    tape.relu(ahw)
}

/// Attention-weighted video messages for every audio node.
///
/// Returns the fused `n_audio x d_out` features and the attention matrix.
/// Audio nodes without video neighbours receive a zero message.
pub fn gat_fusion_forward<T: Element>(
    tape: &mut Tape<T>,
    vars: &GatVars,
    h_video: Var,
    mask: &[bool],
    h_audio: Var,
) -> Result<(Var, Var)> {
    let wh_video = tape.matmul(h_video, vars.w_src)?;
    let wh_audio = tape.matmul(h_audio, vars.w_dst.unwrap_or(vars.w_src))?;
    let s_audio = tape.matmul(wh_audio, vars.att_dst)?;
    let s_video = tape.matmul(wh_video, vars.att_src)?;
    let scores = tape.outer_add(s_audio, s_video)?;
    let scores = tape.leaky_relu(scores, T::of(ATTENTION_SLOPE))?;
    let alpha = tape.row_softmax_masked(scores, mask)?;
    let messages = tape.matmul(alpha, wh_video)?;
    Ok((tape.relu(messages)?, alpha))
}

/// Output of one heterogeneous layer; `None` for absent branches.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub audio: Option<Var>,
    pub video: Option<Var>,
    pub attention: Option<Var>,
}

/// Audio nodes aggregate from audio neighbours plus the fused video term;
/// video nodes aggregate from video neighbours only.
pub fn hetero_forward<T: Element>(
    tape: &mut Tape<T>,
    layer: &LayerVars,
    graph: &GraphVars,
    cross_mask: &[bool],
    h_audio: Option<Var>,
    h_video: Option<Var>,
) -> Result<LayerOutput> {
    let video = match (layer.video, h_video) {
        (Some(w), Some(h)) => Some(gcn_forward(tape, w, h, graph.adj_video)?),
        _ => None,
    };
    let mut attention = None;
    let audio = match (layer.audio, h_audio) {
        (Some(w), Some(h)) => {
            let own = gcn_forward(tape, w, h, graph.adj_audio)?;
            let fused = match (layer.fusion, h_video) {
                (Some(FusionVars::Attention(gat)), Some(hv)) => {
                    let (fused, alpha) = gat_fusion_forward(tape, &gat, hv, cross_mask, h)?;
                    attention = Some(alpha);
                    Some(fused)
                }
                (Some(FusionVars::Gcn(w)), Some(hv)) => Some(gcn_forward(tape, w, hv, graph.cross_norm)?),
                _ => None,
            };
            Some(match fused {
                Some(f) => tape.add(own, f)?,
                None => own,
            })
        }
        _ => None,
    };
    Ok(LayerOutput { audio, video, attention })
}

/// Reduces `n x d` node embeddings to a `1 x d` row.
pub fn pool_nodes<T: Element>(tape: &mut Tape<T>, mode: PoolingMode, h: Var, weights: Option<Var>) -> Result<Var> {
    match mode {
        PoolingMode::Learned => {
            let w = weights.ok_or_else(|| Error::Config("learned pooling without weights".into()))?;
            let (n, _) = tape.value(h).shape();
            let (m, _) = tape.value(w).shape();
            if n != m {
                return Err(Error::Graph(format!(
                    "learned pooling expects {m} nodes, graph has {n}"
                )));
            }
            let wt = tape.transpose(w)?;
            tape.matmul(wt, h)
        }
        PoolingMode::Mean => tape.col_mean(h),
        PoolingMode::Max => tape.col_max(h),
        PoolingMode::Sum => tape.col_sum(h),
    }
}

/// Logits and per-class sigmoid probabilities.
pub fn classify<T: Element>(tape: &mut Tape<T>, weight: Var, bias: Var, pooled: Var) -> Result<(Var, Var)> {
    let z = tape.matmul(pooled, weight)?;
    let logits = tape.add_row(z, bias)?;
    let probs = tape.sigmoid(logits)?;
    Ok((logits, probs))
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T: Element> {
    pub logits: Var,
    pub probs: Var,
    /// Per-layer attention matrices (`n_audio x n_video`), empty unless
    /// attention fusion is active.
    pub attention: Vec<Tensor<T>>,
    pub params: BoundModel,
}

/// Result of an inference-only forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T: Element = f32> {
    pub probs: Vec<T>,
    pub attention: Vec<Tensor<T>>,
}

impl<T: Element> HgnnModel<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let (da, dv) = if k == 0 { (config.d_audio, config.d_video) } else { (h, h) };
            let audio = config.modality.uses_audio().then(|| GcnLayer::new(da, h, rng));
            let video = config.modality.uses_video().then(|| GcnLayer::new(dv, h, rng));
            let fusion = if config.fusion_active() {
                Some(match config.fusion {
                    FusionMode::Attention => FusionLayer::Attention(GatFusionLayer::new(da, dv, h, rng)),
                    _ => FusionLayer::Gcn(GcnLayer::new(dv, h, rng)),
                })
            } else {
                None
            };
            layers.push(HeteroLayer { audio, video, fusion });
        }
        let learned = config.pooling == PoolingMode::Learned;
        let uniform = |n: usize| Tensor::full(n, 1, T::of(1.0 / n as f64));
        let pool_audio = (learned && config.modality.uses_audio()).then(|| uniform(config.n_audio));
        let pool_video = (learned && config.modality.uses_video()).then(|| uniform(config.n_video));
        let classifier_weight = xavier_init(config.pooled_width(), config.num_classes, rng);
        let classifier_bias = Tensor::zeros(1, config.num_classes);
        Ok(HgnnModel {
            config,
            layers,
            pool_audio,
            pool_video,
            classifier_weight,
            classifier_bias,
        })
    }

    /// Mutable parameter references in declared order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for layer in &mut self.layers {
            if let Some(a) = &mut layer.audio {
                out.push(&mut a.weight);
            }
            if let Some(v) = &mut layer.video {
                out.push(&mut v.weight);
            }
            match &mut layer.fusion {
                Some(FusionLayer::Attention(g)) => {
                    out.push(&mut g.w_src);
                    if let Some(w) = &mut g.w_dst {
                        out.push(w);
                    }
                    out.push(&mut g.att_dst);
                    out.push(&mut g.att_src);
                }
                Some(FusionLayer::Gcn(g)) => out.push(&mut g.weight),
                None => {}
            }
        }
        if let Some(p) = &mut self.pool_audio {
            out.push(p);
        }
        if let Some(p) = &mut self.pool_video {
            out.push(p);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    /// Named parameters in declared order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.audio {
                out.push((format!("layer{k}.audio.weight"), &a.weight));
            }
            if let Some(v) = &layer.video {
                out.push((format!("layer{k}.video.weight"), &v.weight));
            }
            match &layer.fusion {
                Some(FusionLayer::Attention(g)) => {
                    out.push((format!("layer{k}.fusion.w_src"), &g.w_src));
                    if let Some(w) = &g.w_dst {
                        out.push((format!("layer{k}.fusion.w_dst"), w));
                    }
                    out.push((format!("layer{k}.fusion.att_dst"), &g.att_dst));
                    out.push((format!("layer{k}.fusion.att_src"), &g.att_src));
                }
                Some(FusionLayer::Gcn(g)) => out.push((format!("layer{k}.fusion.weight"), &g.weight)),
                None => {}
            }
        }
        if let Some(p) = &self.pool_audio {
            out.push(("pool.audio".into(), p));
        }
        if let Some(p) = &self.pool_video {
            out.push(("pool.video".into(), p));
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    /// Number of scalar learnables.
    pub fn count_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> HgnnModel<U> {
        let gcn = |g: &GcnLayer<T>| GcnLayer { weight: g.weight.cast() };
        HgnnModel {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| HeteroLayer {
                    audio: l.audio.as_ref().map(gcn),
                    video: l.video.as_ref().map(gcn),
                    fusion: l.fusion.as_ref().map(|f| match f {
                        FusionLayer::Attention(g) => FusionLayer::Attention(GatFusionLayer {
                            w_src: g.w_src.cast(),
                            w_dst: g.w_dst.as_ref().map(Tensor::cast),
                            att_dst: g.att_dst.cast(),
                            att_src: g.att_src.cast(),
                        }),
                        FusionLayer::Gcn(g) => FusionLayer::Gcn(gcn(g)),
                    }),
                })
                .collect(),
            pool_audio: self.pool_audio.as_ref().map(Tensor::cast),
            pool_video: self.pool_video.as_ref().map(Tensor::cast),
            classifier_weight: self.classifier_weight.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }

    /// Binds every parameter as a trainable leaf, in declared order.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let mut all = Vec::new();
        let mut p = |tape: &mut Tape<T>, t: &Tensor<T>| {
            let v = tape.param(t.clone());
            all.push(v);
            v
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let audio = layer.audio.as_ref().map(|a| p(tape, &a.weight));
            let video = layer.video.as_ref().map(|v| p(tape, &v.weight));
            let fusion = layer.fusion.as_ref().map(|f| match f {
                FusionLayer::Attention(g) => {
                    let w_src = p(tape, &g.w_src);
                    let w_dst = g.w_dst.as_ref().map(|w| p(tape, w));
                    let att_dst = p(tape, &g.att_dst);
                    let att_src = p(tape, &g.att_src);
                    FusionVars::Attention(GatVars {
                        w_src,
                        w_dst,
                        att_dst,
                        att_src,
                    })
                }
                FusionLayer::Gcn(g) => FusionVars::Gcn(p(tape, &g.weight)),
            });
            layers.push(LayerVars { audio, video, fusion });
        }
        let pool_audio = self.pool_audio.as_ref().map(|t| p(tape, t));
        let pool_video = self.pool_video.as_ref().map(|t| p(tape, t));
        let classifier_weight = p(tape, &self.classifier_weight);
        let classifier_bias = p(tape, &self.classifier_bias);
        BoundModel {
            layers,
            pool_audio,
            pool_video,
            classifier_weight,
            classifier_bias,
            all,
        }
    }

    /// Checks that a graph fits this model's input dimensions.
    pub fn check_graph(&self, graph: &HeteroGraph<T>) -> Result<()> {
        let c = &self.config;
        if graph.d_audio() != c.d_audio || graph.d_video() != c.d_video {
            return Err(Error::Dataset(format!(
                "feature dims (audio {}, video {}) do not match model (audio {}, video {})",
                graph.d_audio(),
                graph.d_video(),
                c.d_audio,
                c.d_video
            )));
        }
        if c.pooling == PoolingMode::Learned && (graph.n_audio() != c.n_audio || graph.n_video() != c.n_video) {
            return Err(Error::Dataset(format!(
                "learned pooling needs {} audio / {} video nodes, graph has {} / {}",
                c.n_audio,
                c.n_video,
                graph.n_audio(),
                graph.n_video()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, graph: &HeteroGraph<T>) -> Result<ModelOutput<T>> {
        self.check_graph(graph)?;
        let params = self.bind(tape);
        let g = GraphVars::bind(tape, graph);
        let modality = self.config.modality;
        let mut h_audio = modality.uses_audio().then_some(g.audio);
        let mut h_video = modality.uses_video().then_some(g.video);
        let mut attention = Vec::new();
        for layer in &params.layers {
            let out = hetero_forward(tape, layer, &g, graph.cross_mask.bits(), h_audio, h_video)?;
            if let Some(a) = out.attention {
                attention.push(tape.value(a).clone());
            }
            h_audio = out.audio;
            h_video = out.video;
        }
        let mode = self.config.pooling;
        let pooled_audio = h_audio.map(|h| pool_nodes(tape, mode, h, params.pool_audio)).transpose()?;
        let pooled_video = h_video.map(|h| pool_nodes(tape, mode, h, params.pool_video)).transpose()?;
        let pooled = match (pooled_audio, pooled_video) {
            (Some(a), Some(v)) => tape.concat_cols(a, v)?,
            (Some(a), None) => a,
            (None, Some(v)) => v,
            (None, None) => unreachable!("at least one modality is always active"),
        };
        let (logits, probs) = classify(tape, params.classifier_weight, params.classifier_bias, pooled)?;
        Ok(ModelOutput {
            logits,
            probs,
            attention,
            params,
        })
    }

    pub fn predict(&self, graph: &HeteroGraph<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, graph)?;
        Ok(Prediction {
            probs: tape.value(out.probs).data().to_vec(),
            attention: out.attention,
        })
    }
}

/// One scalar per audio node: its largest incoming attention weight,
/// min-max rescaled to `[0, 1]` across nodes. A constant row of maxima
/// (including a single node) maps to 1.0.
pub fn attention_node_scores<T: Element>(alpha: &Tensor<T>) -> Vec<f64> {
    let maxima: Vec<f64> = (0..alpha.rows())
        .map(|i| alpha.row(i).iter().map(|x| x.as_f64()).fold(0.0, f64::max))
        .collect();
    let lo = maxima.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![1.0; maxima.len()];
    }
    maxima.iter().map(|m| (m - lo) / (hi - lo)).collect()
}
