mod common;

use common::*;
use hgav::graph::{build_hetero_graph, normalize_adjacency, temporal_edges, BinaryAdjacency, EdgeRule, EdgeRules};
use hgav::layers::*;
use hgav::tensor::{rng_from_seed, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn run_gcn(w: &Tensor<f64>, h: &Tensor<f64>, adj: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (w, h, a) = (tape.param(w.clone()), tape.constant(h.clone()), tape.constant(adj.clone()));
    let out = gcn_forward(&mut tape, w, h, a).unwrap();
    tape.value(out).clone()
}

#[test]
fn gcn_single_node_identity_is_relu() {
    let h = Tensor::from_rows(&[[1.5, -2.0, 0.0]]).unwrap();
    let out = run_gcn(&Tensor::identity(3), &h, &Tensor::identity(1));
    assert_eq!(out.data(), &[1.5, 0.0, 0.0]);
}

#[test]
fn gcn_two_node_path_by_hand() {
    // A + I = all ones, degrees 2, so every entry of A_norm is 1/2.
    let adj = normalize_adjacency::<f64>(&temporal_edges(2, EdgeRule::new(1, 1))).unwrap();
    let h = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
    let w = Tensor::from_rows(&[[1.0, -1.0], [1.0, 1.0]]).unwrap();
    // H W = [[1, -1], [2, 2]]; A (H W) = [[1.5, 0.5], [1.5, 0.5]]
    let out = run_gcn(&w, &h, &adj);
    assert!(out.max_abs_diff(&Tensor::from_rows(&[[1.5, 0.5], [1.5, 0.5]]).unwrap()) < 1e-12);
}

#[test]
fn gat_singleton_neighbour_takes_full_weight() {
    let mut rng = rng_from_seed(3);
    let layer = GatFusionLayer::<f64>::new(2, 2, 3, &mut rng);
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::from_rows(&[[0.3, 0.7]]).unwrap());
    let ha = tape.constant(Tensor::from_rows(&[[1.0, -1.0]]).unwrap());
    let vars = GatVars {
        w_src: tape.param(layer.w_src.clone()),
        w_dst: None,
        att_dst: tape.param(layer.att_dst.clone()),
        att_src: tape.param(layer.att_src.clone()),
    };
    let (out, alpha) = gat_fusion_forward(&mut tape, &vars, hv, &[true], ha).unwrap();
    assert_eq!(tape.value(alpha).data(), &[1.0]);
    let expected = Tensor::from_rows(&[[0.3, 0.7]]).unwrap().matmul(&layer.w_src).unwrap().map(|x| x.max(0.0));
    assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn gat_identical_neighbours_split_evenly() {
    let mut rng = rng_from_seed(4);
    let layer = GatFusionLayer::<f64>::new(2, 2, 3, &mut rng);
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::from_rows(&[[0.3, 0.7], [0.3, 0.7]]).unwrap());
    let ha = tape.constant(Tensor::from_rows(&[[1.0, -1.0]]).unwrap());
    let vars = GatVars {
        w_src: tape.param(layer.w_src.clone()),
        w_dst: None,
        att_dst: tape.param(layer.att_dst.clone()),
        att_src: tape.param(layer.att_src.clone()),
    };
    let (_, alpha) = gat_fusion_forward(&mut tape, &vars, hv, &[true, true], ha).unwrap();
    assert_eq!(tape.value(alpha).data(), &[0.5, 0.5]);
}

#[test]
fn gat_isolated_audio_node_gets_zero_message() {
    let mut rng = rng_from_seed(5);
    let layer = GatFusionLayer::<f64>::new(2, 2, 3, &mut rng);
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::from_rows(&[[0.3, 0.7], [0.1, 0.2]]).unwrap());
    let ha = tape.constant(Tensor::from_rows(&[[1.0, -1.0], [0.5, 0.5]]).unwrap());
    let vars = GatVars {
        w_src: tape.param(layer.w_src.clone()),
        w_dst: None,
        att_dst: tape.param(layer.att_dst.clone()),
        att_src: tape.param(layer.att_src.clone()),
    };
    let mask = [true, true, false, false];
    let (out, alpha) = gat_fusion_forward(&mut tape, &vars, hv, &mask, ha).unwrap();
    assert_eq!(tape.value(out).row(1), &[0.0, 0.0, 0.0]);
    assert_eq!(tape.value(alpha).row(1), &[0.0, 0.0]);
    assert!((tape.value(alpha).row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

/// The 3-audio / 3-video hetero layer against loop oracles.
#[test]
fn hetero_layer_matches_oracle_end_to_end() {
    let rules = EdgeRules {
        audio: EdgeRule::new(1, 1),
        video: EdgeRule::new(1, 1),
        cross: EdgeRule::new(1, 1),
    };
    let mut rng = rng_from_seed(11);
    let graph = build_hetero_graph(random_mat(3, 4, &mut rng), random_mat(3, 4, &mut rng), &rules).unwrap();
    let audio = GcnLayer::<f64>::new(4, 5, &mut rng);
    let video = GcnLayer::<f64>::new(4, 5, &mut rng);
    let gat = GatFusionLayer::<f64>::new(4, 4, 5, &mut rng);

    let mut tape = Tape::new();
    let g = GraphVars::bind(&mut tape, &graph);
    let vars = LayerVars {
        audio: Some(tape.param(audio.weight.clone())),
        video: Some(tape.param(video.weight.clone())),
        fusion: Some(FusionVars::Attention(GatVars {
            w_src: tape.param(gat.w_src.clone()),
            w_dst: None,
            att_dst: tape.param(gat.att_dst.clone()),
            att_src: tape.param(gat.att_src.clone()),
        })),
    };
    let out = hetero_forward(&mut tape, &vars, &g, graph.cross_mask.bits(), Some(g.audio), Some(g.video)).unwrap();

    let ha = to_mat(&graph.audio_feats);
    let hv = to_mat(&graph.video_feats);
    let mask: Vec<Vec<bool>> = (0..3).map(|i| (0..3).map(|j| graph.cross_mask.get(i, j)).collect()).collect();
    let own = gcn_oracle(&ha, &to_mat(&audio.weight), &to_mat(&graph.adj_audio));
    let (fused, alpha) = gat_oracle(
        &hv,
        &mask,
        &ha,
        &to_mat(&gat.w_src),
        &to_mat(&gat.w_src),
        gat.att_dst.data(),
        gat.att_src.data(),
    );
    let expected_a: Mat = own.iter().zip(&fused).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect()).collect();
    let expected_v = gcn_oracle(&hv, &to_mat(&video.weight), &to_mat(&graph.adj_video));
    assert!(max_diff(&expected_a, tape.value(out.audio.unwrap())) < 1e-12);
    assert!(max_diff(&expected_v, tape.value(out.video.unwrap())) < 1e-12);
    assert!(max_diff(&alpha, tape.value(out.attention.unwrap())) < 1e-12);
}

#[test]
fn pooling_modes() {
    let h = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, -5.0, 6.0], [0.5, 0.5, 0.5], [1.0, 1.0, -9.0]]).unwrap();
    let pool = |mode, w: Option<Tensor<f64>>| {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let wv = w.map(|w| tape.param(w));
        let out = pool_nodes(&mut tape, mode, hv, wv).unwrap();
        tape.value(out).data().to_vec()
    };
    let one_hot = Tensor::from_rows(&[[1.0], [0.0], [0.0], [0.0]]).unwrap();
    assert_eq!(pool(PoolingMode::Learned, Some(one_hot)), vec![1.0, 2.0, 3.0]);
    assert_eq!(pool(PoolingMode::Sum, None), vec![6.5, -1.5, 0.5]);
    assert_eq!(pool(PoolingMode::Max, None), vec![4.0, 2.0, 6.0]);
    assert_eq!(pool(PoolingMode::Mean, None), vec![1.625, -0.375, 0.125]);

    let twins = Tensor::from_rows(&[[0.25, -1.0], [0.25, -1.0]]).unwrap();
    let mut tape = Tape::new();
    let t = tape.constant(twins);
    let out = pool_nodes(&mut tape, PoolingMode::Mean, t, None).unwrap();
    assert_eq!(tape.value(out).data(), &[0.25, -1.0]);
}

#[test]
fn learned_pooling_rejects_count_mismatch() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::zeros(4, 2));
    let w = tape.param(Tensor::full(3, 1, 1.0 / 3.0));
    assert!(pool_nodes(&mut tape, PoolingMode::Learned, h, Some(w)).is_err());
}

#[test]
fn classify_cases() {
    let mut tape = Tape::<f64>::new();
    let pooled = tape.constant(Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap());
    let w = tape.param(Tensor::zeros(3, 4));
    let b = tape.param(Tensor::zeros(1, 4));
    let (_, probs) = classify(&mut tape, w, b, pooled).unwrap();
    assert_eq!(tape.value(probs).data(), &[0.5; 4]);

    let w = tape.param(Tensor::from_rows(&[[0.5], [0.25], [2.0]]).unwrap());
    let b = tape.param(Tensor::from_rows(&[[-0.1]]).unwrap());
    let (logits, probs) = classify(&mut tape, w, b, pooled).unwrap();
    // 0.5 - 0.5 + 1.0 - 0.1 = 0.9
    assert!((tape.value(logits).get(0, 0) - 0.9).abs() < 1e-15);
    assert!((tape.value(probs).get(0, 0) - 1.0 / (1.0 + (-0.9f64).exp())).abs() < 1e-15);
}

#[test]
fn one_layer_model_is_composition_of_ops() {
    let cfg = ModelConfig {
        layers: 1,
        ..tiny_config()
    };
    let model = HgnnModel::<f64>::new(cfg.clone(), &mut rng_from_seed(2)).unwrap();
    let graph = random_graph(&cfg, &desk_rules(), 9);
    let l = &model.layers[0];
    let FusionLayer::Attention(gat) = l.fusion.as_ref().unwrap() else {
        panic!("attention fusion expected")
    };
    let ha = to_mat(&graph.audio_feats);
    let hv = to_mat(&graph.video_feats);
    let mask: Vec<Vec<bool>> = (0..3).map(|i| (0..3).map(|j| graph.cross_mask.get(i, j)).collect()).collect();
    let own = gcn_oracle(&ha, &to_mat(&l.audio.as_ref().unwrap().weight), &to_mat(&graph.adj_audio));
    let (fused, _) = gat_oracle(
        &hv,
        &mask,
        &ha,
        &to_mat(&gat.w_src),
        &to_mat(gat.w_dst.as_ref().unwrap()),
        gat.att_dst.data(),
        gat.att_src.data(),
    );
    let h_a: Mat = own.iter().zip(&fused).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect()).collect();
    let h_v = gcn_oracle(&hv, &to_mat(&l.video.as_ref().unwrap().weight), &to_mat(&graph.adj_video));
    let pool = |h: &Mat, p: &Tensor<f64>| -> Vec<f64> {
        (0..h[0].len()).map(|c| h.iter().enumerate().map(|(i, r)| p.get(i, 0) * r[c]).sum()).collect()
    };
    let mut g = pool(&h_a, model.pool_audio.as_ref().unwrap());
    g.extend(pool(&h_v, model.pool_video.as_ref().unwrap()));
    let probs: Vec<f64> = (0..2)
        .map(|c| {
            let z: f64 = g.iter().enumerate().map(|(k, x)| x * model.classifier_weight.get(k, c)).sum::<f64>()
                + model.classifier_bias.get(0, c);
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let pred = model.predict(&graph).unwrap();
    for (a, b) in pred.probs.iter().zip(&probs) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = ModelConfig {
        n_audio: 7,
        n_video: 12,
        ..tiny_config()
    };
    let model = HgnnModel::<f64>::new(cfg.clone(), &mut rng_from_seed(1)).unwrap();
    let graph = random_graph(&cfg, &EdgeRules::default(), 2);
    let pred = model.predict(&graph).unwrap();
    assert_eq!(pred.attention.len(), 2);
    for alpha in &pred.attention {
        for i in 0..alpha.rows() {
            let s: f64 = alpha.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for j in 0..alpha.cols() {
                if !graph.cross_mask.get(i, j) {
                    assert_eq!(alpha.get(i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn audio_only_matches_model_without_video_modules() {
    let both = HgnnModel::<f64>::new(tiny_config(), &mut rng_from_seed(6)).unwrap();
    let cfg = ModelConfig {
        modality: ModalityMask::AudioOnly,
        ..tiny_config()
    };
    let mut audio_only = HgnnModel::<f64>::new(cfg.clone(), &mut rng_from_seed(7)).unwrap();
    assert!(audio_only.layers.iter().all(|l| l.video.is_none() && l.fusion.is_none()));
    assert!(audio_only.pool_video.is_none());
    assert_eq!(audio_only.classifier_weight.rows(), cfg.hidden);

    // Copy the shared audio path, then compare against a hand-built audio GCN stack.
    for (dst, src) in audio_only.layers.iter_mut().zip(&both.layers) {
        dst.audio = src.audio.clone();
    }
    audio_only.pool_audio = both.pool_audio.clone();
    let graph = random_graph(&tiny_config(), &desk_rules(), 3);
    let mut h = to_mat(&graph.audio_feats);
    for l in &audio_only.layers {
        h = gcn_oracle(&h, &to_mat(&l.audio.as_ref().unwrap().weight), &to_mat(&graph.adj_audio));
    }
    let p = audio_only.pool_audio.as_ref().unwrap();
    let g: Vec<f64> = (0..cfg.hidden).map(|c| h.iter().enumerate().map(|(i, r)| p.get(i, 0) * r[c]).sum()).collect();
    let pred = audio_only.predict(&graph).unwrap();
    for c in 0..2 {
        let z: f64 = g.iter().enumerate().map(|(k, x)| x * audio_only.classifier_weight.get(k, c)).sum::<f64>();
        assert!((pred.probs[c] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }
    // Video features play no part.
    let noisy = graph.with_features(graph.audio_feats.clone(), graph.video_feats.map(|x| x * 7.0 - 1.0)).unwrap();
    assert_eq!(audio_only.predict(&noisy).unwrap().probs, pred.probs);
}

#[test]
fn zero_video_features_leave_audio_path_only() {
    let mut rng = rng_from_seed(8);
    let cfg = ModelConfig {
        layers: 1,
        d_video: 3,
        ..tiny_config()
    };
    let model = HgnnModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let graph = random_graph(&cfg, &desk_rules(), 4);
    let graph = graph.with_features(graph.audio_feats.clone(), Tensor::zeros(3, 3)).unwrap();
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let g = GraphVars::bind(&mut tape, &graph);
    let out = hetero_forward(&mut tape, &params.layers[0], &g, graph.cross_mask.bits(), Some(g.audio), Some(g.video)).unwrap();
    let own = gcn_oracle(&to_mat(&graph.audio_feats), &to_mat(&model.layers[0].audio.as_ref().unwrap().weight), &to_mat(&graph.adj_audio));
    assert!(max_diff(&own, tape.value(out.audio.unwrap())) < 1e-15);
}

#[test]
fn fusion_off_audio_ignores_video_and_video_ignores_audio() {
    for fusion in [FusionMode::Off, FusionMode::Attention, FusionMode::Gcn] {
        let cfg = ModelConfig {
            fusion,
            n_audio: 5,
            n_video: 9,
            ..tiny_config()
        };
        let model = HgnnModel::<f64>::new(cfg.clone(), &mut rng_from_seed(10)).unwrap();
        let graph = random_graph(&cfg, &desk_rules(), 5);
        let run = |g: &hgav::graph::HeteroGraph<f64>| {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let gv = GraphVars::bind(&mut tape, g);
            let (mut a, mut v) = (Some(gv.audio), Some(gv.video));
            let mut trace = Vec::new();
            for l in &params.layers {
                let out = hetero_forward(&mut tape, l, &gv, g.cross_mask.bits(), a, v).unwrap();
                trace.push((tape.value(out.audio.unwrap()).clone(), tape.value(out.video.unwrap()).clone()));
                a = out.audio;
                v = out.video;
            }
            trace
        };
        let base = run(&graph);
        let mut rng = rng_from_seed(99);
        let moved_v = graph.with_features(graph.audio_feats.clone(), random_mat(9, 4, &mut rng)).unwrap();
        let moved_a = graph.with_features(random_mat(5, 3, &mut rng), graph.video_feats.clone()).unwrap();
        let after_v = run(&moved_v);
        let after_a = run(&moved_a);
        for k in 0..base.len() {
            assert_eq!(base[k].1, after_a[k].1, "video branch moved with audio input ({fusion:?})");
            if fusion == FusionMode::Off {
                assert_eq!(base[k].0, after_v[k].0, "audio branch moved with video input");
            }
        }
        if fusion != FusionMode::Off {
            assert_ne!(base.last().unwrap().0, after_v.last().unwrap().0);
        }
    }
}

#[test]
fn full_model_gradients_all_modes() {
    let variants = [
        (PoolingMode::Learned, FusionMode::Attention, ModalityMask::Both),
        (PoolingMode::Sum, FusionMode::Gcn, ModalityMask::Both),
        (PoolingMode::Mean, FusionMode::Off, ModalityMask::Both),
        (PoolingMode::Max, FusionMode::Attention, ModalityMask::Both),
        (PoolingMode::Learned, FusionMode::Attention, ModalityMask::AudioOnly),
        (PoolingMode::Learned, FusionMode::Attention, ModalityMask::VideoOnly),
    ];
    for (seed, (pooling, fusion, modality)) in variants.into_iter().enumerate() {
        let cfg = ModelConfig {
            pooling,
            fusion,
            modality,
            hidden: 5,
            ..tiny_config()
        };
        let model = HgnnModel::<f64>::new(cfg.clone(), &mut rng_from_seed(seed as u64)).unwrap();
        let graph = random_graph(&cfg, &desk_rules(), 100 + seed as u64);
        let report = finite_difference_check(&model, &graph, &[true, false]);
        assert!(report.failures.is_empty(), "{pooling:?}/{fusion:?}/{modality:?}: {:?}", report.failures);
    }
}

#[test]
fn param_counts() {
    assert_eq!(GcnLayer::<f32>::new(2, 3, &mut rng_from_seed(0)).weight.len(), 6);
    let count = |hidden| {
        let cfg = ModelConfig { hidden, ..tiny_config() };
        HgnnModel::<f32>::new(cfg, &mut rng_from_seed(0)).unwrap().count_params()
    };
    let (c8, c16, c32) = (count(8), count(16), count(32));
    assert!(c16 > 2 * c8 && c32 > 2 * c16);

    // Hand arithmetic for the tiny config at hidden 8:
    // layer 0: audio 3*8, video 4*8, fusion w_src 4*8 + w_dst 3*8 + att 8 + 8
    // layer 1: audio, video 8*8 each, fusion w_src 8*8 + att 16
    // pooling 3 + 3, classifier 16*2 + 2
    let expected = (24 + 32 + 32 + 24 + 16) + (64 + 64 + 64 + 16) + 6 + 34;
    assert_eq!(c8, expected);
}

#[test]
fn mismatched_graph_is_rejected() {
    let model = HgnnModel::<f64>::new(tiny_config(), &mut rng_from_seed(0)).unwrap();
    let cfg = ModelConfig { n_audio: 4, ..tiny_config() };
    let graph = random_graph(&cfg, &desk_rules(), 1);
    let err = model.predict(&graph).unwrap_err().to_string();
    assert!(err.contains("learned pooling"), "{err}");
    let cfg = ModelConfig { d_audio: 5, ..tiny_config() };
    let graph = random_graph(&cfg, &desk_rules(), 1);
    assert!(model.predict(&graph).unwrap_err().to_string().contains("feature dims"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gcn_permutation_equivariance(n in 1usize..12, seed in any::<u64>(), span in 0usize..4, dil in 1usize..3) {
        let mut rng = rng_from_seed(seed);
        let h = random_mat(n, 3, &mut rng);
        let w = random_mat(3, 4, &mut rng);
        let adj = temporal_edges(n, EdgeRule::new(span, dil));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // node k of the permuted graph is node perm[k] of the original
        let ph = Tensor::from_fn(n, 3, |k, c| h.get(perm[k], c));
        let padj = BinaryAdjacency::from_edges(n, n, adj.edges().into_iter().map(|(i, j)| {
            let inv = |x| perm.iter().position(|&p| p == x).unwrap();
            (inv(i), inv(j))
        }));
        let out = run_gcn(&w, &h, &normalize_adjacency(&adj).unwrap());
        let pout = run_gcn(&w, &ph, &normalize_adjacency(&padj).unwrap());
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((pout.get(k, c) - out.get(p, c)).abs() < 1e-12);
            }
        }
    }
}
