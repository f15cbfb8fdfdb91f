//! Exact-equality contracts between redundant computation paths: the
//! incremental cached decoder, the cache-anchored perturbed recompute, and
//! the autodiff graph must all produce bit-identical logits when the
//! perturbation is absent or zero, and the relevance rules must be exactly
//! linear in the relevance they redistribute.

use lime_core::model::{
    tokens, DeltaKv, Model, ModelConfig, MultimodalSequence, Normalization, Sampling,
};
use lime_core::relevance::{propagate, rules, RelevanceConfig};
use lime_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(norm: Normalization, seed: u64) -> (Model, MultimodalSequence) {
    let model = Model::init(
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 12,
            vocab_size: 10,
            max_sequence: 10,
            patch_dim: 4,
            normalization: norm,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap();
    let patches = Tensor::matrix(
        2,
        4,
        vec![0.3, -0.4, 0.2, 0.6, -0.1, 0.5, -0.3, 0.2],
    )
    .unwrap();
    let seq = MultimodalSequence::build(
        &model,
        &patches,
        &[1],
        &[tokens::QUERY, tokens::FIRST_OBJECT],
        false,
    )
    .unwrap();
    (model, seq)
}

/// Bit-for-bit data equality; shapes may differ between a vector and the
/// equivalent single-row matrix.
fn assert_bitwise(label: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(a.len(), b.len(), "{label}: length mismatch");
    for (i, (x, y)) in a.data().iter().zip(b.data().iter()).enumerate() {
        assert_eq!(
            x.to_bits(),
            y.to_bits(),
            "{label}: entry {i} differs ({x} vs {y})"
        );
    }
}

#[test]
fn all_forward_paths_agree_bitwise_without_perturbation() {
    for norm in [Normalization::RmsNorm, Normalization::LayerNorm] {
        for seed in [3u64, 17, 91] {
            let (model, seq) = fixture(norm, seed);
            let (cache, incremental) = model.prefill(&seq).unwrap();

            let recomputed = model.forward_with_delta(&seq, None, &cache).unwrap();
            assert_bitwise("recompute without delta", &incremental, &recomputed);

            let zeros = DeltaKv::zeros(&model, seq.len());
            let zero_delta = model
                .forward_with_delta(&seq, Some(&zeros), &cache)
                .unwrap();
            assert_bitwise("recompute with zero delta", &incremental, &zero_delta);

            let mut g = Graph::new();
            let trace = model.build_forward(&mut g, &seq, None, false).unwrap();
            assert_bitwise("graph without delta", &incremental, g.value(trace.logits_last));

            let mut g2 = Graph::new();
            let trace2 = model
                .build_forward(&mut g2, &seq, Some(&zeros), false)
                .unwrap();
            assert_bitwise(
                "graph with zero delta",
                &incremental,
                g2.value(trace2.logits_last),
            );
        }
    }
}

#[test]
fn greedy_decoding_is_bitwise_reproducible() {
    for norm in [Normalization::RmsNorm, Normalization::LayerNorm] {
        let run = || {
            let (model, mut seq) = fixture(norm, 55);
            let (mut cache, tail) = model.prefill(&seq).unwrap();
            model
                .decode(&mut seq, &mut cache, tail, 6, Sampling::Greedy)
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.hit_end, b.hit_end);
        assert_eq!(a.steps.len(), b.steps.len());
        for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(sa.token, sb.token);
            assert_bitwise("step logits", &sa.logits, &sb.logits);
        }
    }
}

#[test]
fn propagation_over_one_trace_is_deterministic() {
    let (model, seq) = fixture(Normalization::RmsNorm, 7);
    let mut g = Graph::new();
    let trace = model.build_forward(&mut g, &seq, None, false).unwrap();
    let config = RelevanceConfig { epsilon: 1e-9 };
    let first = propagate(&mut g, &trace, tokens::YES, &config).unwrap();
    let first_values = g.value(first.per_token).clone();
    let second = propagate(&mut g, &trace, tokens::YES, &config).unwrap();
    assert_bitwise("per-token relevance", &first_values, g.value(second.per_token));
    assert_eq!(first.per_layer_totals, second.per_layer_totals);
    assert_eq!(first.sink_total, second.sink_total);
}

/// Each redistribution rule must be exactly linear in the incoming
/// relevance: scaling the input relevance scales every output entry.
#[test]
fn rules_are_linear_in_the_incoming_relevance() {
    let (model, seq) = fixture(Normalization::LayerNorm, 23);
    let mut g = Graph::new();
    let trace = model.build_forward(&mut g, &seq, None, false).unwrap();
    let layer = &trace.layers[0];
    let n = seq.len();
    let d = model.config.model_dim;
    let hd = model.config.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(321);
    let mut random_phi = |shape: &[usize]| {
        let count: usize = shape.iter().product();
        let data: Vec<f64> = (0..count).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    const SCALE: f64 = 2.5;
    let assert_scaled = |label: &str, base: &Tensor, scaled: &Tensor| {
        for (i, (b, s)) in base.data().iter().zip(scaled.data().iter()).enumerate() {
            let want = SCALE * b;
            let err = (want - s).abs() / want.abs().max(s.abs()).max(1e-30);
            assert!(
                err < 1e-12,
                "{label}: entry {i} not linear ({want} vs {s})"
            );
        }
    };

    // Linear layer rule on the query projection.
    {
        let phi = g.leaf(random_phi(&[n, d]));
        let phi_big = g.scale(phi, SCALE).unwrap();
        let out = rules::linear(
            &mut g, "t", layer.normed1, layer.wq, layer.q_full, phi, 1e-9,
        )
        .unwrap();
        let out_big = rules::linear(
            &mut g, "t", layer.normed1, layer.wq, layer.q_full, phi_big, 1e-9,
        )
        .unwrap();
        let base = g.value(out.phi).clone();
        assert_scaled("linear", &base, g.value(out_big.phi));
    }

    // Attention-weight rule on the first head.
    {
        let phi = g.leaf(random_phi(&[n, n]));
        let phi_big = g.scale(phi, SCALE).unwrap();
        let out = rules::softmax(&mut g, "t", layer.scores[0], layer.attn[0], phi).unwrap();
        let out_big =
            rules::softmax(&mut g, "t", layer.scores[0], layer.attn[0], phi_big).unwrap();
        let base = g.value(out.phi).clone();
        assert_scaled("softmax", &base, g.value(out_big.phi));
    }

    // Product rule on attention times values.
    {
        let phi = g.leaf(random_phi(&[n, hd]));
        let phi_big = g.scale(phi, SCALE).unwrap();
        let out = rules::bilinear(
            &mut g, "t", layer.attn[0], layer.v_pert[0], layer.head_out[0], phi, 1e-9,
        )
        .unwrap();
        let out_big = rules::bilinear(
            &mut g, "t", layer.attn[0], layer.v_pert[0], layer.head_out[0], phi_big, 1e-9,
        )
        .unwrap();
        let base_a = g.value(out.phi_a).clone();
        let base_b = g.value(out.phi_b).clone();
        assert_scaled("bilinear lhs", &base_a, g.value(out_big.phi_a));
        assert_scaled("bilinear rhs", &base_b, g.value(out_big.phi_b));
    }

    // Residual split on the attention residual.
    {
        let phi = g.leaf(random_phi(&[n, d]));
        let phi_big = g.scale(phi, SCALE).unwrap();
        let out = rules::add_split(
            &mut g,
            "t",
            layer.h_in,
            layer.attn_proj,
            layer.h_after_attn,
            phi,
            1e-9,
        )
        .unwrap();
        let out_big = rules::add_split(
            &mut g,
            "t",
            layer.h_in,
            layer.attn_proj,
            layer.h_after_attn,
            phi_big,
            1e-9,
        )
        .unwrap();
        let base_a = g.value(out.phi_a).clone();
        let base_b = g.value(out.phi_b).clone();
        assert_scaled("add_split lhs", &base_a, g.value(out_big.phi_a));
        assert_scaled("add_split rhs", &base_b, g.value(out_big.phi_b));
    }
}
