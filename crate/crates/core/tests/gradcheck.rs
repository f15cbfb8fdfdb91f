//! Finite-difference validation of every differentiable graph operation and
//! of the end-to-end perturbation gradient the optimizer consumes.
//!
//! Each operation is wrapped in a random weighted-sum scalarizer and its
//! reverse-mode gradient is compared entry by entry against central
//! differences, across 100 seeded random inputs.

use lime_core::lime::{build_kl, build_relevance_loss, log_softmax};
use lime_core::model::{tokens, DeltaKv, Model, ModelConfig, MultimodalSequence, Normalization};
use lime_core::relevance::{propagate, RelevanceConfig};
use lime_core::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

fn seeded(name: &str, seed: u64) -> ChaCha8Rng {
    let tag = name
        .bytes()
        .fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(tag ^ (seed.wrapping_mul(0x9E3779B97F4A7C15)))
}

fn fill(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values with magnitude in [min_abs, max_abs] and random sign, keeping
/// rational-op denominators clear of zero.
fn fill_signed(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count)
        .map(|_| {
            let mag = min_abs + (max_abs - min_abs) * rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compare reverse-mode gradients of `scalarize(build(inputs))` against
/// central differences for every entry of every input.
fn check_op<FI, FB>(name: &str, make_inputs: FI, build: FB)
where
    FI: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    FB: Fn(&mut Graph, &[NodeId]) -> lime_core::tensor::Result<NodeId>,
{
    for seed in 0..SEEDS {
        let mut rng = seeded(name, seed);
        let inputs = make_inputs(&mut rng);

        // Discover the output length, then freeze scalarizer weights.
        let out_len = {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &ids).unwrap();
            g.value(out).len()
        };
        let weights: Vec<f64> = (0..out_len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();

        let eval = |xs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &ids).unwrap();
            let shape = g.value(out).shape().to_vec();
            let w = g.constant(Tensor::new(shape, weights.clone()).unwrap());
            let prod = g.mul(out, w).unwrap();
            let s = g.sum_axis(prod, None).unwrap();
            g.value(s).scalar_value()
        };

        let grads = {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &ids).unwrap();
            let shape = g.value(out).shape().to_vec();
            let w = g.constant(Tensor::new(shape, weights.clone()).unwrap());
            let prod = g.mul(out, w).unwrap();
            let s = g.sum_axis(prod, None).unwrap();
            g.gradient(s, &ids).unwrap()
        };

        for (k, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += STEP;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= STEP;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
                let analytic = grads[k].data()[e];
                assert!(
                    rel_err(analytic, fd) < OP_TOL,
                    "{name} seed {seed} input {k} entry {e}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    check_op(
        "add",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0), fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.add(ids[0], ids[1]),
    );
    check_op(
        "mul",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0), fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.mul(ids[0], ids[1]),
    );
    // Keep the two arguments separated so the max is locally smooth.
    check_op(
        "maximum",
        |r| {
            let a = fill(r, &[2, 3], -2.0, 2.0);
            let mut b = fill(r, &[2, 3], -2.0, 2.0);
            for (bv, av) in b.data_mut().iter_mut().zip(a.data().iter()) {
                if (*bv - av).abs() < 0.1 {
                    *bv = av + 0.3;
                }
            }
            vec![a, b]
        },
        |g, ids| g.maximum(ids[0], ids[1]),
    );
}

#[test]
fn matrix_ops() {
    check_op(
        "matmul",
        |r| vec![fill(r, &[2, 3], -1.5, 1.5), fill(r, &[3, 2], -1.5, 1.5)],
        |g, ids| g.matmul(ids[0], ids[1]),
    );
    check_op(
        "transpose",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.transpose(ids[0]),
    );
    check_op(
        "slice_cols",
        |r| vec![fill(r, &[3, 4], -2.0, 2.0)],
        |g, ids| g.slice(ids[0], 1, 1, 2),
    );
    check_op(
        "slice_rows",
        |r| vec![fill(r, &[3, 4], -2.0, 2.0)],
        |g, ids| g.slice(ids[0], 0, 0, 2),
    );
    check_op(
        "concat_rows",
        |r| vec![fill(r, &[2, 2], -2.0, 2.0), fill(r, &[3, 2], -2.0, 2.0)],
        |g, ids| g.concat(ids, 0),
    );
    check_op(
        "concat_cols",
        |r| vec![fill(r, &[2, 2], -2.0, 2.0), fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.concat(ids, 1),
    );
}

#[test]
fn scalar_maps() {
    check_op(
        "exp",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.exp(ids[0]),
    );
    check_op(
        "log",
        |r| vec![fill(r, &[2, 3], 0.5, 3.0)],
        |g, ids| g.log(ids[0]),
    );
    check_op(
        "sqrt",
        |r| vec![fill(r, &[2, 3], 0.5, 3.0)],
        |g, ids| g.sqrt(ids[0]),
    );
    check_op(
        "scale",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.scale(ids[0], -1.7),
    );
    check_op(
        "recip_eps",
        |r| vec![fill_signed(r, &[2, 3], 0.5, 2.0)],
        |g, ids| g.recip_eps(ids[0], 1e-9),
    );
    // Piecewise constant: both the reverse-mode and the finite-difference
    // derivatives must vanish away from zero.
    check_op(
        "sign",
        |r| vec![fill_signed(r, &[2, 3], 0.5, 2.0)],
        |g, ids| g.sign(ids[0]),
    );
}

#[test]
fn reductions_and_broadcasts() {
    check_op(
        "sum_all",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.sum_axis(ids[0], None),
    );
    check_op(
        "sum_rows",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.sum_axis(ids[0], Some(0)),
    );
    check_op(
        "sum_cols",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.sum_axis(ids[0], Some(1)),
    );
    check_op(
        "sum_vector",
        |r| vec![fill(r, &[4], -2.0, 2.0)],
        |g, ids| g.sum_axis(ids[0], Some(0)),
    );
    check_op(
        "mean",
        |r| vec![fill(r, &[2, 3], -2.0, 2.0)],
        |g, ids| g.mean(ids[0]),
    );
    check_op(
        "broadcast_rows",
        |r| vec![fill(r, &[3], -2.0, 2.0)],
        |g, ids| g.broadcast_rows(ids[0], 2),
    );
    check_op(
        "broadcast_cols",
        |r| vec![fill(r, &[2], -2.0, 2.0)],
        |g, ids| g.broadcast_cols(ids[0], 3),
    );
    check_op(
        "broadcast_scalar",
        |r| vec![fill(r, &[1], -2.0, 2.0)],
        |g, ids| g.broadcast_scalar(ids[0], vec![2, 3]),
    );
}

#[test]
fn normalization_ops() {
    check_op(
        "softmax_vector",
        |r| vec![fill(r, &[5], -3.0, 3.0)],
        |g, ids| g.softmax(ids[0], 0),
    );
    check_op(
        "softmax_rows",
        |r| vec![fill(r, &[2, 4], -3.0, 3.0)],
        |g, ids| g.softmax(ids[0], 1),
    );
    check_op(
        "softmax_cols",
        |r| vec![fill(r, &[3, 2], -3.0, 3.0)],
        |g, ids| g.softmax(ids[0], 0),
    );
    check_op(
        "layer_norm_stats",
        |r| vec![fill(r, &[3, 4], -2.0, 2.0)],
        |g, ids| g.layer_norm_stats(ids[0], 1e-6),
    );
}

#[test]
fn composite_chains() {
    // The gated activation used in the feed-forward block.
    check_op(
        "silu_chain",
        |r| vec![fill(r, &[2, 3], -3.0, 3.0)],
        |g, ids| {
            let neg = g.scale(ids[0], -1.0)?;
            let e = g.exp(neg)?;
            let ones = g.constant(Tensor::new(vec![2, 3], vec![1.0; 6])?);
            let den = g.add(e, ones)?;
            let sig = g.recip_eps(den, 0.0)?;
            g.mul(ids[0], sig)
        },
    );
    // The row-normalization pattern used by the norm blocks.
    check_op(
        "rms_chain",
        |r| vec![fill_signed(r, &[3, 4], 0.2, 2.0)],
        |g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            let ssum = g.sum_axis(sq, Some(1))?;
            let msq = g.scale(ssum, 0.25)?;
            let epsv = g.constant(Tensor::vector(vec![1e-6; 3]));
            let meps = g.add(msq, epsv)?;
            let root = g.sqrt(meps)?;
            let inv = g.recip_eps(root, 0.0)?;
            let invb = g.broadcast_cols(inv, 4)?;
            g.mul(ids[0], invb)
        },
    );
}

// ---------------------------------------------------------------------------
// End-to-end: gradients of relevance-derived objectives with respect to the
// key/value perturbation, through forward pass and propagation combined.
// ---------------------------------------------------------------------------

fn fixture_model(seed: u64) -> Model {
    Model::init(
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 12,
            vocab_size: 12,
            max_sequence: 12,
            patch_dim: 4,
            normalization: Normalization::RmsNorm,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn fixture_sequence(m: &Model) -> MultimodalSequence {
    let patches = Tensor::matrix(
        2,
        4,
        vec![0.4, -0.2, 0.1, 0.7, -0.5, 0.3, 0.2, -0.1],
    )
    .unwrap();
    MultimodalSequence::build(
        m,
        &patches,
        &[0],
        &[tokens::QUERY, tokens::FIRST_OBJECT, tokens::ANSWER],
        false,
    )
    .unwrap()
}

fn random_delta(m: &Model, n: usize, seed: u64) -> DeltaKv {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = DeltaKv::zeros(m, n);
    for layer in delta.layers.iter_mut() {
        for v in layer.dk.data_mut().iter_mut() {
            *v = (rng.gen::<f64>() - 0.5) * 0.1;
        }
        for v in layer.dv.data_mut().iter_mut() {
            *v = (rng.gen::<f64>() - 0.5) * 0.1;
        }
    }
    delta
}

#[derive(Clone, Copy)]
enum Objective {
    /// Total relevance over all tokens.
    PhiSum,
    /// Relevance concentration loss plus weighted KL anchor.
    Composite,
}

const TARGET: usize = tokens::NO;
const LAMBDA: f64 = 0.1;
const TAU: f64 = 0.1;

fn objective_value(
    m: &Model,
    s: &MultimodalSequence,
    delta: &DeltaKv,
    reference_log_probs: &[f64],
    objective: Objective,
) -> f64 {
    let mut g = Graph::new();
    let trace = m.build_forward(&mut g, s, Some(delta), false).unwrap();
    let prop = propagate(&mut g, &trace, TARGET, &RelevanceConfig { epsilon: 1e-6 }).unwrap();
    match objective {
        Objective::PhiSum => g.value(prop.per_token).sum(),
        Objective::Composite => {
            let promoted = s.modality_indices().to_vec();
            let mut support = promoted.clone();
            support.extend(s.text_and_generated());
            support.sort_unstable();
            let rel = build_relevance_loss(&mut g, prop.per_token, &promoted, &support, TAU)
                .unwrap();
            let kl = build_kl(&mut g, trace.logits_last, reference_log_probs).unwrap();
            let weighted = g.scale(kl, LAMBDA).unwrap();
            let loss = g.add(rel, weighted).unwrap();
            g.value(loss).scalar_value()
        }
    }
}

fn objective_gradients(
    m: &Model,
    s: &MultimodalSequence,
    delta: &DeltaKv,
    reference_log_probs: &[f64],
    objective: Objective,
) -> Vec<Tensor> {
    let mut g = Graph::new();
    let trace = m.build_forward(&mut g, s, Some(delta), false).unwrap();
    let prop = propagate(&mut g, &trace, TARGET, &RelevanceConfig { epsilon: 1e-6 }).unwrap();
    let leaves: Vec<NodeId> = trace
        .layers
        .iter()
        .flat_map(|l| [l.delta_k.unwrap(), l.delta_v.unwrap()])
        .collect();
    let out = match objective {
        Objective::PhiSum => g.sum_axis(prop.per_token, None).unwrap(),
        Objective::Composite => {
            let promoted = s.modality_indices().to_vec();
            let mut support = promoted.clone();
            support.extend(s.text_and_generated());
            support.sort_unstable();
            let rel = build_relevance_loss(&mut g, prop.per_token, &promoted, &support, TAU)
                .unwrap();
            let kl = build_kl(&mut g, trace.logits_last, reference_log_probs).unwrap();
            let weighted = g.scale(kl, LAMBDA).unwrap();
            g.add(rel, weighted).unwrap()
        }
    };
    g.gradient(out, &leaves).unwrap()
}

fn check_objective(objective: Objective, tol: f64) {
    for seed in 0..3u64 {
        let m = fixture_model(100 + seed);
        let s = fixture_sequence(&m);
        let (_, tail) = m.prefill(&s).unwrap();
        let reference = log_softmax(tail.data());
        let delta = random_delta(&m, s.len(), 500 + seed);
        let grads = objective_gradients(&m, &s, &delta, &reference, objective);

        for (li, layer) in delta.layers.iter().enumerate() {
            for (which, tensor) in [(0usize, &layer.dk), (1usize, &layer.dv)] {
                let len = tensor.len();
                for e in [0, len / 2, len - 1] {
                    let mut plus = delta.clone();
                    let mut minus = delta.clone();
                    let (tp, tm) = if which == 0 {
                        (&mut plus.layers[li].dk, &mut minus.layers[li].dk)
                    } else {
                        (&mut plus.layers[li].dv, &mut minus.layers[li].dv)
                    };
                    tp.data_mut()[e] += STEP;
                    tm.data_mut()[e] -= STEP;
                    let fd = (objective_value(&m, &s, &plus, &reference, objective)
                        - objective_value(&m, &s, &minus, &reference, objective))
                        / (2.0 * STEP);
                    let analytic = grads[li * 2 + which].data()[e];
                    let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        err < tol,
                        "seed {seed} layer {li} tensor {which} entry {e}: \
                         analytic {analytic} vs fd {fd} (rel {err})"
                    );
                }
            }
        }
    }
}

#[test]
fn relevance_total_gradient_matches_finite_differences() {
    check_objective(Objective::PhiSum, 1e-3);
}

#[test]
fn composite_loss_gradient_matches_finite_differences() {
    check_objective(Objective::Composite, 1e-3);
}
