//! Relevance propagation: redistributing one output logit back onto the
//! input sequence.
//!
//! [`propagate`] walks a recorded forward trace from the chosen logit down to
//! the embeddings, applying one redistribution rule per architectural site
//! (see [`rules`]). The result is built entirely out of graph operations, so
//! per-token relevance stays differentiable with respect to anything the
//! forward pass consumed, including key/value perturbations.
//!
//! Conservation is not a global assumption but a per-rule ledger: rules that
//! absorb relevance (softmax bias, epsilon stabilizers, perturbation shares)
//! report how much, and [`Propagated::per_layer_totals`] adds those sinks
//! back so every level of the walk accounts for the full seed. Audits compare
//! each measured absorption against the rule's closed form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ForwardTrace, MultimodalSequence};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub mod rules;

pub use rules::RuleAudit;

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("target token {token} outside vocabulary of size {vocab}")]
    Target { token: usize, vocab: usize },
}

pub type Result<T> = std::result::Result<T, RelevanceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceConfig {
    /// Stabilizer for every denominator-bearing rule. Zero means exact
    /// conservation, at the price of a hard error when a denominator falls
    /// inside the dead band.
    pub epsilon: f64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig { epsilon: 1e-6 }
    }
}

/// The outcome of one propagation, as graph nodes plus eager bookkeeping.
#[derive(Debug)]
pub struct Propagated {
    /// Relevance over the input embeddings, [N, d].
    pub phi_x: NodeId,
    /// Row sums of `phi_x`: the per-token relevance, [N].
    pub per_token: NodeId,
    /// Seed value: the target logit.
    pub seed: f64,
    pub target_token: usize,
    /// One record per absorbing rule application, in walk order.
    pub audits: Vec<RuleAudit>,
    /// Sink-adjusted relevance total at each level of the walk, top to
    /// bottom: seed, below the output head, then below each layer. Every
    /// entry should equal the seed up to float drift.
    pub per_layer_totals: Vec<f64>,
    /// Total relevance absorbed away from the token path.
    pub sink_total: f64,
}

/// A propagation summarized into plain numbers for serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub target_token: usize,
    pub seed: f64,
    pub per_token: Vec<f64>,
    pub modality_total: f64,
    pub text_total: f64,
    pub grounding_total: f64,
    pub sink_total: f64,
    pub per_layer_totals: Vec<f64>,
    /// Largest jump between consecutive sink-adjusted totals.
    pub max_layer_drift: f64,
    /// Largest |measured - expected| across rule audits.
    pub max_audit_residual: f64,
}

impl Propagated {
    pub fn max_layer_drift(&self) -> f64 {
        self.per_layer_totals
            .windows(2)
            .map(|w| (w[0] - w[1]).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_audit_residual(&self) -> f64 {
        self.audits
            .iter()
            .map(|a| a.residual().abs())
            .fold(0.0, f64::max)
    }

    /// Summarize against the sequence the forward pass consumed.
    pub fn map(&self, g: &Graph, seq: &MultimodalSequence) -> RelevanceMap {
        let per_token = g.value(self.per_token).data().to_vec();
        let sum_over = |idx: &[usize]| idx.iter().map(|&i| per_token[i]).sum();
        RelevanceMap {
            target_token: self.target_token,
            seed: self.seed,
            modality_total: sum_over(seq.modality_indices()),
            text_total: sum_over(&seq.text_and_generated()),
            grounding_total: sum_over(seq.grounding_indices()),
            sink_total: self.sink_total,
            per_layer_totals: self.per_layer_totals.clone(),
            max_layer_drift: self.max_layer_drift(),
            max_audit_residual: self.max_audit_residual(),
            per_token,
        }
    }
}

/// Walk `trace` from the logit of `target_token` down to the embeddings.
pub fn propagate(
    g: &mut Graph,
    trace: &ForwardTrace,
    target_token: usize,
    config: &RelevanceConfig,
) -> Result<Propagated> {
    let eps = config.epsilon;
    let n = trace.seq_len;
    let vocab = g.value(trace.logits_last).cols();
    if target_token >= vocab {
        return Err(RelevanceError::Target {
            token: target_token,
            vocab,
        });
    }
    let d = g.value(trace.x).cols();

    let mut audits: Vec<RuleAudit> = Vec::new();
    let mut sinks = 0.0;
    let mut totals = Vec::with_capacity(trace.layers.len() + 2);

    // Seed: the target logit's own value, placed at its slot.
    let onehot = {
        let mut v = vec![0.0; vocab];
        v[target_token] = 1.0;
        g.constant(Tensor::new(vec![1, vocab], v).expect("static shape"))
    };
    let seed_node = g.mul(trace.logits_last, onehot)?;
    let seed = g.value(seed_node).data()[target_token];
    totals.push(seed);

    // Output head, then expand the last row to full sequence shape. The
    // final norm passes relevance through unchanged.
    let head = rules::linear(
        g,
        "output_projection",
        trace.last_row,
        trace.w_out,
        trace.logits_last,
        seed_node,
        eps,
    )?;
    sinks += head.audit.measured;
    audits.push(head.audit);
    let mut phi_h = if n == 1 {
        head.phi
    } else {
        let zeros = g.constant(Tensor::zeros(vec![n - 1, d]));
        g.concat(&[zeros, head.phi], 0)?
    };
    totals.push(g.value(phi_h).sum() + sinks);

    for (li, layer) in trace.layers.iter().enumerate().rev() {
        let heads = layer.q_heads.len();
        let hd = g.value(layer.q_heads[0]).cols();

        // Feed-forward residual: h_out = h_after_attn + ff_out.
        let res_ff = rules::add_split(
            g,
            &format!("layer{li}.residual_ff"),
            layer.h_after_attn,
            layer.ff_out,
            layer.h_out,
            phi_h,
            eps,
        )?;
        sinks += res_ff.audit.measured;
        audits.push(res_ff.audit);

        // Down the feed-forward: second linear, activation (identity),
        // first linear, then the norm passes through to h_after_attn.
        let ff2 = rules::linear(
            g,
            &format!("layer{li}.w_ff2"),
            layer.ff_act,
            layer.w_ff2,
            layer.ff_out,
            res_ff.phi_b,
            eps,
        )?;
        sinks += ff2.audit.measured;
        audits.push(ff2.audit);
        let ff1 = rules::linear(
            g,
            &format!("layer{li}.w_ff1"),
            layer.normed2,
            layer.w_ff1,
            layer.ff_hidden,
            ff2.phi,
            eps,
        )?;
        sinks += ff1.audit.measured;
        audits.push(ff1.audit);
        let phi_h_after = g.add(res_ff.phi_a, ff1.phi)?;

        // Attention residual: h_after_attn = h_in + attn_proj.
        let res_at = rules::add_split(
            g,
            &format!("layer{li}.residual_attn"),
            layer.h_in,
            layer.attn_proj,
            layer.h_after_attn,
            phi_h_after,
            eps,
        )?;
        sinks += res_at.audit.measured;
        audits.push(res_at.audit);

        // Through the output projection of attention.
        let wo = rules::linear(
            g,
            &format!("layer{li}.wo"),
            layer.concat,
            layer.wo,
            layer.attn_proj,
            res_at.phi_b,
            eps,
        )?;
        sinks += wo.audit.measured;
        audits.push(wo.audit);

        let mut phi_q_heads = Vec::with_capacity(heads);
        let mut phi_k_heads = Vec::with_capacity(heads);
        let mut phi_v_heads = Vec::with_capacity(heads);
        for hh in 0..heads {
            let phi_o = g.slice(wo.phi, 1, hh * hd, hd)?;

            // head_out = attn · v_pert, both factors carry relevance.
            let av = rules::bilinear(
                g,
                &format!("layer{li}.head{hh}.attn_value"),
                layer.attn[hh],
                layer.v_pert[hh],
                layer.head_out[hh],
                phi_o,
                eps,
            )?;
            sinks += av.audit.measured;
            audits.push(av.audit);

            // Attention weights back through the softmax. Masked entries
            // carry exactly zero relevance, and the mask addition itself is
            // a constant shift, so scores stand in for pre-mask scores.
            let sm = rules::softmax(
                g,
                &format!("layer{li}.head{hh}.softmax"),
                layer.scores[hh],
                layer.attn[hh],
                av.phi_a,
            )?;
            sinks += sm.audit.measured;
            audits.push(sm.audit);

            // scores = q · k_pertᵀ, both factors carry relevance.
            let kt = g.transpose(layer.k_pert[hh])?;
            let qk = rules::bilinear(
                g,
                &format!("layer{li}.head{hh}.query_key"),
                layer.q_heads[hh],
                kt,
                layer.scores[hh],
                sm.phi,
                eps,
            )?;
            sinks += qk.audit.measured;
            audits.push(qk.audit);
            let phi_k_pert = g.transpose(qk.phi_b)?;

            // The query scaling is a reparametrization; relevance passes
            // through unchanged onto the q_full slice.
            phi_q_heads.push(qk.phi_a);

            // Perturbation injection points: the clean share continues, the
            // delta share (plus stabilizer dust) leaves the token path.
            match (layer.delta_k, layer.delta_v) {
                (Some(dk), Some(dv)) => {
                    let ks = rules::add_split(
                        g,
                        &format!("layer{li}.head{hh}.delta_k"),
                        layer.k_heads[hh],
                        dk,
                        layer.k_pert[hh],
                        phi_k_pert,
                        eps,
                    )?;
                    let k_leak = rules::split_leak(
                        g,
                        layer.k_heads[hh],
                        layer.k_pert[hh],
                        phi_k_pert,
                        eps,
                    );
                    let k_measured =
                        g.value(phi_k_pert).sum() - g.value(ks.phi_a).sum();
                    sinks += k_measured;
                    audits.push(RuleAudit {
                        site: format!("layer{li}.head{hh}.delta_k"),
                        measured: k_measured,
                        expected: k_leak,
                    });
                    phi_k_heads.push(ks.phi_a);

                    let vs = rules::add_split(
                        g,
                        &format!("layer{li}.head{hh}.delta_v"),
                        layer.v_heads[hh],
                        dv,
                        layer.v_pert[hh],
                        av.phi_b,
                        eps,
                    )?;
                    let v_leak = rules::split_leak(
                        g,
                        layer.v_heads[hh],
                        layer.v_pert[hh],
                        av.phi_b,
                        eps,
                    );
                    let v_measured = g.value(av.phi_b).sum() - g.value(vs.phi_a).sum();
                    sinks += v_measured;
                    audits.push(RuleAudit {
                        site: format!("layer{li}.head{hh}.delta_v"),
                        measured: v_measured,
                        expected: v_leak,
                    });
                    phi_v_heads.push(vs.phi_a);
                }
                _ => {
                    phi_k_heads.push(phi_k_pert);
                    phi_v_heads.push(av.phi_b);
                }
            }
        }

        // Heads partition the projection columns, so relevance on the full
        // q/k/v matrices is the columnwise concatenation.
        let phi_q_full = g.concat(&phi_q_heads, 1)?;
        let phi_k_full = g.concat(&phi_k_heads, 1)?;
        let phi_v_full = g.concat(&phi_v_heads, 1)?;

        let rq = rules::linear(
            g,
            &format!("layer{li}.wq"),
            layer.normed1,
            layer.wq,
            layer.q_full,
            phi_q_full,
            eps,
        )?;
        sinks += rq.audit.measured;
        audits.push(rq.audit);
        let rk = rules::linear(
            g,
            &format!("layer{li}.wk"),
            layer.normed1,
            layer.wk,
            layer.k_full,
            phi_k_full,
            eps,
        )?;
        sinks += rk.audit.measured;
        audits.push(rk.audit);
        let rv = rules::linear(
            g,
            &format!("layer{li}.wv"),
            layer.normed1,
            layer.wv,
            layer.v_full,
            phi_v_full,
            eps,
        )?;
        sinks += rv.audit.measured;
        audits.push(rv.audit);

        // The first norm passes through; h_in collects the skip share plus
        // all three projections' shares.
        let qk_sum = g.add(rq.phi, rk.phi)?;
        let qkv_sum = g.add(qk_sum, rv.phi)?;
        phi_h = g.add(res_at.phi_a, qkv_sum)?;
        totals.push(g.value(phi_h).sum() + sinks);
    }

    let per_token = g.sum_axis(phi_h, Some(1))?;
    Ok(Propagated {
        phi_x: phi_h,
        per_token,
        seed,
        target_token,
        audits,
        per_layer_totals: totals,
        sink_total: sinks,
    })
}
