//! Forward passes.
//!
//! Two implementations of the same function:
//!
//! * a graph builder that records every intermediate as a node, used whenever
//!   gradients or relevance propagation are needed (it recomputes the full
//!   sequence so perturbations influence every downstream activation), and
//! * an incremental cache-driven path used for plain decoding and reference
//!   distributions.
//!
//! Both run the identical arithmetic in the identical order via the shared
//! kernels in `tensor`, and tests pin them to bit-for-bit equality. Keep any
//! change mirrored in both or that guarantee breaks.

use crate::tensor::{matmul_acc, softmax_row, Graph, NodeId, Tensor};

use super::{DeltaKv, KvCache, Model, ModelError, MultimodalSequence, Normalization, Result};

/// Finite stand-in for -inf in causal masks. Large enough that exp underflows
/// to exactly 0, small enough that every intermediate stays finite.
pub const MASK_NEG: f64 = -1e9;

/// Leaf ids for one layer's weights.
#[derive(Debug, Clone)]
pub struct LayerWeightNodes {
    pub norm1_gain: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub norm2_gain: NodeId,
    pub w_ff1: NodeId,
    pub w_ff2: NodeId,
}

/// Leaf ids for every learned tensor, so several forward passes recorded on
/// one graph (a training batch) share parameters and their gradients
/// accumulate across examples.
#[derive(Debug, Clone)]
pub struct WeightNodes {
    pub token_embedding: NodeId,
    pub position_embedding: NodeId,
    pub projector: NodeId,
    pub layers: Vec<LayerWeightNodes>,
    pub final_norm_gain: NodeId,
    pub output_projection: NodeId,
}

impl WeightNodes {
    /// Leaf ids in the same order as `Model::named_tensors`.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_embedding, self.position_embedding, self.projector];
        for l in &self.layers {
            out.extend([
                l.norm1_gain,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.norm2_gain,
                l.w_ff1,
                l.w_ff2,
            ]);
        }
        out.push(self.final_norm_gain);
        out.push(self.output_projection);
        out
    }
}

/// Node ids of one layer's intermediates, exposed for relevance propagation.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Input hidden state of this layer, [N, d].
    pub h_in: NodeId,
    /// First norm output (QKV input), [N, d].
    pub normed1: NodeId,
    /// Full projections before head split, [N, d].
    pub q_full: NodeId,
    pub k_full: NodeId,
    pub v_full: NodeId,
    /// Per-head tensors, [N, head_dim]. Queries are pre-scaled by
    /// 1/sqrt(head_dim); keys/values are clean (pre-perturbation).
    pub q_heads: Vec<NodeId>,
    pub k_heads: Vec<NodeId>,
    pub v_heads: Vec<NodeId>,
    /// Perturbed keys/values actually used by attention. Equal to
    /// `k_heads`/`v_heads` when no delta is attached.
    pub k_pert: Vec<NodeId>,
    pub v_pert: Vec<NodeId>,
    /// Masked pre-softmax scores and attention weights, [N, N] per head.
    pub scores: Vec<NodeId>,
    pub attn: Vec<NodeId>,
    /// Attention output per head, [N, head_dim].
    pub head_out: Vec<NodeId>,
    /// Heads re-joined, [N, d]; its projection; and the residual sum.
    pub concat: NodeId,
    pub attn_proj: NodeId,
    pub h_after_attn: NodeId,
    pub normed2: NodeId,
    /// Feed-forward pieces: pre-activation, activated, output, residual sum.
    pub ff_hidden: NodeId,
    pub ff_act: NodeId,
    pub ff_out: NodeId,
    pub h_out: NodeId,
    /// Perturbation leaves ([N, head_dim]) when a delta was attached.
    pub delta_k: Option<NodeId>,
    pub delta_v: Option<NodeId>,
    /// Weight leaves for the relevance linear rules.
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub w_ff1: NodeId,
    pub w_ff2: NodeId,
}

/// Node ids for a whole forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input embeddings, [N, d].
    pub x: NodeId,
    pub layers: Vec<LayerTrace>,
    /// Final norm output, [N, d], and its last row, [1, d].
    pub final_normed: NodeId,
    pub last_row: NodeId,
    pub w_out: NodeId,
    /// Last-position logits, [1, vocab].
    pub logits_last: NodeId,
    /// Full-sequence logits, [N, vocab]; only built when requested.
    pub logits_full: Option<NodeId>,
    pub seq_len: usize,
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_NEG;
        }
    }
    Tensor::new(vec![n, n], data).expect("static shape")
}

impl Model {
    /// Insert one leaf per learned tensor.
    pub fn insert_weight_nodes(&self, g: &mut Graph) -> WeightNodes {
        WeightNodes {
            token_embedding: g.leaf(self.token_embedding.clone()),
            position_embedding: g.leaf(self.position_embedding.clone()),
            projector: g.leaf(self.projector.clone()),
            layers: self
                .layers
                .iter()
                .map(|lw| LayerWeightNodes {
                    norm1_gain: g.leaf(lw.norm1_gain.clone()),
                    wq: g.leaf(lw.wq.clone()),
                    wk: g.leaf(lw.wk.clone()),
                    wv: g.leaf(lw.wv.clone()),
                    wo: g.leaf(lw.wo.clone()),
                    norm2_gain: g.leaf(lw.norm2_gain.clone()),
                    w_ff1: g.leaf(lw.w_ff1.clone()),
                    w_ff2: g.leaf(lw.w_ff2.clone()),
                })
                .collect(),
            final_norm_gain: g.leaf(self.final_norm_gain.clone()),
            output_projection: g.leaf(self.output_projection.clone()),
        }
    }

    fn norm_block(
        &self,
        g: &mut Graph,
        x: NodeId,
        gain: NodeId,
        n: usize,
    ) -> crate::tensor::Result<NodeId> {
        let d = self.config.model_dim;
        let eps = self.config.norm_epsilon;
        let gain_b = g.broadcast_rows(gain, n)?;
        match self.config.normalization {
            Normalization::RmsNorm => {
                let sq = g.mul(x, x)?;
                let ssum = g.sum_axis(sq, Some(1))?;
                let msq = g.scale(ssum, 1.0 / d as f64)?;
                let epsv = g.constant(Tensor::vector(vec![eps; n]));
                let meps = g.add(msq, epsv)?;
                let rms = g.sqrt(meps)?;
                let inv = g.recip_eps(rms, 0.0)?;
                let invb = g.broadcast_cols(inv, d)?;
                let xn = g.mul(x, invb)?;
                g.mul(xn, gain_b)
            }
            Normalization::LayerNorm => {
                let stats = g.layer_norm_stats(x, eps)?;
                let mu2 = g.slice(stats, 1, 0, 1)?;
                let mu = g.sum_axis(mu2, Some(1))?;
                let rs2 = g.slice(stats, 1, 1, 1)?;
                let rstd = g.sum_axis(rs2, Some(1))?;
                let mub = g.broadcast_cols(mu, d)?;
                let negmu = g.scale(mub, -1.0)?;
                let cent = g.add(x, negmu)?;
                let rb = g.broadcast_cols(rstd, d)?;
                let xn = g.mul(cent, rb)?;
                g.mul(xn, gain_b)
            }
        }
    }

    fn silu(
        &self,
        g: &mut Graph,
        x: NodeId,
        n: usize,
        width: usize,
    ) -> crate::tensor::Result<NodeId> {
        let neg = g.scale(x, -1.0)?;
        let e = g.exp(neg)?;
        let ones = g.constant(Tensor::new(vec![n, width], vec![1.0; n * width]).expect("static"));
        let den = g.add(e, ones)?;
        let sig = g.recip_eps(den, 0.0)?;
        g.mul(x, sig)
    }

    /// Record a forward pass from an already-built embedding node `x`
    /// ([N, d]), reusing the weight leaves in `weights`. When `delta` is
    /// given, each layer's attention uses keys K + dK and values V + dV (the
    /// perturbation leaves are exposed in the trace so callers can
    /// differentiate against them). `full_logits` additionally produces
    /// logits for every position.
    pub fn build_forward_with(
        &self,
        g: &mut Graph,
        weights: &WeightNodes,
        x: NodeId,
        delta: Option<&DeltaKv>,
        full_logits: bool,
    ) -> Result<ForwardTrace> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.model_dim || shape[0] == 0 {
            return Err(ModelError::Sequence(format!(
                "forward input must be [n, {}], got {:?}",
                self.config.model_dim, shape
            )));
        }
        let n = shape[0];
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        if let Some(dl) = delta {
            if dl.seq_len() != n {
                return Err(ModelError::DeltaMismatch {
                    delta: dl.seq_len(),
                    cache: n,
                });
            }
            if dl.head_dim() != hd || dl.layers.len() != self.config.num_layers {
                return Err(ModelError::Sequence(
                    "delta layer count or head width does not match model".into(),
                ));
            }
        }
        let mask = g.constant(causal_mask(n));
        let inv_sqrt = 1.0 / (hd as f64).sqrt();

        let mut h = x;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for (li, lwn) in weights.layers.iter().enumerate() {
            let h_in = h;
            let normed1 = self.norm_block(g, h, lwn.norm1_gain, n)?;
            let q_full = g.matmul(normed1, lwn.wq)?;
            let k_full = g.matmul(normed1, lwn.wk)?;
            let v_full = g.matmul(normed1, lwn.wv)?;

            let (delta_k, delta_v) = match delta {
                Some(dl) => (
                    Some(g.leaf(dl.layers[li].dk.clone())),
                    Some(g.leaf(dl.layers[li].dv.clone())),
                ),
                None => (None, None),
            };

            let mut q_heads = Vec::with_capacity(heads);
            let mut k_heads = Vec::with_capacity(heads);
            let mut v_heads = Vec::with_capacity(heads);
            let mut k_pert = Vec::with_capacity(heads);
            let mut v_pert = Vec::with_capacity(heads);
            let mut scores = Vec::with_capacity(heads);
            let mut attn = Vec::with_capacity(heads);
            let mut head_out = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qs = g.slice(q_full, 1, hh * hd, hd)?;
                let q = g.scale(qs, inv_sqrt)?;
                let k = g.slice(k_full, 1, hh * hd, hd)?;
                let v = g.slice(v_full, 1, hh * hd, hd)?;
                let kp = match delta_k {
                    Some(dk) => g.add(k, dk)?,
                    None => k,
                };
                let vp = match delta_v {
                    Some(dv) => g.add(v, dv)?,
                    None => v,
                };
                let kt = g.transpose(kp)?;
                let s_raw = g.matmul(q, kt)?;
                let s = g.add(s_raw, mask)?;
                let a = g.softmax(s, 1)?;
                let o = g.matmul(a, vp)?;
                q_heads.push(q);
                k_heads.push(k);
                v_heads.push(v);
                k_pert.push(kp);
                v_pert.push(vp);
                scores.push(s);
                attn.push(a);
                head_out.push(o);
            }
            let concat = g.concat(&head_out, 1)?;
            let attn_proj = g.matmul(concat, lwn.wo)?;
            let h_after_attn = g.add(h, attn_proj)?;

            let normed2 = self.norm_block(g, h_after_attn, lwn.norm2_gain, n)?;
            let ff_hidden = g.matmul(normed2, lwn.w_ff1)?;
            let ff_act = self.silu(g, ff_hidden, n, self.config.ff_dim())?;
            let ff_out = g.matmul(ff_act, lwn.w_ff2)?;
            let h_out = g.add(h_after_attn, ff_out)?;
            h = h_out;

            layers.push(LayerTrace {
                h_in,
                normed1,
                q_full,
                k_full,
                v_full,
                q_heads,
                k_heads,
                v_heads,
                k_pert,
                v_pert,
                scores,
                attn,
                head_out,
                concat,
                attn_proj,
                h_after_attn,
                normed2,
                ff_hidden,
                ff_act,
                ff_out,
                h_out,
                delta_k,
                delta_v,
                wq: lwn.wq,
                wk: lwn.wk,
                wv: lwn.wv,
                wo: lwn.wo,
                w_ff1: lwn.w_ff1,
                w_ff2: lwn.w_ff2,
            });
        }

        let final_normed = self.norm_block(g, h, weights.final_norm_gain, n)?;
        let last = g.slice(final_normed, 0, n - 1, 1)?;
        let logits_last = g.matmul(last, weights.output_projection)?;
        let logits_full = if full_logits {
            Some(g.matmul(final_normed, weights.output_projection)?)
        } else {
            None
        };
        Ok(ForwardTrace {
            x,
            layers,
            final_normed,
            last_row: last,
            w_out: weights.output_projection,
            logits_last,
            logits_full,
            seq_len: n,
        })
    }

    /// Record a full forward pass for one sequence on a fresh set of weight
    /// leaves. See `build_forward_with`.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        seq: &MultimodalSequence,
        delta: Option<&DeltaKv>,
        full_logits: bool,
    ) -> Result<ForwardTrace> {
        let weights = self.insert_weight_nodes(g);
        let x = g.leaf(seq.embeddings().clone());
        self.build_forward_with(g, &weights, x, delta, full_logits)
    }

    /// Next-token logits for the whole sequence, optionally perturbed.
    ///
    /// `cache` must describe exactly the positions of `seq`; a delta must
    /// match the cache length. The computation recomputes every position so
    /// the perturbation is consistently reflected in all downstream
    /// activations; the cache argument pins the caller to a coherent decoding
    /// state rather than serving as a data source here.
    pub fn forward_with_delta(
        &self,
        seq: &MultimodalSequence,
        delta: Option<&DeltaKv>,
        cache: &KvCache,
    ) -> Result<Tensor> {
        if cache.len() != seq.len() {
            return Err(ModelError::CacheMismatch {
                cache: cache.len(),
                seq: seq.len(),
            });
        }
        cache.check_consistent()?;
        if let Some(dl) = delta {
            if dl.seq_len() != cache.len() {
                return Err(ModelError::DeltaMismatch {
                    delta: dl.seq_len(),
                    cache: cache.len(),
                });
            }
        }
        let mut g = Graph::new();
        let trace = self.build_forward(&mut g, seq, delta, false)?;
        let row = g.value(trace.logits_last).data().to_vec();
        Ok(Tensor::vector(row))
    }

    // ------------------------------------------------------------------
    // Incremental path.
    // ------------------------------------------------------------------

    fn norm_row(&self, x: &[f64], gain: &Tensor, out: &mut [f64]) {
        let d = x.len();
        let eps = self.config.norm_epsilon;
        match self.config.normalization {
            Normalization::RmsNorm => {
                // Mirrors the graph composition: sum of squares, scale by 1/d,
                // add eps, sqrt, reciprocal, then (x * inv) * gain.
                let mut ss = 0.0;
                for &v in x {
                    ss += v * v;
                }
                let msq = ss * (1.0 / d as f64);
                let meps = msq + eps;
                let rms = meps.sqrt();
                let inv = 1.0 / rms;
                for j in 0..d {
                    out[j] = (x[j] * inv) * gain.data()[j];
                }
            }
            Normalization::LayerNorm => {
                let (mu, rstd) = crate::tensor::layer_norm_stats_row(x, eps);
                let negmu = mu * -1.0;
                for j in 0..d {
                    out[j] = ((x[j] + negmu) * rstd) * gain.data()[j];
                }
            }
        }
    }

    fn matvec(x: &[f64], w: &Tensor, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        matmul_acc(x, w.data(), out, 1, x.len(), w.shape()[1]);
    }

    /// Process position `cache.len()` of `seq`, appending this position's
    /// keys/values to the cache, and return the logits at that position.
    pub fn advance(&self, seq: &MultimodalSequence, cache: &mut KvCache) -> Result<Tensor> {
        let pos = cache.len();
        if pos >= seq.len() {
            return Err(ModelError::CacheMismatch {
                cache: pos,
                seq: seq.len(),
            });
        }
        let d = self.config.model_dim;
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();

        let mut h: Vec<f64> = seq.embeddings().row(pos).to_vec();
        let mut n1 = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut att_out = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let ffw = self.config.ff_dim();
        let mut ffh = vec![0.0; ffw];
        let mut ffo = vec![0.0; d];

        for (li, lw) in self.layers.iter().enumerate() {
            self.norm_row(&h, &lw.norm1_gain, &mut n1);
            Self::matvec(&n1, &lw.wq, &mut q);
            Self::matvec(&n1, &lw.wk, &mut k);
            Self::matvec(&n1, &lw.wv, &mut v);
            cache.push_row(li, &k, &v);

            let rows = pos + 1;
            let krows = cache.k_rows(li);
            let vrows = cache.v_rows(li);
            att_out.iter_mut().for_each(|x| *x = 0.0);
            let mut scores = vec![0.0; rows];
            let mut weights = vec![0.0; rows];
            for hh in 0..heads {
                let off = hh * hd;
                // Scale q first; the graph path does the same before its matmul.
                let qh: Vec<f64> = q[off..off + hd].iter().map(|&x| x * inv_sqrt).collect();
                for (j, s) in scores.iter_mut().enumerate() {
                    let kr = &krows[j * d + off..j * d + off + hd];
                    let mut acc = 0.0;
                    for e in 0..hd {
                        acc += qh[e] * kr[e];
                    }
                    *s = acc;
                }
                softmax_row(&scores, &mut weights);
                let out = &mut att_out[off..off + hd];
                for (j, &w) in weights.iter().enumerate() {
                    let vr = &vrows[j * d + off..j * d + off + hd];
                    for e in 0..hd {
                        out[e] += w * vr[e];
                    }
                }
            }
            Self::matvec(&att_out, &lw.wo, &mut proj);
            for j in 0..d {
                h[j] += proj[j];
            }

            self.norm_row(&h, &lw.norm2_gain, &mut n1);
            Self::matvec(&n1, &lw.w_ff1, &mut ffh);
            // SiLU, mirroring the graph: x * (1 / (exp(-x) + 1)).
            for x in ffh.iter_mut() {
                let e = (*x * -1.0).exp();
                let den = e + 1.0;
                let sig = 1.0 / den;
                *x *= sig;
            }
            Self::matvec(&ffh, &lw.w_ff2, &mut ffo);
            for j in 0..d {
                h[j] += ffo[j];
            }
        }

        self.norm_row(&h, &self.final_norm_gain, &mut n1);
        let mut logits = vec![0.0; self.config.vocab_size];
        Self::matvec(&n1, &self.output_projection, &mut logits);
        let t = Tensor::vector(logits);
        if let Some(idx) = t.first_non_finite() {
            return Err(ModelError::Tensor(crate::tensor::TensorError::NonFinite {
                op: "advance",
                index: idx,
            }));
        }
        Ok(t)
    }

    /// Run the incremental path over every position, filling a fresh cache.
    /// Returns the cache and the last position's logits.
    pub fn prefill(&self, seq: &MultimodalSequence) -> Result<(KvCache, Tensor)> {
        if seq.is_empty() {
            return Err(ModelError::Sequence("cannot prefill empty sequence".into()));
        }
        let mut cache = KvCache::new(self);
        let mut logits = Tensor::vector(vec![0.0]);
        for _ in 0..seq.len() {
            logits = self.advance(seq, &mut cache)?;
        }
        Ok((cache, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tokens, ModelConfig};

    fn small_model(norm: Normalization) -> Model {
        Model::init(
            ModelConfig {
                num_layers: 2,
                num_heads: 2,
                model_dim: 16,
                vocab_size: 24,
                max_sequence: 32,
                patch_dim: 6,
                normalization: norm,
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap()
    }

    fn test_patches(n_patches: usize) -> Tensor {
        Tensor::matrix(
            n_patches,
            6,
            (0..n_patches * 6)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1)
                .collect(),
        )
        .unwrap()
    }

    fn seq_for(m: &Model, n_patches: usize) -> MultimodalSequence {
        MultimodalSequence::build(
            m,
            &test_patches(n_patches),
            &[0],
            &[tokens::QUERY, tokens::FIRST_OBJECT + 1, tokens::ANSWER],
            false,
        )
        .unwrap()
    }

    #[test]
    fn incremental_matches_graph_bitwise() {
        for norm in [Normalization::RmsNorm, Normalization::LayerNorm] {
            let m = small_model(norm);
            let seq = seq_for(&m, 4);
            let (cache, inc_logits) = m.prefill(&seq).unwrap();
            let graph_logits = m.forward_with_delta(&seq, None, &cache).unwrap();
            assert_eq!(inc_logits.data().len(), graph_logits.data().len());
            for (a, b) in inc_logits.data().iter().zip(graph_logits.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "norm={norm:?}");
            }
        }
    }

    #[test]
    fn zero_delta_equals_absent_delta_exactly() {
        let m = small_model(Normalization::RmsNorm);
        let seq = seq_for(&m, 4);
        let (cache, _) = m.prefill(&seq).unwrap();
        let plain = m.forward_with_delta(&seq, None, &cache).unwrap();
        let zero = DeltaKv::zeros(&m, seq.len());
        let with_zero = m.forward_with_delta(&seq, Some(&zero), &cache).unwrap();
        assert_eq!(plain.data(), with_zero.data());
    }

    #[test]
    fn nonzero_delta_changes_logits() {
        let m = small_model(Normalization::RmsNorm);
        let seq = seq_for(&m, 4);
        let (cache, _) = m.prefill(&seq).unwrap();
        let plain = m.forward_with_delta(&seq, None, &cache).unwrap();
        let mut d = DeltaKv::zeros(&m, seq.len());
        d.layers[0].dv.data_mut()[3] = 0.25;
        let pert = m.forward_with_delta(&seq, Some(&d), &cache).unwrap();
        assert_ne!(plain.data(), pert.data());
    }

    #[test]
    fn delta_rows_outside_prefix_leave_prefix_logits_alone() {
        let m = small_model(Normalization::RmsNorm);
        let seq = seq_for(&m, 3);
        let (cache, _) = m.prefill(&seq).unwrap();
        let hd = m.config.head_dim();
        let last = seq.len() - 1;
        // Perturbing the final row changes final logits...
        let mut d = DeltaKv::zeros(&m, seq.len());
        d.layers[1].dk.data_mut()[last * hd] = 0.5;
        let pert = m.forward_with_delta(&seq, Some(&d), &cache).unwrap();
        let plain = m.forward_with_delta(&seq, None, &cache).unwrap();
        assert_ne!(plain.data(), pert.data());

        // ...but a pass over the prefix never sees that row: the prefix slice
        // of this delta is all zeros, so prefix logits are untouched.
        let prefix = MultimodalSequence::build(
            &m,
            &test_patches(3),
            &[0],
            &[tokens::QUERY, tokens::FIRST_OBJECT + 1],
            false,
        )
        .unwrap();
        let (pcache, plogits) = m.prefill(&prefix).unwrap();
        let mut pd = DeltaKv::zeros(&m, prefix.len());
        for (l, dl) in pd.layers.iter_mut().enumerate() {
            let src = &d.layers[l];
            dl.dk
                .data_mut()
                .copy_from_slice(&src.dk.data()[..prefix.len() * hd]);
            dl.dv
                .data_mut()
                .copy_from_slice(&src.dv.data()[..prefix.len() * hd]);
        }
        let with = m.forward_with_delta(&prefix, Some(&pd), &pcache).unwrap();
        assert_eq!(with.data(), plogits.data());
    }

    #[test]
    fn cache_and_delta_length_checks() {
        let m = small_model(Normalization::RmsNorm);
        let seq = seq_for(&m, 4);
        let empty = KvCache::new(&m);
        assert!(matches!(
            m.forward_with_delta(&seq, None, &empty),
            Err(ModelError::CacheMismatch { .. })
        ));
        let (cache, _) = m.prefill(&seq).unwrap();
        let wrong = DeltaKv::zeros(&m, seq.len() + 2);
        assert!(matches!(
            m.forward_with_delta(&seq, Some(&wrong), &cache),
            Err(ModelError::DeltaMismatch { .. })
        ));
    }

    #[test]
    fn extending_a_sequence_preserves_earlier_step_logits() {
        let m = small_model(Normalization::RmsNorm);
        let mut seq = seq_for(&m, 4);
        let (_, logits_before) = m.prefill(&seq).unwrap();
        seq.append_generated(&m, tokens::YES).unwrap();
        let mut cache = KvCache::new(&m);
        let mut step_logits = Vec::new();
        for _ in 0..seq.len() {
            step_logits.push(m.advance(&seq, &mut cache).unwrap());
        }
        assert_eq!(
            step_logits[seq.len() - 2].data(),
            logits_before.data(),
            "appending a token altered an earlier step"
        );
    }

    #[test]
    fn shared_weight_leaves_accumulate_gradients() {
        // Two copies of the same example on one graph: the weight gradient
        // must be exactly twice the single-example gradient.
        let m = small_model(Normalization::RmsNorm);
        let seq = seq_for(&m, 2);
        let mut g = Graph::new();
        let w = m.insert_weight_nodes(&mut g);
        let x1 = g.leaf(seq.embeddings().clone());
        let t1 = m.build_forward_with(&mut g, &w, x1, None, false).unwrap();
        let x2 = g.leaf(seq.embeddings().clone());
        let t2 = m.build_forward_with(&mut g, &w, x2, None, false).unwrap();
        let s1 = g.sum_axis(t1.logits_last, None).unwrap();
        let s2 = g.sum_axis(t2.logits_last, None).unwrap();
        let total = g.add(s1, s2).unwrap();
        let both = g.gradient(total, &[w.layers[0].wq]).unwrap();

        let mut g_single = Graph::new();
        let ws = m.insert_weight_nodes(&mut g_single);
        let xs = g_single.leaf(seq.embeddings().clone());
        let ts = m
            .build_forward_with(&mut g_single, &ws, xs, None, false)
            .unwrap();
        let ss = g_single.sum_axis(ts.logits_last, None).unwrap();
        let single = g_single.gradient(ss, &[ws.layers[0].wq]).unwrap();

        for (a, b) in both[0].data().iter().zip(single[0].data().iter()) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
