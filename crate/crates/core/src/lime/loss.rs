//! The two optimization objectives, each in two forms: a plain numeric
//! evaluation used as an independent check, and a graph construction whose
//! value matches the numeric form bit for bit and which is differentiable
//! with respect to anything upstream of its inputs.

use crate::tensor::{Graph, NodeId, Tensor};

use super::{LimeError, Result};

/// Log-probabilities of a categorical distribution given its logits,
/// computed with a max shift. The graph construction in [`build_kl`] uses
/// the same shift and summation order, so a distribution compared against
/// its own logits yields exactly zero divergence.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    let ln_s = s.ln();
    logits.iter().map(|&z| (z - m) - ln_s).collect()
}

/// Numeric form of the relevance objective: the mean negative log of the
/// temperature-scaled softmax mass that falls on the promoted index set.
///
/// `promoted` indexes the scores whose share is maximized; `support` is the
/// normalization set and must contain every promoted index.
pub fn relevance_loss_value(
    scores: &[f64],
    promoted: &[usize],
    support: &[usize],
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(LimeError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if promoted.is_empty() {
        return Err(LimeError::Contract(
            "relevance loss needs at least one promoted index".into(),
        ));
    }
    for &i in promoted.iter().chain(support.iter()) {
        if i >= scores.len() {
            return Err(LimeError::Contract(format!(
                "index {i} outside score vector of length {}",
                scores.len()
            )));
        }
    }
    if promoted.iter().any(|i| !support.contains(i)) {
        return Err(LimeError::Contract(
            "promoted indices must lie inside the normalization support".into(),
        ));
    }
    let n = scores.len();
    let mut in_promoted = vec![false; n];
    for &i in promoted {
        in_promoted[i] = true;
    }
    let mut in_support = vec![false; n];
    for &i in support {
        in_support[i] = true;
    }
    let inv_tau = 1.0 / tau;
    // Both sums run in index order, matching the graph construction term
    // for term so the two forms agree to the last bit.
    let promoted_sum: f64 = (0..n)
        .map(|i| if in_promoted[i] { scores[i] * inv_tau } else { 0.0 })
        .sum();
    // Shift by the support maximum: the denominator then has at least one
    // unit term, and the shift cancels exactly in the log-sum-exp.
    let m = (0..n)
        .filter(|&i| in_support[i])
        .map(|i| scores[i] * inv_tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..n)
        .map(|i| {
            if in_support[i] {
                (scores[i] * inv_tau - m).exp()
            } else {
                0.0
            }
        })
        .sum();
    let lse = s.ln() + m;
    let count = promoted.len() as f64;
    Ok(-(promoted_sum / count) + lse)
}

/// Numeric Kullback-Leibler divergence KL(p ‖ q) between two categorical
/// distributions given as probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LimeError::Contract(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("left", p), ("right", q)] {
        if d.iter().any(|&v| v < 0.0) {
            return Err(LimeError::Contract(format!(
                "{name} distribution has a negative entry"
            )));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(LimeError::Contract(format!(
                "{name} distribution sums to {s}, not 1"
            )));
        }
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(LimeError::Contract(
                "divergence is infinite: zero reference mass where the left distribution has mass"
                    .into(),
            ));
        }
        total += pi * (pi.ln() - qi.ln());
    }
    Ok(total)
}

/// Build the relevance objective over a score vector node.
///
/// Index sets are encoded as 0/1 mask constants so the selection itself is
/// an elementwise product and gradients flow only through the scores.
pub fn build_relevance_loss(
    g: &mut Graph,
    scores: NodeId,
    promoted: &[usize],
    support: &[usize],
    tau: f64,
) -> Result<NodeId> {
    let n = g.value(scores).len();
    // Reuse the numeric validation so both forms reject identical inputs.
    relevance_loss_value(g.value(scores).data(), promoted, support, tau)?;

    let mask = |idx: &[usize]| {
        let mut v = vec![0.0; n];
        for &i in idx {
            v[i] = 1.0;
        }
        Tensor::vector(v)
    };
    let inv_tau = 1.0 / tau;
    let scaled = g.scale(scores, inv_tau)?;
    let promoted_mask = g.constant(mask(promoted));
    let masked = g.mul(scaled, promoted_mask)?;
    let promoted_sum = g.sum_axis(masked, None)?;

    // Shift by the support maximum, and push entries outside the support so
    // far down that their exponentials underflow to exactly zero: the
    // summed denominator then matches a support-only sum bit for bit while
    // staying at least one, which keeps the logarithm well clear of its
    // domain boundary.
    let m = support
        .iter()
        .map(|&i| g.value(scaled).data()[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut offsets = vec![-m - 1e9; n];
    for &i in support {
        offsets[i] = -m;
    }
    let offset_node = g.constant(Tensor::vector(offsets));
    let shifted = g.add(scaled, offset_node)?;
    let exped = g.exp(shifted)?;
    let denom = g.sum_axis(exped, None)?;
    let log_denom = g.log(denom)?;
    let m_node = g.constant(Tensor::scalar(m));
    let lse = g.add(log_denom, m_node)?;

    let count = promoted.len() as f64;
    let neg_mean = g.scale(promoted_sum, -1.0 / count)?;
    Ok(g.add(neg_mean, lse)?)
}

/// Build KL(softmax(logits) ‖ reference) over a logits node, where the
/// reference enters as fixed log-probabilities (see [`log_softmax`]).
pub fn build_kl(
    g: &mut Graph,
    logits: NodeId,
    reference_log_probs: &[f64],
) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    let len = g.value(logits).len();
    if len != reference_log_probs.len() {
        return Err(LimeError::Contract(format!(
            "logits length {len} does not match reference length {}",
            reference_log_probs.len()
        )));
    }
    if shape.len() != 2 || shape[0] != 1 {
        return Err(LimeError::Contract(format!(
            "KL expects single-row logits, got shape {shape:?}"
        )));
    }
    let m = g
        .value(logits)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let neg_m = g.constant(Tensor::new(shape.clone(), vec![-m; len])?);
    let shifted = g.add(logits, neg_m)?;
    let exped = g.exp(shifted)?;
    let z = g.sum_axis(exped, None)?;
    let ln_z = g.log(z)?;
    let neg_ln_z = g.scale(ln_z, -1.0)?;
    let neg_ln_z_full = g.broadcast_scalar(neg_ln_z, shape.clone())?;
    let log_p = g.add(shifted, neg_ln_z_full)?;

    let neg_ref = g.constant(Tensor::new(
        shape.clone(),
        reference_log_probs.iter().map(|&v| -v).collect(),
    )?);
    let diff = g.add(log_p, neg_ref)?;
    let p = g.softmax(logits, 1)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum_axis(terms, None)?)
}
