//! The individual redistribution rules.
//!
//! Every rule is built out of graph operations, so the relevance it produces
//! is itself differentiable with respect to anything the forward pass
//! depended on. Each rule also returns an audit record: the relevance its
//! output fails to conserve (measured from the actual node values) next to
//! the amount the rule's algebra says its stabilizer should absorb. The two
//! are computed along different paths, so a mismatch flags a broken rule
//! rather than vanishing by construction.

use crate::tensor::{stabilizer_sign, Graph, NodeId, Result};

/// One conservation record. `measured` is relevance-in minus relevance-out
/// taken from node values; `expected` is the absorption predicted from the
/// rule's own closed form. Both are zero for exact rules.
#[derive(Debug, Clone)]
pub struct RuleAudit {
    pub site: String,
    pub measured: f64,
    pub expected: f64,
}

impl RuleAudit {
    pub fn residual(&self) -> f64 {
        self.measured - self.expected
    }
}

/// Relevance flowing to one input plus the audit of what was absorbed.
#[derive(Debug)]
pub struct RuleOutput {
    pub phi: NodeId,
    pub audit: RuleAudit,
}

/// Relevance flowing to both factors of a two-input rule.
#[derive(Debug)]
pub struct PairOutput {
    pub phi_a: NodeId,
    pub phi_b: NodeId,
    pub audit: RuleAudit,
}

fn sum_of(g: &Graph, id: NodeId) -> f64 {
    g.value(id).sum()
}

/// Epsilon-stabilized redistribution through `z = x·w`: the relevance each
/// output unit holds is divided by its pre-activation and routed back along
/// the weighted contributions, `phi_in = x ⊙ ((phi ⊘ (z+εs)) · wᵀ)`.
///
/// Absorption per unit is `phi_j (1 - z_j r_j)`, zero when epsilon is 0.
pub fn linear(
    g: &mut Graph,
    site: &str,
    x: NodeId,
    w: NodeId,
    z: NodeId,
    phi: NodeId,
    epsilon: f64,
) -> Result<RuleOutput> {
    let r = g.recip_eps(z, epsilon)?;
    let s = g.mul(phi, r)?;
    let wt = g.transpose(w)?;
    let back = g.matmul(s, wt)?;
    let phi_in = g.mul(x, back)?;

    let expected = {
        let phi_v = g.value(phi).data();
        let z_v = g.value(z).data();
        let r_v = g.value(r).data();
        phi_v
            .iter()
            .zip(z_v.iter().zip(r_v.iter()))
            .map(|(&p, (&zz, &rr))| p * (1.0 - zz * rr))
            .sum()
    };
    let audit = RuleAudit {
        site: site.to_string(),
        measured: sum_of(g, phi) - sum_of(g, phi_in),
        expected,
    };
    Ok(RuleOutput { phi: phi_in, audit })
}

/// Redistribution through `a = softmax(x)` rows:
/// `phi_in = x ⊙ (phi - a · Σ_row phi)`.
///
/// This rule absorbs `Σ_j phi_j (1 - x_j + ⟨a, x⟩)` per row into the implicit
/// softmax bias even with no stabilizer; the audit carries that closed form.
pub fn softmax(
    g: &mut Graph,
    site: &str,
    x: NodeId,
    a: NodeId,
    phi: NodeId,
) -> Result<RuleOutput> {
    let cols = g.value(x).cols();
    let row_sum = g.sum_axis(phi, Some(1))?;
    let row_sum_b = g.broadcast_cols(row_sum, cols)?;
    let weighted = g.mul(a, row_sum_b)?;
    let neg = g.scale(weighted, -1.0)?;
    let diff = g.add(phi, neg)?;
    let phi_in = g.mul(x, diff)?;

    let expected = {
        let x_t = g.value(x);
        let a_t = g.value(a);
        let phi_t = g.value(phi);
        let (m, n) = (x_t.rows(), x_t.cols());
        let mut total = 0.0;
        for i in 0..m {
            let xr = x_t.row(i);
            let ar = a_t.row(i);
            let pr = phi_t.row(i);
            let ax: f64 = ar.iter().zip(xr.iter()).map(|(&aa, &xx)| aa * xx).sum();
            for j in 0..n {
                total += pr[j] * (1.0 - xr[j] + ax);
            }
        }
        total
    };
    let audit = RuleAudit {
        site: site.to_string(),
        measured: sum_of(g, phi) - sum_of(g, phi_in),
        expected,
    };
    Ok(RuleOutput { phi: phi_in, audit })
}

/// Redistribution through a product of two relevance-carrying matrices,
/// `o = a·b`: each factor receives half of every unit's relevance,
/// `r = phi ⊘ (2o + εs)`, `phi_a = a ⊙ (r·bᵀ)`, `phi_b = b ⊙ (aᵀ·r)`.
///
/// Absorption per unit is `phi (1 - 2 o r)`, zero when epsilon is 0.
pub fn bilinear(
    g: &mut Graph,
    site: &str,
    a: NodeId,
    b: NodeId,
    o: NodeId,
    phi: NodeId,
    epsilon: f64,
) -> Result<PairOutput> {
    let o2 = g.scale(o, 2.0)?;
    let r = g.recip_eps(o2, epsilon)?;
    let s = g.mul(phi, r)?;
    let bt = g.transpose(b)?;
    let phi_a = {
        let back = g.matmul(s, bt)?;
        g.mul(a, back)?
    };
    let at = g.transpose(a)?;
    let phi_b = {
        let back = g.matmul(at, s)?;
        g.mul(b, back)?
    };

    let expected = {
        let phi_v = g.value(phi).data();
        let o2_v = g.value(o2).data();
        let r_v = g.value(r).data();
        phi_v
            .iter()
            .zip(o2_v.iter().zip(r_v.iter()))
            .map(|(&p, (&zz, &rr))| p * (1.0 - zz * rr))
            .sum()
    };
    let audit = RuleAudit {
        site: site.to_string(),
        measured: sum_of(g, phi) - sum_of(g, phi_a) - sum_of(g, phi_b),
        expected,
    };
    Ok(PairOutput { phi_a, phi_b, audit })
}

/// Redistribution through an elementwise sum `z = a + b`, shares proportional
/// to contribution: `phi_a = a ⊘ (z+εs) ⊙ phi`, likewise for b.
///
/// Absorption per unit is `phi (1 - z r)`, zero when epsilon is 0 up to the
/// one rounding of `z · (1/z)`.
pub fn add_split(
    g: &mut Graph,
    site: &str,
    a: NodeId,
    b: NodeId,
    z: NodeId,
    phi: NodeId,
    epsilon: f64,
) -> Result<PairOutput> {
    let r = g.recip_eps(z, epsilon)?;
    let s = g.mul(phi, r)?;
    let phi_a = g.mul(a, s)?;
    let phi_b = g.mul(b, s)?;

    let expected = {
        let phi_v = g.value(phi).data();
        let z_v = g.value(z).data();
        let r_v = g.value(r).data();
        phi_v
            .iter()
            .zip(z_v.iter().zip(r_v.iter()))
            .map(|(&p, (&zz, &rr))| p * (1.0 - zz * rr))
            .sum()
    };
    let audit = RuleAudit {
        site: site.to_string(),
        measured: sum_of(g, phi) - sum_of(g, phi_a) - sum_of(g, phi_b),
        expected,
    };
    Ok(PairOutput { phi_a, phi_b, audit })
}

/// Expected absorption of `add_split` restricted to the `a` share, for sites
/// where the `b` share leaves the token path entirely (perturbation leaves).
/// `phi_kept = a r phi`, so the amount leaving is `phi (1 - a r)`.
pub fn split_leak(g: &Graph, a: NodeId, z: NodeId, phi: NodeId, epsilon: f64) -> f64 {
    let phi_v = g.value(phi).data();
    let a_v = g.value(a).data();
    let z_v = g.value(z).data();
    phi_v
        .iter()
        .zip(a_v.iter().zip(z_v.iter()))
        .map(|(&p, (&aa, &zz))| {
            let r = 1.0 / (zz + epsilon * stabilizer_sign(zz));
            p * (1.0 - aa * r)
        })
        .sum()
}
