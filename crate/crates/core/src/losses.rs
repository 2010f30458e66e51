//! Cosine-softmax cross-entropy, batch-hard triplet, and their
//! domain-agnostic / domain-specific / total compositions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::head_logits;
use crate::tensor::{Tape, Var};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// `-log softmax(cos(W, f) / tau)[label]`, averaged over rows.
pub fn cosine_ce(tape: &mut Tape, features: Var, labels: &[usize], weights: Var, temperature: Var) -> Result<Var> {
    if !(tape.value(temperature).item() > 0.0) {
        return Err(Error::invalid("cosine_ce: temperature must be positive"));
    }
    let logits = head_logits(tape, features, weights, temperature)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Batch-hard triplet loss on Euclidean distances.
pub fn triplet_batch_hard(tape: &mut Tape, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let first = labels.first().copied();
    if labels.iter().all(|&y| Some(y) == first) {
        return Err(Error::invalid("triplet: batch holds a single identity, no negatives"));
    }
    let d = tape.pairwise_distance(features)?;
    tape.triplet_hard(d, labels, margin)
}

/// Loss node plus its two components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub triplet: Var,
    pub total: Var,
}

/// Cross-entropy against the global head over the whole batch plus a
/// triplet over the whole batch.
pub fn agnostic_loss(
    tape: &mut Tape,
    features: Var,
    global_labels: &[usize],
    global_head: Var,
    temperature: Var,
    margin: f64,
) -> Result<LossTerms> {
    let ce = cosine_ce(tape, features, global_labels, global_head, temperature)?;
    let triplet = triplet_batch_hard(tape, features, global_labels, margin)?;
    let total = tape.add(ce, triplet)?;
    Ok(LossTerms { ce, triplet, total })
}

/// One domain's share of a batch.
#[derive(Clone, Debug)]
pub struct DomainSlice {
    pub domain: usize,
    /// Batch rows belonging to the domain.
    pub rows: Vec<usize>,
    /// Labels in the domain's own label space, aligned with `rows`.
    pub local_labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SpecificTerms {
    pub per_domain: Vec<(usize, LossTerms)>,
    pub total: Var,
}

/// Mean over domains of (cross-entropy against the domain's own head + a
/// triplet confined to the domain's rows).
pub fn specific_loss(
    tape: &mut Tape,
    features: Var,
    slices: &[DomainSlice],
    heads: &[Var],
    temperature: Var,
    margin: f64,
) -> Result<SpecificTerms> {
    if slices.is_empty() {
        return Err(Error::invalid("specific_loss: no domains"));
    }
    let mut per_domain = Vec::with_capacity(slices.len());
    for s in slices {
        let head = *heads.get(s.domain).ok_or_else(|| {
            Error::invalid(format!("specific_loss: no classifier for domain {}", s.domain))
        })?;
        let f = tape.select_rows(features, &s.rows)?;
        let ce = cosine_ce(tape, f, &s.local_labels, head, temperature)?;
        let triplet = triplet_batch_hard(tape, f, &s.local_labels, margin)?;
        let total = tape.add(ce, triplet)?;
        per_domain.push((s.domain, LossTerms { ce, triplet, total }));
    }
    let w = 1.0 / per_domain.len() as f64;
    let terms: Vec<(Var, f64)> = per_domain.iter().map(|(_, t)| (t.total, w)).collect();
    let total = tape.lincomb(&terms)?;
    Ok(SpecificTerms { per_domain, total })
}

/// `lambda * agno + (1 - lambda) * spec`.
pub fn total_loss(agno: f64, spec: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * agno + (1.0 - lambda) * spec)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Recorded values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub agnostic_ce: f64,
    pub agnostic_triplet: f64,
    pub specific_domains: Vec<usize>,
    pub specific_ce: Vec<f64>,
    pub specific_triplet: Vec<f64>,
    pub agnostic: f64,
    pub specific: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Graph nodes of `L_all` together with the breakdown of their values.
pub struct AllLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds `L_all` on the tape. Terms with zero weight are still evaluated
/// so the breakdown is always complete.
#[allow(clippy::too_many_arguments)]
pub fn all_loss(
    tape: &mut Tape,
    features: Var,
    global_labels: &[usize],
    global_head: Var,
    slices: &[DomainSlice],
    domain_heads: &[Var],
    temperature: Var,
    margin: f64,
    lambda: f64,
) -> Result<AllLoss> {
    check_lambda(lambda)?;
    let agno = agnostic_loss(tape, features, global_labels, global_head, temperature, margin)?;
    let spec = specific_loss(tape, features, slices, domain_heads, temperature, margin)?;
    let total = tape.lincomb(&[(agno.total, lambda), (spec.total, 1.0 - lambda)])?;
    let v = |t: &Tape, x: Var| t.value(x).item();
    let breakdown = LossBreakdown {
        agnostic_ce: v(tape, agno.ce),
        agnostic_triplet: v(tape, agno.triplet),
        specific_domains: spec.per_domain.iter().map(|(d, _)| *d).collect(),
        specific_ce: spec.per_domain.iter().map(|(_, t)| v(tape, t.ce)).collect(),
        specific_triplet: spec.per_domain.iter().map(|(_, t)| v(tape, t.triplet)).collect(),
        agnostic: v(tape, agno.total),
        specific: v(tape, spec.total),
        lambda,
        total: v(tape, total),
    };
    Ok(AllLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(t: &mut Tape, shape: &[usize], v: &[f64]) -> Var {
        t.leaf(Tensor::new(shape.to_vec(), v.to_vec()).unwrap())
    }

    #[test]
    fn aligned_two_class_ce() {
        let mut t = Tape::new();
        let f = leaf(&mut t, &[1, 2], &[2.0, 0.0]);
        let w = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 3.0]);
        let tau = leaf(&mut t, &[1], &[1.0]);
        let l = cosine_ce(&mut t, f, &[0], w, tau).unwrap();
        let e = 1.0f64.exp();
        assert!((t.value(l).item() + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((t.value(l).item() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn equidistant_feature_gives_log_n() {
        let mut t = Tape::new();
        let f = leaf(&mut t, &[1, 2], &[1.0, 0.0]);
        let w = leaf(&mut t, &[3, 2], &[0.0, 1.0, 0.0, -1.0, 0.0, 2.0]);
        let tau = leaf(&mut t, &[1], &[0.1]);
        let l = cosine_ce(&mut t, f, &[1], w, tau).unwrap();
        assert!((t.value(l).item() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_scale_invariant() {
        let eval = |scale: f64| {
            let mut t = Tape::new();
            let f = leaf(&mut t, &[1, 3], &[0.3 * scale, -1.2 * scale, 0.5 * scale]);
            let w = leaf(&mut t, &[2, 3], &[1.0, 0.2, -0.3, 0.1, 0.9, 0.4]);
            let tau = leaf(&mut t, &[1], &[0.25]);
            let l = cosine_ce(&mut t, f, &[1], w, tau).unwrap();
            t.value(l).item()
        };
        assert!((eval(1.0) - eval(10.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_rejected() {
        let mut t = Tape::new();
        let f = leaf(&mut t, &[1, 2], &[0.0, 0.0]);
        let w = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let tau = leaf(&mut t, &[1], &[1.0]);
        assert!(cosine_ce(&mut t, f, &[0], w, tau).is_err());
    }

    #[test]
    fn triplet_separated_clusters_zero() {
        let mut t = Tape::new();
        let f = leaf(&mut t, &[4, 1], &[0.0, 0.01, 10.0, 10.01]);
        let l = triplet_batch_hard(&mut t, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn triplet_single_identity_rejected() {
        let mut t = Tape::new();
        let f = leaf(&mut t, &[2, 1], &[0.0, 1.0]);
        assert!(triplet_batch_hard(&mut t, f, &[3, 3], 0.3).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert!((total_loss(2.0, 1.0, 0.1).unwrap() - 1.1).abs() < 1e-15);
        assert!(total_loss(2.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn missing_domain_head_rejected() {
        let mut t = Tape::new();
        let f = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let tau = leaf(&mut t, &[1], &[1.0]);
        let slice = DomainSlice {
            domain: 2,
            rows: vec![0, 1],
            local_labels: vec![0, 1],
        };
        assert!(specific_loss(&mut t, f, &[slice], &[], tau, 0.3).is_err());
    }
}
