//! Permutation-free multi-speaker objective: CTC-based permutation
//! assignment, attention losses under the assigned permutation, the joint
//! CTC/attention interpolation and the negative symmetric KL contrast term.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, softmax_row, Graph, Tensor, Var};
use crate::ctc;
use crate::error::{Error, Result};
use crate::model::Model;

/// Chosen output-to-reference mapping: output `u` is trained on reference
/// `pi_hat[u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationAssignment {
    pub speakers: usize,
    /// `loss_matrix[u][v]`: CTC loss of output `u` against reference `v`;
    /// `+inf` where no alignment exists.
    pub loss_matrix: Vec<Vec<f64>>,
    pub pi_hat: Vec<usize>,
    pub total_ctc: f64,
}

/// Minimizes the summed loss over all `S!` permutations in lexicographic
/// order; a later permutation must be strictly better to win.
pub fn assign_from_matrix(loss_matrix: &[Vec<f64>]) -> Result<PermutationAssignment> {
    let s = loss_matrix.len();
    if s == 0 || loss_matrix.iter().any(|r| r.len() != s) {
        return Err(Error::shape("assign_permutation", format!("loss matrix must be square and non-empty, got {s} rows")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..s).permutations(s) {
        let total: f64 = perm.iter().enumerate().map(|(u, &v)| loss_matrix[u][v]).sum();
        if total.is_nan() {
            return Err(Error::NonFinite { op: "assign_permutation" });
        }
        if total.is_finite() && best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (pi_hat, total_ctc) =
        best.ok_or_else(|| Error::Data("every permutation pairs an output with an infeasible reference".into()))?;
    Ok(PermutationAssignment {
        speakers: s,
        loss_matrix: loss_matrix.to_vec(),
        pi_hat,
        total_ctc,
    })
}

/// CTC loss for every (output, reference) pair from per-output logits.
pub fn ctc_loss_matrix(logits: &[Tensor], references: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    logits
        .iter()
        .map(|z| {
            references
                .iter()
                .map(|r| match ctc::loss_and_logit_grad(z, r) {
                    Ok((l, _)) => Ok(l),
                    Err(Error::AlignmentInfeasible { .. }) => Ok(f64::INFINITY),
                    Err(e) => Err(e),
                })
                .collect()
        })
        .collect()
}

/// Assignment from encoder outputs `G^u`, reading values off the graph.
pub fn assign_permutation(g: &mut Graph, model: &Model, reprs: &[Var], references: &[Vec<u32>]) -> Result<PermutationAssignment> {
    if reprs.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} outputs for {} references",
            reprs.len(),
            references.len()
        )));
    }
    let mut logits = Vec::with_capacity(reprs.len());
    for &r in reprs {
        let z = model.ctc_logits(g, r)?;
        logits.push(g.value(z).clone());
    }
    assign_from_matrix(&ctc_loss_matrix(&logits, references)?)
}

/// Interpolation weights and stage switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub eta: f64,
    pub kl_active: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.1,
            eta: 0.1,
            kl_active: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtlLossBreakdown {
    pub ctc_total: f64,
    pub att_total: f64,
    pub kl_term: f64,
    pub lambda: f64,
    pub eta: f64,
    pub combined: f64,
}

/// Loss of one training example with its tape handle.
#[derive(Debug, Clone)]
pub struct ExampleLoss {
    pub loss: Var,
    pub breakdown: MtlLossBreakdown,
    pub assignment: PermutationAssignment,
}

/// `lambda * ctc + (1 - lambda) * att (+ kl)` for one mixture. The encoder
/// runs once, CTC is evaluated for all `S^2` pairs, and the attention decoder
/// runs once per output with its assigned reference. The assignment itself is
/// not differentiated.
pub fn multi_speaker_loss(
    g: &mut Graph,
    model: &Model,
    features: &Tensor,
    references: &[Vec<u32>],
    weights: LossWeights,
) -> Result<ExampleLoss> {
    loss_with_assignment(g, model, features, references, weights, None)
}

/// Same loss under a given assignment (`pi_hat[u]` = reference of output `u`)
/// instead of the CTC-chosen one.
pub fn multi_speaker_loss_fixed(
    g: &mut Graph,
    model: &Model,
    features: &Tensor,
    references: &[Vec<u32>],
    weights: LossWeights,
    pi_hat: &[usize],
) -> Result<ExampleLoss> {
    loss_with_assignment(g, model, features, references, weights, Some(pi_hat))
}

fn loss_with_assignment(
    g: &mut Graph,
    model: &Model,
    features: &Tensor,
    references: &[Vec<u32>],
    weights: LossWeights,
    fixed: Option<&[usize]>,
) -> Result<ExampleLoss> {
    if !(0.0..=1.0).contains(&weights.lambda) || weights.eta < 0.0 {
        return Err(Error::Invalid(format!(
            "lambda {} must lie in [0, 1] and eta {} be nonnegative",
            weights.lambda, weights.eta
        )));
    }
    let s = model.outputs();
    if references.len() != s {
        return Err(Error::Invalid(format!("model has {s} outputs, got {} references", references.len())));
    }
    let enc = model.encode(g, features)?;
    let reprs = enc.rec_reprs;
    let mut logits = Vec::with_capacity(s);
    for &r in &reprs {
        logits.push(model.ctc_logits(g, r)?);
    }
    let values: Vec<Tensor> = logits.iter().map(|&z| g.value(z).clone()).collect();
    let matrix = ctc_loss_matrix(&values, references)?;
    let assignment = match fixed {
        None => assign_from_matrix(&matrix)?,
        Some(pi) => {
            let mut sorted = pi.to_vec();
            sorted.sort_unstable();
            if sorted != (0..s).collect::<Vec<_>>() {
                return Err(Error::Invalid(format!("{pi:?} is not a permutation of {s} outputs")));
            }
            PermutationAssignment {
                speakers: s,
                total_ctc: pi.iter().enumerate().map(|(u, &v)| matrix[u][v]).sum(),
                loss_matrix: matrix,
                pi_hat: pi.to_vec(),
            }
        }
    };

    let mut ctc_terms = Vec::with_capacity(s);
    let mut att_terms = Vec::with_capacity(s);
    for u in 0..s {
        let reference = &references[assignment.pi_hat[u]];
        ctc_terms.push(ctc::ctc_loss(g, logits[u], reference)?);
        att_terms.push(model.decoder.attention_loss(g, reprs[u], reference)?);
    }
    let ctc_total = sum_vars(g, &ctc_terms)?;
    let att_total = sum_vars(g, &att_terms)?;
    let a = g.scale(ctc_total, weights.lambda)?;
    let b = g.scale(att_total, 1.0 - weights.lambda)?;
    let mut combined = g.add(a, b)?;
    let mut kl_term = 0.0;
    if weights.kl_active {
        if s != 2 {
            return Err(Error::Unsupported(format!("contrast loss is defined for two outputs, model has {s}")));
        }
        let kl = kl_contrast_loss(g, reprs[0], reprs[1], weights.eta)?;
        kl_term = g.value(kl).item();
        combined = g.add(combined, kl)?;
    }
    let breakdown = MtlLossBreakdown {
        ctc_total: g.value(ctc_total).item(),
        att_total: g.value(att_total).item(),
        kl_term,
        lambda: weights.lambda,
        eta: weights.eta,
        combined: g.value(combined).item(),
    };
    Ok(ExampleLoss {
        loss: combined,
        breakdown,
        assignment,
    })
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// `-eta * sum_l [KL(P_l || Q_l) + KL(Q_l || P_l)]` with `P`, `Q` the
/// frame-wise softmax (over the feature axis) of `G^1`, `G^2`.
pub fn kl_contrast_loss(g: &mut Graph, g1: Var, g2: Var, eta: f64) -> Result<Var> {
    if g.shape(g1) != g.shape(g2) {
        return Err(Error::shape(
            "kl_contrast_loss",
            format!("{:?} vs {:?}", g.shape(g1), g.shape(g2)),
        ));
    }
    let p = g.softmax(g1)?;
    let q = g.softmax(g2)?;
    let lp = g.log_softmax(g1)?;
    let lq = g.log_softmax(g2)?;
    let dp = g.sub(p, q)?;
    let dl = g.sub(lp, lq)?;
    let prod = g.mul(dp, dl)?;
    let total = g.sum(prod)?;
    g.scale(total, -eta)
}

/// Symmetric KL between the frame-wise softmaxes of two `[L, C]` matrices, per frame.
pub fn symmetric_kl_per_frame(g1: &Tensor, g2: &Tensor) -> Result<Vec<f64>> {
    if g1.shape() != g2.shape() {
        return Err(Error::shape("symmetric_kl", format!("{:?} vs {:?}", g1.shape(), g2.shape())));
    }
    Ok((0..g1.rows())
        .map(|l| {
            let (a, b) = (g1.row(l), g2.row(l));
            let (p, q) = (softmax_row(a), softmax_row(b));
            let (lp, lq) = (log_softmax_row(a), log_softmax_row(b));
            (0..p.len()).map(|i| (p[i] - q[i]) * (lp[i] - lq[i])).sum()
        })
        .collect())
}

/// Reference scheme: teacher-forced attention decoding for every
/// (output, reference) pair, then the permutation minimizing the summed
/// attention loss. Costs `S^2` decodes.
pub fn attention_permutation(g: &mut Graph, model: &Model, reprs: &[Var], references: &[Vec<u32>]) -> Result<PermutationAssignment> {
    let mut matrix = Vec::with_capacity(reprs.len());
    for &r in reprs {
        let mut row = Vec::with_capacity(references.len());
        for reference in references {
            let l = model.decoder.attention_loss(g, r, reference)?;
            row.push(g.value(l).item());
        }
        matrix.push(row);
    }
    assign_from_matrix(&matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn diagonal_minimum_is_identity() {
        let a = assign_from_matrix(&[vec![0.0, 5.0], vec![5.0, 0.0]]).unwrap();
        assert_eq!(a.pi_hat, vec![0, 1]);
        assert_eq!(a.total_ctc, 0.0);
        let b = assign_from_matrix(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(b.pi_hat, vec![0, 1]);
        assert_eq!(b.total_ctc, 2.0);
    }

    #[test]
    fn swap_wins_when_cheaper_and_ties_prefer_identity() {
        let a = assign_from_matrix(&[vec![4.0, 1.0], vec![1.0, 4.0]]).unwrap();
        assert_eq!(a.pi_hat, vec![1, 0]);
        let t = assign_from_matrix(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(t.pi_hat, vec![0, 1]);
    }

    #[test]
    fn infeasible_pairs_are_avoided_or_reported() {
        let inf = f64::INFINITY;
        let a = assign_from_matrix(&[vec![inf, 3.0], vec![1.0, 0.5]]).unwrap();
        assert_eq!(a.pi_hat, vec![1, 0]);
        assert!(matches!(
            assign_from_matrix(&[vec![inf, inf], vec![1.0, 1.0]]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn kl_of_known_pair() {
        let p = [0.9f64, 0.1];
        let q = [0.1f64, 0.9];
        let g1 = Tensor::new(vec![1, 2], p.iter().map(|v| v.ln()).collect()).unwrap();
        let g2 = Tensor::new(vec![1, 2], q.iter().map(|v| v.ln()).collect()).unwrap();
        let sym = symmetric_kl_per_frame(&g1, &g2).unwrap()[0];
        assert_abs_diff_eq!(sym, 2.0 * 0.8 * 9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(sym, 3.5156, epsilon = 1e-4);
        let mut g = Graph::new();
        let a = g.constant(g1.clone());
        let b = g.constant(g2.clone());
        let l = kl_contrast_loss(&mut g, a, b, 0.1).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), -0.1 * 1.6 * 9f64.ln(), epsilon = 1e-12);
        let l2 = kl_contrast_loss(&mut g, b, a, 0.1).unwrap();
        assert_eq!(g.value(l).item(), g.value(l2).item());
        let same = kl_contrast_loss(&mut g, a, a, 0.1).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }
}
