//! Connectionist temporal classification: loss by log-space forward-backward,
//! frame posteriors, and incremental prefix scoring for joint decoding.
//!
//! Class 0 is the blank; label `k` (1-based vocabulary id) is class `k`.

use rand::Rng;

use crate::autodiff::{log_add, logsumexp, softmax_row, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, ParamStore};

pub const BLANK: usize = 0;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Projection from encoder width to `vocab + 1` CTC classes.
#[derive(Debug, Clone)]
pub struct CtcHead {
    pub linear: Linear,
}

impl CtcHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, enc_dim: usize, vocab: usize) -> Result<Self> {
        Ok(CtcHead {
            linear: Linear::new(store, rng, &format!("{name}.out"), enc_dim, vocab + 1)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim
    }

    pub fn logits(&self, g: &mut Graph, enc: Var) -> Result<Var> {
        self.linear.forward(g, enc)
    }

    /// Per-frame log distributions over blank + vocabulary, `[L, V+1]`.
    pub fn frame_posteriors(&self, g: &mut Graph, enc: Var) -> Result<Var> {
        let z = self.logits(g, enc)?;
        g.log_softmax(z)
    }
}

/// Fewest frames that admit an alignment: one per label plus a separating
/// blank between every adjacent repeat.
pub fn min_frames(labels: &[u32]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels(labels: &[u32], classes: usize) -> Result<()> {
    for &l in labels {
        if l == 0 || l as usize >= classes {
            return Err(Error::UnknownLabel(l));
        }
    }
    Ok(())
}

/// Blank-augmented sequence `(blank, r1, blank, r2, ..., blank)`.
fn extended(labels: &[u32]) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * labels.len() + 1);
    z.push(BLANK);
    for &l in labels {
        z.push(l as usize);
        z.push(BLANK);
    }
    z
}

fn can_skip(z: &[usize], s: usize) -> bool {
    s >= 2 && z[s] != BLANK && z[s] != z[s - 2]
}

/// Forward variables `alpha[l][s]` (log space) over the extended sequence.
pub fn forward_variables(logprobs: &Tensor, labels: &[u32]) -> Result<Vec<Vec<f64>>> {
    let (frames, classes) = (logprobs.rows(), logprobs.cols());
    check_labels(labels, classes)?;
    let required = min_frames(labels);
    if frames < required {
        return Err(Error::AlignmentInfeasible { frames, required });
    }
    let z = extended(labels);
    let n = z.len();
    let mut alpha = vec![vec![NEG_INF; n]; frames];
    alpha[0][0] = logprobs.at(0, z[0]);
    if n > 1 {
        alpha[0][1] = logprobs.at(0, z[1]);
    }
    for l in 1..frames {
        for s in 0..n {
            let mut a = alpha[l - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[l - 1][s - 1]);
            }
            if can_skip(&z, s) {
                a = log_add(a, alpha[l - 1][s - 2]);
            }
            if a > NEG_INF {
                alpha[l][s] = a + logprobs.at(l, z[s]);
            }
        }
    }
    Ok(alpha)
}

/// Backward variables `beta[l][s]`, including the emission at frame `l`.
pub fn backward_variables(logprobs: &Tensor, labels: &[u32]) -> Result<Vec<Vec<f64>>> {
    let (frames, classes) = (logprobs.rows(), logprobs.cols());
    check_labels(labels, classes)?;
    let required = min_frames(labels);
    if frames < required {
        return Err(Error::AlignmentInfeasible { frames, required });
    }
    let z = extended(labels);
    let n = z.len();
    let mut beta = vec![vec![NEG_INF; n]; frames];
    let last = frames - 1;
    beta[last][n - 1] = logprobs.at(last, z[n - 1]);
    if n > 1 {
        beta[last][n - 2] = logprobs.at(last, z[n - 2]);
    }
    for l in (0..last).rev() {
        for s in 0..n {
            let mut b = beta[l + 1][s];
            if s + 1 < n {
                b = log_add(b, beta[l + 1][s + 1]);
            }
            if s + 2 < n && can_skip(&z, s + 2) {
                b = log_add(b, beta[l + 1][s + 2]);
            }
            if b > NEG_INF {
                beta[l][s] = b + logprobs.at(l, z[s]);
            }
        }
    }
    Ok(beta)
}

fn total_from_alpha(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().unwrap();
    let n = last.len();
    if n == 1 {
        last[0]
    } else {
        log_add(last[n - 1], last[n - 2])
    }
}

/// `-log p(labels | frames)` from normalized per-frame log-probabilities `[L, V+1]`.
pub fn neg_log_likelihood(logprobs: &Tensor, labels: &[u32]) -> Result<f64> {
    let alpha = forward_variables(logprobs, labels)?;
    let total = total_from_alpha(&alpha);
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }
    Ok(-total)
}

/// Normalizes raw logits `[L, K]` row-wise into log-probabilities.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let data = logits
        .data()
        .chunks(k)
        .flat_map(|row| {
            let lse = logsumexp(row);
            row.iter().map(move |x| x - lse)
        })
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Loss and its gradient with respect to raw logits `[L, K]`:
/// `softmax - occupancy`, with occupancies from alpha-beta.
pub fn loss_and_logit_grad(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    let lp = log_softmax_rows(logits);
    let alpha = forward_variables(&lp, labels)?;
    let beta = backward_variables(&lp, labels)?;
    let log_p = total_from_alpha(&alpha);
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }
    let z = extended(labels);
    let (frames, classes) = (lp.rows(), lp.cols());
    let mut grad = Vec::with_capacity(frames * classes);
    for l in 0..frames {
        let row = logits.row(l);
        let mut g = softmax_row(row);
        for (s, &k) in z.iter().enumerate() {
            let a = alpha[l][s] + beta[l][s] - lp.at(l, k);
            if a > NEG_INF {
                g[k] -= (a - log_p).exp();
            }
        }
        grad.extend(g);
    }
    Ok((-log_p, Tensor::new(vec![frames, classes], grad)?))
}

/// CTC loss on the tape with the analytic alpha-beta gradient. `logits` are raw
/// (unnormalized) scores `[L, V+1]`.
pub fn ctc_loss(g: &mut Graph, logits: Var, labels: &[u32]) -> Result<Var> {
    let (loss, grad) = loss_and_logit_grad(g.value(logits), labels)?;
    g.custom_scalar("ctc_loss", loss, vec![(logits, grad)])
}

/// Same loss built entirely from generic tape ops (one node per lattice cell).
/// Slow; kept as an independent reference for the analytic gradient.
pub fn ctc_loss_taped(g: &mut Graph, logits: Var, labels: &[u32]) -> Result<Var> {
    let (frames, classes) = (g.value(logits).rows(), g.value(logits).cols());
    check_labels(labels, classes)?;
    let required = min_frames(labels);
    if frames < required {
        return Err(Error::AlignmentInfeasible { frames, required });
    }
    let lp = g.log_softmax(logits)?;
    let z = extended(labels);
    let n = z.len();
    let cell = |g: &mut Graph, l: usize, k: usize| -> Result<Var> {
        let row = g.slice(lp, 0, l, 1)?;
        g.slice(row, 1, k, 1)
    };
    let mut alpha: Vec<Option<Var>> = vec![None; n];
    alpha[0] = Some(cell(g, 0, z[0])?);
    if n > 1 {
        alpha[1] = Some(cell(g, 0, z[1])?);
    }
    for l in 1..frames {
        let mut next = vec![None; n];
        for s in 0..n {
            let mut terms = Vec::new();
            terms.extend(alpha[s]);
            if s >= 1 {
                terms.extend(alpha[s - 1]);
            }
            if can_skip(&z, s) {
                terms.extend(alpha[s - 2]);
            }
            if terms.is_empty() {
                continue;
            }
            let joined = g.concat(&terms, 1)?;
            let acc = g.logsumexp(joined)?;
            let acc = g.reshape(acc, vec![1, 1])?;
            let e = cell(g, l, z[s])?;
            next[s] = Some(g.add(acc, e)?);
        }
        alpha = next;
    }
    let finals: Vec<Var> = alpha[n.saturating_sub(2)..].iter().flatten().copied().collect();
    let joined = g.concat(&finals, 1)?;
    let total = g.logsumexp(joined)?;
    g.scale(total, -1.0)
}

/// Removes repeats then blanks from a frame-level class path.
pub fn collapse(path: &[usize]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k as u32);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding: per-frame argmax, collapsed.
pub fn greedy_decode(logprobs: &Tensor) -> Vec<u32> {
    let path: Vec<usize> = (0..logprobs.rows())
        .map(|l| {
            logprobs
                .row(l)
                .iter()
                .enumerate()
                .fold((0, NEG_INF), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    collapse(&path)
}

/// Next symbol offered to the prefix scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixSymbol {
    Label(u32),
    End,
}

/// Prefix probabilities of one hypothesis split by whether the last emitted
/// frame was blank or the last label, for every frame.
#[derive(Debug, Clone)]
pub struct CtcPrefixState {
    nonblank: Vec<f64>,
    blank: Vec<f64>,
    last: Option<u32>,
    /// log of the prefix probability (all label sequences starting with this prefix).
    pub score: f64,
}

impl CtcPrefixState {
    /// `log p(prefix ends at frame l)`, summed over both components.
    pub fn total_at(&self, l: usize) -> f64 {
        log_add(self.nonblank[l], self.blank[l])
    }

    pub fn blank_ending(&self, l: usize) -> f64 {
        self.blank[l]
    }

    pub fn nonblank_ending(&self, l: usize) -> f64 {
        self.nonblank[l]
    }
}

/// Incremental CTC scoring of label prefixes against fixed frame posteriors.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer {
    logprobs: Tensor,
}

impl CtcPrefixScorer {
    pub fn new(logprobs: Tensor) -> Self {
        CtcPrefixScorer { logprobs }
    }

    pub fn frames(&self) -> usize {
        self.logprobs.rows()
    }

    /// State of the empty prefix: all frames blank so far.
    pub fn initial(&self) -> CtcPrefixState {
        let frames = self.frames();
        let mut blank = vec![NEG_INF; frames];
        let mut acc = 0.0;
        for (l, b) in blank.iter_mut().enumerate() {
            acc += self.logprobs.at(l, BLANK);
            *b = acc;
        }
        CtcPrefixState {
            nonblank: vec![NEG_INF; frames],
            blank,
            last: None,
            score: 0.0,
        }
    }

    /// Extends `state` by one symbol. Returns the change in log prefix score
    /// and the new state. `End` scores the prefix as a complete sequence.
    pub fn extend(&self, state: &CtcPrefixState, next: PrefixSymbol) -> Result<(f64, CtcPrefixState)> {
        let frames = self.frames();
        let label = match next {
            PrefixSymbol::End => {
                let full = state.total_at(frames - 1);
                let mut done = state.clone();
                done.score = full;
                return Ok((full - state.score, done));
            }
            PrefixSymbol::Label(l) => l,
        };
        if label as usize == BLANK {
            return Err(Error::Invalid("blank cannot appear in a hypothesis".into()));
        }
        check_labels(&[label], self.logprobs.cols())?;
        let c = label as usize;
        let mut nonblank = vec![NEG_INF; frames];
        let mut blank = vec![NEG_INF; frames];
        let empty = state.last.is_none();
        if empty {
            nonblank[0] = self.logprobs.at(0, c);
        }
        let mut psi = nonblank[0];
        for l in 1..frames {
            // Mass of the old prefix that may be followed by `c` at frame l.
            let phi = if state.last == Some(label) {
                state.blank[l - 1]
            } else {
                log_add(state.blank[l - 1], state.nonblank[l - 1])
            };
            let emit = self.logprobs.at(l, c);
            nonblank[l] = log_add(nonblank[l - 1], phi) + emit;
            blank[l] = log_add(blank[l - 1], nonblank[l - 1]) + self.logprobs.at(l, BLANK);
            psi = log_add(psi, phi + emit);
        }
        let new_state = CtcPrefixState {
            nonblank,
            blank,
            last: Some(label),
            score: psi,
        };
        Ok((psi - state.score, new_state))
    }

    /// Total `log p_ctc(labels)` accumulated through prefix extensions.
    pub fn sequence_log_prob(&self, labels: &[u32]) -> Result<f64> {
        let mut st = self.initial();
        let mut total = 0.0;
        for &l in labels {
            let (d, s) = self.extend(&st, PrefixSymbol::Label(l))?;
            total += d;
            st = s;
        }
        let (d, _) = self.extend(&st, PrefixSymbol::End)?;
        Ok(total + d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_logits(frames: usize, classes: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![frames, classes], data).unwrap()
    }

    /// Sum over every frame-level path that collapses to `labels`.
    fn brute_force(logprobs: &Tensor, labels: &[u32]) -> f64 {
        let (frames, classes) = (logprobs.rows(), logprobs.cols());
        let mut path = vec![0usize; frames];
        let mut total = 0.0;
        loop {
            if collapse(&path) == labels {
                total += (0..frames).map(|l| logprobs.at(l, path[l])).sum::<f64>().exp();
            }
            let mut i = 0;
            loop {
                if i == frames {
                    return total;
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn two_frame_half_half() {
        let lp = Tensor::full(&[2, 2], 0.5f64.ln());
        let loss = neg_log_likelihood(&lp, &[1]).unwrap();
        assert_abs_diff_eq!(loss, -(0.75f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.28768, epsilon = 1e-5);
    }

    #[test]
    fn repeated_label_needs_separator() {
        let lp = Tensor::full(&[2, 2], 0.5f64.ln());
        match neg_log_likelihood(&lp, &[1, 1]) {
            Err(Error::AlignmentInfeasible { frames: 2, required: 3 }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn matches_path_enumeration() {
        for seed in 0..30u64 {
            let frames = 1 + (seed as usize % 5);
            let lp = log_softmax_rows(&random_logits(frames, 3, seed));
            let labels: Vec<u32> = (0..(seed % 3)).map(|i| 1 + ((seed + i) % 2) as u32).collect();
            if min_frames(&labels) > frames {
                continue;
            }
            let dp = neg_log_likelihood(&lp, &labels).unwrap();
            let bf = -brute_force(&lp, &labels).ln();
            assert_abs_diff_eq!(dp, bf, epsilon = 1e-9);
        }
    }

    #[test]
    fn occupancy_total_is_constant_over_frames() {
        let lp = log_softmax_rows(&random_logits(6, 4, 9));
        let labels = [1, 3, 3];
        let alpha = forward_variables(&lp, &labels).unwrap();
        let beta = backward_variables(&lp, &labels).unwrap();
        let z = extended(&labels);
        let log_p = total_from_alpha(&alpha);
        for l in 0..6 {
            let per_frame: Vec<f64> = (0..z.len()).map(|s| alpha[l][s] + beta[l][s] - lp.at(l, z[s])).collect();
            assert_abs_diff_eq!(logsumexp(&per_frame), log_p, epsilon = 1e-9);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let x = random_logits(5, 4, 3);
        let err = grad_check(|g, v| ctc_loss(g, v, &[2, 1, 2]), &x, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn taped_and_analytic_agree() {
        let x = random_logits(6, 3, 5);
        let labels = [1, 2, 2];
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let a = ctc_loss(&mut g, v, &labels).unwrap();
        g.backward(a).unwrap();
        let ga = g.grad(v).unwrap();
        let mut h = Graph::new();
        let w = h.leaf(x, true);
        let b = ctc_loss_taped(&mut h, w, &labels).unwrap();
        h.backward(b).unwrap();
        assert_abs_diff_eq!(g.value(a).item(), h.value(b).item(), epsilon = 1e-12);
        assert!(ga.max_abs_diff(&h.grad(w).unwrap()) < 1e-10);
    }

    #[test]
    fn references_form_a_sub_distribution() {
        let lp = log_softmax_rows(&random_logits(4, 3, 17));
        let mut total = 0.0;
        let mut refs: Vec<Vec<u32>> = vec![vec![]];
        for len in 1..=3 {
            let mut next = Vec::new();
            for r in refs.iter().filter(|r| r.len() == len - 1) {
                for k in 1..=2 {
                    let mut e = r.clone();
                    e.push(k);
                    next.push(e);
                }
            }
            refs.extend(next);
        }
        for r in &refs {
            if let Ok(l) = neg_log_likelihood(&lp, r) {
                total += (-l).exp();
            }
        }
        assert!(total <= 1.0 + 1e-12, "{total}");
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let mut s = ParamStore::new();
        let head = CtcHead::new(&mut s, &mut ChaCha8Rng::seed_from_u64(0), "ctc", 4, 3).unwrap();
        for (id, _) in s.clone().iter() {
            s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::with_params(&s);
        let enc = g.constant(random_logits(3, 4, 1));
        let lp = head.frame_posteriors(&mut g, enc).unwrap();
        for v in g.value(lp).data() {
            assert_abs_diff_eq!(*v, -(4f64.ln()), epsilon = 1e-15);
        }
        for l in 0..3 {
            let sum: f64 = g.value(lp).row(l).iter().map(|v| v.exp()).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn greedy_collapse_of_hand_pattern() {
        // frames: - a a b - b   (a = 1, b = 2)
        let path = [0usize, 1, 1, 2, 0, 2];
        let mut rows = Vec::new();
        for &k in &path {
            let mut r = vec![-5.0; 3];
            r[k] = 0.0;
            rows.push(r);
        }
        let lp = log_softmax_rows(&Tensor::from_rows(&rows).unwrap());
        assert_eq!(greedy_decode(&lp), vec![1, 2, 2]);
    }

    #[test]
    fn prefix_scores_sum_to_sequence_probability() {
        for seed in 0..20 {
            let lp = log_softmax_rows(&random_logits(6, 4, 100 + seed));
            let labels: Vec<u32> = (0..(seed % 4)).map(|i| 1 + ((seed * 7 + i * 3) % 3) as u32).collect();
            let scorer = CtcPrefixScorer::new(lp.clone());
            let via_prefix = scorer.sequence_log_prob(&labels).unwrap();
            let via_loss = -neg_log_likelihood(&lp, &labels).unwrap();
            assert_abs_diff_eq!(via_prefix, via_loss, epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_prefix_and_blank_rejection() {
        let lp = log_softmax_rows(&random_logits(4, 3, 2));
        let scorer = CtcPrefixScorer::new(lp.clone());
        let st = scorer.initial();
        assert_eq!(st.blank_ending(0), lp.at(0, BLANK));
        assert!(scorer.extend(&st, PrefixSymbol::Label(0)).is_err());
    }

    #[test]
    fn prefix_probability_never_exceeds_one_and_never_grows() {
        let lp = log_softmax_rows(&random_logits(5, 4, 8));
        let scorer = CtcPrefixScorer::new(lp);
        let mut st = scorer.initial();
        for l in [1, 3, 3, 2] {
            let (d, next) = scorer.extend(&st, PrefixSymbol::Label(l)).unwrap();
            assert!(d <= 1e-12 && next.score <= 1e-12);
            st = next;
        }
    }
}
