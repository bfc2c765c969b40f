//! Joint CTC/attention beam search over one encoder output, with an optional
//! external label scorer.
//!
//! A hypothesis reaching `max_len` labels can only end, so its candidate is
//! scored with the mandatory `eos` included and enters the finished set
//! directly. Hypotheses ending in `eos` compete for beam slots like any other
//! candidate and leave the beam when selected.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::ctc::{CtcPrefixScorer, CtcPrefixState, PrefixSymbol};
use crate::decoder::{AttentionMemory, AttentionState, EOS, SOS};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// CTC weight in the combined score.
    pub gamma: f64,
    pub beam: usize,
    /// Longest hypothesis; defaults to the encoder length capped by the
    /// decoder's `max_output_len`.
    pub max_len: Option<usize>,
    pub length_normalize: bool,
    /// Weight of the attached label scorer, if any.
    pub scorer_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            gamma: 0.4,
            beam: 20,
            max_len: None,
            length_normalize: false,
            scorer_weight: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.gamma) {
            p.push(format!("decode.gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.beam == 0 {
            p.push("decode.beam must be at least 1".into());
        }
        if !(self.scorer_weight >= 0.0) {
            p.push(format!("decode.scorer_weight must be nonnegative, got {}", self.scorer_weight));
        }
        p
    }
}

/// External log-score for appending `next` to `prefix`.
pub trait LabelScorer {
    fn score(&self, prefix: &[u32], next: PrefixSymbol) -> f64;
}

/// Add-k smoothed character bigram model over `eos` + vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramScorer {
    /// `log_probs[prev][next]`; `prev` 0 is sentence start, `next` 0 is `eos`.
    pub log_probs: Vec<Vec<f64>>,
}

impl BigramScorer {
    pub fn train(sequences: &[Vec<u32>], vocab: usize, smoothing: f64) -> Self {
        let mut counts = vec![vec![smoothing; vocab + 1]; vocab + 1];
        for s in sequences {
            let mut prev = 0usize;
            for &l in s {
                counts[prev][l as usize] += 1.0;
                prev = l as usize;
            }
            counts[prev][0] += 1.0;
        }
        let log_probs = counts
            .into_iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                row.into_iter().map(|c| (c / total).ln()).collect()
            })
            .collect();
        BigramScorer { log_probs }
    }
}

impl LabelScorer for BigramScorer {
    fn score(&self, prefix: &[u32], next: PrefixSymbol) -> f64 {
        let prev = prefix.last().copied().unwrap_or(0) as usize;
        let next = match next {
            PrefixSymbol::End => 0,
            PrefixSymbol::Label(l) => l as usize,
        };
        self.log_probs[prev][next]
    }
}

/// Best hypothesis with its component scores (log domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub labels: Vec<u32>,
    pub att_score: f64,
    pub ctc_score: f64,
    pub scorer_score: f64,
    pub combined: f64,
    /// False only when no hypothesis reached `eos`.
    pub finished: bool,
}

/// `gamma * ctc + (1 - gamma) * att + w * scorer`, skipping zero-weight terms
/// so an impossible CTC path cannot poison a pure attention score.
pub fn combine(gamma: f64, att: f64, ctc: f64, scorer_weight: f64, scorer: f64) -> f64 {
    let mut s = 0.0;
    if gamma < 1.0 {
        s += (1.0 - gamma) * att;
    }
    if gamma > 0.0 {
        s += gamma * ctc;
    }
    if scorer_weight > 0.0 {
        s += scorer_weight * scorer;
    }
    s
}

#[derive(Clone)]
struct Hyp {
    labels: Vec<u32>,
    att: f64,
    ctc: f64,
    lm: f64,
    /// Decoder state that consumes the last label (or `sos`).
    state: AttentionState,
    ctc_state: Option<CtcPrefixState>,
}

struct Candidate {
    parent: usize,
    label: Option<u32>,
    att: f64,
    ctc: f64,
    lm: f64,
    ctc_state: Option<CtcPrefixState>,
    finished: bool,
}

struct Searcher<'a, 'p> {
    model: &'a Model,
    cfg: &'a DecodeConfig,
    scorer: Option<&'a dyn LabelScorer>,
    g: Graph<'p>,
    mem: AttentionMemory,
    ctc: Option<CtcPrefixScorer>,
    max_len: usize,
}

impl<'a, 'p> Searcher<'a, 'p> {
    fn new(
        model: &'a Model,
        store: &'p ParamStore,
        enc: &Tensor,
        cfg: &'a DecodeConfig,
        scorer: Option<&'a dyn LabelScorer>,
    ) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut g = Graph::with_params(store).no_grad();
        let h = g.constant(enc.clone());
        let mem = model.decoder.memory(&mut g, h)?;
        let ctc = if cfg.gamma > 0.0 {
            let lp = model.ctc.frame_posteriors(&mut g, h)?;
            Some(CtcPrefixScorer::new(g.value(lp).clone()))
        } else {
            None
        };
        let max_len = cfg
            .max_len
            .unwrap_or_else(|| mem.frames.min(model.decoder.config.max_output_len));
        Ok(Searcher {
            model,
            cfg,
            scorer,
            g,
            mem,
            ctc,
            max_len,
        })
    }

    fn root(&mut self) -> Hyp {
        Hyp {
            labels: Vec::new(),
            att: 0.0,
            ctc: 0.0,
            lm: 0.0,
            state: self.model.decoder.initial_state(&mut self.g, &self.mem),
            ctc_state: self.ctc.as_ref().map(|c| c.initial()),
        }
    }

    fn key(&self, c: &Candidate, len: usize) -> f64 {
        let s = combine(self.cfg.gamma, c.att, c.ctc, self.cfg.scorer_weight, c.lm);
        if self.cfg.length_normalize {
            s / (len + 1) as f64
        } else {
            s
        }
    }

    fn lm(&self, prefix: &[u32], next: PrefixSymbol) -> f64 {
        match self.scorer {
            Some(s) if self.cfg.scorer_weight > 0.0 => s.score(prefix, next),
            _ => 0.0,
        }
    }

    fn step(&mut self, state: &AttentionState, last: u32) -> Result<(Vec<f64>, AttentionState)> {
        let (lp, next) = self.model.decoder.decoder_step(&mut self.g, &self.mem, state, last)?;
        Ok((self.g.value(lp).to_vec(), next))
    }

    fn ctc_extend(&self, st: &Option<CtcPrefixState>, sym: PrefixSymbol) -> Result<(f64, Option<CtcPrefixState>)> {
        match (&self.ctc, st) {
            (Some(scorer), Some(st)) => {
                let (d, next) = scorer.extend(st, sym)?;
                Ok((d, Some(next)))
            }
            _ => Ok((0.0, None)),
        }
    }

    /// Continuations of `h` in order `eos`, then labels ascending, with the
    /// decoder state their children start from.
    fn expand(&mut self, parent: usize, h: &Hyp) -> Result<(Vec<Candidate>, AttentionState)> {
        let last = h.labels.last().copied().unwrap_or(SOS);
        let (lp, next_state) = self.step(&h.state, last)?;
        let mut out = Vec::with_capacity(self.model.decoder.vocab + 1);
        let (dc, _) = self.ctc_extend(&h.ctc_state, PrefixSymbol::End)?;
        out.push(Candidate {
            parent,
            label: None,
            att: h.att + lp[EOS as usize],
            ctc: h.ctc + dc,
            lm: h.lm + self.lm(&h.labels, PrefixSymbol::End),
            ctc_state: None,
            finished: true,
        });
        if h.labels.len() >= self.max_len {
            return Ok((out, next_state));
        }
        let closing = h.labels.len() + 1 == self.max_len;
        let mut ext = h.labels.clone();
        ext.push(0);
        for c in 1..=self.model.decoder.vocab as u32 {
            let (dc, cst) = self.ctc_extend(&h.ctc_state, PrefixSymbol::Label(c))?;
            let mut cand = Candidate {
                parent,
                label: Some(c),
                att: h.att + lp[c as usize],
                ctc: h.ctc + dc,
                lm: h.lm + self.lm(&h.labels, PrefixSymbol::Label(c)),
                ctc_state: cst,
                finished: closing,
            };
            if closing {
                let (lp2, _) = self.step(&next_state, c)?;
                cand.att += lp2[EOS as usize];
                let (de, _) = self.ctc_extend(&cand.ctc_state, PrefixSymbol::End)?;
                cand.ctc += de;
                *ext.last_mut().expect("nonempty") = c;
                cand.lm += self.lm(&ext, PrefixSymbol::End);
                cand.ctc_state = None;
            }
            out.push(cand);
        }
        Ok((out, next_state))
    }

    fn result(&self, labels: Vec<u32>, c: &Candidate, finished: bool) -> DecodeResult {
        DecodeResult {
            labels,
            att_score: c.att,
            ctc_score: if self.cfg.gamma > 0.0 { c.ctc } else { 0.0 },
            scorer_score: c.lm,
            combined: combine(self.cfg.gamma, c.att, c.ctc, self.cfg.scorer_weight, c.lm),
            finished,
        }
    }
}

fn labels_of(parent: &Hyp, c: &Candidate) -> Vec<u32> {
    let mut l = parent.labels.clone();
    l.extend(c.label);
    l
}

/// Beam search over one encoder output `[L, C]`. Ties keep the earlier
/// candidate (parent beam order, `eos` before labels, labels ascending).
pub fn joint_beam_search(
    model: &Model,
    store: &ParamStore,
    enc: &Tensor,
    cfg: &DecodeConfig,
    scorer: Option<&dyn LabelScorer>,
) -> Result<DecodeResult> {
    let mut s = Searcher::new(model, store, enc, cfg, scorer)?;
    let mut active = vec![s.root()];
    let mut finished: Vec<(f64, DecodeResult)> = Vec::new();
    let mut best_partial: Option<(f64, DecodeResult)> = None;
    while !active.is_empty() {
        let mut cands = Vec::new();
        let mut child_states = Vec::with_capacity(active.len());
        for (i, h) in active.iter().enumerate() {
            let (c, st) = s.expand(i, h)?;
            cands.extend(c);
            child_states.push(st);
        }
        let mut keyed: Vec<(f64, Candidate)> = cands
            .into_iter()
            .map(|c| {
                let len = active[c.parent].labels.len() + c.label.is_some() as usize;
                (s.key(&c, len), c)
            })
            .collect();
        // Stable: equal keys keep generation order.
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
        keyed.truncate(cfg.beam);
        let mut next = Vec::new();
        for (key, c) in keyed {
            let parent = &active[c.parent];
            let labels = labels_of(parent, &c);
            if c.finished {
                let r = s.result(labels, &c, true);
                finished.push((key, r));
            } else {
                if best_partial.as_ref().is_none_or(|(k, _)| key > *k) {
                    best_partial = Some((key, s.result(labels.clone(), &c, false)));
                }
                next.push(Hyp {
                    labels,
                    att: c.att,
                    ctc: c.ctc,
                    lm: c.lm,
                    state: child_states[c.parent],
                    ctc_state: c.ctc_state,
                });
            }
        }
        active = next;
        if !cfg.length_normalize && !active.is_empty() {
            let best_done = finished.iter().map(|f| f.0).fold(f64::NEG_INFINITY, f64::max);
            let best_open = active
                .iter()
                .map(|h| combine(cfg.gamma, h.att, h.ctc, cfg.scorer_weight, h.lm))
                .fold(f64::NEG_INFINITY, f64::max);
            // Scores only decrease as hypotheses grow.
            if !finished.is_empty() && best_done >= best_open {
                break;
            }
        }
    }
    let mut best: Option<(f64, DecodeResult)> = None;
    for (k, r) in finished {
        if best.as_ref().is_none_or(|(b, _)| k > *b) {
            best = Some((k, r));
        }
    }
    match best.or(best_partial) {
        Some((_, r)) => {
            if !r.finished {
                log::warn!("no hypothesis reached eos; returning the best partial one");
            }
            Ok(r)
        }
        None => Err(Error::NonFinite { op: "beam_search" }),
    }
}

/// Picks the best continuation at every step with the same scoring and
/// tie-breaking as the beam search; equal to it at beam 1.
pub fn greedy_search(
    model: &Model,
    store: &ParamStore,
    enc: &Tensor,
    cfg: &DecodeConfig,
    scorer: Option<&dyn LabelScorer>,
) -> Result<DecodeResult> {
    let mut s = Searcher::new(model, store, enc, cfg, scorer)?;
    let mut h = s.root();
    loop {
        let (cands, child_state) = s.expand(0, &h)?;
        let len = h.labels.len();
        let mut best: Option<(f64, Candidate)> = None;
        for c in cands {
            let k = s.key(&c, len + c.label.is_some() as usize);
            if best.as_ref().is_none_or(|(b, _)| k > *b) {
                best = Some((k, c));
            }
        }
        let (_, c) = best.expect("eos is always a candidate");
        let labels = labels_of(&h, &c);
        if c.finished {
            return Ok(s.result(labels, &c, true));
        }
        h = Hyp {
            labels,
            att: c.att,
            ctc: c.ctc,
            lm: c.lm,
            state: child_state,
            ctc_state: c.ctc_state,
        };
    }
}

/// Encodes `features` once and decodes every output.
pub fn decode_mixture(
    model: &Model,
    store: &ParamStore,
    features: &Tensor,
    cfg: &DecodeConfig,
    scorer: Option<&dyn LabelScorer>,
) -> Result<Vec<DecodeResult>> {
    let reprs: Vec<Tensor> = {
        let mut g = Graph::with_params(store).no_grad();
        let enc = model.encode(&mut g, features)?;
        enc.rec_reprs.iter().map(|&v| g.value(v).clone()).collect()
    };
    reprs
        .iter()
        .map(|r| joint_beam_search(model, store, r, cfg, scorer))
        .collect()
}

/// Scores every label sequence up to `max_len` from teacher-forced decoder
/// outputs and the CTC forward recursion, returning the best under the
/// combined score (first in length-then-lexicographic order on ties). Cost is
/// exponential in `max_len`.
pub fn exhaustive_search(model: &Model, store: &ParamStore, enc: &Tensor, cfg: &DecodeConfig, max_len: usize) -> Result<DecodeResult> {
    let mut g = Graph::with_params(store).no_grad();
    let h = g.constant(enc.clone());
    let lp = model.ctc.frame_posteriors(&mut g, h)?;
    let ctc_lp = g.value(lp).clone();
    let v = model.decoder.vocab as u32;
    let mut best: Option<(f64, DecodeResult)> = None;
    let mut seqs: Vec<Vec<u32>> = vec![Vec::new()];
    let mut frontier = seqs.clone();
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| (1..=v).map(move |c| [s.as_slice(), &[c]].concat()))
            .collect();
        seqs.extend(frontier.iter().cloned());
    }
    for s in seqs {
        let logits = model.decoder.teacher_forced_logits(&mut g, h, &s)?;
        let rows = crate::ctc::log_softmax_rows(g.value(logits));
        let targets = s.iter().copied().chain([EOS]);
        let att: f64 = targets.enumerate().map(|(n, t)| rows.at(n, t as usize)).sum();
        let ctc = match crate::ctc::neg_log_likelihood(&ctc_lp, &s) {
            Ok(nll) => -nll,
            Err(Error::AlignmentInfeasible { .. }) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        let combined = combine(cfg.gamma, att, ctc, 0.0, 0.0);
        let key = if cfg.length_normalize { combined / (s.len() + 1) as f64 } else { combined };
        if best.as_ref().is_none_or(|(b, _)| key > *b) {
            best = Some((
                key,
                DecodeResult {
                    labels: s,
                    att_score: att,
                    ctc_score: if cfg.gamma > 0.0 { ctc } else { 0.0 },
                    scorer_score: 0.0,
                    combined,
                    finished: true,
                },
            ));
        }
    }
    Ok(best.expect("the empty sequence is always scored").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::vocab::Vocabulary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, scale: f64) -> (Model, ParamStore, Tensor) {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                cells: 4,
                width: 6,
                ..EncoderConfig::default()
            }
            .with_speakers(1),
            decoder: DecoderConfig {
                embed_dim: 4,
                cells: 6,
                att_dim: 5,
                filters: 2,
                filter_width: 3,
                ..DecoderConfig::default()
            },
            vocab: Vocabulary::new("abc").unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &mut rng, &cfg).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let enc = Tensor::new(vec![5, 6], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (model, store, enc)
    }

    fn cfg(gamma: f64, beam: usize) -> DecodeConfig {
        DecodeConfig {
            gamma,
            beam,
            max_len: Some(3),
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive() {
        for seed in 0..8 {
            let (m, s, enc) = random_model(seed, 20.0);
            for gamma in [0.0, 0.4, 1.0] {
                let c = cfg(gamma, 27);
                let beam = joint_beam_search(&m, &s, &enc, &c, None).unwrap();
                let oracle = exhaustive_search(&m, &s, &enc, &c, 3).unwrap();
                assert_eq!(beam.labels, oracle.labels, "seed {seed} gamma {gamma}");
                assert!((beam.combined - oracle.combined).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..8 {
            let (m, s, enc) = random_model(seed, 20.0);
            for gamma in [0.0, 0.4, 1.0] {
                let c = cfg(gamma, 1);
                let beam = joint_beam_search(&m, &s, &enc, &c, None).unwrap();
                let greedy = greedy_search(&m, &s, &enc, &c, None).unwrap();
                assert_eq!(beam, greedy);
            }
        }
    }

    #[test]
    fn scorer_changes_scores_only_when_weighted() {
        let (m, s, enc) = random_model(3, 20.0);
        let lm = BigramScorer::train(&[vec![1, 1, 1], vec![1, 1]], 3, 0.5);
        let c = cfg(0.4, 5);
        let plain = joint_beam_search(&m, &s, &enc, &c, None).unwrap();
        let ignored = joint_beam_search(&m, &s, &enc, &c, Some(&lm)).unwrap();
        assert_eq!(plain, ignored);
        let weighted = DecodeConfig { scorer_weight: 1.0, ..c };
        let r = joint_beam_search(&m, &s, &enc, &weighted, Some(&lm)).unwrap();
        assert!(r.scorer_score < 0.0);
    }

    #[test]
    fn bigram_rows_are_distributions() {
        let lm = BigramScorer::train(&[vec![1, 2], vec![2]], 2, 1.0);
        for row in &lm.log_probs {
            let total: f64 = row.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (m, s, enc) = random_model(0, 1.0);
        let c = DecodeConfig { beam: 0, gamma: 2.0, ..DecodeConfig::default() };
        match joint_beam_search(&m, &s, &enc, &c, None) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
