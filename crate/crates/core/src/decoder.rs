//! Location-based attention decoder.
//!
//! Decoder input ids: 0 is `sos`, `k` is character `k`. Output classes: 0 is
//! `eos`, `k` is character `k`. Each step updates the LSTM state first, then
//! attends with the new state, then emits from `[e_n; c_n]`.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Embedding, Linear, Lstm, LstmState, ParamId, ParamStore};

pub const SOS: u32 = 0;
pub const EOS: u32 = 0;

thread_local! {
    static DECODE_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Teacher-forced full-sequence decodes run on this thread so far.
pub fn attention_decode_calls() -> usize {
    DECODE_CALLS.with(Cell::get)
}

pub fn reset_attention_decode_calls() {
    DECODE_CALLS.with(|c| c.set(0));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub cells: usize,
    pub att_dim: usize,
    pub filters: usize,
    pub filter_width: usize,
    /// Inverse temperature of the attention softmax.
    pub alpha: f64,
    pub max_output_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_dim: 16,
            cells: 32,
            att_dim: 32,
            filters: 4,
            filter_width: 7,
            alpha: 2.0,
            max_output_len: 32,
        }
    }
}

impl DecoderConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.filters == 0 {
            p.push("decoder.filters must be at least 1".into());
        }
        if self.filter_width.is_multiple_of(2) {
            p.push(format!("decoder.filter_width must be odd, got {}", self.filter_width));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            p.push(format!("decoder.alpha must be positive, got {}", self.alpha));
        }
        if self.embed_dim == 0 || self.cells == 0 || self.att_dim == 0 {
            p.push("decoder.embed_dim, decoder.cells and decoder.att_dim must be positive".into());
        }
        if self.max_output_len == 0 {
            p.push("decoder.max_output_len must be positive".into());
        }
        p
    }
}

/// `k = w^T tanh(V^E e + V^H h_l + V^F f_l + b)`, `f = F * a_{n-1}`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w: ParamId,
    pub v_e: ParamId,
    pub v_h: ParamId,
    pub v_f: ParamId,
    pub b: ParamId,
    /// Location filters, `[width, filters]`.
    pub conv: ParamId,
    pub alpha: f64,
    pub filter_width: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &DecoderConfig, enc_dim: usize) -> Result<Self> {
        Ok(AttentionParams {
            w: store.register("dec.att.w", &[cfg.att_dim, 1], rng)?,
            v_e: store.register("dec.att.v_e", &[cfg.cells, cfg.att_dim], rng)?,
            v_h: store.register("dec.att.v_h", &[enc_dim, cfg.att_dim], rng)?,
            v_f: store.register("dec.att.v_f", &[cfg.filters, cfg.att_dim], rng)?,
            b: store.register("dec.att.b", &[cfg.att_dim], rng)?,
            conv: store.register("dec.att.conv", &[cfg.filter_width, cfg.filters], rng)?,
            alpha: cfg.alpha,
            filter_width: cfg.filter_width,
        })
    }
}

/// Encoder sequence with its attention projection computed once.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMemory {
    pub h: Var,
    pub projected: Var,
    pub frames: usize,
}

/// `(a_{n-1}, e_{n-1}, c_{n-1})`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionState {
    /// `[1, L]`.
    pub weights: Var,
    pub lstm: LstmState,
    /// `[1, C]`.
    pub context: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionDecoder {
    pub config: DecoderConfig,
    pub vocab: usize,
    pub enc_dim: usize,
    pub att: AttentionParams,
    pub lin_e: Linear,
    pub lin_c: Linear,
    pub emb: Embedding,
    pub lstm: Lstm,
    pub out: Linear,
}

impl AttentionDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &DecoderConfig, enc_dim: usize, vocab: usize) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let att = AttentionParams::new(store, rng, cfg, enc_dim)?;
        Ok(AttentionDecoder {
            config: cfg.clone(),
            vocab,
            enc_dim,
            att,
            lin_e: Linear::new(store, rng, "dec.lin_e", cfg.cells, cfg.embed_dim)?,
            lin_c: Linear::new(store, rng, "dec.lin_c", enc_dim, cfg.embed_dim)?,
            emb: Embedding::new(store, rng, "dec.emb", vocab + 1, cfg.embed_dim)?,
            lstm: Lstm::new(store, rng, "dec.lstm", cfg.embed_dim, cfg.cells)?,
            out: Linear::new(store, rng, "dec.out", cfg.cells + enc_dim, vocab + 1)?,
        })
    }

    /// Output classes including `eos`.
    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    pub fn memory(&self, g: &mut Graph, h: Var) -> Result<AttentionMemory> {
        let s = g.shape(h).to_vec();
        if s.len() != 2 || s[0] == 0 || s[1] != self.enc_dim {
            return Err(Error::shape("attend", format!("encoder sequence {s:?}, expected [L>0, {}]", self.enc_dim)));
        }
        let vh = g.param(self.att.v_h);
        let projected = g.matmul(h, vh)?;
        Ok(AttentionMemory {
            h,
            projected,
            frames: s[0],
        })
    }

    /// Uniform `a_0`, zero `e_0` and `c_0`.
    pub fn initial_state(&self, g: &mut Graph, mem: &AttentionMemory) -> AttentionState {
        let l = mem.frames;
        AttentionState {
            weights: g.constant(Tensor::full(&[1, l], 1.0 / l as f64)),
            lstm: self.lstm.zero_state(g),
            context: g.constant(Tensor::zeros(&[1, self.enc_dim])),
        }
    }

    /// One attention read with decoder state `e: [1, cells]` and previous
    /// weights `[1, L]`. Returns `(c_n [1, C], a_n [1, L])`.
    pub fn attend(&self, g: &mut Graph, mem: &AttentionMemory, e: Var, prev_weights: Var) -> Result<(Var, Var)> {
        let p = &self.att;
        if g.value(prev_weights).len() != mem.frames {
            return Err(Error::shape(
                "attend",
                format!("weights {:?} for {} frames", g.shape(prev_weights), mem.frames),
            ));
        }
        let windows = g.unfold1d(prev_weights, p.filter_width)?;
        let conv = g.param(p.conv);
        let f = g.matmul(windows, conv)?;
        let vf = g.param(p.v_f);
        let fp = g.matmul(f, vf)?;
        let ve = g.param(p.v_e);
        let ep = g.matmul(e, ve)?;
        let s = g.add(mem.projected, fp)?;
        let s = g.add(s, ep)?;
        let b = g.param(p.b);
        let s = g.add(s, b)?;
        let t = g.tanh(s)?;
        let w = g.param(p.w);
        let k = g.matmul(t, w)?;
        let k = g.reshape(k, vec![1, mem.frames])?;
        let k = g.scale(k, p.alpha)?;
        let a = g.softmax(k)?;
        let c = g.matmul(a, mem.h)?;
        Ok((c, a))
    }

    /// Consumes `y_prev` (decoder input id) and returns output logits
    /// `[1, V+1]` with the advanced state.
    pub fn step_logits(
        &self,
        g: &mut Graph,
        mem: &AttentionMemory,
        state: &AttentionState,
        y_prev: u32,
    ) -> Result<(Var, AttentionState)> {
        if y_prev as usize > self.vocab {
            return Err(Error::UnknownLabel(y_prev));
        }
        let le = self.lin_e.forward(g, state.lstm.hidden)?;
        let lc = self.lin_c.forward(g, state.context)?;
        let em = self.emb.forward(g, &[y_prev as usize])?;
        let x = g.add(le, lc)?;
        let x = g.add(x, em)?;
        let lstm = self.lstm.step(g, x, state.lstm)?;
        let (context, weights) = self.attend(g, mem, lstm.hidden, state.weights)?;
        let joined = g.concat(&[lstm.hidden, context], 1)?;
        let logits = self.out.forward(g, joined)?;
        Ok((logits, AttentionState { weights, lstm, context }))
    }

    /// Log-distribution over `eos` + vocabulary for the next label.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        mem: &AttentionMemory,
        state: &AttentionState,
        y_prev: u32,
    ) -> Result<(Var, AttentionState)> {
        let (logits, next) = self.step_logits(g, mem, state, y_prev)?;
        Ok((g.log_softmax(logits)?, next))
    }

    /// Teacher-forced logits `[|R|+1, V+1]` for `reference` followed by `eos`.
    pub fn teacher_forced_logits(&self, g: &mut Graph, h: Var, reference: &[u32]) -> Result<Var> {
        if reference.len() > self.config.max_output_len {
            return Err(Error::Invalid(format!(
                "reference of {} labels exceeds max_output_len {}",
                reference.len(),
                self.config.max_output_len
            )));
        }
        if let Some(&bad) = reference.iter().find(|&&r| r == 0 || r as usize > self.vocab) {
            return Err(Error::UnknownLabel(bad));
        }
        DECODE_CALLS.with(|c| c.set(c.get() + 1));
        let mem = self.memory(g, h)?;
        let mut state = self.initial_state(g, &mem);
        let mut rows = Vec::with_capacity(reference.len() + 1);
        let mut prev = SOS;
        for n in 0..=reference.len() {
            let (logits, next) = self.step_logits(g, &mem, &state, prev)?;
            rows.push(logits);
            state = next;
            if n < reference.len() {
                prev = reference[n];
            }
        }
        g.concat(&rows, 0)
    }

    /// `-sum_n log p_att(r_n | r_{1:n-1}, H)` including the final `eos`.
    pub fn attention_loss(&self, g: &mut Graph, h: Var, reference: &[u32]) -> Result<Var> {
        let logits = self.teacher_forced_logits(g, h, reference)?;
        let targets: Vec<usize> = reference.iter().map(|&r| r as usize).chain([EOS as usize]).collect();
        cross_entropy(g, logits, &targets)
    }
}

/// Summed cross-entropy of logits rows `[N, K]` against class `targets`,
/// with the analytic gradient `softmax - onehot`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let t = g.value(logits);
    let k = t.cols();
    if t.rows() != targets.len() || targets.iter().any(|&c| c >= k) {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} targets", t.shape(), targets.len()),
        ));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(t.len());
    for (row, &c) in t.data().chunks(k).zip(targets) {
        let mut p = softmax_row(row);
        loss -= crate::autodiff::log_softmax_row(row)[c];
        p[c] -= 1.0;
        grad.extend(p);
    }
    let grad = Tensor::new(t.shape().to_vec(), grad)?;
    g.custom_scalar("cross_entropy", loss, vec![(logits, grad)])
}
