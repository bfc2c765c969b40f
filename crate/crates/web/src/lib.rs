//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each op has a plain Rust form returning a serializable struct and a
//! `#[wasm_bindgen]` wrapper returning the same value as JSON.

use permfree::autodiff::{Graph, Tensor};
use permfree::ctc::{backward_variables, forward_variables, log_softmax_rows, BLANK};
use permfree::data::{mix_pair, stream_rng, SynthConfig, SynthWorld};
use permfree::decoder::{AttentionDecoder, DecoderConfig, SOS};
use permfree::error::{Error, Result};
use permfree::layers::ParamStore;
use permfree::vocab::Vocabulary;
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const VOCAB: &str = "abcdefgh ";

/// Parameter scale for the attention demo; at the training init the scores
/// are too small for `alpha` to show.
pub const DEMO_WEIGHT_SCALE: f64 = 10.0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, Serialize)]
pub struct CtcPosteriors {
    /// Output symbols, blank first.
    pub symbols: Vec<String>,
    pub labels: Vec<u32>,
    /// Frame-wise softmax `[T, V+1]`.
    pub frame_probs: Vec<Vec<f64>>,
    /// Posterior occupancy of each symbol given the label sequence `[T, V+1]`.
    pub occupancy: Vec<Vec<f64>>,
    pub neg_log_likelihood: f64,
}

/// Random logits biased toward a loose alignment of `text`, then the
/// forward-backward symbol occupancy per frame.
pub fn ctc_posteriors(text: &str, frames: usize, sharpness: f64, seed: u64) -> Result<CtcPosteriors> {
    let vocab = Vocabulary::new(VOCAB)?;
    let labels = vocab.encode(text)?;
    let classes = vocab.len() + 1;
    if frames == 0 {
        return Err(Error::Invalid("frames must be positive".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut logits = Vec::with_capacity(frames * classes);
    for t in 0..frames {
        let near = if labels.is_empty() {
            BLANK
        } else {
            labels[(t * labels.len() / frames).min(labels.len() - 1)] as usize
        };
        for k in 0..classes {
            let bump = if k == near || k == BLANK { sharpness } else { 0.0 };
            logits.push(rng.random_range(-1.0..1.0) + bump);
        }
    }
    let lp = log_softmax_rows(&Tensor::new(vec![frames, classes], logits)?);
    let alpha = forward_variables(&lp, &labels)?;
    let beta = backward_variables(&lp, &labels)?;
    let mut z = vec![BLANK];
    for &l in &labels {
        z.push(l as usize);
        z.push(BLANK);
    }
    // beta includes the emission at the current frame, so it is removed once.
    let total = (0..z.len()).fold(f64::NEG_INFINITY, |acc, s| log_add(acc, alpha[0][s] + beta[0][s] - lp.at(0, z[s])));
    let mut occupancy = vec![vec![0.0; classes]; frames];
    for t in 0..frames {
        for (s, &k) in z.iter().enumerate() {
            let v = alpha[t][s] + beta[t][s] - lp.at(t, k) - total;
            if v > f64::NEG_INFINITY {
                occupancy[t][k] += v.exp();
            }
        }
    }
    let frame_probs = (0..frames).map(|t| (0..classes).map(|k| lp.at(t, k).exp()).collect()).collect();
    let mut symbols = vec!["_".to_string()];
    symbols.extend(vocab.chars().iter().map(|c| c.to_string()));
    Ok(CtcPosteriors {
        symbols,
        labels,
        frame_probs,
        occupancy,
        neg_log_likelihood: -total,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MixturePreview {
    pub texts: [String; 2],
    pub speakers: [usize; 2],
    pub lengths: [usize; 2],
    pub offset: usize,
    pub gain: f64,
    pub requested_snr_db: f64,
    pub achieved_snr_db: f64,
    pub first_is_louder: bool,
    /// Per-frame mean square of each scaled, placed component and of the mix.
    pub energy_first: Vec<f64>,
    pub energy_second: Vec<f64>,
    pub energy_mix: Vec<f64>,
}

fn row_energy(data: &[f64], dim: usize) -> Vec<f64> {
    data.chunks(dim).map(|r| r.iter().map(|v| v * v).sum::<f64>() / dim as f64).collect()
}

fn placed(features: &Tensor, scale: f64, start: usize, total: usize) -> Vec<f64> {
    let d = features.cols();
    let mut out = vec![0.0; total * d];
    for (i, v) in features.data().iter().enumerate() {
        out[start * d + i] = scale * v;
    }
    out
}

/// Mixes two synthetic utterances of different speakers. An offset beyond
/// the length difference is clamped.
pub fn mixture_preview(seed: u64, snr_db: f64, offset: usize) -> Result<MixturePreview> {
    let vocab = Vocabulary::new(VOCAB)?;
    let cfg = SynthConfig {
        feature_dim: 16,
        speakers: 4,
        ..SynthConfig::default()
    };
    let world = SynthWorld::new(&cfg, &vocab, seed)?;
    let us = world.utterances("u", 2, seed.wrapping_add(1))?;
    let (u1, u2) = (&us[0], &us[1]);
    let (t1, t2) = (u1.frames(), u2.frames());
    let offset = offset.min(t1.abs_diff(t2));
    let m = mix_pair(u1, u2, snr_db, offset)?;
    let total = t1.max(t2);
    let (s1, s2) = if t1 >= t2 { (0, offset) } else { (offset, 0) };
    let d = u1.features.cols();
    let a = placed(&u1.features, m.gain, s1, total);
    let b = placed(&u2.features, 1.0, s2, total);
    let p1 = a.iter().map(|v| v * v).sum::<f64>() / (t1 * d) as f64;
    let p2 = b.iter().map(|v| v * v).sum::<f64>() / (t2 * d) as f64;
    Ok(MixturePreview {
        texts: [u1.text.clone(), u2.text.clone()],
        speakers: [u1.speaker, u2.speaker],
        lengths: [t1, t2],
        offset,
        gain: m.gain,
        requested_snr_db: snr_db,
        achieved_snr_db: 10.0 * (p1 / p2).log10(),
        first_is_louder: m.first_is_louder,
        energy_first: row_energy(&a, d),
        energy_second: row_energy(&b, d),
        energy_mix: row_energy(m.features.data(), d),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionSweep {
    pub frames: usize,
    pub steps: usize,
    pub curves: Vec<AttentionCurve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionCurve {
    pub alpha: f64,
    /// `[steps, frames]`.
    pub weights: Vec<Vec<f64>>,
    /// Entropy in nats of each step's weights.
    pub entropy: Vec<f64>,
}

/// Attention weights of a randomly initialized decoder over a random
/// encoder sequence, decoding greedily for `steps` outputs at each `alpha`.
pub fn attention_weights(seed: u64, frames: usize, steps: usize, alphas: &[f64]) -> Result<AttentionSweep> {
    if frames == 0 {
        return Err(Error::Invalid("frames must be positive".into()));
    }
    let enc_dim = 6;
    let cfg = DecoderConfig {
        embed_dim: 4,
        cells: 8,
        att_dim: 6,
        filters: 3,
        filter_width: 5,
        alpha: 1.0,
        max_output_len: steps.max(1),
    };
    let mut rng = stream_rng(seed, 0);
    let mut store = ParamStore::new();
    let base = AttentionDecoder::new(&mut store, &mut rng, &cfg, enc_dim, VOCAB.chars().count())?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= DEMO_WEIGHT_SCALE);
    }
    let h = Tensor::new(
        vec![frames, enc_dim],
        (0..frames * enc_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let mut curves = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut dec = base.clone();
        dec.att.alpha = alpha;
        let mut g = Graph::with_params(&store).no_grad();
        let hv = g.constant(h.clone());
        let mem = dec.memory(&mut g, hv)?;
        let mut state = dec.initial_state(&mut g, &mem);
        let mut y = SOS;
        let (mut weights, mut entropy) = (Vec::new(), Vec::new());
        for _ in 0..steps {
            let (logits, next) = dec.step_logits(&mut g, &mem, &state, y)?;
            let w = g.value(next.weights).data().to_vec();
            entropy.push(-w.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>());
            weights.push(w);
            let row = g.value(logits).data();
            y = (1..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(1) as u32;
            state = next;
        }
        curves.push(AttentionCurve { alpha, weights, entropy });
    }
    Ok(AttentionSweep { frames, steps, curves })
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = ctcPosteriors)]
pub fn ctc_posteriors_json(text: &str, frames: usize, sharpness: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(ctc_posteriors(text, frames, sharpness, seed as u64))
}

#[wasm_bindgen(js_name = mixturePreview)]
pub fn mixture_preview_json(seed: u32, snr_db: f64, offset: usize) -> std::result::Result<String, JsError> {
    js(mixture_preview(seed as u64, snr_db, offset))
}

#[wasm_bindgen(js_name = attentionWeights)]
pub fn attention_weights_json(seed: u32, frames: usize, steps: usize, alphas: Vec<f64>) -> std::result::Result<String, JsError> {
    js(attention_weights(seed as u64, frames, steps, &alphas))
}
