//! Registered finite-difference checks run by `permfree gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{grad_check, grad_check_params};
use crate::autodiff::Tensor;
use crate::ctc::ctc_loss;
use crate::decoder::{AttentionDecoder, DecoderConfig, SOS};
use crate::encoder::{EncoderConfig, SplitVariant};
use crate::error::Result;
use crate::layers::{Blstm, ConvLayer, Embedding, Linear, Lstm, ParamStore, VggBlock};
use crate::model::{Model, ModelConfig};
use crate::objective::{kl_contrast_loss, multi_speaker_loss, multi_speaker_loss_fixed, LossWeights};
use crate::vocab::Vocabulary;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

pub struct GradCheck {
    pub name: &'static str,
    pub run: fn() -> Result<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn scaled(store: &ParamStore, k: f64) -> ParamStore {
    let mut z = store.clone();
    for (id, _) in store.iter() {
        z.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= k);
    }
    z
}

fn linear() -> Result<f64> {
    let mut s = ParamStore::new();
    let l = Linear::new(&mut s, &mut rng(1), "lin", 3, 4)?;
    let x = random(&[2, 3], 2);
    grad_check_params(
        &s,
        |g| {
            let v = g.constant(x.clone());
            let y = l.forward(g, v)?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        STEP,
    )
}

fn embedding() -> Result<f64> {
    let mut s = ParamStore::new();
    let e = Embedding::new(&mut s, &mut rng(3), "emb", 4, 3)?;
    grad_check_params(
        &s,
        |g| {
            let y = e.forward(g, &[2, 0, 2])?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        STEP,
    )
}

fn lstm_steps() -> Result<f64> {
    let mut s = ParamStore::new();
    let l = Lstm::new(&mut s, &mut rng(7), "lstm", 2, 3)?;
    let xs: Vec<Tensor> = (0..3).map(|t| random(&[1, 2], 10 + t)).collect();
    grad_check_params(
        &s,
        |g| {
            let mut st = l.zero_state(g);
            for x in &xs {
                let v = g.constant(x.clone());
                st = l.step(g, v, st)?;
            }
            let a = g.sum(st.hidden)?;
            let b = g.sum(st.cell)?;
            g.add(a, b)
        },
        STEP,
    )
}

fn blstm() -> Result<f64> {
    let mut s = ParamStore::new();
    let l = Blstm::new(&mut s, &mut rng(4), "blstm", 2, 3, 4)?;
    let x = random(&[4, 2], 5);
    grad_check_params(
        &s,
        |g| {
            let v = g.constant(x.clone());
            let y = l.forward(g, v)?;
            g.sum(y)
        },
        STEP,
    )
}

fn vgg_block() -> Result<f64> {
    let mut s = ParamStore::new();
    let mut r = rng(11);
    let block = VggBlock {
        convs: vec![
            ConvLayer::new(&mut s, &mut r, "c0", 1, 2, 3)?,
            ConvLayer::new(&mut s, &mut r, "c1", 2, 2, 3)?,
        ],
        pool: Some(2),
    };
    for c in &block.convs {
        s.get_mut(c.b).data_mut().iter_mut().for_each(|v| *v += 0.3);
    }
    let x = random(&[1, 5, 4], 12);
    grad_check_params(
        &s,
        |g| {
            let v = g.constant(x.clone());
            let y = block.forward(g, v)?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        STEP,
    )
}

fn small_decoder(seed: u64) -> Result<(ParamStore, AttentionDecoder, Tensor)> {
    let cfg = DecoderConfig {
        embed_dim: 3,
        cells: 4,
        att_dim: 3,
        filters: 2,
        filter_width: 3,
        alpha: 2.0,
        max_output_len: 5,
    };
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let d = AttentionDecoder::new(&mut s, &mut r, &cfg, 3, 3)?;
    // Larger weights keep every gradient well above the difference noise.
    Ok((scaled(&s, 5.0), d, random(&[4, 3], seed + 100)))
}

fn attention_step() -> Result<f64> {
    let (s, d, h) = small_decoder(9)?;
    grad_check_params(
        &s,
        |g| {
            let hv = g.constant(h.clone());
            let mem = d.memory(g, hv)?;
            let st = d.initial_state(g, &mem);
            let (l1, st) = d.decoder_step(g, &mem, &st, SOS)?;
            let (l2, _) = d.decoder_step(g, &mem, &st, 2)?;
            let a = g.slice(l1, 1, 2, 1)?;
            let b = g.slice(l2, 1, 0, 1)?;
            let t = g.add(a, b)?;
            g.sum(t)
        },
        STEP,
    )
}

fn attention_loss() -> Result<f64> {
    let (s, d, h) = small_decoder(10)?;
    grad_check_params(
        &s,
        |g| {
            let hv = g.constant(h.clone());
            d.attention_loss(g, hv, &[3, 1])
        },
        STEP,
    )
}

fn ctc() -> Result<f64> {
    let x = Tensor::new(vec![5, 3], random(&[5, 3], 13).data().iter().map(|v| 2.0 * v).collect())?;
    grad_check(|g, v| ctc_loss(g, v, &[2, 1, 2]), &x, STEP)
}

/// Tiny two-output model used by the full-loss check.
pub fn tiny_model_config(variant: SplitVariant) -> Result<ModelConfig> {
    Ok(ModelConfig {
        encoder: EncoderConfig {
            split_variant: variant,
            speakers: 2,
            input_dim: 4,
            input_channels: 1,
            conv_channels: 2,
            conv_kernel: 3,
            mix_convs: 1,
            subsample: 1,
            sd_layers: 1,
            rec_layers: 1,
            cells: 3,
            width: 4,
        },
        decoder: DecoderConfig {
            embed_dim: 3,
            cells: 4,
            att_dim: 3,
            filters: 2,
            filter_width: 3,
            alpha: 2.0,
            max_output_len: 6,
        },
        vocab: Vocabulary::new("abc")?,
    })
}

fn full_loss() -> Result<f64> {
    let cfg = tiny_model_config(SplitVariant::Blstm)?;
    let mut s = ParamStore::new();
    let model = Model::new(&mut s, &mut rng(21), &cfg)?;
    // At the default init scale some attention gradients are ~1e-10, below
    // the central-difference roundoff.
    let s = scaled(&s, 8.0);
    let features = random(&[6, 4], 22);
    let refs = vec![vec![1, 2], vec![3, 3, 1]];
    let weights = LossWeights {
        lambda: 0.3,
        eta: 0.1,
        kl_active: true,
    };
    let pi_hat = {
        let mut g = crate::autodiff::Graph::with_params(&s).no_grad();
        multi_speaker_loss(&mut g, &model, &features, &refs, weights)?.assignment.pi_hat
    };
    grad_check_params(
        &s,
        |g| Ok(multi_speaker_loss_fixed(g, &model, &features, &refs, weights, &pi_hat)?.loss),
        STEP,
    )
}

fn kl_contrast() -> Result<f64> {
    let x = random(&[3, 8], 31);
    grad_check(
        |g, v| {
            let a = g.slice(v, 1, 0, 4)?;
            let b = g.slice(v, 1, 4, 4)?;
            let a = g.scale(a, 2.0)?;
            kl_contrast_loss(g, a, b, 0.1)
        },
        &x,
        STEP,
    )
}

pub fn registry() -> Vec<GradCheck> {
    vec![
        GradCheck { name: "linear", run: linear },
        GradCheck { name: "embedding", run: embedding },
        GradCheck { name: "lstm_steps", run: lstm_steps },
        GradCheck { name: "blstm", run: blstm },
        GradCheck { name: "vgg_block", run: vgg_block },
        GradCheck { name: "attention_step", run: attention_step },
        GradCheck { name: "attention_loss", run: attention_loss },
        GradCheck { name: "ctc_loss", run: ctc },
        GradCheck { name: "multi_speaker_loss_fixed_assignment", run: full_loss },
        GradCheck { name: "kl_contrast", run: kl_contrast },
    ]
}

/// Runs every registered check; an evaluation error counts as a failure
/// with an infinite error.
pub fn run_registered() -> Vec<CheckOutcome> {
    registry()
        .into_iter()
        .map(|c| {
            let err = (c.run)().unwrap_or(f64::INFINITY);
            CheckOutcome {
                name: c.name.to_string(),
                relative_error: err,
                tolerance: TOLERANCE,
                passed: err < TOLERANCE,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_registered_checks_pass() {
        for o in run_registered() {
            assert!(o.passed, "{} {}", o.name, o.relative_error);
        }
    }

    #[test]
    fn names_are_unique() {
        let names: Vec<_> = registry().iter().map(|c| c.name).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}
