//! Three-stage split encoder: a shared mixture encoder, `S` unshared
//! speaker-differentiating (SD) branches, and a shared recognition encoder
//! applied to every branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BlstmStack, ConvLayer, ParamStore, VggBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitVariant {
    /// Single output path (no split); the baseline.
    None,
    /// Last convolution layer replicated per output.
    Vgg,
    /// Unshared BLSTM layers per output after the VGG front end.
    Blstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub split_variant: SplitVariant,
    /// Number of outputs for split variants; `none` always has one.
    pub speakers: usize,
    /// Feature dimension per frame, all channels included.
    pub input_dim: usize,
    pub input_channels: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Convolution layers in the mixture encoder before the first pool.
    pub mix_convs: usize,
    /// Time/frequency reduction; 1, 2 or 4.
    pub subsample: usize,
    /// BLSTM depth of each SD branch (blstm variant) and of the matching
    /// lower part of the unsplit stack.
    pub sd_layers: usize,
    pub rec_layers: usize,
    pub cells: usize,
    /// BLSTM output width (both directions together).
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            split_variant: SplitVariant::Blstm,
            speakers: 2,
            input_dim: 40,
            input_channels: 1,
            conv_channels: 4,
            conv_kernel: 3,
            mix_convs: 1,
            subsample: 2,
            sd_layers: 1,
            rec_layers: 1,
            cells: 32,
            width: 32,
        }
    }
}

impl EncoderConfig {
    /// Outputs actually produced.
    pub fn outputs(&self) -> usize {
        match self.split_variant {
            SplitVariant::None => 1,
            _ => self.speakers,
        }
    }

    fn pools(&self) -> usize {
        match self.subsample {
            1 => 0,
            2 => 1,
            _ => 2,
        }
    }

    /// Frequency extent after pooling.
    pub fn freq_out(&self) -> usize {
        let mut f = self.input_dim / self.input_channels;
        for _ in 0..self.pools() {
            f = f.div_ceil(2);
        }
        f
    }

    /// Flattened per-frame width of the convolutional front end.
    pub fn conv_out_dim(&self) -> usize {
        self.conv_channels * self.freq_out()
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if ![1, 2, 4].contains(&self.subsample) {
            p.push(format!("model.subsample must be 1, 2 or 4, got {}", self.subsample));
        }
        if self.speakers == 0 {
            p.push("model.speakers must be at least 1".into());
        }
        if self.input_channels == 0 || self.input_dim == 0 || self.input_dim % self.input_channels.max(1) != 0 {
            p.push(format!(
                "model.input_dim {} must be a positive multiple of model.input_channels {}",
                self.input_dim, self.input_channels
            ));
        }
        if self.conv_channels == 0 || self.mix_convs == 0 {
            p.push("model.conv_channels and model.mix_convs must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            p.push(format!("model.conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.width == 0 || !self.width.is_multiple_of(2) {
            p.push(format!("model.width must be positive and even, got {}", self.width));
        }
        if self.cells == 0 || self.rec_layers == 0 {
            p.push("model.cells and model.rec_layers must be positive".into());
        }
        if self.sd_layers == 0 && self.split_variant != SplitVariant::Vgg {
            p.push("model.sd_layers must be positive for the none and blstm variants".into());
        }
        p
    }

    /// Same architecture with `speakers` outputs.
    pub fn with_speakers(&self, speakers: usize) -> Self {
        EncoderConfig {
            speakers,
            ..self.clone()
        }
    }
}

/// Per-output stage between the mixture and recognition encoders.
#[derive(Debug, Clone)]
pub enum SdBranch {
    Conv(VggBlock),
    Blstm(BlstmStack),
}

#[derive(Debug, Clone)]
pub struct SplitEncoder {
    pub config: EncoderConfig,
    pub mix: Vec<VggBlock>,
    pub sd: Vec<SdBranch>,
    pub rec: BlstmStack,
}

/// Encoder activations for one input.
#[derive(Debug, Clone)]
pub struct SplitEncoderOutput {
    /// Mixture representation `H`: `[C, L, F]` feature image, or `[L, W]`
    /// when the front end has already been flattened.
    pub mix_repr: Var,
    /// `H^u` per output.
    pub sd_reprs: Vec<Var>,
    /// `G^u` per output, each `[L, width]`.
    pub rec_reprs: Vec<Var>,
    pub subsample_factor: usize,
}

/// Name prefix of SD branch `u`; parameters under it belong to that output only.
pub fn sd_prefix(u: usize) -> String {
    format!("enc.sd.{u}.")
}

impl SplitEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &EncoderConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if config.split_variant != SplitVariant::None && config.speakers == 1 {
            log::debug!("split variant with one output degenerates to the baseline");
        }
        let c = config.conv_channels;
        let k = config.conv_kernel;
        let pools = config.pools();
        let mut convs = Vec::new();
        let mut cin = config.input_channels;
        for i in 0..config.mix_convs {
            convs.push(ConvLayer::new(store, rng, &format!("enc.mix.conv{i}"), cin, c, k)?);
            cin = c;
        }
        let mut mix = vec![VggBlock {
            convs,
            pool: (pools >= 1).then_some(2),
        }];
        let vgg_split = config.split_variant == SplitVariant::Vgg;
        if pools == 2 && !vgg_split {
            mix.push(VggBlock {
                convs: Vec::new(),
                pool: Some(2),
            });
        }
        let flat = config.conv_out_dim();
        let mut sd = Vec::new();
        for u in 0..config.outputs() {
            let name = sd_prefix(u);
            let name = name.trim_end_matches('.');
            sd.push(if vgg_split {
                SdBranch::Conv(VggBlock {
                    convs: vec![ConvLayer::new(store, rng, &format!("{name}.conv"), c, c, k)?],
                    pool: (pools == 2).then_some(2),
                })
            } else {
                SdBranch::Blstm(BlstmStack::new(
                    store,
                    rng,
                    &format!("{name}.blstm"),
                    config.sd_layers,
                    flat,
                    config.cells,
                    config.width,
                )?)
            });
        }
        let rec_in = if vgg_split { flat } else { config.width };
        let rec = BlstmStack::new(store, rng, "enc.rec.blstm", config.rec_layers, rec_in, config.cells, config.width)?;
        Ok(SplitEncoder {
            config: config.clone(),
            mix,
            sd,
            rec,
        })
    }

    /// Frames after subsampling for an input of `frames` frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        let mut l = frames;
        for _ in 0..self.config.pools() {
            l = l.div_ceil(2);
        }
        l
    }

    /// `[C, L, F] -> [L, C*F]`.
    fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let t = g.swap_axes01(x)?;
        g.reshape(t, vec![s[1], s[0] * s[2]])
    }

    /// Encodes one feature sequence `[T, D]` into `S` representations.
    pub fn encode(&self, g: &mut Graph, features: Var) -> Result<SplitEncoderOutput> {
        let cfg = &self.config;
        let s = g.shape(features).to_vec();
        if s.len() != 2 || s[1] != cfg.input_dim {
            return Err(Error::shape("encode", format!("features {s:?}, expected [T, {}]", cfg.input_dim)));
        }
        let frames = s[0];
        if frames < cfg.subsample {
            return Err(Error::shape(
                "encode",
                format!("{frames} frames is shorter than subsample factor {}", cfg.subsample),
            ));
        }
        let ch = cfg.input_channels;
        let x = g.reshape(features, vec![frames, ch, cfg.input_dim / ch])?;
        let mut h = g.swap_axes01(x)?;
        for block in &self.mix {
            h = block.forward(g, h)?;
        }
        let mix_repr = h;
        let mut sd_reprs = Vec::with_capacity(self.sd.len());
        let mut rec_reprs = Vec::with_capacity(self.sd.len());
        let flat_mix = match cfg.split_variant {
            SplitVariant::Vgg => None,
            _ => Some(Self::flatten(g, mix_repr)?),
        };
        for branch in &self.sd {
            let hu = match branch {
                SdBranch::Conv(block) => {
                    let y = block.forward(g, mix_repr)?;
                    Self::flatten(g, y)?
                }
                SdBranch::Blstm(stack) => stack.forward(g, flat_mix.expect("flattened for blstm branches"))?,
            };
            sd_reprs.push(hu);
            rec_reprs.push(self.rec.forward(g, hu)?);
        }
        Ok(SplitEncoderOutput {
            mix_repr,
            sd_reprs,
            rec_reprs,
            subsample_factor: cfg.subsample,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: SplitVariant) -> EncoderConfig {
        EncoderConfig {
            split_variant: variant,
            speakers: 2,
            input_dim: 6,
            conv_channels: 2,
            mix_convs: 1,
            cells: 4,
            width: 4,
            ..EncoderConfig::default()
        }
    }

    fn input(frames: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![frames, dim], (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(cfg: &EncoderConfig) -> (ParamStore, SplitEncoder) {
        let mut s = ParamStore::new();
        let e = SplitEncoder::new(&mut s, &mut ChaCha8Rng::seed_from_u64(1), cfg).unwrap();
        (s, e)
    }

    fn run(store: &ParamStore, enc: &SplitEncoder, x: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::with_params(store).no_grad();
        let v = g.constant(x.clone());
        let out = enc.encode(&mut g, v).unwrap();
        out.rec_reprs.iter().map(|&r| g.value(r).clone()).collect()
    }

    #[test]
    fn twenty_frames_two_pools_give_five() {
        let cfg = EncoderConfig {
            subsample: 4,
            ..small(SplitVariant::Vgg)
        };
        let (s, e) = build(&cfg);
        let g = run(&s, &e, &input(20, 6, 0));
        assert_eq!(g[0].shape(), &[5, 4]);
        assert_eq!(e.output_frames(20), 5);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let (s, e) = build(&small(SplitVariant::Blstm));
        let mut g = Graph::with_params(&s);
        let v = g.constant(input(1, 6, 0));
        assert!(e.encode(&mut g, v).is_err());
    }

    #[test]
    fn blstm_variant_has_one_subtree_per_output() {
        let (s, _) = build(&small(SplitVariant::Blstm));
        for u in 0..2 {
            assert!(s.names().iter().any(|n| n.starts_with(&sd_prefix(u))));
        }
        assert!(!s.names().iter().any(|n| n.starts_with(&sd_prefix(2))));
    }

    #[test]
    fn vgg_split_multiplies_last_conv_filters() {
        let (s, e) = build(&small(SplitVariant::Vgg));
        let total: usize = s
            .names()
            .iter()
            .filter(|n| n.starts_with("enc.sd.") && n.ends_with(".conv.w"))
            .map(|n| s.by_name(n).unwrap().shape()[0])
            .sum();
        assert_eq!(total, 2 * e.config.conv_channels);
    }

    #[test]
    fn output_shapes_match_across_variants() {
        let x = input(9, 6, 3);
        let shapes: Vec<Vec<usize>> = [SplitVariant::None, SplitVariant::Vgg, SplitVariant::Blstm]
            .iter()
            .map(|&v| {
                let (s, e) = build(&small(v));
                run(&s, &e, &x)[0].shape().to_vec()
            })
            .collect();
        assert!(shapes.windows(2).all(|w| w[0] == w[1]), "{shapes:?}");
    }

    #[test]
    fn identical_sd_params_give_identical_outputs() {
        for variant in [SplitVariant::Vgg, SplitVariant::Blstm] {
            let (mut s, e) = build(&small(variant));
            let names: Vec<String> = s.names().to_vec();
            for n in names.iter().filter(|n| n.starts_with(&sd_prefix(1))) {
                let src = n.replacen(&sd_prefix(1), &sd_prefix(0), 1);
                let t = s.by_name(&src).unwrap().clone();
                let id = s.id(n).unwrap();
                *s.get_mut(id) = t;
            }
            let g = run(&s, &e, &input(8, 6, 4));
            assert_eq!(g[0], g[1]);
        }
    }

    #[test]
    fn swapping_sd_subtrees_swaps_outputs() {
        let (s, e) = build(&small(SplitVariant::Blstm));
        let x = input(8, 6, 5);
        let before = run(&s, &e, &x);
        assert_ne!(before[0], before[1]);
        let mut swapped = s.clone();
        for n in s.names().iter().filter(|n| n.starts_with(&sd_prefix(0))) {
            let other = n.replacen(&sd_prefix(0), &sd_prefix(1), 1);
            let (a, b) = (s.id(n).unwrap(), s.id(&other).unwrap());
            *swapped.get_mut(a) = s.get(b).clone();
            *swapped.get_mut(b) = s.get(a).clone();
        }
        let after = run(&swapped, &e, &x);
        assert_eq!(after[0], before[1]);
        assert_eq!(after[1], before[0]);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = EncoderConfig {
            subsample: 3,
            width: 5,
            conv_kernel: 2,
            ..EncoderConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
    }
}
