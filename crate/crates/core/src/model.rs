//! Full recognizer: split encoder, shared CTC head and shared attention decoder.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::ctc::CtcHead;
use crate::decoder::{AttentionDecoder, DecoderConfig};
use crate::encoder::{EncoderConfig, SplitEncoder, SplitEncoderOutput};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab: Vocabulary,
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.encoder.problems();
        p.extend(self.decoder.problems());
        p
    }

    pub fn with_speakers(&self, speakers: usize) -> Self {
        ModelConfig {
            encoder: self.encoder.with_speakers(speakers),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: SplitEncoder,
    pub ctc: CtcHead,
    pub decoder: AttentionDecoder,
}

impl Model {
    /// Registers all parameters in a fixed order: encoder, CTC head, decoder.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &ModelConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let encoder = SplitEncoder::new(store, rng, &config.encoder)?;
        let width = config.encoder.width;
        let vocab = config.vocab.len();
        let ctc = CtcHead::new(store, rng, "ctc", width, vocab)?;
        let decoder = AttentionDecoder::new(store, rng, &config.decoder, width, vocab)?;
        Ok(Model {
            config: config.clone(),
            encoder,
            ctc,
            decoder,
        })
    }

    /// Rebuilds the layer structure for an existing store (e.g. a loaded
    /// checkpoint), checking every name and shape.
    pub fn for_store(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut fresh = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&mut fresh, &mut rng, config)?;
        if fresh.len() != store.len() {
            return Err(Error::Invalid(format!(
                "parameter count {} does not match the model's {}",
                store.len(),
                fresh.len()
            )));
        }
        for ((id, name), (_, expected)) in store.iter().zip(fresh.iter()) {
            let want = fresh.by_name(expected).expect("own name");
            if name != expected || store.get(id).shape() != want.shape() {
                return Err(Error::Invalid(format!(
                    "parameter {name} {:?} does not match expected {expected} {:?}",
                    store.get(id).shape(),
                    want.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn outputs(&self) -> usize {
        self.config.encoder.outputs()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn encode(&self, g: &mut Graph, features: &Tensor) -> Result<SplitEncoderOutput> {
        let x = g.constant(features.clone());
        self.encoder.encode(g, x)
    }

    /// CTC logits for one encoder output.
    pub fn ctc_logits(&self, g: &mut Graph, enc: Var) -> Result<Var> {
        self.ctc.logits(g, enc)
    }
}
