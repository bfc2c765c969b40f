//! Run configuration: JSON with `//` and `/* */` comments, four sections,
//! unknown keys rejected, `PERMFREE_<SECTION>_<KEY>` environment overrides.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SynthConfig;
use crate::decode::DecodeConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::vocab::Vocabulary;

pub const ENV_PREFIX: &str = "PERMFREE_";
pub const SECTIONS: [&str; 4] = ["model", "train", "decode", "data"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory written by `gen-data` and read by the other subcommands.
    pub corpus_dir: PathBuf,
    pub vocab: Vocabulary,
    /// Seed of the synthetic world and the mixer.
    pub seed: u64,
    /// Maximum number of mixtures any utterance joins as a partner.
    pub n_reuse: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus_dir: PathBuf::from("corpus"),
            vocab: Vocabulary::default(),
            seed: 7,
            n_reuse: 3,
            snr_min: 0.0,
            snr_max: 5.0,
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.synth.problems();
        if self.n_reuse == 0 {
            p.push("data.n_reuse must be positive".into());
        }
        if !(self.snr_min.is_finite() && self.snr_max.is_finite() && self.snr_min <= self.snr_max) {
            p.push(format!("data.snr_min {} must not exceed data.snr_max {}", self.snr_min, self.snr_max));
        }
        p
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.model.encoder.clone(),
            decoder: self.model.decoder.clone(),
            vocab: self.data.vocab.clone(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.model_config().problems();
        p.extend(self.train.problems());
        p.extend(self.decode.problems());
        p.extend(self.data.problems());
        if self.model.encoder.input_dim != self.data.synth.feature_dim {
            p.push(format!(
                "model.encoder.input_dim {} differs from data.synth.feature_dim {}",
                self.model.encoder.input_dim, self.data.synth.feature_dim
            ));
        }
        p
    }

    /// Parses `text`, applies `env` overrides and validates, reporting every
    /// problem found.
    pub fn parse<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut stripped = String::new();
        json_comments::StripComments::new(text.as_bytes())
            .read_to_string(&mut stripped)
            .map_err(|e| Error::Config(vec![format!("unreadable config: {e}")]))?;
        let mut root = if stripped.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(&stripped).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?
        };
        let mut problems = Vec::new();
        if !root.is_object() {
            return Err(Error::Config(vec!["top level must be an object".into()]));
        }
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            if let Err(e) = apply_override(&mut root, &key, &raw) {
                problems.push(e);
            }
        }
        let reference = serde_json::to_value(RunConfig::default()).expect("default serializes");
        unknown_keys(&mut root, &reference, "", &mut problems);

        let obj = root.as_object().expect("checked above");
        let cfg = RunConfig {
            model: section(obj, "model", &mut problems),
            train: section(obj, "train", &mut problems),
            decode: section(obj, "decode", &mut problems),
            data: section(obj, "data", &mut problems),
        };
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Reads `path` (defaults only if `None`) with overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(vec![format!("{}: {e}", p.display())]))?,
            None => String::new(),
        };
        RunConfig::parse(&text, std::env::vars())
    }

    /// Problems for every path the given subcommand reads that does not exist.
    pub fn missing_paths(&self, paths: &[&Path]) -> Vec<String> {
        paths
            .iter()
            .filter(|p| !p.exists())
            .map(|p| format!("path {} does not exist", p.display()))
            .collect()
    }
}

/// A section that fails to deserialize is reported and replaced by its
/// default so the remaining checks still run.
fn section<T: DeserializeOwned + Default>(obj: &Map<String, Value>, name: &str, problems: &mut Vec<String>) -> T {
    match obj.get(name) {
        None => T::default(),
        Some(v) => serde_json::from_value(v.clone()).unwrap_or_else(|e| {
            problems.push(format!("{name}: {e}"));
            T::default()
        }),
    }
}

/// Reports and removes keys absent from `reference`.
fn unknown_keys(value: &mut Value, reference: &Value, path: &str, problems: &mut Vec<String>) {
    let (Value::Object(obj), Value::Object(known)) = (value, reference) else {
        return;
    };
    obj.retain(|k, _| {
        let ok = known.contains_key(k);
        if !ok {
            let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            problems.push(format!("unknown key {full}"));
        }
        ok
    });
    for (k, v) in obj.iter_mut() {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        unknown_keys(v, &known[k], &full, problems);
    }
}

/// `PERMFREE_TRAIN_CLIP_NORM=2` sets `train.clip_norm`; nested keys are
/// joined by `_` as well (`PERMFREE_MODEL_ENCODER_CELLS`). Values parse as
/// JSON, falling back to a plain string.
fn apply_override(root: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let rest = key[ENV_PREFIX.len()..].to_ascii_lowercase();
    let Some(sect) = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
        return Err(format!("{key}: unknown section"));
    };
    let reference = serde_json::to_value(RunConfig::default()).expect("default serializes");
    let path = resolve(&reference[*sect], &rest[sect.len() + 1..]).ok_or_else(|| format!("{key}: unknown key"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root
        .as_object_mut()
        .expect("object root")
        .entry(sect.to_string())
        .or_insert_with(|| Value::Object(Map::new()));
    for (i, part) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("{key}: {} is not an object", path[..i].join(".")))?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        node = obj.entry(part.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Splits `rest` into a key path that exists in `reference`.
fn resolve(reference: &Value, rest: &str) -> Option<Vec<String>> {
    let obj = reference.as_object()?;
    if obj.contains_key(rest) {
        return Some(vec![rest.to_string()]);
    }
    for (k, v) in obj {
        if let Some(tail) = rest.strip_prefix(&format!("{k}_")) {
            if let Some(mut path) = resolve(v, tail) {
                path.insert(0, k.clone());
                return Some(path);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("", no_env()).unwrap(), RunConfig::default());
        assert!(RunConfig::default().problems().is_empty());
    }

    #[test]
    fn comments_are_stripped() {
        let text = r#"{
            // desk run
            "train": { "lambda": 0.2 /* inline */ },
            "decode": { "beam": 4 }
        }"#;
        let c = RunConfig::parse(text, no_env()).unwrap();
        assert_eq!(c.train.lambda, 0.2);
        assert_eq!(c.decode.beam, 4);
    }

    #[test]
    fn all_problems_are_listed() {
        let text = r#"{ "train": { "lamda": 0.2, "lambda": 3 }, "decode": { "gama": 1, "beam": "x" }, "extra": 1 }"#;
        let Err(Error::Config(p)) = RunConfig::parse(text, no_env()) else {
            panic!("expected config error");
        };
        assert_eq!(p.len(), 5, "{p:?}");
        assert!(p.iter().any(|s| s.starts_with("decode:")));
        assert!(p.iter().any(|s| s.contains("lambda")));
        assert!(p.iter().any(|s| s == "unknown key train.lamda"));
        assert!(p.iter().any(|s| s == "unknown key decode.gama"));
        assert!(p.iter().any(|s| s == "unknown key extra"));
    }

    #[test]
    fn range_violations_are_all_reported() {
        let text = r#"{ "train": { "lambda": 1.5 }, "decode": { "gamma": -0.1 } }"#;
        let Err(Error::Config(p)) = RunConfig::parse(text, no_env()) else {
            panic!("expected config error");
        };
        assert!(p.len() >= 2, "{p:?}");
    }

    #[test]
    fn env_overrides_nested_keys() {
        let env = vec![
            ("PERMFREE_TRAIN_CLIP_NORM".to_string(), "2.5".to_string()),
            ("PERMFREE_MODEL_ENCODER_CELLS".to_string(), "8".to_string()),
            ("PERMFREE_MODEL_ENCODER_SPLIT_VARIANT".to_string(), "vgg".to_string()),
            ("PERMFREE_DATA_SYNTH_NOISE_SIGMA".to_string(), "0.1".to_string()),
            ("PERMFREE_DATA_CORPUS_DIR".to_string(), "/tmp/c".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = RunConfig::parse(r#"{"train": {"clip_norm": 1.0}}"#, env).unwrap();
        assert_eq!(c.train.clip_norm, 2.5);
        assert_eq!(c.model.encoder.cells, 8);
        assert_eq!(c.data.synth.noise_sigma, 0.1);
        assert_eq!(c.data.corpus_dir, PathBuf::from("/tmp/c"));
        assert_ne!(c.model.encoder.split_variant, EncoderConfig::default().split_variant);
    }

    #[test]
    fn bad_env_keys_are_problems() {
        let env = vec![
            ("PERMFREE_TRAIN_NOPE".to_string(), "1".to_string()),
            ("PERMFREE_BOGUS_X".to_string(), "1".to_string()),
        ];
        let Err(Error::Config(p)) = RunConfig::parse("", env) else {
            panic!("expected config error");
        };
        assert_eq!(p.len(), 2, "{p:?}");
    }

    #[test]
    fn mismatched_feature_dim_is_reported() {
        let text = r#"{ "model": { "encoder": { "input_dim": 8 } } }"#;
        assert!(matches!(RunConfig::parse(text, no_env()), Err(Error::Config(_))));
    }
}
