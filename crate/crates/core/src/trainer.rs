//! AdaDelta with global-norm clipping, epsilon decay, the perturbed transfer
//! from a one-branch model to a multi-branch one, and the staged training
//! loop (single-speaker pretraining, multi-speaker, contrast retraining).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{stream_rng, Example};
use crate::decode::{decode_mixture, DecodeConfig};
use crate::encoder::sd_prefix;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::{Model, ModelConfig};
use crate::objective::{multi_speaker_loss, symmetric_kl_per_frame, LossWeights, MtlLossBreakdown};
use crate::score::{corpus_score, score_multi, ScoreReport};

#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState {
    pub rho: f64,
    pub epsilon: f64,
    /// `E[g^2]` per parameter, in store order.
    pub sq_grad: Vec<Vec<f64>>,
    /// `E[dx^2]` per parameter.
    pub sq_delta: Vec<Vec<f64>>,
}

impl AdaDeltaState {
    pub fn new(store: &ParamStore, rho: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(id, _)| vec![0.0; store.get(id).len()]).collect();
        AdaDeltaState {
            rho,
            epsilon,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }
}

/// Global L2 norm of `grads`.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `clip_norm`; returns the
/// norm before clipping.
pub fn clip_grads(grads: &mut [Vec<f64>], clip_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > clip_norm {
        let k = clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Clips then applies one AdaDelta update. Non-finite gradients leave
/// parameters and state untouched and return `Ok(false)`.
pub fn adadelta_step(store: &mut ParamStore, grads: &mut [Vec<f64>], state: &mut AdaDeltaState, clip_norm: f64) -> Result<bool> {
    if grads.len() != store.len() || grads.iter().zip(&state.sq_grad).any(|(g, s)| g.len() != s.len()) {
        return Err(Error::shape("adadelta_step", "gradients do not match the parameter store"));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        log::warn!("non-finite gradient; update skipped");
        return Ok(false);
    }
    clip_grads(grads, clip_norm);
    let (rho, eps) = (state.rho, state.epsilon);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let x = store.get_mut(id).data_mut();
        let (eg, ed) = (&mut state.sq_grad[k], &mut state.sq_delta[k]);
        for i in 0..x.len() {
            let g = grads[k][i];
            eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
            let dx = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
            ed[i] = rho * ed[i] + (1.0 - rho) * dx * dx;
            x[i] += dx;
        }
    }
    Ok(true)
}

/// Halves epsilon when the latest dev loss is worse than the one before.
pub fn epsilon_decay(state: &mut AdaDeltaState, dev_loss_history: &[f64]) -> bool {
    if let [.., prev, last] = dev_loss_history {
        if last > prev {
            state.epsilon /= 2.0;
            return true;
        }
    }
    false
}

/// Builds the `S`-output store for `multi` from a one-branch store: branch 0
/// and every shared parameter are copied, branches `u >= 1` copy branch 0 with
/// `w * (1 + Uniform(-p, p))` per scalar.
pub fn transfer_to_multispeaker(single: &ParamStore, multi: &ModelConfig, perturbation: f64, seed: u64) -> Result<ParamStore> {
    let mut template = ParamStore::new();
    Model::new(&mut template, &mut stream_rng(seed, 0), multi)?;
    let mut rng = stream_rng(seed, 7);
    let mut out = ParamStore::new();
    for (id, name) in template.iter() {
        let (source, perturb) = match sd_branch(name) {
            Some((u, rest)) => (format!("{}{rest}", sd_prefix(0)), u > 0),
            None => (name.to_string(), false),
        };
        let src = single
            .by_name(&source)
            .ok_or_else(|| Error::Invalid(format!("transfer: {source} missing from the single-speaker model")))?;
        if src.shape() != template.get(id).shape() {
            return Err(Error::shape(
                "transfer_to_multispeaker",
                format!("{source} {:?} vs {name} {:?}", src.shape(), template.get(id).shape()),
            ));
        }
        let mut value = src.clone();
        if perturb && perturbation > 0.0 {
            value
                .data_mut()
                .iter_mut()
                .for_each(|w| *w *= 1.0 + rng.random_range(-perturbation..perturbation));
        }
        out.insert(name, value)?;
    }
    if single.len() != template.iter().filter(|(_, n)| sd_branch(n).is_none_or(|(u, _)| u == 0)).count() {
        return Err(Error::Invalid("transfer: single-speaker model has parameters the target does not use".into()));
    }
    Ok(out)
}

fn sd_branch(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("enc.sd.")?;
    let (u, tail) = rest.split_once('.')?;
    Some((u.parse().ok()?, tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainSingle,
    MultiSpeaker,
    KlRetrain,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainSingle => "pretrain_single",
            Stage::MultiSpeaker => "multi_speaker",
            Stage::KlRetrain => "kl_retrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub pretrain_epochs: usize,
    pub multi_epochs: usize,
    pub kl_epochs: usize,
    /// CTC weight in the training loss.
    pub lambda: f64,
    /// Contrast weight in the retraining stage.
    pub eta: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub perturbation: f64,
    /// Beam used for dev CER during training.
    pub dev_beam: usize,
    /// Caps the examples per split (0 = all).
    pub limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            stages: vec![Stage::PretrainSingle, Stage::MultiSpeaker, Stage::KlRetrain],
            pretrain_epochs: 10,
            multi_epochs: 20,
            kl_epochs: 1,
            lambda: 0.1,
            eta: 0.1,
            rho: 0.95,
            epsilon: 1e-6,
            clip_norm: 5.0,
            batch: 8,
            perturbation: 0.1,
            dev_beam: 2,
            limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.stages.is_empty() || self.stages.windows(2).any(|w| w[0] >= w[1]) {
            p.push(format!("train.stages must be non-empty and strictly ordered, got {:?}", self.stages));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            p.push(format!("train.lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.eta >= 0.0) {
            p.push(format!("train.eta must be nonnegative, got {}", self.eta));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            p.push(format!("train.rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.epsilon > 0.0) {
            p.push(format!("train.epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.clip_norm > 0.0) {
            p.push(format!("train.clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch == 0 || self.dev_beam == 0 {
            p.push("train.batch and train.dev_beam must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            p.push(format!("train.perturbation must lie in [0, 1), got {}", self.perturbation));
        }
        p
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::PretrainSingle => self.pretrain_epochs,
            Stage::MultiSpeaker => self.multi_epochs,
            Stage::KlRetrain => self.kl_epochs,
        }
    }
}

/// In-memory splits. Pretraining reads the single-speaker sets only.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub single_train: Vec<Example>,
    pub single_dev: Vec<Example>,
    pub mix_train: Vec<Example>,
    pub mix_dev: Vec<Example>,
}

/// Mean loss terms over a set of examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub ctc: f64,
    pub att: f64,
    pub kl: f64,
    pub combined: f64,
}

impl LossSummary {
    fn add(&mut self, b: &MtlLossBreakdown) {
        self.ctc += b.ctc_total;
        self.att += b.att_total;
        self.kl += b.kl_term;
        self.combined += b.combined;
    }

    fn scaled(self, n: usize) -> Self {
        let k = 1.0 / n.max(1) as f64;
        LossSummary {
            ctc: self.ctc * k,
            att: self.att * k,
            kl: self.kl * k,
            combined: self.combined * k,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub ctc: f64,
    pub att: f64,
    pub kl: f64,
    pub combined: f64,
    pub dev_ctc: f64,
    pub dev_att: f64,
    pub dev_combined: f64,
    pub dev_cer: f64,
    /// Mean per-frame symmetric KL between the two outputs on dev (two-output models).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_sym_kl: Option<f64>,
    pub epsilon: f64,
    pub updates: usize,
    pub skipped_examples: usize,
}

/// Dev-set evaluation of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct DevReport {
    pub loss: LossSummary,
    pub cer: f64,
    pub sym_kl: Option<f64>,
    pub skipped: usize,
}

/// Mean per-frame symmetric KL between `G^1` and `G^2` over `examples`.
pub fn mean_symmetric_kl(model: &Model, store: &ParamStore, examples: &[Example]) -> Result<f64> {
    if model.outputs() != 2 {
        return Err(Error::Unsupported("symmetric KL needs a two-output model".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::with_params(store).no_grad();
        let enc = model.encode(&mut g, &ex.features)?;
        let kl = symmetric_kl_per_frame(g.value(enc.rec_reprs[0]), g.value(enc.rec_reprs[1]))?;
        total += kl.iter().sum::<f64>() / kl.len() as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Loss, decoding CER (permutation-min scoring) and, for two outputs, the
/// mean symmetric KL on `examples`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    examples: &[Example],
    weights: LossWeights,
    decode: &DecodeConfig,
) -> Result<DevReport> {
    let mut loss = LossSummary::default();
    let mut scored = 0;
    let mut skipped = 0;
    for ex in examples {
        let mut g = Graph::with_params(store).no_grad();
        match multi_speaker_loss(&mut g, model, &ex.features, &ex.references, weights) {
            Ok(l) => {
                loss.add(&l.breakdown);
                scored += 1;
            }
            Err(Error::Data(_)) | Err(Error::AlignmentInfeasible { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let reports = score_examples(model, store, examples, decode)?;
    let sym_kl = if model.outputs() == 2 {
        Some(mean_symmetric_kl(model, store, examples)?)
    } else {
        None
    };
    Ok(DevReport {
        loss: loss.scaled(scored),
        cer: corpus_score(&reports).average_cer,
        sym_kl,
        skipped,
    })
}

/// Decodes every example and scores it against its references with
/// permutation-min scoring (one-output models are duplicated).
pub fn score_examples(model: &Model, store: &ParamStore, examples: &[Example], decode: &DecodeConfig) -> Result<Vec<ScoreReport>> {
    examples
        .iter()
        .map(|ex| {
            let hyps: Vec<Vec<u32>> = decode_mixture(model, store, &ex.features, decode, None)?
                .into_iter()
                .map(|r| r.labels)
                .collect();
            Ok(score_multi(&hyps, &ex.references))
        })
        .collect()
}

/// Parameters and checkpoints produced by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-dev parameters of the last stage run.
    pub store: ParamStore,
    pub model_config: ModelConfig,
    pub metrics: Vec<MetricsRecord>,
    /// Best-dev parameters after each stage.
    pub stage_results: Vec<(Stage, ModelConfig, ParamStore)>,
    pub checkpoints: Vec<PathBuf>,
}

struct Epoch {
    loss: LossSummary,
    updates: usize,
    skipped: usize,
}

fn run_epoch(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdaDeltaState,
    examples: &[Example],
    order: &[usize],
    weights: LossWeights,
    cfg: &TrainConfig,
) -> Result<Epoch> {
    let mut loss = LossSummary::default();
    let (mut updates, mut skipped, mut seen) = (0, 0, 0);
    for batch in order.chunks(cfg.batch) {
        let mut grads: Vec<Vec<f64>> = opt.sq_grad.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut used = 0;
        for &i in batch {
            let ex = &examples[i];
            let mut g = Graph::with_params(store);
            let l = match multi_speaker_loss(&mut g, model, &ex.features, &ex.references, weights) {
                Ok(l) => l,
                Err(e @ (Error::Data(_) | Error::AlignmentInfeasible { .. })) => {
                    log::warn!("skipping {}: {e}", ex.id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            g.backward(l.loss)?;
            for (id, gr) in g.param_grads() {
                grads[id.0].iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b);
            }
            loss.add(&l.breakdown);
            used += 1;
        }
        if used == 0 {
            return Err(Error::Data(format!(
                "every example in a batch of {} has an infeasible alignment",
                batch.len()
            )));
        }
        let k = 1.0 / used as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
        if adadelta_step(store, &mut grads, opt, cfg.clip_norm)? {
            updates += 1;
        }
        seen += used;
    }
    Ok(Epoch {
        loss: loss.scaled(seen),
        updates,
        skipped,
    })
}

fn limited(examples: &[Example], limit: usize) -> &[Example] {
    if limit == 0 {
        examples
    } else {
        &examples[..limit.min(examples.len())]
    }
}

/// Runs the configured stages in order. `model_config` describes the final
/// (multi-output) model; pretraining uses it with one output. A stage after
/// pretraining that is run without it starts from `init` if given. Consecutive
/// stages on the same model keep their AdaDelta accumulators.
pub fn train(
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    decode: &DecodeConfig,
    data: &TrainData,
    init: Option<(ModelConfig, ParamStore)>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut problems = cfg.problems();
    problems.extend(model_config.problems());
    problems.extend(decode.problems());
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let dev_decode = DecodeConfig {
        beam: cfg.dev_beam.min(decode.beam),
        ..decode.clone()
    };
    let mut metrics_file = match out_dir {
        Some(d) => {
            let p = d.join("metrics.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stage_results: Vec<(Stage, ModelConfig, ParamStore)> = Vec::new();
    let mut current = init;
    let mut carried: Option<(ModelConfig, AdaDeltaState)> = None;

    for &stage in &cfg.stages {
        let (mcfg, mut store) = match stage {
            Stage::PretrainSingle => {
                let c = model_config.with_speakers(1);
                let mut s = ParamStore::new();
                Model::new(&mut s, &mut stream_rng(cfg.seed, 10), &c)?;
                (c, s)
            }
            _ => {
                let (prev_cfg, prev) = current
                    .take()
                    .ok_or_else(|| Error::Invalid(format!("stage {} needs a trained model", stage.as_str())))?;
                if prev_cfg.encoder.outputs() == model_config.encoder.outputs() {
                    (prev_cfg, prev)
                } else {
                    let s = transfer_to_multispeaker(&prev, model_config, cfg.perturbation, cfg.seed)?;
                    (model_config.clone(), s)
                }
            }
        };
        let model = Model::for_store(&mcfg, &store)?;
        let (train_set, dev_set) = match stage {
            Stage::PretrainSingle => (limited(&data.single_train, cfg.limit), limited(&data.single_dev, cfg.limit)),
            _ => (limited(&data.mix_train, cfg.limit), limited(&data.mix_dev, cfg.limit)),
        };
        if train_set.is_empty() {
            return Err(Error::Data(format!("stage {} has no training examples", stage.as_str())));
        }
        if let Some(ex) = train_set.iter().find(|e| e.references.len() != model.outputs()) {
            return Err(Error::Data(format!(
                "{} has {} references but the {} model has {} outputs",
                ex.id,
                ex.references.len(),
                stage.as_str(),
                model.outputs()
            )));
        }
        let weights = LossWeights {
            lambda: cfg.lambda,
            eta: cfg.eta,
            kl_active: stage == Stage::KlRetrain,
        };
        let mut opt = match carried.take() {
            Some((c, st)) if c == mcfg => st,
            _ => AdaDeltaState::new(&store, cfg.rho, cfg.epsilon),
        };
        let mut history = Vec::new();
        let mut best: Option<(f64, f64, ParamStore)> = None;
        log::info!(
            "stage {}: {} train / {} dev examples, {} outputs",
            stage.as_str(),
            train_set.len(),
            dev_set.len(),
            model.outputs()
        );
        for epoch in 1..=cfg.epochs(stage) {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut stream_rng(cfg.seed, 100 * (stage as u64 + 1) + epoch as u64));
            let ep = run_epoch(&model, &mut store, &mut opt, train_set, &order, weights, cfg)?;
            let dev = evaluate(&model, &store, dev_set, weights, &dev_decode)?;
            history.push(dev.loss.combined);
            let eps_used = opt.epsilon;
            if epsilon_decay(&mut opt, &history) {
                log::info!("dev loss degraded; epsilon {} -> {}", eps_used, opt.epsilon);
            }
            let rec = MetricsRecord {
                stage,
                epoch,
                ctc: ep.loss.ctc,
                att: ep.loss.att,
                kl: ep.loss.kl,
                combined: ep.loss.combined,
                dev_ctc: dev.loss.ctc,
                dev_att: dev.loss.att,
                dev_combined: dev.loss.combined,
                dev_cer: dev.cer,
                dev_sym_kl: dev.sym_kl,
                epsilon: eps_used,
                updates: ep.updates,
                skipped_examples: ep.skipped,
            };
            log::info!(
                "{} epoch {epoch}: train {:.4} dev {:.4} dev CER {:.2}%",
                stage.as_str(),
                rec.combined,
                rec.dev_combined,
                100.0 * rec.dev_cer
            );
            if let Some((f, p)) = metrics_file.as_mut() {
                serde_json::to_writer(&mut *f, &rec)?;
                f.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
            }
            metrics.push(rec);
            if let Some(d) = out_dir {
                let p = d.join(format!("{}_epoch{epoch:02}.ckpt", stage.as_str()));
                store.save(&p, &checkpoint_header(&mcfg, stage, epoch))?;
                checkpoints.push(p);
            }
            let better = best
                .as_ref()
                .is_none_or(|(c, l, _)| dev.cer < *c || (dev.cer == *c && dev.loss.combined < *l));
            if better {
                best = Some((dev.cer, dev.loss.combined, store.clone()));
            }
        }
        let best_store = best.map_or(store, |(_, _, s)| s);
        if let Some(d) = out_dir {
            let p = d.join(format!("{}_best.ckpt", stage.as_str()));
            best_store.save(&p, &checkpoint_header(&mcfg, stage, 0))?;
            checkpoints.push(p);
        }
        stage_results.push((stage, mcfg.clone(), best_store.clone()));
        carried = Some((mcfg.clone(), opt));
        current = Some((mcfg, best_store));
    }
    let (model_config, store) = current.expect("at least one stage");
    Ok(TrainOutcome {
        store,
        model_config,
        metrics,
        stage_results,
        checkpoints,
    })
}

/// JSON header stored in checkpoints; `epoch` 0 marks a best-dev snapshot.
pub fn checkpoint_header(model: &ModelConfig, stage: Stage, epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "stage": stage,
        "epoch": epoch,
    })
}

/// Model config recorded in a checkpoint header.
pub fn model_config_from_header(header: &serde_json::Value) -> Result<ModelConfig> {
    let m = header
        .get("model")
        .ok_or_else(|| Error::Data("checkpoint header has no model config".into()))?;
    Ok(serde_json::from_value(m.clone())?)
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore)> {
    let (store, header) = ParamStore::load(path)?;
    let cfg = model_config_from_header(&header)?;
    let model = Model::for_store(&cfg, &store)?;
    Ok((model, store))
}

/// Encoder outputs of one input as plain tensors.
pub fn encoder_outputs(model: &Model, store: &ParamStore, features: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::with_params(store).no_grad();
    let enc = model.encode(&mut g, features)?;
    Ok(enc.rec_reprs.iter().map(|&v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![x]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_from_fresh_state() {
        let mut s = scalar_store(0.0);
        let mut st = AdaDeltaState::new(&s, 0.95, 1e-8);
        assert!(adadelta_step(&mut s, &mut [vec![1.0]], &mut st, 5.0).unwrap());
        let expected = -(1e-8f64 / (0.05 + 1e-8)).sqrt();
        assert_abs_diff_eq!(s.by_name("x").unwrap().data()[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, -4.4721e-4, epsilon = 1e-8);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut s = scalar_store(0.3);
        let mut st = AdaDeltaState::new(&s, 0.95, 1e-8);
        adadelta_step(&mut s, &mut [vec![0.0]], &mut st, 5.0).unwrap();
        assert_eq!(s.by_name("x").unwrap().data()[0], 0.3);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut s = scalar_store(0.3);
        let mut st = AdaDeltaState::new(&s, 0.95, 1e-8);
        let before = st.clone();
        assert!(!adadelta_step(&mut s, &mut [vec![f64::NAN]], &mut st, 5.0).unwrap());
        assert_eq!(st, before);
        assert_eq!(s.by_name("x").unwrap().data()[0], 0.3);
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let mut g = vec![vec![6.0], vec![8.0]];
        assert_eq!(clip_grads(&mut g, 1.0), 10.0);
        assert_abs_diff_eq!(g[0][0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1][0], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_decreases() {
        let mut s = scalar_store(2.0);
        let mut st = AdaDeltaState::new(&s, 0.95, 1e-6);
        for _ in 0..20 {
            let x = s.by_name("x").unwrap().data()[0];
            let before = x * x;
            adadelta_step(&mut s, &mut [vec![2.0 * x]], &mut st, 5.0).unwrap();
            let y = s.by_name("x").unwrap().data()[0];
            assert!(y * y < before);
        }
    }

    #[test]
    fn epsilon_halves_on_degradation_only() {
        let s = scalar_store(0.0);
        let mut st = AdaDeltaState::new(&s, 0.95, 1e-8);
        assert!(!epsilon_decay(&mut st, &[5.0]));
        assert!(!epsilon_decay(&mut st, &[5.0, 4.0]));
        assert_eq!(st.epsilon, 1e-8);
        for _ in 0..3 {
            assert!(epsilon_decay(&mut st, &[4.0, 4.5]));
        }
        assert_eq!(st.epsilon, 1e-8 / 8.0);
    }

    #[test]
    fn sd_names_parse() {
        assert_eq!(sd_branch("enc.sd.3.blstm.0.fwd.wx"), Some((3, "blstm.0.fwd.wx")));
        assert_eq!(sd_branch("enc.rec.blstm.0"), None);
    }

    #[test]
    fn stage_order_is_validated() {
        let c = TrainConfig {
            stages: vec![Stage::MultiSpeaker, Stage::PretrainSingle],
            batch: 0,
            ..TrainConfig::default()
        };
        assert_eq!(c.problems().len(), 2);
    }
}
