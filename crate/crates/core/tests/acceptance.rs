//! Acceptance gate. One line per criterion; exits nonzero if any fails.
//! `ACCEPTANCE_ONLY=1,7` runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use itertools::Itertools;
use permfree::autodiff::{Graph, Tensor};
use permfree::checks::run_registered;
use permfree::config::DataConfig;
use permfree::ctc::{ctc_loss, log_softmax_rows, neg_log_likelihood};
use permfree::data::{generate_corpus, load_examples, power, write_corpus, CorpusLayout, SynthConfig, SynthWorld};
use permfree::decode::{greedy_search, joint_beam_search, DecodeConfig};
use permfree::decoder::{attention_decode_calls, reset_attention_decode_calls, DecoderConfig};
use permfree::encoder::{EncoderConfig, SplitVariant};
use permfree::layers::ParamStore;
use permfree::model::{Model, ModelConfig};
use permfree::objective::{assign_from_matrix, attention_permutation, multi_speaker_loss, LossWeights};
use permfree::score::{corpus_score, edit_distance};
use permfree::trainer::{mean_symmetric_kl, score_examples, train, Stage, TrainConfig, TrainData};
use permfree::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| scale * r.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---- oracles ----------------------------------------------------------------

/// Collapse repeats, then drop blanks (id 0).
fn collapse(path: &[usize]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p as u32);
        }
        prev = Some(p);
    }
    out
}

/// `-log` of the summed probability of every frame path collapsing to `labels`.
fn ctc_path_sum(logits: &Tensor, labels: &[u32]) -> f64 {
    let (t, k) = (logits.rows(), logits.cols());
    let probs: Vec<Vec<f64>> = (0..t)
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(|v| (v - m).exp() / z).collect()
        })
        .collect();
    let mut total = 0.0;
    for path in std::iter::repeat_n(0..k, t).multi_cartesian_product() {
        if collapse(&path) == labels {
            total += path.iter().enumerate().map(|(f, &c)| probs[f][c]).product::<f64>();
        }
    }
    -total.ln()
}

/// Minimum total over permutations by recursive enumeration in
/// lexicographic order; the first minimum wins.
fn brute_assignment(m: &[Vec<f64>]) -> (Vec<usize>, f64) {
    fn rec(m: &[Vec<f64>], used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut Option<(Vec<usize>, f64)>) {
        let s = m.len();
        if cur.len() == s {
            if best.as_ref().is_none_or(|b| acc < b.1) {
                *best = Some((cur.clone(), acc));
            }
            return;
        }
        let u = cur.len();
        for v in 0..s {
            if !used[v] {
                used[v] = true;
                cur.push(v);
                rec(m, used, cur, acc + m[u][v], best);
                cur.pop();
                used[v] = false;
            }
        }
    }
    let mut best = None;
    rec(m, &mut vec![false; m.len()], &mut Vec::new(), 0.0, &mut best);
    best.unwrap()
}

/// Cheapest edit script by trying every script: each step keeps/substitutes,
/// deletes from the reference side, or inserts from the hypothesis side.
fn script_distance(h: &[u8], r: &[u8]) -> usize {
    match (h.split_first(), r.split_first()) {
        (None, _) => r.len(),
        (_, None) => h.len(),
        (Some((a, ht)), Some((b, rt))) => {
            let sub = script_distance(ht, rt) + usize::from(a != b);
            let del = script_distance(h, rt) + 1;
            let ins = script_distance(ht, r) + 1;
            sub.min(del).min(ins)
        }
    }
}

// ---- criteria -----------------------------------------------------------------

fn c1_ctc_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    let mut infeasible = 0;
    for _ in 0..100 {
        let t = r.random_range(1..=6);
        let len = r.random_range(0..=3);
        let labels: Vec<u32> = (0..len).map(|_| r.random_range(1..=3)).collect();
        let logits = random_tensor(&mut r, t, 4, 3.0);
        let oracle = ctc_path_sum(&logits, &labels);
        let dp = neg_log_likelihood(&log_softmax_rows(&logits), &labels);
        let taped = {
            let mut g = Graph::new().no_grad();
            let v = g.constant(logits.clone());
            ctc_loss(&mut g, v, &labels).map(|l| g.value(l).item())
        };
        match (dp, taped) {
            (Ok(a), Ok(b)) if oracle.is_finite() => {
                worst = worst.max((a - oracle).abs()).max((b - oracle).abs());
            }
            (Err(_), Err(_)) if oracle.is_infinite() => infeasible += 1,
            _ => mismatches += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && worst <= 1e-9 && secs < 10.0,
        format!("100 cases ({infeasible} infeasible), max |dp - path sum| {worst:.2e} (<= 1e-9), {mismatches} mismatches, {secs:.2}s (< 10s)"),
    )
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let results = run_registered();
    let secs = start.elapsed().as_secs_f64();
    let required = [
        "linear",
        "embedding",
        "lstm_steps",
        "blstm",
        "vgg_block",
        "attention_step",
        "attention_loss",
        "ctc_loss",
        "multi_speaker_loss_fixed_assignment",
        "kl_contrast",
    ];
    let present = required.iter().all(|n| results.iter().any(|o| o.name == *n));
    let worst = results.iter().map(|o| o.relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    outcome(
        present && failed.is_empty() && worst < 1e-4 && secs < 120.0,
        format!(
            "{} checks, h=1e-4, worst relative error {worst:.2e} (< 1e-4), failed {failed:?}, {secs:.2}s (< 120s)",
            results.len()
        ),
    )
}

fn c3_assignment() -> Outcome {
    let start = Instant::now();
    let mut r = rng(303);
    let mut mismatches = 0;
    let mut ties = 0;
    for s in 2..=4 {
        for case in 0..1000 {
            // Half the matrices use a few integer levels so that ties occur.
            let m: Vec<Vec<f64>> = (0..s)
                .map(|_| {
                    (0..s)
                        .map(|_| if case % 2 == 0 { r.random_range(0..3) as f64 } else { r.random_range(0.0..10.0) })
                        .collect()
                })
                .collect();
            let (perm, total) = brute_assignment(&m);
            let n_min = (0..s).permutations(s).filter(|p| p.iter().enumerate().map(|(u, &v)| m[u][v]).sum::<f64>() == total).count();
            if n_min > 1 {
                ties += 1;
            }
            let got = assign_from_matrix(&m).unwrap();
            if got.pi_hat != perm || got.total_ctc != total {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 5.0,
        format!("S=2,3,4 x 1000 matrices ({ties} with tied minima), {mismatches} mismatches, {secs:.2}s (< 5s)"),
    )
}

fn tiny_config(variant: SplitVariant, speakers: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            split_variant: variant,
            speakers,
            input_dim: 8,
            cells: 4,
            width: 6,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            embed_dim: 4,
            cells: 6,
            att_dim: 5,
            ..DecoderConfig::default()
        },
        vocab: Vocabulary::new("abc").unwrap(),
    }
}

fn c4_decode_calls() -> Outcome {
    let mut r = rng(404);
    let mut lines = Vec::new();
    let mut ok = true;
    for (variant, s) in [(SplitVariant::Blstm, 2), (SplitVariant::Blstm, 3), (SplitVariant::Vgg, 2)] {
        let cfg = tiny_config(variant, s);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &mut r, &cfg).unwrap();
        let mut per_example = Vec::new();
        let mut reference_scheme = Vec::new();
        for _ in 0..5 {
            let feats = random_tensor(&mut r, 24, 8, 1.0);
            let refs: Vec<Vec<u32>> = (0..s).map(|_| (0..r.random_range(1..=3)).map(|_| r.random_range(1..=3)).collect()).collect();
            reset_attention_decode_calls();
            let mut g = Graph::with_params(&store);
            let loss = multi_speaker_loss(&mut g, &model, &feats, &refs, LossWeights::default()).unwrap();
            g.backward(loss.loss).unwrap();
            per_example.push(attention_decode_calls());
            reset_attention_decode_calls();
            let mut g = Graph::with_params(&store).no_grad();
            let enc = model.encode(&mut g, &feats).unwrap();
            attention_permutation(&mut g, &model, &enc.rec_reprs, &refs).unwrap();
            reference_scheme.push(attention_decode_calls());
        }
        ok &= per_example.iter().all(|&c| c == s) && reference_scheme.iter().all(|&c| c == s * s);
        lines.push(format!("{variant:?} S={s}: {per_example:?} (attention-side permutation: {reference_scheme:?})"));
    }
    outcome(ok, format!("decodes per training example = S; {}", lines.join("; ")))
}

/// Corpus as `gen-data` writes it with the default data section.
struct Corpus {
    data: TrainData,
    eval: Vec<permfree::data::Example>,
}

fn build_corpus(dir: &Path) -> Corpus {
    let d = DataConfig::default();
    let summaries = write_corpus(dir, &d.synth, &d.vocab, d.n_reuse, (d.snr_min, d.snr_max), d.seed).unwrap();
    assert!(summaries.iter().all(|s| s.fallbacks == 0));
    let layout = CorpusLayout::new(dir);
    let load = |p: std::path::PathBuf| load_examples(&p, &d.vocab).unwrap();
    Corpus {
        data: TrainData {
            single_train: load(layout.single("train")),
            single_dev: load(layout.single("dev")),
            mix_train: load(layout.mixed("train")),
            mix_dev: load(layout.mixed("dev")),
        },
        eval: load(layout.mixed("eval")),
    }
}

struct Reproduction {
    c5: Outcome,
    c6: Outcome,
}

fn c5_c6_reproduction() -> Reproduction {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = build_corpus(tmp.path());
    let model_cfg = ModelConfig {
        encoder: EncoderConfig::default(),
        decoder: DecoderConfig::default(),
        vocab: Vocabulary::default(),
    };
    let train_cfg = TrainConfig::default();
    let decode = DecodeConfig::default();
    let start = Instant::now();
    let out = train(&train_cfg, &model_cfg, &decode, &corpus.data, None, None).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let stage = |s: Stage| {
        let (_, c, st) = out.stage_results.iter().find(|r| r.0 == s).unwrap();
        (Model::for_store(c, st).unwrap(), st.clone())
    };
    let cer = |m: &(Model, ParamStore), ex: &[permfree::data::Example]| {
        corpus_score(&score_examples(&m.0, &m.1, ex, &decode).unwrap())
    };
    let base = stage(Stage::PretrainSingle);
    let multi = stage(Stage::MultiSpeaker);
    let kl = stage(Stage::KlRetrain);
    let base_eval = cer(&base, &corpus.eval);
    let multi_eval = cer(&multi, &corpus.eval);
    let base_dev = cer(&base, &corpus.data.mix_dev);
    let multi_dev = cer(&multi, &corpus.data.mix_dev);
    let kl_dev = cer(&kl, &corpus.data.mix_dev);
    let reduction = 1.0 - multi_eval.average_cer / base_eval.average_cer;
    let c5 = outcome(
        base_eval.average_cer >= 0.5 && multi_eval.average_cer <= 0.2 && reduction >= 0.5 && train_secs <= 1800.0,
        format!(
            "eval avg CER: no-split duplication baseline {:.1}% (>= 50%), split-by-blstm {:.1}% (<= 20%), relative reduction {:.1}% (>= 50%); \
             dev {:.1}% -> {:.1}%; pretrain + multi + kl training {:.0}s (<= 1800s)",
            100.0 * base_eval.average_cer,
            100.0 * multi_eval.average_cer,
            100.0 * reduction,
            100.0 * base_dev.average_cer,
            100.0 * multi_dev.average_cer,
            train_secs
        ),
    );
    let kl_before = mean_symmetric_kl(&multi.0, &multi.1, &corpus.data.mix_dev).unwrap();
    let kl_after = mean_symmetric_kl(&kl.0, &kl.1, &corpus.data.mix_dev).unwrap();
    let degradation = kl_dev.average_cer - multi_dev.average_cer;
    let c6 = outcome(
        kl_after > kl_before && degradation <= 0.01,
        format!(
            "dev mean symmetric KL {kl_before:.4} -> {kl_after:.4} (must increase); dev avg CER {:.2}% -> {:.2}% (change {:+.2} points, <= +1)",
            100.0 * multi_dev.average_cer,
            100.0 * kl_dev.average_cer,
            100.0 * degradation
        ),
    );
    Reproduction { c5, c6 }
}

fn c7_beam_exactness() -> Outcome {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut greedy_mismatches = 0;
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
            ..DecoderConfig::default()
        },
        vocab: Vocabulary::new("abc").unwrap(),
    };
    let max_len = 3;
    let mut seqs: Vec<Vec<u32>> = vec![Vec::new()];
    for n in 1..=max_len {
        seqs.extend(std::iter::repeat_n(1..=3u32, n).multi_cartesian_product());
    }
    for seed in 0..100u64 {
        let mut r = rng(7000 + seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &mut r, &cfg).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 20.0);
        }
        let enc = random_tensor(&mut r, 5, 6, 1.0);
        // Oracle scores: decoder log-probs of labels + eos, CTC by path sum.
        let mut g = Graph::with_params(&store).no_grad();
        let h = g.constant(enc.clone());
        let ctc_logits = model.ctc_logits(&mut g, h).unwrap();
        let ctc_logits = g.value(ctc_logits).clone();
        let scored: Vec<(f64, f64)> = seqs
            .iter()
            .map(|s| {
                let logits = model.decoder.teacher_forced_logits(&mut g, h, s).unwrap();
                let rows = log_softmax_rows(g.value(logits));
                let att: f64 = s.iter().chain([&0]).enumerate().map(|(n, &t)| rows.at(n, t as usize)).sum();
                (att, -ctc_path_sum(&ctc_logits, s))
            })
            .collect();
        for gamma in [0.0, 0.4, 1.0] {
            let combined = |&(att, ctc): &(f64, f64)| {
                if gamma == 0.0 {
                    att
                } else if gamma == 1.0 {
                    ctc
                } else {
                    gamma * ctc + (1.0 - gamma) * att
                }
            };
            let best = (0..seqs.len())
                .max_by(|&a, &b| combined(&scored[a]).partial_cmp(&combined(&scored[b])).unwrap().then(b.cmp(&a)))
                .unwrap();
            let dc = DecodeConfig {
                gamma,
                beam: 27,
                max_len: Some(max_len),
                ..DecodeConfig::default()
            };
            let got = joint_beam_search(&model, &store, &enc, &dc, None).unwrap();
            let diff = (got.combined - combined(&scored[best])).abs();
            if got.labels != seqs[best] || diff > 1e-9 {
                mismatches.push((seed, gamma));
            }
            let one = DecodeConfig { beam: 1, ..dc };
            let b1 = joint_beam_search(&model, &store, &enc, &one, None).unwrap();
            let gr = greedy_search(&model, &store, &enc, &one, None).unwrap();
            if b1.labels != gr.labels || b1.combined != gr.combined {
                greedy_mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches.is_empty() && greedy_mismatches == 0 && secs < 30.0,
        format!(
            "100 models x gamma {{0, 0.4, 1}}, beam 27 vs exhaustive over {} sequences: {} mismatches {mismatches:?}; beam 1 vs greedy: {greedy_mismatches} mismatches; {secs:.2}s (< 30s)",
            seqs.len(),
            mismatches.len()
        ),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c8_mixer() -> Outcome {
    let synth = SynthConfig {
        train_utterances: 300,
        dev_utterances: 60,
        eval_utterances: 60,
        ..SynthConfig::default()
    };
    let vocab = Vocabulary::default();
    let world = SynthWorld::new(&synth, &vocab, 5).unwrap();
    let utts = world.utterances("u_", 300, 9).unwrap();
    let (mixes, report) = generate_corpus(&utts, 3, (0.0, 5.0), 11).unwrap();
    let by_id: BTreeMap<&str, &permfree::data::Utterance> = utts.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut snr_err = 0.0f64;
    let mut partner_uses: BTreeMap<&str, usize> = BTreeMap::new();
    let mut same_speaker = 0;
    let mut bad_duration = 0;
    for m in &mixes {
        let (a, b) = (by_id[m.component_ids[0].as_str()], by_id[m.component_ids[1].as_str()]);
        let achieved = 10.0 * (m.gain * m.gain * power(&a.features) / power(&b.features)).log10();
        snr_err = snr_err.max((achieved - m.snr_db).abs());
        *partner_uses.entry(b.id.as_str()).or_default() += 1;
        same_speaker += usize::from(a.speaker == b.speaker || m.speakers[0] == m.speakers[1]);
        bad_duration += usize::from(m.features.rows() != a.frames().max(b.frames()));
    }
    let max_reuse = partner_uses.values().copied().max().unwrap_or(0);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(d1.path(), &synth, &vocab, 3, (0.0, 5.0), 17).unwrap();
    write_corpus(d2.path(), &synth, &vocab, 3, (0.0, 5.0), 17).unwrap();
    let (f1, f2) = (dir_bytes(d1.path()), dir_bytes(d2.path()));
    let identical = f1 == f2 && !f1.is_empty();
    let passed = mixes.len() == utts.len()
        && snr_err < 1e-9
        && max_reuse <= 3
        && report.fallbacks == 0
        && same_speaker == 0
        && bad_duration == 0
        && identical;
    outcome(
        passed,
        format!(
            "{} mixtures from {} utterances; max SNR error {snr_err:.1e} dB; max partner reuse {max_reuse} (<= 3), {} fallbacks; \
             {same_speaker} same-speaker pairs; {bad_duration} duration mismatches; regeneration identical over {} files: {identical}",
            mixes.len(),
            utts.len(),
            report.fallbacks,
            f1.len()
        ),
    )
}

fn c9_edit_distance() -> Outcome {
    let start = Instant::now();
    let mut r = rng(909);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut s = || -> Vec<u8> { (0..r.random_range(0..=6)).map(|_| b"abc"[r.random_range(0..3)]).collect() };
        let (h, rf) = (s(), s());
        let e = edit_distance(&h, &rf);
        let consistent = e.distance == e.substitutions + e.deletions + e.insertions
            && rf.len() + e.insertions - e.deletions == h.len();
        if e.distance != script_distance(&h, &rf) || !consistent {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 5.0,
        format!("1000 pairs over 3 chars, length <= 6: {mismatches} mismatches, {secs:.2}s (< 5s)"),
    )
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let cfg_path = tmp.path().join("config.json");
    fs::write(
        &cfg_path,
        format!(
            r#"{{
  // small determinism run
  "data": {{ "corpus_dir": {:?}, "synth": {{ "train_utterances": 40, "dev_utterances": 10, "eval_utterances": 10 }} }},
  "train": {{ "pretrain_epochs": 1, "multi_epochs": 2, "kl_epochs": 1 }},
  "model": {{ "encoder": {{ "cells": 8, "width": 8 }}, "decoder": {{ "cells": 8, "att_dim": 8 }} }}
}}"#,
            corpus.display().to_string()
        ),
    )
    .unwrap();
    let cfg = cfg_path.display().to_string();
    let run = |args: &[&str]| {
        let mut argv = vec!["permfree", "--config", cfg.as_str()];
        argv.extend_from_slice(args);
        permfree::cli::run(argv)
    };
    let gen = run(&["gen-data", "--seed", "3"]);
    let (a, b) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    let ra = run(&["train", "--run-dir", &a.display().to_string()]);
    let rb = run(&["train", "--run-dir", &b.display().to_string()]);
    let compare = |d: &Path| -> BTreeMap<String, Vec<u8>> {
        dir_bytes(d)
            .into_iter()
            .filter(|(k, _)| k.ends_with(".ckpt") || k == "metrics.jsonl")
            .collect()
    };
    let (fa, fb) = (compare(&a), compare(&b));
    let identical = fa == fb && fa.contains_key("metrics.jsonl") && fa.len() > 1;
    outcome(
        gen == 0 && ra == 0 && rb == 0 && identical,
        format!(
            "exit codes gen-data {gen}, train {ra}/{rb}; metrics.jsonl + {} checkpoints byte-identical: {identical}",
            fa.len().saturating_sub(1)
        ),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let total = Instant::now();
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let timed = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome, results: &mut Vec<_>| {
        if wanted(n) {
            let t = Instant::now();
            let o = f();
            let d = t.elapsed();
            println!("{} criterion {n:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, name, o, d));
        }
    };
    timed(1, "ctc dynamic programming vs path sum", &c1_ctc_oracle, &mut results);
    timed(2, "gradient checks", &c2_gradients, &mut results);
    timed(3, "permutation assignment vs exhaustive", &c3_assignment, &mut results);
    timed(4, "attention decodes per example", &c4_decode_calls, &mut results);
    if wanted(5) || wanted(6) {
        let rep = c5_c6_reproduction();
        for (n, name, o) in [
            (5, "multi-speaker reproduction", rep.c5),
            (6, "kl retraining effect", rep.c6),
        ] {
            if wanted(n) {
                println!("{} criterion {n:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
                results.push((n, name, o, Duration::ZERO));
            }
        }
    }
    timed(7, "beam search exactness", &c7_beam_exactness, &mut results);
    timed(8, "mixer conformance", &c8_mixer, &mut results);
    timed(9, "edit distance vs exhaustive scripts", &c9_edit_distance, &mut results);
    timed(10, "train determinism", &c10_determinism, &mut results);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s{}",
        results.len() - failed.len(),
        results.len(),
        total.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
