//! Synthetic corpus: per-speaker renderings of a shared emission table,
//! two-speaker mixing at a target SNR with a random start offset, and the
//! reuse-limited partner sampling used to build mixture corpora. Also the
//! on-disk feature and manifest formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Seeded generator for stream `stream` of component `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One `D`-dim prototype per label id (row `k - 1` for label `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionTable {
    pub prototypes: Vec<Vec<f64>>,
}

impl EmissionTable {
    /// Standard normal prototypes.
    pub fn random(labels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, 1.0).expect("valid");
        EmissionTable {
            prototypes: (0..labels).map(|_| (0..dim).map(|_| n.sample(rng)).collect()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn prototype(&self, label: u32) -> Result<&[f64]> {
        label
            .checked_sub(1)
            .and_then(|k| self.prototypes.get(k as usize))
            .map(Vec::as_slice)
            .ok_or(Error::UnknownLabel(label))
    }
}

/// Speaker as an affine map `x -> A x + b` of the shared table.
#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: usize,
    pub transform: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl Speaker {
    /// `A = I + spread * N(0, 1/D)`, `b = spread * N(0, 1)`.
    pub fn random(id: usize, dim: usize, spread: f64, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, 1.0).expect("valid");
        let scale = spread / (dim as f64).sqrt();
        let transform = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| if i == j { 1.0 } else { 0.0 } + scale * n.sample(rng))
                    .collect()
            })
            .collect();
        let offset = (0..dim).map(|_| spread * n.sample(rng)).collect();
        Speaker { id, transform, offset }
    }

    pub fn table(&self, base: &EmissionTable) -> EmissionTable {
        EmissionTable {
            prototypes: base
                .prototypes
                .iter()
                .map(|p| {
                    self.transform
                        .iter()
                        .zip(&self.offset)
                        .map(|(row, b)| row.iter().zip(p).map(|(a, x)| a * x).sum::<f64>() + b)
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub labels: Vec<u32>,
    pub text: String,
    /// `[T, D]`.
    pub features: Tensor,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Frames: each label's prototype repeated `frames_per_label` times (one more
/// with probability 1/2 when `jitter`), plus i.i.d. `N(0, noise_sigma^2)`.
pub fn render_features(
    labels: &[u32],
    table: &EmissionTable,
    noise_sigma: f64,
    frames_per_label: usize,
    jitter: bool,
    seed: u64,
) -> Result<Tensor> {
    if labels.is_empty() || frames_per_label == 0 {
        return Err(Error::Invalid("rendering needs labels and a positive frames_per_label".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let dim = table.dim();
    let mut data = Vec::new();
    let mut frames = 0;
    for &l in labels {
        let p = table.prototype(l)?;
        let reps = frames_per_label + usize::from(jitter && rng.random_bool(0.5));
        for _ in 0..reps {
            data.extend(p.iter().map(|&x| x + if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }));
            frames += 1;
        }
    }
    Tensor::new(vec![frames, dim], data)
}

/// Mean squared feature value over all (active) frames.
pub fn power(features: &Tensor) -> f64 {
    features.data().iter().map(|x| x * x).sum::<f64>() / features.len() as f64
}

/// Two-speaker mixture with references ordered by energy (index 0 louder).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub id: String,
    /// Ids of the first (`u1`) and second (`u2`) component utterances.
    pub component_ids: [String; 2],
    pub speakers: [usize; 2],
    pub snr_db: f64,
    /// Start frame of the shorter component.
    pub offset: usize,
    /// Amplitude applied to `u1`.
    pub gain: f64,
    pub features: Tensor,
    /// References in energy order.
    pub references: [Vec<u32>; 2],
    pub texts: [String; 2],
    /// Whether `u1` is the higher-energy source.
    pub first_is_louder: bool,
}

/// Adds `g * u1` and `u2`, the shorter one zero-padded to start at `offset`.
/// `g = 10^(snr/20) * sqrt(P2 / P1)` so the achieved SNR equals `snr_db`.
pub fn mix_pair(u1: &Utterance, u2: &Utterance, snr_db: f64, offset: usize) -> Result<MixtureExample> {
    if u1.speaker == u2.speaker {
        return Err(Error::Invalid(format!("cannot mix two utterances of speaker {}", u1.speaker)));
    }
    let (t1, t2) = (u1.frames(), u2.frames());
    let d = u1.features.cols();
    if u2.features.cols() != d {
        return Err(Error::shape("mix_pair", format!("feature dims {d} vs {}", u2.features.cols())));
    }
    if offset > t1.abs_diff(t2) {
        return Err(Error::Invalid(format!("offset {offset} exceeds length difference {}", t1.abs_diff(t2))));
    }
    let (p1, p2) = (power(&u1.features), power(&u2.features));
    if p1 <= 0.0 || p2 <= 0.0 {
        return Err(Error::Data("zero-power utterance cannot be mixed".into()));
    }
    let gain = 10f64.powf(snr_db / 20.0) * (p2 / p1).sqrt();
    let total = t1.max(t2);
    let (start1, start2) = if t1 >= t2 { (0, offset) } else { (offset, 0) };
    let mut data = vec![0.0; total * d];
    for (r, row) in u1.features.data().chunks(d).enumerate() {
        for (c, v) in row.iter().enumerate() {
            data[(start1 + r) * d + c] += gain * v;
        }
    }
    for (r, row) in u2.features.data().chunks(d).enumerate() {
        for (c, v) in row.iter().enumerate() {
            data[(start2 + r) * d + c] += v;
        }
    }
    let first_is_louder = gain * gain * p1 >= p2;
    let (a, b) = if first_is_louder { (u1, u2) } else { (u2, u1) };
    Ok(MixtureExample {
        id: format!("{}+{}", u1.id, u2.id),
        component_ids: [u1.id.clone(), u2.id.clone()],
        speakers: [u1.speaker, u2.speaker],
        snr_db,
        offset,
        gain,
        features: Tensor::new(vec![total, d], data)?,
        references: [a.labels.clone(), b.labels.clone()],
        texts: [a.text.clone(), b.text.clone()],
        first_is_louder,
    })
}

/// Partner counts left after corpus generation, plus fallback events.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerReport {
    pub counts: Vec<usize>,
    pub partner_uses: Vec<usize>,
    pub fallbacks: usize,
}

/// Every utterance is the first component exactly once. Partners are drawn
/// with probability proportional to their remaining reuse count among
/// utterances of other speakers; a chosen partner with a positive count is
/// decremented. When no other-speaker utterance has count left, the partner
/// is drawn uniformly from other-speaker utterances and a warning is logged.
pub fn generate_corpus(
    utterances: &[Utterance],
    n_reuse: usize,
    snr_range: (f64, f64),
    seed: u64,
) -> Result<(Vec<MixtureExample>, MixerReport)> {
    if n_reuse == 0 {
        return Err(Error::Invalid("n_reuse must be at least 1".into()));
    }
    let (lo, hi) = snr_range;
    if !(lo <= hi) {
        return Err(Error::Invalid(format!("snr range [{lo}, {hi}] is empty")));
    }
    let first = utterances.first().map(|u| u.speaker);
    if utterances.iter().all(|u| Some(u.speaker) == first) {
        return Err(Error::Data("mixing needs utterances from at least two speakers".into()));
    }
    let mut rng = stream_rng(seed, 1);
    let mut counts = vec![n_reuse; utterances.len()];
    let mut uses = vec![0usize; utterances.len()];
    let mut fallbacks = 0;
    let mut out = Vec::with_capacity(utterances.len());
    for ui in utterances {
        let eligible: Vec<usize> = (0..utterances.len())
            .filter(|&k| utterances[k].speaker != ui.speaker && counts[k] > 0)
            .collect();
        let j = if eligible.is_empty() {
            fallbacks += 1;
            log::warn!("no partner with reuse count left for {}; sampling ignoring counts", ui.id);
            let others: Vec<usize> = (0..utterances.len()).filter(|&k| utterances[k].speaker != ui.speaker).collect();
            others[rng.random_range(0..others.len())]
        } else {
            let total: usize = eligible.iter().map(|&k| counts[k]).sum();
            let mut pick = rng.random_range(0..total);
            let mut chosen = eligible[eligible.len() - 1];
            for &k in &eligible {
                if pick < counts[k] {
                    chosen = k;
                    break;
                }
                pick -= counts[k];
            }
            chosen
        };
        if counts[j] > 0 {
            counts[j] -= 1;
        }
        uses[j] += 1;
        let snr = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let diff = ui.frames().abs_diff(utterances[j].frames());
        let offset = rng.random_range(0..=diff);
        out.push(mix_pair(ui, &utterances[j], snr, offset)?);
    }
    Ok((
        out,
        MixerReport {
            counts,
            partner_uses: uses,
            fallbacks,
        },
    ))
}

/// Generator settings for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub speakers: usize,
    pub feature_dim: usize,
    pub frames_per_label: usize,
    pub jitter: bool,
    pub noise_sigma: f64,
    /// Scale of per-speaker deviations from the shared table.
    pub speaker_spread: f64,
    pub min_label_len: usize,
    pub max_label_len: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub eval_utterances: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            speakers: 12,
            feature_dim: 40,
            frames_per_label: 3,
            jitter: true,
            noise_sigma: 0.2,
            speaker_spread: 1.0,
            min_label_len: 3,
            max_label_len: 6,
            train_utterances: 2000,
            dev_utterances: 200,
            eval_utterances: 200,
        }
    }
}

impl SynthConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.speakers < 2 {
            p.push(format!("data.synth.speakers must be at least 2, got {}", self.speakers));
        }
        if self.feature_dim == 0 || self.frames_per_label == 0 {
            p.push("data.synth.feature_dim and data.synth.frames_per_label must be positive".into());
        }
        if self.min_label_len == 0 || self.min_label_len > self.max_label_len {
            p.push(format!(
                "data.synth label lengths must satisfy 1 <= min ({}) <= max ({})",
                self.min_label_len, self.max_label_len
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            p.push("data.synth.noise_sigma must be nonnegative".into());
        }
        p
    }
}

/// Fixed world of the synthetic task: vocabulary, table and speakers.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub base: EmissionTable,
    pub speakers: Vec<Speaker>,
    pub tables: Vec<EmissionTable>,
}

impl SynthWorld {
    pub fn new(config: &SynthConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = stream_rng(seed, 2);
        let base = EmissionTable::random(vocab.len(), config.feature_dim, &mut rng);
        let speakers: Vec<Speaker> = (0..config.speakers)
            .map(|s| Speaker::random(s, config.feature_dim, config.speaker_spread, &mut rng))
            .collect();
        let tables = speakers.iter().map(|s| s.table(&base)).collect();
        Ok(SynthWorld {
            config: config.clone(),
            vocab: vocab.clone(),
            base,
            speakers,
            tables,
        })
    }

    /// Random text without leading, trailing or doubled spaces.
    fn sample_text(&self, rng: &mut impl Rng) -> String {
        let chars = self.vocab.chars();
        let len = rng.random_range(self.config.min_label_len..=self.config.max_label_len);
        let mut s = String::with_capacity(len);
        let mut prev = ' ';
        for i in 0..len {
            loop {
                let c = chars[rng.random_range(0..chars.len())];
                let edge = i == 0 || i + 1 == len;
                if c == ' ' && (edge || prev == ' ') {
                    continue;
                }
                s.push(c);
                prev = c;
                break;
            }
        }
        s
    }

    /// `count` utterances with speakers assigned round-robin, ids `{prefix}{index}`.
    pub fn utterances(&self, prefix: &str, count: usize, seed: u64) -> Result<Vec<Utterance>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = stream_rng(seed, 1000 + i as u64);
            let speaker = i % self.speakers.len();
            let text = self.sample_text(&mut rng);
            let labels = self.vocab.encode(&text)?;
            let feat_seed: u64 = rng.random();
            let features = render_features(
                &labels,
                &self.tables[speaker],
                self.config.noise_sigma,
                self.config.frames_per_label,
                self.config.jitter,
                feat_seed,
            )?;
            out.push(Utterance {
                id: format!("{prefix}{i:05}"),
                speaker,
                labels,
                text,
                features,
            });
        }
        Ok(out)
    }
}

// ---- on-disk formats -----------------------------------------------------

const FEATURE_MAGIC: &[u8; 8] = b"PFFEAT\0\0";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_DTYPE: &[u8; 8] = b"f64le\0\0\0";

/// Header (magic, version, T, D, dtype tag) then `T*D` little-endian f64, row-major.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    let (t, d) = (features.rows(), features.cols());
    let mut buf = Vec::with_capacity(36 + features.len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    buf.extend_from_slice(FEATURE_DTYPE);
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    if raw.len() < 36 || &raw[..8] != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let t = u64::from_le_bytes(raw[12..20].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(raw[20..28].try_into().unwrap()) as usize;
    if &raw[28..36] != FEATURE_DTYPE {
        return Err(bad("unsupported dtype"));
    }
    let body = &raw[36..];
    if t == 0 || d == 0 || body.len() != t * d * 8 {
        return Err(bad(&format!("{t}x{d} header does not match {} payload bytes", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![t, d], data)
}

/// One line of a JSON-lines manifest: a single-speaker utterance (one
/// speaker, one label) or a mixture (two of each, in energy order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub speakers: Vec<usize>,
    /// Relative to the manifest's directory.
    pub feature_path: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        if entry.speakers.is_empty() || entry.speakers.len() != entry.labels.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: speakers and labels must be non-empty and of equal count", n + 1),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

/// In-memory training example loaded from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    /// One reference per speaker, energy order for mixtures.
    pub references: Vec<Vec<u32>>,
}

pub fn load_examples(manifest: &Path, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let features = read_features(&dir.join(&e.feature_path))?;
            let references = e.labels.iter().map(|t| vocab.encode(t)).collect::<Result<_>>()?;
            Ok(Example {
                id: e.id,
                features,
                references,
            })
        })
        .collect()
}

/// Manifest paths of a generated corpus directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusLayout { root: root.into() }
    }

    pub fn single(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}_single.jsonl"))
    }

    pub fn mixed(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}_mix.jsonl"))
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "eval"];

/// Summary of a `gen-data` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub split: String,
    pub utterances: usize,
    pub mixtures: usize,
    pub max_partner_uses: usize,
    pub fallbacks: usize,
}

/// Renders every split, mixes it and writes features and manifests under `out_dir`.
pub fn write_corpus(
    out_dir: &Path,
    config: &SynthConfig,
    vocab: &Vocabulary,
    n_reuse: usize,
    snr_range: (f64, f64),
    seed: u64,
) -> Result<Vec<GenerationSummary>> {
    let world = SynthWorld::new(config, vocab, seed)?;
    let layout = CorpusLayout::new(out_dir);
    let feats = out_dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let counts = [config.train_utterances, config.dev_utterances, config.eval_utterances];
    let mut summaries = Vec::new();
    for (k, (split, count)) in SPLITS.iter().zip(counts).enumerate() {
        let utts = world.utterances(&format!("{split}_"), count, seed.wrapping_add(100 + k as u64))?;
        let mut single = Vec::with_capacity(utts.len());
        for u in &utts {
            let rel = format!("feats/{}.pff", u.id);
            write_features(&out_dir.join(&rel), &u.features)?;
            single.push(ManifestEntry {
                id: u.id.clone(),
                speakers: vec![u.speaker],
                feature_path: rel,
                labels: vec![u.text.clone()],
                snr_db: None,
                offset: None,
                components: Vec::new(),
            });
        }
        write_manifest(&layout.single(split), &single)?;
        let (mixes, report) = generate_corpus(&utts, n_reuse, snr_range, seed.wrapping_add(200 + k as u64))?;
        let mut mixed = Vec::with_capacity(mixes.len());
        for m in &mixes {
            let rel = format!("feats/{}.pff", m.id);
            write_features(&out_dir.join(&rel), &m.features)?;
            let order = if m.first_is_louder { [0, 1] } else { [1, 0] };
            mixed.push(ManifestEntry {
                id: m.id.clone(),
                speakers: order.iter().map(|&i| m.speakers[i]).collect(),
                feature_path: rel,
                labels: m.texts.to_vec(),
                snr_db: Some(m.snr_db),
                offset: Some(m.offset),
                components: m.component_ids.to_vec(),
            });
        }
        write_manifest(&layout.mixed(split), &mixed)?;
        summaries.push(GenerationSummary {
            split: split.to_string(),
            utterances: utts.len(),
            mixtures: mixes.len(),
            max_partner_uses: report.partner_uses.iter().copied().max().unwrap_or(0),
            fallbacks: report.fallbacks,
        });
    }
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table() -> EmissionTable {
        EmissionTable {
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
        }
    }

    fn utt(id: &str, speaker: usize, frames: usize, value: f64) -> Utterance {
        Utterance {
            id: id.into(),
            speaker,
            labels: vec![1],
            text: "a".into(),
            features: Tensor::full(&[frames, 2], value),
        }
    }

    #[test]
    fn noiseless_rendering_repeats_prototypes() {
        let f = render_features(&[1, 2], &table(), 0.0, 2, false, 0).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 2.0]);
        assert!(render_features(&[3], &table(), 0.0, 2, false, 0).is_err());
    }

    #[test]
    fn rendering_is_seeded() {
        let a = render_features(&[1, 2, 1], &table(), 0.5, 3, true, 9).unwrap();
        let b = render_features(&[1, 2, 1], &table(), 0.5, 3, true, 9).unwrap();
        assert_eq!(a, b);
        let c = render_features(&[1, 2, 1], &table(), 0.5, 3, true, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let labels = vec![1u32; 5000];
        let f = render_features(&labels, &table(), 0.3, 2, false, 4).unwrap();
        let resid: Vec<f64> = f.data().chunks(2).map(|r| r[0] - 1.0).collect();
        let var = resid.iter().map(|x| x * x).sum::<f64>() / resid.len() as f64;
        assert!((var / 0.09 - 1.0).abs() < 0.2, "{var}");
    }

    #[test]
    fn gain_for_equal_powers() {
        let a = utt("a", 0, 4, 1.0);
        let b = utt("b", 1, 4, 1.0);
        assert_abs_diff_eq!(mix_pair(&a, &b, 0.0, 0).unwrap().gain, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mix_pair(&a, &b, 6.0206, 0).unwrap().gain, 2.0, epsilon = 1e-4);
    }

    #[test]
    fn padding_places_shorter_component() {
        let a = utt("a", 0, 10, 1.0);
        let b = utt("b", 1, 6, 1.0);
        let m = mix_pair(&a, &b, 0.0, 2).unwrap();
        assert_eq!(m.features.rows(), 10);
        for r in 0..10 {
            let expect = if (2..8).contains(&r) { 2.0 } else { 1.0 };
            assert_eq!(m.features.at(r, 0), expect, "row {r}");
        }
        assert!(mix_pair(&a, &b, 0.0, 5).is_err());
        assert!(mix_pair(&a, &utt("c", 0, 3, 1.0), 0.0, 0).is_err());
        assert!(mix_pair(&a, &utt("z", 2, 3, 0.0), 0.0, 0).is_err());
    }

    #[test]
    fn achieved_snr_is_exact() {
        let a = utt("a", 0, 7, 0.7);
        let b = utt("b", 1, 5, -1.3);
        let m = mix_pair(&a, &b, 3.3, 1).unwrap();
        let achieved = 10.0 * (m.gain * m.gain * power(&a.features) / power(&b.features)).log10();
        assert_abs_diff_eq!(achieved, 3.3, epsilon = 1e-9);
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pff");
        let t = Tensor::new(vec![3, 2], vec![1.5, -2.0, 0.0, 1e-300, 7.0, 8.0]).unwrap();
        write_features(&p, &t).unwrap();
        assert_eq!(read_features(&p).unwrap(), t);
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }
}
