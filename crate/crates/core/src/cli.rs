//! `permfree` subcommands: argument parsing, run directories and manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checks::run_registered;
use crate::config::RunConfig;
use crate::data::{load_examples, read_manifest, write_corpus, CorpusLayout, Example};
use crate::decode::{decode_mixture, BigramScorer, LabelScorer};
use crate::error::{Category, Error, Result};
use crate::objective::symmetric_kl_per_frame;
use crate::pca;
use crate::score::{corpus_score, format_table, score_multi, CorpusScore, ScoreReport};
use crate::trainer::{encoder_outputs, load_model, train, TrainData};

pub const MANIFEST_NAME: &str = "run-manifest.json";
pub const LOCK_NAME: &str = ".lock";
/// Power-iteration tolerance for hidden-vector PCA.
pub const PCA_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "permfree", version, about = "Permutation-free multi-speaker recognition toolkit")]
struct Cli {
    /// JSON config (comments allowed); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic corpus and mix it.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_reuse: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        snr_min: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        snr_max: Option<f64>,
        /// Defaults to `data.corpus_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the configured training stages.
    Train {
        #[arg(long)]
        run_dir: PathBuf,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Validate config and data only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Joint CTC/attention decoding of every mixture in a split.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "dev")]
        split: Split,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Score decode outputs against the split's references.
    Eval {
        /// `NAME=PATH` of a decode output; repeatable, one table row each.
        #[arg(long = "hyps", required = true)]
        hyps: Vec<String>,
        #[arg(long, value_enum, default_value = "dev")]
        split: Split,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Finite-difference checks of every registered gradient.
    Gradcheck {
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Write the recognition-encoder outputs of some mixtures as CSV plus a PCA projection.
    DumpHidden {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "dev")]
        split: Split,
        /// Mixture ids; the first `count` of the split when omitted.
        #[arg(long = "id")]
        ids: Vec<String>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
/// Failures print one `error category=<name>: <message>` line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error category={}: {first}", Category::Usage.as_str());
            return Category::Usage.exit_code();
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error category={}: {}", cat.as_str(), one_line(&e));
            cat.exit_code()
        }
    }
}

fn one_line(e: &Error) -> String {
    match e {
        Error::Config(p) => format!("configuration invalid: {}", p.join("; ")),
        other => other.to_string().replace('\n', " "),
    }
}

/// Identity of one run: enough to reproduce every artifact it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Hash over all input hashes in path order.
    pub inputs_hash: String,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash (`blob <len>\0<content>`) with SHA-256.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn hash_inputs(paths: &[PathBuf]) -> Result<(BTreeMap<String, String>, String)> {
    let mut map = BTreeMap::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        map.insert(p.display().to_string(), content_hash(&bytes));
    }
    let mut h = Sha256::new();
    for (p, d) in &map {
        h.update(p.as_bytes());
        h.update(b"\0");
        h.update(d.as_bytes());
        h.update(b"\n");
    }
    Ok((map, hex(&h.finalize())))
}

struct ManifestBuilder {
    subcommand: &'static str,
    argv: Vec<String>,
    seed: u64,
    config: RunConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: Vec<String>,
}

impl ManifestBuilder {
    fn new(subcommand: &'static str, argv: &[String], seed: u64, config: &RunConfig) -> Self {
        ManifestBuilder {
            subcommand,
            argv: argv.to_vec(),
            seed,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn build(self) -> Result<RunManifest> {
        let (inputs, inputs_hash) = hash_inputs(&self.inputs)?;
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand.into(),
            argv: self.argv,
            seed: self.seed,
            config: self.config,
            inputs,
            inputs_hash,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            notes: self.notes,
        })
    }

    fn write(self, dir: &Path) -> Result<()> {
        let m = self.build()?;
        let p = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "run directory {} is locked by another writer ({} exists)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let config_input: Vec<PathBuf> = cli.config.iter().cloned().collect();
    match cli.command {
        Command::GenData {
            seed,
            n_reuse,
            snr_min,
            snr_max,
            out_dir,
        } => {
            if let Some(v) = seed {
                cfg.data.seed = v;
            }
            if let Some(v) = n_reuse {
                cfg.data.n_reuse = v;
            }
            if let Some(v) = snr_min {
                cfg.data.snr_min = v;
            }
            if let Some(v) = snr_max {
                cfg.data.snr_max = v;
            }
            if let Some(d) = out_dir {
                cfg.data.corpus_dir = d;
            }
            let p = cfg.problems();
            if !p.is_empty() {
                return Err(Error::Config(p));
            }
            gen_data(&cfg, &argv, config_input)
        }
        Command::Train { run_dir, init, dry_run } => train_cmd(&cfg, &argv, config_input, &run_dir, init.as_deref(), dry_run),
        Command::Decode {
            checkpoint,
            split,
            run_dir,
        } => decode_cmd(&cfg, &argv, config_input, &checkpoint, split, &run_dir),
        Command::Eval { hyps, split, run_dir } => eval_cmd(&cfg, &argv, config_input, &hyps, split, &run_dir),
        Command::Gradcheck { run_dir } => gradcheck_cmd(&cfg, &argv, config_input, run_dir.as_deref()),
        Command::DumpHidden {
            checkpoint,
            split,
            ids,
            count,
            run_dir,
        } => dump_hidden_cmd(&cfg, &argv, config_input, &checkpoint, split, &ids, count, &run_dir),
    }
}

fn print_json_line<T: Serialize>(value: &T) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn gen_data(cfg: &RunConfig, argv: &[String], inputs: Vec<PathBuf>) -> Result<()> {
    let out = &cfg.data.corpus_dir;
    let _lock = RunLock::acquire(out)?;
    let summaries = write_corpus(
        out,
        &cfg.data.synth,
        &cfg.data.vocab,
        cfg.data.n_reuse,
        (cfg.data.snr_min, cfg.data.snr_max),
        cfg.data.seed,
    )?;
    let layout = CorpusLayout::new(out);
    let mut m = ManifestBuilder::new("gen-data", argv, cfg.data.seed, cfg);
    m.inputs = inputs;
    for s in &summaries {
        if s.fallbacks > 0 {
            log::warn!("{}: {} partner choices fell back past the reuse limit", s.split, s.fallbacks);
            m.notes.push(format!("{}: {} reuse fallbacks", s.split, s.fallbacks));
        }
        m.outputs.push(layout.single(&s.split));
        m.outputs.push(layout.mixed(&s.split));
        print_json_line(s)?;
    }
    m.write(out)
}

/// Manifest plus every feature file it references.
fn corpus_files(manifest: &Path) -> Result<Vec<PathBuf>> {
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut files = vec![manifest.to_path_buf()];
    files.extend(read_manifest(manifest)?.into_iter().map(|e| dir.join(e.feature_path)));
    Ok(files)
}

fn require_paths(cfg: &RunConfig, paths: &[&Path]) -> Result<()> {
    let p = cfg.missing_paths(paths);
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(p))
    }
}

fn train_cmd(
    cfg: &RunConfig,
    argv: &[String],
    mut inputs: Vec<PathBuf>,
    run_dir: &Path,
    init: Option<&Path>,
    dry_run: bool,
) -> Result<()> {
    let layout = CorpusLayout::new(&cfg.data.corpus_dir);
    let manifests = [
        layout.single("train"),
        layout.single("dev"),
        layout.mixed("train"),
        layout.mixed("dev"),
    ];
    let mut required: Vec<&Path> = manifests.iter().map(PathBuf::as_path).collect();
    if let Some(p) = init {
        required.push(p);
    }
    require_paths(cfg, &required)?;
    let vocab = &cfg.data.vocab;
    let data = TrainData {
        single_train: load_examples(&manifests[0], vocab)?,
        single_dev: load_examples(&manifests[1], vocab)?,
        mix_train: load_examples(&manifests[2], vocab)?,
        mix_dev: load_examples(&manifests[3], vocab)?,
    };
    if let Some(ex) = data
        .mix_train
        .iter()
        .chain(&data.single_train)
        .find(|e| e.features.cols() != cfg.model.encoder.input_dim)
    {
        return Err(Error::Data(format!(
            "{} has {} feature dims, the encoder expects {}",
            ex.id,
            ex.features.cols(),
            cfg.model.encoder.input_dim
        )));
    }
    let init_model = match init {
        Some(p) => {
            let (model, store) = load_model(p)?;
            Some((model.config, store))
        }
        None => None,
    };
    if dry_run {
        log::info!(
            "dry run: config valid; {} / {} single and {} / {} mixed train/dev examples",
            data.single_train.len(),
            data.single_dev.len(),
            data.mix_train.len(),
            data.mix_dev.len()
        );
        print_json_line(&serde_json::json!({
            "dry_run": true,
            "single_train": data.single_train.len(),
            "single_dev": data.single_dev.len(),
            "mix_train": data.mix_train.len(),
            "mix_dev": data.mix_dev.len(),
            "stages": cfg.train.stages,
        }))?;
        return Ok(());
    }
    let _lock = RunLock::acquire(run_dir)?;
    let outcome = train(&cfg.train, &cfg.model_config(), &cfg.decode, &data, init_model, Some(run_dir))?;
    let last = outcome.stage_results.last().map(|r| r.0).expect("at least one stage");
    let final_path = run_dir.join("final.ckpt");
    outcome
        .store
        .save(&final_path, &crate::trainer::checkpoint_header(&outcome.model_config, last, 0))?;

    let mut m = ManifestBuilder::new("train", argv, cfg.train.seed, cfg);
    for mf in &manifests {
        inputs.extend(corpus_files(mf)?);
    }
    inputs.extend(init.map(Path::to_path_buf));
    m.inputs = inputs;
    m.outputs.push(run_dir.join("metrics.jsonl"));
    m.outputs.extend(outcome.checkpoints.iter().cloned());
    m.outputs.push(final_path);
    m.write(run_dir)
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeLine {
    pub id: String,
    pub output_index: usize,
    pub hypothesis: String,
    pub att_score: f64,
    pub ctc_score: f64,
    pub combined: f64,
}

fn decode_cmd(
    cfg: &RunConfig,
    argv: &[String],
    mut inputs: Vec<PathBuf>,
    checkpoint: &Path,
    split: Split,
    run_dir: &Path,
) -> Result<()> {
    let layout = CorpusLayout::new(&cfg.data.corpus_dir);
    let manifest = layout.mixed(split.as_str());
    require_paths(cfg, &[checkpoint, &manifest])?;
    let (model, store) = load_model(checkpoint)?;
    let vocab = model.vocab().clone();
    let examples = load_examples(&manifest, &vocab)?;
    let mut notes = Vec::new();
    let scorer = if cfg.decode.scorer_weight > 0.0 {
        let train_manifest = layout.single("train");
        require_paths(cfg, &[&train_manifest])?;
        let seqs: Vec<Vec<u32>> = read_manifest(&train_manifest)?
            .iter()
            .flat_map(|e| e.labels.iter().map(|t| vocab.encode(t)))
            .collect::<Result<_>>()?;
        inputs.push(train_manifest);
        notes.push("bigram scorer trained on the train split transcripts".to_string());
        Some(BigramScorer::train(&seqs, vocab.len(), 1.0))
    } else {
        None
    };
    let _lock = RunLock::acquire(run_dir)?;
    let out_path = run_dir.join(format!("decode_{}.jsonl", split.as_str()));
    let mut w = BufWriter::new(fs::File::create(&out_path).map_err(|e| Error::io(&out_path, e))?);
    for ex in &examples {
        let results = decode_mixture(&model, &store, &ex.features, &cfg.decode, scorer.as_ref().map(|s| s as &dyn LabelScorer))?;
        for (u, r) in results.iter().enumerate() {
            if !r.finished {
                log::warn!("{} output {u}: no hypothesis reached eos", ex.id);
            }
            let line = DecodeLine {
                id: ex.id.clone(),
                output_index: u,
                hypothesis: vocab.decode(&r.labels)?,
                att_score: r.att_score,
                ctc_score: r.ctc_score,
                combined: r.combined,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(&out_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&out_path, e))?;
    log::info!("decoded {} mixtures into {}", examples.len(), out_path.display());
    let mut m = ManifestBuilder::new("decode", argv, cfg.train.seed, cfg);
    inputs.push(checkpoint.to_path_buf());
    inputs.extend(corpus_files(&manifest)?);
    m.inputs = inputs;
    m.outputs.push(out_path);
    m.notes = notes;
    m.write(run_dir)
}

pub fn read_decode_lines(path: &Path) -> Result<Vec<DecodeLine>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// Per-utterance reports of one system plus its corpus score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub name: String,
    pub corpus: CorpusScore,
    pub utterances: BTreeMap<String, ScoreReport>,
}

/// Scores decode lines against references (energy order), one report per mixture.
pub fn score_decodes(lines: &[DecodeLine], references: &[(String, Vec<String>)]) -> Result<Vec<(String, ScoreReport)>> {
    let mut by_id: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
    for l in lines {
        by_id.entry(&l.id).or_default().push((l.output_index, &l.hypothesis));
    }
    let mut out = Vec::with_capacity(references.len());
    for (id, refs) in references {
        let mut hyps = by_id
            .remove(id.as_str())
            .ok_or_else(|| Error::Data(format!("no hypotheses for {id}")))?;
        hyps.sort_by_key(|h| h.0);
        if hyps.iter().enumerate().any(|(i, h)| h.0 != i) || !(hyps.len() == 1 || hyps.len() == refs.len()) {
            return Err(Error::Data(format!(
                "{id}: expected output indices 0..{} or a single output, got {:?}",
                refs.len(),
                hyps.iter().map(|h| h.0).collect::<Vec<_>>()
            )));
        }
        let h: Vec<Vec<char>> = hyps.iter().map(|(_, s)| s.chars().collect()).collect();
        let r: Vec<Vec<char>> = refs.iter().map(|s| s.chars().collect()).collect();
        out.push((id.clone(), score_multi(&h, &r)));
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::Data(format!("hypotheses for {extra}, which is not in the split")));
    }
    Ok(out)
}

fn eval_cmd(cfg: &RunConfig, argv: &[String], mut inputs: Vec<PathBuf>, hyps: &[String], split: Split, run_dir: &Path) -> Result<()> {
    let layout = CorpusLayout::new(&cfg.data.corpus_dir);
    let manifest = layout.mixed(split.as_str());
    let mut systems = Vec::new();
    for spec in hyps {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--hyps expects NAME=PATH, got {spec}")))?;
        systems.push((name.to_string(), PathBuf::from(path)));
    }
    let mut required: Vec<&Path> = vec![&manifest];
    required.extend(systems.iter().map(|s| s.1.as_path()));
    require_paths(cfg, &required)?;
    let references: Vec<(String, Vec<String>)> = read_manifest(&manifest)?.into_iter().map(|e| (e.id, e.labels)).collect();
    let mut scores = Vec::new();
    for (name, path) in &systems {
        let reports = score_decodes(&read_decode_lines(path)?, &references)?;
        let list: Vec<ScoreReport> = reports.iter().map(|r| r.1.clone()).collect();
        scores.push(SystemScore {
            name: name.clone(),
            corpus: corpus_score(&list),
            utterances: reports.into_iter().collect(),
        });
        inputs.push(path.clone());
    }
    let table = format_table(&scores.iter().map(|s| (s.name.clone(), s.corpus.clone())).collect::<Vec<_>>());
    let _lock = RunLock::acquire(run_dir)?;
    let score_path = run_dir.join(format!("score_{}.json", split.as_str()));
    let table_path = run_dir.join(format!("table_{}.txt", split.as_str()));
    let mut text = serde_json::to_string_pretty(&scores)?;
    text.push('\n');
    fs::write(&score_path, text).map_err(|e| Error::io(&score_path, e))?;
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");
    let mut m = ManifestBuilder::new("eval", argv, cfg.train.seed, cfg);
    inputs.push(manifest);
    m.inputs = inputs;
    m.outputs = vec![score_path, table_path];
    m.write(run_dir)
}

fn gradcheck_cmd(cfg: &RunConfig, argv: &[String], inputs: Vec<PathBuf>, run_dir: Option<&Path>) -> Result<()> {
    let outcomes = run_registered();
    for o in &outcomes {
        print_json_line(o)?;
    }
    if let Some(d) = run_dir {
        let _lock = RunLock::acquire(d)?;
        let p = d.join("gradcheck.jsonl");
        let mut text = String::new();
        for o in &outcomes {
            text.push_str(&serde_json::to_string(o)?);
            text.push('\n');
        }
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        let mut m = ManifestBuilder::new("gradcheck", argv, 0, cfg);
        m.inputs = inputs;
        m.outputs.push(p);
        m.write(d)?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failed.join(", ")))
    }
}

/// `G` as CSV: a header of column indices, then one row per frame.
pub fn write_matrix_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in rows {
        writeln!(w, "{}", r.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Files written for one mixture and the skip note, if any.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HiddenDump {
    pub id: String,
    pub frames: usize,
    pub files: Vec<PathBuf>,
    pub mean_symmetric_kl: Option<f64>,
    pub note: Option<String>,
}

/// Writes `{id}_g{u}.csv` for every output and `{id}_pca.csv` with all
/// outputs' frames projected on the top two components of their pooled rows.
pub fn dump_hidden(reprs: &[crate::autodiff::Tensor], id: &str, dir: &Path) -> Result<HiddenDump> {
    let mut files = Vec::new();
    let frames = reprs[0].rows();
    for (u, g) in reprs.iter().enumerate() {
        let p = dir.join(format!("{id}_g{u}.csv"));
        let header: Vec<String> = (0..g.cols()).map(|c| c.to_string()).collect();
        write_matrix_csv(&p, &header, (0..g.rows()).map(|r| g.row(r).iter().map(|v| format!("{v:e}")).collect()))?;
        files.push(p);
    }
    let mean_symmetric_kl = if reprs.len() == 2 {
        let kl = symmetric_kl_per_frame(&reprs[0], &reprs[1])?;
        Some(kl.iter().sum::<f64>() / kl.len() as f64)
    } else {
        None
    };
    if frames < 2 {
        return Ok(HiddenDump {
            id: id.to_string(),
            frames,
            files,
            mean_symmetric_kl,
            note: Some(format!("{id}: {frames} frame(s), PCA skipped")),
        });
    }
    let cols = reprs[0].cols();
    let mut pooled = Vec::with_capacity(reprs.len() * frames * cols);
    for g in reprs {
        pooled.extend_from_slice(g.data());
    }
    let pooled = crate::autodiff::Tensor::new(vec![reprs.len() * frames, cols], pooled)?;
    let k = 2.min(cols);
    let fit = pca::fit(&pooled, k, PCA_TOL)?;
    let proj = fit.project(&pooled)?;
    let p = dir.join(format!("{id}_pca.csv"));
    let mut header = vec!["output".to_string(), "frame".to_string()];
    header.extend((0..k).map(|c| format!("pc{c}")));
    write_matrix_csv(
        &p,
        &header,
        (0..proj.rows()).map(|r| {
            let mut row = vec![(r / frames).to_string(), (r % frames).to_string()];
            row.extend(proj.row(r).iter().map(|v| format!("{v:e}")));
            row
        }),
    )?;
    files.push(p);
    Ok(HiddenDump {
        id: id.to_string(),
        frames,
        files,
        mean_symmetric_kl,
        note: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn dump_hidden_cmd(
    cfg: &RunConfig,
    argv: &[String],
    mut inputs: Vec<PathBuf>,
    checkpoint: &Path,
    split: Split,
    ids: &[String],
    count: usize,
    run_dir: &Path,
) -> Result<()> {
    let layout = CorpusLayout::new(&cfg.data.corpus_dir);
    let manifest = layout.mixed(split.as_str());
    require_paths(cfg, &[checkpoint, &manifest])?;
    let (model, store) = load_model(checkpoint)?;
    let examples = load_examples(&manifest, model.vocab())?;
    let chosen: Vec<&Example> = if ids.is_empty() {
        examples.iter().take(count).collect()
    } else {
        ids.iter()
            .map(|id| {
                examples
                    .iter()
                    .find(|e| &e.id == id)
                    .ok_or_else(|| Error::Data(format!("{id} is not in the {} split", split.as_str())))
            })
            .collect::<Result<_>>()?
    };
    let _lock = RunLock::acquire(run_dir)?;
    let mut m = ManifestBuilder::new("dump-hidden", argv, cfg.train.seed, cfg);
    for ex in chosen {
        let reprs = encoder_outputs(&model, &store, &ex.features)?;
        let dump = dump_hidden(&reprs, &ex.id, run_dir)?;
        if let Some(n) = &dump.note {
            log::warn!("{n}");
            m.notes.push(n.clone());
        }
        m.outputs.extend(dump.files.iter().cloned());
        print_json_line(&dump)?;
    }
    inputs.push(checkpoint.to_path_buf());
    inputs.extend(corpus_files(&manifest)?);
    m.inputs = inputs;
    m.write(run_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_hash_is_git_style() {
        // sha256 of "blob 0\0"
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Data(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn duplicated_single_output_is_scored_against_both() {
        let lines = vec![DecodeLine {
            id: "m".into(),
            output_index: 0,
            hypothesis: "ab".into(),
            att_score: 0.0,
            ctc_score: 0.0,
            combined: 0.0,
        }];
        let r = score_decodes(&lines, &[("m".into(), vec!["ab".into(), "cd".into()])]).unwrap();
        assert_eq!(r[0].1.per_reference_cer, vec![0.0, 1.0]);
        assert!(score_decodes(&lines, &[("x".into(), vec!["ab".into()])]).is_err());
    }

    #[test]
    fn short_sequences_skip_pca() {
        let dir = tempfile::tempdir().unwrap();
        let g = crate::autodiff::Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let d = dump_hidden(&[g.clone(), g], "x", dir.path()).unwrap();
        assert!(d.note.is_some());
        assert_eq!(d.files.len(), 2);
        let text = fs::read_to_string(&d.files[0]).unwrap();
        assert_eq!(text.lines().next().unwrap(), "0,1,2");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["permfree", "no-such-command"]), 1);
        assert_eq!(run(["permfree", "decode"]), 1);
    }
}
