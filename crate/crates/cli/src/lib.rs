//! Subcommands of the `lemma-htr` binary.
//!
//! Every command reads an optional TOML run config and writes its artifacts
//! to an explicit output path. Exit status is 0 on success, 1 on runtime
//! errors and 2 on validation errors (bad config, malformed or inconsistent
//! input).

pub mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lemma_htr::augment::Preset;
use lemma_htr::dataprep::{
    generate_synthetic_card, prepare, read_jsonl, synthetic_lemmas, validate_box_widths, write_jsonl, BBox,
    CardStyle, DatasetManifest, Detection, SkipReason, Split, MIN_VALIDATION_RECORDS,
};
use lemma_htr::eval::{compare_systems, Comparison, distribution_csv, join_by_id, read_text_records, EvalReport, TextRecord};
use lemma_htr::models::{Checkpoint, Recognizer};
use lemma_htr::tokenizer::Tokenizer;
use lemma_htr::train::{pretrain_decoder, train_recognizer, EvalSet, Regime, Sample};
use serde::{Deserialize, Serialize};

pub use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lemma-htr", version, about = "Lemma detection, recognition and evaluation for record cards")]
pub struct Cli {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed everywhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Augmentation ablation preset.
    #[arg(long, global = true, value_enum)]
    pub augment_preset: Option<PresetArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Full,
    NoMasking,
    NoRotation,
    NoColor,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::NoMasking => Preset::NoMasking,
            PresetArg::NoRotation => Preset::NoRotation,
            PresetArg::NoColor => Preset::NoColor,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn keeps(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegimeArg {
    Standard,
    Augmented,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic record cards with detector-style box files.
    Synth(SynthArgs),
    /// Select lemma boxes, cut crops and split into train/test.
    Prepare(PrepareArgs),
    /// Train a recognizer on a manifest.
    Train(TrainArgs),
    /// Pre-train the decoder as a language model on lemmas.
    Pretrain(PretrainArgs),
    /// Transcribe manifest images.
    Predict(PredictArgs),
    /// Score predictions against manifest labels.
    Evaluate(EvaluateArgs),
    /// Score our predictions and an external system's side by side.
    Compare(CompareArgs),
    /// Print a saved evaluation or comparison report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of distinct lemmas to cycle through.
    #[arg(long, default_value_t = 50)]
    pub lemmas: usize,
    /// Degradation strength in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub noise: f32,
    #[arg(long)]
    pub no_decoys: bool,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Line-delimited `{image_path, boxes, label}` records.
    #[arg(long)]
    pub detections: PathBuf,
    /// Directory relative image paths are resolved against.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a tokenizer instead of training one on the train labels.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Initialize the decoder from a `pretrain` checkpoint.
    #[arg(long)]
    pub pretrained_decoder: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Report test-split CER after every epoch.
    #[arg(long)]
    pub eval: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// One lemma per line.
    #[arg(long)]
    pub lemmas: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub ours: PathBuf,
    #[arg(long)]
    pub external: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Receives `comparison.json` and `distribution.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub input: PathBuf,
}

/// Ground truth written next to synthetic cards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_path: PathBuf,
    pub lemma_box: BBox,
    pub label: String,
}

/// Runs a parsed command line and maps the outcome to an exit status.
pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

/// 2 for validation problems, 1 for everything else.
pub fn exit_status(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || c.downcast_ref::<lemma_htr::Error>().is_some_and(lemma_htr::Error::is_validation)
    });
    if validation {
        2
    } else {
        1
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed, cli.augment_preset.map(Preset::from))?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, &a),
        Command::Prepare(a) => cmd_prepare(&cfg, &a),
        Command::Train(a) => cmd_train(cfg, &a),
        Command::Pretrain(a) => cmd_pretrain(cfg, &a),
        Command::Predict(a) => cmd_predict(&cfg, &a, cli.config.is_some()),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Compare(a) => cmd_compare(&cfg, &a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(p, contents).with_context(|| format!("writing {}", p.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<ExitCode> {
    if a.lemmas == 0 || a.count == 0 {
        bail!(ConfigError("--count and --lemmas must be positive".into()));
    }
    let images = a.out.join("images");
    create_dir(&images)?;
    let lemmas = synthetic_lemmas(a.lemmas, cfg.seed);
    let style = CardStyle {
        noise: a.noise,
        decoys: !a.no_decoys,
        ..CardStyle::default()
    };
    let mut detections = Vec::with_capacity(a.count);
    let mut truth = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let style_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let card = generate_synthetic_card(&lemmas[i % lemmas.len()], style_seed, &style)?;
        let name = PathBuf::from(format!("card_{i:05}.png"));
        let path = images.join(&name);
        card.image.save(&path).with_context(|| format!("writing {}", path.display()))?;
        detections.push(card.detection(&name, style_seed));
        truth.push(GroundTruth {
            image_path: name,
            lemma_box: card.lemma_box,
            label: card.label,
        });
    }
    write_jsonl(&a.out.join("detections.jsonl"), &detections)?;
    write_jsonl(&a.out.join("ground_truth.jsonl"), &truth)?;
    write_file(&a.out.join("lemmas.txt"), lemmas.join("\n") + "\n")?;
    println!("wrote {} cards over {} lemmas to {}", a.count, lemmas.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_prepare(cfg: &RunConfig, a: &PrepareArgs) -> Result<ExitCode> {
    let detections: Vec<Detection> = read_jsonl(&a.detections)?;
    create_dir(&a.out)?;
    let out = prepare(&detections, &a.images, &a.out, cfg.dataprep.train_fraction, cfg.seed)?;
    out.manifest.write(&a.out.join("manifest.jsonl"))?;
    write_jsonl(&a.out.join("skipped.jsonl"), &out.skipped)?;
    if out.selected.len() >= MIN_VALIDATION_RECORDS {
        let report = validate_box_widths(&out.selected, cfg.dataprep.flag_threshold)?;
        write_file(&a.out.join("box_validation.json"), to_json(&report))?;
        if report.flagged {
            println!(
                "warning: box widths correlate weakly with label length (r = {:.3} < {})",
                report.pearson_r, report.threshold
            );
        }
    }
    let count = |s| out.manifest.split(s).count();
    let reason = |r| out.skipped.iter().filter(|s| s.reason == r).count();
    println!(
        "prepared {} crops (train {}, test {}); skipped {} (no_box {}, invalid {})",
        out.manifest.entries.len(),
        count(Split::Train),
        count(Split::Test),
        out.skipped.len(),
        reason(SkipReason::NoBox),
        reason(SkipReason::Invalid),
    );
    for s in out.skipped.iter().filter(|s| s.reason == SkipReason::Invalid) {
        eprintln!("invalid record {}: {}", s.image_path.display(), s.detail);
    }
    Ok(if out.has_invalid() { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

/// Manifest entries of `split`, with images loaded relative to the
/// manifest's directory.
pub fn load_samples(manifest: &Path, split: SplitArg) -> Result<Vec<(String, Sample)>> {
    let m = DatasetManifest::read(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    m.entries
        .iter()
        .filter(|e| split.keeps(e.split))
        .map(|e| {
            let p = root.join(&e.path);
            let image = image::open(&p).with_context(|| format!("reading {}", p.display()))?.to_rgb8();
            Ok((
                e.path.to_string_lossy().into_owned(),
                Sample {
                    image,
                    label: e.label.clone(),
                },
            ))
        })
        .collect()
}

fn labels_of(manifest: &Path, split: SplitArg) -> Result<Vec<TextRecord>> {
    let m = DatasetManifest::read(manifest)?;
    Ok(m.entries
        .iter()
        .filter(|e| split.keeps(e.split))
        .map(|e| TextRecord {
            id: e.path.to_string_lossy().into_owned(),
            text: e.label.clone(),
        })
        .collect())
}

fn obtain_tokenizer(path: Option<&Path>, corpus: &[String], vocab_size: usize, out: &Path) -> Result<Tokenizer> {
    let tok = match path {
        Some(p) => Tokenizer::load(p)?,
        None => Tokenizer::train(corpus, vocab_size)?,
    };
    tok.save(&out.join("tokenizer.txt"))?;
    Ok(tok)
}

pub fn cmd_train(mut cfg: RunConfig, a: &TrainArgs) -> Result<ExitCode> {
    if let Some(r) = a.regime {
        cfg.train.regime = match r {
            RegimeArg::Standard => Regime::Standard,
            RegimeArg::Augmented => Regime::Augmented,
        };
        cfg = cfg.resolve(None, None)?;
    }
    if a.epochs.is_some() {
        cfg.train.epochs = a.epochs;
    }
    create_dir(&a.out)?;
    let train: Vec<Sample> = load_samples(&a.manifest, SplitArg::Train)?.into_iter().map(|(_, s)| s).collect();
    if train.is_empty() {
        bail!(lemma_htr::Error::Validation("manifest has no train entries".into()));
    }
    let labels: Vec<String> = train.iter().map(|s| s.label.clone()).collect();
    let tok = obtain_tokenizer(a.tokenizer.as_deref(), &labels, cfg.tokenizer.vocab_size, &a.out)?;
    let mut model = Recognizer::<f32>::new(cfg.model.clone(), cfg.seed)?;
    if let Some(p) = &a.pretrained_decoder {
        let ckpt = Checkpoint::<f32>::load(p)?;
        if ckpt.tokenizer_hash != tok.hash() {
            bail!(lemma_htr::Error::Incompatible("pretrained decoder used a different tokenizer".into()));
        }
        let pretrained = Recognizer::from_checkpoint(&ckpt)?;
        let n = model.copy_decoder_from(&pretrained.store)?;
        println!("initialized {n} decoder tensors from {}", p.display());
    }
    let test: Vec<Sample> = if a.eval {
        load_samples(&a.manifest, SplitArg::Test)?.into_iter().map(|(_, s)| s).collect()
    } else {
        Vec::new()
    };
    let eval = (!test.is_empty()).then(|| EvalSet {
        samples: &test,
        generation: cfg.generation.clone(),
    });
    let log = train_recognizer(&mut model, &train, &tok, &cfg.train, eval.as_ref(), |e| {
        let cer = e.eval_cer.map(|c| format!(" test CER {c:.4}")).unwrap_or_default();
        println!("epoch {} loss {:.4}{cer} ({:.1}s)", e.epoch, e.mean_loss, e.wall_seconds);
    })?;
    model.save(&a.out.join("model.ckpt"), &tok)?;
    write_file(&a.out.join("train_log.jsonl"), log.to_jsonl())?;
    write_file(&a.out.join("config.toml"), toml::to_string(&cfg).context("serializing config")?)?;
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_pretrain(mut cfg: RunConfig, a: &PretrainArgs) -> Result<ExitCode> {
    if a.epochs.is_some() {
        cfg.pretrain.epochs = a.epochs;
    }
    let text = std::fs::read_to_string(&a.lemmas).with_context(|| format!("reading {}", a.lemmas.display()))?;
    let lemmas: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    create_dir(&a.out)?;
    let tok = obtain_tokenizer(a.tokenizer.as_deref(), &lemmas, cfg.tokenizer.vocab_size, &a.out)?;
    let mut model = Recognizer::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let log = pretrain_decoder(&mut model, &lemmas, &tok, &cfg.pretrain, |e| {
        println!("epoch {} loss {:.4} ({:.1}s)", e.epoch, e.mean_loss, e.wall_seconds);
    })?;
    model.save(&a.out.join("decoder.ckpt"), &tok)?;
    write_file(&a.out.join("pretrain_log.jsonl"), log.to_jsonl())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Prediction<'a> {
    path: &'a str,
    prediction: &'a str,
}

pub fn cmd_predict(cfg: &RunConfig, a: &PredictArgs, check_config: bool) -> Result<ExitCode> {
    let tok = Tokenizer::load(&a.tokenizer)?;
    let ckpt = Checkpoint::<f32>::load(&a.model)?;
    let expected = if check_config { cfg.model.clone() } else { ckpt.config.clone() };
    ckpt.check_compatible(&expected, &tok.hash())?;
    let model = Recognizer::from_checkpoint(&ckpt)?;
    let samples = load_samples(&a.manifest, a.split)?;
    let images: Vec<_> = samples.iter().map(|(_, s)| &s.image).collect();
    let preds = lemma_htr::train::transcribe(&model, &images, &tok, &cfg.generation)?;
    let mut out = String::new();
    for ((id, _), p) in samples.iter().zip(&preds) {
        out.push_str(&serde_json::to_string(&Prediction { path: id, prediction: p })?);
        out.push('\n');
    }
    write_file(&a.out, out)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<ExitCode> {
    let preds = read_text_records(&a.predictions)?;
    let labels = labels_of(&a.manifest, a.split)?;
    let scored = join_by_id(&preds, &labels, false)?;
    let report = EvalReport::from_scored(&scored)?;
    write_file(&a.out, to_json(&report))?;
    print!("{}", summarize(&report, "ours"));
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_compare(cfg: &RunConfig, a: &CompareArgs) -> Result<ExitCode> {
    let ours = read_text_records(&a.ours)?;
    let external = read_text_records(&a.external)?;
    let labels = labels_of(&a.manifest, a.split)?;
    let cmp = if cfg.eval.normalize_external {
        compare_systems(&ours, &external, &labels)?
    } else {
        let a = join_by_id(&ours, &labels, false)?;
        let b = join_by_id(&external, &labels, false)?;
        let rows = a
            .iter()
            .map(|s| ("ours".to_string(), s.id.clone(), s.breakdown.cer()))
            .chain(b.iter().map(|s| ("external".to_string(), s.id.clone(), s.breakdown.cer())))
            .collect();
        Comparison {
            ours: EvalReport::from_scored(&a)?,
            external: EvalReport::from_scored(&b)?,
            rows,
        }
    };
    create_dir(&a.out)?;
    write_file(&a.out.join("comparison.json"), to_json(&cmp))?;
    write_file(&a.out.join("distribution.csv"), distribution_csv(&cmp.rows))?;
    print!("{}{}", summarize(&cmp.ours, "ours"), summarize(&cmp.external, "external"));
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_report(a: &ReportArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let invalid = |e: serde_json::Error| lemma_htr::Error::Validation(format!("{}: not a report ({e})", a.input.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(invalid)?;
    if value.get("ours").is_some() && value.get("external").is_some() {
        let ours: EvalReport = serde_json::from_value(value["ours"].clone()).map_err(invalid)?;
        let external: EvalReport = serde_json::from_value(value["external"].clone()).map_err(invalid)?;
        print!("{}{}", summarize(&ours, "ours"), summarize(&external, "external"));
    } else {
        let report: EvalReport = serde_json::from_value(value).map_err(invalid)?;
        print!("{}", summarize(&report, "ours"));
    }
    Ok(ExitCode::SUCCESS)
}

/// Plain-text digest of a report.
pub fn summarize(r: &EvalReport, system: &str) -> String {
    let mut s = format!(
        "{system}: {} samples, mean CER {:.4}, weighted CER {:.4}, exact match {:.2}%\n",
        r.count,
        r.mean_cer,
        r.weighted_cer,
        100.0 * r.exact_match
    );
    let d = &r.distribution;
    s.push_str(&format!(
        "  CER min {:.3} q1 {:.3} median {:.3} q3 {:.3} max {:.3} sd {:.3}\n",
        d.min, d.q1, d.median, d.q3, d.max, d.std_dev
    ));
    s
}
