//! `klite`: ingest a knowledge graph, generate the synthetic benchmark,
//! train and evaluate the fusion models, and run the diagnostics.
//!
//! Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical abort.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use klite::featstore::{detect_concepts, EmbeddingTable};
use klite::kgstore::{build_index, ingest, retrieve, ConceptIndex, RetrieveOptions};
use klite::models::{load_checkpoint, param_count, save_checkpoint, ModelConfig, ModelParams, Variant, PRESET_NAMES};
use klite::pipeline::{
    analyze_bias, analyze_retrieval, evaluate, majority_baseline, prepare_samples, read_reports, train, write_reports,
    EpochReport, KnowledgeContext, ModelPredictor, Optimizer, PipelineError, PreparedSample, TrainConfig,
    OVERFIT_GAP_THRESHOLD,
};
use klite::synthvqa::{build_tables, generate_dataset, write_dataset, GenConfig, LoadedDataset, Split};

#[derive(Parser, Debug)]
#[command(name = "klite", version, about = "Knowledge-grounded VQA at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a ConceptNet assertions dump and write a concept index.
    Ingest(IngestArgs),
    /// Generate the synthetic VQA dataset, its embedding tables and KG.
    Gen(GenArgs),
    /// Zero-shot concept detection for one image vector.
    Detect(DetectArgs),
    /// Retrieve knowledge triples for image concepts and question keywords.
    Retrieve(RetrieveArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Bias, retrieval and overfitting diagnostics.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug, Serialize)]
struct IngestArgs {
    /// ConceptNet assertions file (tab-separated, one edge per line).
    #[arg(long)]
    edges: PathBuf,
    /// Keep only edges whose endpoints are in this language.
    #[arg(long, default_value = "en")]
    lang: String,
    /// Output prefix; writes <prefix>.triples.tsv and <prefix>.meta.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// Random seed (required).
    #[arg(long)]
    seed: u64,
    /// Number of scenes.
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    /// Questions generated per scene.
    #[arg(long, default_value_t = 3)]
    questions_per_scene: usize,
    /// Fraction of scenes held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DetectArgs {
    /// Token of the image vector to look up in --images.
    #[arg(long)]
    image_id: String,
    /// Label embedding table (word2vec text).
    #[arg(long)]
    labels: PathBuf,
    /// Image embedding table holding --image-id; defaults to images.w2v next to --labels.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Number of concepts to return.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args, Debug, Serialize)]
struct RetrieveArgs {
    /// Comma-separated image concepts (highest priority tier).
    #[arg(long, default_value = "")]
    concepts: String,
    /// Comma-separated question keywords.
    #[arg(long, default_value = "")]
    keywords: String,
    /// Index prefix written by `ingest` or `gen`.
    #[arg(long)]
    kg: PathBuf,
    /// Maximum number of triples returned.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Relation to exclude; may be repeated.
    #[arg(long = "block-relation")]
    block_relation: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Model variant: a (concatenation) or b (two-stage attention).
    #[arg(long, value_parser = parse_variant)]
    #[serde(serialize_with = "ser_variant")]
    variant: Variant,
    /// Model preset; defaults to model-<variant>-synth.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Index prefix; defaults to <data>/kg.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Training epochs.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Random seed for initialization and batch order (required).
    #[arg(long)]
    seed: u64,
    /// Samples per optimizer step.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Optimizer; adam uses beta1 0.9, beta2 0.999, eps 1e-8.
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Validate every N epochs (and after the last).
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Checkpoint path; reports go to <out>.reports.jsonl and <out>.summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Split to score: train or val.
    #[arg(long, default_value = "val", value_parser = parse_split)]
    #[serde(serialize_with = "ser_split")]
    split: Split,
    /// Dataset directory; defaults to the one recorded at training time.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index prefix; defaults to the one recorded at training time.
    #[arg(long)]
    kg: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Analysis {
    Bias,
    Retrieval,
    Gap,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    /// Which analysis to run.
    #[arg(long, value_enum)]
    what: Analysis,
    /// Checkpoint (bias, gap; also supplies --data/--kg defaults).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset directory (retrieval, bias).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index prefix (retrieval, bias); defaults to <data>/kg.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Epoch report file (gap); defaults to <ckpt>.reports.jsonl.
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Split to analyze: train or val.
    #[arg(long, default_value = "val", value_parser = parse_split)]
    #[serde(serialize_with = "ser_split")]
    split: Split,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

fn ser_variant<S: serde::Serializer>(v: &Variant, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match v {
        Variant::A => "a",
        Variant::B => "b",
    })
}

fn ser_split<S: serde::Serializer>(v: &Split, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(v.as_str())
}

/// Where `train` found its inputs; read back by `eval` and `analyze`.
#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    data: PathBuf,
    kg: PathBuf,
}

fn sidecar(ckpt: &Path, suffix: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

enum Failure {
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numerical = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<PipelineError>(), Some(PipelineError::NonFinite { .. })));
        if numerical {
            Failure::Numerical(e)
        } else {
            Failure::Data(e)
        }
    }
}

fn echo<T: Serialize>(command: &str, args: &T) {
    let cfg = serde_json::to_string(args).unwrap_or_default();
    eprintln!("klite {command}: {cfg}");
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn comma_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn run_ingest(a: &IngestArgs) -> anyhow::Result<()> {
    echo("ingest", a);
    let file = File::open(&a.edges).with_context(|| format!("opening {}", a.edges.display()))?;
    let got = ingest(BufReader::new(file), &a.lang).with_context(|| format!("reading {}", a.edges.display()))?;
    let index = build_index(got.triples);
    let meta = index.save(&a.out, &a.lang)?;
    print_json(&json!({ "stats": got.stats, "index": meta }))
}

fn run_gen(a: &GenArgs) -> anyhow::Result<()> {
    echo("gen", a);
    let cfg = GenConfig {
        seed: a.seed,
        n_scenes: a.scenes,
        questions_per_scene: a.questions_per_scene,
        val_fraction: a.val_fraction,
        ..GenConfig::default()
    };
    let tables = build_tables(cfg.seed);
    let data = generate_dataset(&cfg, &tables.labels)?;
    let files = write_dataset(&a.out, &data, &tables, &cfg)?;
    let train = data.split(Split::Train).count();
    print_json(&json!({
        "out": files.dir,
        "scenes": data.scenes.len(),
        "samples": data.samples.len(),
        "train_samples": train,
        "val_samples": data.samples.len() - train,
        "answers": data.answers.len(),
        "kg": files.kg_prefix(),
    }))
}

fn run_detect(a: &DetectArgs) -> anyhow::Result<()> {
    echo("detect", a);
    let labels = EmbeddingTable::load(&a.labels).with_context(|| format!("loading {}", a.labels.display()))?;
    let images_path = a
        .images
        .clone()
        .unwrap_or_else(|| a.labels.parent().unwrap_or(Path::new(".")).join("images.w2v"));
    let images = EmbeddingTable::load(&images_path).with_context(|| format!("loading {}", images_path.display()))?;
    let Some(v) = images.get(&a.image_id) else {
        bail!("{} has no vector for {:?}", images_path.display(), a.image_id);
    };
    let detection = detect_concepts(v, &labels, a.top_k)?;
    print_json(&json!({ "image_id": a.image_id, "concepts": detection.concepts }))
}

fn run_retrieve(a: &RetrieveArgs) -> anyhow::Result<()> {
    echo("retrieve", a);
    let (index, _) = ConceptIndex::load(&a.kg).with_context(|| format!("loading index {}", a.kg.display()))?;
    let opts = RetrieveOptions {
        k: a.k,
        blocked_relations: a.block_relation.iter().cloned().collect(),
    };
    let result = retrieve(&index, &comma_list(&a.concepts), &comma_list(&a.keywords), &opts);
    let mut out = io::stdout().lock();
    for e in &result.entries {
        let t = &e.triple;
        writeln!(out, "{}\t{}\t{}\t{}\t{}", t.head, t.relation, t.tail, e.score, e.provenance.as_str())?;
    }
    Ok(())
}

fn load_context(data: &Path, kg: &Path) -> anyhow::Result<(LoadedDataset, KnowledgeContext)> {
    let loaded = LoadedDataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let (index, _) = ConceptIndex::load(kg).with_context(|| format!("loading index {}", kg.display()))?;
    let ctx = KnowledgeContext::new(index, loaded.tables.clone());
    Ok((loaded, ctx))
}

fn run_train(a: &TrainArgs) -> anyhow::Result<()> {
    echo("train", a);
    let preset = a.preset.clone().unwrap_or_else(|| match a.variant {
        Variant::A => "model-a-synth".into(),
        Variant::B => "model-b-synth".into(),
    });
    let Some(model) = ModelConfig::preset(&preset) else {
        bail!("unknown preset {preset:?}; available: {}", PRESET_NAMES.join(", "));
    };
    if model.variant != a.variant {
        bail!("preset {preset} is variant {:?}, --variant asks for {:?}", model.variant, a.variant);
    }
    let kg = a.kg.clone().unwrap_or_else(|| a.data.join("kg"));
    let (loaded, ctx) = load_context(&a.data, &kg)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed: a.seed,
        eval_every: a.eval_every,
    };
    eprintln!(
        "klite train: resolved {}",
        json!({ "preset": preset, "model": model, "param_count": param_count(&model), "train": cfg, "kg": kg })
    );
    let started = Instant::now();
    let outcome = train(&model, &loaded.dataset, &ctx, &cfg, |r: &EpochReport| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  val_acc {:.4}  gap {:+.4}{}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_accuracy,
            r.overfit_gap,
            if r.overfit_flag { " OVERFIT" } else { "" },
            r.wall_time
        );
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&outcome.params, &model, &a.out)?;
    write_reports(sidecar(&a.out, ".reports.jsonl"), &outcome.reports)?;
    let prepared = prepare_samples(&loaded.dataset, &ctx)?;
    let (tr, va) = split_refs(&prepared);
    let summary = json!({
        "summary": outcome.summary,
        "majority_baseline": majority_baseline(&tr, &va),
        "overfit_gap_threshold": OVERFIT_GAP_THRESHOLD,
    });
    fs::write(sidecar(&a.out, ".summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let run = RunRecord {
        data: fs::canonicalize(&a.data)?,
        kg: fs::canonicalize(kg.parent().unwrap_or(Path::new(".")))?.join(kg.file_name().unwrap_or_default()),
    };
    fs::write(sidecar(&a.out, ".run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    eprintln!("klite train: done in {:.1}s", started.elapsed().as_secs_f64());
    print_json(&summary)
}

fn split_refs(prepared: &[PreparedSample]) -> (Vec<&PreparedSample>, Vec<&PreparedSample>) {
    (
        prepared.iter().filter(|s| s.split == Split::Train).collect(),
        prepared.iter().filter(|s| s.split == Split::Val).collect(),
    )
}

/// Dataset and index locations: explicit flags win over the run record.
fn resolve_inputs(ckpt: Option<&Path>, data: Option<&PathBuf>, kg: Option<&PathBuf>) -> anyhow::Result<(PathBuf, PathBuf)> {
    let record = match ckpt {
        Some(c) if data.is_none() || kg.is_none() => {
            let p = sidecar(c, ".run.json");
            match fs::read_to_string(&p) {
                Ok(text) => Some(serde_json::from_str::<RunRecord>(&text).with_context(|| format!("parsing {}", p.display()))?),
                Err(_) if data.is_some() => None,
                Err(e) => return Err(e).with_context(|| format!("reading {} (or pass --data)", p.display())),
            }
        }
        _ => None,
    };
    let data = match (data, &record) {
        (Some(d), _) => d.clone(),
        (None, Some(r)) => r.data.clone(),
        (None, None) => bail!("--data is required"),
    };
    let kg = match (kg, &record) {
        (Some(k), _) => k.clone(),
        (None, Some(r)) => r.kg.clone(),
        (None, None) => data.join("kg"),
    };
    Ok((data, kg))
}

fn load_model(ckpt: &Path) -> anyhow::Result<(ModelParams<f32>, ModelConfig)> {
    load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn run_eval(a: &EvalArgs) -> anyhow::Result<()> {
    echo("eval", a);
    let (params, model) = load_model(&a.ckpt)?;
    let (data, kg) = resolve_inputs(Some(&a.ckpt), a.data.as_ref(), a.kg.as_ref())?;
    let (loaded, ctx) = load_context(&data, &kg)?;
    if loaded.dataset.answers.len() != model.answer_vocab_size {
        return Err(PipelineError::VocabularyMismatch {
            dataset: loaded.dataset.answers.len(),
            model: model.answer_vocab_size,
        }
        .into());
    }
    let prepared = prepare_samples(&loaded.dataset, &ctx)?;
    let (tr, va) = split_refs(&prepared);
    let samples = if a.split == Split::Train { &tr } else { &va };
    let result = evaluate(&ModelPredictor::new(&params, &model), samples)?;
    print_json(&json!({
        "split": a.split.as_str(),
        "accuracy": result.accuracy,
        "correct": result.correct,
        "total": result.total,
        "per_type": result.per_type,
        "top_confusions": result.top_confusions,
        "majority_baseline": majority_baseline(&tr, samples),
    }))
}

fn run_analyze(a: &AnalyzeArgs) -> anyhow::Result<()> {
    echo("analyze", a);
    match a.what {
        Analysis::Gap => {
            let path = match (&a.reports, &a.ckpt) {
                (Some(p), _) => p.clone(),
                (None, Some(c)) => sidecar(c, ".reports.jsonl"),
                (None, None) => bail!("--what gap needs --reports or --ckpt"),
            };
            let reports = read_reports(&path).with_context(|| format!("reading {}", path.display()))?;
            let rows: Vec<_> = reports
                .iter()
                .map(|r| json!({ "epoch": r.epoch, "train_accuracy": r.train_accuracy, "val_accuracy": r.val_accuracy, "gap": r.overfit_gap, "flagged": r.overfit_flag }))
                .collect();
            let max_gap = reports.iter().map(|r| r.overfit_gap).fold(f64::NEG_INFINITY, f64::max);
            print_json(&json!({
                "threshold": OVERFIT_GAP_THRESHOLD,
                "epochs": rows,
                "max_gap": if reports.is_empty() { None } else { Some(max_gap) },
                "flagged_epochs": reports.iter().filter(|r| r.overfit_flag).map(|r| r.epoch).collect::<Vec<_>>(),
            }))
        }
        Analysis::Retrieval => {
            let (data, kg) = resolve_inputs(a.ckpt.as_deref(), a.data.as_ref(), a.kg.as_ref())?;
            let (loaded, ctx) = load_context(&data, &kg)?;
            let prepared = prepare_samples(&loaded.dataset, &ctx)?;
            let stats = analyze_retrieval(prepared.iter().filter(|s| s.split == a.split));
            print_json(&json!({ "split": a.split.as_str(), "retrieval": stats }))
        }
        Analysis::Bias => {
            let Some(ckpt) = &a.ckpt else {
                bail!("--what bias needs --ckpt");
            };
            let (params, model) = load_model(ckpt)?;
            let (data, kg) = resolve_inputs(Some(ckpt), a.data.as_ref(), a.kg.as_ref())?;
            let (loaded, ctx) = load_context(&data, &kg)?;
            let prepared = prepare_samples(&loaded.dataset, &ctx)?;
            let samples: Vec<&PreparedSample> = prepared.iter().filter(|s| s.split == a.split).collect();
            let result = evaluate(&ModelPredictor::new(&params, &model), &samples)?;
            let answers = &loaded.dataset.answers;
            let predicted = analyze_bias(result.predictions.iter().map(|p| answers.token(p.predicted)));
            let gold = analyze_bias(result.predictions.iter().map(|p| answers.token(p.gold)));
            print_json(&json!({ "split": a.split.as_str(), "predicted": predicted, "gold": gold }))
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let r = match &cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Gen(a) => run_gen(a),
        Command::Detect(a) => run_detect(a),
        Command::Retrieve(a) => run_retrieve(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
    };
    r.map_err(Failure::from)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical abort: {e:#}");
            ExitCode::from(3)
        }
    }
}
