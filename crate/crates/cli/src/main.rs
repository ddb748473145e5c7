use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use gully_core::backend::{Backend, Client, HttpBackend, MockBackend, MockScript, ResponseCache};
use gully_core::collage::{self, Grid};
use gully_core::config::{self, ConfigError, ConfigLayer, Endpoint, RunConfig};
use gully_core::dataset::{self, synthetic, Dataset, Label, Location};
use gully_core::eval::{self, ConfusionMatrix, Format, MetricsReport, RunMeta};
use gully_core::mlp::{self, Hyper, MlpModel};
use gully_core::pipeline::{
    self, AnswerEntry, AnswersFile, Engine, ModelRef, PipelineKind, Prediction, PredictionsFile,
    SCHEMA_VERSION,
};
use gully_core::qopt::{self, AnswerTable, LlmAggregator, MajorityVote, Objective, Strategy, SubsetAggregator};
use gully_core::questions::{self, QuestionSet};

#[derive(Parser)]
#[command(name = "gully", version, about = "Gully detection with vision-language models")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset tree and print per-split counts.
    Ingest(IngestArgs),
    /// List the question bank or a preset.
    Questions(QuestionsArgs),
    /// Write one location's collage as PNG and print its digest.
    Collage(CollageArgs),
    /// Run a pipeline over a split and write predictions.
    Run(RunArgs),
    /// Train the transfer-learning MLP on an answers file.
    TrainMlp(TrainArgs),
    /// Score an answers file with a trained MLP.
    PredictMlp(PredictArgs),
    /// Search for a question subset on an answers file.
    Optimize(OptimizeArgs),
    /// Confusion matrix and metrics for a predictions file.
    Evaluate(EvaluateArgs),
    /// Per-question Yes counts by class.
    Histogram(HistogramArgs),
    /// One metrics row per predictions file.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset root (contains dev/ and test/).
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV; defaults to <root>/manifest.csv.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl DataArgs {
    fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.root.join("manifest.csv"))
    }
}

/// Flags that feed the config resolver. All optional; unset ones fall through.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pipeline: Option<String>,
    /// dev or test.
    #[arg(long)]
    split: Option<String>,
    /// Preset name (q3..q18, optuna4, full19) or a comma list such as 3,6,7,12.
    #[arg(long)]
    questions: Option<String>,
    /// Vision model, `name` or `name@url`.
    #[arg(long)]
    vlm: Option<String>,
    /// Text model, `name` or `name@url`.
    #[arg(long)]
    llm: Option<String>,
    /// Endpoint for both models (`mock://seeded` for the built-in mock).
    #[arg(long)]
    backend_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Upper bound on parallel upstream requests.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// positive, negative or error.
    #[arg(long)]
    unparseable: Option<String>,
    /// Collage grid, e.g. 2x3.
    #[arg(long)]
    grid: Option<String>,
    /// Separator width in pixels between collage cells.
    #[arg(long)]
    separator: Option<u32>,
    /// Images per location.
    #[arg(short = 'm', long)]
    images_per_location: Option<usize>,
}

impl ConfigFlags {
    fn layer(&self, output: Option<&Path>) -> ConfigLayer {
        ConfigLayer {
            pipeline: self.pipeline.clone(),
            split: self.split.clone(),
            questions: self.questions.clone(),
            vlm_model: self.vlm.clone(),
            vlm_url: self.backend_url.clone(),
            llm_model: self.llm.clone(),
            llm_url: self.backend_url.clone(),
            temperature: self.temperature,
            seed: self.seed,
            max_tokens: self.max_tokens,
            cache_dir: self.cache_dir.clone(),
            jobs: self.jobs,
            retries: self.retries,
            timeout_s: self.timeout,
            unparseable: self.unparseable.clone(),
            grid: self.grid.clone(),
            separator: self.separator,
            images_per_location: self.images_per_location,
            output: output.map(Path::to_path_buf),
        }
    }

    fn resolve(&self, output: Option<&Path>) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => Some((p.as_path(), ConfigLayer::from_file(p)?)),
            None => None,
        };
        let cfg = config::resolve(
            &self.layer(output),
            &ConfigLayer::from_process_env(),
            file.as_ref().map(|(p, l)| (*p, l)),
        )?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(short = 'm', long, default_value_t = dataset::DEFAULT_IMAGES_PER_LOCATION)]
    images_per_location: usize,
    /// Write a seeded synthetic dataset under --root first.
    #[arg(long)]
    synthesize: bool,
    /// Seed for --synthesize.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value = "markdown")]
    format: String,
}

#[derive(Args)]
struct QuestionsArgs {
    /// Show only this preset (or comma list).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct CollageArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    location: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "2x3")]
    grid: Grid,
    #[arg(long, default_value_t = 0)]
    separator: u32,
    #[arg(short = 'm', long, default_value_t = dataset::DEFAULT_IMAGES_PER_LOCATION)]
    images_per_location: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Predictions JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-question answers (pipelines B and TL).
    #[arg(long)]
    answers_out: Option<PathBuf>,
    /// Trained MLP, required for pipeline TL.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Answers JSON (usually the dev split).
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Hyper::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = Hyper::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = Hyper::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = Hyper::default().seed)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// exhaustive, greedy or random.
    #[arg(long, default_value = "greedy")]
    strategy: String,
    #[arg(long, default_value = "macro_f1")]
    objective: Objective,
    /// Largest subset size (exhaustive and greedy).
    #[arg(long)]
    max_k: Option<usize>,
    /// Trials for random search; `--seed` seeds the draw.
    #[arg(long, default_value_t = 128)]
    budget: usize,
    /// Restrict the search to these questions (comma list).
    #[arg(long)]
    candidates: Option<String>,
    /// Re-score the winning subset once with the LLM aggregator.
    #[arg(long)]
    rescore_llm: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Manifest CSV with the labels.
    #[arg(long)]
    dataset: PathBuf,
    /// Output file; stdout when omitted. Format follows the extension.
    #[arg(long)]
    out: Option<PathBuf>,
    /// markdown, csv or json; overrides the extension.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// markdown, csv, json or svg; overrides the extension.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Predictions files, one table row each.
    #[arg(long, num_args = 1.., required = true)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// markdown, csv or json.
    #[arg(long)]
    format: Option<String>,
}

/// Marks errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage_like = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<ConfigError>(), Some(ConfigError::InvalidValue { .. }));
            ExitCode::from(if usage_like { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Questions(a) => cmd_questions(a),
        Command::Collage(a) => cmd_collage(a),
        Command::Run(a) => cmd_run(a),
        Command::TrainMlp(a) => cmd_train(a),
        Command::PredictMlp(a) => cmd_predict(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Histogram(a) => cmd_histogram(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn parse_format(raw: Option<&str>, out: Option<&Path>) -> Result<Format> {
    match raw {
        Some(f) => f.parse().map_err(usage),
        None => Ok(out.map(Format::from_path).unwrap_or(Format::Markdown)),
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    if a.synthesize {
        let layout = synthetic::SyntheticLayout {
            images_per_location: a.images_per_location,
            seed: a.seed,
            ..Default::default()
        };
        let manifest = synthetic::write(&a.data.root, &layout)?;
        info!("wrote synthetic dataset, manifest {}", manifest.display());
    }
    let ds = dataset::ingest(&a.data.root, &a.data.manifest(), a.images_per_location)?;
    let counts = dataset::split_counts(&ds);
    match a.format.parse::<Format>().map_err(usage)? {
        Format::Json => println!("{}", serde_json::to_string_pretty(&counts)?),
        _ => print!("{counts}"),
    }
    Ok(())
}

fn cmd_questions(a: QuestionsArgs) -> Result<()> {
    match a.preset {
        Some(p) => {
            let qs = QuestionSet::resolve(&p).map_err(|e| usage(e.to_string()))?;
            println!("# {qs}");
            for &i in &qs.indices {
                println!("{i:>2}. {}", questions::text(i));
            }
        }
        None => {
            for q in questions::bank() {
                let rank = q.expert_rank.map_or("-".to_string(), |r| r.to_string());
                println!("{:>2} [rank {rank:>2}] {}", q.index, q.text);
            }
        }
    }
    Ok(())
}

fn load_dataset(data: &DataArgs, m: usize) -> Result<Dataset> {
    dataset::ingest(&data.root, &data.manifest(), m)
        .with_context(|| format!("loading dataset at {}", data.root.display()))
}

fn cmd_collage(a: CollageArgs) -> Result<()> {
    let ds = load_dataset(&a.data, a.images_per_location)?;
    let loc = ds
        .get(&a.location)
        .ok_or_else(|| usage(format!("no location `{}` in the manifest", a.location)))?;
    let c = collage::build_for_location(loc, a.grid, a.separator)?;
    ensure_parent(&a.out)?;
    c.pixels.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", c.digest());
    Ok(())
}

fn backend_for(ep: &Endpoint, cfg: &RunConfig, script: &MockScript) -> Arc<dyn Backend> {
    if ep.is_mock() {
        Arc::new(MockBackend::new(script.clone()))
    } else {
        let bearer = std::env::var("GULLY_API_KEY").ok().filter(|k| !k.is_empty());
        Arc::new(HttpBackend::new(
            ep.url.clone(),
            Duration::from_secs_f64(cfg.timeout_s),
            bearer,
        ))
    }
}

fn open_cache(cfg: &RunConfig) -> Result<Option<ResponseCache>> {
    cfg.cache_dir
        .as_ref()
        .map(|d| ResponseCache::open(d).with_context(|| format!("opening cache {}", d.display())))
        .transpose()
}

/// Engine wired to the configured endpoints. The mock learns the true class
/// of every collage in `locations` so its Yes rates follow the labels.
fn build_engine(cfg: &RunConfig, locations: &[&Location]) -> Result<Engine> {
    let mut script = MockScript::default();
    if cfg.vlm.is_mock() || cfg.llm.is_mock() {
        for loc in locations {
            if let Some(label) = loc.label {
                let c = collage::build_for_location(loc, cfg.grid, cfg.separator)?;
                script.register_image(&c.to_base64_png()?, label);
            }
        }
    }

    let client = |ep: &Endpoint| -> Result<Arc<Client>> {
        Ok(Arc::new(Client::new(backend_for(ep, cfg, &script), open_cache(cfg)?, cfg.policy())))
    };
    let mut engine = Engine::new(ModelRef::new(cfg.vlm.model.clone(), client(&cfg.vlm)?))
        .with_llm(ModelRef::new(cfg.llm.model.clone(), client(&cfg.llm)?));
    engine.params = cfg.params;
    engine.grid = cfg.grid;
    engine.separator = cfg.separator;
    engine.unparseable = cfg.unparseable;
    Ok(engine)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = a.cfg.resolve(Some(&a.out))?;
    let ds = load_dataset(&a.data, cfg.images_per_location)?;
    let locations: Vec<&Location> = ds.split(cfg.split).collect();
    if locations.is_empty() {
        bail!("split {} has no locations", cfg.split);
    }
    let engine = build_engine(&cfg, &locations)?;
    info!("running pipeline {} on {} locations", cfg.pipeline, locations.len());

    let (predictions, answers) = match cfg.pipeline {
        PipelineKind::TL => {
            let path = a.model.as_ref().ok_or_else(|| usage("pipeline TL needs --model"))?;
            let model = MlpModel::load(path)?;
            if model.inputs() != cfg.questions.len() {
                return Err(usage(format!(
                    "model expects {} answers but question set {} has {}",
                    model.inputs(),
                    cfg.questions,
                    cfg.questions.len()
                )));
            }
            let mut preds = Vec::with_capacity(locations.len());
            let mut avs = Vec::with_capacity(locations.len());
            for loc in &locations {
                let av = engine.run_vqa(&engine.prepare(loc)?, &cfg.questions)?;
                preds.push(mlp_prediction(&model, &av, &cfg.vlm.model, a.threshold)?);
                avs.push(av);
            }
            (preds, avs)
        }
        kind => {
            let out = engine.run_batch(&locations, kind, Some(&cfg.questions), cfg.jobs)?;
            (out.predictions, out.answers)
        }
    };

    let flagged = predictions.iter().filter(|p| p.unparseable).count();
    if flagged > 0 {
        warn!("{flagged} final verdicts were unparseable; labeled per policy `{}`", cfg.unparseable);
    }
    let file = PredictionsFile {
        schema_version: SCHEMA_VERSION,
        config: cfg.to_json(),
        predictions,
    };
    pipeline::write_json(&a.out, &file)?;
    println!("wrote {} predictions to {}", file.predictions.len(), a.out.display());

    if let Some(path) = &a.answers_out {
        if answers.is_empty() {
            warn!("pipeline {} produces no per-question answers", cfg.pipeline);
        } else {
            let labels = ds.labels();
            let entries = answers
                .into_iter()
                .map(|av| AnswerEntry {
                    label: labels.get(&av.location_id).copied().flatten(),
                    answers: av,
                })
                .collect();
            let af = AnswersFile {
                schema_version: SCHEMA_VERSION,
                config: cfg.to_json(),
                question_indices: cfg.questions.indices.clone(),
                entries,
            };
            pipeline::write_json(path, &af)?;
            println!("wrote {} answer vectors to {}", af.entries.len(), path.display());
        }
    }
    Ok(())
}

fn mlp_prediction(
    model: &MlpModel,
    av: &pipeline::AnswerVector,
    vlm_id: &str,
    threshold: f64,
) -> Result<Prediction> {
    let (label, score) = mlp::predict(model, &mlp::encode(av), threshold)?;
    Ok(Prediction {
        location_id: av.location_id.clone(),
        pipeline: PipelineKind::TL,
        label,
        raw_text: format!("score={score:.6}"),
        vlm_id: vlm_id.to_string(),
        llm_id: None,
        unparseable: false,
        score: Some(score),
    })
}

fn labeled_features(af: &AnswersFile) -> (Vec<Vec<f64>>, Vec<u8>) {
    af.entries
        .iter()
        .filter_map(|e| {
            let label = e.label?;
            Some((mlp::encode(&e.answers), u8::from(label.is_positive())))
        })
        .unzip()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let af = pipeline::read_answers(&a.answers)?;
    let (features, labels) = labeled_features(&af);
    if features.is_empty() {
        bail!("{} has no labeled entries", a.answers.display());
    }
    let hp = Hyper {
        hidden: a.hidden,
        lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
    };
    let model = mlp::train(&features, &labels, &hp)?;
    model.save(&a.out)?;
    let loss = model.train_meta.as_ref().map_or(f64::NAN, |m| m.final_loss);
    println!(
        "trained {}-{}-1 on {} examples: final loss {loss:.6}, training accuracy {:.3}",
        model.inputs(),
        model.hidden(),
        features.len(),
        mlp::accuracy(&model, &features, &labels)
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = MlpModel::load(&a.model)?;
    let af = pipeline::read_answers(&a.answers)?;
    if model.inputs() != af.question_indices.len() {
        return Err(usage(format!(
            "model expects {} answers, answers file has {}",
            model.inputs(),
            af.question_indices.len()
        )));
    }
    let vlm_id = af
        .config
        .pointer("/vlm/model")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_string();
    let predictions = af
        .entries
        .iter()
        .map(|e| mlp_prediction(&model, &e.answers, &vlm_id, a.threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut config = af.config.clone();
    if let Some(obj) = config.as_object_mut() {
        obj.insert("pipeline".into(), json!("TL"));
        obj.insert("mlp_model".into(), json!(a.model));
        obj.insert("threshold".into(), json!(a.threshold));
    }
    let file = PredictionsFile {
        schema_version: SCHEMA_VERSION,
        config,
        predictions,
    };
    pipeline::write_json(&a.out, &file)?;
    println!("wrote {} predictions to {}", file.predictions.len(), a.out.display());
    Ok(())
}

fn cmd_optimize(a: OptimizeArgs) -> Result<()> {
    let strategy: Strategy = a.strategy.parse().map_err(usage)?;
    let af = pipeline::read_answers(&a.answers)?;
    let table = AnswerTable::from_entries(&af.entries)?;
    let candidates = match &a.candidates {
        Some(list) => QuestionSet::parse_list(list).map_err(|e| usage(e.to_string()))?.indices,
        None => table.common_questions(),
    };
    let max_k = a.max_k.unwrap_or(candidates.len());
    let agg = MajorityVote;
    let seed = a.cfg.seed.unwrap_or(gully_core::backend::ChatParams::default().seed);

    let (best, trials) = match strategy {
        Strategy::Exhaustive => {
            let t = qopt::exhaustive(&table, &candidates, max_k, a.objective, &agg)?;
            (t.clone(), vec![t])
        }
        Strategy::GreedyForward => {
            let steps = qopt::greedy_forward(&table, &candidates, max_k, a.objective, &agg)?;
            let best = qopt::best_of(&steps).expect("greedy returns at least one step").clone();
            (best, steps)
        }
        Strategy::RandomSearch => qopt::random_search(&table, &candidates, a.budget, seed, a.objective, &agg)?,
    };

    let rescored = if a.rescore_llm {
        let cfg = a.cfg.resolve(Some(&a.out))?;
        let engine = build_engine(&cfg, &[])?;
        let llm = LlmAggregator { engine: &engine };
        let value = qopt::score_subset(&best.subset.indices, &table, &llm, a.objective)?;
        Some(json!({ "aggregator": llm.name(), "objective_value": value, "config": cfg.to_json() }))
    } else {
        None
    };

    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "config": {
            "answers": a.answers,
            "strategy": a.strategy,
            "objective": a.objective,
            "max_k": max_k,
            "budget": a.budget,
            "seed": seed,
            "candidates": candidates,
            "aggregator": agg.name(),
        },
        "best": best,
        "llm_rescore": rescored,
        "trials": trials,
    });
    pipeline::write_json(&a.out, &doc)?;
    println!(
        "best subset {:?}: {} = {:.3} ({} trials)",
        best.subset.indices,
        best.objective_name,
        best.objective_value,
        trials.len()
    );
    Ok(())
}

fn manifest_labels(path: &Path) -> Result<BTreeMap<String, Option<Label>>> {
    Ok(dataset::read_manifest(path)?
        .into_iter()
        .map(|r| (r.location_id, r.label))
        .collect())
}

fn report_for(pf: &PredictionsFile, labels: &BTreeMap<String, Option<Label>>) -> Result<MetricsReport> {
    let tally = eval::confusion(&pf.predictions, labels)?;
    let mut r = eval::metrics(&tally.cm);
    r.excluded_unlabeled = tally.excluded_unlabeled;
    let s = |ptr: &str| pf.config.pointer(ptr).and_then(|v| v.as_str()).map(str::to_string);
    r.meta = RunMeta {
        pipeline: s("/pipeline"),
        vlm: s("/vlm/model"),
        llm: s("/llm/model"),
        questions: s("/questions/name"),
    };
    Ok(r)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let format = parse_format(a.format.as_deref(), a.out.as_deref())?;
    let pf = pipeline::read_predictions(&a.predictions)?;
    let labels = manifest_labels(&a.dataset)?;
    let report = report_for(&pf, &labels)?;
    emit(a.out.as_deref(), &eval::render_metrics(&report, format))
}

fn cmd_histogram(a: HistogramArgs) -> Result<()> {
    let format = parse_format(a.format.as_deref(), a.out.as_deref())?;
    let af = pipeline::read_answers(&a.answers)?;
    let h = eval::yes_histogram(&af.entries)?;
    emit(a.out.as_deref(), &eval::render_histogram(&h, format))
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let format = parse_format(a.format.as_deref(), a.out.as_deref())?;
    let labels = manifest_labels(&a.dataset)?;
    let mut rows = Vec::new();
    for p in &a.predictions {
        let pf = pipeline::read_predictions(p).with_context(|| format!("reading {}", p.display()))?;
        rows.push((p.clone(), report_for(&pf, &labels)?));
    }
    emit(a.out.as_deref(), &render_report(&rows, format)?)
}

fn render_report(rows: &[(PathBuf, MetricsReport)], format: Format) -> Result<String> {
    let meta = |r: &MetricsReport| {
        [&r.meta.pipeline, &r.meta.vlm, &r.meta.llm, &r.meta.questions]
            .map(|v| v.clone().unwrap_or_else(|| "-".into()))
    };
    let cm = |c: &ConfusionMatrix| [c.tp, c.fp, c.fn_, c.tn].map(|v| v.to_string());
    Ok(match format {
        Format::Json => {
            let docs: Vec<_> = rows
                .iter()
                .map(|(p, r)| json!({ "source": p, "report": r }))
                .collect();
            serde_json::to_string_pretty(&docs)? + "\n"
        }
        Format::Csv => {
            let mut out = String::from(
                "source,pipeline,vlm,llm,questions,tp,fp,fn,tn,precision,recall,accuracy,f1_gully,f1_not_gully,macro_f1\n",
            );
            for (p, r) in rows {
                let mut fields = vec![p.display().to_string()];
                fields.extend(meta(r));
                fields.extend(cm(&r.cm));
                fields.extend(r.scores().as_array().iter().map(|v| format!("{v:.3}")));
                out += &fields.join(",");
                out.push('\n');
            }
            out
        }
        Format::Markdown => {
            let mut out = String::from(
                "| Pipeline | VLM | LLM | Questions | TP | FP | FN | TN | Prec. | Rec. | Acc. | F1 (G) | F1 (NG) | Macro F1 |\n\
                 |---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n",
            );
            for (_, r) in rows {
                out += &format!(
                    "| {} | {} | {} |\n",
                    meta(r).join(" | "),
                    cm(&r.cm).join(" | "),
                    eval::markdown_scores(&r.scores())
                );
            }
            out
        }
        Format::Svg => return Err(usage("report supports markdown, csv and json")),
    })
}
