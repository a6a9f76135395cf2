mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deeptake::eval::{self, ComparisonRow, MetricReport, PredictionSet};
use deeptake::features::DEFAULT_WINDOW_S;
use deeptake::io::{self, FeatureSidecar};
use deeptake::labeling::Task;
use deeptake::nn::ModelBundle;
use deeptake::pipeline::{self, NetworkOverrides, SplitRecord, TaskData, TrainSettings};
use deeptake::synth::{self, SessionSpec};

use config::{required, written, Failure, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "deeptake", version, about = "Driver takeover prediction from multimodal signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic study directory.
    Generate(GenerateArgs),
    /// Ingest a study directory and write the fused feature table.
    Features(FeaturesArgs),
    /// Train one task's network on a subject-grouped split.
    Train(TrainArgs),
    /// Score a trained model on held-out rows, or rerun it as grouped k-fold.
    Eval(EvalArgs),
    /// Predict classes for a feature table.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; flags override its keys.
    #[arg(long, env = "DEEPTAKE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Session spec JSON; defaults apply to missing keys.
    #[arg(long, env = "DEEPTAKE_SPEC")]
    spec: Option<PathBuf>,
    #[arg(long, env = "DEEPTAKE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DEEPTAKE_DATA_DIR")]
    data: Option<PathBuf>,
    /// Feature CSV; the sidecar goes next to it as `<name>.meta.json`.
    #[arg(long, env = "DEEPTAKE_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    window_s: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DEEPTAKE_FEATURES")]
    features: Option<PathBuf>,
    #[arg(long, env = "DEEPTAKE_EVENTS")]
    events: Option<PathBuf>,
    /// intention, time3, time5 or quality.
    #[arg(long)]
    task: Option<Task>,
    /// Output directory for model.json, train_report.json and split.json.
    #[arg(long, env = "DEEPTAKE_OUT")]
    out: Option<PathBuf>,
    /// Train on the LASSO ∩ random-forest feature subset.
    #[arg(long)]
    select_features: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DEEPTAKE_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "DEEPTAKE_FEATURES")]
    features: Option<PathBuf>,
    #[arg(long, env = "DEEPTAKE_EVENTS")]
    events: Option<PathBuf>,
    /// Split record from training; defaults to split.json beside the model.
    #[arg(long, env = "DEEPTAKE_SPLIT")]
    split: Option<PathBuf>,
    #[arg(long, env = "DEEPTAKE_OUT")]
    out: Option<PathBuf>,
    /// Retrain per fold with subject-grouped k-fold instead of scoring the model.
    #[arg(long)]
    folds: Option<usize>,
    /// External prediction CSVs, as `path` or `name=path`.
    #[arg(long, num_args = 1..)]
    baseline_preds: Vec<String>,
    /// Also fit logistic regression and random forest on the identical split.
    #[arg(long)]
    with_baselines: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DEEPTAKE_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "DEEPTAKE_FEATURES")]
    features: Option<PathBuf>,
    /// Defaults to stdout.
    #[arg(long, env = "DEEPTAKE_OUT")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Predict(a) => predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("deeptake: {failure}");
            failure.exit_code()
        }
    }
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let config = PipelineConfig::load(args.common.config.as_deref())?;
    let out = required(args.out, config.out, "out")?;
    let mut spec = match args.spec.or(config.spec) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SessionSpec>(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => SessionSpec::default(),
    };
    if let Some(seed) = args.common.seed.or(config.seed) {
        spec.seed = seed;
    }
    let study = synth::generate(&spec)?;
    let files = io::render_study(&study);
    for (relative, contents) in &files {
        written(io::write_text(&out.join(relative), contents))?;
    }
    println!("wrote {} files for {} events to {}", files.len(), study.events().len(), out.display());
    Ok(())
}

fn features(args: FeaturesArgs) -> Result<(), Failure> {
    let config = PipelineConfig::load(args.common.config.as_deref())?;
    let data = required(args.data, config.data_dir, "data")?;
    let out = required(args.out, config.out, "out")?;
    let window_s = args.window_s.or(config.window_s).unwrap_or(DEFAULT_WINDOW_S);
    if !(window_s > 0.0 && window_s.is_finite()) {
        return Err(Failure::Config(format!("window width must be positive, got {window_s}")));
    }
    let (study, notes) = io::ingest_dir(&data)?;
    for note in &notes {
        eprintln!("warning: {note}");
    }
    let table = pipeline::build_features(&study, window_s)?;
    if table.matrix.n_rows() == 0 {
        return Err(Failure::Data("no feature rows were produced".into()));
    }
    for w in &table.warnings {
        eprintln!("warning: {w:?}");
    }
    for d in &table.matrix.dropped {
        eprintln!("dropped column {}: {:?}", d.name, d.reason);
    }
    let sidecar = FeatureSidecar {
        window_s,
        columns: table.matrix.columns.clone(),
        dropped: table.matrix.dropped.clone(),
        warnings: table.warnings.clone(),
    };
    written(io::write_text(&out, &io::features_csv(&table.matrix)))?;
    written(io::write_json(&io::sidecar_path(&out), &sidecar))?;
    println!("wrote {} rows x {} columns to {}", table.matrix.n_rows(), table.matrix.n_cols(), out.display());
    Ok(())
}

fn load_task_data(features: &Path, events: &Path, task: Task) -> Result<TaskData, Failure> {
    let matrix = io::read_features(features)?;
    let events = io::parse_events_csv(&io::read_text(events)?, events)?;
    Ok(pipeline::task_data(&matrix, &events, task)?)
}

fn train_settings(task: Task, seed: u64, config: &PipelineConfig, select: bool) -> TrainSettings {
    let mut s = TrainSettings::new(task, seed);
    s.smote_k = config.smote_k.unwrap_or(s.smote_k);
    s.ratios = config.ratios.unwrap_or(s.ratios);
    s.network = config.network.clone();
    s.select_features = select || config.select_features.unwrap_or(false);
    s
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let config = PipelineConfig::load(args.common.config.as_deref())?;
    let features = required(args.features, config.features.clone(), "features")?;
    let events = required(args.events, config.events.clone(), "events")?;
    let out = required(args.out, config.out.clone(), "out")?;
    let task = required(args.task, config.task, "task")?;
    let seed = args.common.seed.or(config.seed).unwrap_or(0);
    let settings = train_settings(task, seed, &config, args.select_features);
    let data = load_task_data(&features, &events, task)?;
    let outcome = pipeline::train_task(&data, &settings)?;
    let report = eval::evaluate(&outcome.test_predictions)?;

    written(io::write_json(&out.join("model.json"), &outcome.bundle))?;
    written(io::write_json(&out.join("train_report.json"), &outcome.report))?;
    written(io::write_json(&out.join("split.json"), &outcome.split))?;
    if let Some(selection) = &outcome.prepared.selection {
        written(io::write_json(&out.join("selection.json"), selection))?;
        println!("selected {} of {} columns", selection.selected.len(), outcome.bundle.preprocessor.columns.len());
    }
    println!(
        "{task}: best epoch {} of {}, test accuracy {:.3} on {} events",
        outcome.report.best_epoch,
        outcome.report.epochs.len(),
        report.accuracy,
        report.n
    );
    Ok(())
}

fn target_label(task: Task) -> &'static str {
    match task {
        Task::Intention => "Takeover Intention",
        Task::Time3 => "Takeover Time",
        Task::Time5 => "Takeover Time (5 classes)",
        Task::Quality => "Takeover Quality",
    }
}

fn row(task: Task, classifier: &str, accuracy: f64, weighted_f1: f64) -> ComparisonRow {
    ComparisonRow {
        target: target_label(task).into(),
        classifier: classifier.into(),
        accuracy,
        weighted_f1,
        transcribed: false,
    }
}

/// Settings that retrain the architecture and seed stored in a bundle.
fn bundle_settings(bundle: &ModelBundle, config: &PipelineConfig) -> TrainSettings {
    let c = &bundle.config;
    let mut s = train_settings(bundle.task, bundle.seed, config, bundle.input_columns.is_some());
    s.network = NetworkOverrides {
        hidden_dims: Some(c.hidden_dims.clone()),
        learning_rate: Some(c.learning_rate),
        batch_size: Some(c.batch_size),
        max_epochs: Some(c.max_epochs),
        patience: Some(c.patience),
    };
    s
}

fn external_rows(specs: &[String], task: Task, truth: &BTreeMap<String, usize>, class_names: &[String]) -> Result<Vec<ComparisonRow>, Failure> {
    let mut rows = Vec::new();
    for spec in specs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.clone());
                (stem, p)
            }
        };
        let mut external = eval::parse_external_predictions(&io::read_text(&path)?, class_names.len())?;
        let keep: Vec<usize> = (0..external.event_ids.len()).filter(|&i| truth.contains_key(&external.event_ids[i])).collect();
        if keep.is_empty() {
            return Err(Failure::Schema(format!("{}: no predictions for the evaluated events", path.display())));
        }
        external.event_ids = keep.iter().map(|&i| external.event_ids[i].clone()).collect();
        external.predicted = keep.iter().map(|&i| external.predicted[i]).collect();
        external.scores = external.scores.map(|s| keep.iter().map(|&i| s[i].clone()).collect());
        let preds = eval::align_external(&external, truth, class_names)?;
        if preds.len() < truth.len() {
            eprintln!("warning: {name} covers {} of {} evaluated events", preds.len(), truth.len());
        }
        rows.push(row(task, &name, eval::accuracy(&preds)?, eval::weighted_f1(&preds)?));
    }
    Ok(rows)
}

fn evaluate(args: EvalArgs) -> Result<(), Failure> {
    let config = PipelineConfig::load(args.common.config.as_deref())?;
    let model = required(args.model, config.model.clone(), "model")?;
    let features = required(args.features, config.features.clone(), "features")?;
    let events = required(args.events, config.events.clone(), "events")?;
    let out = required(args.out, config.out.clone(), "out")?;
    let bundle: ModelBundle = io::read_json(&model)?;
    bundle.network()?;
    let data = load_task_data(&features, &events, bundle.task)?;
    let task = bundle.task;
    let mut settings = bundle_settings(&bundle, &config);
    if let Some(seed) = args.common.seed {
        settings.seed = seed;
    }

    if let Some(folds) = args.folds.or(config.folds) {
        let report = pipeline::kfold(&data, &settings, folds)?;
        let mut rows = vec![row(task, &format!("DeepTake ({folds}-fold mean)"), report.mean_accuracy, report.mean_weighted_f1)];
        let truth = data.truth_by_event();
        rows.extend(external_rows(&args.baseline_preds, task, &truth, &data.class_names())?);
        written(io::write_json(&out.join("kfold_report.json"), &report))?;
        written(io::write_text(&out.join("comparison.txt"), &eval::render_comparison_table(&rows)))?;
        for f in &report.folds {
            println!("fold {}: accuracy {:.3}, weighted F1 {:.3} ({} events)", f.fold, f.report.accuracy, f.report.weighted_f1, f.test_rows);
        }
        println!("mean accuracy {:.3}, mean weighted F1 {:.3}", report.mean_accuracy, report.mean_weighted_f1);
        return Ok(());
    }

    let split_path = args.split.or(config.split.clone()).or_else(|| {
        let beside = model.with_file_name("split.json");
        beside.exists().then_some(beside)
    });
    let plan = match &split_path {
        Some(path) => Some(io::read_json::<SplitRecord>(path)?.to_plan(&data.matrix.event_ids)?),
        None => None,
    };
    let rows_to_score: Vec<usize> = match &plan {
        Some(p) => p.test.clone(),
        None => {
            eprintln!("warning: no split record; scoring every labeled row");
            (0..data.labels.len()).collect()
        }
    };
    let preds = pipeline::predict_rows(&bundle, &data, &rows_to_score)?;
    let report = eval::evaluate(&preds)?;
    let truth: BTreeMap<String, usize> = preds.event_ids.iter().cloned().zip(preds.truth.iter().copied()).collect();

    let mut rows = vec![row(task, "DeepTake", report.accuracy, report.weighted_f1)];
    if args.with_baselines {
        let plan = plan.as_ref().ok_or_else(|| Failure::Config("--with-baselines needs the training split record".into()))?;
        let prepared = pipeline::prepare_split(&data, plan, &settings)?;
        let summary = |name: &str, p: &PredictionSet| -> Result<ComparisonRow, Failure> {
            Ok(row(task, name, eval::accuracy(p)?, eval::weighted_f1(p)?))
        };
        rows.push(summary("Logistic Regression", &pipeline::logistic_baseline(&prepared)?)?);
        rows.push(summary("RF", &pipeline::forest_baseline(&prepared, settings.seed)?)?);
    }
    rows.extend(external_rows(&args.baseline_preds, task, &truth, &data.class_names())?);

    write_report(&out, &report)?;
    written(io::write_text(&out.join("comparison.txt"), &eval::render_comparison_table(&rows)))?;
    print!("{}", eval::render_comparison_table(&rows));
    Ok(())
}

fn write_report(out: &Path, report: &MetricReport) -> Result<(), Failure> {
    written(io::write_json(&out.join("report.json"), report))?;
    written(io::write_text(&out.join("roc.csv"), &eval::roc_csv(report)))?;
    written(io::write_text(&out.join("confusion.csv"), &eval::confusion_csv(report)))
}

fn predict(args: PredictArgs) -> Result<(), Failure> {
    let config = PipelineConfig::load(args.common.config.as_deref())?;
    let model = required(args.model, config.model.clone(), "model")?;
    let features = required(args.features, config.features.clone(), "features")?;
    let bundle: ModelBundle = io::read_json(&model)?;
    let matrix = io::read_features(&features)?;
    let duplicates = matrix.event_ids.len() - matrix.event_ids.iter().collect::<BTreeSet<_>>().len();
    if duplicates > 0 {
        return Err(Failure::Data(format!("{duplicates} duplicated event ids")));
    }
    let predictions = bundle.predict(&matrix)?;
    let mut text = String::from("event_id,class");
    for name in &bundle.class_names {
        text.push_str(&format!(",score_{name}"));
    }
    text.push('\n');
    for p in &predictions {
        text.push_str(&format!("{},{}", p.event_id, bundle.class_names[p.class]));
        for s in &p.probabilities {
            text.push_str(&format!(",{s}"));
        }
        text.push('\n');
    }
    match args.out.or(config.out) {
        Some(path) => written(io::write_text(&path, &text))?,
        None => print!("{text}"),
    }
    Ok(())
}
