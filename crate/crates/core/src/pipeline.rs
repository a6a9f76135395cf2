//! End-to-end recipes: feature building, task datasets, training on a
//! subject-grouped split, baselines on the identical split, and k-fold runs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::baselines::{self, FeatureSelection, ForestConfig, Regularization};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, PredictionSet};
use crate::features::{self, EventMeta, ExtractionJob, ExtractionWarning, FeatureMatrix, Gender, Preprocessor, SessionData};
use crate::labeling::{label_event, TakeoverEvent, Task};
use crate::nn::{self, ModelBundle, NetworkConfig, TrainReport};
use crate::sampling::{self, LabeledDataset, SplitPlan};

/// Questionnaire answers for one (subject, trial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub subject_id: String,
    pub trial_id: String,
    pub gender: Option<Gender>,
    pub nasa_tlx: Option<u8>,
    pub pss10: Option<u8>,
}

/// Everything ingested for a study.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Study {
    pub sessions: Vec<SessionData>,
    pub events: Vec<TakeoverEvent>,
    pub survey: Vec<SurveyRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    /// Encoded, sparse columns removed, not imputed or normalized.
    pub matrix: FeatureMatrix,
    pub warnings: Vec<ExtractionWarning>,
}

pub fn build_features(study: &Study, width_s: f64) -> Result<FeatureTable> {
    if !(width_s > 0.0 && width_s.is_finite()) {
        return Err(Error::InvalidConfig(format!("window width {width_s} must be positive")));
    }
    let survey: BTreeMap<(&str, &str), &SurveyRecord> = study
        .survey
        .iter()
        .map(|r| ((r.subject_id.as_str(), r.trial_id.as_str()), r))
        .collect();
    let jobs: Vec<ExtractionJob> = study
        .events
        .iter()
        .map(|e| {
            let answers = survey.get(&(e.subject_id.as_str(), e.trial_id.as_str()));
            ExtractionJob {
                meta: EventMeta {
                    event_id: e.event_id.clone(),
                    subject_id: e.subject_id.clone(),
                    ndrt: Some(e.ndrt),
                    gender: answers.and_then(|a| a.gender),
                    nasa_tlx: answers.and_then(|a| a.nasa_tlx),
                    pss10: answers.and_then(|a| a.pss10),
                },
                trial_id: e.trial_id.clone(),
                tor_time: e.t_alarm,
            }
        })
        .collect();
    let (vectors, warnings) = features::extract_all(&study.sessions, &jobs, width_s)?;
    if vectors.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let matrix = FeatureMatrix::from_vectors(&vectors)?.drop_sparse_columns(features::SPARSE_COLUMN_THRESHOLD)?;
    Ok(FeatureTable { matrix, warnings })
}

/// Feature rows that carry a label for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub matrix: FeatureMatrix,
    pub labels: Vec<usize>,
}

impl TaskData {
    pub fn class_names(&self) -> Vec<String> {
        self.task.class_names()
    }

    pub fn truth_by_event(&self) -> BTreeMap<String, usize> {
        self.matrix.event_ids.iter().cloned().zip(self.labels.iter().copied()).collect()
    }
}

/// Keeps the rows of `matrix` whose event has a label for `task`.
pub fn task_data(matrix: &FeatureMatrix, events: &[TakeoverEvent], task: Task) -> Result<TaskData> {
    let by_id: BTreeMap<&str, &TakeoverEvent> = events.iter().map(|e| (e.event_id.as_str(), e)).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, id) in matrix.event_ids.iter().enumerate() {
        let event = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::SchemaMismatch(format!("feature row '{id}' has no event record")))?;
        if let Some(class) = task.class_of(&label_event(event)?) {
            rows.push(i);
            labels.push(class);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(format!("no events carry a {task} label")));
    }
    Ok(TaskData {
        task,
        matrix: matrix.select_rows(&rows),
        labels,
    })
}

/// Optional replacements for the network defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkOverrides {
    pub hidden_dims: Option<Vec<usize>>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub task: Task,
    pub seed: u64,
    pub smote_k: usize,
    pub ratios: (f64, f64, f64),
    pub network: NetworkOverrides,
    /// Restrict every partition to the LASSO ∩ forest subset chosen on the
    /// balanced training rows.
    #[serde(default)]
    pub select_features: bool,
}

impl TrainSettings {
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            task,
            seed,
            smote_k: sampling::DEFAULT_SMOTE_K,
            ratios: sampling::DEFAULT_RATIOS,
            network: NetworkOverrides::default(),
            select_features: false,
        }
    }

    pub fn network_config(&self, input_dim: usize) -> NetworkConfig {
        let mut c = NetworkConfig::new(input_dim, self.task.num_classes());
        let o = &self.network;
        if let Some(h) = &o.hidden_dims {
            c.hidden_dims = h.clone();
        }
        c.learning_rate = o.learning_rate.unwrap_or(c.learning_rate);
        c.batch_size = o.batch_size.unwrap_or(c.batch_size);
        c.max_epochs = o.max_epochs.unwrap_or(c.max_epochs);
        c.patience = o.patience.unwrap_or(c.patience);
        c.seed = self.seed;
        c
    }
}

/// Row partition expressed as event ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitRecord {
    pub fn from_plan(plan: &SplitPlan, event_ids: &[String]) -> Self {
        let ids = |rows: &[usize]| rows.iter().map(|&i| event_ids[i].clone()).collect();
        Self {
            seed: plan.seed,
            train: ids(&plan.train),
            validation: ids(&plan.validation),
            test: ids(&plan.test),
        }
    }

    /// Row indices into `event_ids`; ids absent from it are a schema error.
    pub fn to_plan(&self, event_ids: &[String]) -> Result<SplitPlan> {
        let index: BTreeMap<&str, usize> = event_ids.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let rows = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::SchemaMismatch(format!("split names unknown event '{id}'")))
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(SplitPlan {
            seed: self.seed,
            train: rows(&self.train)?,
            validation: rows(&self.validation)?,
            test: rows(&self.test)?,
        })
    }
}

/// Preprocessed partitions shared by the network and the baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub preprocessor: Preprocessor,
    /// Training rows after SMOTE.
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub test_event_ids: Vec<String>,
    pub selection: Option<FeatureSelection>,
}

fn smote_seed(seed: u64) -> u64 {
    seed ^ 0x5_0007
}

/// Fits imputation and normalization on the training rows, then balances them.
pub fn prepare_split(data: &TaskData, plan: &SplitPlan, settings: &TrainSettings) -> Result<PreparedSplit> {
    for (name, rows) in [("train", &plan.train), ("validation", &plan.validation), ("test", &plan.test)] {
        if rows.is_empty() {
            return Err(Error::EmptyPartition(name.into()));
        }
    }
    let (preprocessor, fused) = Preprocessor::fit(&data.matrix, &plan.train)?;
    let all = LabeledDataset::new(
        fused.rows.clone(),
        data.labels.clone(),
        fused.subject_ids.clone(),
        data.class_names(),
        fused.column_names(),
    )?
    .with_indicator_groups(fused.indicator_groups());
    let train = sampling::smote(&all.subset(&plan.train), settings.smote_k, smote_seed(settings.seed))?;
    let mut prepared = PreparedSplit {
        preprocessor,
        train,
        validation: all.subset(&plan.validation),
        test: all.subset(&plan.test),
        test_event_ids: plan.test.iter().map(|&i| data.matrix.event_ids[i].clone()).collect(),
        selection: None,
    };
    if settings.select_features {
        let forest = ForestConfig { seed: settings.seed, ..ForestConfig::default() };
        let selection = baselines::select_features(&prepared.train, &baselines::default_lambda_grid(), &forest, settings.seed)?;
        let keep = &selection.selected;
        prepared.train = prepared.train.select_columns(keep);
        prepared.validation = prepared.validation.select_columns(keep);
        prepared.test = prepared.test.select_columns(keep);
        prepared.selection = Some(selection);
    }
    Ok(prepared)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub report: TrainReport,
    pub split: SplitRecord,
    pub prepared: PreparedSplit,
    pub test_predictions: PredictionSet,
}

fn score_rows(data: &LabeledDataset, event_ids: &[String], mut scorer: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<PredictionSet> {
    let scores = data.x.iter().map(|x| scorer(x)).collect::<Result<Vec<_>>>()?;
    PredictionSet::from_scores(data.class_names.clone(), event_ids.to_vec(), data.labels.clone(), scores)
}

pub fn train_on_plan(data: &TaskData, plan: &SplitPlan, settings: &TrainSettings) -> Result<TrainOutcome> {
    let prepared = prepare_split(data, plan, settings)?;
    let config = settings.network_config(prepared.train.n_features());
    let (net, report) = nn::train(&prepared.train, &prepared.validation, &config)?;
    let test_predictions = score_rows(&prepared.test, &prepared.test_event_ids, |x| nn::forward(&net, x))?;
    let mut bundle = ModelBundle::new(data.task, data.class_names(), &net, prepared.preprocessor.clone(), config);
    bundle.input_columns = prepared.selection.as_ref().map(|s| s.selected.clone());
    Ok(TrainOutcome {
        bundle,
        report,
        split: SplitRecord::from_plan(plan, &data.matrix.event_ids),
        prepared,
        test_predictions,
    })
}

/// Subject-grouped split by `settings.ratios`, then [`train_on_plan`].
pub fn train_task(data: &TaskData, settings: &TrainSettings) -> Result<TrainOutcome> {
    let plan = sampling::grouped_split(&data.matrix.subject_ids, settings.ratios, settings.seed)?;
    train_on_plan(data, &plan, settings)
}

/// Ridge strength for the plain logistic-regression baseline.
pub const LOGISTIC_BASELINE_L2: f64 = 1e-2;

pub fn logistic_baseline(prepared: &PreparedSplit) -> Result<PredictionSet> {
    let model = baselines::fit_logistic(&prepared.train, Regularization::ridge(LOGISTIC_BASELINE_L2))?;
    score_rows(&prepared.test, &prepared.test_event_ids, |x| Ok(model.predict_proba(x)))
}

pub fn forest_baseline(prepared: &PreparedSplit, seed: u64) -> Result<PredictionSet> {
    let forest = baselines::fit_random_forest(&prepared.train, &ForestConfig { seed, ..ForestConfig::default() })?;
    score_rows(&prepared.test, &prepared.test_event_ids, |x| Ok(forest.predict_proba(x)))
}

/// Scores a saved bundle on the given rows of `data`.
pub fn predict_rows(bundle: &ModelBundle, data: &TaskData, rows: &[usize]) -> Result<PredictionSet> {
    if bundle.task != data.task {
        return Err(Error::SchemaMismatch(format!("bundle predicts {} but data is labeled for {}", bundle.task, data.task)));
    }
    let subset = data.matrix.select_rows(rows);
    let predictions = bundle.predict(&subset)?;
    let truth = rows.iter().map(|&i| data.labels[i]).collect();
    PredictionSet::new(
        bundle.class_names.clone(),
        subset.event_ids.clone(),
        truth,
        predictions.iter().map(|p| p.class).collect(),
        Some(predictions.into_iter().map(|p| p.probabilities).collect()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_rows: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub mean_weighted_f1: f64,
    /// Which classes appear in each fold's held-out rows.
    pub class_presence: Vec<Vec<bool>>,
}

/// Grouped k-fold; each fold carves a validation partition from its training
/// subjects for early stopping.
pub fn kfold(data: &TaskData, settings: &TrainSettings, folds: usize) -> Result<KFoldReport> {
    let plans = sampling::grouped_kfold(&data.matrix.subject_ids, folds, settings.seed)?;
    let mut results = Vec::new();
    for (f, plan) in plans.iter().enumerate() {
        let train_groups: Vec<String> = plan.train.iter().map(|&i| data.matrix.subject_ids[i].clone()).collect();
        let (r0, r1, _) = settings.ratios;
        let inner = sampling::grouped_split(&train_groups, (r0, r1, 0.0), settings.seed.wrapping_add(f as u64))?;
        let full = SplitPlan {
            seed: settings.seed,
            train: inner.train.iter().map(|&i| plan.train[i]).collect(),
            validation: inner.validation.iter().map(|&i| plan.train[i]).collect(),
            test: plan.test.clone(),
        };
        let outcome = train_on_plan(data, &full, settings)?;
        results.push(FoldResult {
            fold: f,
            test_rows: full.test.len(),
            report: eval::evaluate(&outcome.test_predictions)?,
        });
    }
    let n = results.len() as f64;
    Ok(KFoldReport {
        mean_accuracy: results.iter().map(|r| r.report.accuracy).sum::<f64>() / n,
        mean_weighted_f1: results.iter().map(|r| r.report.weighted_f1).sum::<f64>() / n,
        class_presence: sampling::fold_class_presence(&plans, &data.labels, data.task.num_classes()),
        folds: results,
    })
}

/// Distinct subjects in row order of first appearance.
pub fn subjects(matrix: &FeatureMatrix) -> Vec<String> {
    let mut seen = BTreeSet::new();
    matrix.subject_ids.iter().filter(|s| seen.insert(s.as_str())).cloned().collect()
}
