//! Reference learners: multinomial logistic regression with L1/L2 penalties,
//! a Gini random forest, and LASSO ∩ forest feature selection.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, softmax};
use crate::sampling::{grouped_kfold, LabeledDataset};

pub const MAX_SWEEPS: usize = 5000;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Weights at or below this magnitude count as zero in a support.
pub const SUPPORT_TOLERANCE: f64 = 1e-8;
pub const LASSO_CV_FOLDS: usize = 5;
const INNER_PASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Regularization {
    pub l1: f64,
    pub l2: f64,
}

impl Regularization {
    pub fn lasso(l1: f64) -> Self {
        Self { l1, l2: 0.0 }
    }

    pub fn ridge(l2: f64) -> Self {
        Self { l1: 0.0, l2 }
    }
}

/// Softmax-linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `[class][feature]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub regularization: Regularization,
    /// Penalized objective after each sweep, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl LinearModel {
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        softmax(&logits)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }

    /// Features with a nonzero weight for at least one class.
    pub fn support(&self) -> Vec<usize> {
        let d = self.weights.first().map_or(0, Vec::len);
        (0..d)
            .filter(|&j| self.weights.iter().any(|w| w[j].abs() > SUPPORT_TOLERANCE))
            .collect()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct LogisticProblem<'a> {
    /// Feature-major copy of the design matrix.
    columns: Vec<Vec<f64>>,
    y: &'a [usize],
    n_classes: usize,
    reg: Regularization,
}

impl<'a> LogisticProblem<'a> {
    fn new(x: &[Vec<f64>], y: &'a [usize], n_classes: usize, reg: Regularization) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let columns = (0..d).map(|j| x.iter().map(|row| row[j]).collect()).collect();
        Self { columns, y, n_classes, reg }
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn penalty<'w>(&self, weights: impl IntoIterator<Item = &'w f64>) -> f64 {
        weights
            .into_iter()
            .map(|&w| self.reg.l1 * w.abs() + 0.5 * self.reg.l2 * w * w)
            .sum()
    }

    /// Mean negative log-likelihood with logit `class` of row i moved by `t * e[i]`.
    fn shifted_loss(&self, z: &[f64], class: usize, e: &[f64], t: f64) -> f64 {
        let k = self.n_classes;
        let mut row = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..self.n() {
            row.copy_from_slice(&z[i * k..(i + 1) * k]);
            row[class] += t * e[i];
            total += log_sum_exp(&row) - row[self.y[i]];
        }
        total / self.n() as f64
    }

    fn probabilities(&self, z: &[f64]) -> Vec<f64> {
        let k = self.n_classes;
        let mut p = vec![0.0; z.len()];
        for i in 0..self.n() {
            let row = &z[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for c in 0..k {
                p[i * k + c] = (row[c] - lse).exp();
            }
        }
        p
    }

    /// `p - onehot(y)` for one class.
    fn residuals(&self, p: &[f64], class: usize) -> Vec<f64> {
        let k = self.n_classes;
        (0..self.n())
            .map(|i| p[i * k + class] - if self.y[i] == class { 1.0 } else { 0.0 })
            .collect()
    }
}

fn mean_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / a.len() as f64
}

/// One proximal Newton step on the parameters of a single class: exact
/// coordinate descent on the penalized quadratic model, then Armijo
/// backtracking of the whole block on the true objective.
fn newton_block(
    problem: &LogisticProblem,
    z: &mut [f64],
    weights: &mut [f64],
    bias: &mut f64,
    class: usize,
    objective: f64,
) -> f64 {
    let n = problem.n();
    let k = problem.n_classes;
    let Regularization { l1, l2 } = problem.reg;
    let p = problem.probabilities(z);
    let r = problem.residuals(&p, class);
    let h: Vec<f64> = (0..n).map(|i| (p[i * k + class] * (1.0 - p[i * k + class])).max(1e-10)).collect();
    let curvature: Vec<f64> = problem
        .columns
        .iter()
        .map(|col| col.iter().zip(&h).map(|(x, hi)| hi * x * x).sum::<f64>() / n as f64 + l2)
        .collect();
    let h_bias = h.iter().sum::<f64>() / n as f64;

    let mut e = vec![0.0; n];
    let mut delta = vec![0.0; weights.len()];
    let mut delta_bias = 0.0;
    let mut first = None;
    for _ in 0..INNER_PASSES {
        let mut largest: f64 = 0.0;
        let g: f64 = (0..n).map(|i| r[i] + h[i] * e[i]).sum::<f64>() / n as f64;
        let step = -g / h_bias;
        delta_bias += step;
        e.iter_mut().for_each(|v| *v += step);
        largest = largest.max(step.abs());
        for (j, col) in problem.columns.iter().enumerate() {
            let w = weights[j] + delta[j];
            let hj = curvature[j];
            if hj <= 1e-12 {
                continue;
            }
            let g = (0..n).map(|i| (r[i] + h[i] * e[i]) * col[i]).sum::<f64>() / n as f64 + l2 * w;
            let step = soft_threshold(w - g / hj, l1 / hj) - w;
            if step != 0.0 {
                delta[j] += step;
                e.iter_mut().zip(col).for_each(|(v, x)| *v += step * x);
                largest = largest.max(step.abs());
            }
        }
        let first = *first.get_or_insert(largest);
        if largest <= 1e-13 || largest <= 1e-4 * first {
            break;
        }
    }

    let mut decrease = mean_dot(&r, &e);
    for (w, dw) in weights.iter().zip(&delta) {
        decrease += l2 * w * dw + l1 * ((w + dw).abs() - w.abs());
    }
    if decrease >= 0.0 {
        return objective;
    }
    let base_penalty = problem.penalty(weights.iter());
    let rest = objective - problem.shifted_loss(z, class, &e, 0.0) - base_penalty;
    let mut t = 1.0;
    for _ in 0..50 {
        let trial: Vec<f64> = weights.iter().zip(&delta).map(|(w, dw)| w + t * dw).collect();
        let value = problem.shifted_loss(z, class, &e, t) + problem.penalty(&trial) + rest;
        if value <= objective + 1e-4 * t * decrease {
            weights.copy_from_slice(&trial);
            *bias += t * delta_bias;
            for i in 0..n {
                z[i * k + class] += t * e[i];
            }
            return value;
        }
        t *= 0.5;
    }
    objective
}

/// Multinomial logistic regression by blockwise proximal Newton, one class
/// block at a time.
///
/// Stops once the proximal-gradient mapping norm drops below
/// [`GRADIENT_TOLERANCE`] or after [`MAX_SWEEPS`] sweeps over the classes. The
/// solver is deterministic, so no seed is involved.
pub fn fit_logistic(train: &LabeledDataset, reg: Regularization) -> Result<LinearModel> {
    if !(reg.l1 >= 0.0 && reg.l2 >= 0.0) {
        return Err(Error::InvalidConfig("regularization strengths must be non-negative".into()));
    }
    let counts = train.class_counts();
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::SingleClassData);
    }
    let k = train.n_classes();
    let d = train.n_features();
    let problem = LogisticProblem::new(&train.x, &train.labels, k, reg);
    let mut weights = vec![vec![0.0; d]; k];
    let mut biases = vec![0.0; k];
    let mut z = vec![0.0; train.len() * k];
    let zeros = vec![0.0; train.len()];
    let mut objective = problem.shifted_loss(&z, 0, &zeros, 0.0) + problem.penalty(weights.iter().flatten());
    let mut trace = vec![objective];
    let mut converged = false;

    for _ in 0..MAX_SWEEPS {
        for c in 0..k {
            objective = newton_block(&problem, &mut z, &mut weights[c], &mut biases[c], c, objective);
        }
        // Recomputed from scratch so the trace carries no accumulated rounding.
        objective = problem.shifted_loss(&z, 0, &zeros, 0.0) + problem.penalty(weights.iter().flatten());
        trace.push(objective);

        let p = problem.probabilities(&z);
        let mut norm_sq = 0.0;
        for c in 0..k {
            let r = problem.residuals(&p, c);
            let g = r.iter().sum::<f64>() / r.len() as f64;
            norm_sq += g * g;
            for (j, col) in problem.columns.iter().enumerate() {
                let w = weights[c][j];
                let g = mean_dot(&r, col);
                let mapped = w - soft_threshold(w - (g + reg.l2 * w), reg.l1);
                norm_sq += mapped * mapped;
            }
        }
        if norm_sq.sqrt() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
    }
    Ok(LinearModel {
        weights,
        biases,
        regularization: reg,
        objective_trace: trace,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means ⌊√d⌋ (at least 1).
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf { distribution: Vec<f64> },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Nodes in creation order; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_proba(&self, x: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { distribution } => return distribution,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
    /// Normalized Gini decrease per feature.
    pub importances: Vec<f64>,
}

impl Forest {
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.predict_proba(x)) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }

    /// Feature indices by decreasing importance; ties keep the lower index first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.importances.len()).collect();
        order.sort_by(|&a, &b| self.importances[b].total_cmp(&self.importances[a]).then(a.cmp(&b)));
        order
    }
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    data: &'a LabeledDataset,
    config: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
    /// Unnormalized weighted impurity decrease per feature.
    decrease: Vec<f64>,
    rng: ChaCha8Rng,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let mut distribution = vec![0.0; self.data.n_classes()];
        for &i in rows {
            distribution[self.data.labels[i]] += 1.0;
        }
        let n = rows.len() as f64;
        distribution.iter_mut().for_each(|p| *p /= n);
        self.nodes.push(Node::Leaf { distribution });
        self.nodes.len() - 1
    }

    /// Best (decrease, feature, threshold) among `mtry` random features.
    fn best_split(&mut self, rows: &[usize]) -> Option<(f64, usize, f64)> {
        let k = self.data.n_classes();
        let d = self.data.n_features();
        let mut parent = vec![0.0; k];
        for &i in rows {
            parent[self.data.labels[i]] += 1.0;
        }
        let n = rows.len() as f64;
        let parent_impurity = gini(&parent, n);
        if parent_impurity <= 0.0 {
            return None;
        }
        let mut candidates = index::sample(&mut self.rng, d, self.mtry).into_vec();
        candidates.sort_unstable();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for feature in candidates {
            let x = &self.data.x;
            sorted.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]));
            let mut left = vec![0.0; k];
            for pos in 0..sorted.len() - 1 {
                left[self.data.labels[sorted[pos]]] += 1.0;
                let (lo, hi) = (x[sorted[pos]][feature], x[sorted[pos + 1]][feature]);
                let n_left = pos + 1;
                if lo == hi || n_left < self.config.min_leaf || sorted.len() - n_left < self.config.min_leaf {
                    continue;
                }
                let right: Vec<f64> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
                let (nl, nr) = (n_left as f64, n - n_left as f64);
                let decrease = n * parent_impurity - nl * gini(&left, nl) - nr * gini(&right, nr);
                if decrease > 1e-12 && best.is_none_or(|b| decrease > b.0) {
                    best = Some((decrease, feature, 0.5 * (lo + hi)));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        if depth >= self.config.max_depth || rows.len() < 2 * self.config.min_leaf {
            return self.leaf(rows);
        }
        let Some((decrease, feature, threshold)) = self.best_split(rows) else {
            return self.leaf(rows);
        };
        self.decrease[feature] += decrease;
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.data.x[i][feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { distribution: Vec::new() });
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

/// Bootstrapped CART trees with Gini splits. Tree `t` draws from ChaCha8
/// stream `t` of `config.seed`, so results do not depend on thread scheduling.
pub fn fit_random_forest(train: &LabeledDataset, config: &ForestConfig) -> Result<Forest> {
    if config.n_trees == 0 || config.min_leaf == 0 {
        return Err(Error::InvalidConfig("forest needs at least one tree and min_leaf ≥ 1".into()));
    }
    if train.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::SingleClassData);
    }
    let d = train.n_features();
    if d == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mtry = config
        .max_features
        .unwrap_or(((d as f64).sqrt().floor() as usize).max(1))
        .clamp(1, d);
    let n = train.len();
    let grown: Vec<(Tree, Vec<f64>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut builder = TreeBuilder {
                data: train,
                config,
                mtry,
                nodes: Vec::new(),
                decrease: vec![0.0; d],
                rng,
            };
            builder.grow(&rows, 0);
            (Tree { nodes: builder.nodes }, builder.decrease)
        })
        .collect();
    let mut importances = vec![0.0; d];
    for (_, dec) in &grown {
        for (acc, v) in importances.iter_mut().zip(dec) {
            *acc += v;
        }
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Forest {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        n_classes: train.n_classes(),
        importances,
    })
}

/// Ten log-spaced strengths from 1e-4 to 1e1.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|i| 10f64.powf(-4.0 + 5.0 * i as f64 / 9.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub cv_accuracy: f64,
    pub support: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub lambda: f64,
    pub lasso_set: Vec<usize>,
    pub forest_top: Vec<usize>,
    /// Sorted column indices used downstream.
    pub selected: Vec<usize>,
    pub scores: Vec<LambdaScore>,
    pub fell_back: bool,
}

/// Intersection of two rankings: the LASSO support and the forest's top
/// `|lasso_set|` features. Falls back to the LASSO set when they do not overlap.
pub fn intersect_selection(lasso_set: &[usize], forest_ranking: &[usize]) -> (Vec<usize>, Vec<usize>, bool) {
    let top: Vec<usize> = forest_ranking.iter().take(lasso_set.len()).copied().collect();
    let top_set: BTreeSet<usize> = top.iter().copied().collect();
    let both: Vec<usize> = lasso_set.iter().copied().filter(|j| top_set.contains(j)).collect::<BTreeSet<_>>().into_iter().collect();
    if both.is_empty() {
        let mut fallback = lasso_set.to_vec();
        fallback.sort_unstable();
        (fallback, top, true)
    } else {
        (both, top, false)
    }
}

fn accuracy_of(model: &LinearModel, data: &LabeledDataset) -> f64 {
    let hits = data.x.iter().zip(&data.labels).filter(|(x, &y)| model.predict(x) == y).count();
    hits as f64 / data.len().max(1) as f64
}

/// LASSO strength by subject-grouped CV accuracy on `train`, then intersection
/// with the forest's importance ranking. Ties in CV accuracy go to the larger λ.
pub fn select_features(train: &LabeledDataset, lambdas: &[f64], forest: &ForestConfig, seed: u64) -> Result<FeatureSelection> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty λ grid".into()));
    }
    let folds = grouped_kfold(&train.groups, LASSO_CV_FOLDS, seed)?;
    let fold_sets: Vec<(LabeledDataset, LabeledDataset)> =
        folds.iter().map(|p| (train.subset(&p.train), train.subset(&p.test))).collect();
    let scores = lambdas
        .par_iter()
        .map(|&lambda| {
            let reg = Regularization::lasso(lambda);
            let mut total = 0.0;
            for (fit_on, held) in &fold_sets {
                total += accuracy_of(&fit_logistic(fit_on, reg)?, held);
            }
            Ok(LambdaScore {
                lambda,
                cv_accuracy: total / fold_sets.len() as f64,
                support: fit_logistic(train, reg)?.support(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = scores
        .iter()
        .filter(|s| !s.support.is_empty())
        .max_by(|a, b| a.cv_accuracy.total_cmp(&b.cv_accuracy).then(a.lambda.total_cmp(&b.lambda)))
        .ok_or_else(|| Error::InvalidData("every λ in the grid zeroes all weights".into()))?;
    let ranking = fit_random_forest(train, forest)?.ranking();
    let (selected, forest_top, fell_back) = intersect_selection(&best.support, &ranking);
    Ok(FeatureSelection {
        lambda: best.lambda,
        lasso_set: best.support.clone(),
        forest_top,
        selected,
        scores,
        fell_back,
    })
}
