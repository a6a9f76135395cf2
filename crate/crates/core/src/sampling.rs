//! SMOTE class balancing and subject-grouped partitioning.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SMOTE_K: usize = 5;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);
pub const DEFAULT_FOLDS: usize = 10;

/// Where a row of a [`LabeledDataset`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOrigin {
    /// Index into the dataset the row was first built from.
    Original(usize),
    /// `base + lambda * (neighbor - base)`, both indices into the pre-SMOTE dataset.
    Synthetic { base: usize, neighbor: usize, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Subject id per row.
    pub groups: Vec<String>,
    pub class_names: Vec<String>,
    pub column_names: Vec<String>,
    /// Column indices of each one-hot group; SMOTE re-snaps these.
    pub indicator_groups: Vec<Vec<usize>>,
    pub origins: Vec<RowOrigin>,
}

impl LabeledDataset {
    pub fn new(
        x: Vec<Vec<f64>>,
        labels: Vec<usize>,
        groups: Vec<String>,
        class_names: Vec<String>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.len();
        if labels.len() != n || groups.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} rows, {} labels, {} groups",
                n,
                labels.len(),
                groups.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidData(format!("label {bad} out of range")));
        }
        if let Some(row) = x.iter().find(|r| r.len() != column_names.len()) {
            return Err(Error::DimensionMismatch {
                expected: column_names.len(),
                got: row.len(),
            });
        }
        Ok(Self {
            x,
            labels,
            groups,
            class_names,
            column_names,
            indicator_groups: Vec::new(),
            origins: (0..n).map(RowOrigin::Original).collect(),
        })
    }

    pub fn with_indicator_groups(mut self, groups: Vec<Vec<usize>>) -> Self {
        self.indicator_groups = groups;
        self
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows in the given order; origins are rebased onto the subset.
    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: rows.iter().map(|&i| self.x[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            groups: rows.iter().map(|&i| self.groups[i].clone()).collect(),
            class_names: self.class_names.clone(),
            column_names: self.column_names.clone(),
            indicator_groups: self.indicator_groups.clone(),
            origins: (0..rows.len()).map(RowOrigin::Original).collect(),
        }
    }

    /// Keeps only the listed feature columns.
    pub fn select_columns(&self, columns: &[usize]) -> LabeledDataset {
        let remap = |j: usize| columns.iter().position(|&c| c == j);
        LabeledDataset {
            x: self.x.iter().map(|r| columns.iter().map(|&j| r[j]).collect()).collect(),
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            class_names: self.class_names.clone(),
            column_names: columns.iter().map(|&j| self.column_names[j].clone()).collect(),
            indicator_groups: self
                .indicator_groups
                .iter()
                .map(|g| g.iter().filter_map(|&j| remap(j)).collect::<Vec<_>>())
                .filter(|g| !g.is_empty())
                .collect(),
            origins: self.origins.clone(),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest members (Euclidean) of `row`, excluding itself; ties break on index.
pub fn nearest_neighbors(x: &[Vec<f64>], members: &[usize], row: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = members
        .iter()
        .filter(|&&m| m != row)
        .map(|&m| (squared_distance(&x[row], &x[m]), m))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, m)| m).collect()
}

/// Synthetic minority oversampling up to the majority class count.
///
/// Every synthetic row lies on the segment between a minority row and one of
/// its `k` nearest same-class neighbors, and inherits the base row's group.
/// One-hot groups are re-snapped to their largest coordinate.
pub fn smote(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<LabeledDataset> {
    if k == 0 {
        return Err(Error::InvalidConfig("SMOTE k must be positive".into()));
    }
    let counts = dataset.class_counts();
    let majority = counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 || count == majority {
            continue;
        }
        if count < 2 {
            return Err(Error::TooFewMinoritySamples {
                class: dataset.class_names[class].clone(),
                count,
            });
        }
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        let neighbors: Vec<Vec<usize>> = members
            .iter()
            .map(|&m| nearest_neighbors(&dataset.x, &members, m, k))
            .collect();
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.shuffle(&mut rng);
        for s in 0..majority - count {
            let slot = order[s % members.len()];
            let base = members[slot];
            let neighbor = neighbors[slot][rng.random_range(0..neighbors[slot].len())];
            let lambda: f64 = rng.random();
            let mut row: Vec<f64> = dataset.x[base]
                .iter()
                .zip(&dataset.x[neighbor])
                .map(|(a, b)| a + lambda * (b - a))
                .collect();
            for group in &dataset.indicator_groups {
                snap_one_hot(&mut row, group);
            }
            out.x.push(row);
            out.labels.push(class);
            out.groups.push(dataset.groups[base].clone());
            out.origins.push(RowOrigin::Synthetic { base, neighbor, lambda });
        }
    }
    Ok(out)
}

fn snap_one_hot(row: &mut [f64], group: &[usize]) {
    let Some(&best) = group
        .iter()
        .max_by(|&&a, &&b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
    else {
        return;
    };
    for &j in group {
        row[j] = if j == best { 1.0 } else { 0.0 };
    }
}

/// Row ids per partition. Partitions are disjoint, cover every row and never
/// share a subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn distinct_groups(groups: &[String]) -> Vec<String> {
    groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

fn rows_of(groups: &[String], members: &BTreeSet<&str>) -> Vec<usize> {
    (0..groups.len()).filter(|&i| members.contains(groups[i].as_str())).collect()
}

/// Shuffles subjects by seed and assigns each to the partition furthest below
/// its row-count target.
pub fn grouped_split(groups: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<SplitPlan> {
    let ratios = [ratios.0, ratios.1, ratios.2];
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidConfig(format!("invalid split ratios {ratios:?}")));
    }
    let total_ratio: f64 = ratios.iter().sum();
    let mut order = distinct_groups(groups);
    let needed = ratios.iter().filter(|r| **r > 0.0).count();
    if order.len() < needed.max(3) {
        return Err(Error::TooFewGroups {
            found: order.len(),
            needed: needed.max(3),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = groups.len() as f64;
    let targets: Vec<f64> = ratios.iter().map(|r| r / total_ratio * n).collect();
    let mut filled = [0.0f64; 3];
    let mut members: [BTreeSet<&str>; 3] = Default::default();
    for (pos, group) in order.iter().enumerate() {
        let size = groups.iter().filter(|g| *g == group).count() as f64;
        let empty: Vec<usize> = (0..3).filter(|&p| ratios[p] > 0.0 && members[p].is_empty()).collect();
        let remaining = order.len() - pos;
        let part = if remaining <= empty.len() {
            empty[0]
        } else {
            (0..3)
                .filter(|&p| ratios[p] > 0.0)
                .max_by(|&a, &b| {
                    (targets[a] - filled[a])
                        .total_cmp(&(targets[b] - filled[b]))
                        .then(b.cmp(&a))
                })
                .expect("at least one positive ratio")
        };
        filled[part] += size;
        members[part].insert(group.as_str());
    }
    Ok(SplitPlan {
        seed,
        train: rows_of(groups, &members[0]),
        validation: rows_of(groups, &members[1]),
        test: rows_of(groups, &members[2]),
    })
}

/// Subject-grouped k-fold: fold `f` holds out every `f`-th shuffled subject as
/// its test partition; validation is left empty.
pub fn grouped_kfold(groups: &[String], folds: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    let mut order = distinct_groups(groups);
    if folds < 2 || order.len() < folds {
        return Err(Error::TooFewGroups {
            found: order.len(),
            needed: folds.max(2),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok((0..folds)
        .map(|f| {
            let held: BTreeSet<&str> = order.iter().skip(f).step_by(folds).map(String::as_str).collect();
            let test = rows_of(groups, &held);
            let train = (0..groups.len()).filter(|i| !held.contains(groups[*i].as_str())).collect();
            SplitPlan {
                seed,
                train,
                validation: Vec::new(),
                test,
            }
        })
        .collect())
}

/// For each fold, which classes appear in its held-out rows.
pub fn fold_class_presence(plans: &[SplitPlan], labels: &[usize], n_classes: usize) -> Vec<Vec<bool>> {
    plans
        .iter()
        .map(|p| {
            let mut present = vec![false; n_classes];
            for &i in &p.test {
                present[labels[i]] = true;
            }
            present
        })
        .collect()
}
