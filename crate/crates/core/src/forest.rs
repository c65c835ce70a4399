//! Random forest over the 35 similarity features.
//!
//! Trees are grown with one RNG stream per node, derived from the parent's
//! stream. A tree grown under a depth cap or a larger `min_split` is therefore
//! exactly the fully grown tree (same `min_leaf`) cut at the corresponding
//! nodes, and a forest of n trees is the first n trees of any larger forest
//! with the same seed. Grid search relies on both facts to share work.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::stats;

/// Feature columns in model order.
pub const FEATURE_NAMES: [&str; 35] = [
    "q_points_count",
    "k_points_count",
    "mean",
    "std",
    "0.1",
    "0.25",
    "0.5",
    "0.75",
    "0.9",
    "centroid_distance_n_clusters_20",
    "cluster_proportion_n_clusters_20",
    "iterations_k_n_clusters_20",
    "wcv_ratio_n_clusters_20",
    "centroid_distance_n_clusters_100",
    "cluster_proportion_n_clusters_100",
    "iterations_k_n_clusters_100",
    "wcv_ratio_n_clusters_100",
    "q_pct_threshold_1",
    "k_pct_threshold_1",
    "q_pct_threshold_2",
    "k_pct_threshold_2",
    "q_pct_threshold_3",
    "k_pct_threshold_3",
    "q_pct_threshold_5",
    "k_pct_threshold_5",
    "q_pct_threshold_10",
    "k_pct_threshold_10",
    "peak_value",
    "MSE",
    "SSIM",
    "NCC",
    "PSR",
    "jaccard_index_0",
    "jaccard_index_-1",
    "jaccard_index_-2",
];

/// Category indicator columns appended for the indicator variant of the full model.
pub const INDICATOR_NAMES: [&str; 3] = ["category_pristine", "category_blurry", "category_partial"];

pub const SCHEMA_VERSION: u32 = 1;

pub fn feature_columns() -> Vec<String> {
    FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn feature_columns_with_indicators() -> Vec<String> {
    FEATURE_NAMES.iter().chain(INDICATOR_NAMES.iter()).map(|s| s.to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_trees: usize,
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub min_split: usize,
    pub min_leaf: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { n_trees: 1000, max_depth: None, min_split: 2, min_leaf: 1 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 || self.min_split < 2 || self.max_depth == Some(0) {
            return Err(Error::InvalidArgument(format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<Option<usize>>,
    pub min_split: Vec<usize>,
    pub min_leaf: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            n_trees: vec![500, 1000, 2000, 5000],
            max_depth: vec![Some(10), Some(30), Some(50), None],
            min_split: vec![2, 5, 10],
            min_leaf: vec![1, 2, 4],
        }
    }
}

impl HyperGrid {
    /// Cartesian product, n_trees varying slowest and min_leaf fastest.
    pub fn points(&self) -> Vec<Hyperparams> {
        let mut out = Vec::with_capacity(self.len());
        for &n_trees in &self.n_trees {
            for &max_depth in &self.max_depth {
                for &min_split in &self.min_split {
                    for &min_leaf in &self.min_leaf {
                        out.push(Hyperparams { n_trees, max_depth, min_split, min_leaf });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.n_trees.len() * self.max_depth.len() * self.min_split.len() * self.min_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labeled row of the feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub pair_id: String,
    pub q_shoe_id: String,
    pub k_shoe_id: String,
    pub scenario: String,
    /// 1 mated, 0 non-mated.
    pub label: u8,
    /// NaN marks a missing (undefined) metric.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub records: Vec<FeatureRecord>,
}

const META_COLUMNS: [&str; 5] = ["label", "pair_id", "q_shoe_id", "k_shoe_id", "scenario"];

impl Dataset {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: FeatureRecord) -> Result<()> {
        if record.values.len() != self.columns.len() {
            return Err(Error::Schema(format!("row has {} values for {} columns", record.values.len(), self.columns.len())));
        }
        if record.label > 1 {
            return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {}", record.label)));
        }
        if record.values.iter().any(|v| v.is_infinite()) {
            return Err(Error::InvalidArgument(format!("non-finite feature in pair {}", record.pair_id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn subset(&self, keep: impl Fn(&FeatureRecord) -> bool) -> Dataset {
        Dataset { columns: self.columns.clone(), records: self.records.iter().filter(|r| keep(r)).cloned().collect() }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset { columns: self.columns.clone(), records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let Some(first) = parts.first() else {
            return Ok(Dataset::default());
        };
        let mut out = Dataset::new(first.columns.clone());
        for p in parts {
            if p.columns != out.columns {
                return Err(Error::Schema("datasets have different columns".into()));
            }
            out.records.extend(p.records.iter().cloned());
        }
        Ok(out)
    }

    /// Appends one-hot category columns computed from each record's scenario.
    pub fn with_indicators(&self, category_of: impl Fn(&str) -> Option<usize>) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        columns.extend(INDICATOR_NAMES.iter().map(|s| s.to_string()));
        let mut out = Dataset::new(columns);
        for r in &self.records {
            let cat = category_of(&r.scenario)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario {}", r.scenario)))?;
            let mut rec = r.clone();
            rec.values.extend((0..INDICATOR_NAMES.len()).map(|i| (i == cat) as u8 as f64));
            out.records.push(rec);
        }
        Ok(out)
    }

    /// CSV with the feature columns followed by the metadata columns. Missing
    /// values are written as empty fields.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<&str> = self.columns.iter().map(String::as_str).chain(META_COLUMNS).collect();
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> =
                r.values.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v}") }).collect();
            row.push(r.label.to_string());
            row.extend([r.pair_id.clone(), r.q_shoe_id.clone(), r.k_shoe_id.clone(), r.scenario.clone()]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(reader: impl Read) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| {
            header.iter().position(|h| h == name).ok_or_else(|| Error::Schema(format!("missing column {name}")))
        };
        let meta: Vec<usize> = META_COLUMNS.iter().map(|m| find(m)).collect::<Result<_>>()?;
        let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !meta.contains(i)).collect();
        let mut ds = Dataset::new(feature_idx.iter().map(|&i| header[i].clone()).collect());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let values = feature_idx
                .iter()
                .map(|&i| {
                    let s = field(i).trim();
                    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
                        Ok(f64::NAN)
                    } else {
                        s.parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad number {s:?}", line + 1)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let label = field(meta[0])
                .trim()
                .parse::<u8>()
                .map_err(|_| Error::Format(format!("row {}: bad label", line + 1)))?;
            ds.push(FeatureRecord {
                label,
                pair_id: field(meta[1]).to_string(),
                q_shoe_id: field(meta[2]).to_string(),
                k_shoe_id: field(meta[3]).to_string(),
                scenario: field(meta[4]).to_string(),
                values,
            })?;
        }
        Ok(ds)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Per-column training medians used to fill missing values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    medians: Option<Vec<f64>>,
}

impl Imputer {
    /// Medians over the finite values of each column. A column with no finite
    /// value gets median 0.
    pub fn fit(columns: &[String], rows: &[&[f64]]) -> Imputer {
        let medians = (0..columns.len())
            .map(|j| match stats::median_finite(rows.iter().map(|r| r[j])) {
                Some(m) => m,
                None => {
                    log::warn!("column {} has no values in training data; imputing 0", columns[j]);
                    0.0
                }
            })
            .collect();
        Imputer { medians: Some(medians) }
    }

    pub fn from_medians(medians: Vec<f64>) -> Imputer {
        Imputer { medians: Some(medians) }
    }

    pub fn medians(&self) -> Option<&[f64]> {
        self.medians.as_deref()
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        let m = self.medians.as_ref().ok_or_else(|| Error::State("imputer has not been fitted".into()))?;
        if m.len() != row.len() {
            return Err(Error::Schema(format!("expected {} values, got {}", m.len(), row.len())));
        }
        Ok(row.iter().zip(m).map(|(v, m)| if v.is_nan() { *m } else { *v }).collect())
    }
}

/// Flat tree storage. Leaves have `feature == -1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Fraction of mated samples reaching the node.
    pub value: Vec<f64>,
    /// Bootstrap samples (with multiplicity) reaching the node.
    pub n_samples: Vec<u32>,
}

impl Tree {
    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        while self.feature[i] >= 0 {
            i = if row[self.feature[i] as usize] <= self.threshold[i] { self.left[i] } else { self.right[i] } as usize;
        }
        self.value[i]
    }

    /// Prediction of the same tree had it been grown under a depth cap and a
    /// (not smaller) `min_split`.
    pub fn predict_capped(&self, row: &[f64], max_depth: Option<usize>, min_split: usize) -> f64 {
        let mut i = 0;
        let mut depth = 0;
        while self.feature[i] >= 0 && Some(depth) != max_depth && self.n_samples[i] as usize >= min_split {
            i = if row[self.feature[i] as usize] <= self.threshold[i] { self.left[i] } else { self.right[i] } as usize;
            depth += 1;
        }
        self.value[i]
    }

    fn push_leaf(&mut self, value: f64, n: usize) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.n_samples.push(n as u32);
        self.feature.len() - 1
    }
}

struct Grower<'a> {
    /// Column-major imputed features.
    x: &'a [Vec<f64>],
    y: &'a [u8],
    params: Hyperparams,
    mtry: usize,
    n_root: f64,
    tree: Tree,
    importance: Vec<f64>,
    scratch: Vec<(f64, u8)>,
}

struct Split {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

fn gini(n: f64, pos: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

impl Grower<'_> {
    fn best_split(&mut self, samples: &[usize], node_seed: u64, parent_imp: f64) -> Option<Split> {
        let n = samples.len();
        let pos_total = samples.iter().filter(|&&i| self.y[i] == 1).count();
        let mut order: Vec<usize> = (0..self.x.len()).collect();
        order.shuffle(&mut seed::rng(node_seed));
        let min_leaf = self.params.min_leaf;
        let mut best: Option<Split> = None;
        let mut visited = 0;
        for &f in &order {
            if visited == self.mtry {
                break;
            }
            let col = &self.x[f];
            self.scratch.clear();
            self.scratch.extend(samples.iter().map(|&i| (col[i], self.y[i])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            if self.scratch[0].0 == self.scratch[n - 1].0 {
                continue;
            }
            visited += 1;
            let mut left_pos = 0usize;
            for k in 0..n - 1 {
                left_pos += self.scratch[k].1 as usize;
                let nl = k + 1;
                let nr = n - nl;
                if self.scratch[k].0 == self.scratch[k + 1].0 || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right_pos = pos_total - left_pos;
                let child = (nl as f64 * gini(nl as f64, left_pos as f64) + nr as f64 * gini(nr as f64, right_pos as f64))
                    / n as f64;
                let decrease = parent_imp - child;
                if best.as_ref().map_or(true, |b| decrease > b.decrease) {
                    let (a, b) = (self.scratch[k].0, self.scratch[k + 1].0);
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid < b { mid } else { a };
                    best = Some(Split { feature: f, threshold, decrease });
                }
            }
        }
        best
    }

    fn grow(&mut self, samples: &mut [usize], depth: usize, node_seed: u64) -> usize {
        let n = samples.len();
        let pos = samples.iter().filter(|&&i| self.y[i] == 1).count();
        let value = pos as f64 / n as f64;
        let imp = gini(n as f64, pos as f64);
        let node = self.tree.push_leaf(value, n);
        if imp == 0.0
            || n < self.params.min_split
            || n < 2 * self.params.min_leaf
            || self.params.max_depth.is_some_and(|d| depth >= d)
        {
            return node;
        }
        let Some(split) = self.best_split(samples, node_seed, imp) else {
            return node;
        };
        let col = &self.x[split.feature];
        let mut mid = 0;
        for k in 0..n {
            if col[samples[k]] <= split.threshold {
                samples.swap(k, mid);
                mid += 1;
            }
        }
        self.importance[split.feature] += n as f64 / self.n_root * split.decrease;
        self.tree.feature[node] = split.feature as i32;
        self.tree.threshold[node] = split.threshold;
        let (ls, rs) = samples.split_at_mut(mid);
        let l = self.grow(ls, depth + 1, seed::derive(node_seed, 1));
        let r = self.grow(rs, depth + 1, seed::derive(node_seed, 2));
        self.tree.left[node] = l as u32;
        self.tree.right[node] = r as u32;
        node
    }
}

struct GrownTree {
    tree: Tree,
    importance: Vec<f64>,
    in_bag: Vec<bool>,
}

fn grow_tree(x: &[Vec<f64>], y: &[u8], params: Hyperparams, tree_seed: u64) -> GrownTree {
    let n = y.len();
    let mut rng = seed::rng(tree_seed);
    let mut samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut in_bag = vec![false; n];
    for &i in &samples {
        in_bag[i] = true;
    }
    let root_seed = rng.next_u64();
    let p = x.len();
    let mut g = Grower {
        x,
        y,
        params,
        mtry: (p as f64).sqrt().ceil() as usize,
        n_root: n as f64,
        tree: Tree::default(),
        importance: vec![0.0; p],
        scratch: Vec::with_capacity(n),
    };
    g.grow(&mut samples, 0, root_seed);
    GrownTree { tree: g.tree, importance: g.importance, in_bag }
}

fn to_columns(rows: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

fn check_labels(y: &[u8]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub schema_version: u32,
    pub columns: Vec<String>,
    pub hyperparams: Hyperparams,
    pub medians: Vec<f64>,
    pub trees: Vec<Tree>,
    pub importances: Vec<f64>,
    pub seed: u64,
    pub indicator_columns: bool,
    pub oob_accuracy: Option<f64>,
}

/// Trains a forest. Missing values are filled with training medians first.
pub fn train(data: &Dataset, params: Hyperparams, seed_value: u64) -> Result<ForestModel> {
    params.validate()?;
    let y = data.labels();
    check_labels(&y)?;
    let raw: Vec<&[f64]> = data.records.iter().map(|r| r.values.as_slice()).collect();
    let imputer = Imputer::fit(&data.columns, &raw);
    let rows: Vec<Vec<f64>> = raw.iter().map(|r| imputer.transform(r)).collect::<Result<_>>()?;
    let x = to_columns(&rows, data.columns.len());

    let grown: Vec<GrownTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| grow_tree(&x, &y, params, seed::derive(seed_value, t as u64)))
        .collect();

    let p = data.columns.len();
    let mut importances = vec![0.0; p];
    let mut oob_sum = vec![0.0; y.len()];
    let mut oob_n = vec![0usize; y.len()];
    for g in &grown {
        let total: f64 = g.importance.iter().sum();
        if total > 0.0 {
            for (acc, v) in importances.iter_mut().zip(&g.importance) {
                *acc += v / total;
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if !g.in_bag[i] {
                oob_sum[i] += g.tree.predict(row);
                oob_n[i] += 1;
            }
        }
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }
    let scored: Vec<bool> = (0..y.len())
        .filter(|&i| oob_n[i] > 0)
        .map(|i| ((oob_sum[i] / oob_n[i] as f64) >= 0.5) == (y[i] == 1))
        .collect();
    let oob_accuracy = (!scored.is_empty()).then(|| scored.iter().filter(|&&c| c).count() as f64 / scored.len() as f64);

    Ok(ForestModel {
        schema_version: SCHEMA_VERSION,
        indicator_columns: data.columns.iter().any(|c| INDICATOR_NAMES.contains(&c.as_str())),
        columns: data.columns.clone(),
        hyperparams: params,
        medians: imputer.medians().unwrap().to_vec(),
        trees: grown.into_iter().map(|g| g.tree).collect(),
        importances,
        seed: seed_value,
        oob_accuracy,
    })
}

/// Posterior threshold at or above which a pair is called mated.
pub const DECISION_THRESHOLD: f64 = 0.5;

impl ForestModel {
    pub fn check_columns(&self, columns: &[String]) -> Result<()> {
        if columns != self.columns.as_slice() {
            return Err(Error::Schema(format!(
                "columns do not match the model ({} given, {} expected)",
                columns.len(),
                self.columns.len()
            )));
        }
        Ok(())
    }

    /// Fills missing entries with the stored training medians.
    pub fn handle_missing(&self, row: &[f64]) -> Result<Vec<f64>> {
        Imputer::from_medians(self.medians.clone()).transform(row)
    }

    /// Mean of the per-tree leaf mated fractions.
    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        let row = self.handle_missing(row)?;
        Ok(self.trees.iter().map(|t| t.predict(&row)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn predict(&self, columns: &[String], row: &[f64]) -> Result<f64> {
        self.check_columns(columns)?;
        self.predict_row(row)
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_columns(&data.columns)?;
        data.records.par_iter().map(|r| self.predict_row(&r.values)).collect()
    }

    pub fn importances_named(&self) -> Vec<(String, f64)> {
        self.columns.iter().cloned().zip(self.importances.iter().copied()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ForestModel = serde_json::from_str(s)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported model schema version {}", m.schema_version)));
        }
        if m.medians.len() != m.columns.len() || m.importances.len() != m.columns.len() || m.trees.is_empty() {
            return Err(Error::Schema("model arrays are inconsistent".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Assigns each group to one of `k` folds so that class counts stay balanced
/// and no group spans two folds. Returns the fold of every row.
pub fn grouped_stratified_folds(labels: &[u8], groups: &[String], k: usize, seed_value: u64) -> Vec<usize> {
    let mut by_group: BTreeMap<&str, (usize, usize, Vec<usize>)> = BTreeMap::new();
    for (i, (g, &y)) in groups.iter().zip(labels).enumerate() {
        let e = by_group.entry(g.as_str()).or_default();
        if y == 1 {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
        e.2.push(i);
    }
    let mut entries: Vec<_> = by_group.into_values().collect();
    entries.shuffle(&mut seed::rng(seed_value));
    entries.sort_by_key(|e| std::cmp::Reverse(e.2.len()));
    let total_pos = labels.iter().filter(|&&y| y == 1).count().max(1) as f64;
    let total_neg = (labels.len() - labels.iter().filter(|&&y| y == 1).count()).max(1) as f64;
    let mut fold_pos = vec![0usize; k];
    let mut fold_neg = vec![0usize; k];
    let mut out = vec![0usize; labels.len()];
    for (gp, gn, rows) in entries {
        let cost = |f: usize| {
            let p = (fold_pos[f] + gp) as f64 / total_pos;
            let n = (fold_neg[f] + gn) as f64 / total_neg;
            p * p + n * n
        };
        let mut best = 0;
        for f in 1..k {
            if cost(f) < cost(best) {
                best = f;
            }
        }
        fold_pos[best] += gp;
        fold_neg[best] += gn;
        for r in rows {
            out[r] = best;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub params: Hyperparams,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: Hyperparams,
    pub best_accuracy: f64,
    pub table: Vec<CvRow>,
}

fn depth_rank(d: Option<usize>) -> usize {
    d.unwrap_or(usize::MAX)
}

/// Grouped, stratified k-fold cross-validation over every grid point. Rows are
/// grouped by `q_shoe_id`. The best point maximizes mean accuracy; ties go to
/// fewer trees, then shallower depth, then grid order.
pub fn grid_search_cv(data: &Dataset, grid: &HyperGrid, folds: usize, seed_value: u64) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let points = grid.points();
    for p in &points {
        p.validate()?;
    }
    let y = data.labels();
    check_labels(&y)?;
    let pos = y.iter().filter(|&&v| v == 1).count();
    if folds < 2 || pos < folds || y.len() - pos < folds {
        return Err(Error::InvalidArgument(format!("need at least {folds} rows per class and folds >= 2")));
    }
    let groups: Vec<String> = data.records.iter().map(|r| r.q_shoe_id.clone()).collect();
    let assignment = grouped_stratified_folds(&y, &groups, folds, seed_value);
    let max_trees = *grid.n_trees.iter().max().unwrap();
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    for fold in 0..folds {
        let train_idx: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] != fold).collect();
        let test_idx: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] == fold).collect();
        let train_y: Vec<u8> = train_idx.iter().map(|&i| y[i]).collect();
        check_labels(&train_y)?;
        let raw: Vec<&[f64]> = train_idx.iter().map(|&i| data.records[i].values.as_slice()).collect();
        let imputer = Imputer::fit(&data.columns, &raw);
        let train_rows: Vec<Vec<f64>> = raw.iter().map(|r| imputer.transform(r)).collect::<Result<_>>()?;
        let test_rows: Vec<Vec<f64>> =
            test_idx.iter().map(|&i| imputer.transform(&data.records[i].values)).collect::<Result<_>>()?;
        let x = to_columns(&train_rows, data.columns.len());
        let fold_seed = seed::derive(seed_value, fold as u64);

        for &min_leaf in &grid.min_leaf {
            let full = Hyperparams { n_trees: max_trees, max_depth: None, min_split: 2, min_leaf };
            let trees: Vec<Tree> = (0..max_trees)
                .into_par_iter()
                .map(|t| grow_tree(&x, &train_y, full, seed::derive(fold_seed, t as u64)).tree)
                .collect();
            for (pi, p) in points.iter().enumerate() {
                if p.min_leaf != min_leaf {
                    continue;
                }
                let correct = test_rows
                    .iter()
                    .zip(&test_idx)
                    .filter(|(row, &i)| {
                        let s: f64 = trees[..p.n_trees].iter().map(|t| t.predict_capped(row, p.max_depth, p.min_split)).sum();
                        (s / p.n_trees as f64 >= DECISION_THRESHOLD) == (y[i] == 1)
                    })
                    .count();
                let a = if test_idx.is_empty() { 0.0 } else { correct as f64 / test_idx.len() as f64 };
                acc.entry(pi).or_default().push(a);
            }
        }
    }

    let table: Vec<CvRow> = points
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let f = acc.remove(&pi).unwrap_or_default();
            CvRow { params: *p, mean_accuracy: stats::mean(&f), fold_accuracies: f }
        })
        .collect();
    let mut best = 0;
    for (i, row) in table.iter().enumerate().skip(1) {
        let b = &table[best];
        let better = row.mean_accuracy > b.mean_accuracy
            || (row.mean_accuracy == b.mean_accuracy
                && (row.params.n_trees, depth_rank(row.params.max_depth)) < (b.params.n_trees, depth_rank(b.params.max_depth)));
        if better {
            best = i;
        }
    }
    Ok(GridSearchResult { best: table[best].params, best_accuracy: table[best].mean_accuracy, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(rows: Vec<(Vec<f64>, u8)>, groups: bool) -> Dataset {
        let p = rows[0].0.len();
        let mut d = Dataset::new((0..p).map(|i| format!("f{i}")).collect());
        for (i, (values, label)) in rows.into_iter().enumerate() {
            let g = if groups { format!("g{}", i / 2) } else { format!("g{i}") };
            d.push(FeatureRecord {
                pair_id: format!("p{i}"),
                q_shoe_id: g.clone(),
                k_shoe_id: g,
                scenario: "PristineAN".into(),
                label,
                values,
            })
            .unwrap();
        }
        d
    }

    fn separable(n: usize, s: u64) -> Dataset {
        let mut rng = seed::rng(s);
        dataset(
            (0..n)
                .map(|_| {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    let b: f64 = rng.random_range(-1.0..1.0);
                    (vec![a, b], (a + b > 0.0) as u8)
                })
                .collect(),
            true,
        )
    }

    #[test]
    fn feature_names_and_grid_size() {
        assert_eq!(FEATURE_NAMES.len(), 35);
        assert_eq!(HyperGrid::default().len(), 144);
        assert_eq!(HyperGrid::default().points().len(), 144);
        assert_eq!(Hyperparams::default(), Hyperparams { n_trees: 1000, max_depth: None, min_split: 2, min_leaf: 1 });
    }

    #[test]
    fn separable_oob_accuracy() {
        let d = separable(200, 1);
        let m = train(&d, Hyperparams { n_trees: 200, ..Default::default() }, 3).unwrap();
        assert!(m.oob_accuracy.unwrap() >= 0.95, "{:?}", m.oob_accuracy);
        assert!((m.importances.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_class_is_rejected() {
        let d = dataset(vec![(vec![1.0], 1), (vec![2.0], 1)], false);
        assert!(matches!(train(&d, Hyperparams::default(), 0), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn single_tree_memorizes_training_points() {
        let d = separable(60, 2);
        let m = train(&d, Hyperparams { n_trees: 1, ..Default::default() }, 0).unwrap();
        // Points outside the bootstrap can land anywhere; in-bag points are
        // memorized because leaves are grown pure.
        let tree = &m.trees[0];
        let leaves = tree.value.iter().zip(&tree.feature).filter(|(_, &f)| f < 0);
        assert!(leaves.clone().all(|(v, _)| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn posterior_is_mean_of_tree_votes() {
        let mut m = train(&separable(40, 3), Hyperparams { n_trees: 2, ..Default::default() }, 0).unwrap();
        let leaf = |v: f64| Tree { feature: vec![-1], threshold: vec![0.0], left: vec![0], right: vec![0], value: vec![v], n_samples: vec![1] };
        m.trees = vec![leaf(1.0), leaf(0.0)];
        assert_eq!(m.predict_row(&[0.0, 0.0]).unwrap(), 0.5);
        m.trees = vec![leaf(1.0), leaf(1.0)];
        assert_eq!(m.predict_row(&[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn capped_prediction_matches_direct_training() {
        let d = separable(120, 4);
        let y = d.labels();
        let rows: Vec<Vec<f64>> = d.records.iter().map(|r| r.values.clone()).collect();
        let x = to_columns(&rows, 2);
        for (depth, min_split) in [(Some(2), 2), (Some(4), 10), (None, 5)] {
            let capped = Hyperparams { n_trees: 1, max_depth: depth, min_split, min_leaf: 2 };
            let full = Hyperparams { n_trees: 1, max_depth: None, min_split: 2, min_leaf: 2 };
            let a = grow_tree(&x, &y, capped, 77).tree;
            let b = grow_tree(&x, &y, full, 77).tree;
            for row in &rows {
                assert_eq!(a.predict(row), b.predict_capped(row, depth, min_split));
            }
        }
    }

    #[test]
    fn planted_signal_dominates_importance() {
        let mut rng = seed::rng(5);
        let rows = (0..300)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                let label = (v[1] > 0.5) as u8;
                (v, label)
            })
            .collect();
        let m = train(&dataset(rows, false), Hyperparams { n_trees: 100, ..Default::default() }, 1).unwrap();
        assert!(m.importances[1] > 0.9, "{:?}", m.importances);
    }

    #[test]
    fn imputer_behaviour() {
        let cols = vec!["a".to_string(), "PSR".to_string()];
        let r1 = [1.0, 4.0];
        let r2 = [3.0, 4.4];
        let r3 = [f64::NAN, f64::NAN];
        let imp = Imputer::fit(&cols, &[&r1, &r2, &r3]);
        assert_eq!(imp.transform(&[5.0, f64::NAN]).unwrap(), vec![5.0, 4.2]);
        assert_eq!(imp.transform(&[5.0, 6.0]).unwrap(), vec![5.0, 6.0]);
        let empty = Imputer::fit(&cols, &[&r3]);
        assert_eq!(empty.medians().unwrap(), &[0.0, 0.0]);
        assert!(matches!(Imputer::default().transform(&r1), Err(Error::State(_))));
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let m = train(&separable(40, 6), Hyperparams { n_trees: 3, ..Default::default() }, 0).unwrap();
        assert!(matches!(m.predict(&["x".to_string(), "y".to_string()], &[0.0, 0.0]), Err(Error::Schema(_))));
    }

    #[test]
    fn folds_keep_groups_together() {
        let d = separable(100, 7);
        let y = d.labels();
        let g: Vec<String> = d.records.iter().map(|r| r.q_shoe_id.clone()).collect();
        let f = grouped_stratified_folds(&y, &g, 5, 0);
        for i in 0..y.len() {
            for j in 0..y.len() {
                if g[i] == g[j] {
                    assert_eq!(f[i], f[j]);
                }
            }
        }
        for k in 0..5 {
            assert!(f.iter().filter(|&&x| x == k).count() >= 10);
        }
    }

    #[test]
    fn small_grid_search_picks_fewest_trees_on_ties() {
        let d = separable(100, 8);
        let grid = HyperGrid { n_trees: vec![5, 10], max_depth: vec![Some(3), None], min_split: vec![2], min_leaf: vec![1] };
        let r = grid_search_cv(&d, &grid, 5, 0).unwrap();
        assert_eq!(r.table.len(), 4);
        let best = r.table.iter().map(|t| t.mean_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(r.best_accuracy, best);
        let first_best = r.table.iter().filter(|t| t.mean_accuracy == best).min_by_key(|t| (t.params.n_trees, depth_rank(t.params.max_depth))).unwrap();
        assert_eq!(r.best, first_best.params);
    }

    #[test]
    fn csv_round_trip_keeps_missing() {
        let mut d = separable(5, 9);
        d.records[0].values[1] = f64::NAN;
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.columns, d.columns);
        assert!(back.records[0].values[1].is_nan());
        assert_eq!(back.records[1], d.records[1]);
    }
}
