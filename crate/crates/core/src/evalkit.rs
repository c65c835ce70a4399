//! Scenario pairs, shoe-level splits, model evaluation and distribution-shift
//! analysis.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{self, Dataset, FeatureRecord, ForestModel, Hyperparams, DECISION_THRESHOLD, FEATURE_NAMES};
use crate::imgproc::{self, GrayImage};
use crate::pipeline::{self, PipelineConfig, PreparedPrint, PrintOptions};
use crate::pointcloud::{Foot, Region};
use crate::seed;
use crate::stats;

/// One scanned print in a registry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShoeRecord {
    /// Identifies a pair of shoes; the two feet share it.
    pub shoe_id: String,
    pub person_id: String,
    pub model: String,
    pub size: String,
    pub foot: Foot,
    pub visit: u8,
    pub blur_level: u8,
    pub replicate: u32,
    pub image_path: String,
}

pub const BLUR_LEVELS: [u8; 6] = [0, 2, 4, 6, 8, 10];

impl ShoeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.shoe_id.is_empty() || self.person_id.is_empty() || self.model.is_empty() || self.size.is_empty() {
            return Err(Error::Format(format!("record with empty identifier: {self:?}")));
        }
        if !(1..=3).contains(&self.visit) {
            return Err(Error::Format(format!("visit must be 1..=3, got {}", self.visit)));
        }
        if !BLUR_LEVELS.contains(&self.blur_level) {
            return Err(Error::Format(format!("unsupported blur level {}", self.blur_level)));
        }
        Ok(())
    }

    fn class_key(&self) -> (&str, &str) {
        (&self.model, &self.size)
    }
}

pub fn read_registry(path: impl AsRef<Path>) -> Result<Vec<ShoeRecord>> {
    read_registry_from(std::fs::File::open(path)?)
}

pub fn read_registry_from(reader: impl std::io::Read) -> Result<Vec<ShoeRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let r: ShoeRecord = rec?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_registry(path: impl AsRef<Path>, records: &[ShoeRecord]) -> Result<()> {
    write_registry_to(std::fs::File::create(path)?, records)
}

pub fn write_registry_to(writer: impl std::io::Write, records: &[ShoeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    PristineAN,
    PartialToe,
    PartialHeel,
    PartialInside,
    PartialOutside,
    PristineTime2,
    PristineTime3,
    Blurry02,
    Blurry04,
    Blurry06,
    Blurry08,
    Blurry10,
    Pristine150,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Pristine,
    Blurry,
    Partial,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Pristine, Category::Blurry, Category::Partial];

    /// Position in the indicator columns.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl Scenario {
    pub const ALL: [Scenario; 13] = [
        Scenario::PristineAN,
        Scenario::PartialToe,
        Scenario::PartialHeel,
        Scenario::PartialInside,
        Scenario::PartialOutside,
        Scenario::PristineTime2,
        Scenario::PristineTime3,
        Scenario::Blurry02,
        Scenario::Blurry04,
        Scenario::Blurry06,
        Scenario::Blurry08,
        Scenario::Blurry10,
        Scenario::Pristine150,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::PristineAN => "PristineAN",
            Scenario::PartialToe => "PartialToe",
            Scenario::PartialHeel => "PartialHeel",
            Scenario::PartialInside => "PartialInside",
            Scenario::PartialOutside => "PartialOutside",
            Scenario::PristineTime2 => "PristineTime2",
            Scenario::PristineTime3 => "PristineTime3",
            Scenario::Blurry02 => "Blurry02",
            Scenario::Blurry04 => "Blurry04",
            Scenario::Blurry06 => "Blurry06",
            Scenario::Blurry08 => "Blurry08",
            Scenario::Blurry10 => "Blurry10",
            Scenario::Pristine150 => "Pristine150",
        }
    }

    pub fn category(self) -> Category {
        match self {
            Scenario::PristineAN | Scenario::PristineTime2 | Scenario::PristineTime3 | Scenario::Pristine150 => {
                Category::Pristine
            }
            Scenario::Blurry02 | Scenario::Blurry04 | Scenario::Blurry06 | Scenario::Blurry08 | Scenario::Blurry10 => {
                Category::Blurry
            }
            _ => Category::Partial,
        }
    }

    pub fn blur_level(self) -> Option<u8> {
        match self {
            Scenario::Blurry02 => Some(2),
            Scenario::Blurry04 => Some(4),
            Scenario::Blurry06 => Some(6),
            Scenario::Blurry08 => Some(8),
            Scenario::Blurry10 => Some(10),
            _ => None,
        }
    }

    pub fn partial_region(self) -> Option<Region> {
        match self {
            Scenario::PartialToe => Some(Region::Toe),
            Scenario::PartialHeel => Some(Region::Heel),
            Scenario::PartialInside => Some(Region::Inside),
            Scenario::PartialOutside => Some(Region::Outside),
            _ => None,
        }
    }

    pub fn visit(self) -> Option<u8> {
        match self {
            Scenario::PristineTime2 => Some(2),
            Scenario::PristineTime3 => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|sc| sc.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

/// Category index of a scenario name, for indicator columns.
pub fn category_of_name(s: &str) -> Option<usize> {
    Scenario::from_str(s).ok().map(|sc| sc.category().index())
}

/// One print of a pair: the registry row plus preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrintRef {
    pub record: usize,
    pub opts: PrintOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub pair_id: String,
    pub scenario: Scenario,
    /// 1 mated, 0 non-mated.
    pub label: u8,
    pub q: PrintRef,
    pub k: PrintRef,
    pub q_shoe_id: String,
    pub k_shoe_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPairSet {
    pub scenario: Scenario,
    pub split: Split,
    pub mated: Vec<Pair>,
    pub non_mated: Vec<Pair>,
}

impl ScenarioPairSet {
    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.mated.iter().chain(self.non_mated.iter())
    }

    pub fn len(&self) -> usize {
        self.mated.len() + self.non_mated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shoes whose (model, size) class contains a single shoe pair. They cannot
/// supply same-class non-mates and form the Pristine-150 population.
pub fn singleton_class_shoes(records: &[ShoeRecord]) -> BTreeSet<String> {
    let mut by_class: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_key()).or_default().insert(&r.shoe_id);
    }
    by_class.values().filter(|s| s.len() == 1).flat_map(|s| s.iter().map(|x| x.to_string())).collect()
}

fn cut_opts(region: Option<Region>, foot: Foot) -> PrintOptions {
    PrintOptions { cut: region.map(|r| (r, foot)), reflect: false }
}

/// Builds the mated and non-mated pairs of one scenario from the records
/// whose indices are listed in `allowed` (one split). `pristine150` lists the
/// shoes that belong to the Pristine-150 population; every other shoe belongs
/// to the longitudinal population.
pub fn build_pairs(
    records: &[ShoeRecord],
    allowed: &[usize],
    scenario: Scenario,
    split: Split,
    pristine150: &BTreeSet<String>,
    seed_value: u64,
) -> Result<ScenarioPairSet> {
    let mut rng = seed::rng(seed::derive_str(seed_value, scenario.name()));
    let in_150 = |i: &usize| pristine150.contains(&records[*i].shoe_id);
    let pool: Vec<usize> = if scenario == Scenario::Pristine150 {
        allowed.iter().copied().filter(in_150).collect()
    } else {
        allowed.iter().copied().filter(|i| !in_150(i)).collect()
    };
    let pick = |f: &dyn Fn(&ShoeRecord) -> bool| -> Vec<usize> {
        let mut v: Vec<usize> = pool.iter().copied().filter(|&i| f(&records[i])).collect();
        v.sort_by(|&a, &b| {
            let (x, y) = (&records[a], &records[b]);
            (&x.shoe_id, x.foot, x.visit, x.blur_level, x.replicate).cmp(&(&y.shoe_id, y.foot, y.visit, y.blur_level, y.replicate))
        });
        v
    };

    // (Q record, K record) candidates for mated pairs, grouped per (shoe, foot).
    let (q_set, k_set): (Vec<usize>, Vec<usize>) = match scenario {
        Scenario::PristineTime2 | Scenario::PristineTime3 => {
            let v = scenario.visit().unwrap();
            (pick(&|r| r.visit == 1 && r.blur_level == 0), pick(&|r| r.visit == v && r.blur_level == 0))
        }
        _ if scenario.blur_level().is_some() => {
            let b = scenario.blur_level().unwrap();
            (pick(&|r| r.visit == 1 && r.blur_level == b), pick(&|r| r.visit == 1 && r.blur_level == 0))
        }
        _ => {
            let base = pick(&|r| r.visit == 1 && r.blur_level == 0);
            (base.clone(), base)
        }
    };
    let same_print_set = scenario.visit().is_none() && scenario.blur_level().is_none();
    let q_opts = |i: usize| cut_opts(scenario.partial_region(), records[i].foot);

    let mut mated = Vec::new();
    for &qi in &q_set {
        for &ki in &k_set {
            let (q, k) = (&records[qi], &records[ki]);
            if q.shoe_id != k.shoe_id || q.foot != k.foot {
                continue;
            }
            if same_print_set && q.replicate >= k.replicate {
                continue;
            }
            mated.push((qi, ki));
        }
    }

    let mut out = ScenarioPairSet { scenario, split, mated: Vec::new(), non_mated: Vec::new() };
    for (n, &(qi, ki)) in mated.iter().enumerate() {
        let q = &records[qi];
        out.mated.push(Pair {
            pair_id: format!("{}-{}-KM{n}", scenario.name(), split_name(split)),
            scenario,
            label: 1,
            q: PrintRef { record: qi, opts: q_opts(qi) },
            k: PrintRef { record: ki, opts: PrintOptions::default() },
            q_shoe_id: q.shoe_id.clone(),
            k_shoe_id: records[ki].shoe_id.clone(),
        });

        let (kn, reflect) = if scenario == Scenario::Pristine150 {
            let cands: Vec<usize> = k_set
                .iter()
                .copied()
                .filter(|&j| records[j].shoe_id == q.shoe_id && records[j].foot == q.foot.other())
                .collect();
            (cands, true)
        } else {
            let cands: Vec<usize> = k_set
                .iter()
                .copied()
                .filter(|&j| {
                    let r = &records[j];
                    r.shoe_id != q.shoe_id && r.class_key() == q.class_key() && r.foot == q.foot
                })
                .collect();
            (cands, false)
        };
        let Some(&kj) = kn.choose(&mut rng) else {
            let clause = if reflect {
                "Pristine150 non-mate needs the other foot of the same shoe"
            } else {
                "non-mate needs a different shoe with the same model, size and foot"
            };
            return Err(Error::Pairing(format!("{} ({}): no candidate for {} {}: {clause}", scenario, split_name(split), q.shoe_id, q.foot.as_str())));
        };
        out.non_mated.push(Pair {
            pair_id: format!("{}-{}-KNM{n}", scenario.name(), split_name(split)),
            scenario,
            label: 0,
            q: PrintRef { record: qi, opts: q_opts(qi) },
            k: PrintRef { record: kj, opts: PrintOptions { cut: None, reflect } },
            q_shoe_id: q.shoe_id.clone(),
            k_shoe_id: records[kj].shoe_id.clone(),
        });
    }
    Ok(out)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Random shoe-level partition. Returns (train shoe ids, test shoe ids), each sorted.
pub fn split_by_shoe(shoe_ids: &[String], train_fraction: f64, seed_value: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = shoe_ids.iter().collect::<BTreeSet<_>>().len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two shoes to split".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument("train fraction must lie in (0, 1)".into()));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    Ok(split_counted(shoe_ids, n_train, seed_value))
}

fn split_counted(shoe_ids: &[String], n_train: usize, seed_value: u64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = shoe_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut seed::rng(seed_value));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort();
    test.sort();
    (train, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Undefined when the test set holds one class only.
    pub auc: Option<f64>,
    pub optimal_threshold: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied scores count half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if labels[t] == 1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    Some((rank_sum - (n1 * (n1 + 1)) as f64 / 2.0) / (n1 as f64 * n0 as f64))
}

/// Threshold maximizing sensitivity + specificity − 1 over the observed
/// scores (a score at or above the threshold is called mated). Ties go to the
/// higher threshold. Returns (threshold, sensitivity, specificity).
pub fn youden(scores: &[f64], labels: &[u8]) -> Option<(f64, f64, f64)> {
    let n1 = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n0 = labels.len() as f64 - n1;
    if n1 == 0.0 || n0 == 0.0 {
        return None;
    }
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for t in cands {
        let tp = scores.iter().zip(labels).filter(|(s, &l)| **s >= t && l == 1).count() as f64;
        let tn = scores.iter().zip(labels).filter(|(s, &l)| **s < t && l == 0).count() as f64;
        let (sens, spec) = (tp / n1, tn / n0);
        let j = sens + spec - 1.0;
        if best.is_none_or(|b| j > b.0) {
            best = Some((j, t, sens, spec));
        }
    }
    best.map(|(_, t, s, p)| (t, s, p))
}

pub fn evaluate_scores(scores: &[f64], labels: &[u8]) -> Result<EvalReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument("need equally many scores and labels, at least one".into()));
    }
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (s, &l) in scores.iter().zip(labels) {
        match (*s >= DECISION_THRESHOLD, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let y = youden(scores, labels);
    Ok(EvalReport {
        n: scores.len(),
        accuracy: (c.tp + c.tn) as f64 / scores.len() as f64,
        confusion: c,
        auc: auc(scores, labels),
        optimal_threshold: y.map(|v| v.0),
        sensitivity: y.map(|v| v.1),
        specificity: y.map(|v| v.2),
    })
}

pub fn evaluate(model: &ForestModel, data: &Dataset) -> Result<EvalReport> {
    let scores = model.predict_dataset(data)?;
    evaluate_scores(&scores, &data.labels())
}

/// 1D earth mover's distance between two empirical distributions, without standardization.
pub fn emd_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("emd needs two nonempty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // integral of |F_a - F_b| between consecutive support points
    let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
    all.sort_by(f64::total_cmp);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        while ia < a.len() && a[ia] <= w[0] {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= w[0] {
            ib += 1;
        }
        let fa = ia as f64 / a.len() as f64;
        let fb = ib as f64 / b.len() as f64;
        total += (fa - fb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// EMD after standardizing both samples with the mean and population standard
/// deviation of the combined sample. Zero combined spread gives 0.
pub fn emd_shift(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("emd needs two nonempty samples".into()));
    }
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let mean = stats::mean(&all);
    let sd = stats::std_pop(&all);
    if sd == 0.0 {
        return Ok(0.0);
    }
    let z = |v: &[f64]| v.iter().map(|x| (x - mean) / sd).collect::<Vec<_>>();
    emd_raw(&z(a), &z(b))
}

/// Gaussian KDE bandwidth by Silverman's rule: sample std (n−1) × (3n/4)^(−1/5).
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let m = stats::mean(samples);
    let var = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    var.sqrt() * (3.0 * n / 4.0).powf(-0.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

/// Gaussian KDE sampled on `points` evenly spaced values covering the data
/// plus four bandwidths on each side. Degenerate samples use bandwidth 1e-3
/// times the magnitude of the value (or 1e-3).
pub fn kde(samples: &[f64], points: usize) -> Option<KdeCurve> {
    kde_bounded(samples, points, None, None)
}

/// Like [`kde`], but for a variable confined to `[lo, hi]`: kernel mass that
/// would fall outside a bound is reflected back inside, and the sampling grid
/// is clipped to the bounds, so the curve still integrates to one.
pub fn kde_bounded(samples: &[f64], points: usize, lo: Option<f64>, hi: Option<f64>) -> Option<KdeCurve> {
    if samples.is_empty() || points < 2 {
        return None;
    }
    let mut bw = silverman_bandwidth(samples);
    if !(bw > 0.0) || !bw.is_finite() {
        bw = 1e-3 * samples[0].abs().max(1.0);
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut start = min - 4.0 * bw;
    let mut end = max + 4.0 * bw;
    if let Some(l) = lo {
        start = start.max(l);
    }
    if let Some(h) = hi {
        end = end.min(h);
    }
    if !(end > start) {
        return None;
    }
    let step = (end - start) / (points - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let kernel = |d: f64| (-0.5 * (d / bw).powi(2)).exp();
    let x: Vec<f64> = (0..points).map(|i| start + step * i as f64).collect();
    let density = x
        .iter()
        .map(|&xv| {
            samples
                .iter()
                .map(|&s| {
                    let mut k = kernel(xv - s);
                    if let Some(l) = lo {
                        k += kernel(xv - (2.0 * l - s));
                    }
                    if let Some(h) = hi {
                        k += kernel(xv - (2.0 * h - s));
                    }
                    k
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Some(KdeCurve { bandwidth: bw, x, density })
}

/// Natural range of a feature column, used to keep density curves inside it.
pub fn feature_bounds(name: &str) -> (Option<f64>, Option<f64>) {
    match name {
        "NCC" | "SSIM" => (Some(-1.0), Some(1.0)),
        "MSE" => (Some(0.0), Some(1.0)),
        n if n.starts_with("q_pct_") || n.starts_with("k_pct_") || n.starts_with("jaccard_index") => (Some(0.0), Some(1.0)),
        n if n.starts_with("cluster_proportion") => (Some(0.0), Some(1.0)),
        n if n.starts_with("wcv_ratio") => (None, Some(1.0)),
        "peak_value" | "PSR" => (None, None),
        _ => (Some(0.0), None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(samples: &[f64], bins: usize) -> Option<Histogram> {
    if samples.is_empty() || bins == 0 {
        return None;
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let w = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + w * i as f64).collect();
    let mut counts = vec![0; bins];
    for s in samples {
        let b = (((s - lo) / w) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Some(Histogram { edges, counts })
}

/// A registry with its image directory, train/test split and pair sets.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<ShoeRecord>,
    pub root: PathBuf,
    pub train_shoes: BTreeSet<String>,
    pub test_shoes: BTreeSet<String>,
    pub pristine150: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub train_fraction: f64,
    /// Train fraction used for the Pristine-150 population.
    pub pristine150_train_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self { train_fraction: 0.7, pristine150_train_fraction: 0.5, seed: 0 }
    }
}

impl Corpus {
    /// Splits shoes within each (model, size) class so that both splits keep
    /// same-class non-mates; the Pristine-150 shoes are split as one group.
    /// Fractions must lie in (0, 1).
    pub fn new(records: Vec<ShoeRecord>, root: impl Into<PathBuf>, opts: &CorpusOptions) -> Result<Corpus> {
        for f in [opts.train_fraction, opts.pristine150_train_fraction] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument("train fractions must lie in (0, 1)".into()));
            }
        }
        let pristine150 = singleton_class_shoes(&records);
        let mut groups: BTreeMap<String, (f64, BTreeSet<String>)> = BTreeMap::new();
        for r in &records {
            let (label, frac) = if pristine150.contains(&r.shoe_id) {
                ("p150".to_string(), opts.pristine150_train_fraction)
            } else {
                (format!("{}/{}", r.model, r.size), opts.train_fraction)
            };
            groups.entry(label).or_insert_with(|| (frac, BTreeSet::new())).1.insert(r.shoe_id.clone());
        }
        let mut train_shoes = BTreeSet::new();
        let mut test_shoes = BTreeSet::new();
        for (label, (frac, ids)) in groups {
            let ids: Vec<String> = ids.into_iter().collect();
            let n = ids.len();
            let seed_value = seed::derive_str(opts.seed, &label);
            let (tr, te) = match n {
                0 | 1 => (ids, Vec::new()),
                2 | 3 => split_by_shoe(&ids, frac, seed_value)?,
                // keep two shoes on each side so both splits have non-mates
                _ => split_counted(&ids, ((frac * n as f64).round() as usize).clamp(2, n - 2), seed_value),
            };
            train_shoes.extend(tr);
            test_shoes.extend(te);
        }
        Ok(Corpus { records, root: root.into(), train_shoes, test_shoes, pristine150 })
    }

    pub fn load(registry: impl AsRef<Path>, opts: &CorpusOptions) -> Result<Corpus> {
        let registry = registry.as_ref();
        let root = registry.parent().map(Path::to_path_buf).unwrap_or_default();
        Corpus::new(read_registry(registry)?, root, opts)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let set = match split {
            Split::Train => &self.train_shoes,
            Split::Test => &self.test_shoes,
        };
        (0..self.records.len()).filter(|&i| set.contains(&self.records[i].shoe_id)).collect()
    }

    pub fn pairs(&self, scenario: Scenario, split: Split, seed_value: u64) -> Result<ScenarioPairSet> {
        build_pairs(&self.records, &self.split_indices(split), scenario, split, &self.pristine150, seed_value)
    }

    pub fn image_path(&self, record: usize) -> PathBuf {
        self.root.join(&self.records[record].image_path)
    }

    pub fn load_image(&self, record: usize) -> Result<GrayImage> {
        imgproc::load_gray(self.image_path(record))
    }
}

/// Computes features for every pair, caching prepared prints. Pairs whose
/// analysis fails are skipped with a warning and returned separately.
pub fn featurize_pairs(
    corpus: &Corpus,
    pairs: &[&Pair],
    cfg: &PipelineConfig,
) -> Result<(Dataset, Vec<(String, Error)>)> {
    type Cache = Mutex<HashMap<PrintRef, Arc<Result<PreparedPrint>>>>;
    let cache: Cache = Mutex::new(HashMap::new());
    let get = |r: PrintRef| -> Arc<Result<PreparedPrint>> {
        if let Some(v) = cache.lock().unwrap().get(&r) {
            return v.clone();
        }
        let v = Arc::new(corpus.load_image(r.record).and_then(|img| pipeline::prepare_print(&img, r.opts, cfg)));
        cache.lock().unwrap().entry(r).or_insert(v).clone()
    };
    let results: Vec<(usize, Result<Vec<f64>>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let q = get(p.q);
            let k = get(p.k);
            let res = match (q.as_ref(), k.as_ref()) {
                (Ok(q), Ok(k)) => {
                    let mut c = cfg.clone();
                    c.seed = seed::derive_str(cfg.seed, &p.pair_id);
                    pipeline::analyze_pair(q, k, &c).map(|a| a.features.values)
                }
                (Err(e), _) | (_, Err(e)) => Err(clone_error(e)),
            };
            (i, res)
        })
        .collect();
    let mut ds = Dataset::new(forest::feature_columns());
    let mut failed = Vec::new();
    for (i, res) in results {
        let p = pairs[i];
        match res {
            Ok(values) => ds.push(FeatureRecord {
                pair_id: p.pair_id.clone(),
                q_shoe_id: p.q_shoe_id.clone(),
                k_shoe_id: p.k_shoe_id.clone(),
                scenario: p.scenario.name().to_string(),
                label: p.label,
                values,
            })?,
            Err(e) => {
                log::warn!("pair {} skipped: {e}", p.pair_id);
                failed.push((p.pair_id.clone(), e));
            }
        }
    }
    Ok((ds, failed))
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::EmptyCloud(s) => Error::EmptyCloud(s),
        Error::DegenerateCut(s) => Error::DegenerateCut(s.clone()),
        Error::Format(s) => Error::Format(s.clone()),
        other => Error::Format(other.to_string()),
    }
}

/// Train and test feature sets for each scenario.
#[derive(Clone, Debug, Default)]
pub struct ScenarioData {
    pub train: BTreeMap<Scenario, Dataset>,
    pub test: BTreeMap<Scenario, Dataset>,
}

impl ScenarioData {
    pub fn scenarios(&self) -> Vec<Scenario> {
        self.test.keys().copied().collect()
    }

    /// Reads `<dir>/<Scenario>_train.csv` and `<dir>/<Scenario>_test.csv`;
    /// missing files are listed and skipped with a warning.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<(ScenarioData, Vec<String>)> {
        let dir = dir.as_ref();
        let mut out = ScenarioData::default();
        let mut missing = Vec::new();
        for sc in Scenario::ALL {
            for (split, map) in [("train", &mut out.train), ("test", &mut out.test)] {
                let path = dir.join(format!("{}_{split}.csv", sc.name()));
                if path.exists() {
                    map.insert(sc, Dataset::read_csv_path(&path)?);
                } else {
                    log::warn!("missing feature file {}", path.display());
                    missing.push(path.display().to_string());
                }
            }
        }
        Ok((out, missing))
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (split, map) in [("train", &self.train), ("test", &self.test)] {
            for (sc, ds) in map {
                ds.write_csv_path(dir.join(format!("{}_{split}.csv", sc.name())))?;
            }
        }
        Ok(())
    }
}

/// Builds and featurizes pairs for the given scenarios in both splits.
pub fn build_scenario_data(corpus: &Corpus, scenarios: &[Scenario], cfg: &PipelineConfig, seed_value: u64) -> Result<ScenarioData> {
    let mut out = ScenarioData::default();
    for &sc in scenarios {
        for split in [Split::Train, Split::Test] {
            let set = corpus.pairs(sc, split, seed_value)?;
            let pairs: Vec<&Pair> = set.pairs().collect();
            let (ds, failed) = featurize_pairs(corpus, &pairs, cfg)?;
            if !failed.is_empty() {
                log::warn!("{sc} {}: {} of {} pairs failed", split_name(split), failed.len(), pairs.len());
            }
            match split {
                Split::Train => out.train.insert(sc, ds),
                Split::Test => out.test.insert(sc, ds),
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Baseline,
    Full,
    FullIndicators,
    Category,
    Scenario,
    FullLoo,
    CategoryLoo,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Baseline,
        Regime::Full,
        Regime::FullIndicators,
        Regime::Category,
        Regime::Scenario,
        Regime::FullLoo,
        Regime::CategoryLoo,
    ];
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "baseline" => Ok(Regime::Baseline),
            "full" => Ok(Regime::Full),
            "fullindicators" | "indicators" => Ok(Regime::FullIndicators),
            "category" => Ok(Regime::Category),
            "scenario" => Ok(Regime::Scenario),
            "fullloo" | "loo" => Ok(Regime::FullLoo),
            "categoryloo" => Ok(Regime::CategoryLoo),
            _ => Err(Error::InvalidArgument(format!("unknown regime {s:?}"))),
        }
    }
}

/// Which training scenarios a regime uses when scoring test scenario `test`.
pub fn training_scenarios(regime: Regime, test: Scenario, available: &[Scenario]) -> Vec<Scenario> {
    let keep = |f: &dyn Fn(Scenario) -> bool| available.iter().copied().filter(|&s| f(s)).collect::<Vec<_>>();
    match regime {
        Regime::Baseline => keep(&|s| s == Scenario::PristineAN),
        Regime::Full | Regime::FullIndicators => keep(&|_| true),
        Regime::Category => keep(&|s| s.category() == test.category()),
        Regime::Scenario => keep(&|s| s == test),
        Regime::FullLoo => keep(&|s| s != test),
        Regime::CategoryLoo => keep(&|s| s != test && s.category() == test.category()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub regime: Regime,
    pub test_scenario: Scenario,
    pub trained_on: Vec<Scenario>,
    pub report: Option<EvalReport>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdRow {
    pub feature: String,
    /// EMD against the baseline scenario per (scenario, class).
    pub mated: BTreeMap<Scenario, f64>,
    pub non_mated: BTreeMap<Scenario, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<MatrixCell>,
    pub emd: Vec<EmdRow>,
    pub models_trained: usize,
}

impl ExperimentReport {
    pub fn cell(&self, regime: Regime, scenario: Scenario) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.regime == regime && c.test_scenario == scenario)
    }

    pub fn accuracy(&self, regime: Regime, scenario: Scenario) -> Option<f64> {
        self.cell(regime, scenario).and_then(|c| c.report.as_ref()).map(|r| r.accuracy)
    }

    /// Accuracy matrix as CSV: one row per regime, one column per scenario.
    pub fn accuracy_csv(&self) -> String {
        let mut scenarios: Vec<Scenario> = self.cells.iter().map(|c| c.test_scenario).collect();
        scenarios.sort();
        scenarios.dedup();
        let mut regimes: Vec<Regime> = self.cells.iter().map(|c| c.regime).collect();
        regimes.sort();
        regimes.dedup();
        let mut s = String::from("regime");
        for sc in &scenarios {
            s.push(',');
            s.push_str(sc.name());
        }
        s.push('\n');
        for r in regimes {
            s.push_str(&format!("{r:?}"));
            for &sc in &scenarios {
                s.push(',');
                if let Some(a) = self.accuracy(r, sc) {
                    s.push_str(&format!("{a:.4}"));
                }
            }
            s.push('\n');
        }
        s
    }

    /// EMD table as CSV with one row per feature and a column per (scenario, class).
    pub fn emd_csv(&self) -> String {
        let Some(first) = self.emd.first() else {
            return String::new();
        };
        let scenarios: Vec<Scenario> = first.mated.keys().copied().collect();
        let mut s = String::from("feature");
        for sc in &scenarios {
            s.push_str(&format!(",{sc}_KM,{sc}_KNM"));
        }
        s.push('\n');
        for row in &self.emd {
            s.push_str(&row.feature);
            for sc in &scenarios {
                let f = |m: &BTreeMap<Scenario, f64>| m.get(sc).map(|v| format!("{v:.4}")).unwrap_or_default();
                s.push_str(&format!(",{},{}", f(&row.mated), f(&row.non_mated)));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub params: Hyperparams,
    pub seed: u64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { params: Hyperparams::default(), seed: 0 }
    }
}

fn column(ds: &Dataset, j: usize, label: u8) -> Vec<f64> {
    ds.records.iter().filter(|r| r.label == label).map(|r| r.values[j]).filter(|v| !v.is_nan()).collect()
}

/// Per-feature standardized EMD between the baseline scenario and every other
/// scenario, separately for mated and non-mated pairs (train and test pooled).
pub fn emd_table(data: &ScenarioData) -> Vec<EmdRow> {
    let pooled = |sc: Scenario| -> Option<Dataset> {
        let parts: Vec<&Dataset> = [data.train.get(&sc), data.test.get(&sc)].into_iter().flatten().collect();
        Dataset::concat(&parts).ok().filter(|d| !d.is_empty())
    };
    let Some(base) = pooled(Scenario::PristineAN) else {
        return Vec::new();
    };
    let others: Vec<(Scenario, Dataset)> =
        Scenario::ALL.iter().filter(|&&s| s != Scenario::PristineAN).filter_map(|&s| pooled(s).map(|d| (s, d))).collect();
    FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut row = EmdRow { feature: name.to_string(), mated: BTreeMap::new(), non_mated: BTreeMap::new() };
            for (sc, ds) in &others {
                for (label, map) in [(1u8, &mut row.mated), (0u8, &mut row.non_mated)] {
                    if let Ok(v) = emd_shift(&column(&base, j, label), &column(ds, j, label)) {
                        map.insert(*sc, v);
                    }
                }
            }
            row
        })
        .collect()
}

/// Trains every requested regime and evaluates it on every test scenario.
pub fn run_experiment_matrix(data: &ScenarioData, regimes: &[Regime], opts: &ExperimentOptions) -> Result<ExperimentReport> {
    let available: Vec<Scenario> = data.train.keys().copied().filter(|s| data.test.contains_key(s)).collect();
    let mut models: BTreeMap<(bool, Vec<Scenario>), Option<ForestModel>> = BTreeMap::new();
    let mut cells = Vec::new();
    for &regime in regimes {
        let indicators = regime == Regime::FullIndicators;
        for &test in &available {
            let trained_on = training_scenarios(regime, test, &available);
            let key = (indicators, trained_on.clone());
            if !models.contains_key(&key) {
                let parts: Vec<&Dataset> = trained_on.iter().filter_map(|s| data.train.get(s)).collect();
                let mut train_ds = Dataset::concat(&parts)?;
                if indicators {
                    train_ds = train_ds.with_indicators(category_of_name)?;
                }
                let model = if train_ds.is_empty() {
                    None
                } else {
                    let seed_value = seed::derive_str(opts.seed, &format!("{indicators}{trained_on:?}"));
                    match forest::train(&train_ds, opts.params, seed_value) {
                        Ok(m) => Some(m),
                        Err(Error::DegenerateLabels) => None,
                        Err(e) => return Err(e),
                    }
                };
                models.insert(key.clone(), model);
            }
            let (report, note) = match &models[&key] {
                None => (None, Some("no usable training data".to_string())),
                Some(m) => {
                    let mut test_ds = data.test[&test].clone();
                    if indicators {
                        test_ds = test_ds.with_indicators(category_of_name)?;
                    }
                    if test_ds.is_empty() {
                        (None, Some("empty test set".to_string()))
                    } else {
                        (Some(evaluate(m, &test_ds)?), None)
                    }
                }
            };
            cells.push(MatrixCell { regime, test_scenario: test, trained_on, report, note });
        }
    }
    let models_trained = models.values().filter(|m| m.is_some()).count();
    Ok(ExperimentReport { cells, emd: emd_table(data), models_trained })
}
