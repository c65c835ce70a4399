//! Population distributions of every feature for the metric explorer.

use std::path::Path;

use serde::Serialize;

use shoeprint_core::evalkit::{self, Histogram, KdeCurve, Scenario, ScenarioData};
use shoeprint_core::forest::{Dataset, FEATURE_NAMES};

use crate::error::{Result, ServiceError};

pub const DEFAULT_BINS: usize = 30;
pub const DEFAULT_KDE_POINTS: usize = 256;

#[derive(Clone, Debug, Serialize)]
pub struct ClassDistribution {
    pub n: usize,
    pub histogram: Option<Histogram>,
    pub kde: Option<KdeCurve>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricPopulation {
    pub metric: String,
    pub scenario: Scenario,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub mated: ClassDistribution,
    pub non_mated: ClassDistribution,
}

/// Feature files per scenario; train and test rows are pooled.
#[derive(Clone, Debug, Default)]
pub struct Population {
    pooled: Vec<(Scenario, Dataset)>,
}

impl Population {
    /// Reads `<Scenario>_train.csv` / `<Scenario>_test.csv` feature files.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let (data, _missing) = ScenarioData::load_dir(dir)?;
        Ok(Self::from_data(&data))
    }

    pub fn from_data(data: &ScenarioData) -> Self {
        let mut pooled = Vec::new();
        for sc in Scenario::ALL {
            let parts: Vec<&Dataset> = [data.train.get(&sc), data.test.get(&sc)].into_iter().flatten().collect();
            if let Ok(ds) = Dataset::concat(&parts) {
                if !ds.is_empty() {
                    pooled.push((sc, ds));
                }
            }
        }
        Self { pooled }
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        self.pooled.iter().map(|(s, _)| *s).collect()
    }

    pub fn metric(&self, metric: &str, scenario: Scenario, bins: usize, points: usize) -> Result<MetricPopulation> {
        let j = FEATURE_NAMES.iter().position(|n| *n == metric).ok_or_else(|| ServiceError::UnknownMetric(metric.into()))?;
        let ds = self
            .pooled
            .iter()
            .find(|(s, _)| *s == scenario)
            .map(|(_, d)| d)
            .ok_or_else(|| ServiceError::MissingPopulation(scenario.name().into()))?;
        let col = ds.columns.iter().position(|c| c == metric).unwrap_or(j);
        let (lo, hi) = evalkit::feature_bounds(metric);
        let class = |label: u8| {
            let v: Vec<f64> = ds.records.iter().filter(|r| r.label == label).map(|r| r.values[col]).filter(|x| x.is_finite()).collect();
            ClassDistribution { n: v.len(), histogram: evalkit::histogram(&v, bins), kde: evalkit::kde_bounded(&v, points, lo, hi) }
        };
        Ok(MetricPopulation {
            metric: metric.into(),
            scenario,
            lower_bound: lo,
            upper_bound: hi,
            mated: class(1),
            non_mated: class(0),
        })
    }
}
