//! Point-cloud similarity: directional proportion overlap, Jaccard index of
//! rounded coordinates, and summary statistics of nearest-point distances.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{NeighborIndex, PointCloud};
use crate::stats;

/// Radii at which overlap is reported.
pub const OVERLAP_THRESHOLDS: [f64; 5] = [1.0, 2.0, 3.0, 5.0, 10.0];

/// Rounding granularities for the Jaccard index: integer, tenth, hundredth.
pub const JACCARD_DECIMALS: [u32; 3] = [0, 1, 2];

/// Fraction of `a`'s points whose nearest point in `b` is within `d` (inclusive).
pub fn proportion_overlap(a: &PointCloud, b: &PointCloud, d: f64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyCloud("overlap source"));
    }
    if b.is_empty() {
        return Ok(0.0);
    }
    Ok(proportion_overlap_indexed(a, &NeighborIndex::build(b), d))
}

/// Same as [`proportion_overlap`] against a prebuilt index of the target cloud.
pub fn proportion_overlap_indexed(a: &PointCloud, b: &NeighborIndex, d: f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let hits = a.iter().filter(|p| b.nearest_distance(p) <= d).count();
    hits as f64 / a.len() as f64
}

/// Overlap at every threshold in [`OVERLAP_THRESHOLDS`], in that order.
pub fn overlap_profile(a: &PointCloud, b: &PointCloud) -> Result<[f64; 5]> {
    if a.is_empty() {
        return Err(Error::EmptyCloud("overlap source"));
    }
    if b.is_empty() {
        return Ok([0.0; 5]);
    }
    let index = NeighborIndex::build(b);
    let dists: Vec<f64> = a.iter().map(|p| index.nearest_distance(p)).collect();
    let mut out = [0.0; 5];
    for (slot, d) in out.iter_mut().zip(OVERLAP_THRESHOLDS) {
        *slot = dists.iter().filter(|&&x| x <= d).count() as f64 / dists.len() as f64;
    }
    Ok(out)
}

/// Both directions of the overlap profile for an aligned pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// Proportion of Q within each threshold of K*.
    pub q: [f64; 5],
    /// Proportion of K* within each threshold of Q.
    pub k: [f64; 5],
}

pub fn overlap_report(q: &PointCloud, k_star: &PointCloud) -> Result<OverlapReport> {
    Ok(OverlapReport { q: overlap_profile(q, k_star)?, k: overlap_profile(k_star, q)? })
}

fn rounded_set(cloud: &PointCloud, decimals: u32) -> HashSet<(i64, i64)> {
    let scale = 10f64.powi(decimals as i32);
    // f64::round is half-away-from-zero
    cloud.iter().map(|p| ((p.x * scale).round() as i64, (p.y * scale).round() as i64)).collect()
}

/// Jaccard index of the two clouds after rounding coordinates to `decimals`
/// places and deduplicating. Two empty clouds score 0.
pub fn jaccard(a: &PointCloud, b: &PointCloud, decimals: u32) -> f64 {
    let sa = rounded_set(a, decimals);
    let sb = rounded_set(b, decimals);
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub decimals_0: f64,
    pub decimals_1: f64,
    pub decimals_2: f64,
}

pub fn jaccard_report(q: &PointCloud, k_star: &PointCloud) -> JaccardReport {
    JaccardReport {
        decimals_0: jaccard(q, k_star, 0),
        decimals_1: jaccard(q, k_star, 1),
        decimals_2: jaccard(q, k_star, 2),
    }
}

/// Distribution summary of the distance from each Q point to its nearest K* point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinDistStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
}

impl MinDistStats {
    pub fn from_distances(mut d: Vec<f64>) -> Self {
        let mean = stats::mean(&d);
        let std = stats::std_pop(&d);
        d.sort_by(f64::total_cmp);
        let q = |p| stats::quantile_sorted(&d, p);
        Self { mean, std, p10: q(0.10), p25: q(0.25), p50: q(0.50), p75: q(0.75), p90: q(0.90) }
    }
}

pub fn min_dist_stats(q: &PointCloud, k_star: &PointCloud) -> Result<MinDistStats> {
    if q.is_empty() || k_star.is_empty() {
        return Err(Error::EmptyCloud("min-distance statistics"));
    }
    let index = NeighborIndex::build(k_star);
    Ok(MinDistStats::from_distances(q.iter().map(|p| index.nearest_distance(p)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_examples() {
        let a = PointCloud::from_xy(&[(0.0, 0.0), (10.0, 0.0)]);
        let b = PointCloud::from_xy(&[(0.0, 0.0)]);
        assert_eq!(proportion_overlap(&a, &b, 1.0).unwrap(), 0.5);
        assert_eq!(proportion_overlap(&b, &a, 1.0).unwrap(), 1.0);
        assert_eq!(proportion_overlap(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(proportion_overlap(&a, &PointCloud::default(), 3.0).unwrap(), 0.0);
        assert!(matches!(proportion_overlap(&PointCloud::default(), &a, 3.0), Err(Error::EmptyCloud(_))));
    }

    #[test]
    fn overlap_is_inclusive_at_the_radius() {
        let a = PointCloud::from_xy(&[(3.0, 0.0)]);
        let b = PointCloud::from_xy(&[(0.0, 0.0)]);
        assert_eq!(proportion_overlap(&a, &b, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn sixty_percent_semantics() {
        // 3 of 5 Q points lie within radius 3 of some K* point
        let q = PointCloud::from_xy(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (50.0, 0.0), (60.0, 0.0)]);
        let k = PointCloud::from_xy(&[(1.0, 0.0)]);
        assert!((proportion_overlap(&q, &k, 3.0).unwrap() - 0.60).abs() < 1e-12);
    }

    #[test]
    fn jaccard_examples() {
        let a = PointCloud::from_xy(&[(0.0, 0.0)]);
        let b = PointCloud::from_xy(&[(0.4, 0.0)]);
        assert_eq!(jaccard(&a, &b, 0), 1.0);
        assert_eq!(jaccard(&a, &b, 1), 0.0);
        let c = PointCloud::from_xy(&[(1.0, 2.0), (3.0, 4.0)]);
        let d = PointCloud::from_xy(&[(5.0, 6.0)]);
        assert_eq!(jaccard(&c, &c, 2), 1.0);
        assert_eq!(jaccard(&c, &d, 0), 0.0);
        assert_eq!(jaccard(&PointCloud::default(), &PointCloud::default(), 0), 0.0);
    }

    #[test]
    fn jaccard_rounds_half_away_from_zero() {
        let a = PointCloud::from_xy(&[(2.5, -2.5)]);
        let b = PointCloud::from_xy(&[(3.0, -3.0)]);
        assert_eq!(jaccard(&a, &b, 0), 1.0);
    }

    #[test]
    fn min_dist_examples() {
        let q = PointCloud::from_xy(&[(0.0, 0.0), (3.0, 0.0)]);
        let k = PointCloud::from_xy(&[(1.0, 0.0)]);
        let s = min_dist_stats(&q, &k).unwrap();
        assert!((s.mean - 1.5).abs() < 1e-12);
        assert!((s.p50 - 1.5).abs() < 1e-12);
        assert!((s.std - 0.5).abs() < 1e-12);
        let z = min_dist_stats(&q, &q).unwrap();
        assert_eq!([z.mean, z.std, z.p10, z.p25, z.p50, z.p75, z.p90], [0.0; 7]);
    }
}
