//! Cluster-structure similarity between Q and K*.
//!
//! Q is clustered hierarchically with Ward linkage, k-means refines those
//! centroids on Q, and the refined centroids seed k-means on K*. Cluster i of
//! K* corresponds to cluster i of Q by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{downsample, Point, PointCloud};

/// Cluster counts used by the feature pipeline.
pub const FEATURE_KS: [usize; 2] = [20, 100];

/// Clouds larger than this are subsampled before Ward seeding.
pub const WARD_MAX_POINTS: usize = 5000;

pub const DEFAULT_MAX_ITER: usize = 300;

/// Agglomerative Ward dendrogram over a (possibly subsampled) cloud.
///
/// Built once, it can be cut at any number of clusters.
#[derive(Clone, Debug)]
pub struct WardTree {
    points: Vec<Point>,
    /// Merges sorted by non-decreasing Ward cost as (kept slot, absorbed slot).
    merges: Vec<(usize, usize)>,
}

fn ward_cost(sa: f64, ca: Point, sb: f64, cb: Point) -> f64 {
    sa * sb / (sa + sb) * ca.dist2(&cb)
}

impl WardTree {
    /// Builds the dendrogram with the nearest-neighbour-chain algorithm, which
    /// needs only linear memory. `seed` drives the subsample for large clouds.
    pub fn build(cloud: &PointCloud, seed: u64) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud("ward input"));
        }
        let points = if cloud.len() > WARD_MAX_POINTS {
            let rate = WARD_MAX_POINTS as f64 / cloud.len() as f64;
            downsample(cloud, rate, seed)?.into_points()
        } else {
            cloud.points().to_vec()
        };
        let n = points.len();
        let mut centroid = points.clone();
        let mut size = vec![1.0f64; n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut merges: Vec<(f64, usize, usize)> = Vec::with_capacity(n.saturating_sub(1));
        let mut chain: Vec<usize> = Vec::new();

        while active.len() > 1 {
            if chain.is_empty() {
                chain.push(*active.iter().min().unwrap());
            }
            let a = *chain.last().unwrap();
            let prev = (chain.len() >= 2).then(|| chain[chain.len() - 2]);
            // The previous chain element wins ties, which keeps the chain finite.
            let (mut best, mut best_d) = match prev {
                Some(p) => (p, ward_cost(size[a], centroid[a], size[p], centroid[p])),
                None => (usize::MAX, f64::INFINITY),
            };
            for &b in &active {
                if b == a {
                    continue;
                }
                let d = ward_cost(size[a], centroid[a], size[b], centroid[b]);
                if d < best_d {
                    best = b;
                    best_d = d;
                }
            }
            if Some(best) == prev {
                chain.pop();
                chain.pop();
                let (lo, hi) = if a < best { (a, best) } else { (best, a) };
                let s = size[lo] + size[hi];
                centroid[lo] = Point::new(
                    (centroid[lo].x * size[lo] + centroid[hi].x * size[hi]) / s,
                    (centroid[lo].y * size[lo] + centroid[hi].y * size[hi]) / s,
                );
                size[lo] = s;
                active.retain(|&c| c != hi);
                merges.push((best_d, lo, hi));
            } else {
                chain.push(best);
            }
        }
        // Ward is reducible, so sorting by cost yields a valid merge order; the
        // stable sort keeps dependent merges of equal cost in creation order.
        merges.sort_by(|x, y| x.0.total_cmp(&y.0));
        Ok(Self { points, merges: merges.into_iter().map(|(_, a, b)| (a, b)).collect() })
    }

    /// Number of points the tree was built over.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Centroids of the `k` clusters obtained by cutting the tree, ordered by
    /// the lowest point index each cluster contains.
    pub fn centroids(&self, k: usize) -> Result<Vec<Point>> {
        let n = self.points.len();
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if k > n {
            return Err(Error::TooFewPoints { needed: k, got: n });
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for &(a, b) in &self.merges[..n - k] {
            let ra = find(&mut parent, a);
            let rb = find(&mut parent, b);
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
        let mut slot = vec![usize::MAX; n];
        let mut sums: Vec<(f64, f64, f64)> = Vec::with_capacity(k);
        for i in 0..n {
            let r = find(&mut parent, i);
            if slot[r] == usize::MAX {
                slot[r] = sums.len();
                sums.push((0.0, 0.0, 0.0));
            }
            let s = &mut sums[slot[r]];
            s.0 += self.points[i].x;
            s.1 += self.points[i].y;
            s.2 += 1.0;
        }
        debug_assert_eq!(sums.len(), k);
        Ok(sums.into_iter().map(|(x, y, c)| Point::new(x / c, y / c)).collect())
    }
}

/// Ward-linkage centroids of `cloud` cut at `k` clusters.
pub fn ward_centroids(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<Point>> {
    if cloud.len() < k {
        return Err(Error::TooFewPoints { needed: k, got: cloud.len() });
    }
    WardTree::build(cloud, seed)?.centroids(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Point>,
    pub sizes: Vec<usize>,
    pub iterations: usize,
    /// Total within-cluster squared distance after each assignment step.
    pub objective_history: Vec<f64>,
    /// Clusters that ended with no points; they keep their last centroid.
    pub empty_clusters: Vec<usize>,
}

impl Clustering {
    pub fn is_degenerate(&self) -> bool {
        !self.empty_clusters.is_empty()
    }
}

fn assign(points: &[Point], centroids: &[Point], out: &mut [usize]) -> (bool, f64) {
    let mut changed = false;
    let mut objective = 0.0;
    for (p, slot) in points.iter().zip(out.iter_mut()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.iter().enumerate() {
            let d = p.dist2(c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if *slot != best {
            changed = true;
            *slot = best;
        }
        objective += best_d;
    }
    (changed, objective)
}

fn update(points: &[Point], assignments: &[usize], centroids: &mut [Point], sizes: &mut [usize]) {
    let k = centroids.len();
    let mut sums = vec![(0.0f64, 0.0f64); k];
    sizes.iter_mut().for_each(|s| *s = 0);
    for (p, &a) in points.iter().zip(assignments) {
        sums[a].0 += p.x;
        sums[a].1 += p.y;
        sizes[a] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            centroids[j] = Point::new(sums[j].0 / sizes[j] as f64, sums[j].1 / sizes[j] as f64);
        }
    }
}

/// Lloyd's k-means from the given centroids.
///
/// The first assignment round counts as iteration 1, so a run that starts
/// converged reports 1. Nearest-centroid ties go to the lower index.
pub fn kmeans(cloud: &PointCloud, init: &[Point], max_iter: usize) -> Result<Clustering> {
    let k = init.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one centroid".into()));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    if cloud.len() < k {
        return Err(Error::TooFewPoints { needed: k, got: cloud.len() });
    }
    let points = cloud.points();
    let mut centroids = init.to_vec();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut sizes = vec![0usize; k];
    let (_, obj) = assign(points, &centroids, &mut assignments);
    let mut history = vec![obj];
    update(points, &assignments, &mut centroids, &mut sizes);
    let mut iterations = 1;
    while iterations < max_iter {
        let (changed, obj) = assign(points, &centroids, &mut assignments);
        history.push(obj);
        if !changed {
            break;
        }
        iterations += 1;
        update(points, &assignments, &mut centroids, &mut sizes);
    }
    let empty_clusters = (0..k).filter(|&j| sizes[j] == 0).collect();
    Ok(Clustering { k, assignments, centroids, sizes, iterations, objective_history: history, empty_clusters })
}

/// Total within-cluster variation: the mean squared distance to the centroid
/// within each nonempty cluster, summed and divided by the cloud size.
pub fn total_within(cloud: &PointCloud, c: &Clustering) -> f64 {
    let mut per = vec![0.0f64; c.k];
    for (p, &a) in cloud.iter().zip(&c.assignments) {
        per[a] += p.dist2(&c.centroids[a]);
    }
    let s: f64 = per.iter().zip(&c.sizes).filter(|(_, &n)| n > 0).map(|(v, &n)| v / n as f64).sum();
    s / cloud.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub k: usize,
    pub cdm: f64,
    pub cpm: f64,
    pub im: usize,
    /// `None` when Q's total within-cluster variation is zero.
    pub twrm: Option<f64>,
    pub degenerate: bool,
}

/// Metrics for one `k`, reusing a Ward tree already built over Q.
pub fn cluster_metrics_with_tree(q: &PointCloud, k_star: &PointCloud, tree: &WardTree, k: usize) -> Result<ClusterMetrics> {
    if q.len() < k {
        return Err(Error::TooFewPoints { needed: k, got: q.len() });
    }
    if k_star.len() < k {
        return Err(Error::TooFewPoints { needed: k, got: k_star.len() });
    }
    let seeds = tree.centroids(k)?;
    let cq = kmeans(q, &seeds, DEFAULT_MAX_ITER)?;
    let ck = kmeans(k_star, &cq.centroids, DEFAULT_MAX_ITER)?;

    let mut sq = 0.0;
    let mut used = 0usize;
    for i in 0..k {
        if cq.sizes[i] > 0 && ck.sizes[i] > 0 {
            sq += cq.centroids[i].dist2(&ck.centroids[i]);
            used += 1;
        }
    }
    let cdm = if used == 0 { f64::NAN } else { (sq / used as f64).sqrt() };
    let (nq, nk) = (q.len() as f64, k_star.len() as f64);
    let cpm = ((0..k).map(|i| (cq.sizes[i] as f64 / nq - ck.sizes[i] as f64 / nk).powi(2)).sum::<f64>() / k as f64).sqrt();
    let tw_q = total_within(q, &cq);
    let tw_k = total_within(k_star, &ck);
    let twrm = (tw_q > 0.0).then(|| (tw_q - tw_k) / tw_q);
    Ok(ClusterMetrics { k, cdm, cpm, im: ck.iterations, twrm, degenerate: cq.is_degenerate() || ck.is_degenerate() })
}

pub fn cluster_metrics(q: &PointCloud, k_star: &PointCloud, k: usize, seed: u64) -> Result<ClusterMetrics> {
    if q.len() < k {
        return Err(Error::TooFewPoints { needed: k, got: q.len() });
    }
    let tree = WardTree::build(q, seed)?;
    cluster_metrics_with_tree(q, k_star, &tree, k)
}

/// Total within-cluster variation for each `k`, each run seeded from one
/// shared Ward tree.
pub fn wcv_sweep(cloud: &PointCloud, ks: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k > cloud.len() {
        return Err(Error::TooFewPoints { needed: max_k, got: cloud.len() });
    }
    let tree = WardTree::build(cloud, seed)?;
    ks.iter()
        .map(|&k| {
            let c = kmeans(cloud, &tree.centroids(k)?, DEFAULT_MAX_ITER)?;
            Ok((k, total_within(cloud, &c)))
        })
        .collect()
}

/// The sweep grid 10, 20, ..., 500.
pub fn default_sweep_ks() -> Vec<usize> {
    (1..=50).map(|i| i * 10).collect()
}
