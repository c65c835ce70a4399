//! Rigid point-set registration.
//!
//! [`icp_single`] is plain point-to-point ICP with a closed-form 2D Procrustes
//! update. [`align`] wraps it in the multi-start search: every downsample rate,
//! five translation starts and both reference directions, scored by how much of
//! the transformed K lands near Q on the full clouds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{downsample, NeighborIndex, Point, PointCloud, RigidTransform};
use crate::seed;
use crate::simfeatures::proportion_overlap_indexed;

pub const DEFAULT_DOWNSAMPLE_RATES: [f64; 5] = [0.04, 0.05, 0.06, 0.20, 0.50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the relative improvement of the mean squared correspondence
    /// distance falls below this value.
    pub convergence_tol: f64,
    pub downsample_rates: Vec<f64>,
    /// Radius used to score candidate alignments by K* overlap with Q.
    pub overlap_threshold_for_selection: f64,
    pub seed: u64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            convergence_tol: 1e-6,
            downsample_rates: DEFAULT_DOWNSAMPLE_RATES.to_vec(),
            overlap_threshold_for_selection: 3.0,
            seed: 0,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidArgument("convergence_tol must be > 0".into()));
        }
        if self.downsample_rates.is_empty() || self.downsample_rates.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::InvalidArgument("downsample rates must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Outcome of one ICP run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpRun {
    /// Cumulative transform (including the initial guess) mapping moving onto reference.
    pub transform: RigidTransform,
    /// Summed squared correspondence distance at the final transform.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each correspondence step, starting with the initial guess.
    pub objective_history: Vec<f64>,
    /// Set when every moving point matched the same reference point at some step.
    pub degenerate_correspondence: bool,
}

fn correspond(index: &NeighborIndex, moved: &[Point], matched: &mut Vec<Point>) -> (f64, bool) {
    matched.clear();
    let mut objective = 0.0;
    let mut first_id = usize::MAX;
    let mut all_same = true;
    for p in moved {
        let nb = index.nearest(p).expect("non-empty index");
        objective += nb.distance * nb.distance;
        if first_id == usize::MAX {
            first_id = nb.index;
        } else if nb.index != first_id {
            all_same = false;
        }
        matched.push(nb.point);
    }
    (objective, all_same && moved.len() > 1)
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
///
/// In 2D the SVD of the cross-covariance collapses to a single angle,
/// `atan2(sum of cross terms, sum of dot terms)` over centered pairs.
pub fn procrustes(src: &[Point], dst: &[Point]) -> RigidTransform {
    debug_assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        sx += s.x;
        sy += s.y;
        dx += d.x;
        dy += d.y;
    }
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (ax, ay) = (s.x - sx, s.y - sy);
        let (bx, by) = (d.x - dx, d.y - dy);
        dot += ax * bx + ay * by;
        cross += ax * by - ay * bx;
    }
    let theta = cross.atan2(dot);
    let (sn, cs) = theta.sin_cos();
    RigidTransform { theta, tx: dx - (cs * sx - sn * sy), ty: dy - (sn * sx + cs * sy) }
}

/// Point-to-point ICP of `moving` onto `reference`, starting from `init`.
pub fn icp_single(reference: &PointCloud, moving: &PointCloud, init: RigidTransform, cfg: &IcpConfig) -> Result<IcpRun> {
    if reference.is_empty() || moving.is_empty() {
        return Err(Error::EmptyCloud("icp input"));
    }
    let index = NeighborIndex::build(reference);
    Ok(icp_with_index(&index, moving, init, cfg))
}

fn icp_with_index(index: &NeighborIndex, moving: &PointCloud, init: RigidTransform, cfg: &IcpConfig) -> IcpRun {
    let mut tf = init;
    let mut moved = tf.apply(moving).into_points();
    let mut matched = Vec::with_capacity(moved.len());
    let (mut objective, mut degenerate) = correspond(index, &moved, &mut matched);
    let mut history = vec![objective];
    let mut iterations = 0;
    while iterations < cfg.max_iterations && objective > 0.0 {
        let delta = procrustes(&moved, &matched);
        let candidate = delta.compose(&tf);
        let candidate_moved = candidate.apply(moving).into_points();
        let mut candidate_matched = Vec::with_capacity(candidate_moved.len());
        let (next, deg) = correspond(index, &candidate_moved, &mut candidate_matched);
        iterations += 1;
        // Rounding can push a converged run up by an ulp; keep the better state.
        if next > objective {
            break;
        }
        let improvement = (objective - next) / objective;
        tf = candidate;
        moved = candidate_moved;
        matched = candidate_matched;
        objective = next;
        degenerate |= deg;
        history.push(objective);
        if improvement < cfg.convergence_tol {
            break;
        }
    }
    IcpRun { transform: tf, objective, iterations, objective_history: history, degenerate_correspondence: degenerate }
}

/// Identity plus shifts of twice the moving cloud's x range (left/right) and
/// twice its y range (up/down).
pub fn make_starts(moving: &PointCloud) -> Result<[RigidTransform; 5]> {
    let b = moving.bounds().ok_or(Error::EmptyCloud("icp starts"))?;
    let sx = 2.0 * b.range_x();
    let sy = 2.0 * b.range_y();
    Ok([
        RigidTransform::IDENTITY,
        RigidTransform::translation(sx, 0.0),
        RigidTransform::translation(-sx, 0.0),
        RigidTransform::translation(0.0, sy),
        RigidTransform::translation(0.0, -sy),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Q is the fixed reference and K moves.
    #[serde(rename = "Q-reference")]
    QReference,
    /// K is the fixed reference and Q moves; the result is inverted.
    #[serde(rename = "K-reference")]
    KReference,
}

/// Diagnostics for one of the candidate runs considered by [`align`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDiagnostic {
    pub rate: f64,
    pub start: usize,
    pub direction: Direction,
    pub transform: RigidTransform,
    pub objective: f64,
    pub iterations: usize,
    pub selection_score: f64,
    pub degenerate_correspondence: bool,
}

/// Winning alignment. `transform` always maps K onto Q (producing K*).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub transform: RigidTransform,
    pub objective: f64,
    pub selection_score: f64,
    pub direction: Direction,
    pub start_used: usize,
    pub rate_used: f64,
    pub candidates: Vec<CandidateDiagnostic>,
}

impl AlignmentResult {
    pub fn aligned(&self, k: &PointCloud) -> PointCloud {
        self.transform.apply(k)
    }
}

/// Multi-start, two-way ICP over every downsample rate. Candidates are scored by
/// the proportion of K* within the selection radius of Q on the full clouds;
/// ties go to the lower objective, then to the earlier candidate.
pub fn align(q: &PointCloud, k: &PointCloud, cfg: &IcpConfig) -> Result<AlignmentResult> {
    if q.is_empty() || k.is_empty() {
        return Err(Error::EmptyCloud("alignment input"));
    }
    cfg.validate()?;
    let q_full_index = NeighborIndex::build(q);

    // Downsampled clouds and their indices, one entry per rate.
    let prepared: Vec<_> = cfg
        .downsample_rates
        .par_iter()
        .enumerate()
        .map(|(ri, &rate)| {
            let qs = downsample(q, rate, seed::derive(cfg.seed, ri as u64)).expect("non-empty");
            let ks = downsample(k, rate, seed::derive(cfg.seed, ri as u64)).expect("non-empty");
            let q_starts = make_starts(&qs).expect("non-empty");
            let k_starts = make_starts(&ks).expect("non-empty");
            let qi = NeighborIndex::build(&qs);
            let ki = NeighborIndex::build(&ks);
            (rate, qs, ks, qi, ki, q_starts, k_starts)
        })
        .collect();

    let jobs: Vec<(usize, usize, Direction)> = (0..prepared.len())
        .flat_map(|ri| {
            (0..5).flat_map(move |si| [(ri, si, Direction::QReference), (ri, si, Direction::KReference)])
        })
        .collect();

    let candidates: Vec<CandidateDiagnostic> = jobs
        .par_iter()
        .map(|&(ri, si, direction)| {
            let (rate, qs, ks, qi, ki, q_starts, k_starts) = &prepared[ri];
            let (run, transform) = match direction {
                Direction::QReference => {
                    let run = icp_with_index(qi, ks, k_starts[si], cfg);
                    let tf = run.transform;
                    (run, tf)
                }
                Direction::KReference => {
                    let run = icp_with_index(ki, qs, q_starts[si], cfg);
                    let tf = run.transform.invert();
                    (run, tf)
                }
            };
            let k_star = transform.apply(k);
            let score = proportion_overlap_indexed(&k_star, &q_full_index, cfg.overlap_threshold_for_selection);
            CandidateDiagnostic {
                rate: *rate,
                start: si,
                direction,
                transform,
                objective: run.objective,
                iterations: run.iterations,
                selection_score: score,
                degenerate_correspondence: run.degenerate_correspondence,
            }
        })
        .collect();

    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        if c.selection_score > b.selection_score
            || (c.selection_score == b.selection_score && c.objective < b.objective)
        {
            best = i;
        }
    }
    let w = candidates[best].clone();
    Ok(AlignmentResult {
        transform: w.transform,
        objective: w.objective,
        selection_score: w.selection_score,
        direction: w.direction,
        start_used: w.start,
        rate_used: w.rate,
        candidates,
    })
}
