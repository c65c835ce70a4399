//! 2D point clouds, rigid transforms and the KD-tree used for every
//! nearest-neighbor query in the pipeline.

use std::io::{Read, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::stats::quantile_sorted;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }
}

/// An ordered collection of 2D points. Duplicates are allowed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    points: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn range_x(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn range_y(&self) -> f64 {
        self.max_y - self.min_y
    }
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn from_xy(xy: &[(f64, f64)]) -> Self {
        Self::new(xy.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn bounds(&self) -> Option<Bounds> {
        let first = self.points.first()?;
        let mut b = Bounds { min_x: first.x, max_x: first.x, min_y: first.y, max_y: first.y };
        for p in &self.points[1..] {
            b.min_x = b.min_x.min(p.x);
            b.max_x = b.max_x.max(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_y = b.max_y.max(p.y);
        }
        Some(b)
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let n = self.points.len() as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Some(Point::new(sx / n, sy / n))
    }

    /// Union of two clouds (concatenation).
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut pts = self.points.clone();
        pts.extend_from_slice(&other.points);
        PointCloud::new(pts)
    }

    /// Reads the `x,y` CSV format.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
            return Err(Error::Format(format!("expected header x,y, got {:?}", headers)));
        }
        let mut pts = Vec::new();
        for rec in rdr.deserialize::<(f64, f64)>() {
            let (x, y) = rec?;
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Format("non-finite coordinate".into()));
            }
            pts.push(Point::new(x, y));
        }
        Ok(Self::new(pts))
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "y"])?;
        for p in &self.points {
            w.write_record([p.x.to_string(), p.y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<T: IntoIterator<Item = Point>>(iter: T) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Rotation by `theta` radians about the origin followed by translation `(tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform { theta: 0.0, tx: 0.0, ty: 0.0 };

    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        Self { theta, tx, ty }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { theta: 0.0, tx, ty }
    }

    #[inline]
    pub fn apply_point(&self, p: &Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        Point::new(c * p.x - s * p.y + self.tx, s * p.x + c * p.y + self.ty)
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let (s, c) = self.theta.sin_cos();
        cloud
            .points
            .iter()
            .map(|p| Point::new(c * p.x - s * p.y + self.tx, s * p.x + c * p.y + self.ty))
            .collect()
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        let t = self.apply_point(&Point::new(first.tx, first.ty));
        RigidTransform { theta: wrap_angle(self.theta + first.theta), tx: t.x, ty: t.y }
    }

    pub fn invert(&self) -> RigidTransform {
        let (s, c) = (-self.theta).sin_cos();
        RigidTransform {
            theta: wrap_angle(-self.theta),
            tx: -(c * self.tx - s * self.ty),
            ty: -(s * self.tx + c * self.ty),
        }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
struct KdNode {
    start: u32,
    end: u32,
    // u32::MAX marks a leaf
    left: u32,
    right: u32,
    axis: u8,
    split: f64,
}

/// Nearest-neighbor answer: the original insertion index, the point and its distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub point: Point,
    pub distance: f64,
}

/// Balanced 2D KD-tree with median splits. Immutable after construction.
///
/// Ties in distance resolve to the lowest insertion index, so answers agree
/// exactly with an exhaustive scan.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Vec<Point>,
    ids: Vec<u32>,
    nodes: Vec<KdNode>,
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        let mut order: Vec<(Point, u32)> =
            cloud.points.iter().enumerate().map(|(i, p)| (*p, i as u32)).collect();
        let mut nodes = Vec::with_capacity(2 * cloud.len() / LEAF_SIZE + 1);
        if !order.is_empty() {
            let n = order.len();
            build_node(&mut order, 0, n, &mut nodes);
        }
        let (points, ids) = order.into_iter().unzip();
        Self { points, ids, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, q: &Point) -> Result<Neighbor> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud("nearest-neighbor index"));
        }
        let mut best = (f64::INFINITY, u32::MAX, 0usize);
        self.search(0, q, &mut best);
        let (d2, id, pos) = best;
        Ok(Neighbor { index: id as usize, point: self.points[pos], distance: d2.sqrt() })
    }

    /// Distance to the nearest indexed point; panics on an empty index.
    #[inline]
    pub fn nearest_distance(&self, q: &Point) -> f64 {
        self.nearest(q).expect("non-empty index").distance
    }

    fn search(&self, node: usize, q: &Point, best: &mut (f64, u32, usize)) {
        let n = &self.nodes[node];
        if n.left == u32::MAX {
            for pos in n.start as usize..n.end as usize {
                let d2 = self.points[pos].dist2(q);
                let id = self.ids[pos];
                if d2 < best.0 || (d2 == best.0 && id < best.1) {
                    *best = (d2, id, pos);
                }
            }
            return;
        }
        let coord = if n.axis == 0 { q.x } else { q.y };
        let diff = coord - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near as usize, q, best);
        if diff * diff <= best.0 {
            self.search(far as usize, q, best);
        }
    }
}

fn build_node(items: &mut [(Point, u32)], start: usize, end: usize, nodes: &mut Vec<KdNode>) -> u32 {
    let idx = nodes.len();
    nodes.push(KdNode { start: start as u32, end: end as u32, left: u32::MAX, right: u32::MAX, axis: 0, split: 0.0 });
    let len = end - start;
    if len <= LEAF_SIZE {
        return idx as u32;
    }
    let slice = &mut items[start..end];
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (p, _) in slice.iter() {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let axis: u8 = if max_x - min_x >= max_y - min_y { 0 } else { 1 };
    let key = |p: &Point| if axis == 0 { p.x } else { p.y };
    let mid = len / 2;
    slice.select_nth_unstable_by(mid, |a, b| key(&a.0).total_cmp(&key(&b.0)).then(a.1.cmp(&b.1)));
    let split = key(&slice[mid].0);
    let left = build_node(items, start, start + mid, nodes);
    let right = build_node(items, start + mid, end, nodes);
    let node = &mut nodes[idx];
    node.left = left;
    node.right = right;
    node.axis = axis;
    node.split = split;
    idx as u32
}

/// Uniform sample without replacement of `ceil(rate * n)` points, in input order.
pub fn downsample(cloud: &PointCloud, rate: f64, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("downsample"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("downsample rate {rate} not in (0, 1]")));
    }
    let n = cloud.len();
    // guard against 0.07 * 100 = 7.000000000000001
    let m = ((rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    if m == n {
        return Ok(cloud.clone());
    }
    let mut rng = seed::rng(seed);
    let mut picked = index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| cloud.points[i]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Foot {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl Foot {
    pub fn other(self) -> Foot {
        match self {
            Foot::Left => Foot::Right,
            Foot::Right => Foot::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Foot::Left => "L",
            Foot::Right => "R",
        }
    }
}

impl std::str::FromStr for Foot {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" | "l" | "left" | "Left" => Ok(Foot::Left),
            "R" | "r" | "right" | "Right" => Ok(Foot::Right),
            other => Err(Error::Format(format!("unknown foot {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Toe,
    Heel,
    Inside,
    Outside,
}

/// Which way the toe points in the plane coordinates of a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToeDirection {
    #[default]
    Up,
    Down,
}

/// A straight cut through the quantile midpoint of a print, with the side to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialCut {
    pub region: Region,
    pub foot: Foot,
    pub toe: ToeDirection,
    pub midpoint_x: f64,
    pub midpoint_y: f64,
}

impl PartialCut {
    /// Midpoints are the mean of the 0.025 and 0.975 coordinate quantiles, which
    /// keeps stray scanner specks from dragging the cut.
    pub fn for_cloud(cloud: &PointCloud, region: Region, foot: Foot, toe: ToeDirection) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud("partial cut"));
        }
        let mut xs: Vec<f64> = cloud.iter().map(|p| p.x).collect();
        let mut ys: Vec<f64> = cloud.iter().map(|p| p.y).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let mid = |v: &[f64]| (quantile_sorted(v, 0.025) + quantile_sorted(v, 0.975)) / 2.0;
        Ok(Self { region, foot, toe, midpoint_x: mid(&xs), midpoint_y: mid(&ys) })
    }

    pub fn keeps(&self, p: &Point) -> bool {
        match self.region {
            Region::Toe | Region::Heel => {
                let upper = p.y > self.midpoint_y;
                let toe_side = match self.toe {
                    ToeDirection::Up => upper,
                    ToeDirection::Down => !upper,
                };
                toe_side == (self.region == Region::Toe)
            }
            Region::Inside | Region::Outside => {
                let right_of = p.x > self.midpoint_x;
                // left foot: the inside edge faces +x; right foot is mirrored
                let inside = match self.foot {
                    Foot::Left => right_of,
                    Foot::Right => !right_of,
                };
                inside == (self.region == Region::Inside)
            }
        }
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let kept: PointCloud = cloud.iter().copied().filter(|p| self.keeps(p)).collect();
        if kept.is_empty() {
            return Err(Error::DegenerateCut(format!("{:?} cut kept no points", self.region)));
        }
        Ok(kept)
    }
}

/// Partial print cut with toe-up orientation.
pub fn cut_partial(cloud: &PointCloud, region: Region, foot: Foot) -> Result<PointCloud> {
    PartialCut::for_cloud(cloud, region, foot, ToeDirection::Up)?.apply(cloud)
}

/// Mirror about the vertical line through the middle of the cloud's x extent.
pub fn reflect(cloud: &PointCloud) -> PointCloud {
    let Some(b) = cloud.bounds() else {
        return PointCloud::default();
    };
    let axis = b.min_x + b.max_x;
    cloud.iter().map(|p| Point::new(axis - p.x, p.y)).collect()
}
