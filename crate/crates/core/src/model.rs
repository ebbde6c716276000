//! Scene geometry: points, map elements, the BEV range and its raster grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum separation between consecutive vertices, in meters.
pub const MIN_VERTEX_GAP: f64 = 1e-9;

/// A point in the BEV plane; `x` is lateral, `y` longitudinal, both in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn l1(self, other: Point2) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Point2::new(x, y)
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    Divider,
    PedCrossing,
    Boundary,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::Divider, MapClass::PedCrossing, MapClass::Boundary];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<MapClass> {
        Self::ALL.get(i).copied()
    }

    /// Pedestrian crossings are the only closed elements.
    pub fn is_closed(self) -> bool {
        self == MapClass::PedCrossing
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::Divider => "divider",
            MapClass::PedCrossing => "ped_crossing",
            MapClass::Boundary => "boundary",
        }
    }
}

/// One vectorized road element.
///
/// Closed elements do not repeat their first vertex; closure is carried by the
/// flag alone.
#[derive(Debug, Clone, PartialEq)]
pub struct MapInstance {
    class: MapClass,
    points: Vec<Point2>,
    closed: bool,
}

impl MapInstance {
    /// Builds an instance whose closure follows its class.
    pub fn new(class: MapClass, points: Vec<Point2>) -> Result<Self> {
        Self::with_closure(class, points, class.is_closed())
    }

    pub fn with_closure(class: MapClass, points: Vec<Point2>, closed: bool) -> Result<Self> {
        if closed != class.is_closed() {
            return Err(Error::InvalidInstance(format!(
                "{} must have closed={}",
                class.name(),
                class.is_closed()
            )));
        }
        if points.len() < 2 {
            return Err(Error::InvalidInstance(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::InvalidInstance(format!("non-finite point ({}, {})", p.x, p.y)));
        }
        let inst = Self { class, points, closed };
        if let Some((i, j)) = inst.segments().find(|&(i, j)| inst.points[i].dist(inst.points[j]) <= MIN_VERTEX_GAP) {
            return Err(Error::InvalidInstance(format!("points {i} and {j} coincide")));
        }
        Ok(inst)
    }

    pub fn class(&self) -> MapClass {
        self.class
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Replaces the vertices, re-running validation.
    pub fn with_points(&self, points: Vec<Point2>) -> Result<Self> {
        Self::with_closure(self.class, points, self.closed)
    }

    /// Index pairs of the polyline's segments, including the closing one.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.points.len();
        let count = if self.closed && n > 2 { n } else { n - 1 };
        (0..count).map(move |i| (i, (i + 1) % n))
    }

    pub fn arc_length(&self) -> f64 {
        self.segments()
            .map(|(i, j)| self.points[i].dist(self.points[j]))
            .sum()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        self.with_points(
            self.points
                .iter()
                .map(|p| Point2::new(p.x + dx, p.y + dy))
                .collect(),
        )
    }
}

/// Metric extent of the BEV plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for BevRange {
    fn default() -> Self {
        Self {
            x_min: -15.0,
            x_max: 15.0,
            y_min: -30.0,
            y_max: 30.0,
        }
    }
}

impl BevRange {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) || ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "empty range x[{x_min}, {x_max}] y[{y_min}, {y_max}]"
            )));
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    pub fn x_extent(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn y_extent(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn clamp(&self, p: Point2) -> Point2 {
        Point2::new(p.x.clamp(self.x_min, self.x_max), p.y.clamp(self.y_min, self.y_max))
    }

    /// Maps a metric point to `[0, 1]^2`.
    pub fn normalize(&self, p: Point2) -> Point2 {
        Point2::new(
            (p.x - self.x_min) / self.x_extent(),
            (p.y - self.y_min) / self.y_extent(),
        )
    }

    pub fn denormalize(&self, p: Point2) -> Point2 {
        Point2::new(
            self.x_min + p.x * self.x_extent(),
            self.y_min + p.y * self.y_extent(),
        )
    }
}

/// A validated set of ground-truth elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    range: BevRange,
    instances: Vec<MapInstance>,
}

impl Scene {
    pub fn new(range: BevRange, instances: Vec<MapInstance>) -> Result<Self> {
        for inst in &instances {
            if let Some(p) = inst.points().iter().find(|p| !range.contains(**p)) {
                return Err(Error::OutOfRange { x: p.x, y: p.y });
            }
        }
        Ok(Self { range, instances })
    }

    pub fn range(&self) -> BevRange {
        self.range
    }

    pub fn instances(&self) -> &[MapInstance] {
        &self.instances
    }
}

/// One decoded element with its confidence and class logits.
///
/// `logits` has one entry per [`MapClass`] followed by a background entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub instance: MapInstance,
    pub score: f64,
    pub logits: Vec<f64>,
}

/// Decoder output: a fixed number of predictions sharing a point count.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    range: BevRange,
    predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(range: BevRange, predictions: Vec<Prediction>) -> Result<Self> {
        if let Some(p) = predictions.iter().find(|p| !p.score.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite score {}", p.score)));
        }
        if let Some(first) = predictions.first() {
            let m = first.instance.len();
            if predictions.iter().any(|p| p.instance.len() != m) {
                return Err(Error::ShapeMismatch("predictions differ in point count".into()));
            }
        }
        Ok(Self { range, predictions })
    }

    pub fn empty(range: BevRange) -> Self {
        Self { range, predictions: Vec::new() }
    }

    pub fn range(&self) -> BevRange {
        self.range
    }

    pub fn predictions(&self) -> &[Prediction] {
        &self.predictions
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn instances(&self) -> impl Iterator<Item = &MapInstance> {
        self.predictions.iter().map(|p| &p.instance)
    }

    /// Wraps ground truth as confident predictions.
    pub fn from_scene(scene: &Scene) -> Self {
        let predictions = scene
            .instances()
            .iter()
            .map(|inst| Prediction {
                instance: inst.clone(),
                score: 1.0,
                logits: one_hot_logits(inst.class(), 1.0),
            })
            .collect();
        Self { range: scene.range(), predictions }
    }
}

/// Logits whose softmax puts `prob` on `class` and spreads the rest evenly
/// over the other classes and background.
pub fn one_hot_logits(class: MapClass, prob: f64) -> Vec<f64> {
    let prob = prob.clamp(1e-6, 1.0 - 1e-6);
    let rest = ((1.0 - prob) / MapClass::COUNT as f64).ln();
    let mut logits = vec![rest; MapClass::COUNT + 1];
    logits[class.index()] = prob.ln();
    logits
}

/// Raster layout of a [`BevRange`]: rows index `y`, columns index `x`, row 0
/// at `y_min`. Cells are square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub h: usize,
    pub w: usize,
    pub range: BevRange,
    pub resolution: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self::new(BevRange::default(), 0.3).expect("default grid is consistent")
    }
}

impl BevGridSpec {
    pub fn new(range: BevRange, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidParameter(format!("resolution {resolution} must be positive")));
        }
        let h = (range.y_extent() / resolution).round();
        let w = (range.x_extent() / resolution).round();
        let fits = |cells: f64, extent: f64| ((cells * resolution - extent) / extent).abs() < 1e-9;
        if !fits(h, range.y_extent()) || !fits(w, range.x_extent()) {
            return Err(Error::InvalidParameter(format!(
                "resolution {resolution} does not tile the range {}x{}",
                range.x_extent(),
                range.y_extent()
            )));
        }
        if h < 2.0 || w < 2.0 {
            return Err(Error::InvalidParameter(format!("grid {h}x{w} is smaller than 2x2")));
        }
        Ok(Self {
            h: h as usize,
            w: w as usize,
            range,
            resolution,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.h * self.w
    }

    /// Cell containing `p`. Points on the upper edges clamp into the last cell.
    pub fn world_to_grid(&self, p: Point2) -> Result<(usize, usize)> {
        if !self.range.contains(p) {
            return Err(Error::OutOfRange { x: p.x, y: p.y });
        }
        let row = ((p.y - self.range.y_min) / self.resolution).floor() as usize;
        let col = ((p.x - self.range.x_min) / self.resolution).floor() as usize;
        Ok((row.min(self.h - 1), col.min(self.w - 1)))
    }

    /// Metric center of a cell.
    pub fn grid_to_world(&self, (row, col): (usize, usize)) -> Result<Point2> {
        if row >= self.h || col >= self.w {
            return Err(Error::IndexOutOfBounds { row, col, h: self.h, w: self.w });
        }
        Ok(self.cell_center(row, col))
    }

    pub(crate) fn cell_center(&self, row: usize, col: usize) -> Point2 {
        Point2::new(
            self.range.x_min + (col as f64 + 0.5) * self.resolution,
            self.range.y_min + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Continuous grid coordinates `(col, row)` of a metric point.
    pub fn to_grid_coords(&self, p: Point2) -> (f64, f64) {
        (
            (p.x - self.range.x_min) / self.resolution,
            (p.y - self.range.y_min) / self.resolution,
        )
    }
}

/// Resamples a polyline to `m` points equally spaced by arc length.
///
/// Open polylines keep both endpoints. Closed polylines are walked as a cycle
/// starting at their first vertex with spacing `length / m`.
pub fn resample_polyline(inst: &MapInstance, m: usize) -> Result<MapInstance> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!("cannot resample to {m} points")));
    }
    let pts = inst.points();
    let mut cumulative = Vec::with_capacity(pts.len() + 1);
    cumulative.push(0.0);
    let segs: Vec<(usize, usize)> = inst.segments().collect();
    for &(i, j) in &segs {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + pts[i].dist(pts[j]));
    }
    let total = *cumulative.last().unwrap();
    if !(total > MIN_VERTEX_GAP) {
        return Err(Error::DegenerateGeometry("polyline has zero length".into()));
    }
    let step = if inst.closed() { total / m as f64 } else { total / (m - 1) as f64 };

    let mut out = Vec::with_capacity(m);
    let mut seg = 0;
    for k in 0..m {
        let s = if !inst.closed() && k == m - 1 { total } else { step * k as f64 };
        while seg + 1 < segs.len() && cumulative[seg + 1] < s {
            seg += 1;
        }
        let (i, j) = segs[seg];
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = ((s - cumulative[seg]) / len).clamp(0.0, 1.0);
        out.push(if t == 1.0 { pts[j] } else { pts[i].lerp(pts[j], t) });
    }
    inst.with_points(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_grid() -> BevGridSpec {
        BevGridSpec::default()
    }

    fn open(points: &[(f64, f64)]) -> MapInstance {
        MapInstance::new(MapClass::Divider, points.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn default_grid_is_200_by_100() {
        let g = default_grid();
        assert_eq!((g.h, g.w), (200, 100));
    }

    #[test]
    fn world_to_grid_examples() {
        let g = default_grid();
        assert_eq!(g.world_to_grid(Point2::new(-15.0, -30.0)).unwrap(), (0, 0));
        assert_eq!(g.world_to_grid(Point2::new(0.0, 0.0)).unwrap(), (100, 50));
        assert_eq!(g.world_to_grid(Point2::new(14.999, 29.999)).unwrap(), (199, 99));
        assert_eq!(g.world_to_grid(Point2::new(15.0, 30.0)).unwrap(), (199, 99));
        assert!(matches!(
            g.world_to_grid(Point2::new(15.1, 0.0)),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn grid_to_world_examples() {
        let g = default_grid();
        let p = g.grid_to_world((0, 0)).unwrap();
        assert!((p.x + 14.85).abs() < 1e-12 && (p.y + 29.85).abs() < 1e-12);
        let p = g.grid_to_world((100, 50)).unwrap();
        assert!((p.x - 0.15).abs() < 1e-12 && (p.y - 0.15).abs() < 1e-12);
        assert!(matches!(g.grid_to_world((200, 0)), Err(Error::IndexOutOfBounds { .. })));
    }

    #[test]
    fn grid_round_trip_is_identity() {
        let small = BevGridSpec::new(BevRange::new(-2.0, 2.0, -2.0, 2.0).unwrap(), 1.0).unwrap();
        assert_eq!((small.h, small.w), (4, 4));
        for grid in [small, default_grid()] {
            for row in 0..grid.h {
                for col in 0..grid.w {
                    let p = grid.grid_to_world((row, col)).unwrap();
                    assert_eq!(grid.world_to_grid(p).unwrap(), (row, col));
                }
            }
        }
    }

    #[test]
    fn grid_rejects_non_tiling_resolution() {
        assert!(BevGridSpec::new(BevRange::default(), 0.7).is_err());
        assert!(BevGridSpec::new(BevRange::default(), 20.0).is_err());
    }

    #[test]
    fn instance_validation() {
        let p = |x, y| Point2::new(x, y);
        assert!(MapInstance::new(MapClass::Divider, vec![p(0.0, 0.0)]).is_err());
        assert!(MapInstance::new(MapClass::Divider, vec![p(0.0, 0.0), p(0.0, 0.0)]).is_err());
        assert!(MapInstance::with_closure(MapClass::Divider, vec![p(0.0, 0.0), p(1.0, 0.0)], true).is_err());
        assert!(MapInstance::with_closure(MapClass::PedCrossing, vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0)], false).is_err());
        // closing edge counts as consecutive
        assert!(MapInstance::new(MapClass::PedCrossing, vec![p(0.0, 0.0), p(1.0, 0.0), p(0.0, 0.0)]).is_err());
    }

    #[test]
    fn scene_rejects_out_of_range_points() {
        let inst = open(&[(0.0, 0.0), (0.0, 31.0)]);
        assert!(matches!(
            Scene::new(BevRange::default(), vec![inst]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn resample_uniform_split() {
        let r = resample_polyline(&open(&[(0.0, 0.0), (0.0, 2.0)]), 3).unwrap();
        assert_eq!(r.points(), &[Point2::new(0.0, 0.0), Point2::new(0.0, 1.0), Point2::new(0.0, 2.0)]);
        let r = resample_polyline(&open(&[(0.0, 0.0), (0.0, 2.0)]), 2).unwrap();
        assert_eq!(r.points(), &[Point2::new(0.0, 0.0), Point2::new(0.0, 2.0)]);
    }

    /// Independent walk: for each target distance scan every segment from the
    /// start and interpolate.
    fn arc_length_oracle(pts: &[Point2], closed: bool, m: usize) -> Vec<Point2> {
        let mut ring: Vec<Point2> = pts.to_vec();
        if closed {
            ring.push(pts[0]);
        }
        let total: f64 = ring.windows(2).map(|w| w[0].dist(w[1])).sum();
        let step = if closed { total / m as f64 } else { total / (m - 1) as f64 };
        (0..m)
            .map(|k| {
                let mut remaining = step * k as f64;
                for w in ring.windows(2) {
                    let len = w[0].dist(w[1]);
                    if remaining <= len {
                        return w[0].lerp(w[1], remaining / len);
                    }
                    remaining -= len;
                }
                *ring.last().unwrap()
            })
            .collect()
    }

    #[test]
    fn resample_closed_square_hits_corners() {
        let corners = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ];
        let sq = MapInstance::new(MapClass::PedCrossing, corners.clone()).unwrap();
        let r = resample_polyline(&sq, 4).unwrap();
        let oracle = arc_length_oracle(&corners, true, 4);
        for (a, b) in r.points().iter().zip(&oracle) {
            assert!(a.dist(*b) < 1e-12);
        }
        for c in &corners {
            assert!(r.points().iter().any(|p| p.dist(*c) < 1e-12));
        }
        assert!((r.arc_length() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn resample_matches_oracle_on_bent_polyline() {
        let pts = [(0.0, 0.0), (3.0, 1.0), (4.0, 5.0), (-2.0, 7.5)];
        let inst = open(&pts);
        for m in [2, 3, 7, 20] {
            let r = resample_polyline(&inst, m).unwrap();
            let oracle = arc_length_oracle(inst.points(), false, m);
            for (a, b) in r.points().iter().zip(&oracle) {
                assert!(a.dist(*b) < 1e-9, "m={m}: {a:?} vs {b:?}");
            }
            assert_eq!(r.points()[0], inst.points()[0]);
            assert_eq!(r.points()[m - 1], inst.points()[3]);
        }
    }

    #[test]
    fn resample_rejects_bad_count() {
        assert!(resample_polyline(&open(&[(0.0, 0.0), (1.0, 0.0)]), 1).is_err());
    }
}
