//! Seeded synthetic scenes and perturbed prediction sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    one_hot_logits, resample_polyline, BevRange, MapClass, MapInstance, Point2, Prediction, PredictionSet, Scene,
};
use crate::rng::Lcg64;

/// Keeps generated geometry this far inside the range.
const MARGIN: f64 = 1.0;
const CURVE_SAMPLES: usize = 64;
const MAX_ATTEMPTS: usize = 200;
/// Separates the perturbation stream from the scene stream of the same seed.
const PERTURB_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub dividers: usize,
    pub crossings: usize,
    pub boundaries: usize,
    /// Curvature magnitude bounds in 1/m.
    pub curvature: (f64, f64),
    /// Half-width of the uniform displacement, meters.
    pub noise: f64,
    /// Points per instance.
    pub m: usize,
    pub range: BevRange,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dividers: 2,
            crossings: 1,
            boundaries: 2,
            curvature: (0.0, 0.05),
            noise: 0.5,
            m: 8,
            range: BevRange::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise {} must be finite and >= 0", self.noise)));
        }
        let (lo, hi) = self.curvature;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("curvature range ({lo}, {hi}) is invalid")));
        }
        if self.m < 2 {
            return Err(Error::InvalidParameter(format!("m = {} must be at least 2", self.m)));
        }
        if self.range.x_extent() <= 4.0 * MARGIN || self.range.y_extent() <= 4.0 * MARGIN {
            return Err(Error::InvalidParameter("range too small for synthetic scenes".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.dividers + self.crossings + self.boundaries
    }
}

fn inner_bounds(range: &BevRange) -> (f64, f64, f64, f64) {
    (range.x_min + MARGIN, range.x_max - MARGIN, range.y_min + MARGIN, range.y_max - MARGIN)
}

fn inside(p: Point2, b: (f64, f64, f64, f64)) -> bool {
    p.x >= b.0 && p.x <= b.1 && p.y >= b.2 && p.y <= b.3
}

fn bezier(p0: Point2, c: Point2, p1: Point2, t: f64) -> Point2 {
    let u = 1.0 - t;
    Point2::new(
        u * u * p0.x + 2.0 * u * t * c.x + t * t * p1.x,
        u * u * p0.y + 2.0 * u * t * c.y + t * t * p1.y,
    )
}

/// Quadratic curve with a random start, heading, length and bend. The control
/// point is offset from the chord midpoint by `kappa * L^2 / 4`, which gives
/// roughly curvature `kappa` at the apex.
fn smooth_curve(rng: &mut Lcg64, cfg: &SynthConfig, class: MapClass) -> Result<MapInstance> {
    let b = inner_bounds(&cfg.range);
    let max_len = (b.1 - b.0).hypot(b.3 - b.2).min(30.0);
    for attempt in 0..MAX_ATTEMPTS {
        let start = Point2::new(rng.uniform(b.0, b.1), rng.uniform(b.2, b.3));
        let heading = rng.uniform(0.0, std::f64::consts::TAU);
        // shrink the length budget if the range keeps rejecting
        let len_hi = (max_len * (1.0 - attempt as f64 / MAX_ATTEMPTS as f64)).max(4.0);
        let len = rng.uniform(len_hi.min(8.0) * 0.5, len_hi);
        let kappa = rng.uniform(cfg.curvature.0, cfg.curvature.1) * if rng.coin() { 1.0 } else { -1.0 };
        let (dx, dy) = (heading.cos(), heading.sin());
        let end = Point2::new(start.x + len * dx, start.y + len * dy);
        let bend = kappa * len * len / 4.0;
        let mid = start.lerp(end, 0.5);
        let ctrl = Point2::new(mid.x - bend * dy, mid.y + bend * dx);
        let pts: Vec<Point2> = (0..CURVE_SAMPLES)
            .map(|k| bezier(start, ctrl, end, k as f64 / (CURVE_SAMPLES - 1) as f64))
            .collect();
        if pts.iter().all(|&p| inside(p, b)) {
            return resample_polyline(&MapInstance::new(class, pts)?, cfg.m);
        }
    }
    Err(Error::InvalidParameter("could not place a curve inside the range".into()))
}

/// Axis-aligned rectangle walked counter-clockwise from its lower-left corner.
fn crossing(rng: &mut Lcg64, cfg: &SynthConfig) -> Result<MapInstance> {
    let b = inner_bounds(&cfg.range);
    let w = rng.uniform(3.0, 8.0).min(b.1 - b.0);
    let h = rng.uniform(2.0, 5.0).min(b.3 - b.2);
    let x0 = rng.uniform(b.0, b.1 - w);
    let y0 = rng.uniform(b.2, b.3 - h);
    let corners = vec![
        Point2::new(x0, y0),
        Point2::new(x0 + w, y0),
        Point2::new(x0 + w, y0 + h),
        Point2::new(x0, y0 + h),
    ];
    resample_polyline(&MapInstance::new(MapClass::PedCrossing, corners)?, cfg.m)
}

/// Dividers, then crossings, then boundaries, all inside the range.
pub fn generate_scene(cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = Lcg64::new(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.total());
    for _ in 0..cfg.dividers {
        instances.push(smooth_curve(&mut rng, cfg, MapClass::Divider)?);
    }
    for _ in 0..cfg.crossings {
        instances.push(crossing(&mut rng, cfg)?);
    }
    for _ in 0..cfg.boundaries {
        instances.push(smooth_curve(&mut rng, cfg, MapClass::Boundary)?);
    }
    Scene::new(cfg.range, instances)
}

/// Displaces every point by uniform noise in `[-noise, noise]^2`, clamps to
/// the range and draws a score in `[0.5, 1]`.
///
/// A draw that collapses two consecutive points after clamping is redrawn;
/// after repeated failures the ground-truth geometry is kept.
pub fn perturb(scene: &Scene, cfg: &SynthConfig) -> Result<PredictionSet> {
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise {} must be finite and >= 0", cfg.noise)));
    }
    let range = scene.range();
    let mut rng = Lcg64::new(cfg.seed ^ PERTURB_STREAM);
    let mut preds = Vec::with_capacity(scene.instances().len());
    for gt in scene.instances() {
        let mut instance = None;
        for _ in 0..MAX_ATTEMPTS {
            let pts: Vec<Point2> = gt
                .points()
                .iter()
                .map(|p| {
                    let dx = rng.uniform(-cfg.noise, cfg.noise);
                    let dy = rng.uniform(-cfg.noise, cfg.noise);
                    range.clamp(Point2::new(p.x + dx, p.y + dy))
                })
                .collect();
            if let Ok(inst) = gt.with_points(pts) {
                instance = Some(inst);
                break;
            }
        }
        let instance = instance.unwrap_or_else(|| gt.clone());
        let score = rng.uniform(0.5, 1.0);
        let logits = one_hot_logits(instance.class(), score);
        preds.push(Prediction { instance, score, logits });
    }
    PredictionSet::new(range, preds)
}
