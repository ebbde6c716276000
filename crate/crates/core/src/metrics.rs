//! Chamfer-distance average precision and smoothness diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{best_permutation, permute};
use crate::model::{resample_polyline, BevRange, MapClass, MapInstance, Point2, PredictionSet, Scene};

pub const DEFAULT_DENSIFY: usize = 100;
pub const STRICT_THRESHOLDS: [f64; 3] = [0.2, 0.5, 1.0];
pub const STANDARD_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

/// Turn angle (degrees) above which a predicted vertex counts as jitter.
pub const JITTER_PRED_DEG: f64 = 30.0;
/// The matching ground-truth vertex must turn less than this (degrees).
pub const JITTER_GT_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSet {
    Strict,
    Standard,
}

impl ThresholdSet {
    pub fn thresholds(self) -> [f64; 3] {
        match self {
            ThresholdSet::Strict => STRICT_THRESHOLDS,
            ThresholdSet::Standard => STANDARD_THRESHOLDS,
        }
    }
}

/// Symmetric chamfer distance between two instances after densifying each
/// to `densify` points by arc length.
pub fn chamfer_distance(a: &MapInstance, b: &MapInstance, densify: usize) -> Result<f64> {
    if densify < a.len().max(b.len()) {
        return Err(Error::InvalidParameter(format!(
            "densify {densify} is below the point count {}",
            a.len().max(b.len())
        )));
    }
    let da = resample_polyline(a, densify)?;
    let db = resample_polyline(b, densify)?;
    Ok(0.5 * (mean_nearest(da.points(), db.points()) + mean_nearest(db.points(), da.points())))
}

fn mean_nearest(from: &[Point2], to: &[Point2]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| (p.x - q.x).powi(2) + (p.y - q.y).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    sum / from.len() as f64
}

/// How the precision-recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApIntegration {
    /// Area under the monotone precision envelope over every recall step.
    #[default]
    Area,
    /// Mean of the envelope sampled at recalls 0, 0.01, ..., 1.
    Interp101,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApConfig {
    pub densify: usize,
    pub integration: ApIntegration,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self { densify: DEFAULT_DENSIFY, integration: ApIntegration::Area }
    }
}

/// Precision-recall points after each ranked prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: MapClass,
    pub threshold: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: MapClass,
    pub num_gt: usize,
    /// One AP per threshold; `None` when the class has no ground truth.
    pub per_threshold: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassAp>,
    /// Mean over classes present in the ground truth; 0 when none is.
    pub map: f64,
    pub curves: Vec<PrCurve>,
}

impl ApReport {
    pub fn class_ap(&self, class: MapClass) -> Option<f64> {
        self.classes[class.index()].mean
    }

    /// Per-class PR points as CSV: `class,threshold,rank,recall,precision`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("class,threshold,rank,recall,precision\n");
        for c in &self.curves {
            for (k, (r, p)) in c.recall.iter().zip(&c.precision).enumerate() {
                let _ = writeln!(out, "{},{},{},{:.6},{:.6}", c.class.name(), c.threshold, k + 1, r, p);
            }
        }
        out
    }
}

/// Integrates a PR curve given in rank order.
pub fn integrate_pr(recall: &[f64], precision: &[f64], mode: ApIntegration) -> f64 {
    match mode {
        ApIntegration::Area => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            let mut mpre = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mpre.push(0.0);
            mrec.extend_from_slice(recall);
            mpre.extend_from_slice(precision);
            mrec.push(1.0);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        ApIntegration::Interp101 => {
            (0..=100)
                .map(|k| {
                    let r = k as f64 / 100.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(rc, _)| **rc >= r - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 101.0
        }
    }
}

/// Greedy score-ordered matching. `dist[i][j]` is the distance from ranked
/// prediction `i` to ground truth `j`; each prediction takes the closest
/// still-unmatched ground truth if it is strictly closer than `threshold`.
pub fn greedy_match(dist: &[Vec<f64>], num_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; num_gt];
    dist.iter()
        .map(|row| {
            let best = (0..num_gt)
                .filter(|&j| !taken[j])
                .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))?;
            if row[best] < threshold {
                taken[best] = true;
                Some(best)
            } else {
                None
            }
        })
        .collect()
}

/// Ranked same-class predictions and their chamfer distances to each
/// same-class ground truth.
struct ClassTable {
    /// Indices into the prediction set, highest score first.
    ranked: Vec<usize>,
    gts: Vec<usize>,
    dist: Vec<Vec<f64>>,
}

fn class_table(preds: &PredictionSet, gts: &Scene, class: MapClass, densify: usize) -> Result<ClassTable> {
    let mut ranked: Vec<usize> = (0..preds.len())
        .filter(|&i| preds.predictions()[i].instance.class() == class)
        .collect();
    ranked.sort_by(|&a, &b| {
        preds.predictions()[b]
            .score
            .total_cmp(&preds.predictions()[a].score)
            .then(a.cmp(&b))
    });
    let gt_idx: Vec<usize> = (0..gts.instances().len())
        .filter(|&j| gts.instances()[j].class() == class)
        .collect();
    let dist = ranked
        .iter()
        .map(|&i| {
            gt_idx
                .iter()
                .map(|&j| chamfer_distance(&preds.predictions()[i].instance, &gts.instances()[j], densify))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(ClassTable { ranked, gts: gt_idx, dist })
}

fn pr_curve(matches: &[Option<usize>], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(matches.len());
    let mut precision = Vec::with_capacity(matches.len());
    for (k, m) in matches.iter().enumerate() {
        if m.is_some() {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    (recall, precision)
}

/// Chamfer AP per class and threshold, class means and their mean.
pub fn average_precision(preds: &PredictionSet, gts: &Scene, thresholds: &[f64], cfg: &ApConfig) -> Result<ApReport> {
    let mut classes = Vec::with_capacity(MapClass::COUNT);
    let mut curves = Vec::new();
    for class in MapClass::ALL {
        let table = class_table(preds, gts, class, cfg.densify)?;
        let num_gt = table.gts.len();
        let mut per_threshold = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            if num_gt == 0 {
                per_threshold.push(None);
                continue;
            }
            let matches = greedy_match(&table.dist, num_gt, t);
            let (recall, precision) = pr_curve(&matches, num_gt);
            per_threshold.push(Some(integrate_pr(&recall, &precision, cfg.integration)));
            curves.push(PrCurve { class, threshold: t, recall, precision });
        }
        let mean = (num_gt > 0)
            .then(|| per_threshold.iter().flatten().sum::<f64>() / thresholds.len() as f64);
        classes.push(ClassAp { class, num_gt, per_threshold, mean });
    }
    let present: Vec<f64> = classes.iter().filter_map(|c| c.mean).collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(ApReport { thresholds: thresholds.to_vec(), classes, map, curves })
}

/// Positive samples: `(prediction index, ground-truth index)` pairs matched
/// greedily within `threshold` (normally the largest of the active set).
pub fn positive_pairs(preds: &PredictionSet, gts: &Scene, threshold: f64, densify: usize) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for class in MapClass::ALL {
        let table = class_table(preds, gts, class, densify)?;
        for (rank, m) in greedy_match(&table.dist, table.gts.len(), threshold).into_iter().enumerate() {
            if let Some(j) = m {
                pairs.push((table.ranked[rank], table.gts[j]));
            }
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Unsigned turn angles (radians) at each vertex that has two neighbors:
/// interior vertices for open polylines, every vertex for closed ones.
pub fn turn_angles(inst: &MapInstance) -> Result<Vec<f64>> {
    let pts = inst.points();
    let m = pts.len();
    let vertices: Vec<usize> = if inst.closed() { (0..m).collect() } else { (1..m.saturating_sub(1)).collect() };
    vertices
        .into_iter()
        .map(|j| {
            let prev = pts[(j + m - 1) % m];
            let next = pts[(j + 1) % m];
            let a = pts[j].sub(prev);
            let b = next.sub(pts[j]);
            if a.x.hypot(a.y) <= 1e-12 || b.x.hypot(b.y) <= 1e-12 {
                return Err(Error::DegenerateGeometry(format!("zero-length segment at vertex {j}")));
            }
            Ok((a.x * b.y - a.y * b.x).abs().atan2(a.x * b.x + a.y * b.y))
        })
        .collect()
}

/// Reorders `gt` to the point order of `pred`.
fn aligned(pred: &MapInstance, gt: &MapInstance, range: &BevRange) -> Result<MapInstance> {
    let (perm, _) = best_permutation(pred, gt, range)?;
    Ok(permute(gt, &crate::matcher::point_permutations(gt)[perm]))
}

/// Mean chamfer distance over matched pairs; 0 when there are none.
pub fn acd(pairs: &[(&MapInstance, &MapInstance)], densify: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let sum = pairs
        .iter()
        .map(|(p, g)| chamfer_distance(p, g, densify))
        .sum::<Result<f64>>()?;
    Ok(sum / pairs.len() as f64)
}

/// Per pair, the summed absolute difference of vertex turn angles; averaged
/// over pairs.
pub fn ard(pairs: &[(&MapInstance, &MapInstance)], range: &BevRange) -> Result<f64> {
    per_pair_mean(pairs, range, |pa, ga| pa.iter().zip(ga).map(|(a, b)| (a - b).abs()).sum())
}

/// Per pair, the number of vertices turning more than 30 degrees in the
/// prediction while the ground truth turns less than 5; averaged over pairs.
pub fn ajp(pairs: &[(&MapInstance, &MapInstance)], range: &BevRange) -> Result<f64> {
    let (hi, lo) = (JITTER_PRED_DEG.to_radians(), JITTER_GT_DEG.to_radians());
    per_pair_mean(pairs, range, |pa, ga| {
        pa.iter().zip(ga).filter(|(a, b)| **a > hi && **b < lo).count() as f64
    })
}

fn per_pair_mean<F>(pairs: &[(&MapInstance, &MapInstance)], range: &BevRange, f: F) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (pred, gt) in pairs {
        let gt = aligned(pred, gt, range)?;
        sum += f(&turn_angles(pred)?, &turn_angles(&gt)?);
    }
    Ok(sum / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Meters.
    pub acd: f64,
    /// Radians, summed per instance.
    pub ard: f64,
    /// Jitter points per instance.
    pub ajp: f64,
    pub matched: usize,
}

/// ACD, ARD and AJP over predictions matched within the largest threshold.
pub fn diagnostics(preds: &PredictionSet, gts: &Scene, thresholds: &[f64], densify: usize) -> Result<DiagnosticsReport> {
    let t_max = thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let idx = positive_pairs(preds, gts, t_max, densify)?;
    let pairs: Vec<(&MapInstance, &MapInstance)> = idx
        .iter()
        .map(|&(i, j)| (&preds.predictions()[i].instance, &gts.instances()[j]))
        .collect();
    Ok(DiagnosticsReport {
        acd: acd(&pairs, densify)?,
        ard: ard(&pairs, &gts.range())?,
        ajp: ajp(&pairs, &gts.range())?,
        matched: pairs.len(),
    })
}

/// Fixed-width table in the usual column order (AP_div, AP_ped, AP_bou, mAP),
/// values in percent.
pub fn format_table(ap: &ApReport, diag: &DiagnosticsReport) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "     -".to_string(), |v| format!("{:6.1}", 100.0 * v));
    let mut out = String::new();
    let thresholds: Vec<String> = ap.thresholds.iter().map(|t| format!("{t}")).collect();
    let _ = writeln!(out, "thresholds [{}] m", thresholds.join(", "));
    let _ = writeln!(out, "{:>6} {:>6} {:>6} {:>6}", "AP_div", "AP_ped", "AP_bou", "mAP");
    let _ = writeln!(
        out,
        "{} {} {} {}",
        cell(ap.class_ap(MapClass::Divider)),
        cell(ap.class_ap(MapClass::PedCrossing)),
        cell(ap.class_ap(MapClass::Boundary)),
        cell(Some(ap.map))
    );
    let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8}", "ACD", "ARD", "AJP", "matched");
    let _ = writeln!(out, "{:8.3} {:8.3} {:8.2} {:8}", diag.acd, diag.ard, diag.ajp, diag.matched);
    out
}
