//! Point-to-line loss suite with analytic gradients.
//!
//! Instance losses take a prediction and a ground truth whose point
//! correspondence has already been resolved by the matcher. Gradients are
//! with respect to the predicted coordinates; at L1 kinks and for points
//! exactly on a ground-truth line the subgradient 0 is used.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{GaussianWeightField, Heatmap};
use crate::matcher::{match_instances, point_permutations, Assignment};
use crate::model::{BevRange, MapClass, MapInstance, Point2};

/// Probability clamp used by the focal losses.
pub const PROB_EPS: f64 = 1e-7;

/// Loss value together with its gradient per predicted point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLoss {
    pub value: f64,
    pub grad: Vec<[f64; 2]>,
}

impl PointLoss {
    fn zero(m: usize) -> Self {
        Self { value: 0.0, grad: vec![[0.0; 2]; m] }
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_lengths(pred: &[Point2], gt: &[Point2]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Accumulates `dis(p, g)` under L1 into `value` and `grad`.
fn add_l1(p: Point2, g: Point2, value: &mut f64, grad: &mut [f64; 2]) {
    let (dx, dy) = (p.x - g.x, p.y - g.y);
    *value += dx.abs() + dy.abs();
    grad[0] += sign0(dx);
    grad[1] += sign0(dy);
}

/// L1 distance of the start and end points. Closed elements have no
/// endpoints and contribute nothing.
pub fn points_points_loss(pred: &MapInstance, gt: &MapInstance) -> Result<PointLoss> {
    points_points_raw(pred.points(), gt.points(), gt.closed())
}

pub fn points_points_raw(pred: &[Point2], gt: &[Point2], closed: bool) -> Result<PointLoss> {
    check_lengths(pred, gt)?;
    let m = pred.len();
    let mut out = PointLoss::zero(m);
    if closed || m == 0 {
        return Ok(out);
    }
    for j in [0, m - 1] {
        add_l1(pred[j], gt[j], &mut out.value, &mut out.grad[j]);
    }
    Ok(out)
}

/// Which distance the point-line term measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLineForm {
    /// Perpendicular distance to the infinite line through the segment.
    #[default]
    Perpendicular,
    /// `|((p - g0) . (dx, -dy)) / |g1 - g0||` with `(dx, dy) = g1 - g0`; a
    /// dot-product variant kept only for comparison. It is not zero on the line.
    Printed,
}

/// Distance from each interior predicted point `p_j` to the line through the
/// ground-truth segment `(g_{j-1}, g_j)`, summed over `j = 1..=m-2`.
pub fn point_line_loss(pred: &MapInstance, gt: &MapInstance) -> Result<PointLoss> {
    point_line_raw(pred.points(), gt.points(), PointLineForm::Perpendicular)
}

pub fn point_line_loss_with(pred: &MapInstance, gt: &MapInstance, form: PointLineForm) -> Result<PointLoss> {
    point_line_raw(pred.points(), gt.points(), form)
}

pub fn point_line_raw(pred: &[Point2], gt: &[Point2], form: PointLineForm) -> Result<PointLoss> {
    check_lengths(pred, gt)?;
    let m = pred.len();
    let mut out = PointLoss::zero(m);
    for j in 1..m.saturating_sub(1) {
        let (g0, g1, p) = (gt[j - 1], gt[j], pred[j]);
        let (dx, dy) = (g1.x - g0.x, g1.y - g0.y);
        let len = dx.hypot(dy);
        if !(len > 1e-12) {
            return Err(Error::DegenerateGeometry(format!("ground-truth segment {} has zero length", j - 1)));
        }
        let (px, py) = (p.x - g0.x, p.y - g0.y);
        let (signed, gx, gy) = match form {
            PointLineForm::Perpendicular => (px * dy - py * dx, dy, -dx),
            PointLineForm::Printed => (px * dx - py * dy, dx, -dy),
        };
        let s = sign0(signed);
        out.value += signed.abs() / len;
        out.grad[j] = [s * gx / len, s * gy / len];
    }
    Ok(out)
}

/// Sum of L1 distances from each interior predicted point to both endpoints
/// of its ground-truth segment. Constant on the segment's bounding box and
/// growing outside it.
pub fn auxiliary_line_loss(pred: &MapInstance, gt: &MapInstance) -> Result<PointLoss> {
    auxiliary_line_raw(pred.points(), gt.points())
}

pub fn auxiliary_line_raw(pred: &[Point2], gt: &[Point2]) -> Result<PointLoss> {
    check_lengths(pred, gt)?;
    let m = pred.len();
    let mut out = PointLoss::zero(m);
    for j in 1..m.saturating_sub(1) {
        add_l1(pred[j], gt[j], &mut out.value, &mut out.grad[j]);
        add_l1(pred[j], gt[j - 1], &mut out.value, &mut out.grad[j]);
    }
    Ok(out)
}

/// Heatmap loss value and its gradient per predicted cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapLoss {
    pub value: f64,
    pub grad: Array3<f64>,
}

/// Penalty-reduced focal loss weighted per cell:
///
/// ```text
/// core (gt == 1):  -(1 - p)^2 log p
/// elsewhere:       -(1 - gt)^4 p^2 log(1 - p)
/// ```
///
/// Each term is scaled by the weight of its `(row, col)` and the sum is
/// divided by the number of core cells (at least 1). Predictions are clamped
/// to `[PROB_EPS, 1 - PROB_EPS]`; the gradient is zero where the clamp is
/// active.
pub fn heatmap_focal_loss(pred: &Heatmap, gt: &Heatmap, weight: &GaussianWeightField) -> Result<HeatmapLoss> {
    focal_raw(pred.values(), gt.values(), weight.values())
}

pub fn focal_raw(pred: &Array3<f64>, gt: &Array3<f64>, weight: &Array2<f64>) -> Result<HeatmapLoss> {
    let (c, h, w) = pred.dim();
    if gt.dim() != (c, h, w) || weight.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, gt {:?}, weight {:?}",
            pred.dim(),
            gt.dim(),
            weight.dim()
        )));
    }
    let cores = gt.iter().filter(|g| **g == 1.0).count().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for ((idx, &p_raw), &g) in pred.indexed_iter().zip(gt.iter()) {
        let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let active = p == p_raw;
        let wt = weight[[idx.1, idx.2]] / cores;
        let (term, d) = focal_term(p, g);
        value += wt * term;
        if active {
            grad[idx] = wt * d;
        }
    }
    Ok(HeatmapLoss { value, grad })
}

/// Unweighted focal term of one cell and its derivative in `p`.
fn focal_term(p: f64, g: f64) -> (f64, f64) {
    if g == 1.0 {
        let q = 1.0 - p;
        (-q * q * p.ln(), 2.0 * q * p.ln() - q * q / p)
    } else {
        let k = (1.0 - g).powi(4);
        let l = (1.0 - p).ln();
        (-k * p * p * l, -k * (2.0 * p * l - p * p / (1.0 - p)))
    }
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Classification loss value and gradient per logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLoss {
    pub value: f64,
    pub grad: Array2<f64>,
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax focal loss over `C + 1` logits per prediction (the last column is
/// background), averaged over predictions.
///
/// `targets[i]` is the matched class of prediction `i`, or `None` for
/// background.
pub fn classification_loss(logits: &Array2<f64>, targets: &[Option<MapClass>]) -> Result<ClassLoss> {
    let (n, k) = logits.dim();
    if targets.len() != n || (n > 0 && k != MapClass::COUNT + 1) {
        return Err(Error::ShapeMismatch(format!(
            "logits {n}x{k} vs {} targets and {} classes",
            targets.len(),
            MapClass::COUNT + 1
        )));
    }
    let mut grad = Array2::zeros((n, k));
    let mut value = 0.0;
    for (i, (row, target)) in logits.axis_iter(Axis(0)).zip(targets).enumerate() {
        let t = target.map_or(MapClass::COUNT, MapClass::index);
        let probs = softmax_row(row.as_slice().expect("standard layout"));
        let pt = probs[t].clamp(PROB_EPS, 1.0);
        let q = 1.0 - pt;
        value += -FOCAL_ALPHA * q.powf(FOCAL_GAMMA) * pt.ln();
        let dl_dpt = -FOCAL_ALPHA * (-FOCAL_GAMMA * q.powf(FOCAL_GAMMA - 1.0) * pt.ln() + q.powf(FOCAL_GAMMA) / pt);
        if probs[t] >= PROB_EPS {
            for (j, &pj) in probs.iter().enumerate() {
                let delta = if j == t { 1.0 } else { 0.0 };
                grad[[i, j]] = dl_dpt * pt * (delta - pj);
            }
        }
    }
    if n > 0 {
        value /= n as f64;
        grad /= n as f64;
    }
    Ok(ClassLoss { value, grad })
}

/// Weights of the total loss. Defaults follow the reference training setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_cls: f64,
    pub alpha_pl: f64,
    pub alpha_pp: f64,
    pub alpha_al: f64,
    pub alpha_heat: f64,
    /// First-stage (reference point) weight.
    pub gamma: f64,
    /// Second-stage weight.
    pub beta: f64,
    pub alpha_gauss: f64,
    pub beta_gauss: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_cls: 2.0,
            alpha_pl: 2.5,
            alpha_pp: 2.5,
            alpha_al: 2.5,
            alpha_heat: 0.6,
            gamma: 0.5,
            beta: 1.0,
            alpha_gauss: 0.8,
            beta_gauss: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_cls,
            self.alpha_pl,
            self.alpha_pp,
            self.alpha_al,
            self.alpha_heat,
            self.gamma,
            self.beta,
            self.alpha_gauss,
        ];
        if all.iter().any(|v| !(*v >= 0.0)) || !(self.beta_gauss > 0.0) {
            return Err(Error::InvalidParameter(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted per-stage loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageComponents {
    pub cls: f64,
    pub pl: f64,
    pub pp: f64,
    pub al: f64,
}

impl StageComponents {
    fn weighted(&self, w: &LossWeights) -> f64 {
        w.alpha_cls * self.cls + w.alpha_pl * self.pl + w.alpha_pp * self.pp + w.alpha_al * self.al
    }
}

/// `gamma * stage1 + beta * stage2 + alpha_heat * heat`, each stage weighted
/// per term.
pub fn total_loss(stage1: &StageComponents, stage2: &StageComponents, heat: f64, w: &LossWeights) -> f64 {
    w.gamma * stage1.weighted(w) + w.beta * stage2.weighted(w) + w.alpha_heat * heat
}

/// One decoder stage's predictions.
#[derive(Debug, Clone, Copy)]
pub struct StageInput<'a> {
    pub instances: &'a [MapInstance],
    /// `n x (C + 1)`
    pub logits: &'a Array2<f64>,
}

/// Loss terms of one stage and the gradient of their unweighted sum
/// contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLoss {
    pub components: StageComponents,
    pub assignment: Assignment,
    pub pl_grad: Vec<Vec<[f64; 2]>>,
    pub pp_grad: Vec<Vec<[f64; 2]>>,
    pub al_grad: Vec<Vec<[f64; 2]>>,
    pub cls_grad: Array2<f64>,
}

impl StageLoss {
    /// Gradient of the weighted point terms of this stage (without the stage
    /// multiplier).
    pub fn point_grad(&self, w: &LossWeights) -> Vec<Vec<[f64; 2]>> {
        self.pl_grad
            .iter()
            .zip(&self.pp_grad)
            .zip(&self.al_grad)
            .map(|((pl, pp), al)| {
                pl.iter()
                    .zip(pp)
                    .zip(al)
                    .map(|((a, b), c)| {
                        [
                            w.alpha_pl * a[0] + w.alpha_pp * b[0] + w.alpha_al * c[0],
                            w.alpha_pl * a[1] + w.alpha_pp * b[1] + w.alpha_al * c[1],
                        ]
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub form: PointLineForm,
    /// Matching penalty for a class mismatch, in normalized units.
    pub class_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { form: PointLineForm::Perpendicular, class_weight: 1.0 }
    }
}

/// Point losses of `pred` against `gt` reordered by `perm`.
pub fn pair_point_losses(
    pred: &MapInstance,
    gt: &MapInstance,
    perm: &[usize],
    form: PointLineForm,
) -> Result<(PointLoss, PointLoss, PointLoss)> {
    let gt_pts: Vec<Point2> = perm.iter().map(|&i| gt.points()[i]).collect();
    Ok((
        point_line_raw(pred.points(), &gt_pts, form)?,
        points_points_raw(pred.points(), &gt_pts, gt.closed())?,
        auxiliary_line_raw(pred.points(), &gt_pts)?,
    ))
}

/// Matches one stage against ground truth and evaluates its four terms.
///
/// Point terms sum over matched pairs; unmatched ground truth adds nothing.
pub fn stage_loss(stage: StageInput<'_>, gts: &[MapInstance], range: &BevRange, opts: &LossOptions) -> Result<StageLoss> {
    let assignment = match_instances(stage.instances, gts, range, opts.class_weight)?;
    let n = stage.instances.len();
    let zeros = |i: usize| vec![[0.0; 2]; stage.instances[i].len()];
    let mut pl_grad: Vec<_> = (0..n).map(zeros).collect();
    let mut pp_grad = pl_grad.clone();
    let mut al_grad = pl_grad.clone();
    let mut comp = StageComponents::default();
    for pair in &assignment.pairs {
        let gt = &gts[pair.gt];
        let perm = &point_permutations(gt)[pair.permutation];
        let (pl, pp, al) = pair_point_losses(&stage.instances[pair.pred], gt, perm, opts.form)?;
        comp.pl += pl.value;
        comp.pp += pp.value;
        comp.al += al.value;
        pl_grad[pair.pred] = pl.grad;
        pp_grad[pair.pred] = pp.grad;
        al_grad[pair.pred] = al.grad;
    }
    let targets: Vec<Option<MapClass>> = assignment
        .gt_of_pred(n)
        .into_iter()
        .map(|g| g.map(|j| gts[j].class()))
        .collect();
    let cls = classification_loss(stage.logits, &targets)?;
    comp.cls = cls.value;
    Ok(StageLoss { components: comp, assignment, pl_grad, pp_grad, al_grad, cls_grad: cls.grad })
}

/// Heatmap inputs of the total loss.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapInput<'a> {
    pub pred: &'a Heatmap,
    pub gt: &'a Heatmap,
    pub weight: &'a GaussianWeightField,
}

/// Every term of the total loss and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub stage1: StageComponents,
    pub stage2: StageComponents,
    pub heat: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub stage1_assignment: Assignment,
    pub stage2_assignment: Assignment,
    /// d total / d point, stage 1.
    pub stage1_point_grad: Vec<Vec<[f64; 2]>>,
    pub stage2_point_grad: Vec<Vec<[f64; 2]>>,
    /// d total / d logit.
    pub stage1_logit_grad: Array2<f64>,
    pub stage2_logit_grad: Array2<f64>,
    /// d total / d predicted heatmap cell.
    pub heatmap_grad: Option<Array3<f64>>,
}

impl LossBreakdown {
    /// Term name to value, for reports.
    pub fn to_json(&self) -> serde_json::Value {
        let stage = |s: &StageComponents| {
            serde_json::json!({ "cls": s.cls, "pl": s.pl, "pp": s.pp, "al": s.al })
        };
        serde_json::json!({
            "stage1": stage(&self.stage1),
            "stage2": stage(&self.stage2),
            "heat": self.heat,
            "total": self.total,
            "weights": self.weights,
        })
    }
}

fn scale(grads: Vec<Vec<[f64; 2]>>, k: f64) -> Vec<Vec<[f64; 2]>> {
    grads
        .into_iter()
        .map(|g| g.into_iter().map(|[a, b]| [k * a, k * b]).collect())
        .collect()
}

/// Evaluates both stages, the heatmap term and their weighted total.
///
/// Each stage is matched independently.
pub fn compute_losses(
    stage1: StageInput<'_>,
    stage2: StageInput<'_>,
    gts: &[MapInstance],
    range: &BevRange,
    heatmap: Option<HeatmapInput<'_>>,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let s1 = stage_loss(stage1, gts, range, opts)?;
    let s2 = stage_loss(stage2, gts, range, opts)?;
    let heat = heatmap
        .map(|h| heatmap_focal_loss(h.pred, h.gt, h.weight))
        .transpose()?;
    let heat_value = heat.as_ref().map_or(0.0, |h| h.value);
    let total = total_loss(&s1.components, &s2.components, heat_value, weights);
    if !total.is_finite() {
        return Err(Error::Numerical(format!("total loss is {total}")));
    }
    Ok(LossBreakdown {
        stage1: s1.components,
        stage2: s2.components,
        heat: heat_value,
        total,
        weights: *weights,
        stage1_point_grad: scale(s1.point_grad(weights), weights.gamma),
        stage2_point_grad: scale(s2.point_grad(weights), weights.beta),
        stage1_logit_grad: &s1.cls_grad * (weights.gamma * weights.alpha_cls),
        stage2_logit_grad: &s2.cls_grad * (weights.beta * weights.alpha_cls),
        heatmap_grad: heat.map(|h| h.grad * weights.alpha_heat),
        stage1_assignment: s1.assignment,
        stage2_assignment: s2.assignment,
    })
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares `analytic` against central differences `(f(x+e) - f(x-e)) / 2e`.
///
/// Coordinates flagged by `skip`, or whose analytic gradient is at most 1e-8
/// in magnitude, are not compared.
pub fn finite_difference_check<F, S>(mut f: F, x: &[f64], analytic: &[f64], eps: f64, skip: S) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
    S: Fn(usize) -> bool,
{
    assert!(eps > 0.0, "epsilon must be positive");
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for i in 0..x.len() {
        if skip(i) || analytic[i].abs() <= 1e-8 {
            out.skipped += 1;
            continue;
        }
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let rel = (numeric - analytic[i]).abs() / analytic[i].abs();
        out.max_rel_error = out.max_rel_error.max(rel);
        out.checked += 1;
    }
    out
}

/// The per-instance point losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceLoss {
    PointsPoints,
    PointLine,
    AuxiliaryLine,
}

impl InstanceLoss {
    pub fn eval(self, pred: &[Point2], gt: &MapInstance) -> Result<PointLoss> {
        match self {
            InstanceLoss::PointsPoints => points_points_raw(pred, gt.points(), gt.closed()),
            InstanceLoss::PointLine => point_line_raw(pred, gt.points(), PointLineForm::Perpendicular),
            InstanceLoss::AuxiliaryLine => auxiliary_line_raw(pred, gt.points()),
        }
    }

    /// Whether flat coordinate `k` (point `k / 2`, axis `k % 2`) lies within
    /// `tol` of a non-differentiable locus of this loss.
    pub fn near_kink(self, pred: &[Point2], gt: &MapInstance, k: usize, tol: f64) -> bool {
        let (j, axis) = (k / 2, k % 2);
        let m = pred.len();
        let coord = |p: Point2| if axis == 0 { p.x } else { p.y };
        let g = gt.points();
        match self {
            InstanceLoss::PointsPoints => {
                (j == 0 || j + 1 == m) && (coord(pred[j]) - coord(g[j])).abs() < tol
            }
            InstanceLoss::PointLine => {
                if j == 0 || j + 1 >= m {
                    return false;
                }
                let (g0, g1, p) = (g[j - 1], g[j], pred[j]);
                let (dx, dy) = (g1.x - g0.x, g1.y - g0.y);
                ((p.x - g0.x) * dy - (p.y - g0.y) * dx).abs() / dx.hypot(dy) < tol
            }
            InstanceLoss::AuxiliaryLine => {
                j > 0
                    && j + 1 < m
                    && ((coord(pred[j]) - coord(g[j])).abs() < tol
                        || (coord(pred[j]) - coord(g[j - 1])).abs() < tol)
            }
        }
    }
}

fn flatten(points: &[Point2]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn unflatten(x: &[f64]) -> Vec<Point2> {
    x.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect()
}

/// Finite-difference check of an instance loss at `pred`, skipping
/// coordinates within `10 * eps` of its kinks.
pub fn gradcheck_instance(kind: InstanceLoss, pred: &MapInstance, gt: &MapInstance, eps: f64) -> Result<GradCheck> {
    let analytic = kind.eval(pred.points(), gt)?;
    let x = flatten(pred.points());
    let g: Vec<f64> = analytic.grad.iter().flat_map(|v| *v).collect();
    Ok(finite_difference_check(
        |x| kind.eval(&unflatten(x), gt).map(|l| l.value).unwrap_or(f64::NAN),
        &x,
        &g,
        eps,
        |k| kind.near_kink(pred.points(), gt, k, 10.0 * eps),
    ))
}

/// Finite-difference check of the heatmap loss over every predicted cell.
pub fn gradcheck_heatmap(pred: &Heatmap, gt: &Heatmap, weight: &GaussianWeightField, eps: f64) -> Result<GradCheck> {
    assert!(eps > 0.0, "epsilon must be positive");
    let analytic = heatmap_focal_loss(pred, gt, weight)?;
    // The loss is a sum of independent cells over a constant normalizer, so
    // each partial only needs that cell's term.
    let cores = gt.values().iter().filter(|g| **g == 1.0).count().max(1) as f64;
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for ((idx, &p), &g) in pred.values().indexed_iter().zip(gt.values().iter()) {
        let a = analytic.grad[idx];
        if p - eps <= PROB_EPS || p + eps >= 1.0 - PROB_EPS || a.abs() <= 1e-8 {
            out.skipped += 1;
            continue;
        }
        let wt = weight.values()[[idx.1, idx.2]] / cores;
        let numeric = wt * (focal_term(p + eps, g).0 - focal_term(p - eps, g).0) / (2.0 * eps);
        out.max_rel_error = out.max_rel_error.max((numeric - a).abs() / a.abs());
        out.checked += 1;
    }
    Ok(out)
}

/// Finite-difference check of the classification loss over every logit.
pub fn gradcheck_classification(logits: &Array2<f64>, targets: &[Option<MapClass>], eps: f64) -> Result<GradCheck> {
    let analytic = classification_loss(logits, targets)?;
    let shape = logits.dim();
    let x: Vec<f64> = logits.iter().copied().collect();
    let g: Vec<f64> = analytic.grad.iter().copied().collect();
    Ok(finite_difference_check(
        |x| {
            let arr = Array2::from_shape_vec(shape, x.to_vec()).expect("same shape");
            classification_loss(&arr, targets).map(|l| l.value).unwrap_or(f64::NAN)
        },
        &x,
        &g,
        eps,
        |_| false,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(class: MapClass, pts: &[(f64, f64)]) -> MapInstance {
        MapInstance::new(class, pts.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap()
    }

    fn three(p1: (f64, f64), g0: (f64, f64), g1: (f64, f64)) -> (MapInstance, MapInstance) {
        // the third gt point only closes the polyline; p_1 pairs with (g0, g1)
        let gt = inst(MapClass::Divider, &[g0, g1, (g1.0 + 1.0, g1.1 + 7.0)]);
        let pred = inst(MapClass::Divider, &[g0, p1, (g1.0 + 1.0, g1.1 + 7.0)]);
        (pred, gt)
    }

    #[test]
    fn points_points_examples() {
        let gt = inst(MapClass::Divider, &[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(points_points_loss(&gt, &gt).unwrap().value, 0.0);
        let pred = inst(MapClass::Divider, &[(1.0, 1.0), (1.5, 0.0), (2.0, 0.0)]);
        let l = points_points_loss(&pred, &gt).unwrap();
        assert_eq!(l.value, 2.0);
        assert_eq!(l.grad[0], [1.0, 1.0]);
        assert_eq!(l.grad[2], [0.0, 0.0]);

        let sq = inst(MapClass::PedCrossing, &[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let off = inst(MapClass::PedCrossing, &[(5.0, 0.0), (1.0, 3.0), (1.0, 8.0), (0.0, 1.0)]);
        let l = points_points_loss(&off, &sq).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|g| *g == [0.0, 0.0]));
    }

    #[test]
    fn point_line_examples() {
        let (pred, gt) = three((1.0, 1.0), (0.0, 0.0), (2.0, 0.0));
        assert!((point_line_loss(&pred, &gt).unwrap().value - 1.0).abs() < 1e-15);
        let (pred, gt) = three((3.0, 4.0), (0.0, 0.0), (0.0, 2.0));
        assert!((point_line_loss(&pred, &gt).unwrap().value - 3.0).abs() < 1e-15);
        let (pred, gt) = three((7.0, 0.0), (0.0, 0.0), (2.0, 0.0));
        let l = point_line_loss(&pred, &gt).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad[1], [0.0, 0.0]);
    }

    #[test]
    fn printed_form_is_nonzero_on_the_line() {
        let (pred, gt) = three((1.0, 0.0), (0.0, 0.0), (2.0, 0.0));
        assert_eq!(point_line_loss(&pred, &gt).unwrap().value, 0.0);
        let printed = point_line_loss_with(&pred, &gt, PointLineForm::Printed).unwrap();
        assert!((printed.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn point_line_rejects_zero_length_segment() {
        let pred = [Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 0.0)];
        let gt = [Point2::new(0.0, 0.0), Point2::new(0.0, 0.0), Point2::new(2.0, 0.0)];
        assert!(matches!(
            point_line_raw(&pred, &gt, PointLineForm::Perpendicular),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn auxiliary_line_examples() {
        for (p1, expected) in [((1.0, 0.0), 2.0), ((3.0, 0.0), 4.0), ((1.0, 1.0), 4.0)] {
            let (pred, gt) = three(p1, (0.0, 0.0), (2.0, 0.0));
            assert_eq!(auxiliary_line_loss(&pred, &gt).unwrap().value, expected);
        }
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let a = inst(MapClass::Divider, &[(0.0, 0.0), (1.0, 0.0)]);
        let b = inst(MapClass::Divider, &[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert!(matches!(points_points_loss(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(auxiliary_line_loss(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(point_line_loss(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    fn hm(values: Vec<f64>, shape: (usize, usize, usize)) -> Heatmap {
        let mut full = Array3::zeros((MapClass::COUNT, shape.1, shape.2));
        let src = Array3::from_shape_vec(shape, values).unwrap();
        full.slice_mut(ndarray::s![..shape.0, .., ..]).assign(&src);
        Heatmap::from_array(full).unwrap()
    }

    #[test]
    fn focal_single_core() {
        let pred = Array3::from_elem((1, 1, 1), 0.5);
        let gt = Array3::from_elem((1, 1, 1), 1.0);
        let w = Array2::from_elem((1, 1), 1.0);
        let l = focal_raw(&pred, &gt, &w).unwrap();
        assert!((l.value - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l.value - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_perfect_prediction_and_weight_linearity() {
        let gt = hm(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], (1, 2, 3));
        let pred = hm(gt.values().mapv(|v| if v == 1.0 { 1.0 } else { 0.0 }).iter().copied().collect(), (3, 2, 3));
        let w = GaussianWeightField::uniform(2, 3, 1.0);
        assert!(heatmap_focal_loss(&pred, &gt, &w).unwrap().value < 1e-5);

        let pred = hm(vec![0.3, 0.2, 0.6, 0.9, 0.1, 0.4], (1, 2, 3));
        let a = heatmap_focal_loss(&pred, &gt, &w).unwrap().value;
        let b = heatmap_focal_loss(&pred, &gt, &w.scaled(2.0)).unwrap().value;
        assert!((b - 2.0 * a).abs() < 1e-14);
    }

    #[test]
    fn classification_examples() {
        let logits = Array2::zeros((1, 4));
        let l = classification_loss(&logits, &[Some(MapClass::Divider)]).unwrap();
        let expected = -0.25 * 0.75f64.powi(2) * 0.25f64.ln();
        assert!((l.value - expected).abs() < 1e-15);

        let mut sharp = Array2::from_elem((2, 4), -30.0);
        sharp[[0, 1]] = 30.0;
        sharp[[1, 3]] = 30.0;
        let l = classification_loss(&sharp, &[Some(MapClass::PedCrossing), None]).unwrap();
        assert!(l.value < 1e-5);

        let empty = Array2::zeros((0, 4));
        assert_eq!(classification_loss(&empty, &[]).unwrap().value, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let zero = StageComponents::default();
        assert_eq!(total_loss(&zero, &zero, 0.0, &w), 0.0);
        let pl = StageComponents { pl: 1.0, ..zero };
        assert_eq!(total_loss(&zero, &pl, 0.0, &w), 2.5);
        let pp = StageComponents { pp: 1.0, ..zero };
        assert_eq!(total_loss(&pp, &zero, 0.0, &w), 1.25);
        assert_eq!(total_loss(&zero, &zero, 1.0, &w), 0.6);
    }

    #[test]
    fn gradcheck_on_simple_cases() {
        let gt = inst(MapClass::Divider, &[(0.0, 0.0), (2.0, 0.3), (4.0, 1.0), (5.0, 3.0)]);
        let pred = inst(MapClass::Divider, &[(0.3, -0.2), (1.1, 0.9), (4.4, 0.2), (5.3, 2.6)]);
        for kind in [InstanceLoss::PointsPoints, InstanceLoss::PointLine, InstanceLoss::AuxiliaryLine] {
            let c = gradcheck_instance(kind, &pred, &gt, 1e-6).unwrap();
            assert!(c.checked > 0);
            assert!(c.max_rel_error < 1e-4, "{kind:?}: {c:?}");
        }
    }

    #[test]
    fn heatmap_gradcheck_matches_full_differences() {
        let gt = hm(vec![1.0, 0.4, 0.0, 0.8, 1.0, 0.1], (1, 2, 3));
        let pred = hm(vec![0.3, 0.2, 0.6, 0.9, 0.1, 0.4, 0.5, 0.7, 0.05, 0.2, 0.3, 0.6], (2, 2, 3));
        let w = GaussianWeightField::uniform(2, 3, 1.5);
        let c = gradcheck_heatmap(&pred, &gt, &w, 1e-6).unwrap();
        assert!(c.checked >= 12, "{c:?}");
        assert!(c.max_rel_error < 1e-6, "{c:?}");

        let analytic = heatmap_focal_loss(&pred, &gt, &w).unwrap();
        let x: Vec<f64> = pred.values().iter().copied().collect();
        let g: Vec<f64> = analytic.grad.iter().copied().collect();
        let full = finite_difference_check(
            |x| {
                let arr = Array3::from_shape_vec(pred.dim(), x.to_vec()).unwrap();
                focal_raw(&arr, gt.values(), w.values()).unwrap().value
            },
            &x,
            &g,
            1e-6,
            |k| x[k] <= 1e-6 + PROB_EPS,
        );
        assert_eq!(full.checked, c.checked);
        assert!(full.max_rel_error < 1e-5, "{full:?}");
    }
}
