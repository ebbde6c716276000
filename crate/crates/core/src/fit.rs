//! Gradient descent of predicted coordinates under the stage-2 point losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{auxiliary_line_raw, point_line_raw, points_points_raw, LossOptions, LossWeights};
use crate::matcher::{match_prediction_set, point_permutations, Assignment};
use crate::model::{Point2, Prediction, PredictionSet, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub options: LossOptions,
    /// Halve a point's step until its own loss terms do not increase.
    /// Without it every step has size `lr` and the trace oscillates at kinks.
    pub backtrack: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.01,
            weights: LossWeights::default(),
            options: LossOptions::default(),
            backtrack: true,
        }
    }
}

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub predictions: PredictionSet,
    /// Loss before each step, then the final loss: `steps + 1` entries.
    pub trace: Vec<f64>,
    pub assignment: Assignment,
}

/// One matched prediction with its ground truth in matched point order.
struct Target {
    pred: usize,
    gt: Vec<Point2>,
    closed: bool,
}

/// Weighted point loss of one prediction and its gradient per point.
///
/// Every term involves a single predicted point, so the loss is a sum of
/// per-point parts and each gradient entry depends on its own point only.
fn instance_objective(points: &[Point2], t: &Target, cfg: &FitConfig) -> Result<(f64, Vec<[f64; 2]>)> {
    let w = &cfg.weights;
    let pl = point_line_raw(points, &t.gt, cfg.options.form)?;
    let pp = points_points_raw(points, &t.gt, t.closed)?;
    let al = auxiliary_line_raw(points, &t.gt)?;
    let value = w.beta * (w.alpha_pl * pl.value + w.alpha_pp * pp.value + w.alpha_al * al.value);
    let grad = (0..points.len())
        .map(|k| {
            let c = |d: usize| {
                w.beta * (w.alpha_pl * pl.grad[k][d] + w.alpha_pp * pp.grad[k][d] + w.alpha_al * al.grad[k][d])
            };
            [c(0), c(1)]
        })
        .collect();
    Ok((value, grad))
}

fn check_finite(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("loss became {value} at step {step}")))
    }
}

/// Matches once, then takes `steps` gradient steps on
/// `beta * (alpha_pl L_pl + alpha_pp L_pp + alpha_al L_al)`. Unmatched
/// predictions do not move. Scores and logits are carried over unchanged.
pub fn fit_points(preds: &PredictionSet, gts: &Scene, cfg: &FitConfig) -> Result<FitResult> {
    cfg.weights.validate()?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate {} must be positive", cfg.lr)));
    }
    let assignment = match_prediction_set(preds, gts, cfg.options.class_weight)?;
    let targets: Vec<Target> = assignment
        .pairs
        .iter()
        .map(|pair| {
            let gt = &gts.instances()[pair.gt];
            let perm = &point_permutations(gt)[pair.permutation];
            Target { pred: pair.pred, gt: perm.iter().map(|&i| gt.points()[i]).collect(), closed: gt.closed() }
        })
        .collect();
    for t in &targets {
        if preds.predictions()[t.pred].instance.len() != t.gt.len() {
            return Err(Error::ShapeMismatch("prediction and ground truth differ in point count".into()));
        }
    }
    let mut points: Vec<Vec<Point2>> = preds.instances().map(|i| i.points().to_vec()).collect();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(targets.len());
        for t in &targets {
            let (v, g) = instance_objective(&points[t.pred], t, cfg)?;
            check_finite(v, step)?;
            total += v;
            grads.push(g);
        }
        trace.push(total);
        if step == cfg.steps {
            break;
        }
        for (t, grad) in targets.iter().zip(grads) {
            let pts = &mut points[t.pred];
            if !cfg.backtrack {
                for (p, g) in pts.iter_mut().zip(&grad) {
                    p.x -= cfg.lr * g[0];
                    p.y -= cfg.lr * g[1];
                }
                continue;
            }
            let mut current = instance_objective(pts, t, cfg)?.0;
            for (k, g) in grad.iter().enumerate() {
                if g[0] == 0.0 && g[1] == 0.0 {
                    continue;
                }
                let origin = pts[k];
                let mut lr = cfg.lr;
                for _ in 0..MAX_HALVINGS {
                    pts[k] = Point2::new(origin.x - lr * g[0], origin.y - lr * g[1]);
                    let trial = instance_objective(pts, t, cfg)?.0;
                    if trial <= current {
                        current = trial;
                        break;
                    }
                    pts[k] = origin;
                    lr *= 0.5;
                }
            }
        }
        if points.iter().flatten().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::Numerical(format!("non-finite coordinate after step {step}")));
        }
    }
    let predictions = preds
        .predictions()
        .iter()
        .zip(points)
        .map(|(p, pts)| {
            Ok(Prediction { instance: p.instance.with_points(pts)?, score: p.score, logits: p.logits.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FitResult { predictions: PredictionSet::new(preds.range(), predictions)?, trace, assignment })
}
