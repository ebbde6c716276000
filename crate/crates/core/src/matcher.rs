//! Set matching between predictions and ground truth.
//!
//! Point order is ambiguous for map elements: an open polyline may be drawn
//! in either direction, and a closed polygon may start at any vertex and run
//! either way. Matching therefore searches every equivalent ordering of the
//! ground truth before comparing points.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BevRange, MapInstance, Point2, PredictionSet, Scene};

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs.
///
/// Returns `(row, col)` pairs sorted by row and the total cost. Uses the
/// shortest augmenting path formulation with row/column potentials, O(n^2 m).
pub fn hungarian(cost: &Array2<f64>) -> (Vec<(usize, usize)>, f64) {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return (Vec::new(), 0.0);
    }
    if rows > cols {
        let (pairs, total) = hungarian(&cost.t().to_owned());
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return (pairs, total);
    }

    // 1-based arrays; column 0 is the virtual start.
    let n = rows;
    let m = cols;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[[r, c]]).sum();
    (pairs, total)
}

/// Index orderings of `inst` that describe the same geometry.
///
/// Open: `[identity, reversal]`. Closed with `m` points: ids `0..m` are the
/// forward cyclic shifts by `id`, ids `m..2m` the reversed walks starting at
/// vertex `id - m`.
pub fn point_permutations(inst: &MapInstance) -> Vec<Vec<usize>> {
    let m = inst.len();
    if !inst.closed() {
        return vec![(0..m).collect(), (0..m).rev().collect()];
    }
    let forward = (0..m).map(|s| (0..m).map(|k| (s + k) % m).collect());
    let reversed = (0..m).map(|s| (0..m).map(|k| (s + m - k) % m).collect());
    forward.chain(reversed).collect()
}

/// Applies a permutation: `out[k] = inst[perm[k]]`.
pub fn permute(inst: &MapInstance, perm: &[usize]) -> MapInstance {
    let pts = perm.iter().map(|&i| inst.points()[i]).collect();
    inst.with_points(pts).expect("a permutation of a valid instance stays valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    /// Index into [`point_permutations`] of the ground truth.
    pub permutation: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.cost).sum()
    }

    /// Matched ground-truth index per prediction, `None` when unmatched.
    pub fn gt_of_pred(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for p in &self.pairs {
            out[p.pred] = Some(p.gt);
        }
        out
    }
}

fn mean_l1(a: &[Point2], b: &MapInstance, perm: &[usize], range: &BevRange) -> f64 {
    let (sx, sy) = (range.x_extent(), range.y_extent());
    let sum: f64 = a
        .iter()
        .zip(perm)
        .map(|(p, &i)| {
            let g = b.points()[i];
            ((p.x - g.x) / sx).abs() + ((p.y - g.y) / sy).abs()
        })
        .sum();
    sum / a.len() as f64
}

/// Cheapest ordering of `gt` against `pred` and its mean L1 distance in
/// normalized coordinates. Ties go to the lowest permutation id.
pub fn best_permutation(pred: &MapInstance, gt: &MapInstance, range: &BevRange) -> Result<(usize, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for (id, perm) in point_permutations(gt).iter().enumerate() {
        let c = mean_l1(pred.points(), gt, perm, range);
        if c < best.1 {
            best = (id, c);
        }
    }
    Ok(best)
}

/// Matches predicted instances to ground truth.
///
/// Pair cost is `class_weight` for a class mismatch plus the permutation-
/// minimized mean L1 point distance, measured in coordinates normalized by
/// the range extent.
pub fn match_instances(
    preds: &[MapInstance],
    gts: &[MapInstance],
    range: &BevRange,
    class_weight: f64,
) -> Result<Assignment> {
    let mut cost = Array2::zeros((preds.len(), gts.len()));
    let mut perms = Array2::<usize>::zeros((preds.len(), gts.len()));
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let (perm, c) = best_permutation(p, g, range)?;
            let class_cost = if p.class() == g.class() { 0.0 } else { class_weight };
            cost[[i, j]] = c + class_cost;
            perms[[i, j]] = perm;
        }
    }
    let (pairs, _) = hungarian(&cost);
    let mut matched_p = vec![false; preds.len()];
    let mut matched_g = vec![false; gts.len()];
    let pairs = pairs
        .into_iter()
        .map(|(i, j)| {
            matched_p[i] = true;
            matched_g[j] = true;
            MatchedPair { pred: i, gt: j, permutation: perms[[i, j]], cost: cost[[i, j]] }
        })
        .collect();
    Ok(Assignment {
        pairs,
        unmatched_preds: (0..preds.len()).filter(|&i| !matched_p[i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&j| !matched_g[j]).collect(),
    })
}

/// [`match_instances`] over a prediction set and a scene.
pub fn match_prediction_set(preds: &PredictionSet, gts: &Scene, class_weight: f64) -> Result<Assignment> {
    let p: Vec<MapInstance> = preds.instances().cloned().collect();
    match_instances(&p, gts.instances(), &gts.range(), class_weight)
}
