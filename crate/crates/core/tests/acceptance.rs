//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array2, Array3};

use fastmap::decoder::{
    attention::bilinear_sample_grid, cgca_forward, pipeline_forward, pyramid, synth_bev, DecoderConfig, DecoderWeights,
    QuerySet,
};
use fastmap::fit::{fit_points, FitConfig};
use fastmap::heatmap::{gaussian_weight_field, rasterize_gt, supercover_cells, weight_field, Heatmap};
use fastmap::losses::{
    auxiliary_line_loss, classification_loss, heatmap_focal_loss, point_line_loss, points_points_loss, total_loss,
    LossWeights, StageComponents,
};
use fastmap::matcher::{hungarian, match_instances, permute, point_permutations};
use fastmap::metrics::{
    acd, ajp, ard, average_precision, chamfer_distance, diagnostics, ApConfig, ApIntegration, STANDARD_THRESHOLDS,
    STRICT_THRESHOLDS,
};
use fastmap::model::one_hot_logits;
use fastmap::rng::Lcg64;
use fastmap::sampler::{csm_sample, ring_quotas, threshold_candidates, Candidate};
use fastmap::synth::{generate_scene, perturb, SynthConfig};
use fastmap::{BevGridSpec, BevRange, MapClass, MapInstance, Point2, Prediction, PredictionSet, Scene};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn pt(x: f64, y: f64) -> Point2 {
    Point2::new(x, y)
}

fn open(class: MapClass, pts: &[(f64, f64)]) -> MapInstance {
    MapInstance::new(class, pts.iter().map(|&(x, y)| pt(x, y)).collect()).unwrap()
}

/// Random polyline with consecutive vertices at least `gap` apart.
fn random_points(rng: &mut Lcg64, m: usize, half: f64, gap: f64) -> Vec<Point2> {
    let mut pts: Vec<Point2> = Vec::with_capacity(m);
    while pts.len() < m {
        let p = pt(rng.uniform(-half, half), rng.uniform(-half, half));
        if pts.last().is_none_or(|q| q.dist(p) > gap) && (pts.len() + 1 < m || pts[0].dist(p) > gap) {
            pts.push(p);
        }
    }
    pts
}

fn relative_error(numeric: f64, analytic: f64) -> f64 {
    let scale = numeric.abs().max(analytic.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (numeric - analytic).abs() / scale
    }
}

const EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

struct GradStats {
    /// Worst relative error over entries the difference quotient resolves
    /// to better than the tolerance.
    worst: f64,
    checked: usize,
    resolved: usize,
    failed: usize,
    excluded: usize,
}

impl GradStats {
    fn new() -> Self {
        Self { worst: 0.0, checked: 0, resolved: 0, failed: 0, excluded: 0 }
    }

    /// `up` and `down` are the loss values at `x + eps` and `x - eps`. Their
    /// rounding error bounds the absolute accuracy of the difference
    /// quotient; the comparison allows that on top of the relative tolerance.
    fn add(&mut self, up: f64, down: f64, analytic: f64) {
        let numeric = (up - down) / (2.0 * EPS);
        let floor = 64.0 * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * EPS);
        let scale = numeric.abs().max(analytic.abs());
        self.checked += 1;
        if (numeric - analytic).abs() > GRAD_TOL * scale + floor {
            self.failed += 1;
        }
        if scale >= floor / GRAD_TOL {
            self.resolved += 1;
            self.worst = self.worst.max(relative_error(numeric, analytic));
        }
    }
}

/// Central differences of a loss of the predicted points against its
/// analytic gradient. `kink(j, axis)` marks non-smooth coordinates.
fn point_grad_check<L, K>(pred: &MapInstance, loss: L, kink: K, stats: &mut GradStats)
where
    L: Fn(&MapInstance) -> (f64, Vec<[f64; 2]>),
    K: Fn(usize, usize) -> bool,
{
    let (_, grad) = loss(pred);
    for j in 0..pred.len() {
        for axis in 0..2 {
            if kink(j, axis) {
                stats.excluded += 1;
                continue;
            }
            let shifted = |d: f64| {
                let mut pts = pred.points().to_vec();
                if axis == 0 {
                    pts[j].x += d;
                } else {
                    pts[j].y += d;
                }
                loss(&pred.with_points(pts).unwrap()).0
            };
            stats.add(shifted(EPS), shifted(-EPS), grad[j][axis]);
        }
    }
}

fn coord(p: Point2, axis: usize) -> f64 {
    if axis == 0 {
        p.x
    } else {
        p.y
    }
}

fn criterion_1() -> Outcome {
    let mut rng = Lcg64::new(1);
    let near = 10.0 * EPS;
    let (mut pp, mut pl, mut al, mut heat, mut cls) =
        (GradStats::new(), GradStats::new(), GradStats::new(), GradStats::new(), GradStats::new());
    for trial in 0..100 {
        let m = 3 + (trial % 6);
        let class = MapClass::ALL[trial % 3];
        let gt = MapInstance::new(class, random_points(&mut rng, m, 10.0, 0.5)).unwrap();
        let pred = MapInstance::new(class, random_points(&mut rng, m, 10.0, 0.5)).unwrap();
        let g = gt.points().to_vec();
        let p = pred.points().to_vec();

        point_grad_check(
            &pred,
            |x| {
                let l = points_points_loss(x, &gt).unwrap();
                (l.value, l.grad)
            },
            |j, a| (j == 0 || j + 1 == m) && (coord(p[j], a) - coord(g[j], a)).abs() < near,
            &mut pp,
        );
        point_grad_check(
            &pred,
            |x| {
                let l = point_line_loss(x, &gt).unwrap();
                (l.value, l.grad)
            },
            |j, _| {
                if j == 0 || j + 1 == m {
                    return false;
                }
                let (a, b) = (g[j - 1], g[j]);
                let cross = (p[j].x - a.x) * (b.y - a.y) - (p[j].y - a.y) * (b.x - a.x);
                cross.abs() / a.dist(b) < near
            },
            &mut pl,
        );
        point_grad_check(
            &pred,
            |x| {
                let l = auxiliary_line_loss(x, &gt).unwrap();
                (l.value, l.grad)
            },
            |j, a| {
                j > 0
                    && j + 1 < m
                    && ((coord(p[j], a) - coord(g[j], a)).abs() < near
                        || (coord(p[j], a) - coord(g[j - 1], a)).abs() < near)
            },
            &mut al,
        );

        // Heatmap: a small random raster with some core cells.
        let (h, w) = (4 + trial % 3, 5 + trial % 4);
        let gt_hm = Array3::from_shape_fn((3, h, w), |_| {
            let u = rng.next_f64();
            if u < 0.15 {
                1.0
            } else if u < 0.5 {
                rng.next_f64()
            } else {
                0.0
            }
        });
        let pred_hm = Array3::from_shape_fn((3, h, w), |_| rng.uniform(0.01, 0.99));
        let field = weight_field(h, w, 0.8, 4.0).unwrap();
        let gt_hm = Heatmap::from_array(gt_hm).unwrap();
        let analytic = heatmap_focal_loss(&Heatmap::from_array(pred_hm.clone()).unwrap(), &gt_hm, &field).unwrap();
        for idx in ndarray::indices(pred_hm.dim()) {
            let value = |d: f64| {
                let mut v = pred_hm.clone();
                v[idx] += d;
                heatmap_focal_loss(&Heatmap::from_array(v).unwrap(), &gt_hm, &field).unwrap().value
            };
            heat.add(value(EPS), value(-EPS), analytic.grad[idx]);
        }

        // Classification over C + 1 logits.
        let n = 1 + trial % 5;
        let logits = Array2::from_shape_fn((n, 4), |_| rng.uniform(-3.0, 3.0));
        let targets: Vec<Option<MapClass>> = (0..n).map(|_| MapClass::from_index(rng.below(4) as usize)).collect();
        let analytic = classification_loss(&logits, &targets).unwrap();
        for idx in ndarray::indices(logits.dim()) {
            let value = |d: f64| {
                let mut v = logits.clone();
                v[idx] += d;
                classification_loss(&v, &targets).unwrap().value
            };
            cls.add(value(EPS), value(-EPS), analytic.grad[idx]);
        }
    }
    let mut detail = Vec::new();
    let mut failed = Vec::new();
    for (name, s) in [("pp", &pp), ("pl", &pl), ("al", &al), ("heat", &heat), ("cls", &cls)] {
        detail.push(format!(
            "{name} {:.1e} ({} of {} resolved, {} failed, {} at kinks)",
            s.worst, s.resolved, s.checked, s.failed, s.excluded
        ));
        if s.failed > 0 || !(s.worst < GRAD_TOL) || s.resolved == 0 {
            failed.push(name);
        }
    }
    let detail = detail.join("; ");
    if failed.is_empty() {
        Ok(format!("max rel err (resolved entries): {detail}"))
    } else {
        Err(format!("{failed:?} exceed {GRAD_TOL:e}: {detail}"))
    }
}

fn criterion_2() -> Outcome {
    let mut rng = Lcg64::new(2);
    let int = |rng: &mut Lcg64, lo: i64, hi: i64| lo + rng.below((hi - lo + 1) as u64) as i64;
    // L_pl = 0 exactly for collinear interior points (integer lattice keeps
    // the cross products exact), and > 0 once one of them leaves its line.
    for case in 0..1000 {
        let m = 3 + case % 6;
        let mut g: Vec<Point2> = Vec::with_capacity(m);
        while g.len() < m {
            let q = pt(int(&mut rng, -20, 20) as f64, int(&mut rng, -20, 20) as f64);
            if g.last().is_none_or(|l| *l != q) && (g.len() + 1 < m || g[0] != q) {
                g.push(q);
            }
        }
        let gt = MapInstance::new(MapClass::Divider, g.clone()).unwrap();
        let mut p: Vec<Point2> = vec![pt(int(&mut rng, -20, 20) as f64 + 0.5, 0.25)];
        for j in 1..m - 1 {
            let k = int(&mut rng, -2, 3) as f64;
            p.push(pt(g[j - 1].x + k * (g[j].x - g[j - 1].x), g[j - 1].y + k * (g[j].y - g[j - 1].y)));
        }
        p.push(pt(-7.25, int(&mut rng, -20, 20) as f64 + 0.5));
        // Distinct neighbors are required by the instance type; nudge along
        // the line when two collinear samples coincide.
        for j in 1..m - 1 {
            if p[j] == p[j - 1] {
                let d = g[j].sub(g[j - 1]);
                p[j] = pt(p[j].x + 4.0 * d.x, p[j].y + 4.0 * d.y);
            }
        }
        if p.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        let pred = MapInstance::new(MapClass::Divider, p.clone()).unwrap();
        let l = point_line_loss(&pred, &gt).unwrap().value;
        check(l == 0.0, || format!("collinear case {case}: L_pl = {l:e}"))?;

        let j = 1 + case % (m - 2);
        let d = g[j].sub(g[j - 1]);
        let mut off = p.clone();
        off[j] = pt(off[j].x - d.y, off[j].y + d.x);
        if off.windows(2).all(|w| w[0] != w[1]) {
            let pred = MapInstance::new(MapClass::Divider, off).unwrap();
            let l = point_line_loss(&pred, &gt).unwrap().value;
            check(l > 0.0, || format!("off-line case {case}: L_pl = {l}"))?;
        }
    }

    // L_al for a point on its segment equals the segment's L1 length.
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let g = random_points(&mut rng, 3, 10.0, 0.1);
        let t = rng.next_f64();
        let on = g[0].lerp(g[1], t);
        let mid = if on.dist(g[0]) > 1e-9 && on.dist(g[2]) > 1e-9 { on } else { g[0].lerp(g[1], 0.5) };
        let pred = open(MapClass::Boundary, &[(g[2].x + 1.0, g[2].y), (mid.x, mid.y), (g[0].x, g[0].y - 1.0)]);
        let gt = MapInstance::new(MapClass::Boundary, g.clone()).unwrap();
        let got = auxiliary_line_loss(&pred, &gt).unwrap().value;
        let expected = (g[1].x - g[0].x).abs() + (g[1].y - g[0].y).abs();
        worst = worst.max((got - expected).abs() / expected);
        check((got - expected).abs() <= 1e-12 * expected.max(1.0), || {
            format!("case {case}: L_al {got} vs L1 length {expected}")
        })?;
    }

    // L_pp = 0 for closed instances, whatever the prediction.
    for case in 0..1000 {
        let m = 3 + case % 8;
        let gt = MapInstance::new(MapClass::PedCrossing, random_points(&mut rng, m, 10.0, 0.1)).unwrap();
        let pred = MapInstance::new(MapClass::PedCrossing, random_points(&mut rng, m, 30.0, 0.1)).unwrap();
        let l = points_points_loss(&pred, &gt).unwrap();
        check(l.value == 0.0 && l.grad.iter().all(|g| *g == [0.0, 0.0]), || {
            format!("closed case {case}: L_pp = {}", l.value)
        })?;
    }
    Ok(format!("3 x 1000 cases; worst L_al relative gap {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let w = LossWeights::default();
    let printed = [w.alpha_cls, w.alpha_pl, w.alpha_pp, w.alpha_al, w.alpha_heat, w.gamma, w.beta];
    check(printed == [2.0, 2.5, 2.5, 2.5, 0.6, 0.5, 1.0], || format!("default weights {printed:?}"))?;
    let oracle = |s1: &StageComponents, s2: &StageComponents, heat: f64| {
        0.5 * (2.0 * s1.cls + 2.5 * s1.pl + 2.5 * s1.pp + 2.5 * s1.al)
            + 1.0 * (2.0 * s2.cls + 2.5 * s2.pl + 2.5 * s2.pp + 2.5 * s2.al)
            + 0.6 * heat
    };
    let mut rng = Lcg64::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let mut v: Vec<f64> = (0..9).map(|_| rng.uniform(0.0, 10.0)).collect();
        let eval = |v: &[f64]| {
            let s1 = StageComponents { cls: v[0], pl: v[1], pp: v[2], al: v[3] };
            let s2 = StageComponents { cls: v[4], pl: v[5], pp: v[6], al: v[7] };
            (total_loss(&s1, &s2, v[8], &w), oracle(&s1, &s2, v[8]))
        };
        let (base, want) = eval(&v);
        worst = worst.max((base - want).abs());
        check((base - want).abs() <= 1e-12, || format!("total {base} vs {want}"))?;
        let coeff = [1.0, 1.25, 1.25, 1.25, 2.0, 2.5, 2.5, 2.5, 0.6];
        for k in 0..9 {
            let delta = rng.uniform(-1.0, 1.0);
            v[k] += delta;
            let (moved, want) = eval(&v);
            v[k] -= delta;
            let change = moved - base;
            worst = worst.max((moved - want).abs()).max((change - coeff[k] * delta).abs());
            check((moved - want).abs() <= 1e-12 && (change - coeff[k] * delta).abs() <= 1e-12, || {
                format!("component {k}: change {change} vs {}", coeff[k] * delta)
            })?;
        }
    }
    Ok(format!("200 x 9 one-hot perturbations, worst gap {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let oracle = |r: f64, c: f64, h: usize, w: usize, alpha: f64, beta: f64| {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sx, sy) = (h as f64 / beta, w as f64 / beta);
        let d2 = (r - cy).powi(2) + (c - cx).powi(2);
        (1.0 - (-d2 / (2.0 * sx * sy)).exp()) * alpha + 1.0
    };
    // An odd grid has a cell exactly at the center.
    for (h, w) in [(201, 101), (41, 21), (9, 9)] {
        let f = weight_field(h, w, 0.8, 4.0).unwrap();
        let center = f.values()[[h / 2, w / 2]];
        check(center == 1.0, || format!("{h}x{w} center weight {center}"))?;
    }
    let mut corner_gap: f64 = 0.0;
    for beta in [8.0, 10.0, 16.0] {
        let f = gaussian_weight_field(&BevGridSpec::default(), 0.8, beta).unwrap();
        let (h, w) = f.values().dim();
        for (r, c) in [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)] {
            let v = f.values()[[r, c]];
            corner_gap = corner_gap.max((v - 1.8).abs());
            check((v - 1.8).abs() < 1e-3, || format!("beta {beta}: corner weight {v}"))?;
        }
        for ((r, c), &v) in f.values().indexed_iter() {
            let want = oracle(r as f64, c as f64, h, w, 0.8, beta);
            check((v - want).abs() < 1e-12, || format!("beta {beta} cell ({r},{c}): {v} vs {want}"))?;
            check((1.0..=1.8).contains(&v), || format!("beta {beta} cell ({r},{c}) = {v} outside [1, 1.8]"))?;
        }
    }
    let default = gaussian_weight_field(&BevGridSpec::default(), 0.8, 4.0).unwrap();
    let corner = default.values()[[0, 0]];
    Ok(format!("center 1.0; worst corner gap {corner_gap:.1e} for beta >= 8 (beta 4 corner {corner:.4})"))
}

fn brute_csm(cands: &[Candidate], total: usize, spec: &BevGridSpec) -> Vec<Candidate> {
    let center = pt((spec.range.x_min + spec.range.x_max) / 2.0, (spec.range.y_min + spec.range.y_max) / 2.0);
    let r_max = [(0, 0), (0, spec.w - 1), (spec.h - 1, 0), (spec.h - 1, spec.w - 1)]
        .iter()
        .map(|&(r, c)| spec.grid_to_world((r, c)).unwrap().dist(center))
        .fold(0.0, f64::max);
    let ring = |c: &Candidate| {
        let d = spec.grid_to_world(c.cell).unwrap().dist(center);
        (1..=3).find(|&i| d <= r_max * i as f64 / 3.0).unwrap_or(3) - 1
    };
    let q0 = (total as f64 / 6.0).round() as usize;
    let q1 = (total as f64 / 3.0).round() as usize;
    let quotas = [q0, q1, total - q0 - q1];
    let better = |a: &Candidate, b: &Candidate| {
        a.score > b.score || (a.score == b.score && (a.cell, a.class) < (b.cell, b.class))
    };
    let mut sorted: Vec<Candidate> = Vec::new();
    for c in cands {
        let pos = sorted.iter().position(|s| better(c, s)).unwrap_or(sorted.len());
        sorted.insert(pos, *c);
    }
    let mut out = Vec::new();
    let mut used = vec![false; sorted.len()];
    for (i, quota) in quotas.iter().enumerate() {
        let mut k = 0;
        for (j, c) in sorted.iter().enumerate() {
            if k < *quota && ring(c) == i {
                out.push(*c);
                used[j] = true;
                k += 1;
            }
        }
    }
    for (j, c) in sorted.iter().enumerate() {
        if out.len() < total && !used[j] {
            out.push(*c);
        }
    }
    out
}

fn criterion_5() -> Outcome {
    check(ring_quotas(60) == [10, 20, 30], || format!("M=60 quotas {:?}", ring_quotas(60)))?;
    for m in 3..=4000 {
        let q = ring_quotas(m);
        let q0 = (m as f64 / 6.0).round() as usize;
        let q1 = (m as f64 / 3.0).round() as usize;
        check(q == [q0, q1, m - q0 - q1] && q.iter().sum::<usize>() == m, || format!("M={m} quotas {q:?}"))?;
    }
    let spec = BevGridSpec::new(BevRange::default(), 1.5).unwrap();
    let mut rng = Lcg64::new(5);
    let mut padded = 0;
    for trial in 0..200 {
        let coarse = trial % 4 == 0;
        let values = Array3::from_shape_fn((3, spec.h, spec.w), |_| {
            let v = rng.next_f64();
            if coarse {
                (v * 10.0).floor() / 10.0
            } else {
                v
            }
        });
        let hm = Heatmap::from_array(values).unwrap();
        let tau = [0.1, 0.5, 0.9, 0.995][trial % 4];
        let cands = threshold_candidates(&hm, tau, &spec).unwrap();
        let total = 3 + rng.below(300) as usize;
        let got = csm_sample(&cands, total, &spec).unwrap();
        check(got.len() == total, || format!("trial {trial}: {} samples for M={total}", got.len()))?;
        let want = brute_csm(&cands, total, &spec);
        let real = &got[..want.len()];
        check(real == want.as_slice(), || format!("trial {trial}: selection differs from the sort oracle"))?;
        if want.len() < total {
            padded += 1;
            check(got[want.len()..].iter().all(|c| c.score == 0.0), || format!("trial {trial}: bad padding"))?;
        }
    }
    Ok(format!("quotas exact for M in 3..=4000; 200 candidate sets match the oracle ({padded} padded)"))
}

/// Cells whose closed square `[c, c+1] x [r, r+1]` (grid units) meets the
/// segment, by Liang-Barsky clipping.
fn supercover_oracle(spec: &BevGridSpec, a: Point2, b: Point2) -> BTreeSet<(usize, usize)> {
    let to = |p: Point2| ((p.x - spec.range.x_min) / spec.resolution, (p.y - spec.range.y_min) / spec.resolution);
    let (u0, v0) = to(a);
    let (u1, v1) = to(b);
    let (du, dv) = (u1 - u0, v1 - v0);
    let mut out = BTreeSet::new();
    let (c_lo, c_hi) = (u0.min(u1).floor() as usize, (u0.max(u1).floor() as usize).min(spec.w - 1));
    let (r_lo, r_hi) = (v0.min(v1).floor() as usize, (v0.max(v1).floor() as usize).min(spec.h - 1));
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let (mut t0, mut t1) = (0.0f64, 1.0f64);
            let mut hit = true;
            for (p, q) in [(-du, u0 - c as f64), (du, c as f64 + 1.0 - u0), (-dv, v0 - r as f64), (dv, r as f64 + 1.0 - v0)] {
                if p == 0.0 {
                    if q < 0.0 {
                        hit = false;
                    }
                } else {
                    let t = q / p;
                    if p < 0.0 {
                        t0 = t0.max(t);
                    } else {
                        t1 = t1.min(t);
                    }
                }
            }
            if hit && t0 <= t1 {
                out.insert((r, c));
            }
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let spec = BevGridSpec::default();
    let mut checked_points = 0;
    for seed in 0..20 {
        let scene = generate_scene(&SynthConfig { seed, dividers: 3, crossings: 2, boundaries: 2, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let mut prev: Option<Heatmap> = None;
        for k in [1, 3, 5, 7] {
            let hm = rasterize_gt(&scene, &spec, k, None).map_err(|e| e.to_string())?;
            for inst in scene.instances() {
                for &p in inst.points() {
                    let (r, c) = spec.world_to_grid(p).unwrap();
                    check(hm.get(inst.class(), r, c) == 1.0, || format!("seed {seed} k {k}: point cell not 1.0"))?;
                    checked_points += 1;
                }
            }
            if let Some(prev) = &prev {
                let ok = prev.values().iter().zip(hm.values().iter()).all(|(a, b)| b >= a);
                check(ok, || format!("seed {seed}: kernel {k} lowered a cell"))?;
            }
            prev = Some(hm);
        }
    }
    let mut rng = Lcg64::new(6);
    let mut total_cells = 0;
    for trial in 0..100 {
        let a = pt(rng.uniform(-14.99, 14.99), rng.uniform(-29.99, 29.99));
        let b = if trial % 2 == 0 {
            pt(rng.uniform(-14.99, 14.99), rng.uniform(-29.99, 29.99))
        } else {
            pt((a.x + rng.uniform(-3.0, 3.0)).clamp(-14.99, 14.99), (a.y + rng.uniform(-3.0, 3.0)).clamp(-29.99, 29.99))
        };
        let got: BTreeSet<(usize, usize)> = supercover_cells(&spec, a, b).unwrap().into_iter().collect();
        let want = supercover_oracle(&spec, a, b);
        total_cells += want.len();
        check(got == want, || {
            format!(
                "segment {trial} {a:?}->{b:?}: {} cells vs oracle {} (extra {:?}, missing {:?})",
                got.len(),
                want.len(),
                got.difference(&want).take(3).collect::<Vec<_>>(),
                want.difference(&got).take(3).collect::<Vec<_>>()
            )
        })?;
    }
    Ok(format!("{checked_points} point cells at 1.0; kernels 1..7 monotone; 100 segments ({total_cells} cells) match the oracle"))
}

fn exhaustive_assignment(cost: &Array2<f64>) -> f64 {
    let (r, c) = cost.dim();
    let (small, large, transpose) = if r <= c { (r, c, false) } else { (c, r, true) };
    let at = |i: usize, j: usize| if transpose { cost[[j, i]] } else { cost[[i, j]] };
    fn rec(i: usize, small: usize, large: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                best = best.min(at(i, j) + rec(i + 1, small, large, used, at));
                used[j] = false;
            }
        }
        best
    }
    rec(0, small, large, &mut vec![false; large], &at)
}

fn criterion_7() -> Outcome {
    let mut rng = Lcg64::new(7);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let (r, c) = (1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
        let cost = Array2::from_shape_fn((r, c), |_| {
            if trial % 3 == 0 {
                rng.below(4) as f64
            } else {
                rng.uniform(0.0, 10.0)
            }
        });
        let (pairs, total) = hungarian(&cost);
        let best = exhaustive_assignment(&cost);
        let recomputed: f64 = pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
        let rows: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        check(pairs.len() == r.min(c) && rows.len() == pairs.len() && cols.len() == pairs.len(), || {
            format!("trial {trial}: {pairs:?} is not a one-to-one assignment")
        })?;
        worst = worst.max((total - best).abs());
        check((total - best).abs() <= 1e-12 && (recomputed - best).abs() <= 1e-12, || {
            format!("trial {trial} ({r}x{c}): hungarian {total} vs exhaustive {best}")
        })?;
    }

    let range = BevRange::default();
    let mut worst_inv: f64 = 0.0;
    for seed in 0..50 {
        let cfg = SynthConfig { seed, dividers: 2, crossings: 2, boundaries: 2, noise: 2.0, ..Default::default() };
        let scene = generate_scene(&cfg).map_err(|e| e.to_string())?;
        let preds: Vec<MapInstance> = perturb(&scene, &cfg).map_err(|e| e.to_string())?.instances().cloned().collect();
        let base = match_instances(&preds, scene.instances(), &range, 1.0).map_err(|e| e.to_string())?.total_cost();
        let m = cfg.m;
        let shift = 1 + seed as usize % (m - 1);
        let moved: Vec<MapInstance> = scene
            .instances()
            .iter()
            .map(|g| {
                let perm: Vec<usize> = if g.closed() { (0..m).map(|k| (k + shift) % m).collect() } else { (0..m).rev().collect() };
                permute(g, &perm)
            })
            .collect();
        let again = match_instances(&preds, &moved, &range, 1.0).map_err(|e| e.to_string())?.total_cost();
        worst_inv = worst_inv.max((again - base).abs());
        check((again - base).abs() <= 1e-12, || format!("seed {seed}: matched cost {base} -> {again}"))?;
        check(point_permutations(&moved[2]).len() == 2 * m, || "closed permutation count".into())?;
    }
    Ok(format!("200 matrices up to 6x6 optimal (worst gap {worst:.1e}); invariance gap {worst_inv:.1e} over 50 scenes"))
}

/// Arc-length densification written out independently for the chamfer oracle.
fn densify_oracle(inst: &MapInstance, n: usize) -> Vec<Point2> {
    let mut pts = inst.points().to_vec();
    if inst.closed() {
        pts.push(pts[0]);
    }
    let lens: Vec<f64> = pts.windows(2).map(|w| w[0].dist(w[1])).collect();
    let total: f64 = lens.iter().sum();
    let step = if inst.closed() { total / n as f64 } else { total / (n - 1) as f64 };
    (0..n)
        .map(|k| {
            let mut s = if !inst.closed() && k == n - 1 { total } else { step * k as f64 };
            for (i, &l) in lens.iter().enumerate() {
                if s <= l || i + 1 == lens.len() {
                    let t = (s / l).clamp(0.0, 1.0);
                    return pt(pts[i].x + (pts[i + 1].x - pts[i].x) * t, pts[i].y + (pts[i + 1].y - pts[i].y) * t);
                }
                s -= l;
            }
            unreachable!()
        })
        .collect()
}

fn chamfer_oracle(a: &MapInstance, b: &MapInstance, n: usize) -> f64 {
    let (pa, pb) = (densify_oracle(a, n), densify_oracle(b, n));
    let mut ab = 0.0;
    for p in &pa {
        let mut best = f64::INFINITY;
        for q in &pb {
            best = best.min(p.dist(*q));
        }
        ab += best;
    }
    let mut ba = 0.0;
    for q in &pb {
        let mut best = f64::INFINITY;
        for p in &pa {
            best = best.min(p.dist(*q));
        }
        ba += best;
    }
    (ab / n as f64 + ba / n as f64) / 2.0
}

fn scene_of(instances: Vec<MapInstance>) -> Scene {
    Scene::new(BevRange::default(), instances).unwrap()
}

fn preds_of(items: Vec<(MapInstance, f64)>) -> PredictionSet {
    let preds = items
        .into_iter()
        .map(|(instance, score)| {
            let logits = one_hot_logits(instance.class(), score);
            Prediction { instance, score, logits }
        })
        .collect();
    PredictionSet::new(BevRange::default(), preds).unwrap()
}

fn criterion_8() -> Outcome {
    let mut rng = Lcg64::new(8);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let class = MapClass::ALL[trial % 3];
        let m = 2 + trial % 9;
        let a = MapInstance::new(class, random_points(&mut rng, m.max(3), 12.0, 0.2)).unwrap();
        let b = MapInstance::new(class, random_points(&mut rng, m.max(3), 12.0, 0.2)).unwrap();
        let got = chamfer_distance(&a, &b, 100).map_err(|e| e.to_string())?;
        let want = chamfer_oracle(&a, &b, 100);
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-12, || format!("pair {trial}: chamfer {got} vs oracle {want}"))?;
    }

    // 2 ground truths, 2 predictions: one within 0.1 m (score 0.9), one 5 m
    // off (score 0.8), threshold 0.5. Ranked outcome TP, FP gives recall
    // (0.5, 0.5) and precision (1, 0.5): area 0.5 * 1 = 0.5; the 101-point
    // rule takes precision 1 at the 51 recall levels 0.00..0.50 and 0 above.
    let g1 = open(MapClass::Divider, &[(0.0, 0.0), (0.0, 5.0), (0.0, 10.0)]);
    let g2 = open(MapClass::Divider, &[(8.0, 0.0), (8.0, 5.0), (8.0, 10.0)]);
    let p1 = open(MapClass::Divider, &[(0.05, 0.0), (0.05, 5.0), (0.05, 10.0)]);
    let p2 = open(MapClass::Divider, &[(13.0, 0.0), (13.0, 5.0), (13.0, 10.0)]);
    check((chamfer_distance(&p2, &g2, 100).unwrap() - 5.0).abs() < 1e-12, || "fixture geometry".into())?;
    let gts = scene_of(vec![g1.clone(), g2.clone()]);
    let preds = preds_of(vec![(p1.clone(), 0.9), (p2.clone(), 0.8)]);
    let area = average_precision(&preds, &gts, &[0.5], &ApConfig::default()).unwrap();
    let interp = average_precision(&preds, &gts, &[0.5], &ApConfig { integration: ApIntegration::Interp101, ..Default::default() })
        .unwrap();
    let area_ap = area.class_ap(MapClass::Divider).unwrap();
    let interp_ap = interp.class_ap(MapClass::Divider).unwrap();
    check(area_ap == 0.5, || format!("fixture AP (area) {area_ap}, expected 0.5"))?;
    check((interp_ap - 51.0 / 101.0).abs() < 1e-15, || format!("fixture AP (101-point) {interp_ap}, expected 51/101"))?;
    // Swapping the scores puts the FP first: precision (0, 0.5) at recall (0, 0.5).
    let swapped = preds_of(vec![(p1, 0.8), (p2, 0.9)]);
    let s = average_precision(&swapped, &gts, &[0.5], &ApConfig::default()).unwrap().class_ap(MapClass::Divider).unwrap();
    check(s == 0.25, || format!("swapped fixture AP {s}, expected 0.25"))?;

    for seed in 0..20 {
        let scene = generate_scene(&SynthConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let same = PredictionSet::from_scene(&scene);
        for set in [STRICT_THRESHOLDS, STANDARD_THRESHOLDS] {
            let ap = average_precision(&same, &scene, &set, &ApConfig::default()).map_err(|e| e.to_string())?;
            check(ap.map == 1.0, || format!("seed {seed} {set:?}: mAP {}", ap.map))?;
            let d = diagnostics(&same, &scene, &set, 100).map_err(|e| e.to_string())?;
            check(d.acd == 0.0 && d.ard == 0.0 && d.ajp == 0.0 && d.matched == scene.instances().len(), || {
                format!("seed {seed}: diagnostics {d:?} on identical sets")
            })?;
        }
    }

    let range = BevRange::default();
    let straight = open(MapClass::Divider, &[(0.0, 0.0), (0.0, 1.0), (0.0, 2.0), (0.0, 3.0), (0.0, 4.0)]);
    let s45 = std::f64::consts::FRAC_PI_4.sin();
    let zig = open(MapClass::Divider, &[(0.0, 0.0), (0.0, 1.0), (0.0, 2.0), (s45, 2.0 + s45), (2.0 * s45, 2.0 + 2.0 * s45)]);
    let zig_ajp = ajp(&[(&zig, &straight)], &range).unwrap();
    check(zig_ajp == 1.0, || format!("single 45 degree vertex AJP {zig_ajp}"))?;
    let kink = open(MapClass::Divider, &[(0.0, 0.0), (0.0, 1.0), (0.0, 2.0), (1.0, 2.0), (2.0, 2.0)]);
    let kink_ard = ard(&[(&kink, &straight)], &range).unwrap();
    // Arccos oracle on the single kink vertex.
    let oracle = (0.0f64 * 1.0 + 1.0 * 0.0).clamp(-1.0, 1.0).acos();
    check((kink_ard - oracle).abs() < 1e-12, || format!("90 degree kink ARD {kink_ard} vs {oracle}"))?;
    let pair_acd = acd(&[(&p_shift(&straight, 0.4), &straight), (&p_shift(&straight, 0.6), &straight)], 100).unwrap();
    check((pair_acd - 0.5).abs() < 1e-12, || format!("ACD of 0.4/0.6 pairs {pair_acd}"))?;
    Ok(format!("chamfer oracle gap {worst:.1e}; fixture AP 0.5 (area) and 51/101 (101-point); identity mAP 1 on both sets; AJP 1, ARD pi/2, ACD 0.5 fixtures"))
}

fn p_shift(inst: &MapInstance, dx: f64) -> MapInstance {
    inst.translated(dx, 0.0).unwrap()
}

fn small_decoder(seed: u64) -> (DecoderConfig, BevGridSpec) {
    let cfg = DecoderConfig { d: 16, n: 6, m: 8, prior_count: 64, levels: 2, seed, ..Default::default() };
    (cfg, BevGridSpec::new(BevRange::default(), 1.0).unwrap())
}

fn criterion_9() -> Outcome {
    let mut worst_row: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for seed in 0..5 {
        let (cfg, spec) = small_decoder(seed);
        let w = DecoderWeights::init(&cfg).map_err(|e| e.to_string())?;
        let levels = pyramid(synth_bev(cfg.d, &spec, seed + 100), cfg.levels);
        let out = pipeline_forward(&levels, &w, &spec, 0.1).map_err(|e| e.to_string())?;
        for att in [&out.coarse.attention, &out.fine.attention] {
            for row in att.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
        }
        let again = pipeline_forward(&levels, &w, &spec, 0.1).map_err(|e| e.to_string())?;
        check(again == out, || format!("seed {seed}: forward pass not reproducible"))?;
        let fresh = DecoderWeights::init(&cfg).map_err(|e| e.to_string())?;
        let third = pipeline_forward(&levels, &fresh, &spec, 0.1).map_err(|e| e.to_string())?;
        let bits = |p: &PredictionSet| {
            p.instances().flat_map(|i| i.points().iter().flat_map(|q| [q.x.to_bits(), q.y.to_bits()])).collect::<Vec<_>>()
        };
        check(bits(&third.predictions) == bits(&out.predictions), || format!("seed {seed}: reseeded weights differ"))?;

        // Joint permutation of the prior rows.
        let mut perm: Vec<usize> = (0..cfg.prior_count).collect();
        let mut rng = Lcg64::new(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let q = QuerySet::from_weights(&w);
        let a = cgca_forward(&q, &out.priors, &w, &cfg).map_err(|e| e.to_string())?;
        let b = cgca_forward(&q, &out.priors.permuted(&perm), &w, &cfg).map_err(|e| e.to_string())?;
        for (x, y) in a.features.iter().zip(b.features.iter()).chain(a.points.iter().zip(b.points.iter())) {
            worst_perm = worst_perm.max((x - y).abs());
        }
        for (x, y) in a.class_logits.iter().zip(b.class_logits.iter()) {
            worst_perm = worst_perm.max((x - y).abs());
        }
    }
    check(worst_row <= 1e-12, || format!("softmax row sum off by {worst_row:e}"))?;
    check(worst_perm <= 1e-9, || format!("prior permutation changed the coarse stage by {worst_perm:e}"))?;

    // Bilinear sampling at nodes and between them.
    let (cfg, spec) = small_decoder(9);
    let bev = synth_bev(cfg.d, &spec, 9);
    let mut worst_node: f64 = 0.0;
    for (r, c) in [(0, 0), (3, 7), (spec.h - 1, spec.w - 1), (10, 0)] {
        let s = bilinear_sample_grid(bev.view(), r as f64, c as f64);
        for k in 0..cfg.d {
            worst_node = worst_node.max((s[k] - bev[[k, r, c]]).abs());
        }
    }
    check(worst_node == 0.0, || format!("bilinear sample off at nodes by {worst_node:e}"))?;
    let (r, c, fr, fc) = (4usize, 6usize, 0.3, 0.8);
    let s = bilinear_sample_grid(bev.view(), r as f64 + fr, c as f64 + fc);
    for k in 0..cfg.d {
        let want = (1.0 - fr) * (1.0 - fc) * bev[[k, r, c]]
            + (1.0 - fr) * fc * bev[[k, r, c + 1]]
            + fr * (1.0 - fc) * bev[[k, r + 1, c]]
            + fr * fc * bev[[k, r + 1, c + 1]];
        check((s[k] - want).abs() < 1e-12, || format!("bilinear interior channel {k}: {} vs {want}", s[k]))?;
    }
    Ok(format!("row sums within {worst_row:.1e}; prior permutation gap {worst_perm:.1e}; bilinear exact at nodes; bit-identical reruns"))
}

fn mean_matched_chamfer(preds: &PredictionSet, scene: &Scene, fit: &fastmap::fit::FitResult) -> f64 {
    let d: Vec<f64> = fit
        .assignment
        .pairs
        .iter()
        .map(|p| chamfer_distance(&preds.predictions()[p.pred].instance, &scene.instances()[p.gt], 100).unwrap())
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

fn criterion_10() -> Outcome {
    let cfg = SynthConfig { seed: 0, dividers: 3, crossings: 0, boundaries: 2, noise: 0.5, ..Default::default() };
    let scene = generate_scene(&cfg).map_err(|e| e.to_string())?;
    let preds = perturb(&scene, &cfg).map_err(|e| e.to_string())?;
    let fit = fit_points(&preds, &scene, &FitConfig { steps: 500, lr: 0.01, ..Default::default() }).map_err(|e| e.to_string())?;
    let before = mean_matched_chamfer(&preds, &scene, &fit);
    let after = mean_matched_chamfer(&fit.predictions, &scene, &fit);
    let reduction = 1.0 - after / before;
    let diag = diagnostics(&fit.predictions, &scene, &STANDARD_THRESHOLDS, 100).map_err(|e| e.to_string())?;
    check(scene.instances().len() == 5, || "scene size".into())?;
    check(reduction >= 0.9, || format!("chamfer {before:.4} -> {after:.4} m, reduction {:.1}%", 100.0 * reduction))?;
    check(diag.matched == 5 && diag.acd < 0.05, || format!("ACD {:.4} m over {} matches", diag.acd, diag.matched))?;
    Ok(format!(
        "chamfer {before:.4} -> {after:.4} m ({:.1}% reduction), ACD {:.4} m",
        100.0 * reduction,
        diag.acd
    ))
}

/// Not a criterion: the same run on the default composition with a crossing.
fn crossing_note() -> String {
    let cfg = SynthConfig { seed: 0, noise: 0.5, ..Default::default() };
    let scene = generate_scene(&cfg).unwrap();
    let preds = perturb(&scene, &cfg).unwrap();
    let fit = fit_points(&preds, &scene, &FitConfig::default()).unwrap();
    let before = mean_matched_chamfer(&preds, &scene, &fit);
    let after = mean_matched_chamfer(&fit.predictions, &scene, &fit);
    format!("note: with one crossing (2/1/2 scene) chamfer {before:.4} -> {after:.4} m ({:.1}% reduction)", 100.0 * (1.0 - after / before))
}

fn criterion_11() -> Outcome {
    let mut rng = Lcg64::new(11);
    let mut sets = 0;
    for seed in 0..100u64 {
        let noise = [0.05, 0.3, 0.8, 1.5, 3.0][seed as usize % 5];
        let cfg = SynthConfig { seed, noise, ..Default::default() };
        let scene = generate_scene(&cfg).map_err(|e| e.to_string())?;
        let base = perturb(&scene, &cfg).map_err(|e| e.to_string())?;
        // Random scores, dropped instances, relabeled and duplicated ones.
        let mut items = Vec::new();
        for p in base.predictions() {
            let u = rng.next_f64();
            if u < 0.15 {
                continue;
            }
            let mut inst = p.instance.clone();
            if u > 0.9 && !inst.closed() {
                let other = if inst.class() == MapClass::Divider { MapClass::Boundary } else { MapClass::Divider };
                inst = MapInstance::new(other, inst.points().to_vec()).unwrap();
            }
            items.push((inst.clone(), rng.next_f64()));
            if u > 0.75 {
                items.push((inst, rng.next_f64()));
            }
        }
        let preds = preds_of(items);
        let integration = if seed % 2 == 0 { ApIntegration::Area } else { ApIntegration::Interp101 };
        let ap_cfg = ApConfig { integration, ..Default::default() };
        let strict = average_precision(&preds, &scene, &STRICT_THRESHOLDS, &ap_cfg).map_err(|e| e.to_string())?.map;
        let standard = average_precision(&preds, &scene, &STANDARD_THRESHOLDS, &ap_cfg).map_err(|e| e.to_string())?.map;
        check(strict <= standard, || format!("seed {seed}: strict {strict} > standard {standard}"))?;
        sets += 1;
    }
    Ok(format!("{sets} prediction sets, strict mAP <= standard mAP"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", criterion_1),
        ("loss geometry", criterion_2),
        ("total loss composition", criterion_3),
        ("gaussian weight endpoints", criterion_4),
        ("circular sampling contract", criterion_5),
        ("rasterization", criterion_6),
        ("matching", criterion_7),
        ("metric oracles", criterion_8),
        ("decoder invariants", criterion_9),
        ("end-to-end optimization", criterion_10),
        ("strict vs standard ordering", criterion_11),
    ];
    let start = Instant::now();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} [{secs:.1} s]: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name} [{secs:.1} s]: {detail}", i + 1);
            }
        }
        if i == 9 {
            println!("             {}", crossing_note());
        }
    }
    println!("acceptance: {} of 11 criteria passed in {:.1} s", 11 - failures, start.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
