//! Single-layer, two-stage decoder forward pass.
//!
//! The heatmap head scores every BEV cell; high-confidence cells become
//! priors (coordinate, feature, class). The coarse stage attends from the
//! learned query positions to those priors and predicts reference points.
//! The fine stage samples the BEV features around each reference point with
//! deformable attention and predicts the final points and class logits.

pub mod attention;
pub mod ops;
pub mod weights;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{rasterize_gt, Heatmap};
use crate::losses::softmax_row;
use crate::model::{BevGridSpec, MapClass, MapInstance, Point2, Prediction, PredictionSet, Scene};
use crate::rng::Lcg64;
use crate::sampler::{csm_sample, gather_priors, threshold_candidates, SampledPriors};

pub use attention::{bilinear_sample, bilinear_sample_grid, deformable_attention, multi_head_attention, AttnParams, DeformParams};
pub use weights::{DecoderWeights, TensorInfo, WeightManifest};

use ops::{conv3x3_same, feed_forward, layer_norm, linear, sigmoid};

/// Prior count used when `--paper-scale` is requested.
pub const PAPER_PRIOR_COUNT: usize = 3500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Instance queries.
    pub n: usize,
    /// Points per instance.
    pub m: usize,
    /// Embedding width; also the BEV channel count.
    pub d: usize,
    pub heads: usize,
    /// Deformable samples per head and level.
    pub sample_points: usize,
    /// Number of priors `M`.
    pub prior_count: usize,
    /// BEV feature levels seen by deformable attention.
    pub levels: usize,
    /// Largest deformable offset, normalized units.
    pub offset_scale: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n: 10, m: 8, d: 32, heads: 4, sample_points: 4, prior_count: 256, levels: 1, offset_scale: 0.1, seed: 0 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n", self.n),
            ("m", self.m),
            ("d", self.d),
            ("heads", self.heads),
            ("sample_points", self.sample_points),
            ("prior_count", self.prior_count),
            ("levels", self.levels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
        }
        if self.m < 2 {
            return Err(Error::InvalidParameter("m must be at least 2".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::InvalidParameter(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if !(self.offset_scale >= 0.0 && self.offset_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("offset scale {} is invalid", self.offset_scale)));
        }
        Ok(())
    }
}

/// Learned query positions and features, one row per point query.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub pos: Array2<f64>,
    /// Carried for completeness; the coarse stage queries with `pos` only.
    pub feat: Array2<f64>,
}

impl QuerySet {
    pub fn from_weights(w: &DecoderWeights) -> Self {
        Self { pos: w.mat("query.pos").to_owned(), feat: w.mat("query.feat").to_owned() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    /// `(n m) x d`.
    pub features: Array2<f64>,
    /// `(n, m, 2)` normalized points in `[0, 1]`.
    pub points: Array3<f64>,
    /// `n x (C + 1)`, background last.
    pub class_logits: Array2<f64>,
    /// Softmax weights with the normalized axis last: `(heads, queries,
    /// priors)` for the coarse stage, `(queries, heads, levels * points)` for
    /// the fine stage.
    pub attention: Array3<f64>,
}

impl StageOutput {
    /// Points as `(n m) x 2` reference rows.
    pub fn reference_points(&self) -> Array2<f64> {
        let (n, m, _) = self.points.dim();
        self.points.to_shape((n * m, 2)).expect("contiguous points").to_owned()
    }
}

fn check_bev(bev: ArrayView3<f64>, d: usize) -> Result<()> {
    if bev.dim().0 != d {
        return Err(Error::ShapeMismatch(format!("BEV has {} channels, decoder width is {d}", bev.dim().0)));
    }
    if bev.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("BEV features contain non-finite values".into()));
    }
    Ok(())
}

/// Three same-padded 3x3 convolutions with ReLU between them and a sigmoid
/// on the class channels.
pub fn heatmap_head(bev: &Array3<f64>, w: &DecoderWeights) -> Result<Heatmap> {
    check_bev(bev.view(), w.config().d)?;
    let x = conv3x3_same(bev.view(), w.kernel("heat.conv1.w"), w.vec("heat.conv1.b")).mapv(|v| v.max(0.0));
    let x = conv3x3_same(x.view(), w.kernel("heat.conv2.w"), w.vec("heat.conv2.b")).mapv(|v| v.max(0.0));
    let x = conv3x3_same(x.view(), w.kernel("heat.conv3.w"), w.vec("heat.conv3.b")).mapv(sigmoid);
    Heatmap::from_array(x)
}

fn attn_params<'a>(w: &'a DecoderWeights, prefix: &str) -> AttnParams<'a> {
    AttnParams {
        wq: w.mat(&format!("{prefix}.q.w")),
        bq: w.vec(&format!("{prefix}.q.b")),
        wk: w.mat(&format!("{prefix}.k.w")),
        bk: w.vec(&format!("{prefix}.k.b")),
        wv: w.mat(&format!("{prefix}.v.w")),
        bv: w.vec(&format!("{prefix}.v.b")),
        wo: w.mat(&format!("{prefix}.o.w")),
        bo: w.vec(&format!("{prefix}.o.b")),
    }
}

/// `norm2(x + ff(x))` with `x = norm1(residual + update)`.
fn residual_block(residual: &Array2<f64>, update: &Array2<f64>, w: &DecoderWeights, prefix: &str) -> Array2<f64> {
    let p = |s: &str| format!("{prefix}.{s}");
    let x = layer_norm(&(residual + update), w.vec(&p("ln1.g")), w.vec(&p("ln1.b")));
    let ff = feed_forward(x.view(), w.mat(&p("ff1.w")), w.vec(&p("ff1.b")), w.mat(&p("ff2.w")), w.vec(&p("ff2.b")));
    layer_norm(&(x + ff), w.vec(&p("ln2.g")), w.vec(&p("ln2.b")))
}

/// Sigmoid points and per-instance class logits from the mean point feature.
fn heads(features: &Array2<f64>, w: &DecoderWeights, point: &str, cls: &str, n: usize, m: usize) -> (Array3<f64>, Array2<f64>) {
    let pts = linear(features.view(), w.mat(&format!("{point}.w")), w.vec(&format!("{point}.b"))).mapv(sigmoid);
    let points = pts.into_shape_with_order((n, m, 2)).expect("n m 2");
    let d = features.ncols();
    let pooled = features
        .view()
        .into_shape_with_order((n, m, d))
        .expect("n m d")
        .mean_axis(Axis(1))
        .expect("m >= 1");
    let logits = linear(pooled.view(), w.mat(&format!("{cls}.w")), w.vec(&format!("{cls}.b")));
    (points, logits)
}

/// Coarse stage: the query positions attend to the priors, keyed by
/// `F_sam + W_c[class] + W_p P_sam`.
pub fn cgca_forward(queries: &QuerySet, priors: &SampledPriors, w: &DecoderWeights, cfg: &DecoderConfig) -> Result<StageOutput> {
    if priors.is_empty() {
        return Err(Error::EmptyPriors);
    }
    if priors.len() != cfg.prior_count {
        return Err(Error::ShapeMismatch(format!("{} priors given, config expects {}", priors.len(), cfg.prior_count)));
    }
    if priors.features.ncols() != cfg.d || priors.coords.ncols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "prior features are {} wide and coordinates {} wide; expected {} and 2",
            priors.features.ncols(),
            priors.coords.ncols(),
            cfg.d
        )));
    }
    if queries.pos.dim() != (cfg.n * cfg.m, cfg.d) {
        return Err(Error::ShapeMismatch(format!("query positions are {:?}", queries.pos.dim())));
    }
    let k_pos = linear(priors.coords.view(), w.mat("cgca.w_p.w"), w.vec("cgca.w_p.b"));
    let table = w.mat("cgca.w_c");
    let mut k_feat = priors.features.clone();
    for (mut row, class) in k_feat.rows_mut().into_iter().zip(&priors.classes) {
        row += &table.row(class.index());
    }
    let keys = k_feat + k_pos;
    let (attn, weights) = multi_head_attention(queries.pos.view(), keys.view(), keys.view(), &attn_params(w, "cgca.attn"), cfg.heads);
    let features = residual_block(&queries.pos, &attn, w, "cgca");
    let (points, class_logits) = heads(&features, w, "cgca.w_ref", "cgca.cls", cfg.n, cfg.m);
    Ok(StageOutput { features, points, class_logits, attention: weights })
}

/// Fine stage: deformable attention from `W_q F_coarse` around the coarse
/// points over every BEV level.
pub fn fgca_forward(coarse: &StageOutput, levels: &[Array3<f64>], w: &DecoderWeights, cfg: &DecoderConfig) -> Result<StageOutput> {
    if levels.len() != cfg.levels {
        return Err(Error::ShapeMismatch(format!("{} BEV levels given, config expects {}", levels.len(), cfg.levels)));
    }
    for level in levels {
        check_bev(level.view(), cfg.d)?;
    }
    if coarse.points.dim() != (cfg.n, cfg.m, 2) || coarse.features.dim() != (cfg.n * cfg.m, cfg.d) {
        return Err(Error::ShapeMismatch("coarse stage does not match the decoder config".into()));
    }
    if coarse.points.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter("reference points must lie in [0, 1]".into()));
    }
    let q_pos = linear(coarse.features.view(), w.mat("fgca.w_q.w"), w.vec("fgca.w_q.b"));
    let refs = coarse.reference_points();
    let views: Vec<ArrayView3<f64>> = levels.iter().map(|l| l.view()).collect();
    let params = DeformParams {
        w_offset: w.mat("fgca.offset.w"),
        b_offset: w.vec("fgca.offset.b"),
        w_weight: w.mat("fgca.weight.w"),
        b_weight: w.vec("fgca.weight.b"),
        w_value: w.mat("fgca.value.w"),
        b_value: w.vec("fgca.value.b"),
        w_out: w.mat("fgca.out.w"),
        b_out: w.vec("fgca.out.b"),
    };
    let deform = deformable_attention(q_pos.view(), refs.view(), &views, &params, cfg.heads, cfg.sample_points, cfg.offset_scale);
    let features = residual_block(&q_pos, &deform.out, w, "fgca");
    let (points, class_logits) = heads(&features, w, "fgca.point", "fgca.cls", cfg.n, cfg.m);
    Ok(StageOutput { features, points, class_logits, attention: deform.weights })
}

/// Metric predictions from a stage: points mapped into the range, class is
/// the most probable foreground class, score its probability.
pub fn stage_predictions(stage: &StageOutput, spec: &BevGridSpec) -> Result<PredictionSet> {
    let (n, m, _) = stage.points.dim();
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let logits = stage.class_logits.row(i).to_vec();
        let probs = softmax_row(&logits);
        let (best, score) = probs[..MapClass::COUNT]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
        let class = MapClass::from_index(best).expect("foreground index");
        let pts: Vec<Point2> = (0..m)
            .map(|j| spec.range.denormalize(Point2::new(stage.points[[i, j, 0]], stage.points[[i, j, 1]])))
            .collect();
        preds.push(Prediction { instance: MapInstance::new(class, pts)?, score, logits });
    }
    PredictionSet::new(spec.range, preds)
}

/// Everything produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub heatmap: Heatmap,
    pub candidates: usize,
    pub priors: SampledPriors,
    pub coarse: StageOutput,
    pub fine: StageOutput,
    pub predictions: PredictionSet,
}

/// Heatmap head, thresholding, ring sampling, prior gathering, both stages
/// and the prediction set. Level 0 must match the grid.
pub fn pipeline_forward(levels: &[Array3<f64>], w: &DecoderWeights, spec: &BevGridSpec, tau: f64) -> Result<PipelineOutput> {
    let cfg = w.config();
    let base = levels.first().ok_or_else(|| Error::ShapeMismatch("no BEV levels".into()))?;
    let (_, h, wd) = base.dim();
    if (h, wd) != (spec.h, spec.w) {
        return Err(Error::ShapeMismatch(format!("BEV is {h}x{wd}, grid is {}x{}", spec.h, spec.w)));
    }
    let heatmap = heatmap_head(base, w)?;
    let candidates = threshold_candidates(&heatmap, tau, spec)?;
    let selected = csm_sample(&candidates, cfg.prior_count, spec)?;
    let priors = gather_priors(base, &selected, spec)?;
    let coarse = cgca_forward(&QuerySet::from_weights(w), &priors, w, cfg)?;
    let fine = fgca_forward(&coarse, levels, w, cfg)?;
    let predictions = stage_predictions(&fine, spec)?;
    Ok(PipelineOutput { heatmap, candidates: candidates.len(), priors, coarse, fine, predictions })
}

/// Uniform `[-1, 1]` features of shape `(d, h, w)`.
pub fn synth_bev(d: usize, spec: &BevGridSpec, seed: u64) -> Array3<f64> {
    let mut rng = Lcg64::new(seed);
    Array3::from_shape_simple_fn((d, spec.h, spec.w), || rng.uniform(-1.0, 1.0))
}

/// Features carrying a scene: the first three channels hold its dilated
/// ground-truth heatmap, the rest low-amplitude noise.
pub fn bev_from_scene(scene: &Scene, spec: &BevGridSpec, d: usize, seed: u64) -> Result<Array3<f64>> {
    let gt = rasterize_gt(scene, spec, 3, None)?;
    let mut bev = synth_bev(d, spec, seed).mapv(|v| 0.1 * v);
    let c = d.min(MapClass::COUNT);
    bev.slice_mut(s![..c, .., ..]).assign(&gt.values().slice(s![..c, .., ..]));
    Ok(bev)
}

/// Level 0 followed by successive 2x2 average poolings.
pub fn pyramid(base: Array3<f64>, levels: usize) -> Vec<Array3<f64>> {
    let mut out = vec![base];
    while out.len() < levels {
        let prev = out.last().expect("non-empty");
        let (c, h, w) = prev.dim();
        let (h2, w2) = ((h / 2).max(1), (w / 2).max(1));
        let next = Array3::from_shape_fn((c, h2, w2), |(k, r, col)| {
            let rows = (2 * r)..(2 * r + 2).min(h);
            let cols = (2 * col)..(2 * col + 2).min(w);
            let cell = prev.slice(s![k, rows, cols]);
            cell.sum() / cell.len() as f64
        });
        out.push(next);
    }
    out
}
