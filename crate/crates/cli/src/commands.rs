use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ndarray::Array2;
use serde_json::json;

use fastmap::decoder::{
    bev_from_scene, pipeline_forward, pyramid, synth_bev, DecoderConfig, DecoderWeights, PAPER_PRIOR_COUNT,
};
use fastmap::fit::{fit_points, FitConfig};
use fastmap::heatmap::{gaussian_weight_field, rasterize_gt, Heatmap};
use fastmap::io::{decode_container, encode_container, read_predictions, read_scene, write_atomic, MapDocument, HEATMAP_MAGIC};
use fastmap::losses::{
    compute_losses, gradcheck_classification, gradcheck_heatmap, gradcheck_instance, GradCheck, HeatmapInput,
    InstanceLoss, LossOptions, LossWeights, PointLineForm, StageInput,
};
use fastmap::matcher::{permute, point_permutations, Assignment};
use fastmap::metrics::{average_precision, diagnostics, format_table, ApConfig, ApIntegration, ThresholdSet};
use fastmap::sampler::SampledPriors;
use fastmap::synth::{generate_scene, perturb, SynthConfig};
use fastmap::{BevGridSpec, BevRange, MapClass, MapInstance, PredictionSet, Scene};

use crate::manifest::{suffixed, ManifestBuilder};
use crate::svg::Canvas;
use crate::{Command, GridArgs, IntegrationArg, SetArg, WeightArgs};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let numerical = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<fastmap::Error>(), Some(fastmap::Error::Numerical(_))));
        Failure { code: if numerical { 3 } else { 2 }, error }
    }
}

impl From<fastmap::Error> for Failure {
    fn from(e: fastmap::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Stdout write that tolerates a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Gen { seed, dividers, crossings, boundaries, curvature, m, perturbed, noise, out } => {
            let cfg = SynthConfig { seed, dividers, crossings, boundaries, curvature: (0.0, curvature), noise, m, ..Default::default() };
            gen(&cfg, perturbed.as_deref(), &out)
        }
        Command::Rasterize { scene, grid, kernel, sigma, svg, out } => rasterize(&scene, &grid, kernel, sigma, svg.as_deref(), &out),
        Command::Forward {
            scene,
            bev,
            weights,
            seed,
            grid,
            n,
            m,
            d,
            heads,
            sample_points,
            priors,
            paper_scale,
            levels,
            offset_scale,
            tau,
            dump_heatmap,
            dump_priors,
            dump_weights,
            dump_bev,
            out,
        } => {
            let cfg = DecoderConfig {
                n,
                m,
                d,
                heads,
                sample_points,
                prior_count: if paper_scale { PAPER_PRIOR_COUNT } else { priors },
                levels,
                offset_scale,
                seed,
            };
            let dumps = Dumps { heatmap: dump_heatmap, priors: dump_priors, weights: dump_weights, bev: dump_bev };
            forward(scene.as_deref(), bev.as_deref(), weights.as_deref(), &cfg, &grid, tau, &dumps, &out)
        }
        Command::Loss { pred, gt, stage1, heatmap, kernel, grid, weights, dump_matching, gradcheck, eps, out } => {
            let req = LossRequest { stage1, heatmap, kernel, grid, dump_matching, gradcheck, eps };
            loss(&pred, &gt, &weights, &req, &out)
        }
        Command::Fit { pred, gt, steps, lr, fixed_step, weights, trace, out } => {
            let (w, options) = loss_weights(&weights)?;
            let cfg = FitConfig { steps, lr, weights: w, options, backtrack: !fixed_step };
            let trace = trace.unwrap_or_else(|| suffixed(&out, ".trace.csv"));
            fit(&pred, &gt, &cfg, &trace, &out)
        }
        Command::Eval { pred, gt, set, integration, densify, pr_csv, quiet, out } => {
            let set = match set {
                SetArg::Strict => ThresholdSet::Strict,
                SetArg::Standard => ThresholdSet::Standard,
            };
            let integration = match integration {
                IntegrationArg::Area => ApIntegration::Area,
                IntegrationArg::Interp101 => ApIntegration::Interp101,
            };
            eval(&pred, &gt, set, ApConfig { densify, integration }, pr_csv.as_deref(), quiet, &out)
        }
        Command::Viz { gt, pred, heatmap, priors, scale, out } => viz(&gt, &pred, heatmap.as_deref(), priors.as_deref(), scale, &out),
    }
}

fn load_scene(path: &Path) -> anyhow::Result<Scene> {
    read_scene(path).with_context(|| format!("reading scene {}", path.display()))
}

fn load_predictions(path: &Path) -> anyhow::Result<PredictionSet> {
    read_predictions(path).with_context(|| format!("reading predictions {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn grid_spec(range: BevRange, grid: &GridArgs) -> anyhow::Result<BevGridSpec> {
    BevGridSpec::new(range, grid.resolution).context("invalid grid")
}

fn gen(cfg: &SynthConfig, perturbed: Option<&Path>, out: &Path) -> CmdResult {
    let mut man = ManifestBuilder::new("gen");
    man.config(json!(cfg));
    man.seed("scene", cfg.seed);
    let scene = generate_scene(cfg)?;
    write_bytes(out, MapDocument::from_scene(&scene).to_json()?.as_bytes())?;
    man.output(out);
    if let Some(p) = perturbed {
        let preds = perturb(&scene, cfg)?;
        write_bytes(p, MapDocument::from_predictions(&preds).to_json()?.as_bytes())?;
        man.output(p);
    }
    man.write(out)?;
    Ok(())
}

fn rasterize(scene_path: &Path, grid: &GridArgs, kernel: usize, sigma: Option<f64>, svg: Option<&Path>, out: &Path) -> CmdResult {
    let mut man = ManifestBuilder::new("rasterize");
    man.config(json!({ "resolution": grid.resolution, "kernel": kernel, "sigma": sigma }));
    let scene = load_scene(scene_path)?;
    man.input(scene_path);
    let spec = grid_spec(scene.range(), grid)?;
    let hm = rasterize_gt(&scene, &spec, kernel, sigma)?;
    write_bytes(out, &hm.to_bytes())?;
    man.output(out);
    if let Some(svg) = svg {
        let mut canvas = Canvas::new(spec.range, 10.0);
        canvas.frame();
        canvas.heatmap(&hm, &spec);
        for inst in scene.instances() {
            canvas.instance(inst, false);
        }
        write_bytes(svg, canvas.finish().as_bytes())?;
        man.output(svg);
    }
    man.write(out)?;
    Ok(())
}

struct Dumps {
    heatmap: Option<PathBuf>,
    priors: Option<PathBuf>,
    weights: Option<PathBuf>,
    bev: Option<PathBuf>,
}

#[allow(clippy::too_many_arguments)]
fn forward(
    scene: Option<&Path>,
    bev_path: Option<&Path>,
    weights_path: Option<&Path>,
    cfg: &DecoderConfig,
    grid: &GridArgs,
    tau: f64,
    dumps: &Dumps,
    out: &Path,
) -> CmdResult {
    let mut man = ManifestBuilder::new("forward");
    man.seed("decoder", cfg.seed);
    let weights = match weights_path {
        Some(p) => {
            man.input(p);
            let w = DecoderWeights::load(p, &suffixed(p, ".json")).with_context(|| format!("loading weights {}", p.display()))?;
            if w.config() != cfg {
                eprintln!("note: using the configuration stored with {}", p.display());
            }
            w
        }
        None => DecoderWeights::init(cfg)?,
    };
    let cfg = weights.config().clone();
    let range = match scene {
        Some(p) => load_scene(p)?.range(),
        None => BevRange::default(),
    };
    let spec = grid_spec(range, grid)?;
    let base = match (scene, bev_path) {
        (Some(p), _) => {
            man.input(p);
            bev_from_scene(&load_scene(p)?, &spec, cfg.d, cfg.seed)?
        }
        (None, Some(p)) => {
            man.input(p);
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let bev = decode_container(HEATMAP_MAGIC, &bytes)?;
            if bev.dim() != (cfg.d, spec.h, spec.w) {
                return Err(anyhow!(
                    "BEV features are {:?}, expected ({}, {}, {})",
                    bev.dim(),
                    cfg.d,
                    spec.h,
                    spec.w
                )
                .into());
            }
            bev
        }
        (None, None) => synth_bev(cfg.d, &spec, cfg.seed),
    };
    man.config(json!({ "decoder": cfg, "resolution": grid.resolution, "tau": tau }));
    if let Some(p) = &dumps.bev {
        write_bytes(p, &encode_container(HEATMAP_MAGIC, &base))?;
        man.output(p);
    }
    let levels = pyramid(base, cfg.levels);
    let result = pipeline_forward(&levels, &weights, &spec, tau)?;
    write_bytes(out, MapDocument::from_predictions(&result.predictions).to_json()?.as_bytes())?;
    man.output(out);
    if let Some(p) = &dumps.heatmap {
        result.heatmap.write(p)?;
        man.output(p);
    }
    if let Some(p) = &dumps.priors {
        let side = suffixed(p, ".json");
        result.priors.write(p, &side)?;
        man.output(p);
        man.output(&side);
    }
    if let Some(p) = &dumps.weights {
        let side = suffixed(p, ".json");
        weights.save(p, &side)?;
        man.output(p);
        man.output(&side);
    }
    eprintln!(
        "{} candidates above tau, {} priors, {} predictions",
        result.candidates,
        result.priors.len(),
        result.predictions.len()
    );
    man.write(out)?;
    Ok(())
}

fn loss_weights(a: &WeightArgs) -> anyhow::Result<(LossWeights, LossOptions)> {
    let w = LossWeights {
        alpha_cls: a.alpha_cls,
        alpha_pl: a.alpha_pl,
        alpha_pp: a.alpha_pp,
        alpha_al: a.alpha_al,
        alpha_heat: a.alpha_heat,
        gamma: a.gamma,
        beta: a.beta,
        alpha_gauss: a.alpha_gauss,
        beta_gauss: a.beta_gauss,
    };
    w.validate()?;
    let form = if a.printed_form { PointLineForm::Printed } else { PointLineForm::Perpendicular };
    Ok((w, LossOptions { form, class_weight: a.class_weight }))
}

struct LossRequest {
    stage1: Option<PathBuf>,
    heatmap: Option<PathBuf>,
    kernel: usize,
    grid: GridArgs,
    dump_matching: bool,
    gradcheck: bool,
    eps: f64,
}

fn logits_matrix(p: &PredictionSet) -> anyhow::Result<Array2<f64>> {
    let cols = MapClass::COUNT + 1;
    let mut out = Array2::zeros((p.len(), cols));
    for (i, pred) in p.predictions().iter().enumerate() {
        if pred.logits.len() != cols {
            return Err(anyhow!("prediction {i} has {} logits, expected {cols}", pred.logits.len()));
        }
        for (k, v) in pred.logits.iter().enumerate() {
            out[[i, k]] = *v;
        }
    }
    Ok(out)
}

fn assignment_json(a: &Assignment) -> serde_json::Value {
    json!({
        "pairs": a.pairs.iter().map(|p| json!({ "pred": p.pred, "gt": p.gt, "permutation": p.permutation, "cost": p.cost })).collect::<Vec<_>>(),
        "unmatched_preds": a.unmatched_preds,
        "unmatched_gts": a.unmatched_gts,
    })
}

fn merge(into: &mut GradCheck, c: GradCheck) {
    into.max_rel_error = into.max_rel_error.max(c.max_rel_error);
    into.checked += c.checked;
    into.skipped += c.skipped;
}

fn loss(pred_path: &Path, gt_path: &Path, wa: &WeightArgs, req: &LossRequest, out: &Path) -> CmdResult {
    let mut man = ManifestBuilder::new("loss");
    let (weights, opts) = loss_weights(wa)?;
    man.config(json!({ "weights": weights, "options": opts, "kernel": req.kernel, "resolution": req.grid.resolution }));
    let preds = load_predictions(pred_path)?;
    let gts = load_scene(gt_path)?;
    man.input(pred_path);
    man.input(gt_path);
    let stage1 = match &req.stage1 {
        Some(p) => {
            man.input(p);
            load_predictions(p)?
        }
        None => preds.clone(),
    };
    let inst2: Vec<MapInstance> = preds.instances().cloned().collect();
    let inst1: Vec<MapInstance> = stage1.instances().cloned().collect();
    let (log2, log1) = (logits_matrix(&preds)?, logits_matrix(&stage1)?);

    let heat = match &req.heatmap {
        Some(p) => {
            man.input(p);
            let spec = grid_spec(gts.range(), &req.grid)?;
            let pred_hm = Heatmap::read(p).with_context(|| format!("reading heatmap {}", p.display()))?;
            if !pred_hm.matches(&spec) {
                return Err(anyhow!("heatmap is {:?}, grid is 3x{}x{}", pred_hm.dim(), spec.h, spec.w).into());
            }
            let gt_hm = rasterize_gt(&gts, &spec, req.kernel, None)?;
            let field = gaussian_weight_field(&spec, weights.alpha_gauss, weights.beta_gauss)?;
            Some((pred_hm, gt_hm, field))
        }
        None => None,
    };
    let breakdown = compute_losses(
        StageInput { instances: &inst1, logits: &log1 },
        StageInput { instances: &inst2, logits: &log2 },
        gts.instances(),
        &gts.range(),
        heat.as_ref().map(|(p, g, w)| HeatmapInput { pred: p, gt: g, weight: w }),
        &weights,
        &opts,
    )?;
    let mut report = breakdown.to_json();
    if req.dump_matching {
        report["matching"] = json!({
            "stage1": assignment_json(&breakdown.stage1_assignment),
            "stage2": assignment_json(&breakdown.stage2_assignment),
        });
    }
    if req.gradcheck {
        let mut per_term = serde_json::Map::new();
        let mut overall = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
        for (name, kind) in [
            ("pp", InstanceLoss::PointsPoints),
            ("pl", InstanceLoss::PointLine),
            ("al", InstanceLoss::AuxiliaryLine),
        ] {
            let mut acc = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
            for pair in &breakdown.stage2_assignment.pairs {
                let gt = &gts.instances()[pair.gt];
                let ordered = permute(gt, &point_permutations(gt)[pair.permutation]);
                merge(&mut acc, gradcheck_instance(kind, &inst2[pair.pred], &ordered, req.eps)?);
            }
            merge(&mut overall, acc);
            per_term.insert(name.into(), json!(acc));
        }
        let targets: Vec<Option<MapClass>> = breakdown
            .stage2_assignment
            .gt_of_pred(inst2.len())
            .into_iter()
            .map(|g| g.map(|j| gts.instances()[j].class()))
            .collect();
        let cls = gradcheck_classification(&log2, &targets, req.eps)?;
        merge(&mut overall, cls);
        per_term.insert("cls".into(), json!(cls));
        if let Some((p, g, w)) = &heat {
            let h = gradcheck_heatmap(p, g, w, req.eps)?;
            merge(&mut overall, h);
            per_term.insert("heat".into(), json!(h));
        }
        report["gradcheck"] = json!({ "terms": per_term, "max_rel_error": overall.max_rel_error, "checked": overall.checked, "skipped": overall.skipped });
    }
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    emit(&format!("{text}\n"));
    write_bytes(out, text.as_bytes())?;
    man.output(out);
    man.write(out)?;
    Ok(())
}

fn fit(pred_path: &Path, gt_path: &Path, cfg: &FitConfig, trace_path: &Path, out: &Path) -> CmdResult {
    let mut man = ManifestBuilder::new("fit");
    man.config(json!(cfg));
    let preds = load_predictions(pred_path)?;
    let gts = load_scene(gt_path)?;
    man.input(pred_path);
    man.input(gt_path);
    let result = fit_points(&preds, &gts, cfg)?;
    let mut csv = String::from("step,loss\n");
    for (k, v) in result.trace.iter().enumerate() {
        let _ = writeln!(csv, "{k},{v:.9}");
    }
    write_bytes(out, MapDocument::from_predictions(&result.predictions).to_json()?.as_bytes())?;
    write_bytes(trace_path, csv.as_bytes())?;
    man.output(out);
    man.output(trace_path);
    eprintln!(
        "loss {:.6} -> {:.6} over {} steps",
        result.trace[0],
        result.trace.last().copied().unwrap_or(f64::NAN),
        cfg.steps
    );
    man.write(out)?;
    Ok(())
}

fn eval(pred_path: &Path, gt_path: &Path, set: ThresholdSet, cfg: ApConfig, pr_csv: Option<&Path>, quiet: bool, out: &Path) -> CmdResult {
    let mut man = ManifestBuilder::new("eval");
    man.config(json!({ "set": set, "thresholds": set.thresholds(), "ap": cfg }));
    let preds = load_predictions(pred_path)?;
    let gts = load_scene(gt_path)?;
    man.input(pred_path);
    man.input(gt_path);
    let thresholds = set.thresholds();
    let ap = average_precision(&preds, &gts, &thresholds, &cfg)?;
    let diag = diagnostics(&preds, &gts, &thresholds, cfg.densify)?;
    let excluded: Vec<&str> = ap.classes.iter().filter(|c| c.num_gt == 0).map(|c| c.class.name()).collect();
    if !quiet {
        emit(&format_table(&ap, &diag));
        if !excluded.is_empty() {
            emit(&format!("excluded from mAP (no ground truth): {}\n", excluded.join(", ")));
        }
    }
    let report = json!({
        "set": set,
        "thresholds": ap.thresholds,
        "classes": ap.classes,
        "map": ap.map,
        "excluded_classes": excluded,
        "diagnostics": diag,
    });
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    emit(&format!("{text}\n"));
    write_bytes(out, text.as_bytes())?;
    man.output(out);
    if let Some(p) = pr_csv {
        write_bytes(p, ap.curves_csv().as_bytes())?;
        man.output(p);
    }
    man.write(out)?;
    Ok(())
}

fn viz(gts: &[PathBuf], preds: &[PathBuf], heatmap: Option<&Path>, priors: Option<&Path>, scale: f64, out: &Path) -> CmdResult {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(anyhow!("scale must be positive").into());
    }
    let mut man = ManifestBuilder::new("viz");
    man.config(json!({ "scale": scale }));
    let scenes = gts.iter().map(|p| load_scene(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let pred_sets = preds.iter().map(|p| load_predictions(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let range = scenes
        .first()
        .map(|s| s.range())
        .or_else(|| pred_sets.first().map(|p| p.range()))
        .unwrap_or_default();
    let mut canvas = Canvas::new(range, scale);
    canvas.frame();
    if let Some(p) = heatmap {
        man.input(p);
        let hm = Heatmap::read(p).with_context(|| format!("reading heatmap {}", p.display()))?;
        let (_, h, w) = hm.dim();
        let res = range.x_extent() / w as f64;
        let spec = BevGridSpec::new(range, res).context("heatmap does not tile the range")?;
        if spec.h != h {
            return Err(anyhow!("heatmap is {h}x{w}, which does not match the range").into());
        }
        canvas.heatmap(&hm, &spec);
    }
    if let Some(p) = priors {
        man.input(p);
        let pr = SampledPriors::read(p, &suffixed(p, ".json")).with_context(|| format!("reading priors {}", p.display()))?;
        canvas.priors(&pr);
    }
    for (path, scene) in gts.iter().zip(&scenes) {
        man.input(path);
        for inst in scene.instances() {
            canvas.instance(inst, false);
        }
    }
    for (path, set) in preds.iter().zip(&pred_sets) {
        man.input(path);
        for inst in set.instances() {
            canvas.instance(inst, true);
        }
    }
    write_bytes(out, canvas.finish().as_bytes())?;
    man.output(out);
    man.write(out)?;
    Ok(())
}
