//! Geometric prior generation.
//!
//! High-confidence heatmap cells become candidates; the circular sampler then
//! draws a fixed number of them across three concentric rings around the BEV
//! center so that distant regions keep a share of the budget proportional to
//! their ring radius.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::io::{decode_container, encode_container, write_atomic, PRIORS_MAGIC};
use crate::model::{BevGridSpec, MapClass, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cell: (usize, usize),
    pub class: MapClass,
    pub score: f64,
    /// Meters from the metric center of the range to the cell center.
    pub radial_distance: f64,
}

/// Descending score, then row-major cell, then class index.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.cell.cmp(&b.cell))
        .then(a.class.cmp(&b.class))
}

/// One candidate per `(class, cell)` whose score is at least `tau`, in
/// class-major, row-major order.
pub fn threshold_candidates(hm: &Heatmap, tau: f64, spec: &BevGridSpec) -> Result<Vec<Candidate>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {tau} not in (0, 1)")));
    }
    if !hm.matches(spec) {
        return Err(Error::ShapeMismatch(format!(
            "heatmap {:?} does not match grid {}x{}",
            hm.dim(),
            spec.h,
            spec.w
        )));
    }
    let center = spec.range.center();
    Ok(hm
        .values()
        .indexed_iter()
        .filter(|(_, v)| **v >= tau)
        .map(|((ch, r, c), &score)| Candidate {
            cell: (r, c),
            class: MapClass::from_index(ch).expect("heatmap has one channel per class"),
            score,
            radial_distance: spec.cell_center(r, c).dist(center),
        })
        .collect())
}

/// Largest cell-center distance from the BEV center.
pub fn max_radius(spec: &BevGridSpec) -> f64 {
    let center = spec.range.center();
    [(0, 0), (0, spec.w - 1), (spec.h - 1, 0), (spec.h - 1, spec.w - 1)]
        .into_iter()
        .map(|(r, c)| spec.cell_center(r, c).dist(center))
        .fold(0.0, f64::max)
}

/// Ring index (0, 1, 2) for a radial distance: rings are the equal thirds of
/// `max_radius`, each closed on its outer edge.
pub fn ring_of(radial_distance: f64, max_radius: f64) -> usize {
    if radial_distance <= max_radius / 3.0 {
        0
    } else if radial_distance <= 2.0 * max_radius / 3.0 {
        1
    } else {
        2
    }
}

/// Per-ring sample counts `round(M * L_i / (L_1 + L_2 + L_3))` with outer radii
/// in ratio 1:2:3; the outer ring absorbs the rounding residue.
pub fn ring_quotas(total: usize) -> [usize; 3] {
    let radii = [1.0, 2.0, 3.0];
    let sum: f64 = radii.iter().sum();
    let q0 = (total as f64 * radii[0] / sum).round() as usize;
    let q1 = (total as f64 * radii[1] / sum).round() as usize;
    [q0, q1, total - q0 - q1]
}

/// Selects exactly `total` candidates with the circular sampling rule.
///
/// Each ring contributes its top-scoring candidates up to its quota. Any
/// shortfall is filled with the best unused candidates from all rings, then
/// with zero-score placeholders at the BEV center.
pub fn csm_sample(cands: &[Candidate], total: usize, spec: &BevGridSpec) -> Result<Vec<Candidate>> {
    if total < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 samples, got {total}")));
    }
    let r_max = max_radius(spec);
    let quotas = ring_quotas(total);

    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| rank(&cands[a], &cands[b]));

    let mut used = vec![false; cands.len()];
    let mut taken = [0usize; 3];
    let mut out = Vec::with_capacity(total);
    for ring in 0..3 {
        for &i in &order {
            if taken[ring] == quotas[ring] {
                break;
            }
            if ring_of(cands[i].radial_distance, r_max) == ring {
                used[i] = true;
                taken[ring] += 1;
                out.push(cands[i]);
            }
        }
    }
    for &i in &order {
        if out.len() == total {
            break;
        }
        if !used[i] {
            used[i] = true;
            out.push(cands[i]);
        }
    }
    if out.len() < total {
        let center_cell = spec.world_to_grid(spec.range.center())?;
        let placeholder = Candidate {
            cell: center_cell,
            class: MapClass::Divider,
            score: 0.0,
            radial_distance: spec.cell_center(center_cell.0, center_cell.1).dist(spec.range.center()),
        };
        out.resize(total, placeholder);
    }
    Ok(out)
}

/// Priors fed to the coarse cross-attention stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPriors {
    /// `M x 2` normalized `(x, y)` in `[0, 1]`.
    pub coords: Array2<f64>,
    /// `M x C_feat` features gathered from the BEV map.
    pub features: Array2<f64>,
    pub classes: Vec<MapClass>,
    pub cells: Vec<(usize, usize)>,
}

impl SampledPriors {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Applies the same row permutation to every field.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |a: &Array2<f64>| a.select(ndarray::Axis(0), perm);
        Self {
            coords: pick(&self.coords),
            features: pick(&self.features),
            classes: perm.iter().map(|&i| self.classes[i]).collect(),
            cells: perm.iter().map(|&i| self.cells[i]).collect(),
        }
    }

    /// Binary payload: one channel of `M` rows holding `x, y, features...`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.len();
        let cols = 2 + self.features.ncols();
        let table = Array3::from_shape_fn((1, m, cols), |(_, r, c)| {
            if c < 2 {
                self.coords[[r, c]]
            } else {
                self.features[[r, c - 2]]
            }
        });
        encode_container(PRIORS_MAGIC, &table)
    }

    pub fn sidecar(&self) -> PriorSidecar {
        PriorSidecar {
            cells: self.cells.clone(),
            classes: self.classes.clone(),
        }
    }

    pub fn write(&self, bin: &Path, sidecar: &Path) -> Result<()> {
        write_atomic(bin, &self.to_bytes())?;
        write_atomic(sidecar, serde_json::to_string_pretty(&self.sidecar())?.as_bytes())
    }

    pub fn read(bin: &Path, sidecar: &Path) -> Result<Self> {
        let table = decode_container(PRIORS_MAGIC, &std::fs::read(bin)?)?;
        let side: PriorSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        let (_, m, cols) = table.dim();
        if cols < 2 || side.cells.len() != m || side.classes.len() != m {
            return Err(Error::Format(format!("prior table {m}x{cols} does not match its sidecar")));
        }
        let rows = table.index_axis(ndarray::Axis(0), 0);
        Ok(Self {
            coords: rows.slice(ndarray::s![.., ..2]).to_owned(),
            features: rows.slice(ndarray::s![.., 2..]).to_owned(),
            classes: side.classes,
            cells: side.cells,
        })
    }
}

/// JSON companion of the prior container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSidecar {
    pub cells: Vec<(usize, usize)>,
    pub classes: Vec<MapClass>,
}

/// Gathers features and normalized coordinates for the selected cells.
pub fn gather_priors(bev: &Array3<f64>, selected: &[Candidate], spec: &BevGridSpec) -> Result<SampledPriors> {
    let (channels, h, w) = bev.dim();
    let m = selected.len();
    let mut coords = Array2::zeros((m, 2));
    let mut features = Array2::zeros((m, channels));
    for (k, cand) in selected.iter().enumerate() {
        let (r, c) = cand.cell;
        if r >= h || c >= w {
            return Err(Error::IndexOutOfBounds { row: r, col: c, h, w });
        }
        features.row_mut(k).assign(&bev.slice(ndarray::s![.., r, c]));
        let p: Point2 = spec.range.normalize(spec.grid_to_world((r, c))?);
        coords[[k, 0]] = p.x;
        coords[[k, 1]] = p.y;
    }
    Ok(SampledPriors {
        coords,
        features,
        classes: selected.iter().map(|c| c.class).collect(),
        cells: selected.iter().map(|c| c.cell).collect(),
    })
}
