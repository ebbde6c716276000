//! Heatmap targets and the radial loss-weight field.
//!
//! Ground truth is built in two passes. Every cell touched by an instance's
//! segments is set to 1.0 in that instance's class channel (the "core" cells),
//! then each core cell is dilated with a `k x k` Gaussian kernel, combining
//! overlapping contributions by maximum so values stay in `[0, 1]`.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::io::{decode_container, encode_container, write_atomic, HEATMAP_MAGIC};
use crate::model::{BevGridSpec, MapClass, Point2, Scene};

/// Per-class score raster, shape `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Array3<f64>,
}

impl Heatmap {
    pub fn zeros(spec: &BevGridSpec) -> Self {
        Self {
            values: Array3::zeros((MapClass::COUNT, spec.h, spec.w)),
        }
    }

    /// Wraps an array after checking it has one channel per class and every
    /// value lies in `[0, 1]`.
    pub fn from_array(values: Array3<f64>) -> Result<Self> {
        if values.dim().0 != MapClass::COUNT {
            return Err(Error::ShapeMismatch(format!(
                "heatmap needs {} channels, got {}",
                MapClass::COUNT,
                values.dim().0
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    /// `(C, H, W)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, class: MapClass, row: usize, col: usize) -> f64 {
        self.values[[class.index(), row, col]]
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    pub fn matches(&self, spec: &BevGridSpec) -> bool {
        let (_, h, w) = self.dim();
        h == spec.h && w == spec.w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_container(HEATMAP_MAGIC, &self.values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // f32 storage can round 1 - tiny up to exactly 1.0, never past it
        Self::from_array(decode_container(HEATMAP_MAGIC, bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Cells touched by the segment `a -> b`, in ascending `(row, col)` order.
///
/// Cells are treated as half-open in `x` (`[c, c+1)`) and closed in `y`
/// within each column strip, which agrees with [`BevGridSpec::world_to_grid`]
/// on the endpoints, keeps an axis-aligned segment lying on a grid line inside
/// a single column, and adds the side neighbor when the segment passes
/// exactly through a lattice corner. Points on the far range edges clamp into
/// the last row/column.
pub fn supercover_cells(spec: &BevGridSpec, a: Point2, b: Point2) -> Result<Vec<(usize, usize)>> {
    for p in [a, b] {
        if !spec.range.contains(p) {
            return Err(Error::OutOfRange { x: p.x, y: p.y });
        }
    }
    let (u0, v0) = spec.to_grid_coords(a);
    let (u1, v1) = spec.to_grid_coords(b);
    let (w_max, h_max) = (spec.w as i64 - 1, spec.h as i64 - 1);

    let mut cells = BTreeSet::new();
    let (u_lo, u_hi) = (u0.min(u1), u0.max(u1));
    let v_at = |u: f64| {
        if u1 == u0 {
            None
        } else {
            Some(v0 + (v1 - v0) * (u - u0) / (u1 - u0))
        }
    };
    for col in (u_lo.floor() as i64)..=(u_hi.floor() as i64) {
        let (va, vb) = match (v_at((col as f64).max(u_lo)), v_at(((col + 1) as f64).min(u_hi))) {
            (Some(va), Some(vb)) => (va, vb),
            _ => (v0, v1),
        };
        let r_lo = va.min(vb).floor() as i64;
        let r_hi = va.max(vb).floor() as i64;
        let c = col.clamp(0, w_max) as usize;
        for row in r_lo..=r_hi {
            cells.insert((row.clamp(0, h_max) as usize, c));
        }
    }
    Ok(cells.into_iter().collect())
}

/// Default dilation sigma for a kernel size: `k / 3` cells.
pub fn default_sigma(kernel_size: usize) -> f64 {
    kernel_size as f64 / 3.0
}

/// Rasterizes a scene into a multi-class heatmap target.
///
/// `sigma` defaults to [`default_sigma`]. `kernel_size` must be odd.
pub fn rasterize_gt(
    scene: &Scene,
    spec: &BevGridSpec,
    kernel_size: usize,
    sigma: Option<f64>,
) -> Result<Heatmap> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "kernel size {kernel_size} must be odd and positive"
        )));
    }
    let sigma = sigma.unwrap_or_else(|| default_sigma(kernel_size));
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma {sigma} must be positive")));
    }

    let mut core = Array3::<bool>::from_elem((MapClass::COUNT, spec.h, spec.w), false);
    for inst in scene.instances() {
        let ch = inst.class().index();
        let pts = inst.points();
        for &p in pts {
            let (r, c) = spec.world_to_grid(p)?;
            core[[ch, r, c]] = true;
        }
        for (i, j) in inst.segments() {
            for (r, c) in supercover_cells(spec, pts[i], pts[j])? {
                core[[ch, r, c]] = true;
            }
        }
    }
    Ok(dilate(&core, kernel_size, sigma))
}

fn dilate(core: &Array3<bool>, kernel_size: usize, sigma: f64) -> Heatmap {
    let (channels, h, w) = core.dim();
    let radius = (kernel_size / 2) as i64;
    let kernel: Vec<(i64, i64, f64)> = (-radius..=radius)
        .flat_map(|dr| (-radius..=radius).map(move |dc| (dr, dc)))
        .map(|(dr, dc)| (dr, dc, (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp()))
        .collect();

    let mut values = Array3::<f64>::zeros((channels, h, w));
    for ((ch, r, c), &hot) in core.indexed_iter() {
        if !hot {
            continue;
        }
        for &(dr, dc, kv) in &kernel {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                continue;
            }
            let cell = &mut values[[ch, rr as usize, cc as usize]];
            *cell = cell.max(kv);
        }
    }
    Heatmap { values }
}

/// Radial weight map applied cell-wise to the heatmap loss, shape `H x W`.
///
/// Equals 1.0 at the grid center and rises toward `alpha + 1` at the far
/// edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeightField {
    values: Array2<f64>,
}

impl GaussianWeightField {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn uniform(h: usize, w: usize, value: f64) -> Self {
        Self {
            values: Array2::from_elem((h, w), value),
        }
    }

    pub fn from_array(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: &self.values * factor,
        }
    }
}

/// Weight at signed cell offset `(dx, dy)` from the center of an `h x w` grid:
///
/// ```text
/// W = (1 - exp(-(dx^2 + dy^2) / (2 sx sy))) * alpha + 1,   sx = h / beta, sy = w / beta
/// ```
pub fn gaussian_weight(dx: f64, dy: f64, h: usize, w: usize, alpha: f64, beta: f64) -> f64 {
    let sx = h as f64 / beta;
    let sy = w as f64 / beta;
    (1.0 - (-(dx * dx + dy * dy) / (2.0 * sx * sy)).exp()) * alpha + 1.0
}

pub fn gaussian_weight_field(spec: &BevGridSpec, alpha: f64, beta: f64) -> Result<GaussianWeightField> {
    weight_field(spec.h, spec.w, alpha, beta)
}

/// [`gaussian_weight_field`] for a bare `h x w` raster.
pub fn weight_field(h: usize, w: usize, alpha: f64, beta: f64) -> Result<GaussianWeightField> {
    if !(alpha >= 0.0) || !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need alpha >= 0 and beta > 0, got alpha={alpha}, beta={beta}"
        )));
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let values = Array2::from_shape_fn((h, w), |(r, c)| {
        gaussian_weight(c as f64 - cx, r as f64 - cy, h, w, alpha, beta)
    });
    Ok(GaussianWeightField { values })
}
