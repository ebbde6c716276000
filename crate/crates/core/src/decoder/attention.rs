//! Scaled dot-product attention, bilinear feature sampling and deformable
//! attention over BEV feature levels.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3};

use super::ops::{linear, softmax_in_place};

/// Projections of one multi-head attention layer, `(in, out)` matrices.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: ArrayView1<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: ArrayView1<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: ArrayView1<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: ArrayView1<'a, f64>,
}

/// Multi-head scaled dot-product attention.
///
/// Returns the output projection (`queries x d`) and the attention weights
/// as `(heads, queries, keys)`.
pub fn multi_head_attention(
    query: ArrayView2<f64>,
    key: ArrayView2<f64>,
    value: ArrayView2<f64>,
    p: &AttnParams<'_>,
    heads: usize,
) -> (Array2<f64>, Array3<f64>) {
    let q = linear(query, p.wq, p.bq);
    let k = linear(key, p.wk, p.bk);
    let v = linear(value, p.wv, p.bv);
    let (nq, d) = q.dim();
    let nk = k.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Array3::zeros((heads, nq, nk));
    let mut concat = Array2::zeros((nq, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut scores = qh.dot(&kh.t()) * scale;
        for mut row in scores.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        concat.slice_mut(cols).assign(&scores.dot(&vh));
        weights.index_axis_mut(ndarray::Axis(0), h).assign(&scores);
    }
    (linear(concat.view(), p.wo, p.bo), weights)
}

/// Bilinear interpolation of a `(C, H, W)` map at fractional `(row, col)`
/// measured in cell-center units. Coordinates outside the map are clamped
/// to the border centers.
pub fn bilinear_sample_grid(feat: ArrayView3<f64>, row: f64, col: f64) -> Array1<f64> {
    let (_, h, w) = feat.dim();
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let mut out = feat.slice(s![.., r0, c0]).to_owned();
    if fr == 0.0 && fc == 0.0 {
        return out;
    }
    out *= (1.0 - fr) * (1.0 - fc);
    out.scaled_add((1.0 - fr) * fc, &feat.slice(s![.., r0, c1]));
    out.scaled_add(fr * (1.0 - fc), &feat.slice(s![.., r1, c0]));
    out.scaled_add(fr * fc, &feat.slice(s![.., r1, c1]));
    out
}

/// Bilinear sample at normalized `(u, v)` in `[0, 1]^2`, `u` along columns
/// and `v` along rows. Cell `(r, c)` has its center at
/// `((c + 0.5) / W, (r + 0.5) / H)`.
pub fn bilinear_sample(feat: ArrayView3<f64>, u: f64, v: f64) -> Array1<f64> {
    let (_, h, w) = feat.dim();
    let u = u.clamp(0.0, 1.0);
    let v = v.clamp(0.0, 1.0);
    bilinear_sample_grid(feat, v * h as f64 - 0.5, u * w as f64 - 0.5)
}

/// Projections of the deformable attention layer.
#[derive(Debug, Clone, Copy)]
pub struct DeformParams<'a> {
    /// `d -> heads * levels * points * 2`
    pub w_offset: ArrayView2<'a, f64>,
    pub b_offset: ArrayView1<'a, f64>,
    /// `d -> heads * levels * points`
    pub w_weight: ArrayView2<'a, f64>,
    pub b_weight: ArrayView1<'a, f64>,
    pub w_value: ArrayView2<'a, f64>,
    pub b_value: ArrayView1<'a, f64>,
    pub w_out: ArrayView2<'a, f64>,
    pub b_out: ArrayView1<'a, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformOutput {
    /// `queries x d` after the output projection.
    pub out: Array2<f64>,
    /// `(queries, heads, levels * points)`, softmax over the last axis.
    pub weights: Array3<f64>,
    /// Clamped normalized sampling locations, `(queries, heads, levels * points, 2)`.
    pub locations: Array4<f64>,
}

/// Deformable attention: each query and head samples `points` locations per
/// level around its reference point and mixes them with softmax weights.
///
/// Offsets are `tanh(.) * offset_scale` in normalized units.
pub fn deformable_attention(
    query: ArrayView2<f64>,
    refs: ArrayView2<f64>,
    levels: &[ArrayView3<f64>],
    p: &DeformParams<'_>,
    heads: usize,
    points: usize,
    offset_scale: f64,
) -> DeformOutput {
    let (nq, d) = query.dim();
    let dh = d / heads;
    let per_head = levels.len() * points;
    let offsets = linear(query, p.w_offset, p.b_offset).mapv(|v| v.tanh() * offset_scale);
    let logits = linear(query, p.w_weight, p.b_weight);
    let mut weights = Array3::zeros((nq, heads, per_head));
    let mut locations = Array4::zeros((nq, heads, per_head, 2));
    let mut mixed = Array2::zeros((nq, d));
    for q in 0..nq {
        for h in 0..heads {
            let mut w: Vec<f64> = logits.slice(s![q, h * per_head..(h + 1) * per_head]).to_vec();
            softmax_in_place(&mut w);
            let mut acc = Array1::<f64>::zeros(dh);
            for (l, level) in levels.iter().enumerate() {
                for k in 0..points {
                    let j = l * points + k;
                    let o = 2 * (h * per_head + j);
                    let u = (refs[[q, 0]] + offsets[[q, o]]).clamp(0.0, 1.0);
                    let v = (refs[[q, 1]] + offsets[[q, o + 1]]).clamp(0.0, 1.0);
                    locations[[q, h, j, 0]] = u;
                    locations[[q, h, j, 1]] = v;
                    let raw = bilinear_sample(*level, u, v);
                    let value = raw.dot(&p.w_value.slice(s![.., h * dh..(h + 1) * dh]))
                        + p.b_value.slice(s![h * dh..(h + 1) * dh]);
                    acc.scaled_add(w[j], &value);
                }
            }
            mixed.slice_mut(s![q, h * dh..(h + 1) * dh]).assign(&acc);
            weights.slice_mut(s![q, h, ..]).assign(&Array1::from(w));
        }
    }
    DeformOutput { out: linear(mixed.view(), p.w_out, p.b_out), weights, locations }
}
