//! Bilinear interpolation kernels shared by the tape op and the data pipeline.
//!
//! Convention: half-pixel centers with `align_corners = false`, i.e. output
//! pixel `o` samples source coordinate `(o + 0.5) * in/out - 0.5`, clamped to
//! the valid range. Matches the common default of mainstream frameworks.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

/// Per-axis sampling plan: for each output index, the two source indices and
/// the weight of the second one.
#[derive(Debug, Clone)]
pub struct AxisPlan {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub fn axis_plan(in_len: usize, out_len: usize) -> AxisPlan {
    let scale = in_len as f64 / out_len as f64;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let l = (src.floor() as usize).min(in_len - 1);
        let h = (l + 1).min(in_len - 1);
        lo.push(l);
        hi.push(h);
        frac.push(src - l as f64);
    }
    AxisPlan { lo, hi, frac }
}

fn resize_plane_slices(
    src: &[f64],
    in_w: usize,
    out: &mut [f64],
    rows: &AxisPlan,
    cols: &AxisPlan,
    out_w: usize,
) {
    for (y, o_row) in out.chunks_exact_mut(out_w).enumerate() {
        let (y0, y1, fy) = (rows.lo[y], rows.hi[y], rows.frac[y]);
        let top = &src[y0 * in_w..y0 * in_w + in_w];
        let bot = &src[y1 * in_w..y1 * in_w + in_w];
        for (x, o) in o_row.iter_mut().enumerate() {
            let (x0, x1, fx) = (cols.lo[x], cols.hi[x], cols.frac[x]);
            let t = top[x0] * (1.0 - fx) + top[x1] * fx;
            let b = bot[x0] * (1.0 - fx) + bot[x1] * fx;
            *o = t * (1.0 - fy) + b * fy;
        }
    }
}

/// Bilinear resize of a single 2-D plane.
pub fn resize_plane(src: ArrayView2<f64>, out_hw: (usize, usize)) -> Array2<f64> {
    let (ih, iw) = src.dim();
    let (oh, ow) = out_hw;
    let rows = axis_plan(ih, oh);
    let cols = axis_plan(iw, ow);
    let src_owned;
    let src_slice = match src.as_slice() {
        Some(s) => s,
        None => {
            src_owned = src.to_owned();
            src_owned.as_slice().unwrap()
        }
    };
    let mut out = vec![0.0f64; oh * ow];
    resize_plane_slices(src_slice, iw, &mut out, &rows, &cols, ow);
    Array2::from_shape_vec((oh, ow), out).unwrap()
}

/// Bilinear resize of every (batch, channel) plane of a NCHW tensor.
pub fn resize_nchw(src: ArrayView4<f64>, out_hw: (usize, usize)) -> Array4<f64> {
    let (b, c, ih, iw) = src.dim();
    let (oh, ow) = out_hw;
    let rows = axis_plan(ih, oh);
    let cols = axis_plan(iw, ow);
    let xs = src.as_slice().expect("contiguous input");
    let mut out = vec![0.0f64; b * c * oh * ow];
    for plane_idx in 0..b * c {
        let src_plane = &xs[plane_idx * ih * iw..(plane_idx + 1) * ih * iw];
        let dst_plane = &mut out[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        resize_plane_slices(src_plane, iw, dst_plane, &rows, &cols, ow);
    }
    Array4::from_shape_vec((b, c, oh, ow), out).unwrap()
}

/// Transpose of [`resize_nchw`]: scatters output-space gradients back onto the
/// source grid with the same interpolation weights.
pub fn resize_nchw_backward(grad_out: ArrayView4<f64>, in_hw: (usize, usize)) -> Array4<f64> {
    let (b, c, oh, ow) = grad_out.dim();
    let (ih, iw) = in_hw;
    let rows = axis_plan(ih, oh);
    let cols = axis_plan(iw, ow);
    let gs = grad_out.as_slice().expect("contiguous grad");
    let mut gx = vec![0.0f64; b * c * ih * iw];
    for plane_idx in 0..b * c {
        let g_plane = &gs[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        let x_plane = &mut gx[plane_idx * ih * iw..(plane_idx + 1) * ih * iw];
        for y in 0..oh {
            let (y0, y1, fy) = (rows.lo[y], rows.hi[y], rows.frac[y]);
            for x in 0..ow {
                let (x0, x1, fx) = (cols.lo[x], cols.hi[x], cols.frac[x]);
                let g = g_plane[y * ow + x];
                x_plane[y0 * iw + x0] += g * (1.0 - fy) * (1.0 - fx);
                x_plane[y0 * iw + x1] += g * (1.0 - fy) * fx;
                x_plane[y1 * iw + x0] += g * fy * (1.0 - fx);
                x_plane[y1 * iw + x1] += g * fy * fx;
            }
        }
    }
    Array4::from_shape_vec((b, c, ih, iw), gx).unwrap()
}

/// Nearest-neighbor resize of a 2-D integer plane (label maps). Uses the same
/// half-pixel center mapping, taking the nearest source pixel.
pub fn resize_nearest_u8(src: &Array2<u8>, out_hw: (usize, usize)) -> Array2<u8> {
    let (ih, iw) = src.dim();
    let (oh, ow) = out_hw;
    let map = |o: usize, in_len: usize, out_len: usize| -> usize {
        let scale = in_len as f64 / out_len as f64;
        let src_f = (o as f64 + 0.5) * scale - 0.5;
        (src_f.round().max(0.0) as usize).min(in_len - 1)
    };
    let ys: Vec<usize> = (0..oh).map(|y| map(y, ih, oh)).collect();
    let xs: Vec<usize> = (0..ow).map(|x| map(x, iw, ow)).collect();
    Array2::from_shape_fn((oh, ow), |(y, x)| src[[ys[y], xs[x]]])
}
