//! Evaluation metrics: Dice, Sensitivity, Precision, MAE, Structure Measure
//! and the mean Enhanced-alignment Measure.
//!
//! Binary set metrics follow pixel-count definitions with explicit empty-set
//! conventions. The structure measure combines object-aware and region-aware
//! similarity (centroid 4-way split, SSIM-style block score, degenerate-GT
//! fallbacks). The enhanced-alignment measure scores the bias-aligned
//! correlation with quadratic enhancement, averaged over 256 binarization
//! thresholds; at the zero threshold a pixel counts as foreground only if its
//! confidence is strictly positive.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const EPS: f64 = 2.220_446_049_250_313e-16;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetricConfig {
    /// Balance between object- and region-aware structure similarity.
    pub alpha: f64,
    /// Binarization threshold for Dice/Sensitivity/Precision.
    pub eval_threshold: f64,
    /// Number of E-measure threshold levels (levels 0..n-1 over [0,1]).
    pub e_thresholds: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { alpha: 0.5, eval_threshold: 0.5, e_thresholds: 256 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0,1]".into()));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(Error::Config("eval_threshold must be in (0,1)".into()));
        }
        if self.e_thresholds < 2 {
            return Err(Error::Config("e_thresholds must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub dice: f64,
    pub sens: f64,
    pub prec: f64,
    pub mae: f64,
    pub e_phi_mean: f64,
    pub s_alpha: f64,
}

/// Aggregate report: arithmetic means of the per-slice values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub sens: f64,
    pub prec: f64,
    pub mae: f64,
    pub e_phi_mean: f64,
    pub s_alpha: f64,
    pub per_slice: Vec<SliceMetrics>,
}

fn check_shapes<A, B>(s: &Array2<A>, g: &Array2<B>) -> Result<()> {
    if s.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "metric inputs {:?} vs {:?}",
            s.dim(),
            g.dim()
        )));
    }
    Ok(())
}

fn counts(s: &Array2<u8>, g: &Array2<u8>) -> (f64, f64, f64) {
    let mut inter = 0u64;
    let mut ns = 0u64;
    let mut ng = 0u64;
    for (sv, gv) in s.iter().zip(g.iter()) {
        let sb = (*sv != 0) as u64;
        let gb = (*gv != 0) as u64;
        inter += sb & gb;
        ns += sb;
        ng += gb;
    }
    (inter as f64, ns as f64, ng as f64)
}

/// 2|S∩G| / (|S|+|G|); both sets empty -> 1.
pub fn dice(s: &Array2<u8>, g: &Array2<u8>) -> Result<f64> {
    check_shapes(s, g)?;
    let (inter, ns, ng) = counts(s, g);
    if ns + ng == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (ns + ng))
}

/// |S∩G| / |G|; empty G -> 1 if S empty too, else 0.
pub fn sensitivity(s: &Array2<u8>, g: &Array2<u8>) -> Result<f64> {
    check_shapes(s, g)?;
    let (inter, ns, ng) = counts(s, g);
    if ng == 0.0 {
        return Ok(if ns == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(inter / ng)
}

/// |S∩G| / |S|; empty S -> 1 if G empty too, else 0.
pub fn precision(s: &Array2<u8>, g: &Array2<u8>) -> Result<f64> {
    check_shapes(s, g)?;
    let (inter, ns, ng) = counts(s, g);
    if ns == 0.0 {
        return Ok(if ng == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(inter / ns)
}

/// Mean absolute per-pixel error between a soft map and a binary mask.
pub fn mae(s: &Array2<f64>, g: &Array2<u8>) -> Result<f64> {
    check_shapes(s, g)?;
    let n = s.len() as f64;
    let sum: f64 = s
        .iter()
        .zip(g.iter())
        .map(|(sv, gv)| ((*sv as f64) - (*gv != 0) as u8 as f64).abs())
        .sum();
    Ok(sum / n)
}

// ---- structure measure ----

fn mean_f64(vals: impl Iterator<Item = f64>, n: f64) -> f64 {
    vals.sum::<f64>() / n
}

/// Object score 2x / (x^2 + 1 + sigma_x); x and sigma over the masked region
/// (sample standard deviation, 0 for a single pixel).
fn object_score(pred_masked: &[f64]) -> f64 {
    if pred_masked.is_empty() {
        return 0.0;
    }
    let n = pred_masked.len() as f64;
    let x = pred_masked.iter().sum::<f64>() / n;
    let sigma = if pred_masked.len() > 1 {
        (pred_masked.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(s: &Array2<f64>, g: &Array2<u8>) -> f64 {
    let n = s.len() as f64;
    let fg: Vec<f64> = s
        .iter()
        .zip(g.iter())
        .filter(|(_, gv)| **gv != 0)
        .map(|(sv, _)| *sv as f64)
        .collect();
    let bg: Vec<f64> = s
        .iter()
        .zip(g.iter())
        .filter(|(_, gv)| **gv == 0)
        .map(|(sv, _)| 1.0 - *sv as f64)
        .collect();
    let u = g.iter().filter(|v| **v != 0).count() as f64 / n;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// GT centroid in 1-based coordinates, rounded half away from zero.
fn centroid_1based(g: &Array2<u8>) -> (usize, usize) {
    let (rows, cols) = g.dim();
    let total: f64 = g.iter().filter(|v| **v != 0).count() as f64;
    if total == 0.0 {
        return (
            ((cols as f64) / 2.0).round() as usize,
            ((rows as f64) / 2.0).round() as usize,
        );
    }
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for y in 0..rows {
        for x in 0..cols {
            if g[[y, x]] != 0 {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

/// SSIM-style regional similarity between a soft block and a binary block.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let x = mean_f64(pred.iter().copied(), n);
    let y = mean_f64(gt.iter().copied(), n);
    let denom = n - 1.0 + EPS;
    let sigma_x2 = pred.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / denom;
    let sigma_y2 = gt.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / denom;
    let sigma_xy = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - x) * (g - y))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x2 + sigma_y2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block_values(
    s: &Array2<f64>,
    g: &Array2<u8>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let mut pv = Vec::with_capacity(rows.len() * cols.len());
    let mut gv = Vec::with_capacity(rows.len() * cols.len());
    for y in rows {
        for x in cols.clone() {
            pv.push(s[[y, x]] as f64);
            gv.push((g[[y, x]] != 0) as u8 as f64);
        }
    }
    (pv, gv)
}

fn s_region(s: &Array2<f64>, g: &Array2<u8>) -> f64 {
    let (hei, wid) = g.dim();
    let (cx, cy) = centroid_1based(g);
    let area = (hei * wid) as f64;
    let blocks = [
        (0..cy, 0..cx),
        (0..cy, cx..wid),
        (cy..hei, 0..cx),
        (cy..hei, cx..wid),
    ];
    let mut score = 0.0;
    for (rows, cols) in blocks {
        let w = (rows.len() * cols.len()) as f64 / area;
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let (pv, gv) = block_values(s, g, rows, cols);
        score += w * region_ssim(&pv, &gv);
    }
    score
}

/// Structure measure (1-alpha)*S_object + alpha*S_region, with mean-based
/// fallbacks when the ground truth is all-background or all-foreground.
pub fn s_measure(s: &Array2<f64>, g: &Array2<u8>, alpha: f64) -> Result<f64> {
    check_shapes(s, g)?;
    let n = g.len() as f64;
    let gt_mean = g.iter().filter(|v| **v != 0).count() as f64 / n;
    let pred_mean = mean_f64(s.iter().map(|v| *v as f64), n);
    if gt_mean == 0.0 {
        return Ok(1.0 - pred_mean);
    }
    if gt_mean == 1.0 {
        return Ok(pred_mean);
    }
    let q = (1.0 - alpha) * s_object(s, g) + alpha * s_region(s, g);
    Ok(q.max(0.0))
}

// ---- enhanced-alignment measure ----

/// E score of one binary foreground map against a binary ground truth.
fn e_measure_binary(fm: &Array2<u8>, g: &Array2<u8>) -> f64 {
    let n = g.len() as f64;
    let gt_fg = g.iter().filter(|v| **v != 0).count() as f64;
    if gt_fg == 0.0 {
        // all-background GT: reward absent predictions
        let s: f64 = fm.iter().map(|v| 1.0 - (*v != 0) as u8 as f64).sum();
        return s / n;
    }
    if gt_fg == n {
        let s: f64 = fm.iter().map(|v| (*v != 0) as u8 as f64).sum();
        return s / n;
    }
    let mu_fm = fm.iter().filter(|v| **v != 0).count() as f64 / n;
    let mu_gt = gt_fg / n;
    let mut sum = 0.0f64;
    for (fv, gv) in fm.iter().zip(g.iter()) {
        let af = (*fv != 0) as u8 as f64 - mu_fm;
        let ag = (*gv != 0) as u8 as f64 - mu_gt;
        let align = 2.0 * ag * af / (ag * ag + af * af + EPS);
        let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
        sum += enhanced;
    }
    sum / n
}

/// Binarizes at threshold `t`: foreground iff s >= t and s > 0.
fn binarize_at(s: &Array2<f64>, t: f64) -> Array2<u8> {
    s.mapv(|v| (v >= t && v > 0.0) as u8)
}

/// E score at a single threshold in [0,1].
pub fn e_measure_at(s: &Array2<f64>, g: &Array2<u8>, t: f64) -> Result<f64> {
    check_shapes(s, g)?;
    Ok(e_measure_binary(&binarize_at(s, t), g))
}

/// Mean E over `levels` equally spaced thresholds k/(levels-1), k = 0..levels-1.
pub fn e_measure_mean(s: &Array2<f64>, g: &Array2<u8>, levels: usize) -> Result<f64> {
    check_shapes(s, g)?;
    let mut acc = 0.0f64;
    for k in 0..levels {
        let t = k as f64 / (levels - 1) as f64;
        acc += e_measure_binary(&binarize_at(s, t), g);
    }
    Ok(acc / levels as f64)
}

// ---- batched evaluation ----

/// Scores a list of prediction/GT pairs; see [`MetricReport`].
pub fn evaluate_pairs(
    preds: &[Array2<f64>],
    gts: &[Array2<u8>],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no prediction/GT pairs to evaluate".into()));
    }
    let mut per_slice = Vec::with_capacity(preds.len());
    for (s, g) in preds.iter().zip(gts.iter()) {
        let s_bin = s.mapv(|v| (v >= cfg.eval_threshold) as u8);
        per_slice.push(SliceMetrics {
            dice: dice(&s_bin, g)?,
            sens: sensitivity(&s_bin, g)?,
            prec: precision(&s_bin, g)?,
            mae: mae(s, g)?,
            e_phi_mean: e_measure_mean(s, g, cfg.e_thresholds)?,
            s_alpha: s_measure(s, g, cfg.alpha)?,
        });
    }
    let n = per_slice.len() as f64;
    Ok(MetricReport {
        dice: per_slice.iter().map(|m| m.dice).sum::<f64>() / n,
        sens: per_slice.iter().map(|m| m.sens).sum::<f64>() / n,
        prec: per_slice.iter().map(|m| m.prec).sum::<f64>() / n,
        mae: per_slice.iter().map(|m| m.mae).sum::<f64>() / n,
        e_phi_mean: per_slice.iter().map(|m| m.e_phi_mean).sum::<f64>() / n,
        s_alpha: per_slice.iter().map(|m| m.s_alpha).sum::<f64>() / n,
        per_slice,
    })
}
