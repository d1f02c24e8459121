//! Edge and semantic supervision heads.
//!
//! A stage head turns any encoder/decoder feature map into a full-resolution
//! single-channel probability map (bilinear upsample, 1x1 conv, sigmoid) and
//! scores it against the edge or mask ground truth with a weighted soft-Dice
//! sum. Decoder-side variants reuse the same machinery on X1..X5.

use crate::error::{Error, Result};
use crate::grad::{Params, Tape, ValueId};
use crate::nn::Conv2d;
use ndarray::{Array2, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
    Both,
}

/// Split of the five stages into edge-supervised (1..l) and
/// semantics-supervised (l+1..5) groups, with per-stage weights.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SupervisionConfig {
    /// Number of low-level stages under edge supervision (0..=5).
    pub l: usize,
    pub side: Side,
    /// Edge weights, one per stage 1..l.
    pub zeta: Vec<f64>,
    /// Semantic weights, one per stage l+1..5.
    pub omega: Vec<f64>,
}

impl SupervisionConfig {
    /// All-ones weights for a given split level.
    pub fn with_level(l: usize) -> Self {
        Self {
            l,
            side: Side::Encoder,
            zeta: vec![1.0; l],
            omega: vec![1.0; 5 - l],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l > 5 {
            return Err(Error::Config(format!("l must be in [0,5], got {}", self.l)));
        }
        if self.zeta.len() != self.l {
            return Err(Error::Config(format!(
                "zeta length {} != l {}",
                self.zeta.len(),
                self.l
            )));
        }
        if self.omega.len() != 5 - self.l {
            return Err(Error::Config(format!(
                "omega length {} != 5-l {}",
                self.omega.len(),
                5 - self.l
            )));
        }
        if self.zeta.iter().chain(self.omega.iter()).any(|w| *w < 0.0) {
            return Err(Error::Config("stage weights must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self::with_level(2)
    }
}

/// Full-resolution probability map produced from one stage.
pub struct StagePrediction {
    /// 1-based stage index.
    pub stage_index: usize,
    /// (B,1,H,W) probability node.
    pub prob: ValueId,
}

/// One 1x1 projection per stage; `project_stage` upsamples first, so the conv
/// input width is the stage's channel count.
pub struct StageHead {
    pub conv: Conv2d,
}

impl StageHead {
    pub fn new<R: Rng>(params: &mut Params, name: &str, in_c: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(params, name, in_c, 1, 1, 1, 0, rng) }
    }
}

/// Upsample -> 1x1 conv -> sigmoid. Errors if `out_hw` is smaller than the
/// feature map (this head only upsamples).
pub fn project_stage(
    tape: &mut Tape,
    params: &Params,
    head: &StageHead,
    feat: ValueId,
    stage_index: usize,
    out_hw: (usize, usize),
) -> Result<StagePrediction> {
    let shape = tape.value(feat).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape("stage feature must be NCHW".into()));
    }
    if out_hw.0 < shape[2] || out_hw.1 < shape[3] {
        return Err(Error::Shape(format!(
            "projection target {}x{} smaller than feature {}x{}",
            out_hw.0, out_hw.1, shape[2], shape[3]
        )));
    }
    let up = tape.upsample_bilinear(feat, out_hw);
    let logit = head.conv.forward(tape, params, up);
    let prob = tape.sigmoid(logit);
    Ok(StagePrediction { stage_index, prob })
}

/// Inner morphological boundary: pixels that are foreground and have at least
/// one background pixel in their 8-neighborhood (replicate border).
pub fn edge_targets_from_mask(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut edge = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            let mut has_zero = false;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if mask[[ny, nx]] == 0 {
                        has_zero = true;
                        break 'scan;
                    }
                }
            }
            if has_zero {
                edge[[y, x]] = 1;
            }
        }
    }
    edge
}

/// eps-smoothed soft Dice coefficient node: (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps).
fn soft_dice_coeff(tape: &mut Tape, prob: ValueId, gt: &ArrayD<f64>, eps: f64) -> ValueId {
    let sum_g: f64 = gt.iter().map(|v| *v as f64).sum();
    let g = tape.constant(gt.clone());
    let pg = tape.mul(prob, g);
    let inter = tape.sum_all(pg);
    let numer = tape.affine(inter, 2.0, eps);
    let sum_p = tape.sum_all(prob);
    let denom = tape.affine(sum_p, 1.0, (sum_g + eps as f64) as f64);
    tape.div_scalar(numer, denom)
}

pub struct HeadOutput {
    pub loss: ValueId,
    pub predictions: Vec<StagePrediction>,
}

/// Weighted multi-stage Dice supervision shared by the edge and semantic
/// heads: with per-stage coefficients w_i and smoothed Dice D_i the loss is
/// `1 - sum_i w_i * D_i` (literal form; can be negative for several perfect
/// stages), or the weighted mean of (1 - D_i) when `normalized` is set.
#[allow(clippy::too_many_arguments)]
fn supervised_head(
    tape: &mut Tape,
    params: &Params,
    heads: &[&StageHead],
    feats: &[ValueId],
    stage_indices: &[usize],
    target: &ArrayD<f64>,
    weights: &[f64],
    eps: f64,
    normalized: bool,
    out_hw: (usize, usize),
) -> Result<HeadOutput> {
    if feats.is_empty() {
        let loss = tape.zero_scalar();
        return Ok(HeadOutput { loss, predictions: Vec::new() });
    }
    if heads.len() != feats.len() || weights.len() != feats.len() {
        return Err(Error::Config(format!(
            "head/feature/weight count mismatch: {} heads, {} feats, {} weights",
            heads.len(),
            feats.len(),
            weights.len()
        )));
    }
    let weight_sum: f64 = weights.iter().sum();
    let mut predictions = Vec::with_capacity(feats.len());
    let mut acc = tape.zero_scalar();
    for ((head, feat), (w, stage)) in heads
        .iter()
        .zip(feats.iter())
        .zip(weights.iter().zip(stage_indices.iter()))
    {
        let pred = project_stage(tape, params, head, *feat, *stage, out_hw)?;
        if tape.value(pred.prob).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction shape {:?} != target shape {:?}",
                tape.value(pred.prob).shape(),
                target.shape()
            )));
        }
        let d = soft_dice_coeff(tape, pred.prob, target, eps);
        let scale = if normalized {
            if weight_sum > 0.0 {
                w / weight_sum
            } else {
                0.0
            }
        } else {
            *w
        };
        let term = tape.affine(d, scale, 0.0);
        acc = tape.add(acc, term);
        predictions.push(pred);
    }
    // literal: 1 - sum(w*D); normalized: sum(w*(1-D))/sum(w) = 1 - sum(w*D)/sum(w)
    let loss = tape.affine(acc, -1.0, 1.0);
    Ok(HeadOutput { loss, predictions })
}

/// Edge supervision over stages 1..l against the edge ground truth.
#[allow(clippy::too_many_arguments)]
pub fn edge_head(
    tape: &mut Tape,
    params: &Params,
    heads: &[&StageHead],
    feats: &[ValueId],
    stage_indices: &[usize],
    g_edge: &ArrayD<f64>,
    zeta: &[f64],
    eps: f64,
    normalized: bool,
    out_hw: (usize, usize),
) -> Result<HeadOutput> {
    supervised_head(tape, params, heads, feats, stage_indices, g_edge, zeta, eps, normalized, out_hw)
}

/// Semantic supervision over stages l+1..5 against the mask ground truth.
#[allow(clippy::too_many_arguments)]
pub fn semantic_head(
    tape: &mut Tape,
    params: &Params,
    heads: &[&StageHead],
    feats: &[ValueId],
    stage_indices: &[usize],
    g_mask: &ArrayD<f64>,
    omega: &[f64],
    eps: f64,
    normalized: bool,
    out_hw: (usize, usize),
) -> Result<HeadOutput> {
    supervised_head(tape, params, heads, feats, stage_indices, g_mask, omega, eps, normalized, out_hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::GradCheck;
    use crate::grad::{Params, Tape};
    use ndarray::{Array2, Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_to_dyn(mask: &Array2<u8>) -> ArrayD<f64> {
        let (h, w) = mask.dim();
        ArrayD::from_shape_vec(
            IxDyn(&[1, 1, h, w]),
            mask.iter().map(|v| *v as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn project_stage_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let head = StageHead::new(&mut params, "h", 8, &mut rng);
        let mut tape = Tape::new();
        let mut data_rng = ChaCha8Rng::seed_from_u64(1);
        let feat = tape.constant(
            Array4::from_shape_fn((1, 8, 16, 16), |_| data_rng.gen::<f64>() - 0.5).into_dyn(),
        );
        let pred = project_stage(&mut tape, &params, &head, feat, 3, (64, 64)).unwrap();
        let v = tape.value(pred.prob);
        assert_eq!(v.shape(), &[1, 1, 64, 64]);
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn project_stage_rejects_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let head = StageHead::new(&mut params, "h", 4, &mut rng);
        let mut tape = Tape::new();
        let feat = tape.constant(Array4::<f64>::zeros((1, 4, 16, 16)).into_dyn());
        assert!(project_stage(&mut tape, &params, &head, feat, 1, (8, 8)).is_err());
    }

    #[test]
    fn zero_head_outputs_half_saturated_bias_outputs_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let head = StageHead::new(&mut params, "h", 4, &mut rng);
        // zero the 1x1 conv
        params.set_value(head.conv.w, ArrayD::zeros(IxDyn(&[1, 4, 1, 1])));
        params.set_value(head.conv.b, ArrayD::zeros(IxDyn(&[1])));
        let mut tape = Tape::new();
        let feat = tape.constant(Array4::<f64>::ones((1, 4, 8, 8)).into_dyn());
        let pred = project_stage(&mut tape, &params, &head, feat, 1, (8, 8)).unwrap();
        assert!(tape.value(pred.prob).iter().all(|p| (*p - 0.5).abs() < 1e-7));

        // bias +20 saturates the sigmoid
        params.set_value(head.conv.b, ArrayD::from_elem(IxDyn(&[1]), 20.0));
        let mut tape = Tape::new();
        let feat = tape.constant(Array4::<f64>::ones((1, 4, 8, 8)).into_dyn());
        let pred = project_stage(&mut tape, &params, &head, feat, 1, (8, 8)).unwrap();
        assert!(tape.value(pred.prob).iter().all(|p| *p >= 1.0 - 1e-8));
    }

    #[test]
    fn edge_targets_all_zero_and_isolated_pixel() {
        let zeros = Array2::<u8>::zeros((8, 8));
        assert_eq!(edge_targets_from_mask(&zeros), zeros);

        let mut single = Array2::<u8>::zeros((8, 8));
        single[[3, 3]] = 1;
        assert_eq!(edge_targets_from_mask(&single), single);
    }

    #[test]
    fn edge_targets_filled_square_perimeter() {
        // 4x4 square in an 8x8 grid: edge = the 12 perimeter pixels.
        let mut mask = Array2::<u8>::zeros((8, 8));
        for y in 2..6 {
            for x in 2..6 {
                mask[[y, x]] = 1;
            }
        }
        let edge = edge_targets_from_mask(&mask);
        // brute-force oracle: foreground pixel whose 8-neighborhood (replicate
        // border) contains a zero
        let mut expected = Array2::<u8>::zeros((8, 8));
        for y in 0..8usize {
            for x in 0..8usize {
                if mask[[y, x] ] == 0 {
                    continue;
                }
                let mut boundary = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = (y as i64 + dy).clamp(0, 7) as usize;
                        let nx = (x as i64 + dx).clamp(0, 7) as usize;
                        if mask[[ny, nx]] == 0 {
                            boundary = true;
                        }
                    }
                }
                if boundary {
                    expected[[y, x]] = 1;
                }
            }
        }
        assert_eq!(edge, expected);
        assert_eq!(edge.iter().map(|v| *v as usize).sum::<usize>(), 12);
    }

    #[test]
    fn full_foreground_mask_has_no_inner_boundary() {
        let mask = Array2::<u8>::ones((6, 6));
        let edge = edge_targets_from_mask(&mask);
        assert!(edge.iter().all(|v| *v == 0));
    }

    #[test]
    fn perfect_single_stage_edge_loss_is_zero() {
        // With p == g exactly, D = (2S+eps)/(2S+eps) = 1 -> loss = 0 for any eps.
        let mut tape = Tape::new();
        let mut g = Array2::<u8>::zeros((4, 4));
        g[[1, 1]] = 1;
        g[[1, 2]] = 1;
        let gd = mask_to_dyn(&g);
        let p = tape.constant(gd.clone());
        let d = soft_dice_coeff(&mut tape, p, &gd, 1e-6);
        assert!((tape.scalar(d) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn two_perfect_stages_give_minus_one() {
        // Literal multi-stage formula: 1 - (1 + 1) = -1.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let h1 = StageHead::new(&mut params, "h1", 1, &mut rng);
        let h2 = StageHead::new(&mut params, "h2", 1, &mut rng);
        // 1x1 conv with huge positive weight turns a {0,1} map into a
        // saturated {sigmoid(b), sigmoid(w+b)} = {~0, ~1} map.
        for h in [&h1, &h2] {
            params.set_value(h.conv.w, ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 80.0));
            params.set_value(h.conv.b, ArrayD::from_elem(IxDyn(&[1]), -40.0));
        }
        let mut g = Array2::<u8>::zeros((4, 4));
        g[[0, 0]] = 1;
        g[[2, 3]] = 1;
        let gd = mask_to_dyn(&g);
        let mut tape = Tape::new();
        let feat = tape.constant(gd.clone());
        let out = edge_head(
            &mut tape,
            &params,
            &[&h1, &h2],
            &[feat, feat],
            &[1, 2],
            &gd,
            &[1.0, 1.0],
            0.0,
            false,
            (4, 4),
        )
        .unwrap();
        assert!((tape.scalar(out.loss) + 1.0).abs() < 1e-5, "{}", tape.scalar(out.loss));
        assert_eq!(out.predictions.len(), 2);
        // normalized variant: mean per-stage dice loss = 0
        let mut tape = Tape::new();
        let feat = tape.constant(gd.clone());
        let out = edge_head(
            &mut tape,
            &params,
            &[&h1, &h2],
            &[feat, feat],
            &[1, 2],
            &gd,
            &[1.0, 1.0],
            0.0,
            true,
            (4, 4),
        )
        .unwrap();
        assert!(tape.scalar(out.loss).abs() < 1e-5);
    }

    #[test]
    fn empty_stage_list_is_disabled_module() {
        let params = Params::new();
        let mut tape = Tape::new();
        let g = mask_to_dyn(&Array2::<u8>::zeros((4, 4)));
        let out = edge_head(&mut tape, &params, &[], &[], &[], &g, &[], 1e-6, false, (4, 4)).unwrap();
        assert_eq!(tape.scalar(out.loss), 0.0);
        assert!(out.predictions.is_empty());
    }

    #[test]
    fn half_probability_prediction_matches_hand_ratio() {
        // p == 0.5 on a 4x4 map, G has 8 foreground pixels:
        // D = (2*0.5*8 + eps)/(8 + 8 + eps) = (8+eps)/(16+eps); loss = 1 - D.
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = StageHead::new(&mut params, "h", 1, &mut rng);
        params.set_value(head.conv.w, ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        params.set_value(head.conv.b, ArrayD::zeros(IxDyn(&[1])));
        let mut g = Array2::<u8>::zeros((4, 4));
        for x in 0..4 {
            g[[0, x]] = 1;
            g[[1, x]] = 1;
        }
        let gd = mask_to_dyn(&g);
        let eps = 1e-6f64;
        let expected = 1.0 - (8.0 + eps) / (16.0 + eps);
        let mut tape = Tape::new();
        let feat = tape.constant(gd.clone());
        let out = edge_head(
            &mut tape,
            &params,
            &[&head],
            &[feat],
            &[1],
            &gd,
            &[1.0],
            eps as f64,
            false,
            (4, 4),
        )
        .unwrap();
        assert!((tape.scalar(out.loss) as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn semantic_three_perfect_stages_give_minus_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let heads: Vec<StageHead> = (0..3)
            .map(|i| StageHead::new(&mut params, &format!("h{i}"), 1, &mut rng))
            .collect();
        for h in &heads {
            params.set_value(h.conv.w, ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 80.0));
            params.set_value(h.conv.b, ArrayD::from_elem(IxDyn(&[1]), -40.0));
        }
        let mut g = Array2::<u8>::zeros((4, 4));
        g[[1, 1]] = 1;
        let gd = mask_to_dyn(&g);
        let mut tape = Tape::new();
        let feat = tape.constant(gd.clone());
        let head_refs: Vec<&StageHead> = heads.iter().collect();
        let out = semantic_head(
            &mut tape,
            &params,
            &head_refs,
            &[feat, feat, feat],
            &[3, 4, 5],
            &gd,
            &[1.0, 1.0, 1.0],
            0.0,
            false,
            (4, 4),
        )
        .unwrap();
        assert!((tape.scalar(out.loss) + 2.0).abs() < 1e-4, "{}", tape.scalar(out.loss));
    }

    #[test]
    fn zero_prediction_on_nonempty_mask_loses_fully() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = StageHead::new(&mut params, "h", 1, &mut rng);
        params.set_value(head.conv.w, ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        params.set_value(head.conv.b, ArrayD::from_elem(IxDyn(&[1]), -60.0)); // p ~= 0
        let mut g = Array2::<u8>::zeros((4, 4));
        g[[2, 2]] = 1;
        let gd = mask_to_dyn(&g);
        let mut tape = Tape::new();
        let feat = tape.constant(gd.clone());
        let out = semantic_head(
            &mut tape,
            &params,
            &[&head],
            &[feat],
            &[5],
            &gd,
            &[1.0],
            1e-6,
            false,
            (4, 4),
        )
        .unwrap();
        assert!((tape.scalar(out.loss) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zeta_scaling_is_linear() {
        // (1 - L) scales exactly with c when all zeta are scaled by c.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = Params::new();
        let h1 = StageHead::new(&mut params, "h1", 2, &mut rng);
        let h2 = StageHead::new(&mut params, "h2", 2, &mut rng);
        let mut g = Array2::<u8>::zeros((4, 4));
        g[[0, 1]] = 1;
        g[[3, 3]] = 1;
        let gd = mask_to_dyn(&g);
        let mut data_rng = ChaCha8Rng::seed_from_u64(8);
        let feat_arr = Array4::from_shape_fn((1, 2, 4, 4), |_| data_rng.gen::<f64>() - 0.5);
        let c = 3.0f64;
        let run = |params: &Params, zeta: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let feat = tape.constant(feat_arr.clone().into_dyn());
            let out = edge_head(
                &mut tape,
                params,
                &[&h1, &h2],
                &[feat, feat],
                &[1, 2],
                &gd,
                zeta,
                1e-6,
                false,
                (4, 4),
            )
            .unwrap();
            tape.scalar(out.loss) as f64
        };
        let l1 = run(&params, &[1.0, 0.5]);
        let lc = run(&params, &[c, 0.5 * c]);
        assert!(((1.0 - lc) - c as f64 * (1.0 - l1)).abs() < 1e-5);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = Params::new();
        let h1 = StageHead::new(&mut params, "h1", 2, &mut rng);
        let h2 = StageHead::new(&mut params, "h2", 2, &mut rng);
        let mut data_rng = ChaCha8Rng::seed_from_u64(18);
        let feat_init = Array4::from_shape_fn((1, 2, 4, 4), |_| data_rng.gen::<f64>() - 0.5);
        let feat = params.insert("feat", feat_init.into_dyn(), true);
        let mut g = Array2::<u8>::zeros((8, 8));
        for x in 2..6 {
            g[[3, x]] = 1;
        }
        let gd = mask_to_dyn(&g);
        let targets = vec![feat, h1.conv.w, h1.conv.b, h2.conv.w, h2.conv.b];
        let report = GradCheck::default().run(&mut params, &targets, |tape, params| {
            let f = tape.param(params, feat);
            let out = edge_head(
                tape,
                params,
                &[&h1, &h2],
                &[f, f],
                &[1, 2],
                &gd,
                &[1.0, 0.7],
                1e-6,
                false,
                (8, 8),
            )
            .unwrap();
            out.loss
        });
        assert!(report.passed(), "{:?}", report.failures.first());
    }
}
