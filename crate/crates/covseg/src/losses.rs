//! Dice-family losses and the weighted joint objective.

use crate::error::{Error, Result};
use crate::grad::{Tape, ValueId};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the edge loss in the joint objective.
    pub theta: f64,
    /// Weight of the semantic loss in the joint objective.
    pub beta: f64,
    /// Soft-Dice smoothing term.
    pub epsilon: f64,
    /// Use the weighted mean of per-stage Dice losses instead of the literal
    /// multi-stage sum (which goes negative for several perfect stages).
    pub normalized_multistage: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { theta: 0.8, beta: 0.4, epsilon: 1e-6, normalized_multistage: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta < 0.0 || self.beta < 0.0 || self.epsilon < 0.0 {
            return Err(Error::Config("theta, beta and epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scalar components of one step's objective. `total` is the exact weighted
/// sum of the components at f64 accumulation.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub edge: f64,
    pub semantic: f64,
    pub fusion: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.edge.is_finite() && self.semantic.is_finite() && self.fusion.is_finite() && self.total.is_finite()
    }
}

/// Soft Dice loss `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
///
/// `gt` enters as a constant; gradients flow through `pred` only.
pub fn dice_loss(tape: &mut Tape, pred: ValueId, gt: &ArrayD<f64>, epsilon: f64) -> Result<ValueId> {
    if tape.value(pred).shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "dice_loss: prediction {:?} vs ground truth {:?}",
            tape.value(pred).shape(),
            gt.shape()
        )));
    }
    let sum_g: f64 = gt.iter().map(|v| *v as f64).sum();
    let g = tape.constant(gt.clone());
    let pg = tape.mul(pred, g);
    let inter = tape.sum_all(pg);
    let numer = tape.affine(inter, 2.0, epsilon);
    let sum_p = tape.sum_all(pred);
    let denom = tape.affine(sum_p, 1.0, (sum_g + epsilon as f64) as f64);
    let ratio = tape.div_scalar(numer, denom);
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// Joint objective `total = theta*edge + beta*semantic + fusion`.
///
/// Disabled components enter as `None` and contribute 0. Returns the total as
/// a tape node for backward plus the [`LossBreakdown`] record.
pub fn total_loss(
    tape: &mut Tape,
    edge: Option<ValueId>,
    semantic: Option<ValueId>,
    fusion: ValueId,
    cfg: &LossConfig,
) -> (ValueId, LossBreakdown) {
    let edge_val = edge.map(|e| tape.scalar(e) as f64).unwrap_or(0.0);
    let semantic_val = semantic.map(|s| tape.scalar(s) as f64).unwrap_or(0.0);
    let fusion_val = tape.scalar(fusion) as f64;

    let mut acc = match edge {
        Some(e) => tape.affine(e, cfg.theta, 0.0),
        None => tape.zero_scalar(),
    };
    if let Some(s) = semantic {
        let term = tape.affine(s, cfg.beta, 0.0);
        acc = tape.add(acc, term);
    }
    let total = tape.add(acc, fusion);

    let breakdown = LossBreakdown {
        edge: edge_val,
        semantic: semantic_val,
        fusion: fusion_val,
        total: cfg.theta as f64 * edge_val + cfg.beta as f64 * semantic_val + fusion_val,
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::GradCheck;
    use crate::grad::{Params, Tape};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map4(h: usize, w: usize, vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[1, 1, h, w]), vals.to_vec()).unwrap()
    }

    #[test]
    fn perfect_binary_prediction_scores_zero() {
        let g = map4(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let mut tape = Tape::new();
        let p = tape.constant(g.clone());
        let l = dice_loss(&mut tape, p, &g, 0.0).unwrap();
        assert!(tape.scalar(l).abs() < 1e-7);
    }

    #[test]
    fn zero_prediction_on_nonempty_gt_scores_about_one() {
        let g = map4(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let p = tape.constant(map4(2, 2, &[0.0; 4]));
        let l = dice_loss(&mut tape, p, &g, 1e-6).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_probability_hand_value() {
        // p = 0.5 everywhere on 2x2, g = one pixel:
        // 1 - (2*0.5 + eps)/(2 + 1 + eps) ~= 0.6667
        let g = map4(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let p = tape.constant(map4(2, 2, &[0.5; 4]));
        let l = dice_loss(&mut tape, p, &g, 1e-6).unwrap();
        let expected = 1.0 - (2.0 * 0.5 + 1e-6) / (2.0 + 1.0 + 1e-6);
        assert!((tape.scalar(l) as f64 - expected).abs() < 1e-6);
        assert!((tape.scalar(l) as f64 - 2.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn empty_gt_empty_prediction_is_near_zero_loss() {
        let g = map4(2, 2, &[0.0; 4]);
        let mut tape = Tape::new();
        let p = tape.constant(map4(2, 2, &[0.0; 4]));
        let l = dice_loss(&mut tape, p, &g, 1e-6).unwrap();
        // eps/eps = 1 -> loss 0: "nothing to find, nothing predicted"
        assert!(tape.scalar(l).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = map4(2, 2, &[0.0; 4]);
        let mut tape = Tape::new();
        let p = tape.constant(map4(2, 3, &[0.0; 6]));
        assert!(dice_loss(&mut tape, p, &g, 1e-6).is_err());
    }

    #[test]
    fn dice_loss_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p_vals: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
            let g_vals: Vec<f64> = (0..16).map(|_| (rng.gen::<bool>() as u8) as f64).collect();
            let mut tape = Tape::new();
            let p = tape.constant(map4(4, 4, &p_vals));
            let l = dice_loss(&mut tape, p, &map4(4, 4, &g_vals), 1e-6).unwrap();
            let v = tape.scalar(l);
            assert!((0.0..=1.0).contains(&v), "loss {v} out of range");
        }
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Params::new();
        let p_init: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 0.8 + 0.1).collect();
        let p = params.insert("p", map4(4, 4, &p_init), true);
        let g_vals: Vec<f64> = (0..16).map(|_| (rng.gen::<bool>() as u8) as f64).collect();
        let g = map4(4, 4, &g_vals);
        let report = GradCheck::default().run(&mut params, &[p], |tape, params| {
            let pv = tape.param(params, p);
            dice_loss(tape, pv, &g, 1e-6).unwrap()
        });
        assert!(report.passed(), "{:?}", report.failures.first());
        assert!(report.max_rel_err <= 1e-3, "max rel {}", report.max_rel_err);
    }

    #[test]
    fn total_loss_trivial_values() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let zero = tape.zero_scalar();
        let half = tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.5));
        let (_, b) = total_loss(&mut tape, Some(zero), Some(zero), half, &cfg);
        assert!((b.total - 0.5).abs() < 1e-12);

        let mut tape = Tape::new();
        let one = tape.constant(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let (_, b) = total_loss(&mut tape, Some(one), Some(one), one, &cfg);
        assert!((b.total - 2.2).abs() < 1e-7, "{}", b.total);
    }

    #[test]
    fn total_loss_matches_recomputation_on_random_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cfg = LossConfig {
                theta: rng.gen::<f64>(),
                beta: rng.gen::<f64>(),
                ..Default::default()
            };
            let (e, s, f) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let mut tape = Tape::new();
            let ev = tape.constant(ArrayD::from_elem(IxDyn(&[]), e));
            let sv = tape.constant(ArrayD::from_elem(IxDyn(&[]), s));
            let fv = tape.constant(ArrayD::from_elem(IxDyn(&[]), f));
            let (_, b) = total_loss(&mut tape, Some(ev), Some(sv), fv, &cfg);
            let recomputed = cfg.theta as f64 * e as f64 + cfg.beta as f64 * s as f64 + f as f64;
            assert_eq!(b.total, recomputed);
            // linearity: doubling the edge component doubles its contribution
            let mut tape = Tape::new();
            let e2 = tape.constant(ArrayD::from_elem(IxDyn(&[]), 2.0 * e));
            let sv = tape.constant(ArrayD::from_elem(IxDyn(&[]), s));
            let fv = tape.constant(ArrayD::from_elem(IxDyn(&[]), f));
            let (_, b2) = total_loss(&mut tape, Some(e2), Some(sv), fv, &cfg);
            let delta = b2.total - b.total;
            assert!((delta - cfg.theta as f64 * e as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn disabled_components_contribute_zero() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let f = tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.25));
        let (total, b) = total_loss(&mut tape, None, None, f, &cfg);
        assert_eq!(b.edge, 0.0);
        assert_eq!(b.semantic, 0.0);
        assert!((tape.scalar(total) - 0.25).abs() < 1e-7);
        assert_eq!(b.total, 0.25);
    }
}
