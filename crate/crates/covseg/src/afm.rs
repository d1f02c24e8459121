//! Attention Fusion Module.
//!
//! Each decoder level goes through an attention block: 1x1 conv to 64
//! channels, bilinear upsample to the input size, 3x3 conv to a one-channel
//! logit map Z_i, confidence P_i = sigmoid(Z_i) and gated output
//! Y_i = P_i * Z_i. The attention fusion assembles
//! `F = Z_1 + Y_1 + (1 - P_1) * sum_{i=2..5} Y_i` and squashes it with a
//! sigmoid. Add/concatenate fusers serve as baselines.

use crate::error::{Error, Result};
use crate::grad::{Params, Tape, ValueId};
use crate::nn::Conv2d;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const FUSION_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Attention,
    Add,
    Concatenate,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Attention => write!(f, "Attention"),
            FusionMode::Add => write!(f, "Add"),
            FusionMode::Concatenate => write!(f, "Concatenate"),
        }
    }
}

/// Outputs of one attention block.
pub struct AttentionBlockOut {
    /// X_i^u: 64-channel full-resolution upsampled map.
    pub up: ValueId,
    /// P_i, in (0,1).
    pub conf: ValueId,
    /// Y_i = P_i * Z_i (single channel).
    pub gated: ValueId,
    /// Z_i, the 1-channel logit map.
    pub logit: ValueId,
}

pub struct AttentionBlock {
    pub proj: Conv2d,
    pub head: Conv2d,
}

impl AttentionBlock {
    fn new<R: Rng>(params: &mut Params, name: &str, in_c: usize, rng: &mut R) -> Self {
        Self {
            proj: Conv2d::new(params, &format!("{name}.proj"), in_c, FUSION_CHANNELS, 1, 1, 0, rng),
            head: Conv2d::new(params, &format!("{name}.head"), FUSION_CHANNELS, 1, 3, 1, 1, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: ValueId,
        out_hw: (usize, usize),
    ) -> Result<AttentionBlockOut> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape("attention block input must be NCHW".into()));
        }
        if out_hw.0 < shape[2] || out_hw.1 < shape[3] {
            return Err(Error::Shape(format!(
                "fusion target {}x{} smaller than feature {}x{}",
                out_hw.0, out_hw.1, shape[2], shape[3]
            )));
        }
        let projected = self.proj.forward(tape, params, x);
        let up = tape.upsample_bilinear(projected, out_hw);
        let logit = self.head.forward(tape, params, up);
        let conf = tape.sigmoid(logit);
        let gated = tape.mul(conf, logit);
        Ok(AttentionBlockOut { up, conf, gated, logit })
    }
}

/// Per-level diagnostics exposed for inspection dumps and the gate-identity
/// checks.
pub struct FusionDiagnostics {
    /// P_1..P_5 (attention mode only).
    pub conf: Vec<ValueId>,
    /// Z_1..Z_5 (attention mode only).
    pub logits: Vec<ValueId>,
    /// Y_1.
    pub y1: Option<ValueId>,
    /// 1 - P_1.
    pub one_minus_p1: Option<ValueId>,
    /// Fused pre-sigmoid map.
    pub fused_logit: ValueId,
}

pub struct FusionOutput {
    /// S_p, single channel in (0,1), at the requested output size.
    pub prob: ValueId,
    pub diagnostics: FusionDiagnostics,
}

pub struct Afm {
    pub blocks: Vec<AttentionBlock>,
    add_proj: Vec<Conv2d>,
    add_head: Conv2d,
    cat_proj: Vec<Conv2d>,
    cat_head: Conv2d,
}

impl Afm {
    /// `level_channels` are the decoder channel widths C_1..C_5.
    pub fn new<R: Rng>(params: &mut Params, level_channels: &[usize; 5], rng: &mut R) -> Self {
        let blocks = level_channels
            .iter()
            .enumerate()
            .map(|(i, c)| AttentionBlock::new(params, &format!("afm.ab{}", i + 1), *c, rng))
            .collect();
        let add_proj = level_channels
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Conv2d::new(params, &format!("afm.add.proj{}", i + 1), *c, FUSION_CHANNELS, 1, 1, 0, rng)
            })
            .collect();
        let add_head = Conv2d::new(params, "afm.add.head", FUSION_CHANNELS, 1, 3, 1, 1, rng);
        let cat_proj = level_channels
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Conv2d::new(params, &format!("afm.cat.proj{}", i + 1), *c, FUSION_CHANNELS, 1, 1, 0, rng)
            })
            .collect();
        let cat_head = Conv2d::new(
            params,
            "afm.cat.head",
            FUSION_CHANNELS * 5,
            1,
            3,
            1,
            1,
            rng,
        );
        Self { blocks, add_proj, add_head, cat_proj, cat_head }
    }

    pub fn attention_block(
        &self,
        tape: &mut Tape,
        params: &Params,
        level: usize,
        x: ValueId,
        out_hw: (usize, usize),
    ) -> Result<AttentionBlockOut> {
        self.blocks[level].forward(tape, params, x, out_hw)
    }

    /// Fuses the five decoder maps (X1 first) into the final prediction.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        params: &Params,
        decoder_maps: &[ValueId],
        mode: FusionMode,
        out_hw: (usize, usize),
    ) -> Result<FusionOutput> {
        if decoder_maps.len() != 5 {
            return Err(Error::Shape(format!(
                "fuse expects 5 decoder maps, got {}",
                decoder_maps.len()
            )));
        }
        match mode {
            FusionMode::Attention => {
                let mut conf = Vec::with_capacity(5);
                let mut logits = Vec::with_capacity(5);
                let mut y1 = None;
                for (level, x) in decoder_maps.iter().enumerate() {
                    let out = self.blocks[level].forward(tape, params, *x, out_hw)?;
                    if level == 0 {
                        y1 = Some(out.gated);
                    }
                    conf.push(out.conf);
                    logits.push(out.logit);
                }
                let fused_logit = tape.attention_fuse(
                    [logits[0], logits[1], logits[2], logits[3], logits[4]],
                    [conf[0], conf[1], conf[2], conf[3], conf[4]],
                );
                let prob = tape.sigmoid(fused_logit);
                let one_minus_p1 = tape.affine(conf[0], -1.0, 1.0);
                Ok(FusionOutput {
                    prob,
                    diagnostics: FusionDiagnostics {
                        conf,
                        logits,
                        y1,
                        one_minus_p1: Some(one_minus_p1),
                        fused_logit,
                    },
                })
            }
            FusionMode::Add => {
                let mut acc: Option<ValueId> = None;
                for (level, x) in decoder_maps.iter().enumerate() {
                    let p = self.add_proj[level].forward(tape, params, *x);
                    let up = tape.upsample_bilinear(p, out_hw);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, up),
                        None => up,
                    });
                }
                let fused_logit = self.add_head.forward(tape, params, acc.unwrap());
                let prob = tape.sigmoid(fused_logit);
                Ok(FusionOutput {
                    prob,
                    diagnostics: FusionDiagnostics {
                        conf: Vec::new(),
                        logits: Vec::new(),
                        y1: None,
                        one_minus_p1: None,
                        fused_logit,
                    },
                })
            }
            FusionMode::Concatenate => {
                let mut ups = Vec::with_capacity(5);
                for (level, x) in decoder_maps.iter().enumerate() {
                    let p = self.cat_proj[level].forward(tape, params, *x);
                    ups.push(tape.upsample_bilinear(p, out_hw));
                }
                let cat = tape.concat_channels(&ups);
                let fused_logit = self.cat_head.forward(tape, params, cat);
                let prob = tape.sigmoid(fused_logit);
                Ok(FusionOutput {
                    prob,
                    diagnostics: FusionDiagnostics {
                        conf: Vec::new(),
                        logits: Vec::new(),
                        y1: None,
                        one_minus_p1: None,
                        fused_logit,
                    },
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::GradCheck;
    use crate::grad::{Params, Tape};
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn afm_with_channels(seed: u64, chans: [usize; 5]) -> (Params, Afm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let afm = Afm::new(&mut params, &chans, &mut rng);
        (params, afm)
    }

    fn random_maps(tape: &mut Tape, chans: [usize; 5], hw: [usize; 5], seed: u64) -> Vec<ValueId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        chans
            .iter()
            .zip(hw.iter())
            .map(|(c, s)| {
                tape.constant(
                    Array4::from_shape_fn((1, *c, *s, *s), |_| rng.gen::<f64>() - 0.5).into_dyn(),
                )
            })
            .collect()
    }

    #[test]
    fn attention_block_shapes_and_range() {
        let (params, afm) = afm_with_channels(0, [4, 8, 16, 32, 64]);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(
            Array4::from_shape_fn((1, 16, 16, 16), |_| rng.gen::<f64>() - 0.5).into_dyn(),
        );
        let out = afm.attention_block(&mut tape, &params, 2, x, (64, 64)).unwrap();
        assert_eq!(tape.value(out.up).shape(), &[1, FUSION_CHANNELS, 64, 64]);
        assert_eq!(tape.value(out.conf).shape(), &[1, 1, 64, 64]);
        assert_eq!(tape.value(out.gated).shape(), &[1, 1, 64, 64]);
        assert!(tape.value(out.conf).iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn attention_block_rejects_downsampling() {
        let (params, afm) = afm_with_channels(0, [4, 8, 16, 32, 64]);
        let mut tape = Tape::new();
        let x = tape.constant(Array4::<f64>::zeros((1, 4, 16, 16)).into_dyn());
        assert!(afm.attention_block(&mut tape, &params, 0, x, (8, 8)).is_err());
    }

    #[test]
    fn zero_head_gives_half_confidence_and_zero_gate() {
        let (mut params, afm) = afm_with_channels(0, [4, 8, 16, 32, 64]);
        params.set_value(afm.blocks[0].head.w, ArrayD::zeros(IxDyn(&[1, FUSION_CHANNELS, 3, 3])));
        params.set_value(afm.blocks[0].head.b, ArrayD::zeros(IxDyn(&[1])));
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.constant(Array4::from_shape_fn((1, 4, 8, 8), |_| rng.gen::<f64>()).into_dyn());
        let out = afm.attention_block(&mut tape, &params, 0, x, (16, 16)).unwrap();
        assert!(tape.value(out.conf).iter().all(|p| (*p - 0.5).abs() < 1e-7));
        assert!(tape.value(out.gated).iter().all(|y| y.abs() < 1e-7));
    }

    #[test]
    fn saturated_bias_makes_gate_transparent() {
        // logit bias +20 -> P ~= 1 -> Y ~= Z within 1e-8 relative.
        let (mut params, afm) = afm_with_channels(0, [4, 8, 16, 32, 64]);
        let mut b = ArrayD::zeros(IxDyn(&[1]));
        b[[0]] = 20.0;
        params.set_value(afm.blocks[0].head.b, b);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = tape.constant(Array4::from_shape_fn((1, 4, 8, 8), |_| rng.gen::<f64>() * 0.01).into_dyn());
        let out = afm.attention_block(&mut tape, &params, 0, x, (8, 8)).unwrap();
        let z = tape.value(out.logit);
        let y = tape.value(out.gated);
        let max_rel = z
            .iter()
            .zip(y.iter())
            .map(|(zv, yv)| ((zv - yv) / zv).abs())
            .fold(0.0f64, f64::max);
        assert!(max_rel < 1e-8, "max rel {max_rel}");
    }

    #[test]
    fn wrong_map_count_is_rejected() {
        let (params, afm) = afm_with_channels(0, [4, 8, 16, 32, 64]);
        let mut tape = Tape::new();
        let x = tape.constant(Array4::<f64>::zeros((1, 4, 8, 8)).into_dyn());
        let err = afm.fuse(&mut tape, &params, &[x, x, x], FusionMode::Attention, (8, 8));
        assert!(err.is_err());
    }

    #[test]
    fn gate_identity_holds() {
        let chans = [4usize, 8, 16, 32, 64];
        let (params, afm) = afm_with_channels(3, chans);
        let mut tape = Tape::new();
        let maps = random_maps(&mut tape, chans, [16, 8, 4, 2, 2], 11);
        let out = afm
            .fuse(&mut tape, &params, &maps, FusionMode::Attention, (16, 16))
            .unwrap();
        let d = &out.diagnostics;
        let f = tape.value(d.fused_logit).clone();
        let p: Vec<_> = d.conf.iter().map(|id| tape.value(*id).clone()).collect();
        let z: Vec<_> = d.logits.iter().map(|id| tape.value(*id).clone()).collect();
        let mut max_diff = 0.0f64;
        for idx in 0..f.len() {
            let z1 = z[0].as_slice().unwrap()[idx] as f64;
            let p1 = p[0].as_slice().unwrap()[idx] as f64;
            let mut aux = 0.0f64;
            for lvl in 1..5 {
                aux += p[lvl].as_slice().unwrap()[idx] as f64 * z[lvl].as_slice().unwrap()[idx] as f64;
            }
            let expect = z1 + p1 * z1 + (1.0 - p1) * aux;
            max_diff = max_diff.max((expect - f.as_slice().unwrap()[idx] as f64).abs());
        }
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn forcing_p1_to_one_removes_auxiliary_term() {
        let chans = [4usize, 8, 16, 32, 64];
        let (mut params, afm) = afm_with_channels(4, chans);
        let mut b = ArrayD::zeros(IxDyn(&[1]));
        b[[0]] = 20.0;
        params.set_value(afm.blocks[0].head.b, b);
        let mut tape = Tape::new();
        let maps = random_maps(&mut tape, chans, [16, 8, 4, 2, 2], 12);
        let out = afm
            .fuse(&mut tape, &params, &maps, FusionMode::Attention, (16, 16))
            .unwrap();
        let d = &out.diagnostics;
        let f = tape.value(d.fused_logit).clone();
        let z1 = tape.value(d.logits[0]).clone();
        let y1 = tape.value(d.y1.unwrap()).clone();
        let max_diff = f
            .iter()
            .zip(z1.iter().zip(y1.iter()))
            .map(|(fv, (zv, yv))| (fv - (zv + yv)).abs() as f64)
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-8, "auxiliary leak {max_diff}");
    }

    #[test]
    fn forcing_p1_to_zero_keeps_base_plus_sum() {
        let chans = [4usize, 8, 16, 32, 64];
        let (mut params, afm) = afm_with_channels(5, chans);
        let mut b = ArrayD::zeros(IxDyn(&[1]));
        b[[0]] = -40.0;
        params.set_value(afm.blocks[0].head.w, ArrayD::zeros(IxDyn(&[1, FUSION_CHANNELS, 3, 3])));
        params.set_value(afm.blocks[0].head.b, b);
        let mut tape = Tape::new();
        let maps = random_maps(&mut tape, chans, [16, 8, 4, 2, 2], 13);
        let out = afm
            .fuse(&mut tape, &params, &maps, FusionMode::Attention, (16, 16))
            .unwrap();
        let d = &out.diagnostics;
        let f = tape.value(d.fused_logit).clone();
        // P1 ~ 0 and Z1 = -40 constant: F = Z1 + P1*Z1 + ~1 * sum(Y_i)
        let z1 = tape.value(d.logits[0]).clone();
        let p1 = tape.value(d.conf[0]).clone();
        let mut sum_y = ndarray::ArrayD::<f64>::zeros(f.raw_dim());
        for lvl in 1..5 {
            let y = tape.value(d.conf[lvl]) * tape.value(d.logits[lvl]);
            sum_y += &y;
        }
        let max_diff = f
            .iter()
            .zip(z1.iter().zip(p1.iter().zip(sum_y.iter())))
            .map(|(fv, (zv, (pv, sv)))| (fv - (zv + pv * zv + (1.0 - pv) * sv)).abs() as f64)
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-5, "identity drift {max_diff}");
        // the gate on level 1's own contribution is closed: Y1 = P1*Z1 ~ 0 relative to Z1
        let y1 = tape.value(d.y1.unwrap());
        assert!(y1.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn monotone_gating_shrinks_auxiliary_magnitude() {
        // |(1-p1')*s| <= |(1-p1)*s| pointwise whenever p1' >= p1.
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..100 {
            let p1: f64 = rng.gen_range(0.0..1.0);
            let p1_up: f64 = p1 + (1.0 - p1) * rng.gen::<f64>();
            let s: f64 = rng.gen_range(-5.0..5.0);
            assert!(((1.0 - p1_up) * s).abs() <= ((1.0 - p1) * s).abs() + 1e-7);
        }
    }

    #[test]
    fn add_and_concat_modes_match_hand_computed_2x2() {
        // Duplicate constant 2x2 single-channel inputs with hand-set weights:
        // each projection writes the input into channel 0 (identity 1x1 conv),
        // each head sums channel 0 over the full zero-padded 3x3 window with
        // bias 0.5. On a 2x2 map every window covers all four pixels, so both
        // fusers must produce sigmoid(5*(a+b+c+d) + 0.5) at every pixel.
        let chans = [1usize, 1, 1, 1, 1];
        let (mut params, afm) = afm_with_channels(6, chans);
        let mut ident = ArrayD::zeros(IxDyn(&[FUSION_CHANNELS, 1, 1, 1]));
        ident[[0, 0, 0, 0]] = 1.0;
        for level in 0..5 {
            params.set_value(afm.add_proj[level].w, ident.clone());
            params.set_value(afm.add_proj[level].b, ArrayD::zeros(IxDyn(&[FUSION_CHANNELS])));
            params.set_value(afm.cat_proj[level].w, ident.clone());
            params.set_value(afm.cat_proj[level].b, ArrayD::zeros(IxDyn(&[FUSION_CHANNELS])));
        }
        let mut add_head_w = ArrayD::zeros(IxDyn(&[1, FUSION_CHANNELS, 3, 3]));
        for ky in 0..3 {
            for kx in 0..3 {
                add_head_w[[0, 0, ky, kx]] = 1.0;
            }
        }
        params.set_value(afm.add_head.w, add_head_w);
        params.set_value(afm.add_head.b, ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let mut cat_head_w = ArrayD::zeros(IxDyn(&[1, FUSION_CHANNELS * 5, 3, 3]));
        for level in 0..5 {
            for ky in 0..3 {
                for kx in 0..3 {
                    cat_head_w[[0, level * FUSION_CHANNELS, ky, kx]] = 1.0;
                }
            }
        }
        params.set_value(afm.cat_head.w, cat_head_w);
        params.set_value(afm.cat_head.b, ArrayD::from_elem(IxDyn(&[1]), 0.5));

        let (a, b, c, d) = (0.3f64, -0.1, 0.2, 0.05);
        let expected = crate::grad::stable_sigmoid(5.0 * (a + b + c + d) + 0.5);
        for mode in [FusionMode::Add, FusionMode::Concatenate] {
            let mut tape = Tape::new();
            let m = tape.constant(
                Array4::from_shape_vec((1, 1, 2, 2), vec![a, b, c, d]).unwrap().into_dyn(),
            );
            let out = afm.fuse(&mut tape, &params, &[m, m, m, m, m], mode, (2, 2)).unwrap();
            for v in tape.value(out.prob).iter() {
                assert!((v - expected).abs() < 1e-6, "{mode:?}: {v} vs {expected}");
            }
        }
    }

    #[test]
    fn fuse_gradients_match_finite_differences() {
        let chans = [2usize, 2, 2, 2, 2];
        let (mut params, afm) = afm_with_channels(7, chans);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs: Vec<_> = (0..5)
            .map(|i| {
                let hw = [8usize, 4, 4, 2, 2][i];
                params.insert(
                    format!("x{i}"),
                    Array4::from_shape_fn((1, 2, hw, hw), |_| rng.gen::<f64>() - 0.5).into_dyn(),
                    true,
                )
            })
            .collect();
        for mode in [FusionMode::Attention, FusionMode::Add, FusionMode::Concatenate] {
            let report = GradCheck::default().run(&mut params, &xs.clone(), |tape, params| {
                let maps: Vec<_> = xs.iter().map(|x| tape.param(params, *x)).collect();
                let out = afm.fuse(tape, params, &maps, mode, (8, 8)).unwrap();
                let sq = tape.mul(out.prob, out.prob);
                tape.sum_all(sq)
            });
            assert!(report.passed(), "{mode:?}: {:?}", report.failures.first());
        }
    }
}
