//! Residual U-shaped encoder-decoder.
//!
//! Five encoder stages of residual basic blocks produce S1..S5; the decoder
//! mirrors them as X5..X1 with bilinear x2 upsampling and same-level skip
//! concatenation. Channel widths are `base * {1,2,4,8,16}` (capped at 16x
//! base), stage 1 keeps full resolution under the default stride plan.

use crate::error::{Error, Result};
use crate::grad::{Params, Tape, ValueId};
use crate::nn::ResidualBlock;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NUM_STAGES: usize = 5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub in_channels: usize,
    pub blocks_per_stage: usize,
    pub stride_plan: [usize; NUM_STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            in_channels: 1,
            blocks_per_stage: 2,
            stride_plan: [1, 2, 2, 2, 2],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.blocks_per_stage < 1 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        if !(self.stride_plan[0] == 1 || self.stride_plan[0] == 2) {
            return Err(Error::Config("stride_plan[0] must be 1 or 2".into()));
        }
        if self.stride_plan[1..].iter().any(|s| *s != 2) {
            return Err(Error::Config("stride_plan[1..5] must all be 2".into()));
        }
        Ok(())
    }

    /// Channel width at stage `i` (1-based): base * 2^(i-1), capped at 16x base.
    pub fn stage_channels(&self, stage: usize) -> usize {
        debug_assert!((1..=NUM_STAGES).contains(&stage));
        (self.base_channels << (stage - 1)).min(16 * self.base_channels)
    }

    /// Expected spatial ladder for an (H, W) input.
    pub fn stage_sizes(&self, input_hw: (usize, usize)) -> [(usize, usize); NUM_STAGES] {
        let mut out = [(0usize, 0usize); NUM_STAGES];
        let (mut h, mut w) = input_hw;
        for (i, s) in self.stride_plan.iter().enumerate() {
            h /= s;
            w /= s;
            out[i] = (h, w);
        }
        out
    }
}

/// Five encoder maps (S1..S5) and five decoder maps (X1..X5) as tape nodes.
pub struct StageOutputs {
    /// S1..S5, index 0 = S1.
    pub encoder: Vec<ValueId>,
    /// X1..X5, index 0 = X1 (finest).
    pub decoder: Vec<ValueId>,
}

impl StageOutputs {
    /// Checks the structural invariants against the tape and config.
    pub fn validate(&self, tape: &Tape, cfg: &BackboneConfig, input_hw: (usize, usize)) -> Result<()> {
        if self.encoder.len() != NUM_STAGES || self.decoder.len() != NUM_STAGES {
            return Err(Error::Shape("expected 5 encoder and 5 decoder maps".into()));
        }
        let sizes = cfg.stage_sizes(input_hw);
        for i in 0..NUM_STAGES {
            let es = tape.value(self.encoder[i]).shape().to_vec();
            let ds = tape.value(self.decoder[i]).shape().to_vec();
            let want_c = cfg.stage_channels(i + 1);
            let (wh, ww) = sizes[i];
            if es[1] != want_c || es[2] != wh || es[3] != ww {
                return Err(Error::Shape(format!(
                    "encoder stage {} shape {:?}, want channels {} size {}x{}",
                    i + 1,
                    es,
                    want_c,
                    wh,
                    ww
                )));
            }
            if ds[2] != es[2] || ds[3] != es[3] {
                return Err(Error::Shape(format!(
                    "decoder stage {} size {:?} differs from encoder {:?}",
                    i + 1,
                    &ds[2..],
                    &es[2..]
                )));
            }
        }
        if cfg.stride_plan[0] == 1 {
            let x1 = tape.value(self.decoder[0]).shape().to_vec();
            if (x1[2], x1[3]) != input_hw {
                return Err(Error::Shape(format!(
                    "X1 size {:?} != input {:?}",
                    &x1[2..],
                    input_hw
                )));
            }
        }
        for id in self.encoder.iter().chain(self.decoder.iter()) {
            if !tape.value(*id).iter().all(|v| v.is_finite()) {
                return Err(Error::Shape("non-finite value in stage outputs".into()));
            }
        }
        Ok(())
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    encoder: Vec<Vec<ResidualBlock>>,
    decoder_bottom: Vec<ResidualBlock>,
    /// Decoder transitions for levels 4..1 (index 0 = level 4).
    decoder_up: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub fn new<R: Rng>(params: &mut Params, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::with_capacity(NUM_STAGES);
        let mut in_c = cfg.in_channels;
        for stage in 1..=NUM_STAGES {
            let out_c = cfg.stage_channels(stage);
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let stride = if b == 0 { cfg.stride_plan[stage - 1] } else { 1 };
                let bin = if b == 0 { in_c } else { out_c };
                blocks.push(ResidualBlock::new(
                    params,
                    &format!("encoder.s{stage}.block{b}"),
                    bin,
                    out_c,
                    stride,
                    rng,
                ));
            }
            encoder.push(blocks);
            in_c = out_c;
        }

        let c5 = cfg.stage_channels(NUM_STAGES);
        let mut decoder_bottom = Vec::with_capacity(cfg.blocks_per_stage);
        for b in 0..cfg.blocks_per_stage {
            decoder_bottom.push(ResidualBlock::new(
                params,
                &format!("decoder.x5.block{b}"),
                c5,
                c5,
                1,
                rng,
            ));
        }

        let mut decoder_up = Vec::with_capacity(NUM_STAGES - 1);
        for level in (1..NUM_STAGES).rev() {
            // concat(up(X_{level+1}), S_level): C_{level+1} + C_level channels in.
            let cin = cfg.stage_channels(level + 1) + cfg.stage_channels(level);
            let cout = cfg.stage_channels(level);
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let bin = if b == 0 { cin } else { cout };
                blocks.push(ResidualBlock::new(
                    params,
                    &format!("decoder.x{level}.block{b}"),
                    bin,
                    cout,
                    1,
                    rng,
                ));
            }
            decoder_up.push(blocks);
        }

        Ok(Self { cfg: cfg.clone(), encoder, decoder_bottom, decoder_up })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the contracting path: returns S1..S5.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: ValueId,
        training: bool,
    ) -> Result<Vec<ValueId>> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("input must be NCHW, got {shape:?}")));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, config expects {}",
                shape[1], self.cfg.in_channels
            )));
        }
        if shape[2] % 16 != 0 || shape[3] % 16 != 0 {
            return Err(Error::Shape(format!(
                "input size {}x{} must be divisible by 16",
                shape[2], shape[3]
            )));
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for blocks in &self.encoder {
            for block in blocks {
                h = block.forward(tape, params, h, training);
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Runs the expanding path from encoder maps: returns X1..X5.
    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &Params,
        encoder_maps: &[ValueId],
        training: bool,
    ) -> Result<Vec<ValueId>> {
        if encoder_maps.len() != NUM_STAGES {
            return Err(Error::Shape(format!(
                "decode expects 5 encoder maps, got {}",
                encoder_maps.len()
            )));
        }
        let mut h = encoder_maps[NUM_STAGES - 1];
        for block in &self.decoder_bottom {
            h = block.forward(tape, params, h, training);
        }
        let mut decoder_rev = vec![h]; // X5 first
        for (idx, level) in (1..NUM_STAGES).rev().enumerate() {
            let skip = encoder_maps[level - 1];
            let skip_shape = tape.value(skip).shape().to_vec();
            let up = tape.upsample_bilinear(h, (skip_shape[2], skip_shape[3]));
            let up_shape = tape.value(up).shape().to_vec();
            if up_shape[2] != skip_shape[2] || up_shape[3] != skip_shape[3] {
                return Err(Error::Shape("skip/upsample size mismatch".into()));
            }
            let mut d = tape.concat_channels(&[up, skip]);
            for block in &self.decoder_up[idx] {
                d = block.forward(tape, params, d, training);
            }
            decoder_rev.push(d);
            h = d;
        }
        decoder_rev.reverse(); // now X1..X5
        Ok(decoder_rev)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: ValueId,
        training: bool,
    ) -> Result<StageOutputs> {
        let encoder = self.encode(tape, params, x, training)?;
        let decoder = self.decode(tape, params, &encoder, training)?;
        Ok(StageOutputs { encoder, decoder })
    }
}
