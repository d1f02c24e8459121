//! Full network assembly: backbone, supervision heads on both paths, fusion
//! module and the joint loss.
//!
//! The model always constructs every head and all three fusion paths from the
//! seed, in a fixed order, so identical seeds give identical initial weights
//! across every module-toggle combination (controlled ablations). Toggles
//! select which parts run and which loss terms are active; inactive parts
//! receive no gradient.

use crate::afm::{Afm, FusionMode, FusionOutput};
use crate::backbone::{Backbone, BackboneConfig, StageOutputs, NUM_STAGES};
use crate::error::{Error, Result};
use crate::grad::{Params, Tape, ValueId};
use crate::losses::{dice_loss, total_loss, LossBreakdown, LossConfig};
use crate::supervision::{
    edge_head, project_stage, semantic_head, Side, StageHead, StagePrediction, SupervisionConfig,
};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which supervision/fusion modules are active in a run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ModuleToggles {
    /// Edge supervision on encoder stages 1..l.
    pub esm: bool,
    /// Semantic supervision on encoder stages l+1..5.
    pub assm: bool,
    /// Edge supervision on decoder stages 1..l.
    pub esm_star: bool,
    /// Semantic supervision on decoder stages l+1..5.
    pub assm_star: bool,
    /// Attention/add/concat fusion; off = plain X1 output head.
    pub afm: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self { esm: true, assm: true, esm_star: false, assm_star: false, afm: true }
    }
}

impl ModuleToggles {
    pub const fn none() -> Self {
        Self { esm: false, assm: false, esm_star: false, assm_star: false, afm: false }
    }

    /// Which paths carry active supervision heads.
    pub fn derive_side(&self) -> Side {
        let enc = self.esm || self.assm;
        let dec = self.esm_star || self.assm_star;
        match (enc, dec) {
            (true, true) => Side::Both,
            (false, true) => Side::Decoder,
            _ => Side::Encoder,
        }
    }

    /// Row label of the form "esm+assm+afm" ("baseline" when nothing is on).
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.esm {
            parts.push("esm");
        }
        if self.assm {
            parts.push("assm");
        }
        if self.assm_star {
            parts.push("assm*");
        }
        if self.esm_star {
            parts.push("esm*");
        }
        if self.afm {
            parts.push("afm");
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Everything needed to rebuild a network and its loss wiring.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub supervision: SupervisionConfig,
    pub toggles: ModuleToggles,
    pub fusion: FusionMode,
    pub loss: LossConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            supervision: SupervisionConfig::default(),
            toggles: ModuleToggles::default(),
            fusion: FusionMode::Attention,
            loss: LossConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.supervision.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

pub struct SegModel {
    spec: ModelSpec,
    backbone: Backbone,
    enc_edge: Vec<StageHead>,
    enc_sem: Vec<StageHead>,
    dec_edge: Vec<StageHead>,
    dec_sem: Vec<StageHead>,
    baseline: StageHead,
    afm: Afm,
}

pub struct ModelForward {
    pub stages: StageOutputs,
    /// Final prediction S_p: fusion output when AFM is on, otherwise the
    /// plain X1 head.
    pub prob: ValueId,
    pub fusion: Option<FusionOutput>,
    pub input_hw: (usize, usize),
}

pub struct LossOutput {
    pub total: ValueId,
    pub breakdown: LossBreakdown,
    pub edge_predictions: Vec<StagePrediction>,
    pub semantic_predictions: Vec<StagePrediction>,
}

impl SegModel {
    pub fn new(params: &mut Params, spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(params, &spec.backbone, &mut rng)?;
        let mut heads = |prefix: &str, rng: &mut ChaCha8Rng| -> Vec<StageHead> {
            (1..=NUM_STAGES)
                .map(|stage| {
                    StageHead::new(
                        params,
                        &format!("{prefix}.s{stage}.proj"),
                        spec.backbone.stage_channels(stage),
                        rng,
                    )
                })
                .collect()
        };
        let enc_edge = heads("esm.enc", &mut rng);
        let enc_sem = heads("assm.enc", &mut rng);
        let dec_edge = heads("esm.dec", &mut rng);
        let dec_sem = heads("assm.dec", &mut rng);
        let baseline = StageHead::new(params, "head.out", spec.backbone.stage_channels(1), &mut rng);
        let level_channels = [
            spec.backbone.stage_channels(1),
            spec.backbone.stage_channels(2),
            spec.backbone.stage_channels(3),
            spec.backbone.stage_channels(4),
            spec.backbone.stage_channels(5),
        ];
        let afm = Afm::new(params, &level_channels, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            backbone,
            enc_edge,
            enc_sem,
            dec_edge,
            dec_sem,
            baseline,
            afm,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn afm(&self) -> &Afm {
        &self.afm
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: ValueId,
        training: bool,
    ) -> Result<ModelForward> {
        let shape = tape.value(x).shape().to_vec();
        let input_hw = (shape[2], shape[3]);
        let stages = self.backbone.forward(tape, params, x, training)?;
        let (prob, fusion) = if self.spec.toggles.afm {
            let out = self
                .afm
                .fuse(tape, params, &stages.decoder, self.spec.fusion, input_hw)?;
            (out.prob, Some(out))
        } else {
            let pred = project_stage(tape, params, &self.baseline, stages.decoder[0], 1, input_hw)?;
            (pred.prob, None)
        };
        Ok(ModelForward { stages, prob, fusion, input_hw })
    }

    /// Joint loss for one batch. `g_mask`/`g_edge` are (B,1,H,W) {0,1} maps.
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &Params,
        fwd: &ModelForward,
        g_mask: &ArrayD<f64>,
        g_edge: &ArrayD<f64>,
    ) -> Result<LossOutput> {
        let t = &self.spec.toggles;
        let sup = &self.spec.supervision;
        let lc = &self.spec.loss;
        let l = sup.l;
        let out_hw = fwd.input_hw;

        let mut edge_terms: Vec<ValueId> = Vec::new();
        let mut semantic_terms: Vec<ValueId> = Vec::new();
        let mut edge_predictions = Vec::new();
        let mut semantic_predictions = Vec::new();

        let run_edge = |tape: &mut Tape,
                            heads: &[StageHead],
                            feats: &[ValueId],
                            preds: &mut Vec<StagePrediction>,
                            terms: &mut Vec<ValueId>|
         -> Result<()> {
            let head_refs: Vec<&StageHead> = heads.iter().take(l).collect();
            let stage_idx: Vec<usize> = (1..=l).collect();
            let out = edge_head(
                tape,
                params,
                &head_refs,
                &feats[..l],
                &stage_idx,
                g_edge,
                &sup.zeta,
                lc.epsilon,
                lc.normalized_multistage,
                out_hw,
            )?;
            terms.push(out.loss);
            preds.extend(out.predictions);
            Ok(())
        };
        if t.esm && l > 0 {
            run_edge(tape, &self.enc_edge, &fwd.stages.encoder, &mut edge_predictions, &mut edge_terms)?;
        }
        if t.esm_star && l > 0 {
            run_edge(tape, &self.dec_edge, &fwd.stages.decoder, &mut edge_predictions, &mut edge_terms)?;
        }

        let run_sem = |tape: &mut Tape,
                           heads: &[StageHead],
                           feats: &[ValueId],
                           preds: &mut Vec<StagePrediction>,
                           terms: &mut Vec<ValueId>|
         -> Result<()> {
            let head_refs: Vec<&StageHead> = heads.iter().skip(l).collect();
            let stage_idx: Vec<usize> = (l + 1..=NUM_STAGES).collect();
            let out = semantic_head(
                tape,
                params,
                &head_refs,
                &feats[l..],
                &stage_idx,
                g_mask,
                &sup.omega,
                lc.epsilon,
                lc.normalized_multistage,
                out_hw,
            )?;
            terms.push(out.loss);
            preds.extend(out.predictions);
            Ok(())
        };
        if t.assm && l < NUM_STAGES {
            run_sem(tape, &self.enc_sem, &fwd.stages.encoder, &mut semantic_predictions, &mut semantic_terms)?;
        }
        if t.assm_star && l < NUM_STAGES {
            run_sem(tape, &self.dec_sem, &fwd.stages.decoder, &mut semantic_predictions, &mut semantic_terms)?;
        }

        let combine = |tape: &mut Tape, terms: &[ValueId]| -> Option<ValueId> {
            match terms.len() {
                0 => None,
                1 => Some(terms[0]),
                _ => {
                    let mut acc = terms[0];
                    for term in &terms[1..] {
                        acc = tape.add(acc, *term);
                    }
                    Some(acc)
                }
            }
        };
        let edge = combine(tape, &edge_terms);
        let semantic = combine(tape, &semantic_terms);
        let fusion = dice_loss(tape, fwd.prob, g_mask, lc.epsilon)?;
        let (total, breakdown) = total_loss(tape, edge, semantic, fusion, lc);
        Ok(LossOutput { total, breakdown, edge_predictions, semantic_predictions })
    }

    /// Per-stage probability maps for inspection dumps: every stage of the
    /// active sides with its configured role (edge for stages 1..l, semantic
    /// beyond). Returns (side, role, prediction) tuples.
    pub fn stage_predictions(
        &self,
        tape: &mut Tape,
        params: &Params,
        fwd: &ModelForward,
    ) -> Result<Vec<(Side, &'static str, StagePrediction)>> {
        let l = self.spec.supervision.l;
        let mut out = Vec::new();
        let sides: &[(Side, &[StageHead], &[StageHead], &Vec<ValueId>)] = &[
            (Side::Encoder, &self.enc_edge, &self.enc_sem, &fwd.stages.encoder),
            (Side::Decoder, &self.dec_edge, &self.dec_sem, &fwd.stages.decoder),
        ];
        for (side, edge_heads, sem_heads, feats) in sides {
            for stage in 1..=NUM_STAGES {
                let (role, head) = if stage <= l {
                    ("edge", &edge_heads[stage - 1])
                } else {
                    ("mask", &sem_heads[stage - 1])
                };
                let pred = project_stage(tape, params, head, feats[stage - 1], stage, fwd.input_hw)?;
                out.push((*side, role, pred));
            }
        }
        Ok(out)
    }
}

/// Stacks samples into (B,1,H,W) input plus (B,1,H,W) float mask/edge maps.
pub fn batch_to_arrays(samples: &[&crate::dataio::Sample]) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let b = samples.len();
    let (_, h, w) = samples[0].x.dim();
    let mut x = ndarray::Array4::<f64>::zeros((b, 1, h, w));
    let mut mask = ndarray::Array4::<f64>::zeros((b, 1, h, w));
    let mut edge = ndarray::Array4::<f64>::zeros((b, 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        for y in 0..h {
            for xx in 0..w {
                x[[i, 0, y, xx]] = s.x[[0, y, xx]];
                mask[[i, 0, y, xx]] = s.y_mask[[y, xx]] as f64;
                edge[[i, 0, y, xx]] = s.y_edge[[y, xx]] as f64;
            }
        }
    }
    (x.into_dyn(), mask.into_dyn(), edge.into_dyn())
}

/// Validation helper shared by tests: non-finite screening of a forward pass.
pub fn probe_forward_finite(tape: &Tape, fwd: &ModelForward) -> Result<()> {
    if !tape.value(fwd.prob).iter().all(|v| v.is_finite()) {
        return Err(Error::Training("non-finite values in final prediction".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio;
    use ndarray::Array4;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig { base_channels: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn forward_shapes_full_model() {
        let spec = tiny_spec();
        let mut params = Params::new();
        let model = SegModel::new(&mut params, &spec, 42).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Array4::<f64>::zeros((2, 1, 32, 32)).into_dyn());
        let fwd = model.forward(&mut tape, &params, x, false).unwrap();
        assert_eq!(tape.value(fwd.prob).shape(), &[2, 1, 32, 32]);
        assert!(fwd.fusion.is_some());
        fwd.stages.validate(&tape, &spec.backbone, (32, 32)).unwrap();
    }

    #[test]
    fn baseline_head_when_afm_off() {
        let mut spec = tiny_spec();
        spec.toggles = ModuleToggles::none();
        let mut params = Params::new();
        let model = SegModel::new(&mut params, &spec, 42).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Array4::<f64>::zeros((1, 1, 32, 32)).into_dyn());
        let fwd = model.forward(&mut tape, &params, x, false).unwrap();
        assert!(fwd.fusion.is_none());
        assert_eq!(tape.value(fwd.prob).shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn same_seed_same_weights_across_toggles_and_fusion_modes() {
        let mut spec_a = tiny_spec();
        spec_a.toggles = ModuleToggles::default();
        spec_a.fusion = FusionMode::Attention;
        let mut spec_b = tiny_spec();
        spec_b.toggles = ModuleToggles::none();
        spec_b.fusion = FusionMode::Add;

        let mut pa = Params::new();
        let _ = SegModel::new(&mut pa, &spec_a, 7).unwrap();
        let mut pb = Params::new();
        let _ = SegModel::new(&mut pb, &spec_b, 7).unwrap();
        assert_eq!(pa.len(), pb.len());
        for (ida, idb) in pa.ids().zip(pb.ids()) {
            assert_eq!(pa.name(ida), pb.name(idb));
            assert_eq!(pa.value(ida), pb.value(idb), "{}", pa.name(ida));
        }
    }

    #[test]
    fn loss_wiring_respects_toggles() {
        let pairs = dataio::synth_generate(2, 5, 32);
        let samples: Vec<_> = pairs
            .iter()
            .map(|p| dataio::preprocess(p, (32, 32)).unwrap())
            .collect();
        let refs: Vec<&dataio::Sample> = samples.iter().collect();
        let (x_arr, g_mask, g_edge) = batch_to_arrays(&refs);

        let combos = [
            ModuleToggles::default(),
            ModuleToggles::none(),
            ModuleToggles { esm: true, assm: false, esm_star: true, assm_star: false, afm: true },
            ModuleToggles { esm: false, assm: false, esm_star: false, assm_star: true, afm: false },
        ];
        for toggles in combos {
            let mut spec = tiny_spec();
            spec.toggles = toggles;
            let mut params = Params::new();
            let model = SegModel::new(&mut params, &spec, 3).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(x_arr.clone());
            let fwd = model.forward(&mut tape, &params, x, true).unwrap();
            let out = model.loss(&mut tape, &params, &fwd, &g_mask, &g_edge).unwrap();
            assert!(out.breakdown.is_finite());
            let has_edge = (toggles.esm || toggles.esm_star) && spec.supervision.l > 0;
            let has_sem = toggles.assm || toggles.assm_star;
            assert_eq!(out.edge_predictions.is_empty(), !has_edge, "{}", toggles.label());
            assert_eq!(out.semantic_predictions.is_empty(), !has_sem);
            if !has_edge {
                assert_eq!(out.breakdown.edge, 0.0);
            }
            // total identity
            let expect = spec.loss.theta as f64 * out.breakdown.edge
                + spec.loss.beta as f64 * out.breakdown.semantic
                + out.breakdown.fusion;
            assert_eq!(out.breakdown.total, expect);
            // backward runs end to end
            tape.backward(out.total);
        }
    }

    #[test]
    fn toggle_labels() {
        assert_eq!(ModuleToggles::none().label(), "baseline");
        assert_eq!(ModuleToggles::default().label(), "esm+assm+afm");
        let t = ModuleToggles { esm: false, assm: false, esm_star: true, assm_star: true, afm: true };
        assert_eq!(t.label(), "assm*+esm*+afm");
    }
}
