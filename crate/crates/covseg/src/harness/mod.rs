//! Training/evaluation driver and the experiment grids.

pub mod grids;
pub mod optim;
pub mod reference;
pub mod schedule;

pub use optim::{Adam, OptimizerConfig};
pub use schedule::{MonitorSplit, PlateauSchedule, SchedulerConfig};

use crate::checkpoint;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::grad::{Params, Tape};
use crate::losses::LossBreakdown;
use crate::metrics::{self, MetricConfig, MetricReport};
use crate::model::{batch_to_arrays, ModelSpec, SegModel};
use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn default_early_stop() -> usize {
    25
}
fn default_runs() -> usize {
    3
}
fn default_max_epochs_sentinel() -> usize {
    0
}
fn default_dice_check() -> usize {
    10
}
fn default_input_size() -> usize {
    256
}

/// Full description of one experiment.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default = "default_early_stop")]
    pub early_stop_epochs: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Required: the training budget is never implied.
    #[serde(default = "default_max_epochs_sentinel")]
    pub max_epochs: usize,
    /// Optional overfit-smoke stop: end training once the train-split Dice
    /// (checked every `dice_check_every` epochs) reaches this value. The
    /// checkpoint then holds the weights that met the target.
    #[serde(default)]
    pub stop_at_train_dice: Option<f64>,
    #[serde(default = "default_dice_check")]
    pub dice_check_every: usize,
    /// Side length slices are resized to before entering the network.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
}

impl ExperimentConfig {
    /// Desk-scale starting point; `max_epochs` still has to be set.
    pub fn desk(max_epochs: usize) -> Self {
        Self {
            model: ModelSpec::default(),
            metric: MetricConfig::default(),
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            early_stop_epochs: default_early_stop(),
            runs: default_runs(),
            seed: 0,
            max_epochs,
            stop_at_train_dice: None,
            dice_check_every: default_dice_check(),
            input_size: default_input_size(),
        }
    }

    /// Fills level-dependent weight vectors and derives the supervision side
    /// from the module toggles.
    pub fn normalize(&mut self) {
        let l = self.model.supervision.l;
        if self.model.supervision.zeta.is_empty() && l > 0 {
            self.model.supervision.zeta = vec![1.0; l];
        }
        if self.model.supervision.omega.is_empty() && l < 5 {
            self.model.supervision.omega = vec![1.0; 5 - l];
        }
        self.model.supervision.side = self.model.toggles.derive_side();
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.metric.validate()?;
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.optimizer.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.runs < 1 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.scheduler.patience_epochs < 1 {
            return Err(Error::Config("patience_epochs must be >= 1".into()));
        }
        if self.early_stop_epochs < 1 {
            return Err(Error::Config("early_stop_epochs must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be set (>= 1)".into()));
        }
        if self.dice_check_every < 1 {
            return Err(Error::Config("dice_check_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.scheduler.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0,1)".into()));
        }
        if self.input_size % 16 != 0 {
            return Err(Error::Config("input_size must be divisible by 16".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path, target: (usize, usize)) -> Result<Self> {
        Ok(Self {
            train: crate::dataio::load_dataset(root, "train", target)?,
            test: crate::dataio::load_dataset(root, "test", target)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub monitored: f64,
    pub lr: f64,
    pub train_dice: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_monitored: f64,
    pub checkpoint: PathBuf,
    pub final_metrics: MetricReport,
    /// Split the final metrics were computed on ("test" or "train").
    pub final_split: String,
    pub wall_seconds: f64,
    pub stopped_early: bool,
    pub reached_dice_target: bool,
}

fn snapshot(params: &Params) -> Vec<ArrayD<f64>> {
    params.ids().map(|id| params.value(id).clone()).collect()
}

fn restore(params: &mut Params, snap: &[ArrayD<f64>]) {
    let ids: Vec<_> = params.ids().collect();
    for (id, value) in ids.into_iter().zip(snap.iter()) {
        params.set_value(id, value.clone());
    }
}

/// Eval-mode predictions, one (H,W) probability map per sample.
pub fn predict(
    model: &SegModel,
    params: &Params,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _, _) = batch_to_arrays(&refs);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, params, xv, false)?;
        let prob = tape.value(fwd.prob);
        let dims = prob.shape().to_vec();
        for b in 0..chunk.len() {
            let mut plane = Array2::<f64>::zeros((dims[2], dims[3]));
            for y in 0..dims[2] {
                for x in 0..dims[3] {
                    plane[[y, x]] = prob[[b, 0, y, x]];
                }
            }
            out.push(plane);
        }
    }
    Ok(out)
}

fn eval_loss(
    model: &SegModel,
    params: &Params,
    samples: &[Sample],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, g_mask, g_edge) = batch_to_arrays(&refs);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, params, xv, false)?;
        let out = model.loss(&mut tape, params, &fwd, &g_mask, &g_edge)?;
        total += out.breakdown.total;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

fn split_dice(
    model: &SegModel,
    params: &Params,
    samples: &[Sample],
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let preds = predict(model, params, samples, cfg.optimizer.batch_size)?;
    let mut acc = 0.0;
    for (p, s) in preds.iter().zip(samples.iter()) {
        let bin = p.mapv(|v| (v >= cfg.metric.eval_threshold) as u8);
        acc += metrics::dice(&bin, &s.y_mask)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Trains one run. Writes `<tag>_steps.csv` (per-step loss breakdown),
/// `<tag>_epochs.csv` and the best checkpoint `<tag>.ckpt` under `out_dir`.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, out_dir: &Path, tag: &str) -> Result<RunResult> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Training("empty train split".into()));
    }
    if cfg.scheduler.monitor == MonitorSplit::Test && data.test.is_empty() {
        return Err(Error::Training("monitor=test but the test split is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    // monitored split
    let n = data.train.len();
    let (train_indices, val_indices): (Vec<usize>, Vec<usize>) = match cfg.scheduler.monitor {
        MonitorSplit::Val => {
            let n_val = ((n as f64) * cfg.scheduler.val_fraction).round() as usize;
            let n_val = n_val.clamp(1, n.saturating_sub(1).max(0));
            if n_val == 0 || n_val >= n {
                ((0..n).collect(), Vec::new()) // too small to carve; falls back to train monitoring
            } else {
                ((0..n - n_val).collect(), (n - n_val..n).collect())
            }
        }
        _ => ((0..n).collect(), Vec::new()),
    };
    let val_samples: Vec<Sample> = val_indices.iter().map(|i| data.train[*i].clone()).collect();

    let mut params = Params::new();
    let model = SegModel::new(&mut params, &cfg.model, cfg.seed)?;
    let mut adam = Adam::new(&params, &cfg.optimizer);
    let mut schedule = PlateauSchedule::new(cfg.scheduler.patience_epochs, cfg.early_stop_epochs);

    let mut steps_csv = fs::File::create(out_dir.join(format!("{tag}_steps.csv")))?;
    writeln!(steps_csv, "step,edge,semantic,fusion,total")?;

    let mut best_weights = snapshot(&params);
    let mut epochs = Vec::new();
    let mut global_step = 0u64;
    let mut stopped_early = false;
    let mut reached_dice_target = false;

    'training: for epoch in 1..=cfg.max_epochs {
        let mut order = train_indices.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let mut sums = LossBreakdown::default();
        let mut steps_in_epoch = 0usize;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|i| &data.train[*i]).collect();
            let (x, g_mask, g_edge) = batch_to_arrays(&samples);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = model.forward(&mut tape, &params, xv, true)?;
            let out = model.loss(&mut tape, &params, &fwd, &g_mask, &g_edge)?;
            if !out.breakdown.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged (non-finite) at step {global_step}"
                )));
            }
            tape.backward(out.total);
            adam.step(&mut params, &tape);
            for u in tape.take_bn_pending() {
                params.set_value(u.mean_param, u.mean.into_dyn());
                params.set_value(u.var_param, u.var.into_dyn());
            }
            global_step += 1;
            writeln!(
                steps_csv,
                "{},{:.6},{:.6},{:.6},{:.6}",
                global_step, out.breakdown.edge, out.breakdown.semantic, out.breakdown.fusion, out.breakdown.total
            )?;
            sums.edge += out.breakdown.edge;
            sums.semantic += out.breakdown.semantic;
            sums.fusion += out.breakdown.fusion;
            sums.total += out.breakdown.total;
            steps_in_epoch += 1;
        }
        let k = steps_in_epoch.max(1) as f64;
        let train_mean = LossBreakdown {
            edge: sums.edge / k,
            semantic: sums.semantic / k,
            fusion: sums.fusion / k,
            total: sums.total / k,
        };

        let monitored = match cfg.scheduler.monitor {
            MonitorSplit::Train => train_mean.total,
            MonitorSplit::Val => {
                if val_samples.is_empty() {
                    train_mean.total
                } else {
                    eval_loss(&model, &params, &val_samples, cfg.optimizer.batch_size)?
                }
            }
            MonitorSplit::Test => eval_loss(&model, &params, &data.test, cfg.optimizer.batch_size)?,
        };

        let action = schedule.observe(monitored);
        if action.improved {
            best_weights = snapshot(&params);
        }
        if action.reduce_lr {
            adam.set_lr(adam.lr() * cfg.scheduler.plateau_factor);
        }

        let mut train_dice = None;
        if let Some(target) = cfg.stop_at_train_dice {
            if epoch % cfg.dice_check_every == 0 || epoch == cfg.max_epochs {
                let d = split_dice(&model, &params, &data.train, cfg)?;
                train_dice = Some(d);
                if d >= target {
                    reached_dice_target = true;
                    // keep the weights that met the target
                    best_weights = snapshot(&params);
                }
            }
        }
        epochs.push(EpochLog { epoch, train: train_mean, monitored, lr: adam.lr(), train_dice });
        if reached_dice_target {
            break 'training;
        }
        if action.stop {
            stopped_early = true;
            break 'training;
        }
    }

    restore(&mut params, &best_weights);
    let ckpt_path = out_dir.join(format!("{tag}.ckpt"));
    checkpoint::save(&ckpt_path, &cfg.model, &params)?;

    let mut epochs_csv = fs::File::create(out_dir.join(format!("{tag}_epochs.csv")))?;
    writeln!(epochs_csv, "epoch,train_total,monitored,lr,train_dice")?;
    for e in &epochs {
        writeln!(
            epochs_csv,
            "{},{:.6},{:.6},{:.6e},{}",
            e.epoch,
            e.train.total,
            e.monitored,
            e.lr,
            e.train_dice.map(|d| format!("{d:.4}")).unwrap_or_default()
        )?;
    }

    let (final_samples, final_split) = if !data.test.is_empty() {
        (&data.test, "test")
    } else {
        (&data.train, "train")
    };
    let preds = predict(&model, &params, final_samples, cfg.optimizer.batch_size)?;
    let gts: Vec<Array2<u8>> = final_samples.iter().map(|s| s.y_mask.clone()).collect();
    let final_metrics = metrics::evaluate_pairs(&preds, &gts, &cfg.metric)?;

    Ok(RunResult {
        epochs,
        best_epoch: schedule.best_epoch,
        best_monitored: schedule.best(),
        checkpoint: ckpt_path,
        final_metrics,
        final_split: final_split.to_string(),
        wall_seconds: started.elapsed().as_secs_f64(),
        stopped_early,
        reached_dice_target,
    })
}

/// Repeats training `cfg.runs` times with seeds `seed`, `seed+1`, ...
pub fn train_runs(cfg: &ExperimentConfig, data: &Dataset, out_dir: &Path) -> Result<Vec<RunResult>> {
    let mut results = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(run as u64);
        results.push(train(&c, data, out_dir, &format!("run{run}"))?);
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// Mean and sample standard deviation of each metric across runs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub dice: MeanStd,
    pub sens: MeanStd,
    pub prec: MeanStd,
    pub mae: MeanStd,
    pub e_phi_mean: MeanStd,
    pub s_alpha: MeanStd,
}

pub fn aggregate_reports(reports: &[&MetricReport]) -> AggregateReport {
    let pick = |f: fn(&MetricReport) -> f64| -> MeanStd {
        mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    AggregateReport {
        runs: reports.len(),
        dice: pick(|r| r.dice),
        sens: pick(|r| r.sens),
        prec: pick(|r| r.prec),
        mae: pick(|r| r.mae),
        e_phi_mean: pick(|r| r.e_phi_mean),
        s_alpha: pick(|r| r.s_alpha),
    }
}

/// Evaluates a checkpoint on a sample list. `expect_spec` guards against
/// checkpoint/config mismatches when given.
pub fn evaluate_checkpoint(
    ckpt_path: &Path,
    samples: &[Sample],
    metric: &MetricConfig,
    expect_spec: Option<&ModelSpec>,
    batch_size: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Training("evaluation split is empty".into()));
    }
    let ckpt = checkpoint::load(ckpt_path)?;
    if let Some(expect) = expect_spec {
        if *expect != ckpt.spec {
            return Err(Error::Checkpoint(
                "checkpoint model spec differs from the requested config".into(),
            ));
        }
    }
    let mut params = Params::new();
    let model = SegModel::new(&mut params, &ckpt.spec, 0)?;
    checkpoint::restore_into(&mut params, &ckpt)?;
    let preds = predict(&model, &params, samples, batch_size)?;
    let gts: Vec<Array2<u8>> = samples.iter().map(|s| s.y_mask.clone()).collect();
    metrics::evaluate_pairs(&preds, &gts, metric)
}

/// Evaluation with optional per-stage and fusion-diagnostic image dumps.
pub fn evaluate_with_dumps(
    ckpt_path: &Path,
    samples: &[Sample],
    metric: &MetricConfig,
    batch_size: usize,
    dump_stages: Option<&Path>,
    dump_fusion: Option<&Path>,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Training("evaluation split is empty".into()));
    }
    let ckpt = checkpoint::load(ckpt_path)?;
    let mut params = Params::new();
    let model = SegModel::new(&mut params, &ckpt.spec, 0)?;
    checkpoint::restore_into(&mut params, &ckpt)?;

    if let Some(dir) = dump_stages {
        fs::create_dir_all(dir)?;
    }
    if let Some(dir) = dump_fusion {
        fs::create_dir_all(dir)?;
    }

    let mut preds: Vec<Array2<f64>> = Vec::with_capacity(samples.len());
    let mut offset = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _, _) = batch_to_arrays(&refs);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, &params, xv, false)?;

        let plane = |tape: &Tape, id: crate::grad::ValueId, b: usize| -> Array2<f64> {
            let v = tape.value(id);
            let sh = v.shape().to_vec();
            Array2::from_shape_fn((sh[2], sh[3]), |(y, x)| v[[b, 0, y, x]])
        };

        for b in 0..chunk.len() {
            let idx = offset + b;
            let prob_plane = plane(&tape, fwd.prob, b);
            if let Some(dir) = dump_fusion {
                if let Some(fu) = &fwd.fusion {
                    let d = &fu.diagnostics;
                    if let (Some(y1), Some(omp)) = (d.y1, d.one_minus_p1) {
                        crate::dataio::save_gray_png(
                            &dir.join(format!("slice{idx:04}_p1.png")),
                            &plane(&tape, d.conf[0], b),
                        )?;
                        crate::dataio::save_gray_png(
                            &dir.join(format!("slice{idx:04}_one_minus_p1.png")),
                            &plane(&tape, omp, b),
                        )?;
                        // gated logit: min-max normalized for an 8-bit dump
                        let y = plane(&tape, y1, b);
                        let (lo, hi) = y.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| {
                            (lo.min(*v), hi.max(*v))
                        });
                        let norm = if hi > lo { y.mapv(|v| (v - lo) / (hi - lo)) } else { y.mapv(|_| 0.0) };
                        crate::dataio::save_gray_png(&dir.join(format!("slice{idx:04}_y1.png")), &norm)?;
                        crate::dataio::save_gray_png(
                            &dir.join(format!("slice{idx:04}_sp.png")),
                            &prob_plane,
                        )?;
                    }
                }
            }
            preds.push(prob_plane);
        }
        if let Some(dir) = dump_stages {
            let stage_preds = model.stage_predictions(&mut tape, &params, &fwd)?;
            for (side, role, pred) in stage_preds {
                let side_tag = match side {
                    crate::supervision::Side::Encoder => "enc",
                    _ => "dec",
                };
                for b in 0..chunk.len() {
                    let idx = offset + b;
                    crate::dataio::save_gray_png(
                        &dir.join(format!(
                            "slice{idx:04}_{side_tag}_s{}_{role}.png",
                            pred.stage_index
                        )),
                        &plane(&tape, pred.prob, b),
                    )?;
                }
            }
        }
        offset += chunk.len();
    }
    let gts: Vec<Array2<u8>> = samples.iter().map(|s| s.y_mask.clone()).collect();
    metrics::evaluate_pairs(&preds, &gts, metric)
}
