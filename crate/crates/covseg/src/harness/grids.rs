//! Experiment grids: the co-supervision level sweep (C1F..C5F), the 17-row
//! module-toggle ablation, and the three-way fusion comparison. Published
//! full-scale numbers ride along as annotation columns.

use super::reference::{reference_tables, RefRow};
use super::{aggregate_reports, train_runs, Dataset, ExperimentConfig};
use crate::afm::FusionMode;
use crate::error::Result;
use crate::model::ModuleToggles;
use serde::Serialize;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct GridCell {
    pub label: String,
    pub cfg: ExperimentConfig,
    pub reference: Option<RefRow>,
}

/// C1F..C5F: full model (edge + semantic supervision + attention fusion) with
/// the supervision split l swept from 1 to 5.
pub fn co_supervision_grid(base: &ExperimentConfig) -> Vec<GridCell> {
    (1..=5)
        .map(|l| {
            let mut cfg = base.clone();
            cfg.model.supervision = crate::supervision::SupervisionConfig::with_level(l);
            cfg.model.toggles = ModuleToggles {
                esm: true,
                assm: true,
                esm_star: false,
                assm_star: false,
                afm: true,
            };
            cfg.model.fusion = FusionMode::Attention;
            cfg.normalize();
            let label = format!("C{l}F");
            let reference = reference_tables().level_row(&label).cloned();
            GridCell { label, cfg, reference }
        })
        .collect()
}

/// The 17 module-toggle combinations, in published row order:
/// (esm, assm, assm*, esm*, afm).
const ABLATION_ROWS: [(bool, bool, bool, bool, bool); 17] = [
    (false, false, false, false, false),
    (true, false, false, false, false),
    (false, true, false, false, false),
    (false, false, false, false, true),
    (true, false, false, false, true),
    (false, true, false, false, true),
    (true, true, false, false, true),
    (false, false, false, true, false),
    (false, false, true, false, false),
    (false, false, true, false, true),
    (false, false, false, true, true),
    (false, false, true, true, true),
    (true, false, false, true, true),
    (false, true, true, false, true),
    (true, false, true, false, true),
    (false, true, false, true, true),
    (true, true, true, true, true),
];

pub fn module_ablation_grid(base: &ExperimentConfig) -> Vec<GridCell> {
    ABLATION_ROWS
        .iter()
        .map(|(esm, assm, assm_star, esm_star, afm)| {
            let mut cfg = base.clone();
            cfg.model.toggles = ModuleToggles {
                esm: *esm,
                assm: *assm,
                esm_star: *esm_star,
                assm_star: *assm_star,
                afm: *afm,
            };
            cfg.model.fusion = FusionMode::Attention;
            cfg.normalize();
            let label = cfg.model.toggles.label();
            let reference = reference_tables().ablation_row(&label).cloned();
            GridCell { label, cfg, reference }
        })
        .collect()
}

/// Add / Concatenate / Attention with fusion as the only active module and a
/// shared seed (identical initial weights across the three rows).
pub fn fusion_comparison_grid(base: &ExperimentConfig) -> Vec<GridCell> {
    [FusionMode::Add, FusionMode::Concatenate, FusionMode::Attention]
        .into_iter()
        .map(|mode| {
            let mut cfg = base.clone();
            cfg.model.toggles = ModuleToggles {
                esm: false,
                assm: false,
                esm_star: false,
                assm_star: false,
                afm: true,
            };
            cfg.model.fusion = mode;
            cfg.normalize();
            let label = mode.to_string();
            let reference = reference_tables().fusion_row(&label).cloned();
            GridCell { label, cfg, reference }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRowResult {
    pub label: String,
    pub toggles: ModuleToggles,
    pub supervision_level: usize,
    pub fusion: FusionMode,
    pub runs: usize,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub reference: Option<RefRow>,
    /// Reference Dice formatted as published ("mean±std", percent).
    pub reference_dice: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridTable {
    pub rows: Vec<GridRowResult>,
}

impl GridTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,esm,assm,assm_star,esm_star,afm,l,fusion,runs,dice_mean,dice_std,ref_dice,error\n",
        );
        for r in &self.rows {
            let t = &r.toggles;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                t.esm as u8,
                t.assm as u8,
                t.assm_star as u8,
                t.esm_star as u8,
                t.afm as u8,
                r.supervision_level,
                r.fusion,
                r.runs,
                r.dice_mean.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.dice_std.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.reference_dice.clone().unwrap_or_default(),
                r.error.clone().unwrap_or_default()
            ));
        }
        out
    }

    pub fn write(&self, out_dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join(format!("{stem}.csv")), self.to_csv())?;
        fs::write(
            out_dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

fn sanitize(label: &str) -> String {
    label.replace('*', "-star").replace('+', "_")
}

/// Runs every cell; per-cell failures are recorded in the row and the grid
/// continues.
pub fn run_grid(cells: &[GridCell], data: &Dataset, out_dir: &Path) -> GridTable {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cell_dir = out_dir.join(sanitize(&cell.label));
        let mut row = GridRowResult {
            label: cell.label.clone(),
            toggles: cell.cfg.model.toggles,
            supervision_level: cell.cfg.model.supervision.l,
            fusion: cell.cfg.model.fusion,
            runs: cell.cfg.runs,
            dice_mean: None,
            dice_std: None,
            reference: cell.reference.clone(),
            reference_dice: cell.reference.as_ref().map(|r| r.dice.formatted()),
            error: None,
        };
        match train_runs(&cell.cfg, data, &cell_dir) {
            Ok(results) => {
                let reports: Vec<&crate::metrics::MetricReport> =
                    results.iter().map(|r| &r.final_metrics).collect();
                let agg = aggregate_reports(&reports);
                row.dice_mean = Some(agg.dice.mean);
                row.dice_std = Some(agg.dice.std);
            }
            Err(e) => {
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    GridTable { rows }
}
