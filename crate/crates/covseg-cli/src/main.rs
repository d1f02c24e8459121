//! CLI driver: synthetic data generation, training, evaluation, the ablation
//! grids, the fusion comparison and standalone scoring.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use covseg::dataio;
use covseg::harness::{self, grids, Dataset, ExperimentConfig};
use covseg::metrics::MetricConfig;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "covseg",
    about = "Co-supervised encoder-decoder segmentation of lung CT infections",
    version
)]
struct Cli {
    /// Compute device (only "cpu" is available).
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slice dataset (images/, masks/, manifest.tsv).
    Synth {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Slice side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of slices assigned to the train split.
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
    },
    /// Train on a dataset directory; writes checkpoints, loss CSVs and a
    /// JSON report per run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config max_epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Override the number of repeated runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report JSON path (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Expected config; evaluation fails if the checkpoint differs.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dump per-stage supervision probability maps as 8-bit PNGs.
        #[arg(long)]
        dump_stages: Option<PathBuf>,
        /// Dump fusion diagnostics (P1, 1-P1, Y1, S_p) as 8-bit PNGs.
        #[arg(long)]
        dump_fusion: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Run the ablation grids (module toggles and/or co-supervision levels).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which grid: "modules" (17 toggle rows), "levels" (C1F..C5F) or "all".
        #[arg(long, default_value = "all")]
        grid: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Train the three fusion modes (Add, Concatenate, Attention) from a
    /// shared seed and tabulate them.
    CompareFusion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Score a directory of prediction images against ground-truth masks.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output prefix; writes <prefix>.json and <prefix>.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    runs: Option<usize>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(data: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let target = (cfg.input_size, cfg.input_size);
    Dataset::load(data, target).with_context(|| format!("loading dataset {}", data.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.device != "cpu" {
        bail!("device '{}' is not available; only 'cpu' is supported", cli.device);
    }
    match cli.command {
        Command::Synth { n, seed, size, out, train_frac } => {
            if !(0.0..=1.0).contains(&train_frac) {
                bail!("--train-frac must be in [0,1]");
            }
            let pairs = dataio::synth_generate(n, seed, size);
            dataio::write_synth_dataset(&out, &pairs, train_frac)?;
            println!(
                "wrote {} slices ({}x{}) to {} (train fraction {:.2})",
                n,
                size,
                size,
                out.display(),
                train_frac
            );
        }
        Command::Train { config, data, out, seed, max_epochs, runs } => {
            let cfg = load_config(&config, seed, max_epochs, runs)?;
            let dataset = load_split(&data, &cfg)?;
            let results = harness::train_runs(&cfg, &dataset, &out)?;
            for (i, r) in results.iter().enumerate() {
                println!(
                    "run {i}: best {} at epoch {} | {} dice {:.4} | {:.1}s | checkpoint {}",
                    format_loss(r.best_monitored),
                    r.best_epoch,
                    r.final_split,
                    r.final_metrics.dice,
                    r.wall_seconds,
                    r.checkpoint.display()
                );
                fs::write(
                    out.join(format!("run{i}_report.json")),
                    serde_json::to_string_pretty(r)?,
                )?;
            }
            if results.len() > 1 {
                let reports: Vec<&covseg::metrics::MetricReport> =
                    results.iter().map(|r| &r.final_metrics).collect();
                let agg = harness::aggregate_reports(&reports);
                fs::write(out.join("aggregate.json"), serde_json::to_string_pretty(&agg)?)?;
                println!(
                    "aggregate over {} runs: dice {:.4}±{:.4}",
                    agg.runs, agg.dice.mean, agg.dice.std
                );
            }
        }
        Command::Eval { checkpoint, data, split, out, config, dump_stages, dump_fusion, batch } => {
            let expect = match &config {
                Some(path) => Some(ExperimentConfig::load(path)?.model),
                None => None,
            };
            // input size comes from the checkpointed model's training config
            // when a config is given; otherwise use the dataset as stored.
            let cfg_for_size = config
                .as_ref()
                .map(|p| ExperimentConfig::load(p))
                .transpose()?
                .unwrap_or_else(|| ExperimentConfig::desk(1));
            let target = (cfg_for_size.input_size, cfg_for_size.input_size);
            let samples = dataio::load_dataset(&data, &split, target)?;
            let report = if dump_stages.is_some() || dump_fusion.is_some() {
                harness::evaluate_with_dumps(
                    &checkpoint,
                    &samples,
                    &cfg_for_size.metric,
                    batch,
                    dump_stages.as_deref(),
                    dump_fusion.as_deref(),
                )?
            } else {
                harness::evaluate_checkpoint(
                    &checkpoint,
                    &samples,
                    &cfg_for_size.metric,
                    expect.as_ref(),
                    batch,
                )?
            };
            println!(
                "{split}: dice {:.4} sens {:.4} prec {:.4} mae {:.4} e_phi {:.4} s_alpha {:.4} ({} slices)",
                report.dice,
                report.sens,
                report.prec,
                report.mae,
                report.e_phi_mean,
                report.s_alpha,
                report.per_slice.len()
            );
            if let Some(path) = out {
                if let Some(parent) = path.parent() {
                    if !parent.as_os_str().is_empty() {
                        fs::create_dir_all(parent)?;
                    }
                }
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report written to {}", path.display());
            }
        }
        Command::Ablate { config, data, out, grid, seed, max_epochs, runs } => {
            let cfg = load_config(&config, seed, max_epochs, runs)?;
            let dataset = load_split(&data, &cfg)?;
            let run_modules = grid == "modules" || grid == "all";
            let run_levels = grid == "levels" || grid == "all";
            if !run_modules && !run_levels {
                bail!("--grid must be one of: modules, levels, all");
            }
            if run_modules {
                let cells = grids::module_ablation_grid(&cfg);
                let table = grids::run_grid(&cells, &dataset, &out.join("module_ablation"));
                table.write(&out, "module_ablation")?;
                print_table("module ablation", &table);
            }
            if run_levels {
                let cells = grids::co_supervision_grid(&cfg);
                let table = grids::run_grid(&cells, &dataset, &out.join("co_supervision"));
                table.write(&out, "co_supervision")?;
                print_table("co-supervision levels", &table);
            }
        }
        Command::CompareFusion { config, data, out, seed, max_epochs, runs } => {
            let cfg = load_config(&config, seed, max_epochs, runs)?;
            let dataset = load_split(&data, &cfg)?;
            let cells = grids::fusion_comparison_grid(&cfg);
            let table = grids::run_grid(&cells, &dataset, &out.join("fusion"));
            table.write(&out, "fusion_comparison")?;
            print_table("fusion comparison", &table);
        }
        Command::Score { pred, gt, out, threshold } => {
            let report = score_dirs(&pred, &gt, threshold)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let json_path = out.with_extension("json");
            let csv_path = out.with_extension("csv");
            fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
            fs::write(&csv_path, report_csv(&report))?;
            println!(
                "scored {} pairs: dice {:.4} sens {:.4} prec {:.4} mae {:.4} e_phi {:.4} s_alpha {:.4}",
                report.per_slice.len(),
                report.dice,
                report.sens,
                report.prec,
                report.mae,
                report.e_phi_mean,
                report.s_alpha
            );
            println!("wrote {} and {}", json_path.display(), csv_path.display());
        }
    }
    Ok(())
}

fn format_loss(v: f64) -> String {
    format!("monitored loss {v:.5}")
}

fn print_table(name: &str, table: &grids::GridTable) {
    println!("{name}:");
    for r in &table.rows {
        let dice = r
            .dice_mean
            .map(|m| format!("{m:.4}±{:.4}", r.dice_std.unwrap_or(0.0)))
            .unwrap_or_else(|| "-".into());
        let reference = r.reference_dice.clone().unwrap_or_else(|| "-".into());
        match &r.error {
            Some(e) => println!("  {:<26} dice {:<16} ref {:<12} ERROR: {e}", r.label, dice, reference),
            None => println!("  {:<26} dice {:<16} ref {:<12}", r.label, dice, reference),
        }
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn score_dirs(pred_dir: &Path, gt_dir: &Path, threshold: f64) -> Result<covseg::metrics::MetricReport> {
    let names = png_names(pred_dir)?;
    if names.is_empty() {
        bail!("no .png predictions in {}", pred_dir.display());
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for name in &names {
        let gt_path = gt_dir.join(name);
        if !gt_path.exists() {
            bail!("ground truth {} missing for prediction {name}", gt_path.display());
        }
        preds.push(dataio::load_prob_map(&pred_dir.join(name))?);
        gts.push(dataio::load_binary_mask(&gt_path)?);
    }
    let cfg = MetricConfig { eval_threshold: threshold, ..Default::default() };
    Ok(covseg::metrics::evaluate_pairs(&preds, &gts, &cfg)?)
}

fn report_csv(report: &covseg::metrics::MetricReport) -> String {
    let mut out = String::from("slice,dice,sens,prec,mae,e_phi_mean,s_alpha\n");
    for (i, m) in report.per_slice.iter().enumerate() {
        out.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.dice, m.sens, m.prec, m.mae, m.e_phi_mean, m.s_alpha
        ));
    }
    out.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        report.dice, report.sens, report.prec, report.mae, report.e_phi_mean, report.s_alpha
    ));
    out
}
