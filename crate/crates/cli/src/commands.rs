//! Subcommand implementations.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use sctforge::metrics::metrics_table;
use sctforge::model::{load_checkpoint, save_checkpoint};
use sctforge::phantom::{
    generate_cohort, load_cohort, save_cohort, shift_split, CohortSplit, PairedCase, SPLIT_RULE,
};
use sctforge::seed;
use sctforge::stats::{comparison_table, relative_gain, ComparisonReport};
use sctforge::training::{evaluate_case, finetune, synthesize_sct, train};
use sctforge::volume::{save_mask, save_volume};

use crate::config::FileConfig;
use crate::error::CliError;
use crate::figures::{boxplot_svg, gain_dots_svg};

#[derive(Parser)]
#[command(
    name = "sctforge",
    version,
    about = "MRI-to-synthetic-CT pipeline: phantom cohorts, cascaded multitask training, synthesis, evaluation and comparison reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file; omitted sections fall back to defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for all randomness in this command (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for this command's artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-subject synthesis and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Allow writing into an existing non-empty output directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a paired phantom cohort with train/val/test splits.
    Generate,
    /// Train a model from scratch on a cohort.
    Train,
    /// Warm-start from a checkpoint and adapt to another cohort.
    Finetune,
    /// Synthesize CT volumes and skull masks for a cohort split.
    Synthesize,
    /// Compute per-subject image metrics for a cohort split.
    Evaluate,
    /// Paired statistics and figures comparing two evaluation outputs.
    Compare,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = FileConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("missing required flag --out".into()))?;
    prepare_out_dir(out, cli.overwrite)?;
    write_file(&out.join("config_resolved.toml"), &cfg.resolved_toml())?;
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::Generate => cmd_generate(&cfg, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Finetune => cmd_finetune(&cfg, out),
        Command::Synthesize => cmd_synthesize(&cfg, out, jobs),
        Command::Evaluate => cmd_evaluate(&cfg, out, jobs),
        Command::Compare => cmd_compare(&cfg, out),
    }
}

fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<(), CliError> {
    if out.exists() {
        let mut entries = fs::read_dir(out)
            .map_err(|e| CliError::Data(format!("cannot read output directory {}: {e}", out.display())))?;
        if entries.next().is_some() && !overwrite {
            return Err(CliError::Data(format!(
                "output directory {} is not empty (pass --overwrite to reuse it)",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out).map_err(|e| {
            CliError::Data(format!("cannot create output directory {}: {e}", out.display()))
        })?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("missing required config key {key}")))
}

fn check_split_name(name: &str) -> Result<(), CliError> {
    match name {
        "train" | "val" | "test" | "all" => Ok(()),
        other => Err(CliError::Config(format!(
            "unknown split {other:?} (expected \"train\", \"val\", \"test\" or \"all\")"
        ))),
    }
}

fn select_split<'a>(split: &'a CohortSplit, name: &str) -> Result<Vec<&'a PairedCase>, CliError> {
    check_split_name(name)?;
    let cases: Vec<&PairedCase> = match name {
        "train" => split.train.iter().collect(),
        "val" => split.val.iter().collect(),
        "test" => split.test.iter().collect(),
        _ => split.all_cases().collect(),
    };
    if cases.is_empty() {
        return Err(CliError::Data(format!("split {name:?} is empty")));
    }
    Ok(cases)
}

fn load_ck(path: &Path) -> Result<sctforge::model::Checkpoint, CliError> {
    load_checkpoint(path)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

fn load_split(path: &Path) -> Result<CohortSplit, CliError> {
    load_cohort(path).map_err(|e| CliError::Data(format!("cohort {}: {e}", path.display())))
}

/// Run `f(0..n)` on up to `jobs` threads, preserving index order.
fn fan_out<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let jobs = jobs.min(n.max(1));
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let slots: Vec<Mutex<Option<Result<T, CliError>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

fn cmd_generate(cfg: &FileConfig, out: &Path) -> Result<(), CliError> {
    let spec = cfg.phantom.to_spec();
    let mut split = generate_cohort(&spec, cfg.generate.n, cfg.seed)?;
    match cfg.generate.domain.as_str() {
        "source" => {}
        "shifted" => split = shift_split(&split, seed::derive(cfg.seed, 0x7000)),
        other => {
            return Err(CliError::Config(format!(
                "unknown domain {other:?} (expected \"source\" or \"shifted\")"
            )))
        }
    }
    save_cohort(&split, out)?;
    println!("split rule: {SPLIT_RULE}");
    println!(
        "split sizes: train {} val {} test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    println!("cohort written to {}", out.display());
    Ok(())
}

fn write_training_outputs(
    out: &Path,
    ck: &sctforge::model::Checkpoint,
    history: &sctforge::training::TrainHistory,
) -> Result<(), CliError> {
    let ck_dir = out.join("checkpoint");
    save_checkpoint(ck, &ck_dir)?;
    write_file(&out.join("history.log"), &(history.log_lines.join("\n") + "\n"))?;
    println!(
        "best epoch {} of {} (val total {:.6}), {:.1}s",
        history.best_epoch,
        history.stopped_epoch,
        history.best_val_total(),
        history.wall_seconds
    );
    println!("checkpoint written to {}", ck_dir.display());
    Ok(())
}

fn cmd_train(cfg: &FileConfig, out: &Path) -> Result<(), CliError> {
    let tc = cfg.to_train_config()?;
    let cohort_dir = require(&cfg.train.cohort, "train.cohort")?;
    let split = load_split(cohort_dir)?;
    println!(
        "training {} / {} on {} subjects (val {})",
        tc.mode.as_str(),
        tc.arch.bottleneck.as_str(),
        split.train.len(),
        split.val.len()
    );
    let (ck, history) = train(&tc, &split)?;
    write_training_outputs(out, &ck, &history)
}

fn cmd_finetune(cfg: &FileConfig, out: &Path) -> Result<(), CliError> {
    let mut tc = cfg.to_train_config()?;
    let ck_dir = require(&cfg.finetune.checkpoint, "finetune.checkpoint")?;
    let cohort_dir = require(&cfg.finetune.cohort, "finetune.cohort")?;
    let source = load_ck(ck_dir)?;
    let split = load_split(cohort_dir)?;
    // The architecture is dictated by the source checkpoint; the config
    // supplies rates, epochs and patience.
    tc.mode = source.model.mode;
    tc.arch = source.model.config.clone();
    tc.patch_size = source.model.patch;
    println!(
        "fine-tuning {} / {} at lr {} on {} subjects (val {})",
        tc.mode.as_str(),
        tc.arch.bottleneck.as_str(),
        tc.finetune_lr,
        split.train.len(),
        split.val.len()
    );
    let (ck, history) = finetune(&source, &tc, &split)?;
    write_training_outputs(out, &ck, &history)
}

fn cmd_synthesize(cfg: &FileConfig, out: &Path, jobs: usize) -> Result<(), CliError> {
    check_split_name(&cfg.synthesize.split)?;
    let ck = load_ck(require(&cfg.synthesize.checkpoint, "synthesize.checkpoint")?)?;
    let split = load_split(require(&cfg.synthesize.cohort, "synthesize.cohort")?)?;
    let cases = select_split(&split, &cfg.synthesize.split)?;
    let patch = ck.model.patch;
    let stride = match cfg.synthesize.stride {
        Some(s) => (s[0], s[1], s[2]),
        None => ((patch.0 / 2).max(1), (patch.1 / 2).max(1), (patch.2 / 2).max(1)),
    };
    let results = fan_out(cases.len(), jobs, |i| {
        let c = cases[i];
        synthesize_sct(&ck, &c.mri_a, &c.mri_b, patch, stride).map_err(CliError::from)
    })?;
    for (case, (sct, skull)) in cases.iter().zip(&results) {
        save_volume(sct, &out.join(format!("{}_sct.cvf", case.subject_id)))?;
        save_mask(skull, &out.join(format!("{}_skull.cvf", case.subject_id)))?;
        let bone: usize = skull.data.iter().map(|&v| v as usize).sum();
        println!("synthesized {} ({bone} bone voxels)", case.subject_id);
    }
    Ok(())
}

fn cmd_evaluate(cfg: &FileConfig, out: &Path, jobs: usize) -> Result<(), CliError> {
    check_split_name(&cfg.evaluate.split)?;
    let ck = load_ck(require(&cfg.evaluate.checkpoint, "evaluate.checkpoint")?)?;
    let split = load_split(require(&cfg.evaluate.cohort, "evaluate.cohort")?)?;
    let cases = select_split(&split, &cfg.evaluate.split)?;
    let records = fan_out(cases.len(), jobs, |i| {
        evaluate_case(&ck, cases[i], cfg.evaluate.use_gt_mask_reference).map_err(CliError::from)
    })?;
    let table = metrics_table(&records);
    write_file(&out.join("metrics.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

const METRICS: [(&str, bool); 8] = [
    ("pearson", true),
    ("spearman", true),
    ("dice", true),
    ("jaccard", true),
    ("ssim", true),
    ("psnr_db", true),
    ("mae_bone_hu", false),
    ("mae_brain_hu", false),
];

type MetricsRows = Vec<(String, [f64; 8])>;

fn read_metrics_tsv(path: &Path) -> Result<MetricsRows, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: empty file", path.display())))?;
    let expected: Vec<&str> = std::iter::once("subject")
        .chain(METRICS.iter().map(|(n, _)| *n))
        .collect();
    if header.split('\t').collect::<Vec<_>>() != expected {
        return Err(CliError::Data(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == "average" {
            continue;
        }
        if fields.len() != 9 {
            return Err(CliError::Data(format!(
                "{}: expected 9 fields, got {}: {line:?}",
                path.display(),
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 8];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|e| {
                CliError::Data(format!("{}: bad number {f:?}: {e}", path.display()))
            })?;
        }
        rows.push((fields[0].to_string(), vals));
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no subject rows",
            path.display()
        )));
    }
    Ok(rows)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn summary_text(single: &[Vec<f64>], multi: &[Vec<f64>]) -> String {
    let mut s = format!("{:<14}{:>22}{:>22}\n", "metric", "single", "multitask");
    for (k, (name, _)) in METRICS.iter().enumerate() {
        let (ms, ss) = mean_sd(&single[k]);
        let (mm, sm) = mean_sd(&multi[k]);
        s.push_str(&format!(
            "{name:<14}{:>22}{:>22}\n",
            format!("{ms:.4} \u{b1} {ss:.4}"),
            format!("{mm:.4} \u{b1} {sm:.4}")
        ));
    }
    s
}

fn cmd_compare(cfg: &FileConfig, out: &Path) -> Result<(), CliError> {
    let single_path = require(&cfg.compare.single, "compare.single")?;
    let multi_path = require(&cfg.compare.multi, "compare.multi")?;
    let single_rows = read_metrics_tsv(single_path)?;
    let multi_rows = read_metrics_tsv(multi_path)?;
    if single_rows.len() != multi_rows.len() {
        return Err(CliError::Data(format!(
            "subject counts differ: {} has {}, {} has {}",
            single_path.display(),
            single_rows.len(),
            multi_path.display(),
            multi_rows.len()
        )));
    }
    let multi_map: HashMap<&str, &[f64; 8]> = multi_rows
        .iter()
        .map(|(s, v)| (s.as_str(), v))
        .collect();
    let mut single_cols: Vec<Vec<f64>> = vec![Vec::new(); 8];
    let mut multi_cols: Vec<Vec<f64>> = vec![Vec::new(); 8];
    for (subject, vals) in &single_rows {
        let mv = multi_map.get(subject.as_str()).ok_or_else(|| {
            CliError::Data(format!(
                "subject {subject} present in {} but missing from {}",
                single_path.display(),
                multi_path.display()
            ))
        })?;
        for k in 0..8 {
            single_cols[k].push(vals[k]);
            multi_cols[k].push(mv[k]);
        }
    }

    let mut reports: Vec<ComparisonReport> = Vec::with_capacity(8);
    for (k, (name, higher_is_better)) in METRICS.iter().enumerate() {
        let rep = match relative_gain(name, &single_cols[k], &multi_cols[k], *higher_is_better) {
            Ok(rep) => rep,
            // All baselines exactly zero: the gain is undefined but the
            // report still gets its row, with the raw means preserved.
            Err(sctforge::stats::StatsError::NoValidPairs) => {
                eprintln!("warning: every single-task {name} value is zero; relative gain undefined");
                ComparisonReport {
                    metric: name.to_string(),
                    mean_single: mean_sd(&single_cols[k]).0,
                    mean_multi: mean_sd(&multi_cols[k]).0,
                    p_value: f64::NAN,
                    relative_gain_pct: f64::NAN,
                    ci_low_pct: f64::NAN,
                    ci_high_pct: f64::NAN,
                    excluded: single_cols[k].len(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        if rep.p_value.is_nan() {
            eprintln!(
                "warning: paired t-test for {name} is degenerate (single subject or zero-variance differences); p-value undefined"
            );
        }
        if rep.excluded > 0 && rep.excluded < single_cols[k].len() {
            eprintln!(
                "warning: {} subjects excluded from the {name} gain (zero single-task baseline)",
                rep.excluded
            );
        }
        reports.push(rep);
    }

    let table = comparison_table(&reports);
    write_file(&out.join("comparison.tsv"), &table)?;
    write_file(&out.join("summary.txt"), &summary_text(&single_cols, &multi_cols))?;
    for (k, (name, _)) in METRICS.iter().enumerate() {
        write_file(
            &out.join(format!("fig_box_{name}.svg")),
            &boxplot_svg(name, &single_cols[k], &multi_cols[k]),
        )?;
    }
    write_file(&out.join("fig_gain.svg"), &gain_dots_svg(&reports))?;
    print!("{table}");
    Ok(())
}
