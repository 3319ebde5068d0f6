//! End-to-end tests of the installed binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sctforge");

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sctforge-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_PHANTOM: &str = "
[phantom]
dims = [24, 24, 24]
outer_radius_frac = 0.7
";

const TINY_ARCH: &str = "
[arch]
levels = 2
base_width = 4
vss3d_blocks = 1
scan_directions = 2
state_dim = 4
tf_layers = 1
tf_heads = 2
";

#[test]
fn generate_prints_split_and_is_idempotent() {
    let dir = scratch("generate");
    fs::write(
        dir.join("cfg.toml"),
        format!("seed = 7\n{TINY_PHANTOM}\n[generate]\nn = 12\n"),
    )
    .unwrap();

    let out = run(&["generate", "--config", "cfg.toml", "--out", "cohort"], &dir);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("train 9 val 2 test 1"), "{text}");
    assert!(text.contains("val = ceil(n/10)"), "{text}");
    let manifest = fs::read_to_string(dir.join("cohort/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 12);

    // Rerun without --overwrite: refusal with the data exit code.
    let out = run(&["generate", "--config", "cfg.toml", "--out", "cohort"], &dir);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("--overwrite"));

    // Rerun with --overwrite: byte-identical manifest.
    let out = run(
        &["generate", "--config", "cfg.toml", "--out", "cohort", "--overwrite"],
        &dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read_to_string(dir.join("cohort/manifest.txt")).unwrap(),
        manifest
    );
}

#[test]
fn unwritable_output_path_fails_cleanly() {
    let dir = scratch("unwritable");
    fs::write(dir.join("blocker"), "plain file").unwrap();
    let out = run(&["generate", "--out", "blocker/sub"], &dir);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("output directory"), "{}", stderr(&out));
}

#[test]
fn config_errors_use_their_own_exit_code() {
    let dir = scratch("config-errors");
    fs::write(dir.join("unknown.toml"), "[generate]\nnn = 12\n").unwrap();
    let out = run(&["generate", "--config", "unknown.toml", "--out", "o1"], &dir);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    fs::write(
        dir.join("badmode.toml"),
        format!("{TINY_PHANTOM}\n[train]\ncohort = \"missing\"\nmode = \"both\"\n"),
    )
    .unwrap();
    let out = run(&["train", "--config", "badmode.toml", "--out", "o2"], &dir);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = run(&["train", "--out", "o3"], &dir);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("train.cohort"), "{}", stderr(&out));
}

#[test]
fn missing_artifacts_are_named() {
    let dir = scratch("missing");
    fs::write(
        dir.join("cfg.toml"),
        "[evaluate]\ncheckpoint = \"nowhere/checkpoint\"\ncohort = \"nowhere/cohort\"\n",
    )
    .unwrap();
    let out = run(&["evaluate", "--config", "cfg.toml", "--out", "o"], &dir);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn full_pipeline_runs_and_compares() {
    let dir = scratch("pipeline");
    let base = format!(
        "seed = 3\n{TINY_PHANTOM}{TINY_ARCH}
[generate]
n = 10

[train]
cohort = \"cohort\"
patch = [8, 8, 8]
patches_per_subject = 2
max_epochs = 1
"
    );
    fs::write(dir.join("multi.toml"), format!("{base}mode = \"multitask\"\n")).unwrap();
    fs::write(dir.join("single.toml"), format!("{base}mode = \"single_task\"\n")).unwrap();

    let out = run(&["generate", "--config", "multi.toml", "--out", "cohort"], &dir);
    assert!(out.status.success(), "{}", stderr(&out));

    for (cfg, outdir) in [("multi.toml", "t_multi"), ("single.toml", "t_single")] {
        let out = run(&["train", "--config", cfg, "--out", outdir], &dir);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(dir.join(outdir).join("checkpoint/params.bin").exists());
        assert!(dir.join(outdir).join("history.log").exists());
        assert!(dir.join(outdir).join("config_resolved.toml").exists());
    }

    for (ck, outdir) in [("t_multi", "e_multi"), ("t_single", "e_single")] {
        fs::write(
            dir.join("eval.toml"),
            format!("[evaluate]\ncheckpoint = \"{ck}/checkpoint\"\ncohort = \"cohort\"\n"),
        )
        .unwrap();
        let out = run(
            &["evaluate", "--config", "eval.toml", "--out", outdir, "--jobs", "2"],
            &dir,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        let table = fs::read_to_string(dir.join(outdir).join("metrics.tsv")).unwrap();
        assert!(table.starts_with("subject\tpearson"));
        assert!(table.contains("average"));
    }

    fs::write(
        dir.join("cmp.toml"),
        "[compare]\nsingle = \"e_single/metrics.tsv\"\nmulti = \"e_multi/metrics.tsv\"\n",
    )
    .unwrap();
    let out = run(&["compare", "--config", "cmp.toml", "--out", "cmp"], &dir);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(dir.join("cmp/comparison.tsv")).unwrap();
    assert_eq!(table.lines().count(), 9); // header + one row per metric
    assert!(table.starts_with("metric\tmean_single\tmean_multi\tgain_pct"));
    for metric in [
        "pearson", "spearman", "dice", "jaccard", "ssim", "psnr_db", "mae_bone_hu",
        "mae_brain_hu",
    ] {
        assert!(dir.join(format!("cmp/fig_box_{metric}.svg")).exists());
    }
    assert!(dir.join("cmp/fig_gain.svg").exists());
    assert!(dir.join("cmp/summary.txt").exists());

    // Comparing a file with itself: degenerate tests surface as warnings,
    // gains are zero, and the exit is still clean.
    fs::write(
        dir.join("self.toml"),
        "[compare]\nsingle = \"e_multi/metrics.tsv\"\nmulti = \"e_multi/metrics.tsv\"\n",
    )
    .unwrap();
    let out = run(&["compare", "--config", "self.toml", "--out", "cmp_self"], &dir);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("degenerate"), "{}", stderr(&out));
    let table = fs::read_to_string(dir.join("cmp_self/comparison.tsv")).unwrap();
    for line in table.lines().skip(1) {
        let gain: &str = line.split('\t').nth(3).unwrap();
        assert!(gain == "0.000" || gain == "-0.000" || gain == "NaN", "{line}");
    }

    // Synthesis writes one volume and mask pair per test subject.
    fs::write(
        dir.join("synth.toml"),
        "[synthesize]\ncheckpoint = \"t_multi/checkpoint\"\ncohort = \"cohort\"\n",
    )
    .unwrap();
    let out = run(&["synthesize", "--config", "synth.toml", "--out", "synth"], &dir);
    assert!(out.status.success(), "{}", stderr(&out));
    let n_sct = fs::read_dir(dir.join("synth"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with("_sct.cvf")
        })
        .count();
    assert_eq!(n_sct, 1);
}

#[test]
fn finetune_warm_starts_from_checkpoint() {
    let dir = scratch("finetune");
    let base = format!(
        "seed = 5\n{TINY_PHANTOM}{TINY_ARCH}
[generate]
n = 10

[train]
cohort = \"src\"
patch = [8, 8, 8]
patches_per_subject = 2
max_epochs = 1

[finetune]
checkpoint = \"t_src/checkpoint\"
cohort = \"tgt\"
"
    );
    fs::write(dir.join("cfg.toml"), &base).unwrap();
    fs::write(
        dir.join("tgt.toml"),
        format!("seed = 6\n{TINY_PHANTOM}\n[generate]\nn = 10\ndomain = \"shifted\"\n"),
    )
    .unwrap();

    for (cfg, out_dir) in [("cfg.toml", "src"), ("tgt.toml", "tgt")] {
        let out = run(&["generate", "--config", cfg, "--out", out_dir], &dir);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let manifest = fs::read_to_string(dir.join("tgt/manifest.txt")).unwrap();
    assert!(manifest.contains("shifted"), "{manifest}");

    let out = run(&["train", "--config", "cfg.toml", "--out", "t_src"], &dir);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&["finetune", "--config", "cfg.toml", "--out", "t_ft"], &dir);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("fine-tuning"), "{}", stdout(&out));
    assert!(dir.join("t_ft/checkpoint/params.bin").exists());
    let log = fs::read_to_string(dir.join("t_ft/history.log")).unwrap();
    assert!(log.starts_with("initial val_total"), "{log}");
}
