use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusdom_cli::report::{read_report, Status};
use fusdom_cli::Recipe;
use fusdom_core::trainer::Strategy;

fn fusdom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusdom"))
        .args(args)
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path, extra: &str, cp_extra: &str) -> PathBuf {
    let path = dir.join("config.in.toml");
    let text = format!(
        r#"seeds = [3]
out = "{}"
{extra}

[data.source_sizes]
pretrain = 16
train = 8
dev = 2
test = 4

[data.target_sizes]
pretrain = 16
train = 8
dev = 2
test = 4

[pretrain]
epochs = 1

[cp]
epochs = 1
{cp_extra}

[finetune]
epochs = 2
"#,
        dir.join("run").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn nocp_only_pipeline_has_zero_forgetting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "", "typo = 1")
        .to_string_lossy()
        .into_owned();
    let out = fusdom(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("typo"), "{}", stderr(&out));

    let cfg = tiny_config(dir.path(), "", "")
        .to_string_lossy()
        .into_owned();
    let out = fusdom(&["run", "--config", &cfg, "--arms", "nocp", "--recipe", "r2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_report(&dir.path().join("run/report.json")).unwrap();
    assert_eq!(report.config.arms, [Strategy::NoCp]);
    assert_eq!(report.rows.len(), 2);
    for r in &report.rows {
        assert_eq!((r.recipe, r.status), (Recipe::R2, Status::Ok));
        assert_eq!(r.wer, r.wer_before_cp);
        assert_eq!(r.forgetting_delta, Some(0.0));
        assert!(
            dir.path().join("run").join(&r.checkpoint).exists(),
            "{}",
            r.checkpoint
        );
    }
    assert!(dir.path().join("run/config.toml").exists());
}

#[test]
fn stepwise_commands_match_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "recipes = [\"r1\"]\nmodes = [\"probe\"]", "")
        .to_string_lossy()
        .into_owned();
    let run = fusdom(&["run", "--config", &cfg]);
    assert!(run.status.success(), "{}", stderr(&run));
    let full = dir.path().join("run");
    let report = read_report(&full.join("report.json")).unwrap();

    let steps = dir.path().join("steps");
    let steps_s = steps.to_string_lossy().into_owned();
    let common = ["--config", &cfg, "--out", &steps_s];
    for sub in ["gen-data", "pretrain"] {
        let out = fusdom(&[&[sub][..], &common[..]].concat());
        assert!(out.status.success(), "{sub}: {}", stderr(&out));
    }
    let out = fusdom(&[&["cp", "--arms", "fusdom,vanilla"][..], &common[..]].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    for rel in [
        "seed-3/data/shifted.pretrain.jsonl",
        "seed-3/ckpt/source.fusd",
        "seed-3/ckpt/fusdom@shifted.fusd",
    ] {
        assert_eq!(
            std::fs::read(full.join(rel)).unwrap(),
            std::fs::read(steps.join(rel)).unwrap(),
            "{rel}"
        );
    }
    assert!(!steps.join("seed-3/ckpt/nocp@shifted.fusd").exists());

    let ckpt = steps
        .join("seed-3/ckpt/fusdom@shifted.fusd")
        .to_string_lossy()
        .into_owned();
    let out = fusdom(
        &[
            &[
                "finetune",
                "--checkpoint",
                &ckpt,
                "--domain",
                "shifted",
                "--mode",
                "probe",
            ][..],
            &common[..],
        ]
        .concat(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let model = String::from_utf8(out.stdout).unwrap().trim().to_string();
    let out = fusdom(
        &[
            &["eval", "--model", &model, "--domain", "shifted"][..],
            &common[..],
        ]
        .concat(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let row = report
        .rows
        .iter()
        .find(|r| r.arm == Strategy::FusDom)
        .unwrap();
    assert_eq!(eval["wer"].as_f64(), row.wer);
    assert_eq!(
        std::fs::read(&model).unwrap(),
        std::fs::read(full.join(&row.checkpoint)).unwrap()
    );
}

#[test]
fn summarize_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "recipes = [\"r1\"]\nmodes = [\"e2e\"]", "")
        .to_string_lossy()
        .into_owned();
    assert!(fusdom(&["run", "--config", &cfg, "--arms", "nocp,fusdom"])
        .status
        .success());
    let report = dir
        .path()
        .join("run/report.json")
        .to_string_lossy()
        .into_owned();
    let sum_dir = dir.path().join("sum").to_string_lossy().into_owned();
    let out = fusdom(&["summarize", &report, &report, "--out", &sum_dir]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("nocp fusdom"), "{text}");
    let csv = std::fs::read_to_string(dir.path().join("sum/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().contains(",2,0,"), "{csv}");

    assert_eq!(
        fusdom(&["summarize", "/nonexistent.json"]).status.code(),
        Some(1)
    );
    assert_eq!(fusdom(&["run", "--recipe", "r9"]).status.code(), Some(2));
    assert_eq!(fusdom(&["run", "--arms", "nope"]).status.code(), Some(2));
    let missing = fusdom(&["run", "--config", "/nonexistent.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("nonexistent.toml"));
}

#[test]
fn failing_stage_is_recorded_and_exit_is_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        dir.path(),
        "recipes = [\"r1\"]\nmodes = [\"e2e\"]",
        "lr = 1e300",
    )
    .to_string_lossy()
    .into_owned();
    let out = fusdom(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let report = read_report(&dir.path().join("run/report.json")).unwrap();
    assert_eq!(report.failures, 2);
    for r in &report.rows {
        if r.arm == Strategy::NoCp {
            assert_eq!(r.status, Status::Ok);
        } else {
            assert_eq!(r.status, Status::Failed);
            assert!(r.reason.contains("aborted"), "{}", r.reason);
            assert_eq!(r.wer, None);
        }
    }
}
