use fusdom_cli::config::{ExperimentConfig, Recipe};
use fusdom_cli::report::{
    improvement, read_report, report_csv, summarize, summarize_rows, write_report, write_summary,
    ExperimentReport, Row, Status, METRIC,
};
use fusdom_cli::{CliError, SCHEMA_VERSION};
use fusdom_core::downstream::{EvalResult, FinetuneMode};
use fusdom_core::trainer::Strategy;
use proptest::prelude::*;

fn row(recipe: Recipe, arm: Strategy, seed: u64, wer: f64) -> Row {
    let mut r = Row::pending(
        recipe,
        arm,
        seed,
        &["shifted".into()],
        "shifted",
        FinetuneMode::E2e,
    );
    r.set_eval(&EvalResult::from_counts(0, 0, 0, 10));
    r.wer = Some(wer);
    r.wall_clock_s = 1.5 + seed as f64;
    r
}

#[test]
fn paper_style_relative_improvement() {
    let (abs, rel) = improvement(31.6, 29.9);
    assert!((abs - 1.7).abs() < 1e-9);
    assert!((rel.unwrap() - 5.379).abs() < 1e-3, "{rel:?}");
    assert_eq!(improvement(0.4, 0.4), (0.0, Some(0.0)));
    assert_eq!(improvement(0.0, 0.0), (0.0, Some(0.0)));
    assert_eq!(improvement(0.0, 0.1).1, None);
}

#[test]
fn two_row_fixture_mean() {
    let rows = [
        row(Recipe::R1, Strategy::FusDom, 0, 0.25),
        row(Recipe::R1, Strategy::FusDom, 1, 0.5),
    ];
    let s = summarize_rows(&rows);
    assert_eq!(s.arms.len(), 1);
    let a = &s.arms[0];
    assert_eq!(a.mean_wer, Some(0.375));
    assert_eq!(
        (a.min_wer, a.max_wer, a.n, a.failed),
        (Some(0.25), Some(0.5), 2, 0)
    );
    assert!(s.pairs.is_empty());
}

#[test]
fn pairwise_deltas_follow_arm_order() {
    let rows = [
        row(Recipe::R1, Strategy::FusDom, 0, 0.2),
        row(Recipe::R1, Strategy::NoCp, 0, 0.4),
        row(Recipe::R1, Strategy::VanillaCp, 0, 0.25),
        row(Recipe::R2, Strategy::NoCp, 0, 0.1),
    ];
    let s = summarize_rows(&rows);
    let pairs: Vec<_> = s
        .pairs
        .iter()
        .map(|p| (p.recipe, p.baseline, p.candidate))
        .collect();
    assert_eq!(
        pairs,
        [
            (Recipe::R1, Strategy::NoCp, Strategy::VanillaCp),
            (Recipe::R1, Strategy::NoCp, Strategy::FusDom),
            (Recipe::R1, Strategy::VanillaCp, Strategy::FusDom),
        ]
    );
    let p = &s.pairs[1];
    assert!((p.absolute - 0.2).abs() < 1e-15);
    assert!((p.relative_pct.unwrap() - 50.0).abs() < 1e-12);
}

#[test]
fn failed_rows_are_counted_but_not_averaged() {
    let mut bad = row(Recipe::R1, Strategy::FusDom, 1, 0.9);
    bad.fail("boom");
    let s = summarize_rows(&[row(Recipe::R1, Strategy::FusDom, 0, 0.3), bad]);
    assert_eq!(
        (s.arms[0].n, s.arms[0].failed, s.arms[0].mean_wer),
        (2, 1, Some(0.3))
    );
}

#[test]
fn single_report_summary_equals_its_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut r2 = row(Recipe::R2, Strategy::VanillaCp, 0, 0.3);
    r2.forgetting_delta = Some(0.05);
    let report = ExperimentReport::new(
        ExperimentConfig::default(),
        vec![
            r2,
            row(Recipe::R1, Strategy::NoCp, 0, 0.4),
            row(Recipe::R1, Strategy::NoCp, 1, 0.2),
        ],
    );
    assert_eq!(report.rows[0].recipe, Recipe::R1);
    write_report(&report, dir.path()).unwrap();
    let loaded = read_report(&dir.path().join("report.json")).unwrap();
    assert_eq!(loaded, report);
    assert_eq!(loaded.metric, METRIC);

    let doc = summarize(&[dir.path().join("report.json")]).unwrap();
    assert_eq!(doc.summary, report.summary);
    let r1 = &doc.summary.arms[0];
    assert_eq!((r1.mean_wer, r1.n), (Some(0.30000000000000004), 2));
    assert_eq!(doc.summary.arms[1].mean_forgetting_delta, Some(0.05));

    write_summary(&doc, dir.path()).unwrap();
    for f in ["summary.csv", "summary_pairs.csv", "summary.json"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn csv_omits_timing_and_keeps_rows() {
    let report = ExperimentReport::new(
        ExperimentConfig::default(),
        vec![
            row(Recipe::R1, Strategy::NoCp, 0, 0.4),
            row(Recipe::R1, Strategy::NoCp, 1, 0.2),
        ],
    );
    let text = String::from_utf8(report_csv(&report).unwrap()).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(
        header.starts_with("recipe,arm,seed,cp_order,finetune_domain,eval_domain,mode,status,wer")
    );
    assert!(!header.contains("wall_clock"));
    assert_eq!(lines.count(), 2);

    let mut slow = report.clone();
    for r in &mut slow.rows {
        r.wall_clock_s *= 10.0;
    }
    assert_eq!(report_csv(&slow).unwrap(), report_csv(&report).unwrap());
}

#[test]
fn schema_version_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let report = ExperimentReport::new(
        ExperimentConfig::default(),
        vec![row(Recipe::R1, Strategy::NoCp, 0, 0.4)],
    );
    write_report(&report, dir.path()).unwrap();
    let path = dir.path().join("report.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let old = format!("\"schema_version\": {SCHEMA_VERSION}");
    assert!(text.contains(&old));
    std::fs::write(&path, text.replace(&old, "\"schema_version\": 99")).unwrap();
    assert!(matches!(
        summarize(&[&path]),
        Err(CliError::SchemaVersion { found: 99, .. })
    ));
    let empty: [&std::path::Path; 0] = [];
    assert!(summarize(&empty).is_err());
}

#[test]
fn status_of_evaluated_rows() {
    let r = row(Recipe::R1, Strategy::NoCp, 0, 0.4);
    assert_eq!(r.status, Status::Ok);
    assert_eq!(
        Row::pending(
            Recipe::R1,
            Strategy::NoCp,
            0,
            &[],
            "source",
            FinetuneMode::Probe
        )
        .status,
        Status::Failed
    );
}

proptest! {
    #[test]
    fn summary_mean_lies_between_min_and_max(wers in proptest::collection::vec(0.0f64..3.0, 1..20)) {
        let rows: Vec<Row> = wers.iter().enumerate().map(|(i, &w)| row(Recipe::R3, Strategy::FusDom, i as u64, w)).collect();
        let a = &summarize_rows(&rows).arms[0];
        let (mean, lo, hi) = (a.mean_wer.unwrap(), a.min_wer.unwrap(), a.max_wer.unwrap());
        prop_assert!(lo - 1e-12 <= mean && mean <= hi + 1e-12);
        prop_assert_eq!(a.n, wers.len());
    }

    #[test]
    fn improvement_is_antisymmetric_in_absolute_terms(a in 0.01f64..5.0, b in 0.01f64..5.0) {
        let (ab, _) = improvement(a, b);
        let (ba, _) = improvement(b, a);
        prop_assert_eq!(ab, -ba);
    }
}
