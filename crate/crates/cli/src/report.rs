//! Experiment reports (CSV table plus JSON document) and their aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use fusdom_core::downstream::{EvalResult, FinetuneMode};
use fusdom_core::trainer::Strategy;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Recipe};
use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// The toy vocabulary has no word level, so "wer" columns hold token
/// error rates.
pub const METRIC: &str = "token_error_rate";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Row {
    pub recipe: Recipe,
    pub arm: Strategy,
    pub seed: u64,
    /// CP domains in the order they were applied, joined by `>`.
    pub cp_order: String,
    pub finetune_domain: String,
    pub eval_domain: String,
    pub mode: FinetuneMode,
    pub status: Status,
    pub wer: Option<f64>,
    pub substitutions: Option<usize>,
    pub insertions: Option<usize>,
    pub deletions: Option<usize>,
    pub n_ref_tokens: Option<usize>,
    /// Mean pre-text loss of the last CP epoch; empty for No-CP.
    pub pretext_final_loss: Option<f64>,
    /// Source WER of the pre-trained model before any CP (r2 rows).
    pub wer_before_cp: Option<f64>,
    pub forgetting_delta: Option<f64>,
    /// Fine-tuned model file, relative to the run directory.
    pub checkpoint: String,
    pub reason: String,
    pub wall_clock_s: f64,
}

impl Row {
    /// A row for fine-tuning and evaluating on `domain`, not yet filled in.
    pub fn pending(
        recipe: Recipe,
        arm: Strategy,
        seed: u64,
        order: &[String],
        domain: &str,
        mode: FinetuneMode,
    ) -> Self {
        Self {
            recipe,
            arm,
            seed,
            cp_order: order.join(">"),
            finetune_domain: domain.into(),
            eval_domain: domain.into(),
            mode,
            status: Status::Failed,
            wer: None,
            substitutions: None,
            insertions: None,
            deletions: None,
            n_ref_tokens: None,
            pretext_final_loss: None,
            wer_before_cp: None,
            forgetting_delta: None,
            checkpoint: String::new(),
            reason: String::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn set_eval(&mut self, r: &EvalResult) {
        self.status = Status::Ok;
        self.wer = Some(r.wer);
        self.substitutions = Some(r.substitutions);
        self.insertions = Some(r.insertions);
        self.deletions = Some(r.deletions);
        self.n_ref_tokens = Some(r.n_ref_tokens);
    }

    pub fn fail(&mut self, reason: impl Into<String>) {
        self.status = Status::Failed;
        self.wer = None;
        self.substitutions = None;
        self.insertions = None;
        self.deletions = None;
        self.n_ref_tokens = None;
        self.forgetting_delta = None;
        self.reason = reason.into();
    }

    fn sort_key(&self) -> impl Ord + '_ {
        (
            self.recipe,
            &self.cp_order,
            self.arm,
            self.seed,
            self.mode.as_str(),
            &self.eval_domain,
        )
    }
}

/// The CSV view of a row: everything except timing, so that reruns
/// produce byte-identical tables.
#[derive(Serialize)]
struct CsvRow<'a> {
    recipe: Recipe,
    arm: Strategy,
    seed: u64,
    cp_order: &'a str,
    finetune_domain: &'a str,
    eval_domain: &'a str,
    mode: FinetuneMode,
    status: Status,
    wer: Option<f64>,
    substitutions: Option<usize>,
    insertions: Option<usize>,
    deletions: Option<usize>,
    n_ref_tokens: Option<usize>,
    pretext_final_loss: Option<f64>,
    wer_before_cp: Option<f64>,
    forgetting_delta: Option<f64>,
    checkpoint: &'a str,
    reason: &'a str,
}

impl<'a> From<&'a Row> for CsvRow<'a> {
    fn from(r: &'a Row) -> Self {
        Self {
            recipe: r.recipe,
            arm: r.arm,
            seed: r.seed,
            cp_order: &r.cp_order,
            finetune_domain: &r.finetune_domain,
            eval_domain: &r.eval_domain,
            mode: r.mode,
            status: r.status,
            wer: r.wer,
            substitutions: r.substitutions,
            insertions: r.insertions,
            deletions: r.deletions,
            n_ref_tokens: r.n_ref_tokens,
            pretext_final_loss: r.pretext_final_loss,
            wer_before_cp: r.wer_before_cp,
            forgetting_delta: r.forgetting_delta,
            checkpoint: &r.checkpoint,
            reason: &r.reason,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub recipe: Recipe,
    pub cp_order: String,
    pub mode: FinetuneMode,
    pub arm: Strategy,
    pub n: usize,
    pub failed: usize,
    pub mean_wer: Option<f64>,
    pub min_wer: Option<f64>,
    pub max_wer: Option<f64>,
    pub mean_forgetting_delta: Option<f64>,
}

/// `baseline` minus `candidate`: positive values mean the candidate has
/// the lower error rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub recipe: Recipe,
    pub cp_order: String,
    pub mode: FinetuneMode,
    pub baseline: Strategy,
    pub candidate: Strategy,
    pub baseline_mean_wer: f64,
    pub candidate_mean_wer: f64,
    pub absolute: f64,
    pub relative_pct: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub arms: Vec<ArmStats>,
    pub pairs: Vec<PairDelta>,
}

/// Absolute and relative (percent) improvement of `ours` over `baseline`.
/// The relative value is undefined for a zero baseline unless both are
/// equal.
pub fn improvement(baseline: f64, ours: f64) -> (f64, Option<f64>) {
    let abs = baseline - ours;
    let rel = if baseline != 0.0 {
        Some(abs / baseline * 100.0)
    } else if abs == 0.0 {
        Some(0.0)
    } else {
        None
    };
    (abs, rel)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn summarize_rows(rows: &[Row]) -> Summary {
    type Key = (Recipe, String, &'static str, Strategy);
    let mut groups: BTreeMap<Key, (FinetuneMode, Vec<&Row>)> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.recipe, r.cp_order.clone(), r.mode.as_str(), r.arm))
            .or_insert_with(|| (r.mode, Vec::new()))
            .1
            .push(r);
    }

    let mut summary = Summary::default();
    for ((recipe, cp_order, _, arm), (mode, group)) in &groups {
        let wers: Vec<f64> = group.iter().filter_map(|r| r.wer).collect();
        let deltas: Vec<f64> = group.iter().filter_map(|r| r.forgetting_delta).collect();
        summary.arms.push(ArmStats {
            recipe: *recipe,
            cp_order: cp_order.clone(),
            mode: *mode,
            arm: *arm,
            n: group.len(),
            failed: group.iter().filter(|r| r.status == Status::Failed).count(),
            mean_wer: mean(&wers),
            min_wer: wers.iter().copied().reduce(f64::min),
            max_wer: wers.iter().copied().reduce(f64::max),
            mean_forgetting_delta: mean(&deltas),
        });
    }

    for (i, a) in summary.arms.iter().enumerate() {
        for b in &summary.arms[i + 1..] {
            if (a.recipe, &a.cp_order, a.mode) != (b.recipe, &b.cp_order, b.mode) {
                continue;
            }
            let (Some(base), Some(cand)) = (a.mean_wer, b.mean_wer) else {
                continue;
            };
            let (absolute, relative_pct) = improvement(base, cand);
            summary.pairs.push(PairDelta {
                recipe: a.recipe,
                cp_order: a.cp_order.clone(),
                mode: a.mode,
                baseline: a.arm,
                candidate: b.arm,
                baseline_mean_wer: base,
                candidate_mean_wer: cand,
                absolute,
                relative_pct,
            });
        }
    }
    summary
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub metric: String,
    pub config: ExperimentConfig,
    pub rows: Vec<Row>,
    pub summary: Summary,
    pub failures: usize,
}

impl ExperimentReport {
    pub fn new(config: ExperimentConfig, mut rows: Vec<Row>) -> Self {
        rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let summary = summarize_rows(&rows);
        let failures = rows.iter().filter(|r| r.status == Status::Failed).count();
        Self {
            schema_version: SCHEMA_VERSION,
            metric: METRIC.into(),
            config,
            rows,
            summary,
            failures,
        }
    }

    pub fn rows_for(&self, recipe: Recipe) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.recipe == recipe)
    }
}

fn csv_bytes<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Report(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Report(e.to_string()))
}

pub fn report_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    csv_bytes(report.rows.iter().map(CsvRow::from))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn to_json<S: Serialize>(value: &S) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes to JSON");
    out.push(b'\n');
    out
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    write(&dir.join("report.csv"), &report_csv(report)?)?;
    write(&dir.join("report.json"), &to_json(report))
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Report(format!("{}: {e}", path.display())))?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CliError::Report(format!("{}: missing schema_version", path.display())))?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(CliError::SchemaVersion {
            path: path.display().to_string(),
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub schema_version: u32,
    pub metric: String,
    pub sources: Vec<String>,
    pub summary: Summary,
}

/// Aggregates the rows of one or more report documents.
pub fn summarize(paths: &[impl AsRef<Path>]) -> Result<SummaryDocument> {
    if paths.is_empty() {
        return Err(CliError::Report(
            "summarize needs at least one report".into(),
        ));
    }
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_report(p.as_ref())?.rows);
    }
    Ok(SummaryDocument {
        schema_version: SCHEMA_VERSION,
        metric: METRIC.into(),
        sources: paths
            .iter()
            .map(|p| p.as_ref().display().to_string())
            .collect(),
        summary: summarize_rows(&rows),
    })
}

/// Writes `summary.csv` (per-arm statistics), `summary_pairs.csv` and
/// `summary.json` into `dir`.
pub fn write_summary(doc: &SummaryDocument, dir: &Path) -> Result<()> {
    write(&dir.join("summary.csv"), &csv_bytes(&doc.summary.arms)?)?;
    write(
        &dir.join("summary_pairs.csv"),
        &csv_bytes(&doc.summary.pairs)?,
    )?;
    write(&dir.join("summary.json"), &to_json(doc))
}

/// Plain-text rendering of a summary for the terminal.
pub fn render_summary(summary: &Summary) -> String {
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut out = String::from("recipe order mode arm n failed mean min max mean_delta\n");
    for a in &summary.arms {
        out += &format!(
            "{} {} {} {} {} {} {} {} {} {}\n",
            a.recipe,
            a.cp_order,
            a.mode,
            a.arm,
            a.n,
            a.failed,
            fmt(a.mean_wer),
            fmt(a.min_wer),
            fmt(a.max_wer),
            fmt(a.mean_forgetting_delta)
        );
    }
    out += "recipe order mode baseline candidate absolute relative_pct\n";
    for p in &summary.pairs {
        out += &format!(
            "{} {} {} {} {} {:.4} {}\n",
            p.recipe,
            p.cp_order,
            p.mode,
            p.baseline,
            p.candidate,
            p.absolute,
            p.relative_pct
                .map_or("-".to_string(), |v| format!("{v:.3}%"))
        );
    }
    out
}
