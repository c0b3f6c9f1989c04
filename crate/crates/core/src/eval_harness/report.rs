//! Report types and the files written for a run or sweep.
//!
//! `report.json` holds the full report at full precision. `tables.csv` has one
//! row per sweep point (a single row for a plain run) and `plotdata.csv` has
//! `x,hm` pairs; both CSVs print floats with 6 significant digits.

use super::pipeline::{RunOutput, SweepAxis};
use super::{population_stats, SplitResult};
use crate::error::Result;
use crate::tensor::write_archive_file;
use crate::trainer::{Mode, PhaseMark};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub harmonic_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideStatus {
    Trained,
    Untouched,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideAudit {
    pub status: SideStatus,
    pub unchanged: bool,
    pub initial_checksum: String,
    pub final_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAudit {
    pub prompt_length: usize,
    pub language: SideAudit,
    pub vision: SideAudit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneAudit {
    pub unchanged: bool,
    pub checksum_before: String,
    pub checksum_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
    pub zero_shot_base: f64,
    pub zero_shot_novel: f64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
}

/// Column means and population standard deviations over the sweep rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean_base: f64,
    pub mean_novel: f64,
    pub mean_hm: f64,
    pub std_base: f64,
    pub std_novel: f64,
    pub std_hm: f64,
}

impl Aggregate {
    pub fn of_rows(rows: &[SweepRow]) -> Result<Self> {
        let col = |f: fn(&SweepRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let b = population_stats(&col(|r| r.base))?;
        let n = population_stats(&col(|r| r.novel))?;
        let h = population_stats(&col(|r| r.hm))?;
        Ok(Self {
            n: rows.len(),
            mean_base: b.mean,
            mean_novel: n.mean,
            mean_hm: h.mean,
            std_base: b.std,
            std_novel: n.std,
            std_hm: h.std,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub aggregate: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub harmonic_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: Vec<RunSummary>,
    pub mean_base: f64,
    pub mean_novel: f64,
    pub mean_hm: f64,
}

/// Accuracies are in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub mode: Mode,
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub harmonic_mean: f64,
    pub zero_shot: Baseline,
    pub base: SplitResult,
    pub novel: SplitResult,
    pub prompts: PromptAudit,
    pub backbone: BackboneAudit,
    pub steps: u64,
    pub phases: Vec<PhaseMark>,
    pub final_train_ce: Option<f64>,
    pub std_convention: String,
    pub sweep: Option<SweepTable>,
    pub repeats: Option<RepeatSummary>,
}

/// `x` with 6 significant digits in plain decimal notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn csv_rows(report: &EvalReport) -> (String, Vec<[String; 7]>) {
    match &report.sweep {
        Some(t) => (
            t.axis.name().to_string(),
            t.rows
                .iter()
                .map(|r| {
                    [
                        t.axis.name().to_string(),
                        sig6(r.value),
                        sig6(r.base),
                        sig6(r.novel),
                        sig6(r.hm),
                        sig6(r.zero_shot_base),
                        sig6(r.zero_shot_novel),
                    ]
                })
                .collect(),
        ),
        None => (
            "run".into(),
            vec![[
                "run".into(),
                "0".into(),
                sig6(report.base_accuracy),
                sig6(report.novel_accuracy),
                sig6(report.harmonic_mean),
                sig6(report.zero_shot.base_accuracy),
                sig6(report.zero_shot.novel_accuracy),
            ]],
        ),
    }
}

/// Writes `report.json`, `tables.csv` and `plotdata.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;

    let (_, rows) = csv_rows(report);
    let mut w = csv::Writer::from_path(dir.join("tables.csv"))?;
    w.write_record(["axis", "value", "base", "novel", "hm", "zero_shot_base", "zero_shot_novel"])?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("plotdata.csv"))?;
    w.write_record(["x", "hm"])?;
    for r in &rows {
        w.write_record([&r[1], &r[4]])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Report files plus config, prompt checkpoints at each stage boundary, the
/// step log, the run state and the frozen backbone.
pub fn write_run(out: &RunOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    emit_report(&out.report, dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&out.config)?)?;
    let mut state = out.state.clone();
    for (name, pack) in [
        ("prompts_init.apnt", &out.initial_prompts),
        ("prompts_stage1.apnt", &out.stage1_prompts),
        ("prompts_stage2.apnt", &out.final_prompts),
    ] {
        write_archive_file(dir.join(name), &pack.named_tensors())?;
        state.checkpoints.push(name.into());
    }
    write_archive_file(dir.join("backbone.apnt"), &out.prepared.weights.named_tensors())?;
    std::fs::write(dir.join("train_log.jsonl"), state.to_jsonl())?;
    std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
    let meta = serde_json::json!({ "runtime_seconds": out.runtime_seconds });
    std::fs::write(dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(93.75), "93.7500");
        assert_eq!(sig6(0.00123456789), "0.00123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(-2.5), "-2.50000");
        assert_eq!(sig6(0.0), "0");
    }
}
