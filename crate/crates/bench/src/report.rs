//! Serializable experiment reports: JSON for the full structure, CSV for
//! the headline aggregates, and a timing-stripped form for byte-for-byte
//! reproducibility checks.

use std::path::Path;

use lime_core::lime::LimeConfig;
use lime_core::metrics::{ArmStats, ChairScore, MetricValue, PopeLabel, PopeScore};
use lime_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, SplitKind};
use crate::harness::{AblationGrid, OverheadRow};
use crate::{BenchError, Result};

/// One QA example's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeRecord {
    pub scene_id: u64,
    pub split: SplitKind,
    pub query_symbol: usize,
    pub label: PopeLabel,
    /// First answer token found in the generation, if any.
    pub predicted: Option<PopeLabel>,
    pub generated: Vec<usize>,
    pub spatial_grounding: MetricValue,
    pub modality_reliance: MetricValue,
    /// Decoding steps taken (terminator included).
    pub tokens: u64,
    pub seconds: f64,
}

/// Aggregate over one split, recomputable from its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAggregate {
    pub split: SplitKind,
    pub examples: usize,
    pub score: PopeScore,
    pub mean_spatial_grounding: Option<f64>,
    pub undefined_spatial_grounding: usize,
    pub mean_modality_reliance: Option<f64>,
    pub undefined_modality_reliance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeSection {
    pub records: Vec<PopeRecord>,
    pub aggregates: Vec<SplitAggregate>,
    pub arm: ArmStats,
}

/// One captioned scene's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: u64,
    pub generated: Vec<usize>,
    /// Distinct object symbols mentioned, ascending.
    pub mentioned: Vec<usize>,
    /// The scene's true inventory, ascending.
    pub truth: Vec<usize>,
    pub tokens: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSection {
    pub records: Vec<CaptionRecord>,
    pub score: ChairScore,
    pub arm: ArmStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub examples: usize,
    pub epoch_losses: Vec<f64>,
    /// Greedy first-answer-token accuracy on the held-out random split.
    pub eval_accuracy: f64,
    pub model_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSection {
    pub scene_id: u64,
    /// Queried symbol for QA prompts; absent for listing prompts.
    pub query_symbol: Option<usize>,
    pub generated: Vec<usize>,
    pub hit_end: bool,
    pub steps: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadSection {
    pub rows: Vec<OverheadRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReportBody {
    Train(TrainSection),
    Decode(DecodeSection),
    Pope(PopeSection),
    Caption(CaptionSection),
    Ablation(AblationGrid),
    Overhead(OverheadSection),
}

/// Everything needed to rerun the experiment that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub method: String,
    pub lime: Option<LimeConfig>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub meta: ReportMeta,
    pub body: ReportBody,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| BenchError::Serde(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(json: &str) -> Result<BenchmarkReport> {
        serde_json::from_str(json).map_err(|e| BenchError::Serde(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))
    }

    /// Zero every wall-clock field, leaving all deterministic content
    /// (including byte-count fields) untouched. Two runs of the same
    /// experiment agree exactly after this.
    pub fn strip_timing(&mut self) {
        fn arm(a: &mut ArmStats) {
            a.total_seconds = 0.0;
            a.tokens_per_second = 0.0;
        }
        match &mut self.body {
            ReportBody::Train(_) => {}
            ReportBody::Decode(d) => d.seconds = 0.0,
            ReportBody::Pope(p) => {
                arm(&mut p.arm);
                for r in &mut p.records {
                    r.seconds = 0.0;
                }
            }
            ReportBody::Caption(c) => {
                arm(&mut c.arm);
                for r in &mut c.records {
                    r.seconds = 0.0;
                }
            }
            ReportBody::Ablation(_) => {}
            ReportBody::Overhead(o) => {
                for row in &mut o.rows {
                    arm(&mut row.report.vanilla);
                    arm(&mut row.report.enhanced);
                    row.report.slowdown = 0.0;
                    for s in &mut row.report.per_run_slowdown {
                        *s = 0.0;
                    }
                }
            }
        }
    }

    /// Flat CSV view of the aggregates (never the per-example records).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        match &self.body {
            ReportBody::Train(t) => {
                w.write_record(["epoch", "loss"]).map_err(csv_err)?;
                for (i, loss) in t.epoch_losses.iter().enumerate() {
                    w.write_record([(i + 1).to_string(), loss.to_string()])
                        .map_err(csv_err)?;
                }
            }
            ReportBody::Decode(d) => {
                w.write_record(["position", "token"]).map_err(csv_err)?;
                for (i, t) in d.generated.iter().enumerate() {
                    w.write_record([i.to_string(), t.to_string()])
                        .map_err(csv_err)?;
                }
            }
            ReportBody::Pope(p) => {
                w.write_record([
                    "method",
                    "split",
                    "examples",
                    "accuracy",
                    "f1",
                    "true_positive",
                    "false_positive",
                    "true_negative",
                    "false_negative",
                    "unparseable",
                    "mean_spatial_grounding",
                    "undefined_spatial_grounding",
                    "mean_modality_reliance",
                    "undefined_modality_reliance",
                    "tokens_per_second",
                ])
                .map_err(csv_err)?;
                for a in &p.aggregates {
                    w.write_record([
                        self.meta.method.clone(),
                        a.split.as_str().to_string(),
                        a.examples.to_string(),
                        a.score.accuracy.to_string(),
                        a.score.f1.to_string(),
                        a.score.counts.true_positive.to_string(),
                        a.score.counts.false_positive.to_string(),
                        a.score.counts.true_negative.to_string(),
                        a.score.counts.false_negative.to_string(),
                        a.score.unparseable.to_string(),
                        fmt_opt(a.mean_spatial_grounding),
                        a.undefined_spatial_grounding.to_string(),
                        fmt_opt(a.mean_modality_reliance),
                        a.undefined_modality_reliance.to_string(),
                        p.arm.tokens_per_second.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            ReportBody::Caption(c) => {
                w.write_record([
                    "method",
                    "captions",
                    "chair_s",
                    "chair_i",
                    "recall",
                    "hallucinated_mentions",
                    "total_mentions",
                    "tokens_per_second",
                ])
                .map_err(csv_err)?;
                w.write_record([
                    self.meta.method.clone(),
                    c.score.caption_count.to_string(),
                    c.score.chair_s.to_string(),
                    c.score.chair_i.to_string(),
                    c.score.recall.to_string(),
                    c.score.hallucinated_mentions.to_string(),
                    c.score.total_mentions.to_string(),
                    c.arm.tokens_per_second.to_string(),
                ])
                .map_err(csv_err)?;
            }
            ReportBody::Ablation(g) => {
                w.write_record([
                    "edit_mode",
                    "lambda",
                    "examples",
                    "accuracy",
                    "f1",
                    "mean_modality_reliance",
                ])
                .map_err(csv_err)?;
                w.write_record([
                    "vanilla".to_string(),
                    String::new(),
                    String::new(),
                    g.vanilla.accuracy.to_string(),
                    g.vanilla.f1.to_string(),
                    String::new(),
                ])
                .map_err(csv_err)?;
                for cell in &g.cells {
                    let mode = match cell.edit_mode {
                        lime_core::lime::EditMode::Both => "both",
                        lime_core::lime::EditMode::KeysOnly => "keys-only",
                        lime_core::lime::EditMode::ValuesOnly => "values-only",
                    };
                    w.write_record([
                        mode.to_string(),
                        cell.lambda.to_string(),
                        cell.examples.to_string(),
                        cell.score.accuracy.to_string(),
                        cell.score.f1.to_string(),
                        fmt_opt(cell.mean_modality_reliance),
                    ])
                    .map_err(csv_err)?;
                }
            }
            ReportBody::Overhead(o) => {
                w.write_record([
                    "steps",
                    "vanilla_tokens_per_second",
                    "enhanced_tokens_per_second",
                    "slowdown",
                    "vanilla_peak_bytes",
                    "enhanced_peak_bytes",
                ])
                .map_err(csv_err)?;
                for row in &o.rows {
                    w.write_record([
                        row.steps.to_string(),
                        row.report.vanilla.tokens_per_second.to_string(),
                        row.report.enhanced.tokens_per_second.to_string(),
                        row.report.slowdown.to_string(),
                        row.report.vanilla.peak_bytes.to_string(),
                        row.report.enhanced.peak_bytes.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))
    }
}

fn csv_err(e: csv::Error) -> BenchError {
    BenchError::Io(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lime_core::metrics::ConfusionCounts;

    fn sample_report() -> BenchmarkReport {
        let score = PopeScore {
            accuracy: 0.75,
            f1: 0.8,
            counts: ConfusionCounts {
                true_positive: 3,
                false_positive: 1,
                true_negative: 3,
                false_negative: 1,
            },
            unparseable: 0,
        };
        BenchmarkReport {
            meta: ReportMeta {
                seed: 5,
                method: "lime".into(),
                lime: Some(LimeConfig::default()),
                corpus: CorpusConfig::default(),
                model: ModelConfig::default(),
            },
            body: ReportBody::Pope(PopeSection {
                records: vec![PopeRecord {
                    scene_id: 400,
                    split: SplitKind::Adversarial,
                    query_symbol: 3,
                    label: PopeLabel::Yes,
                    predicted: Some(PopeLabel::Yes),
                    generated: vec![1],
                    spatial_grounding: MetricValue::Defined(0.4),
                    modality_reliance: MetricValue::Undefined,
                    tokens: 2,
                    seconds: 0.25,
                }],
                aggregates: vec![SplitAggregate {
                    split: SplitKind::Adversarial,
                    examples: 8,
                    score,
                    mean_spatial_grounding: Some(0.4),
                    undefined_spatial_grounding: 4,
                    mean_modality_reliance: None,
                    undefined_modality_reliance: 8,
                }],
                arm: ArmStats {
                    total_tokens: 16,
                    total_seconds: 2.0,
                    tokens_per_second: 8.0,
                    peak_bytes: 1024,
                },
            }),
        }
    }

    #[test]
    fn json_round_trip_preserves_the_report() {
        let report = sample_report();
        let json = report.to_json().unwrap();
        let back = BenchmarkReport::from_json(&json).unwrap();
        assert_eq!(report, back);
        assert!(json.contains("\"kind\": \"pope\""));
        assert!(json.contains("\"split\": \"adversarial\""));
    }

    #[test]
    fn stripping_timing_zeroes_only_wall_clock_fields() {
        let mut report = sample_report();
        report.strip_timing();
        let ReportBody::Pope(p) = &report.body else {
            panic!("pope body")
        };
        assert_eq!(p.arm.total_seconds, 0.0);
        assert_eq!(p.arm.tokens_per_second, 0.0);
        assert_eq!(p.records[0].seconds, 0.0);
        assert_eq!(p.arm.total_tokens, 16, "token counts are deterministic");
        assert_eq!(p.arm.peak_bytes, 1024, "byte counts are deterministic");
    }

    #[test]
    fn csv_export_writes_one_row_per_aggregate() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pope.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(lines.len(), 2, "header plus one aggregate");
        assert!(lines[0].starts_with("method,split,examples,accuracy"));
        assert!(lines[1].starts_with("lime,adversarial,8,0.75"));
    }

    #[test]
    fn json_files_round_trip_through_disk() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.write_json(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(BenchmarkReport::from_json(&text).unwrap(), report);
    }
}
