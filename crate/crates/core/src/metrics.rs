//! Grounding and hallucination metrics, plus timing aggregation.
//!
//! Everything here is a pure function over plain values. Metrics that can be
//! degenerate on valid inputs (a zero denominator after normalization)
//! return an explicit [`MetricValue::Undefined`] marker so callers can
//! exclude them from averages while still counting the occurrences.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MultimodalSequence;
use crate::relevance::RelevanceMap;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// A ratio metric that may be undefined on degenerate inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MetricValue {
    Defined(f64),
    Undefined,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(v),
            MetricValue::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, MetricValue::Defined(_))
    }
}

/// Mean of the defined entries plus the count of undefined ones.
pub fn mean_defined(values: &[MetricValue]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
    let undefined = values.len() - defined.len();
    if defined.is_empty() {
        (None, undefined)
    } else {
        (
            Some(defined.iter().sum::<f64>() / defined.len() as f64),
            undefined,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingScores {
    /// Fraction of modality relevance falling inside the ground-truth
    /// region.
    pub spatial_grounding: MetricValue,
    /// Fraction of sequence relevance falling on modality tokens.
    pub modality_reliance: MetricValue,
}

/// Min-max normalization to [0, 1] over one sample's per-token relevance.
/// Returns `None` when all entries are equal, where the map carries no
/// ordering information.
pub fn normalize_relevance(per_token: &[f64]) -> Option<Vec<f64>> {
    let min = per_token.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_token.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if per_token.is_empty() || min == max {
        return None;
    }
    let span = max - min;
    Some(per_token.iter().map(|&v| (v - min) / span).collect())
}

/// Share of modality relevance inside the ground-truth region, over values
/// already normalized to [0, 1]. The region must be a subset of the
/// modality positions, making the ratio at most one. An empty region means
/// there is no ground truth to be inside of (the queried object is absent),
/// so the metric is undefined rather than zero.
pub fn spatial_grounding(
    normalized: &[f64],
    modality: &[usize],
    region: &[usize],
) -> Result<MetricValue> {
    for &i in modality.iter().chain(region.iter()) {
        if i >= normalized.len() {
            return Err(MetricsError::Contract(format!(
                "index {i} outside relevance vector of length {}",
                normalized.len()
            )));
        }
    }
    if region.iter().any(|i| !modality.contains(i)) {
        return Err(MetricsError::Contract(
            "ground-truth region must lie inside the modality positions".into(),
        ));
    }
    if region.is_empty() {
        return Ok(MetricValue::Undefined);
    }
    let phi_m: f64 = modality.iter().map(|&i| normalized[i]).sum();
    if phi_m <= 0.0 {
        return Ok(MetricValue::Undefined);
    }
    let inside: f64 = region.iter().map(|&i| normalized[i]).sum();
    Ok(MetricValue::Defined(inside / phi_m))
}

/// Share of total relevance attributed to modality tokens.
pub fn modality_reliance(phi_m: f64, phi_t: f64) -> MetricValue {
    let total = phi_m + phi_t;
    if total <= 0.0 {
        MetricValue::Undefined
    } else {
        MetricValue::Defined(phi_m / total)
    }
}

/// Normalize one sample's relevance and compute both grounding scores.
/// A constant relevance map makes both scores undefined.
pub fn grounding_scores(
    per_token: &[f64],
    modality: &[usize],
    text: &[usize],
    region: &[usize],
) -> Result<GroundingScores> {
    let Some(normalized) = normalize_relevance(per_token) else {
        return Ok(GroundingScores {
            spatial_grounding: MetricValue::Undefined,
            modality_reliance: MetricValue::Undefined,
        });
    };
    for &i in text {
        if i >= normalized.len() {
            return Err(MetricsError::Contract(format!(
                "index {i} outside relevance vector of length {}",
                normalized.len()
            )));
        }
    }
    let spatial = spatial_grounding(&normalized, modality, region)?;
    let phi_m: f64 = modality.iter().map(|&i| normalized[i]).sum();
    let phi_t: f64 = text.iter().map(|&i| normalized[i]).sum();
    Ok(GroundingScores {
        spatial_grounding: spatial,
        modality_reliance: modality_reliance(phi_m, phi_t),
    })
}

/// Grounding scores straight from a propagation summary and the sequence it
/// described.
pub fn grounding_from_map(
    map: &RelevanceMap,
    seq: &MultimodalSequence,
) -> Result<GroundingScores> {
    if map.per_token.len() != seq.len() {
        return Err(MetricsError::Contract(format!(
            "relevance length {} does not match sequence length {}",
            map.per_token.len(),
            seq.len()
        )));
    }
    grounding_scores(
        &map.per_token,
        seq.modality_indices(),
        &seq.text_and_generated(),
        seq.grounding_indices(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopeLabel {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScore {
    pub accuracy: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Predictions that contained neither answer token; they were scored as
    /// "no" per the documented default.
    pub unparseable: usize,
}

/// First yes/no answer token in a generation, if any.
pub fn parse_yes_no(generated: &[usize], yes_token: usize, no_token: usize) -> Option<PopeLabel> {
    generated.iter().find_map(|&t| {
        if t == yes_token {
            Some(PopeLabel::Yes)
        } else if t == no_token {
            Some(PopeLabel::No)
        } else {
            None
        }
    })
}

/// Accuracy and F1 with "yes" as the positive class. Unparseable
/// predictions (`None`) count as "no" and are tallied separately.
pub fn pope_score(
    predictions: &[Option<PopeLabel>],
    labels: &[PopeLabel],
) -> Result<PopeScore> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::Contract(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Contract("no examples to score".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut unparseable = 0;
    for (pred, &label) in predictions.iter().zip(labels.iter()) {
        let effective = match pred {
            Some(p) => *p,
            None => {
                unparseable += 1;
                PopeLabel::No
            }
        };
        match (effective, label) {
            (PopeLabel::Yes, PopeLabel::Yes) => counts.true_positive += 1,
            (PopeLabel::Yes, PopeLabel::No) => counts.false_positive += 1,
            (PopeLabel::No, PopeLabel::No) => counts.true_negative += 1,
            (PopeLabel::No, PopeLabel::Yes) => counts.false_negative += 1,
        }
    }
    let total = counts.total() as f64;
    let accuracy = (counts.true_positive + counts.true_negative) as f64 / total;
    let f1 = if counts.true_positive == 0 {
        0.0
    } else {
        let tp = counts.true_positive as f64;
        let precision = tp / (tp + counts.false_positive as f64);
        let recall = tp / (tp + counts.false_negative as f64);
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeScore {
        accuracy,
        f1,
        counts,
        unparseable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScore {
    /// Captions containing at least one hallucinated object, over all
    /// captions.
    pub chair_s: f64,
    /// Hallucinated mentions over all mentions, dataset-wide.
    pub chair_i: f64,
    /// Ground-truth objects actually mentioned, dataset-wide.
    pub recall: f64,
    pub hallucinated_mentions: u64,
    pub total_mentions: u64,
    pub captions_with_hallucination: u64,
    pub caption_count: u64,
    pub recalled_objects: u64,
    pub ground_truth_objects: u64,
}

/// Hallucination rates over unique-mention sets against per-scene object
/// sets. A caption without mentions contributes nothing to the instance
/// ratio but still counts as a clean caption.
pub fn chair_score(
    captions: &[BTreeSet<usize>],
    ground_truth: &[BTreeSet<usize>],
) -> Result<ChairScore> {
    if captions.len() != ground_truth.len() {
        return Err(MetricsError::Contract(format!(
            "{} captions vs {} ground-truth sets",
            captions.len(),
            ground_truth.len()
        )));
    }
    if captions.is_empty() {
        return Err(MetricsError::Contract("no captions to score".into()));
    }
    let mut hallucinated = 0u64;
    let mut mentions = 0u64;
    let mut bad_captions = 0u64;
    let mut recalled = 0u64;
    let mut truth_total = 0u64;
    for (mentioned, truth) in captions.iter().zip(ground_truth.iter()) {
        mentions += mentioned.len() as u64;
        let wrong = mentioned.difference(truth).count() as u64;
        hallucinated += wrong;
        if wrong > 0 {
            bad_captions += 1;
        }
        recalled += truth.intersection(mentioned).count() as u64;
        truth_total += truth.len() as u64;
    }
    let ratio = |num: u64, den: u64, empty: f64| {
        if den == 0 {
            empty
        } else {
            num as f64 / den as f64
        }
    };
    Ok(ChairScore {
        chair_s: bad_captions as f64 / captions.len() as f64,
        chair_i: ratio(hallucinated, mentions, 0.0),
        // With nothing to recall, recall is vacuously perfect.
        recall: ratio(recalled, truth_total, 1.0),
        hallucinated_mentions: hallucinated,
        total_mentions: mentions,
        captions_with_hallucination: bad_captions,
        caption_count: captions.len() as u64,
        recalled_objects: recalled,
        ground_truth_objects: truth_total,
    })
}

/// One timed decoding run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedRun {
    pub tokens: u64,
    pub seconds: f64,
    pub peak_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub total_tokens: u64,
    pub total_seconds: f64,
    pub tokens_per_second: f64,
    pub peak_bytes: u64,
}

/// Aggregate one arm's timing runs; `name` labels contract errors. Every run
/// must have positive finite duration and at least one decoded token.
pub fn arm_stats(runs: &[TimedRun], name: &str) -> Result<ArmStats> {
    if runs.is_empty() {
        return Err(MetricsError::Contract(format!("{name} arm has no runs")));
    }
    for r in runs {
        if r.seconds <= 0.0 || !r.seconds.is_finite() {
            return Err(MetricsError::Contract(format!(
                "{name} arm has a run of {} seconds",
                r.seconds
            )));
        }
        if r.tokens == 0 {
            return Err(MetricsError::Contract(format!(
                "{name} arm has a run that produced no tokens"
            )));
        }
    }
    let total_tokens: u64 = runs.iter().map(|r| r.tokens).sum();
    let total_seconds: f64 = runs.iter().map(|r| r.seconds).sum();
    Ok(ArmStats {
        total_tokens,
        total_seconds,
        tokens_per_second: total_tokens as f64 / total_seconds,
        peak_bytes: runs.iter().map(|r| r.peak_bytes).max().unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub vanilla: ArmStats,
    pub enhanced: ArmStats,
    /// Vanilla throughput divided by enhanced throughput.
    pub slowdown: f64,
    /// Per paired run: vanilla tokens/sec over enhanced tokens/sec.
    pub per_run_slowdown: Vec<f64>,
}

/// Aggregate paired timing runs. Run `i` of each arm must have decoded the
/// same prompt with the same budget.
pub fn overhead_report(vanilla: &[TimedRun], enhanced: &[TimedRun]) -> Result<OverheadReport> {
    if vanilla.len() != enhanced.len() {
        return Err(MetricsError::Contract(format!(
            "{} vanilla runs vs {} enhanced runs",
            vanilla.len(),
            enhanced.len()
        )));
    }
    let vanilla_stats = arm_stats(vanilla, "vanilla")?;
    let enhanced_stats = arm_stats(enhanced, "enhanced")?;
    let per_run_slowdown = vanilla
        .iter()
        .zip(enhanced.iter())
        .map(|(v, e)| {
            (v.tokens as f64 / v.seconds) / (e.tokens as f64 / e.seconds)
        })
        .collect();
    Ok(OverheadReport {
        slowdown: vanilla_stats.tokens_per_second / enhanced_stats.tokens_per_second,
        vanilla: vanilla_stats,
        enhanced: enhanced_stats,
        per_run_slowdown,
    })
}
