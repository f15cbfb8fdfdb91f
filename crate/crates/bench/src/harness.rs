//! Experiment runners: presence QA, object listing, ablation grids, and
//! timing comparisons, each over a trained model and an evaluation split.

use std::collections::BTreeSet;
use std::time::Instant;

use lime_core::lime::{self, EditMode, LimeConfig, StepReport};
use lime_core::metrics::{
    arm_stats, grounding_scores, mean_defined, overhead_report, parse_yes_no, pope_score,
    ArmStats, ChairScore, GroundingScores, MetricValue, OverheadReport, PopeLabel, PopeScore,
    TimedRun,
};
use lime_core::model::{argmax, tokens, Model, MultimodalSequence, Sampling};
use lime_core::relevance::{propagate, RelevanceConfig};
use lime_core::tensor::Graph;
use serde::{Deserialize, Serialize};

use crate::corpus::QaExample;
use crate::report::{CaptionRecord, PopeRecord, SplitAggregate};
use crate::scene::{token_object, Scene};
use crate::{BenchError, Result};

/// Decoding budget for one presence answer.
pub const POPE_MAX_TOKENS: usize = 20;
/// Decoding budget for one object listing.
pub const CAPTION_MAX_TOKENS: usize = 150;

/// Which decoding arm an experiment runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    Lime(LimeConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Lime(_) => "lime",
        }
    }

    pub fn lime_config(&self) -> Option<&LimeConfig> {
        match self {
            Method::Vanilla => None,
            Method::Lime(c) => Some(c),
        }
    }
}

/// Everything one QA experiment produced. `step_reports` carries the raw
/// optimization traces of the enhanced arm (empty for vanilla) so callers
/// can inspect loss trajectories without re-running.
#[derive(Debug, Clone)]
pub struct PopeRun {
    pub records: Vec<PopeRecord>,
    pub aggregates: Vec<SplitAggregate>,
    pub runs: Vec<TimedRun>,
    pub arm: ArmStats,
    pub step_reports: Vec<StepReport>,
}

/// One caption experiment: per-scene records plus the hallucination score.
#[derive(Debug, Clone)]
pub struct CaptionRun {
    pub records: Vec<CaptionRecord>,
    pub score: ChairScore,
    pub runs: Vec<TimedRun>,
    pub arm: ArmStats,
}

fn qa_sequence(model: &Model, example: &QaExample) -> Result<MultimodalSequence> {
    let region = example.scene.region_of(example.query_symbol);
    Ok(MultimodalSequence::build(
        model,
        &example.scene.patches(),
        &region,
        &example.scene.qa_prompt(example.query_symbol),
        false,
    )?)
}

/// Clamp a decoding budget to what the model's maximum sequence length can
/// actually hold past this prompt.
fn clamped_budget(model: &Model, seq: &MultimodalSequence, max_new: usize) -> Result<usize> {
    let room = model.config.max_sequence.saturating_sub(seq.len());
    if room == 0 {
        return Err(BenchError::Config(format!(
            "prompt of {} tokens leaves no room to decode (max sequence {})",
            seq.len(),
            model.config.max_sequence
        )));
    }
    Ok(max_new.min(room))
}

/// Unperturbed grounding measurement: one forward trace, relevance from the
/// next-token argmax, grounding scores against the sequence sets. Kept off
/// the decode clock — it is instrumentation, not part of vanilla decoding.
fn vanilla_grounding(model: &Model, seq: &MultimodalSequence) -> Result<GroundingScores> {
    let mut g = Graph::new();
    let trace = model.build_forward(&mut g, seq, None, false)?;
    let target = argmax(g.value(trace.logits_last));
    let propagated = propagate(&mut g, &trace, target, &RelevanceConfig::default())?;
    let map = propagated.map(&g, seq);
    Ok(lime_core::metrics::grounding_from_map(&map, seq)?)
}

/// Estimated bytes held by the unperturbed decoding state: both cached
/// tensors per layer at the final sequence length.
fn vanilla_cache_bytes(model: &Model, final_len: usize) -> u64 {
    (model.config.num_layers * 2 * final_len * model.config.model_dim) as u64
        * std::mem::size_of::<f64>() as u64
}

/// Measured peak allocation of one optimization iteration's graph (forward,
/// relevance, loss, gradient) at the given sequence. One probe stands in for
/// the whole arm: every step rebuilds a graph of this same shape.
fn enhanced_peak_bytes(
    model: &Model,
    seq: &MultimodalSequence,
    config: &LimeConfig,
) -> Result<u64> {
    use lime_core::lime::{build_kl, build_relevance_loss, log_softmax};
    use lime_core::model::DeltaKv;

    let mut g = Graph::new();
    let delta = DeltaKv::zeros(model, seq.len());
    let trace = model.build_forward(&mut g, seq, Some(&delta), false)?;
    let target = argmax(g.value(trace.logits_last));
    let propagated = propagate(
        &mut g,
        &trace,
        target,
        &RelevanceConfig {
            epsilon: config.relevance_epsilon,
        },
    )?;
    let reference = log_softmax(g.value(trace.logits_last).data());
    let promoted = seq.modality_indices().to_vec();
    let mut support = promoted.clone();
    support.extend(seq.text_and_generated());
    support.sort_unstable();
    let rel = build_relevance_loss(&mut g, propagated.per_token, &promoted, &support, config.tau)?;
    let kl = build_kl(&mut g, trace.logits_last, &reference)?;
    let kl_scaled = g.scale(kl, config.lambda)?;
    let loss = g.add(rel, kl_scaled)?;
    let mut leaves = Vec::new();
    for layer in &trace.layers {
        if let Some(dk) = layer.delta_k {
            leaves.push(dk);
        }
        if let Some(dv) = layer.delta_v {
            leaves.push(dv);
        }
    }
    g.gradient(loss, &leaves)?;
    Ok(g.peak_bytes() as u64)
}

/// Run presence QA over `examples` with one decoding arm.
///
/// Grounding metrics always describe the first decoding step's relevance
/// over the prompt: the vanilla arm measures it with a separate untimed
/// propagation, the enhanced arm reads it off the step report. Spatial
/// grounding is undefined for absent-object queries (empty region) and
/// whenever the relevance map is constant.
pub fn run_pope_experiment(
    model: &Model,
    examples: &[QaExample],
    method: &Method,
    max_new: usize,
) -> Result<PopeRun> {
    if examples.is_empty() {
        return Err(BenchError::Config("no QA examples to run".into()));
    }
    let mut records = Vec::with_capacity(examples.len());
    let mut runs = Vec::with_capacity(examples.len());
    let mut step_reports = Vec::new();
    let mut probe_bytes: Option<u64> = None;

    for example in examples {
        let mut seq = qa_sequence(model, example)?;
        let modality = seq.modality_indices().to_vec();
        let text = seq.text_indices().to_vec();
        let region = seq.grounding_indices().to_vec();
        let budget = clamped_budget(model, &seq, max_new)?;

        let (generated, grounding, seconds, steps_taken, peak_bytes) = match method {
            Method::Vanilla => {
                let grounding = vanilla_grounding(model, &seq)?;
                let started = Instant::now();
                let (mut cache, tail) = model.prefill(&seq)?;
                let decoded =
                    model.decode(&mut seq, &mut cache, tail, budget, Sampling::Greedy)?;
                let seconds = started.elapsed().as_secs_f64();
                let bytes = vanilla_cache_bytes(model, seq.len());
                (decoded.tokens, grounding, seconds, decoded.steps.len(), bytes)
            }
            Method::Lime(config) => {
                let bytes = match probe_bytes {
                    Some(b) => b,
                    None => {
                        let b = if config.steps == 0 {
                            vanilla_cache_bytes(model, seq.len() + budget)
                        } else {
                            enhanced_peak_bytes(model, &seq, config)?
                        };
                        probe_bytes = Some(b);
                        b
                    }
                };
                let started = Instant::now();
                let decoded = lime::decode(model, &mut seq, config, budget)?;
                let seconds = started.elapsed().as_secs_f64();
                let grounding = match decoded
                    .reports
                    .first()
                    .and_then(|r| r.final_per_token_relevance.as_ref())
                {
                    Some(per_token) => grounding_scores(per_token, &modality, &text, &region)?,
                    None => GroundingScores {
                        spatial_grounding: MetricValue::Undefined,
                        modality_reliance: MetricValue::Undefined,
                    },
                };
                let steps = decoded.reports.len();
                step_reports.extend(decoded.reports);
                (decoded.tokens, grounding, seconds, steps, bytes)
            }
        };

        runs.push(TimedRun {
            tokens: steps_taken as u64,
            seconds: seconds.max(1e-9),
            peak_bytes,
        });
        records.push(PopeRecord {
            scene_id: example.scene.id,
            split: example.split,
            query_symbol: example.query_symbol,
            label: example.label,
            predicted: parse_yes_no(&generated, tokens::YES, tokens::NO),
            generated,
            spatial_grounding: grounding.spatial_grounding,
            modality_reliance: grounding.modality_reliance,
            tokens: steps_taken as u64,
            seconds,
        });
    }

    let aggregates = aggregate_by_split(&records)?;
    let arm = arm_stats(&runs, method.name())?;
    Ok(PopeRun {
        records,
        aggregates,
        runs,
        arm,
        step_reports,
    })
}

/// Recompute split aggregates from the per-example records alone. Reports
/// store both; this function is the only way aggregates are ever produced,
/// so a stored aggregate can always be checked against its records.
pub fn aggregate_by_split(records: &[PopeRecord]) -> Result<Vec<SplitAggregate>> {
    let mut kinds: Vec<crate::corpus::SplitKind> = Vec::new();
    for r in records {
        if !kinds.contains(&r.split) {
            kinds.push(r.split);
        }
    }
    let mut out = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let subset: Vec<&PopeRecord> = records.iter().filter(|r| r.split == kind).collect();
        let predicted: Vec<Option<PopeLabel>> = subset.iter().map(|r| r.predicted).collect();
        let labels: Vec<PopeLabel> = subset.iter().map(|r| r.label).collect();
        let score = pope_score(&predicted, &labels)?;
        let spatial: Vec<MetricValue> = subset.iter().map(|r| r.spatial_grounding).collect();
        let reliance: Vec<MetricValue> = subset.iter().map(|r| r.modality_reliance).collect();
        let (mean_spatial, undefined_spatial) = mean_defined(&spatial);
        let (mean_reliance, undefined_reliance) = mean_defined(&reliance);
        out.push(SplitAggregate {
            split: kind,
            examples: subset.len(),
            score,
            mean_spatial_grounding: mean_spatial,
            undefined_spatial_grounding: undefined_spatial,
            mean_modality_reliance: mean_reliance,
            undefined_modality_reliance: undefined_reliance,
        });
    }
    Ok(out)
}

/// Object mentions in a generated listing: object tokens mapped back to
/// symbols, deduplicated; non-object tokens are ignored.
pub fn caption_mentions(generated: &[usize], object_count: usize) -> BTreeSet<usize> {
    generated
        .iter()
        .filter_map(|&t| token_object(t, object_count))
        .collect()
}

/// Run object listing over `scenes` with one decoding arm and score
/// hallucinations against each scene's true inventory.
pub fn run_caption_experiment(
    model: &Model,
    scenes: &[Scene],
    object_count: usize,
    method: &Method,
    max_new: usize,
) -> Result<CaptionRun> {
    if scenes.is_empty() {
        return Err(BenchError::Config("no scenes to caption".into()));
    }
    let mut records = Vec::with_capacity(scenes.len());
    let mut runs = Vec::with_capacity(scenes.len());
    let mut mentioned_sets = Vec::with_capacity(scenes.len());
    let mut truth_sets = Vec::with_capacity(scenes.len());
    let mut probe_bytes: Option<u64> = None;

    for scene in scenes {
        let mut seq = MultimodalSequence::build(
            model,
            &scene.patches(),
            &scene.occupied_cells(),
            &scene.caption_prompt(),
            false,
        )?;
        let budget = clamped_budget(model, &seq, max_new)?;
        let (generated, seconds, steps_taken, peak_bytes) = match method {
            Method::Vanilla => {
                let started = Instant::now();
                let (mut cache, tail) = model.prefill(&seq)?;
                let decoded =
                    model.decode(&mut seq, &mut cache, tail, budget, Sampling::Greedy)?;
                let seconds = started.elapsed().as_secs_f64();
                let bytes = vanilla_cache_bytes(model, seq.len());
                (decoded.tokens, seconds, decoded.steps.len(), bytes)
            }
            Method::Lime(config) => {
                let bytes = match probe_bytes {
                    Some(b) => b,
                    None => {
                        let b = if config.steps == 0 {
                            vanilla_cache_bytes(model, seq.len() + budget)
                        } else {
                            enhanced_peak_bytes(model, &seq, config)?
                        };
                        probe_bytes = Some(b);
                        b
                    }
                };
                let started = Instant::now();
                let decoded = lime::decode(model, &mut seq, config, budget)?;
                let seconds = started.elapsed().as_secs_f64();
                (decoded.tokens, seconds, decoded.reports.len(), bytes)
            }
        };

        let mentioned = caption_mentions(&generated, object_count);
        let truth = scene.object_inventory();
        runs.push(TimedRun {
            tokens: steps_taken as u64,
            seconds: seconds.max(1e-9),
            peak_bytes,
        });
        records.push(CaptionRecord {
            scene_id: scene.id,
            generated,
            mentioned: mentioned.iter().copied().collect(),
            truth: truth.iter().copied().collect(),
            tokens: steps_taken as u64,
            seconds,
        });
        mentioned_sets.push(mentioned);
        truth_sets.push(truth);
    }

    let score = lime_core::metrics::chair_score(&mentioned_sets, &truth_sets)?;
    let arm = arm_stats(&runs, method.name())?;
    Ok(CaptionRun {
        records,
        score,
        runs,
        arm,
    })
}

/// One cell of the ablation grid: a full QA run at a single configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub edit_mode: EditMode,
    pub lambda: f64,
    pub score: PopeScore,
    pub mean_modality_reliance: Option<f64>,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Unperturbed reference on the same examples.
    pub vanilla: PopeScore,
    pub cells: Vec<AblationCell>,
}

fn whole_run_score(run: &PopeRun) -> Result<(PopeScore, Option<f64>)> {
    let predicted: Vec<Option<PopeLabel>> = run.records.iter().map(|r| r.predicted).collect();
    let labels: Vec<PopeLabel> = run.records.iter().map(|r| r.label).collect();
    let score = pope_score(&predicted, &labels)?;
    let reliance: Vec<MetricValue> = run.records.iter().map(|r| r.modality_reliance).collect();
    Ok((score, mean_defined(&reliance).0))
}

/// Sweep the edit-mode × KL-weight grid over one QA example set.
pub fn run_ablation(
    model: &Model,
    examples: &[QaExample],
    edit_modes: &[EditMode],
    lambdas: &[f64],
    base: &LimeConfig,
) -> Result<AblationGrid> {
    if edit_modes.is_empty() || lambdas.is_empty() {
        return Err(BenchError::Config("empty ablation grid".into()));
    }
    let vanilla_run = run_pope_experiment(model, examples, &Method::Vanilla, POPE_MAX_TOKENS)?;
    let (vanilla, _) = whole_run_score(&vanilla_run)?;
    let mut cells = Vec::with_capacity(edit_modes.len() * lambdas.len());
    for &edit_mode in edit_modes {
        for &lambda in lambdas {
            let config = LimeConfig {
                edit_mode,
                lambda,
                ..*base
            };
            let run =
                run_pope_experiment(model, examples, &Method::Lime(config), POPE_MAX_TOKENS)?;
            let (score, mean_modality_reliance) = whole_run_score(&run)?;
            cells.push(AblationCell {
                edit_mode,
                lambda,
                score,
                mean_modality_reliance,
                examples: run.records.len(),
            });
        }
    }
    Ok(AblationGrid { vanilla, cells })
}

/// Timing comparison at one optimization budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub steps: usize,
    pub report: OverheadReport,
}

/// Time the vanilla arm once, then the enhanced arm at each step budget,
/// pairing runs example-for-example.
pub fn run_overhead(
    model: &Model,
    examples: &[QaExample],
    steps_list: &[usize],
    base: &LimeConfig,
) -> Result<Vec<OverheadRow>> {
    if steps_list.is_empty() {
        return Err(BenchError::Config("no step budgets to time".into()));
    }
    let vanilla = run_pope_experiment(model, examples, &Method::Vanilla, POPE_MAX_TOKENS)?;
    let mut rows = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let config = LimeConfig { steps, ..*base };
        let run = run_pope_experiment(model, examples, &Method::Lime(config), POPE_MAX_TOKENS)?;
        rows.push(OverheadRow {
            steps,
            report: overhead_report(&vanilla.runs, &run.runs)?,
        });
    }
    Ok(rows)
}
