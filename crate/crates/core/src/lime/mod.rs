//! Inference-time amplification of modality grounding.
//!
//! At every decoding step, a zero-initialized additive perturbation over the
//! cached keys and values is optimized for a handful of Adam iterations to
//! make per-token relevance concentrate on the modality tokens (see
//! [`loss::build_relevance_loss`]) while a KL term keeps the next-token
//! distribution near the unperturbed reference. The next token is emitted
//! greedily from the adjusted distribution, the perturbation is discarded,
//! and the clean cache advances as if nothing had happened.
//!
//! Numerical failure during optimization is not fatal: the step falls back
//! to the unperturbed distribution and the event is recorded on the report.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    argmax, tokens, DeltaKv, KvCache, Model, ModelError, MultimodalSequence,
};
use crate::optim::{Adam, AdamConfig};
use crate::relevance::{propagate, RelevanceConfig, RelevanceError};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub mod loss;

pub use loss::{build_kl, build_relevance_loss, kl_divergence, log_softmax, relevance_loss_value};

#[derive(Debug, Error)]
pub enum LimeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, LimeError>;

/// Which halves of the cached attention state the perturbation may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    #[default]
    Both,
    KeysOnly,
    ValuesOnly,
}

/// How the relevance target token is picked during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Re-argmax the perturbed distribution at every iteration.
    #[default]
    Argmax,
    /// Pin the target to the unperturbed distribution's argmax.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    /// Adam iterations per decoding step. Zero disables optimization and
    /// reproduces greedy decoding exactly.
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the KL anchor. Zero removes the term from the loss graph
    /// entirely, not just its magnitude.
    pub lambda: f64,
    /// Temperature of the relevance softmax.
    pub tau: f64,
    pub edit_mode: EditMode,
    pub target_mode: TargetMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Stabilizer passed through to relevance propagation.
    pub relevance_epsilon: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            steps: 7,
            learning_rate: 3e-4,
            lambda: 0.1,
            tau: 0.1,
            edit_mode: EditMode::Both,
            target_mode: TargetMode::Argmax,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            relevance_epsilon: 1e-6,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(LimeError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(LimeError::Config(format!(
                "KL weight must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(LimeError::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(LimeError::Config(format!(
                    "Adam {name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(LimeError::Config(format!(
                "Adam epsilon must be positive, got {}",
                self.adam_epsilon
            )));
        }
        if self.relevance_epsilon < 0.0 {
            return Err(LimeError::Config(format!(
                "relevance stabilizer must be non-negative, got {}",
                self.relevance_epsilon
            )));
        }
        Ok(())
    }
}

/// Loss values observed at one optimization iteration, before its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub target_token: usize,
    pub relevance_loss: f64,
    /// Absent when the KL weight is zero.
    pub kl_loss: Option<f64>,
    pub composite_loss: f64,
    /// Per-token relevance under the perturbation as of this iteration.
    pub per_token_relevance: Vec<f64>,
}

/// Everything observable about one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_index: usize,
    /// One record per completed optimization iteration; shorter than the
    /// configured count only when a numerical fallback cut the step short.
    pub iterations: Vec<IterationRecord>,
    pub chosen_token: usize,
    /// Losses and relevance measured once more under the final perturbation.
    /// Absent when optimization was skipped (`steps == 0`).
    pub final_relevance_loss: Option<f64>,
    pub final_kl_loss: Option<f64>,
    pub final_composite_loss: Option<f64>,
    pub modality_relevance: Option<f64>,
    pub text_relevance: Option<f64>,
    pub final_per_token_relevance: Option<Vec<f64>>,
    /// L2 norm of the perturbation that produced the emitted token.
    pub delta_l2: f64,
    /// Set when optimization aborted and the step fell back to the
    /// unperturbed distribution; carries the failure description.
    pub fallback: Option<String>,
    pub duration_seconds: f64,
}

impl StepReport {
    fn skipped(chosen_token: usize) -> Self {
        StepReport {
            step_index: 0,
            iterations: Vec::new(),
            chosen_token,
            final_relevance_loss: None,
            final_kl_loss: None,
            final_composite_loss: None,
            modality_relevance: None,
            text_relevance: None,
            final_per_token_relevance: None,
            delta_l2: 0.0,
            fallback: None,
            duration_seconds: 0.0,
        }
    }
}

/// Decode output: emitted tokens (terminator excluded) plus one report per
/// step taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeDecoded {
    pub tokens: Vec<usize>,
    pub reports: Vec<StepReport>,
    pub hit_end: bool,
}

/// One full forward + relevance + loss evaluation under a perturbation.
struct Evaluation {
    graph: Graph,
    loss: NodeId,
    delta_leaves: Vec<NodeId>,
    logits: Tensor,
    target: usize,
    relevance_loss: f64,
    kl_loss: Option<f64>,
    composite: f64,
    per_token: Vec<f64>,
    modality_total: f64,
    text_total: f64,
}

fn is_numerical(e: &LimeError) -> bool {
    fn tensor_numerical(t: &TensorError) -> bool {
        matches!(
            t,
            TensorError::NonFinite { .. } | TensorError::Singular { .. }
        )
    }
    match e {
        LimeError::Tensor(t) => tensor_numerical(t),
        LimeError::Model(ModelError::Tensor(t)) => tensor_numerical(t),
        LimeError::Relevance(RelevanceError::Tensor(t)) => tensor_numerical(t),
        _ => false,
    }
}

fn evaluate(
    model: &Model,
    seq: &MultimodalSequence,
    delta: &DeltaKv,
    config: &LimeConfig,
    reference_log_probs: &[f64],
    reference_target: usize,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let trace = model.build_forward(&mut g, seq, Some(delta), false)?;
    let logits = g.value(trace.logits_last).clone();
    let target = match config.target_mode {
        TargetMode::Argmax => argmax(&logits),
        TargetMode::Reference => reference_target,
    };
    let prop = propagate(
        &mut g,
        &trace,
        target,
        &RelevanceConfig {
            epsilon: config.relevance_epsilon,
        },
    )?;

    let promoted = seq.modality_indices().to_vec();
    let mut support = promoted.clone();
    support.extend(seq.text_and_generated());
    support.sort_unstable();
    let rel_node = loss::build_relevance_loss(&mut g, prop.per_token, &promoted, &support, config.tau)?;
    let (loss_node, kl_loss) = if config.lambda > 0.0 {
        let kl_node = loss::build_kl(&mut g, trace.logits_last, reference_log_probs)?;
        let kl_value = g.value(kl_node).scalar_value();
        let weighted = g.scale(kl_node, config.lambda)?;
        (g.add(rel_node, weighted)?, Some(kl_value))
    } else {
        (rel_node, None)
    };

    let mut delta_leaves = Vec::new();
    for layer in &trace.layers {
        let dk = layer.delta_k.expect("forward ran with a perturbation");
        let dv = layer.delta_v.expect("forward ran with a perturbation");
        match config.edit_mode {
            EditMode::Both => {
                delta_leaves.push(dk);
                delta_leaves.push(dv);
            }
            EditMode::KeysOnly => delta_leaves.push(dk),
            EditMode::ValuesOnly => delta_leaves.push(dv),
        }
    }

    let per_token = g.value(prop.per_token).data().to_vec();
    let modality_total = promoted.iter().map(|&i| per_token[i]).sum();
    let text_total = seq
        .text_and_generated()
        .iter()
        .map(|&i| per_token[i])
        .sum();
    Ok(Evaluation {
        relevance_loss: g.value(rel_node).scalar_value(),
        composite: g.value(loss_node).scalar_value(),
        loss: loss_node,
        delta_leaves,
        logits,
        target,
        kl_loss,
        per_token,
        modality_total,
        text_total,
        graph: g,
    })
}

fn delta_params<'a>(delta: &'a mut DeltaKv, mode: EditMode) -> Vec<&'a mut Tensor> {
    let mut params = Vec::new();
    for layer in delta.layers.iter_mut() {
        match mode {
            EditMode::Both => {
                params.push(&mut layer.dk);
                params.push(&mut layer.dv);
            }
            EditMode::KeysOnly => params.push(&mut layer.dk),
            EditMode::ValuesOnly => params.push(&mut layer.dv),
        }
    }
    params
}

/// Optimize a fresh zero perturbation for the next-token decision on `seq`.
///
/// `reference_logits` must be the unperturbed next-token logits for exactly
/// this sequence (the caller already has them from its cache walk); the
/// reference distribution anchors the KL term and is computed once.
///
/// Runs `config.steps` Adam iterations, each evaluating the loss under the
/// current perturbation, picking the relevance target per
/// [`LimeConfig::target_mode`], and updating the tensors selected by
/// [`LimeConfig::edit_mode`]. A non-finite value anywhere in an iteration
/// abandons optimization: the perturbation resets to zero and the report
/// notes the event. The returned report always reflects one final
/// evaluation under the returned perturbation, whose argmax is the chosen
/// token.
pub fn optimize_step_delta(
    model: &Model,
    seq: &MultimodalSequence,
    reference_logits: &Tensor,
    config: &LimeConfig,
) -> Result<(DeltaKv, StepReport)> {
    config.validate()?;
    if seq.is_empty() {
        return Err(LimeError::Contract("cannot optimize an empty sequence".into()));
    }
    if seq.modality_indices().is_empty() {
        return Err(LimeError::Contract(
            "relevance optimization needs at least one modality token".into(),
        ));
    }
    if reference_logits.len() != model.config.vocab_size {
        return Err(LimeError::Contract(format!(
            "reference logits length {} does not match vocabulary {}",
            reference_logits.len(),
            model.config.vocab_size
        )));
    }
    let started = Instant::now();
    let reference_log_probs = log_softmax(reference_logits.data());
    let reference_target = argmax(reference_logits);

    let mut delta = DeltaKv::zeros(model, seq.len());
    let sizes: Vec<usize> = delta_params(&mut delta, config.edit_mode)
        .iter()
        .map(|t| t.len())
        .collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
        },
        &sizes,
    );

    let mut iterations = Vec::with_capacity(config.steps);
    let mut fallback: Option<String> = None;
    for _ in 0..config.steps {
        let ev = match evaluate(
            model,
            seq,
            &delta,
            config,
            &reference_log_probs,
            reference_target,
        ) {
            Ok(ev) => ev,
            Err(e) if is_numerical(&e) => {
                fallback = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let grads = match ev.graph.gradient(ev.loss, &ev.delta_leaves) {
            Ok(gs) if gs.iter().all(|t| t.all_finite()) => gs,
            Ok(_) => {
                fallback = Some("non-finite gradient".into());
                break;
            }
            Err(e) => {
                let e = LimeError::from(e);
                if is_numerical(&e) {
                    fallback = Some(e.to_string());
                    break;
                }
                return Err(e);
            }
        };
        iterations.push(IterationRecord {
            target_token: ev.target,
            relevance_loss: ev.relevance_loss,
            kl_loss: ev.kl_loss,
            composite_loss: ev.composite,
            per_token_relevance: ev.per_token,
        });
        let mut params = delta_params(&mut delta, config.edit_mode);
        adam.step(&mut params, &grads);
    }
    if fallback.is_some() {
        delta = DeltaKv::zeros(model, seq.len());
    }

    let final_ev = match evaluate(
        model,
        seq,
        &delta,
        config,
        &reference_log_probs,
        reference_target,
    ) {
        Ok(ev) => ev,
        Err(e) if is_numerical(&e) && fallback.is_none() => {
            // The last update itself blew up; retreat to zero and re-measure.
            fallback = Some(e.to_string());
            delta = DeltaKv::zeros(model, seq.len());
            evaluate(
                model,
                seq,
                &delta,
                config,
                &reference_log_probs,
                reference_target,
            )?
        }
        Err(e) => return Err(e),
    };

    let report = StepReport {
        step_index: 0,
        chosen_token: argmax(&final_ev.logits),
        final_relevance_loss: Some(final_ev.relevance_loss),
        final_kl_loss: final_ev.kl_loss,
        final_composite_loss: Some(final_ev.composite),
        modality_relevance: Some(final_ev.modality_total),
        text_relevance: Some(final_ev.text_total),
        final_per_token_relevance: Some(final_ev.per_token),
        delta_l2: delta.l2_norm(),
        iterations,
        fallback,
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((delta, report))
}

/// Decode with per-step perturbation optimization.
///
/// The cache only ever holds unperturbed keys and values: each step's
/// perturbation lives in its own throwaway graphs and is dropped once the
/// token is emitted. With `steps == 0` no graph is ever built and the walk
/// is plain greedy decoding.
pub fn decode(
    model: &Model,
    seq: &mut MultimodalSequence,
    config: &LimeConfig,
    max_tokens: usize,
) -> Result<LimeDecoded> {
    config.validate()?;
    if seq.is_empty() {
        return Err(LimeError::Contract("cannot decode from an empty sequence".into()));
    }
    if seq.modality_indices().is_empty() {
        return Err(LimeError::Contract(
            "decoding needs at least one modality token".into(),
        ));
    }
    let (mut cache, tail) = model.prefill(seq)?;
    decode_with(model, seq, &mut cache, tail, config, max_tokens)
}

fn decode_with(
    model: &Model,
    seq: &mut MultimodalSequence,
    cache: &mut KvCache,
    mut tail: Tensor,
    config: &LimeConfig,
    max_tokens: usize,
) -> Result<LimeDecoded> {
    let mut out = LimeDecoded {
        tokens: Vec::new(),
        reports: Vec::new(),
        hit_end: false,
    };
    for step in 0..max_tokens {
        let started = Instant::now();
        let mut report = if config.steps == 0 {
            StepReport::skipped(argmax(&tail))
        } else {
            let (_delta, r) = optimize_step_delta(model, seq, &tail, config)?;
            r
        };
        report.step_index = step;
        let token = report.chosen_token;
        seq.append_generated(model, token)?;
        tail = model.advance(seq, cache)?;
        report.duration_seconds = started.elapsed().as_secs_f64();
        out.reports.push(report);
        if token == tokens::EOS {
            out.hit_end = true;
            break;
        }
        out.tokens.push(token);
    }
    Ok(out)
}
