//! Teacher-forced training.
//!
//! Each batch is recorded on one graph: every example's forward pass shares
//! the same weight leaves, so a single backward sweep yields summed gradients.
//! Input rows are assembled inside the graph from one-hot selections against
//! the embedding tables, which keeps embedding and projector gradients inside
//! the same tested machinery as everything else.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

use super::{tokens, Model, ModelError, MultimodalSequence, Result, WeightNodes};

/// One supervised example. `completion` is what the model should emit after
/// the prompt, terminator included.
#[derive(Debug, Clone)]
pub struct TrainExample {
    /// [num_patches, patch_dim] perceptual input.
    pub patches: Tensor,
    /// Patch indices the completion is actually about (not used by training
    /// itself, carried for evaluation).
    pub grounding: Vec<usize>,
    pub prompt_text: Vec<usize>,
    pub completion: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that a presentation of an example has its perceptual rows
    /// replaced by the learned null embedding. Re-rolled every epoch, so the
    /// same example trains both grounded and ungrounded; this is what makes
    /// the model lean on text priors.
    pub bias_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            bias_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    /// Mean cross-entropy per target token, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

fn one_hot_rows(rows: usize, width: usize, hot: &[(usize, usize)]) -> Tensor {
    let mut data = vec![0.0; rows * width];
    for &(r, c) in hot {
        data[r * width + c] = 1.0;
    }
    Tensor::new(vec![rows, width], data).expect("static shape")
}

/// In-graph embedding rows for one example: patches (or nulls) then text then
/// completion, positions added, identical layout to `MultimodalSequence`.
fn build_input_node(
    g: &mut Graph,
    w: &WeightNodes,
    model: &Model,
    ex: &TrainExample,
    nulled: bool,
) -> Result<NodeId> {
    let p = ex.patches.rows();
    let vocab = model.config.vocab_size;
    let max_seq = model.config.max_sequence;
    if p == 0 || ex.prompt_text.is_empty() {
        return Err(ModelError::Sequence(
            "training examples need at least one patch and a non-empty prompt".into(),
        ));
    }
    let text: Vec<usize> = ex
        .prompt_text
        .iter()
        .chain(ex.completion.iter())
        .copied()
        .collect();
    let n = p + text.len();
    if n > max_seq {
        return Err(ModelError::Sequence(format!(
            "example length {n} exceeds max sequence {max_seq}"
        )));
    }

    let patch_part = if nulled {
        let sel = g.constant(one_hot_rows(p, vocab, &{
            (0..p).map(|r| (r, tokens::NULL_PATCH)).collect::<Vec<_>>()
        }));
        g.matmul(sel, w.token_embedding)?
    } else {
        let patches = g.constant(ex.patches.clone());
        g.matmul(patches, w.projector)?
    };
    let patch_pos = g.constant(one_hot_rows(
        p,
        max_seq,
        &(0..p).map(|r| (r, r)).collect::<Vec<_>>(),
    ));
    let patch_pos_rows = g.matmul(patch_pos, w.position_embedding)?;
    let patch_rows = g.add(patch_part, patch_pos_rows)?;

    for (i, &t) in text.iter().enumerate() {
        if t >= vocab {
            return Err(ModelError::Sequence(format!(
                "token {t} at text position {i} outside vocabulary {vocab}"
            )));
        }
    }
    let tok_sel = g.constant(one_hot_rows(
        text.len(),
        vocab,
        &text.iter().enumerate().map(|(r, &t)| (r, t)).collect::<Vec<_>>(),
    ));
    let tok_rows = g.matmul(tok_sel, w.token_embedding)?;
    let text_pos = g.constant(one_hot_rows(
        text.len(),
        max_seq,
        &(0..text.len()).map(|r| (r, p + r)).collect::<Vec<_>>(),
    ));
    let text_pos_rows = g.matmul(text_pos, w.position_embedding)?;
    let text_rows = g.add(tok_rows, text_pos_rows)?;

    Ok(g.concat(&[patch_rows, text_rows], 0)?)
}

/// Summed cross-entropy of the completion tokens for one example, plus the
/// number of target positions. Row maxima enter as constants, which shifts
/// log-sum-exp into a safe range without changing its value or gradient.
fn example_loss(
    g: &mut Graph,
    model: &Model,
    w: &WeightNodes,
    ex: &TrainExample,
    nulled: bool,
) -> Result<(NodeId, usize)> {
    if ex.completion.is_empty() {
        return Err(ModelError::Sequence("completion must be non-empty".into()));
    }
    let x = build_input_node(g, w, model, ex, nulled)?;
    let trace = model.build_forward_with(g, w, x, None, true)?;
    let logits = trace.logits_full.expect("requested full logits");
    let n = trace.seq_len;
    let vocab = model.config.vocab_size;

    let first_target_pos = ex.patches.rows() + ex.prompt_text.len() - 1;
    let targets: Vec<(usize, usize)> = ex
        .completion
        .iter()
        .enumerate()
        .map(|(k, &t)| (first_target_pos + k, t))
        .collect();

    let row_max: Vec<f64> = (0..n)
        .map(|i| {
            g.value(logits).row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift = g.constant(Tensor::vector(row_max));
    let shift_b = g.broadcast_cols(shift, vocab)?;
    let neg_shift = g.scale(shift_b, -1.0)?;
    let shifted = g.add(logits, neg_shift)?;
    let exps = g.exp(shifted)?;
    let sums = g.sum_axis(exps, Some(1))?;
    let logs = g.log(sums)?;
    let lse = g.add(logs, shift)?;

    let hot = g.constant(one_hot_rows(n, vocab, &targets));
    let picked = g.mul(logits, hot)?;
    let zt = g.sum_axis(picked, Some(1))?;

    let sel = {
        let mut v = vec![0.0; n];
        for &(pos, _) in &targets {
            v[pos] = 1.0;
        }
        g.constant(Tensor::vector(v))
    };
    let neg_zt = g.scale(zt, -1.0)?;
    let per_pos = g.add(lse, neg_zt)?;
    let masked = g.mul(per_pos, sel)?;
    let total = g.sum_axis(masked, None)?;
    Ok((total, targets.len()))
}

impl Model {
    /// Train in place. Returns the per-epoch loss log. With `epochs = 0` the
    /// weights are untouched.
    pub fn train(&mut self, examples: &[TrainExample], config: &TrainConfig) -> Result<TrainLog> {
        if examples.is_empty() {
            return Err(ModelError::Sequence("no training examples".into()));
        }
        if config.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.bias_rate) {
            return Err(ModelError::Config(format!(
                "bias_rate {} outside [0, 1]",
                config.bias_rate
            )));
        }
        let sizes: Vec<usize> = self.named_tensors().iter().map(|(_, t)| t.len()).collect();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            &sizes,
        );
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        let mut step = 0usize;
        for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config
                    .seed
                    .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            );
            // Per-presentation dropout decisions, then a shuffle of the
            // visit order; both re-rolled each epoch from the epoch stream.
            let nulled: Vec<bool> = (0..examples.len())
                .map(|_| rng.gen::<f64>() < config.bias_rate)
                .collect();
            let mut order: Vec<usize> = (0..examples.len()).collect();
            for i in (1..order.len()).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                order.swap(i, j);
            }

            let mut epoch_loss_sum = 0.0;
            let mut epoch_targets = 0usize;
            for chunk in order.chunks(config.batch_size) {
                step += 1;
                let mut g = Graph::new();
                let w = self.insert_weight_nodes(&mut g);
                let mut batch_total: Option<NodeId> = None;
                let mut batch_targets = 0usize;
                let diverged = |e: ModelError| match e {
                    ModelError::Tensor(TensorError::NonFinite { .. }) => {
                        ModelError::Diverged { step }
                    }
                    other => other,
                };
                for &idx in chunk {
                    let (loss, count) =
                        example_loss(&mut g, self, &w, &examples[idx], nulled[idx])
                            .map_err(diverged)?;
                    batch_targets += count;
                    batch_total = Some(match batch_total {
                        None => loss,
                        Some(acc) => g.add(acc, loss).map_err(|e| diverged(e.into()))?,
                    });
                }
                let total = batch_total.expect("non-empty chunk");
                let mean = g
                    .scale(total, 1.0 / batch_targets as f64)
                    .map_err(|e| diverged(e.into()))?;
                let loss_value = g.value(mean).scalar_value();
                if !loss_value.is_finite() {
                    return Err(ModelError::Diverged { step });
                }
                epoch_loss_sum += loss_value * batch_targets as f64;
                epoch_targets += batch_targets;

                let wrt = w.ordered();
                let grads = g.gradient(mean, &wrt).map_err(|e| diverged(e.into()))?;
                let mut params = self.named_tensors_mut();
                let mut refs: Vec<&mut Tensor> =
                    params.iter_mut().map(|(_, t)| &mut **t).collect();
                adam.step(&mut refs, &grads);
            }
            epoch_losses.push(epoch_loss_sum / epoch_targets as f64);
        }
        Ok(TrainLog { epoch_losses })
    }

    /// Fraction of examples whose first completion token is the greedy
    /// prediction. With `nulled` the perceptual rows are withheld, measuring
    /// how far text priors alone carry the model.
    pub fn qa_accuracy(&self, examples: &[TrainExample], nulled: bool) -> Result<f64> {
        if examples.is_empty() {
            return Err(ModelError::Sequence("no examples to evaluate".into()));
        }
        let mut correct = 0usize;
        for ex in examples {
            let seq = MultimodalSequence::build(
                self,
                &ex.patches,
                &ex.grounding,
                &ex.prompt_text,
                nulled,
            )?;
            let (_, logits) = self.prefill(&seq)?;
            if super::decode::argmax(&logits) == ex.completion[0] {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Normalization};

    fn tiny_model(seed: u64) -> Model {
        Model::init(
            ModelConfig {
                num_layers: 1,
                num_heads: 2,
                model_dim: 12,
                vocab_size: 16,
                max_sequence: 24,
                patch_dim: 4,
                normalization: Normalization::RmsNorm,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn yes_examples() -> Vec<TrainExample> {
        // Patch 0 carries a strong signal; answer is YES when its first
        // feature is positive, NO otherwise.
        (0..12)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let mut patch = vec![0.1; 4];
                patch[0] = sign;
                TrainExample {
                    patches: Tensor::matrix(1, 4, patch).unwrap(),
                    grounding: vec![0],
                    prompt_text: vec![tokens::QUERY, tokens::FIRST_OBJECT, tokens::ANSWER],
                    completion: vec![
                        if sign > 0.0 { tokens::YES } else { tokens::NO },
                        tokens::EOS,
                    ],
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leaves_weights_untouched() {
        let mut m = tiny_model(3);
        let before = m.clone();
        let log = m
            .train(
                &yes_examples(),
                &TrainConfig {
                    epochs: 0,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        assert!(log.epoch_losses.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn loss_decreases_on_separable_task() {
        let mut m = tiny_model(3);
        let log = m
            .train(
                &yes_examples(),
                &TrainConfig {
                    epochs: 8,
                    batch_size: 4,
                    learning_rate: 3e-3,
                    bias_rate: 0.0,
                    seed: 7,
                },
            )
            .unwrap();
        assert_eq!(log.epoch_losses.len(), 8);
        let first = log.epoch_losses[0];
        let last = *log.epoch_losses.last().unwrap();
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            bias_rate: 0.3,
            seed: 5,
        };
        let mut m1 = tiny_model(3);
        let log1 = m1.train(&yes_examples(), &cfg).unwrap();
        let mut m2 = tiny_model(3);
        let log2 = m2.train(&yes_examples(), &cfg).unwrap();
        assert_eq!(log1.epoch_losses, log2.epoch_losses);
        assert_eq!(m1, m2);
    }

    #[test]
    fn accuracy_improves_with_training() {
        let mut m = tiny_model(9);
        let examples = yes_examples();
        let before = m.qa_accuracy(&examples, false).unwrap();
        m.train(
            &examples,
            &TrainConfig {
                epochs: 12,
                batch_size: 4,
                learning_rate: 3e-3,
                bias_rate: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        let after = m.qa_accuracy(&examples, false).unwrap();
        assert!(
            after >= before,
            "accuracy regressed: before {before}, after {after}"
        );
        assert!(after > 0.6, "accuracy after training only {after}");
    }

    #[test]
    fn rejects_bad_config() {
        let mut m = tiny_model(1);
        let ex = yes_examples();
        assert!(m
            .train(
                &ex,
                &TrainConfig {
                    batch_size: 0,
                    ..TrainConfig::default()
                }
            )
            .is_err());
        assert!(m
            .train(
                &ex,
                &TrainConfig {
                    bias_rate: 1.5,
                    ..TrainConfig::default()
                }
            )
            .is_err());
    }
}
