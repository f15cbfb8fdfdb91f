//! Plain autoregressive decoding over the incremental path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{softmax_row, Tensor};

use super::{tokens, KvCache, Model, ModelError, MultimodalSequence, Result};

/// Token selection at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Softmax sampling of logits / temperature, driven by the given seed.
    Temperature { temperature: f64, seed: u64 },
}

/// Index of the largest logit; ties break toward the lower index.
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn sample(logits: &Tensor, temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ModelError::Sequence(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.data().iter().map(|&z| z / temperature).collect();
    let mut probs = vec![0.0; scaled.len()];
    softmax_row(&scaled, &mut probs);
    let u = {
        use rand::RngCore;
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// One decoded token and the logits it was selected from.
#[derive(Debug, Clone)]
pub struct DecodedStep {
    pub token: usize,
    pub logits: Tensor,
}

/// A finished decode: the emitted tokens (end marker excluded) and per-step
/// records. The sequence and cache are left covering the prompt plus every
/// generated token including the end marker, so callers can keep extending.
#[derive(Debug)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub steps: Vec<DecodedStep>,
    pub hit_end: bool,
}

impl Model {
    /// Generate up to `max_new` tokens, mutating `seq` and `cache` in place.
    /// The cache must already cover the sequence exactly and `tail_logits`
    /// must be the logits at its last position (both come from `prefill`).
    /// Stops after emitting the end-of-output token, which is not included
    /// in `tokens`.
    pub fn decode(
        &self,
        seq: &mut MultimodalSequence,
        cache: &mut KvCache,
        tail_logits: Tensor,
        max_new: usize,
        sampling: Sampling,
    ) -> Result<Decoded> {
        if cache.len() != seq.len() {
            return Err(ModelError::CacheMismatch {
                cache: cache.len(),
                seq: seq.len(),
            });
        }
        if seq.is_empty() {
            return Err(ModelError::Sequence(
                "cannot decode from empty sequence".into(),
            ));
        }
        let mut rng = match sampling {
            Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Sampling::Greedy => None,
        };
        let mut tokens_out = Vec::new();
        let mut steps = Vec::new();
        let mut hit_end = false;
        let mut logits = tail_logits;
        for _ in 0..max_new {
            let token = match sampling {
                Sampling::Greedy => argmax(&logits),
                Sampling::Temperature { temperature, .. } => {
                    sample(&logits, temperature, rng.as_mut().expect("rng set"))?
                }
            };
            steps.push(DecodedStep {
                token,
                logits: logits.clone(),
            });
            seq.append_generated(self, token)?;
            logits = self.advance(seq, cache)?;
            if token == tokens::EOS {
                hit_end = true;
                break;
            }
            tokens_out.push(token);
        }
        Ok(Decoded {
            tokens: tokens_out,
            steps,
            hit_end,
        })
    }
}
