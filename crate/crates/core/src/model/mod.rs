//! A small decoder-only transformer over mixed perceptual/text sequences.
//!
//! Perceptual input arrives as patch feature vectors that a learned linear
//! projector maps into the embedding space; text positions use a vocabulary
//! table. Learned absolute position embeddings are folded into the sequence
//! embeddings at construction time, so the tensor a forward pass consumes is
//! exactly the tensor relevance propagation terminates at.
//!
//! Attention accepts additive key/value perturbations shared across heads;
//! see [`cache::DeltaKv`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{matmul_acc, Tensor, TensorError};

pub mod cache;
pub mod decode;
pub mod forward;
pub mod io;
pub mod sequence;
pub mod train;

pub use cache::{DeltaKv, KvCache};
pub use decode::{argmax, Decoded, DecodedStep, Sampling};
pub use forward::{ForwardTrace, LayerTrace, WeightNodes, MASK_NEG};
pub use sequence::MultimodalSequence;
pub use train::{TrainConfig, TrainExample, TrainLog};

/// Reserved vocabulary slots. Object symbols start at [`tokens::FIRST_OBJECT`].
pub mod tokens {
    pub const EOS: usize = 0;
    pub const YES: usize = 1;
    pub const NO: usize = 2;
    /// Marks the start of a presence question; followed by an object token.
    pub const QUERY: usize = 3;
    /// Marks where the yes/no answer must be produced.
    pub const ANSWER: usize = 4;
    /// Prompts the model to list the objects it perceives.
    pub const LIST: usize = 5;
    /// Learned stand-in embedding used when perceptual input is withheld.
    pub const NULL_PATCH: usize = 6;
    pub const FIRST_OBJECT: usize = 7;
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence error: {0}")]
    Sequence(String),
    #[error("cache length {cache} inconsistent with sequence length {seq}")]
    CacheMismatch { cache: usize, seq: usize },
    #[error("delta length {delta} inconsistent with cache length {cache}")]
    DeltaMismatch { delta: usize, cache: usize },
    #[error("training diverged: non-finite loss at optimizer step {step}")]
    Diverged { step: usize },
    #[error("weight io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_sequence: usize,
    pub normalization: Normalization,
    /// Width of the raw perceptual patch features the projector consumes.
    pub patch_dim: usize,
    pub norm_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 3,
            num_heads: 4,
            model_dim: 64,
            vocab_size: 96,
            max_sequence: 128,
            normalization: Normalization::RmsNorm,
            patch_dim: 32,
            norm_epsilon: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 {
            return Err(ModelError::Config(
                "layers, heads and model_dim must be positive".into(),
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "head count {} must divide model dim {}",
                self.num_heads, self.model_dim
            )));
        }
        if self.vocab_size <= tokens::FIRST_OBJECT {
            return Err(ModelError::Config(format!(
                "vocab size {} leaves no room for object tokens",
                self.vocab_size
            )));
        }
        if self.max_sequence == 0 || self.patch_dim == 0 {
            return Err(ModelError::Config(
                "max_sequence and patch_dim must be positive".into(),
            ));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(ModelError::Config("norm_epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.model_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm2_gain: Tensor,
    pub w_ff1: Tensor,
    pub w_ff2: Tensor,
}

/// Config plus every learned tensor. No biases anywhere: linear maps stay
/// pure matmuls, which keeps relevance redistribution free of bias bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub projector: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Tensor,
    pub output_projection: Tensor,
}

/// Standard normal via Box-Muller, driven by a seeded ChaCha stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count).map(|_| normal(rng) * std).collect();
    Tensor::new(shape, data).expect("init shapes are static")
}

impl Model {
    /// Fresh model with seeded Gaussian weights (std 0.02, gains at 1).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let std = 0.02;
        let token_embedding = init_tensor(&mut rng, vec![config.vocab_size, d], std);
        let position_embedding = init_tensor(&mut rng, vec![config.max_sequence, d], std);
        let projector = init_tensor(&mut rng, vec![config.patch_dim, d], std);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                norm1_gain: Tensor::new(vec![d], vec![1.0; d])?,
                wq: init_tensor(&mut rng, vec![d, d], std),
                wk: init_tensor(&mut rng, vec![d, d], std),
                wv: init_tensor(&mut rng, vec![d, d], std),
                wo: init_tensor(&mut rng, vec![d, d], std),
                norm2_gain: Tensor::new(vec![d], vec![1.0; d])?,
                w_ff1: init_tensor(&mut rng, vec![d, config.ff_dim()], std),
                w_ff2: init_tensor(&mut rng, vec![config.ff_dim(), d], std),
            });
        }
        let final_norm_gain = Tensor::new(vec![d], vec![1.0; d])?;
        let output_projection = init_tensor(&mut rng, vec![d, config.vocab_size], std);
        Ok(Model {
            config,
            token_embedding,
            position_embedding,
            projector,
            layers,
            final_norm_gain,
            output_projection,
        })
    }

    /// Root-mean-square of the cached key and value entries per layer,
    /// measured by prefilling the given sequences.
    pub fn kv_scale(&self, seqs: &[&MultimodalSequence]) -> Result<Vec<(f64, f64)>> {
        if seqs.is_empty() {
            return Err(ModelError::Config(
                "key/value scale needs at least one sequence".into(),
            ));
        }
        let layers = self.config.num_layers;
        let mut k_sq = vec![0.0f64; layers];
        let mut v_sq = vec![0.0f64; layers];
        let mut count = vec![0usize; layers];
        for seq in seqs {
            let (cache, _) = self.prefill(seq)?;
            for layer in 0..layers {
                let k = cache.k_rows(layer);
                let v = cache.v_rows(layer);
                k_sq[layer] += k.iter().map(|x| x * x).sum::<f64>();
                v_sq[layer] += v.iter().map(|x| x * x).sum::<f64>();
                count[layer] += k.len();
            }
        }
        Ok((0..layers)
            .map(|l| {
                let n = count[l].max(1) as f64;
                ((k_sq[l] / n).sqrt(), (v_sq[l] / n).sqrt())
            })
            .collect())
    }

    /// Rescale each layer's key and value projections so the cached keys and
    /// values measured on `seqs` sit at `target_rms`, folding the inverse
    /// factor into the paired projection (queries for keys, the attention
    /// output map for values).
    ///
    /// Attention only constrains the products `Wq·Wkᵀ` and `Wv·Wo`; the
    /// activation scale of the cache itself is a free parameter of the
    /// trained weights. Fixing it pins the otherwise arbitrary ratio between
    /// an additive cache perturbation of a given absolute size and the
    /// entries it perturbs, while leaving every logit the model produces
    /// unchanged up to floating-point rounding.
    pub fn calibrate_kv_scale(
        &mut self,
        target_rms: f64,
        seqs: &[&MultimodalSequence],
    ) -> Result<()> {
        if !(target_rms.is_finite() && target_rms > 0.0) {
            return Err(ModelError::Config(format!(
                "key/value target rms must be positive and finite, got {target_rms}"
            )));
        }
        let scales = self.kv_scale(seqs)?;
        for (layer, (k_rms, v_rms)) in self.layers.iter_mut().zip(scales) {
            if k_rms <= 0.0 || v_rms <= 0.0 {
                return Err(ModelError::Config(
                    "key/value scale is zero; model produces degenerate caches".into(),
                ));
            }
            let fk = k_rms / target_rms;
            let fv = v_rms / target_rms;
            for w in layer.wk.data_mut() {
                *w /= fk;
            }
            for w in layer.wq.data_mut() {
                *w *= fk;
            }
            for w in layer.wv.data_mut() {
                *w /= fv;
            }
            for w in layer.wo.data_mut() {
                *w *= fv;
            }
        }
        Ok(())
    }

    /// Root-mean-square of the final-position logits over the given
    /// sequences, the scale the relevance seed inherits.
    pub fn logit_scale(&self, seqs: &[&MultimodalSequence]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(ModelError::Config(
                "logit scale needs at least one sequence".into(),
            ));
        }
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for seq in seqs {
            let (_, tail) = self.prefill(seq)?;
            sq += tail.data().iter().map(|x| x * x).sum::<f64>();
            count += tail.len();
        }
        Ok((sq / count.max(1) as f64).sqrt())
    }

    /// Scale the output projection so the final-position logits measured on
    /// `seqs` sit at `target_rms`.
    ///
    /// A uniform logit scale is an output temperature: greedy decisions are
    /// unchanged, and because every relevance-propagation rule is linear in
    /// the relevance it redistributes, per-token relevance scales by the
    /// same factor, leaving normalized grounding metrics where they were.
    /// What it does pin is the magnitude of relevance scores against the
    /// fixed softmax temperature of the relevance objective.
    pub fn calibrate_logit_scale(
        &mut self,
        target_rms: f64,
        seqs: &[&MultimodalSequence],
    ) -> Result<()> {
        if !(target_rms.is_finite() && target_rms > 0.0) {
            return Err(ModelError::Config(format!(
                "logit target rms must be positive and finite, got {target_rms}"
            )));
        }
        let rms = self.logit_scale(seqs)?;
        if rms <= 0.0 {
            return Err(ModelError::Config(
                "logit scale is zero; model produces degenerate logits".into(),
            ));
        }
        let factor = target_rms / rms;
        for w in self.output_projection.data_mut() {
            *w *= factor;
        }
        Ok(())
    }

    /// All learned tensors with stable names, in a fixed order. The order is
    /// part of the weight file format and of training determinism.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
            ("projector".into(), &self.projector),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.norm1_gain"), &l.norm1_gain));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.norm2_gain"), &l.norm2_gain));
            out.push((format!("layer{i}.w_ff1"), &l.w_ff1));
            out.push((format!("layer{i}.w_ff2"), &l.w_ff2));
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("output_projection".into(), &self.output_projection));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
            ("projector".into(), &mut self.projector),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.norm1_gain"), &mut l.norm1_gain));
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.norm2_gain"), &mut l.norm2_gain));
            out.push((format!("layer{i}.w_ff1"), &mut l.w_ff1));
            out.push((format!("layer{i}.w_ff2"), &mut l.w_ff2));
        }
        out.push(("final_norm_gain".into(), &mut self.final_norm_gain));
        out.push(("output_projection".into(), &mut self.output_projection));
        out
    }

    /// Embedding row for a text token: token table plus position table.
    pub fn text_embedding_row(&self, token: usize, position: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(ModelError::Sequence(format!(
                "token id {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if position >= self.config.max_sequence {
            return Err(ModelError::Sequence(format!(
                "position {position} exceeds max sequence {}",
                self.config.max_sequence
            )));
        }
        let d = self.config.model_dim;
        let t = self.token_embedding.row(token);
        let p = self.position_embedding.row(position);
        Ok((0..d).map(|j| t[j] + p[j]).collect())
    }
}

/// Map raw patch features into embedding space: `patches` is [P, patch_dim],
/// `projector` is [patch_dim, model_dim]. Zero patches produce a [0, dim]
/// result. Position embeddings are added by the sequence builder, not here.
pub fn project_perceptual(patches: &Tensor, projector: &Tensor) -> Result<Tensor> {
    if patches.shape().len() != 2 || projector.shape().len() != 2 {
        return Err(ModelError::Sequence(
            "patches and projector must be rank 2".into(),
        ));
    }
    let (p, pd) = (patches.shape()[0], patches.shape()[1]);
    let (wpd, d) = (projector.shape()[0], projector.shape()[1]);
    if pd != wpd {
        return Err(TensorError::ShapeMismatch {
            op: "project_perceptual",
            left: patches.shape().to_vec(),
            right: projector.shape().to_vec(),
        }
        .into());
    }
    let mut out = vec![0.0; p * d];
    matmul_acc(patches.data(), projector.data(), &mut out, p, pd, d);
    Ok(Tensor::new(vec![p, d], out)?)
}
