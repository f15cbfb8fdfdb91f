//! Mixed perceptual/text input sequences.

use crate::tensor::Tensor;

use super::{project_perceptual, tokens, Model, ModelError, Result};

/// An input sequence of N embedding rows with bookkeeping for which positions
/// are perceptual (modality set M), which are prompt text (set T), which were
/// generated during decoding, and which modality positions carry the ground
/// truth for the current query (G, a subset of M).
///
/// Position embeddings are already included in `embeddings`, so this tensor
/// is the exact surface relevance propagation terminates at.
#[derive(Debug, Clone)]
pub struct MultimodalSequence {
    embeddings: Tensor,
    modality: Vec<usize>,
    text: Vec<usize>,
    generated: Vec<usize>,
    grounding: Vec<usize>,
    token_ids: Vec<Option<usize>>,
}

impl MultimodalSequence {
    /// Build a prompt: patch rows first, then text tokens. `grounding` indexes
    /// into the patch rows. With `null_modality`, every patch row is replaced
    /// by the learned null embedding (the perceptual channel is withheld but
    /// the positions still exist).
    pub fn build(
        model: &Model,
        patches: &Tensor,
        grounding: &[usize],
        text_tokens: &[usize],
        null_modality: bool,
    ) -> Result<Self> {
        let d = model.config.model_dim;
        let p = if patches.len() == 0 {
            0
        } else {
            patches.shape()[0]
        };
        let n = p + text_tokens.len();
        if n == 0 {
            return Err(ModelError::Sequence("empty sequence".into()));
        }
        if n > model.config.max_sequence {
            return Err(ModelError::Sequence(format!(
                "sequence length {n} exceeds max {}",
                model.config.max_sequence
            )));
        }
        for &g in grounding {
            if g >= p {
                return Err(ModelError::Sequence(format!(
                    "grounding index {g} outside modality range 0..{p}"
                )));
            }
        }
        let mut data = Vec::with_capacity(n * d);
        if p > 0 {
            if null_modality {
                for i in 0..p {
                    data.extend_from_slice(&model.text_embedding_row(tokens::NULL_PATCH, i)?);
                }
            } else {
                let projected = project_perceptual(patches, &model.projector)?;
                for i in 0..p {
                    let pr = projected.row(i);
                    let pos = model.position_embedding.row(i);
                    for j in 0..d {
                        data.push(pr[j] + pos[j]);
                    }
                }
            }
        }
        let mut token_ids: Vec<Option<usize>> = vec![None; p];
        for (k, &t) in text_tokens.iter().enumerate() {
            data.extend_from_slice(&model.text_embedding_row(t, p + k)?);
            token_ids.push(Some(t));
        }
        Ok(MultimodalSequence {
            embeddings: Tensor::new(vec![n, d], data)?,
            modality: (0..p).collect(),
            text: (p..n).collect(),
            generated: Vec::new(),
            grounding: grounding.to_vec(),
            token_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Modality index set M.
    pub fn modality_indices(&self) -> &[usize] {
        &self.modality
    }

    /// Prompt text indices (excluding generated positions).
    pub fn text_indices(&self) -> &[usize] {
        &self.text
    }

    /// Generated positions, in emission order.
    pub fn generated_indices(&self) -> &[usize] {
        &self.generated
    }

    pub fn generated_count(&self) -> usize {
        self.generated.len()
    }

    /// T in the loss sense: prompt text plus everything generated so far.
    pub fn text_and_generated(&self) -> Vec<usize> {
        let mut out = self.text.clone();
        out.extend_from_slice(&self.generated);
        out
    }

    /// Ground-truth region G for the current query; always a subset of M.
    pub fn grounding_indices(&self) -> &[usize] {
        &self.grounding
    }

    pub fn token_id(&self, position: usize) -> Option<usize> {
        self.token_ids[position]
    }

    /// Append one generated token (embedding row = token + position tables).
    pub fn append_generated(&mut self, model: &Model, token: usize) -> Result<()> {
        let n = self.len();
        if n + 1 > model.config.max_sequence {
            return Err(ModelError::Sequence(format!(
                "sequence length {} exceeds max {}",
                n + 1,
                model.config.max_sequence
            )));
        }
        let row = model.text_embedding_row(token, n)?;
        let d = model.config.model_dim;
        let mut data = self.embeddings.data().to_vec();
        data.extend_from_slice(&row);
        self.embeddings = Tensor::new(vec![n + 1, d], data)?;
        self.generated.push(n);
        self.token_ids.push(Some(token));
        Ok(())
    }

    /// The disjointness / coverage invariants, checked explicitly (cheap, and
    /// exercised by tests as the contract of the index sets).
    pub fn check_partition(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![0u8; n];
        for &i in self.modality.iter().chain(self.text.iter()).chain(self.generated.iter()) {
            if i >= n {
                return Err(ModelError::Sequence(format!("index {i} out of range")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(ModelError::Sequence(
                "modality, text and generated sets must partition the sequence".into(),
            ));
        }
        for &g in &self.grounding {
            if !self.modality.contains(&g) {
                return Err(ModelError::Sequence(format!(
                    "grounding index {g} not a modality position"
                )));
            }
        }
        Ok(())
    }
}
