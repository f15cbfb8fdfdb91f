//! Per-layer key/value cache and the additive perturbation tensors.

use crate::tensor::Tensor;

use super::{Model, ModelError, Result};

/// Clean (unperturbed) keys and values for each layer. Rows are stored head
/// major: row `p` holds all heads concatenated, so head `h` occupies columns
/// `h*head_dim .. (h+1)*head_dim`, i.e. layout [len, num_heads, head_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    num_heads: usize,
    head_dim: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(model: &Model) -> Self {
        let layers = model.config.num_layers;
        KvCache {
            num_heads: model.config.num_heads,
            head_dim: model.config.head_dim(),
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.k.len()
    }

    /// Append one position's keys/values for `layer` (width = model dim).
    /// The position counter advances when the last layer is written.
    pub(crate) fn push_row(&mut self, layer: usize, k_row: &[f64], v_row: &[f64]) {
        debug_assert_eq!(k_row.len(), self.num_heads * self.head_dim);
        self.k[layer].extend_from_slice(k_row);
        self.v[layer].extend_from_slice(v_row);
        if layer + 1 == self.k.len() {
            self.len += 1;
        }
    }

    pub(crate) fn k_rows(&self, layer: usize) -> &[f64] {
        &self.k[layer]
    }

    pub(crate) fn v_rows(&self, layer: usize) -> &[f64] {
        &self.v[layer]
    }

    /// Keys for one layer as a [len, num_heads, head_dim] tensor.
    pub fn k_tensor(&self, layer: usize) -> Tensor {
        Tensor::new(
            vec![self.len, self.num_heads, self.head_dim],
            self.k[layer].clone(),
        )
        .expect("cache rows are consistent")
    }

    pub fn v_tensor(&self, layer: usize) -> Tensor {
        Tensor::new(
            vec![self.len, self.num_heads, self.head_dim],
            self.v[layer].clone(),
        )
        .expect("cache rows are consistent")
    }

    /// Every layer must hold exactly `len` positions.
    pub fn check_consistent(&self) -> Result<()> {
        let width = self.num_heads * self.head_dim;
        for layer in 0..self.k.len() {
            if self.k[layer].len() != self.len * width || self.v[layer].len() != self.len * width {
                return Err(ModelError::Sequence(format!(
                    "cache layer {layer} length differs from sequence length {}",
                    self.len
                )));
            }
        }
        Ok(())
    }
}

/// Additive key/value perturbations, one pair of [seq_len, head_dim] tensors
/// per layer, shared across heads. Fresh (zero) instances are created per
/// decoding step and never persist.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaKv {
    pub layers: Vec<DeltaLayer>,
    head_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaLayer {
    pub dk: Tensor,
    pub dv: Tensor,
}

impl DeltaKv {
    pub fn zeros(model: &Model, seq_len: usize) -> Self {
        let hd = model.config.head_dim();
        DeltaKv {
            layers: (0..model.config.num_layers)
                .map(|_| DeltaLayer {
                    dk: Tensor::zeros(vec![seq_len, hd]),
                    dv: Tensor::zeros(vec![seq_len, hd]),
                })
                .collect(),
            head_dim: hd,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map(|l| l.dk.shape()[0]).unwrap_or(0)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.dk.data().iter().all(|&x| x == 0.0) && l.dv.data().iter().all(|&x| x == 0.0))
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for l in &self.layers {
            for &x in l.dk.data() {
                s += x * x;
            }
            for &x in l.dv.data() {
                s += x * x;
            }
        }
        s.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn delta_zero_init() {
        let m = crate::model::Model::init(
            ModelConfig {
                num_layers: 2,
                num_heads: 2,
                model_dim: 8,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let d = DeltaKv::zeros(&m, 5);
        assert!(d.is_zero());
        assert_eq!(d.seq_len(), 5);
        assert_eq!(d.layers.len(), 2);
        assert_eq!(d.layers[0].dk.shape(), &[5, 4]);
        assert_eq!(d.l2_norm(), 0.0);
    }
}
