//! Scenes: synthetic perceptual inputs made of object symbols placed in
//! cells, rendered as patch feature vectors (one-hot symbol block plus a
//! small noise tail). A scene is either a 2-D grid (image analog) or a 1-D
//! strip (temporal analog); both share every downstream code path.

use std::collections::BTreeSet;

use lime_core::model::tokens;
use lime_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dimensionality {
    #[serde(rename = "grid-2d")]
    Grid2d { rows: usize, cols: usize },
    #[serde(rename = "sequence-1d")]
    Sequence1d { length: usize },
}

impl Dimensionality {
    pub fn cell_count(&self) -> usize {
        match *self {
            Dimensionality::Grid2d { rows, cols } => rows * cols,
            Dimensionality::Sequence1d { length } => length,
        }
    }
}

/// The model-vocabulary token for object symbol `symbol` (0-based).
pub fn object_token(symbol: usize) -> usize {
    tokens::FIRST_OBJECT + symbol
}

/// The object symbol encoded by `token`, if it is an object token at all
/// given a vocabulary with `object_count` symbols.
pub fn token_object(token: usize, object_count: usize) -> Option<usize> {
    if token >= tokens::FIRST_OBJECT && token < tokens::FIRST_OBJECT + object_count {
        Some(token - tokens::FIRST_OBJECT)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub dimensionality: Dimensionality,
    /// One entry per cell: the object symbol occupying it, if any.
    pub cells: Vec<Option<usize>>,
    /// Width of each cell's perceptual feature vector.
    pub patch_width: usize,
    /// Row-major [cell, patch_width] features.
    pub patch_data: Vec<f64>,
}

impl Scene {
    pub fn new(
        id: u64,
        dimensionality: Dimensionality,
        cells: Vec<Option<usize>>,
        patch_width: usize,
        patch_data: Vec<f64>,
    ) -> Result<Scene> {
        if cells.len() != dimensionality.cell_count() {
            return Err(BenchError::Config(format!(
                "scene {id}: {} cells but dimensionality holds {}",
                cells.len(),
                dimensionality.cell_count()
            )));
        }
        if patch_width == 0 || patch_data.len() != cells.len() * patch_width {
            return Err(BenchError::Config(format!(
                "scene {id}: patch data length {} does not match {} cells of width {patch_width}",
                patch_data.len(),
                cells.len()
            )));
        }
        Ok(Scene {
            id,
            dimensionality,
            cells,
            patch_width,
            patch_data,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Symbols present anywhere in the scene.
    pub fn object_inventory(&self) -> BTreeSet<usize> {
        self.cells.iter().flatten().copied().collect()
    }

    pub fn contains(&self, symbol: usize) -> bool {
        self.cells.contains(&Some(symbol))
    }

    /// Cell indices occupied by `symbol`; empty iff the symbol is absent.
    pub fn region_of(&self, symbol: usize) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Some(symbol))
            .map(|(i, _)| i)
            .collect()
    }

    /// All occupied cell indices.
    pub fn occupied_cells(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Perceptual features as a [cells, patch_width] tensor.
    pub fn patches(&self) -> Tensor {
        Tensor::new(
            vec![self.cells.len(), self.patch_width],
            self.patch_data.clone(),
        )
        .expect("validated at construction")
    }

    /// Presence-question prompt: "is `symbol` in the scene? answer:".
    pub fn qa_prompt(&self, symbol: usize) -> Vec<usize> {
        vec![tokens::QUERY, object_token(symbol), tokens::ANSWER]
    }

    /// Object-listing prompt.
    pub fn caption_prompt(&self) -> Vec<usize> {
        vec![tokens::LIST]
    }

    /// Ground-truth listing: object tokens in ascending symbol order, then
    /// the end marker.
    pub fn caption_completion(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.object_inventory().into_iter().map(object_token).collect();
        out.push(tokens::EOS);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> Scene {
        // 2x2 grid, symbol 3 in cells 0 and 3, symbol 1 in cell 2.
        let cells = vec![Some(3), None, Some(1), Some(3)];
        let width = 6;
        let mut data = vec![0.0; 4 * width];
        for (i, c) in cells.iter().enumerate() {
            if let Some(s) = c {
                data[i * width + s] = 1.0;
            }
        }
        Scene::new(
            7,
            Dimensionality::Grid2d { rows: 2, cols: 2 },
            cells,
            width,
            data,
        )
        .unwrap()
    }

    #[test]
    fn inventory_and_regions_agree() {
        let s = tiny_scene();
        let inv = s.object_inventory();
        assert_eq!(inv.into_iter().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(s.region_of(3), vec![0, 3]);
        assert_eq!(s.region_of(1), vec![2]);
        // Non-empty region exactly for inventory members.
        for sym in 0..6 {
            assert_eq!(s.contains(sym), !s.region_of(sym).is_empty());
        }
        assert_eq!(s.occupied_cells(), vec![0, 2, 3]);
    }

    #[test]
    fn prompts_and_completions_use_the_token_layout() {
        let s = tiny_scene();
        assert_eq!(
            s.qa_prompt(1),
            vec![tokens::QUERY, tokens::FIRST_OBJECT + 1, tokens::ANSWER]
        );
        assert_eq!(s.caption_prompt(), vec![tokens::LIST]);
        assert_eq!(
            s.caption_completion(),
            vec![
                tokens::FIRST_OBJECT + 1,
                tokens::FIRST_OBJECT + 3,
                tokens::EOS
            ]
        );
        assert_eq!(token_object(tokens::FIRST_OBJECT + 3, 6), Some(3));
        assert_eq!(token_object(tokens::ANSWER, 6), None);
        assert_eq!(token_object(tokens::FIRST_OBJECT + 6, 6), None);
    }

    #[test]
    fn constructor_rejects_mismatched_shapes() {
        let cells = vec![Some(0), None];
        let err = Scene::new(
            0,
            Dimensionality::Grid2d { rows: 2, cols: 2 },
            cells.clone(),
            4,
            vec![0.0; 8],
        );
        assert!(err.is_err(), "cell count must match the grid");
        let err = Scene::new(
            0,
            Dimensionality::Sequence1d { length: 2 },
            cells,
            4,
            vec![0.0; 7],
        );
        assert!(err.is_err(), "patch data must cover every cell");
    }

    #[test]
    fn patches_tensor_is_row_major_per_cell() {
        let s = tiny_scene();
        let t = s.patches();
        assert_eq!(t.shape(), &[4, 6]);
        assert_eq!(t.data()[0 * 6 + 3], 1.0);
        assert_eq!(t.data()[2 * 6 + 1], 1.0);
        assert_eq!(t.data()[1 * 6 + 3], 0.0);
    }
}
