//! Desk-scale implementation of relevance-guided inference-time modality
//! enhancement for a toy multimodal decoder.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense f64 tensors plus an eager reverse-mode graph.
//! * [`model`] — a small decoder-only transformer that consumes mixed
//!   perceptual/text sequences and accepts additive key/value perturbations.
//! * [`relevance`] — propagation rules that redistribute an output logit back
//!   onto input tokens, built from graph ops so the result stays
//!   differentiable with respect to the perturbations.
//! * [`lime`] — the per-decoding-step perturbation optimizer and decode loop.
//! * [`metrics`] — grounding, yes/no probe scoring, caption hallucination
//!   rates and runtime overhead summaries.

pub mod lime;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod relevance;
pub mod tensor;
