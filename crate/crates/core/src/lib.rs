//! Impression-controllable zero-shot text-to-speech at desk scale.
//!
//! An 11-dimensional voice impression vector conditions a small
//! non-autoregressive acoustic model through a disentangling control module
//! (high-ratio dropout plus a gradient-reversal adversary). An impression
//! estimator auto-labels utterances and drives the objective evaluation
//! harness, and an LLM-backed mapper turns free-form impression descriptions
//! into vectors. Everything is verified against a synthetic oracle corpus
//! whose ground-truth impression factors are known by construction.
//!
//! Pipeline:
//!
//! ```text
//! reference mel ─ frontend ─ speaker encoder ─ x ─ control module ─ h ─ STL ─ e
//!                                                   ▲ impression vector
//! tokens ─ encoder ─ (+e) ─ variance adaptor ─ length regulator ─ decoder ─ mel
//! ```

pub mod backbone;
pub mod checkpoint;
pub mod control;
pub mod corpus;
pub mod encoder;
pub mod estimator;
pub mod eval;
pub mod plot;
pub mod frontend;
pub mod impression;
pub mod llm;
pub mod stats;
pub mod tensor;

pub use impression::{ImpressionDim, ImpressionVector};
pub use tensor::{Tape, Tensor, Var};
