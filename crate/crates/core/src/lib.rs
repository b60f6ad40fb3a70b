//! Sequential knowledge transformer.
//!
//! Knowledge selection in multi-turn knowledge-grounded dialogue is modeled as
//! a sequence of categorical latent variables. A prior over each turn's
//! knowledge pool conditions on the dialogue so far and on the knowledge
//! selected at earlier turns; a posterior additionally sees the current
//! response. Training maximizes a sequential variational lower bound plus an
//! auxiliary knowledge loss; a copy-augmented Transformer decoder generates the
//! response from the context and the selected sentence.

pub mod error;
pub mod evaluator;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod model;
pub mod nn;
pub mod selector;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
