//! Two-stage tune-and-optimize style transfer at desk scale.
//!
//! The crate covers the whole pipeline: synthetic styled corpora with exact
//! style oracles, neutral paraphrasing, a tiny byte-level decoder-only
//! transformer trained with supervised fine-tuning, style reward models,
//! PPO/DPO/CPO policy optimization, and the evaluation and significance
//! testing suite.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod paraphraser;
pub mod po;
pub mod policy;
pub mod reward;
pub mod seed;

pub use error::{Error, Result};
