//! Cross-domain recommender core: entity-graph encoding, multi-interest user
//! modeling with prototype-enhanced attention, contrastive prototype
//! learning, entity-oriented pre-training, fine-tuning/zero-shot ranking,
//! and the offline embedding store.

pub mod data;
pub mod error;
pub mod numerics;
pub mod eval;
pub mod graph_encoder;
pub mod model;
pub mod parallel;
pub mod prototype;
pub mod tower;
pub mod train;

pub use error::{Error, Result};
