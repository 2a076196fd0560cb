//! Training flows: entity-oriented pre-training over source domains, offline
//! embedding inference, target-domain fine-tuning with the DeepFM branch,
//! and the zero-shot ranker.

pub mod deepfm;
pub mod finetune;
pub mod phases;
pub mod pretrain;
pub mod store;

pub use deepfm::{finetune_score, init_heads, DeepFmSpec, FM_LATENT};
pub use finetune::{finetune, zeroshot_score, EmbeddingSource, FinetuneConfig};
pub use phases::SequencePlan;
pub use pretrain::{pretrain, pretrain_loss, pretrain_score, BatchLosses, PretrainConfig, TrainingLog};
pub use store::{infer_embeddings, EmbeddingStore};
