//! Toy transformer encoder, its MLM pre-trainer and the vocabulary.

mod model;
mod pretrain;
mod vocab;

pub use model::{Encoder, LayerLayout, MhaOutput, ModelConfig, ModelLayout, PretrainedModel};
pub use pretrain::{mask_sequence, masked_accuracy, mlm_pretrain, MaskedSequence, MlmConfig, PretrainReport};
pub use vocab::{TokenId, Vocabulary, CLS, MASK, OF, OR, PAD, SEP};
