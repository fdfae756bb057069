//! StyleBERT-style Chinese character representation learning at desk scale.
//!
//! Characters are encoded into four feature streams (word id, pinyin,
//! five-stroke, chaizi radicals), fused into a single token embedding and
//! fed to a small transformer encoder trained with masked language modeling.
//!
//! ```text
//! dictionaries ─┐
//!               ├─ encoders ─ masking ─ fusion model ─ trainer
//! corpus ───────┘
//! ```

pub mod autograd;
pub mod encoders;
pub mod feature_tables;
pub mod masking;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use encoders::{EncodedSequence, EncodedToken, FeatureAlphabets, FeatureSequence, Vocab};
pub use feature_tables::{
    CharacterFeatureRecord, ChaiziDecomposition, FeatureDictionary, PinyinCode, WubiCode,
};
pub use masking::{MaskedBatch, MaskingConfig, MaskingStrategy, SynonymLexicon};
pub use model::{
    BatchInput, Checkpoint, FeatureKind, FusionEmbedderConfig, FusionKind, HeadKind,
    StyleBertModel,
};
pub use trainer::{
    evaluate_mlm, pretrain, probe_feature_signal, EvalMetrics, ProbeReport, TrainConfig,
    TrainInputs, TrainReport,
};
