//! Universal adversarial perturbations against toy dual-encoder
//! vision-language models: synthetic paired corpus, small image/text
//! encoders with hand-written backpropagation, ScMix augmentation, the
//! local-utility objectives, sign-PGD, and retrieval transfer evaluation.

pub mod attack;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod scmix;
pub mod tensor;
pub mod uap;

pub use attack::{pgd_step, run_attack, run_attack_on, variant_terms, AttackConfig, AttackTrace, StepRecord, Surrogate, Variant};
pub use data::{generate_dataset, load_dataset, save_dataset, Dataset, ImageTensor, PairKey, SyntheticSpec, TokenSeq, Vocabulary};
pub use encoders::{load_checkpoint, pretrain_contrastive, save_checkpoint, Architecture, Embedding, ModelPair, PretrainConfig};
pub use error::{Error, Result};
pub use eval::{emit_report, transfer_matrix, Direction, EvalReport};
pub use objectives::{repr_divergence, ActiveTerms, KlDirection, LossBreakdown};
pub use scmix::MixParams;
pub use tensor::{AreaRange, Grid, Real, Shape};
pub use uap::{load_uap, save_uap, Epsilon, Uap};
