//! Training-free open-vocabulary semantic segmentation with a frozen
//! CLIP-style ViT image encoder, using attention surgery on the final
//! block, attention-map fusion around the block where global tokens
//! emerge, and fc2 channel suppression.

pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gtf;
pub mod model;
pub mod netpbm;
pub mod pipeline;
pub mod surgery;
pub mod tensor;

pub use encoder::{encode, EncodeMode, EncodeOutput, Encoder, Variant};
pub use error::{Category, Error, Result};
pub use model::{generate_synthetic, load_model, ModelBundle, ModelConfig};
pub use pipeline::{sliding_window_segment, InferenceConfig, Segmentation, TextBank};
pub use surgery::{FusionConfig, FusionVariant, SuppressionConfig, SuppressionStart, SurgeryPlan};
pub use tensor::{Activation, Tensor};
