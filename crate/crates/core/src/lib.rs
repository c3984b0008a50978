//! Multi-scale vision transformers with cross-scale relay tokens for
//! semantic segmentation of large images.
//!
//! A small high-resolution local window and a large downsampled global window
//! run through one shared transformer. Learnable relay tokens visit the global
//! tokens and then the local tokens at every block, carrying context across
//! scales. The crate contains everything needed to train and evaluate such
//! models at desk scale: a minimal autodiff tensor library, the model and its
//! baselines, the three-term objective, paired-window sampling, sliding-window
//! inference, metrics, cost accounting, and checkpoints.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod relay;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{DType, Float, GradMode, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
pub use vit::{Scale, TokenSeq, ViTConfig};
pub use relay::{DualOutput, Model, RelayVariant};
pub use losses::{LabelMap, LossWeights, IGNORE};
pub use data::{Scene, WindowPair};
pub use infer::{compute_miou, evaluate, relative_improvement, sliding_infer, SegMetrics};
pub use analysis::{count_flops, count_params, estimate_memory, extract_attention, AttnMap, CostReport};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use train::{lr_schedule, optimizer_step, OptimConfig, StepLog, TrainState, Trainer};
