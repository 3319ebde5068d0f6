//! Model layer: scan-order permutations, the encoder-decoder backbone with
//! swappable bottlenecks, and checkpoint serialization.

pub mod backbone;
pub mod checkpoint;
pub mod scan;

pub use backbone::{
    forward, forward_pass, fuse_outputs, BackboneConfig, Bottleneck, ForwardPass, Model,
    ModelError, ModelOutputs, ParamSet, TapeOutputs, TaskMode, TransformerCfg,
};
pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
