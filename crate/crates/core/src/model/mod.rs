//! The 3D SA-UNet graph: configuration, parameters, layers and checkpoints.

pub mod aspp;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;
pub mod predict;
pub mod unet;

pub use aspp::{aspp_3d, AsppLayer};
pub use attention::{spatial_attention_3d, SpatialAttention};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use config::{ModelConfig, NormKind};
pub use layers::{LayerInfo, LayerKind};
pub use params::{Gradients, ParamEntry, ParamKind, Parameters};
pub use predict::{argmax_labels, chunk_tensor, predict_case};
pub use unet::{build_model, ForwardCache, Model};
