//! End-to-end toy pipeline: configuration, synthetic scenes, the forward pass and file I/O.

mod config;
pub mod io;
mod model;
mod scene;

pub use config::{
    MsdaShape, MsfcaSettings, PipelineConfig, PosEncSettings, MAX_DECODER_LAYERS, MAX_ENCODER_LAYERS, NUM_CLASSES,
    PYRAMID_LEVELS,
};
pub use model::{run_model, toy_forward, ModelOutput, ToyParams};
pub use scene::{gen_synthetic_scene, SceneSpec, SyntheticScene, MIN_IMAGE_EXTENT};
