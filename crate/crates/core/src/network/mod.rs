//! The recurrent pose network and its CNN-only ablation.

mod config;
mod model;

pub use config::{EncoderConfig, LayerSpec, ModelConfig, ModelKind, INPUT_CHANNELS};
pub use model::{
    gru_step, xavier_uniform, BoundModel, ConvParams, GruCellParams, GruCellVars, HeadParams, Mode, PoseNet,
    GATE_KERNEL,
};
