//! End-to-end lane detector: residual convolution backbone, transformer
//! encoder and decoder, and curve prediction heads.

mod codec;
mod config;
mod embedding;
mod macs;
mod network;
mod train;

pub use codec::OutputCodec;
pub use config::ModelConfig;
pub use embedding::build_positional_embedding;
pub use macs::{attention_macs, conv_macs, linear_macs, model_macs, MacReport};
pub use network::{
    attention_row, prediction_set, DecoderOutput, EncoderOutput, ForwardOutput, HeadOutput,
    LaneModel, LANE_EMBEDDING,
};
pub use train::{image_loss, ImageLoss, StepInfo, TrainConfig, Trainer};
