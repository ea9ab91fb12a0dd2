//! Pose-conditioned motion animation over discrete feature pixels.
//!
//! A source frame is encoded and quantized against a learned codebook; a
//! transformer rearranges the source's codebook entries into the layout of
//! a driving pose; the decoder renders the result.

pub mod autograd;
pub mod codec;
pub mod condition;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scrabble;
pub mod synthdata;
pub mod tensor;
pub mod transformer;

pub use codec::{quantize, Codebook, CodecArch, CodecModel, FeatureGrid, LatentGrid, QuantizedGrid};
pub use condition::{encode_pose, PoseFrame};
pub use error::{Error, Result};
pub use image::Image;
pub use pipeline::RunConfig;
pub use scrabble::{build_bag, scrabble_patchwork, Bag, Patchwork};
pub use tensor::Tensor;
pub use transformer::{build_attention_mask, Policy, TransformerArch, TransformerModel};
