//! Building blocks for dilated-convolution semantic segmentation at desk
//! scale: a small dense-tensor engine, declarative layer graphs for the
//! four multi-scale heads (ASPP, cascade, Res2Net-Seg, WASP) plus decoder
//! and backbones, a dense-CRF refiner, and a training/evaluation harness
//! with a synthetic dataset generator.

pub mod archcfg;
pub mod augment;
pub mod container;
pub mod conv;
pub mod crf;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod pnm;
pub mod report;
pub mod scalar;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;

pub use conv::{atrous_conv1d, conv2d, conv2d_backward, zero_stuffed, ConvSpec};
pub use error::{Error, Result};
pub use graph::{GraphBuilder, LayerKind, ModuleGraph, NetworkConfig};
pub use metrics::ConfusionMatrix;
pub use pnm::{LabelMap, RgbImage, IGNORE_LABEL};
pub use schedule::{poly_lr, PolySchedule};
pub use tensor::{Shape, Tensor, TensorBase};
