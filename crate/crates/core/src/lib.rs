//! Multi-frame in-loop filtering for block-based video codecs.
//!
//! The crate covers the whole desk-scale pipeline: the planar-video data
//! model, quality metrics and Bjøntegaard deltas, reference-frame selection,
//! the differentiable network blocks (bilinear warping, multi-scale motion
//! compensation, partition-guided convolution, dense units), staged training
//! with Adam, a DCT codec proxy that produces reconstructions with quality
//! fluctuation, and the experiment harness tying it all together.

pub mod autodiff;
pub mod bd;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod frame;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod patch;
pub mod rfs;
pub mod synth;
pub mod training;

pub use bd::{bd_psnr, bd_rate, RdPoint};
pub use error::{MifError, Result};
pub use frame::{read_yuv_sequence, write_yuv_sequence, Frame, FrameRole};
pub use metrics::{correlation_coefficient, delta_psnr_channels, psnr, psnr_luma, zscore};
pub use partition::{rasterize_partition, BlockLayout, PartitionMaps, Rect};
pub use patch::{extract_patches, PatchSample, PATCH_SIZE};
pub use filters::{enhance_frame, enhance_sequence, FilterModels, IfNet, MifNet, Mode, ModeDecision};
pub use rfs::{compute_metrics, select_references, RfsConfig, RfsNet, RfsRecord, Selection};
pub use training::{train_if, train_mif, train_rfs, ModelBundle, TrainConfig};
pub use codec::{proxy_encode, ProxyCodecConfig};
pub use experiment::{run_experiment, ExperimentManifest, ExperimentReport};
