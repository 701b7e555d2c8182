pub mod alignment;
pub mod benchmark;
pub mod features;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod net;
pub mod pipeline;
pub mod tensor;

pub use alignment::{AlignmentConfig, TrackResult};
pub use features::{FeatureMap, FeaturePyramid};
pub use geometry::{CameraIntrinsics, PointWithDepth, SE3Pose};
pub use image::GrayImage;
pub use losses::{CorrespondenceBatch, LossConfig, PixelPair};
pub use net::{build_network, NetworkConfig, NetworkWeights};

/// Version tag written into every artifact.
pub fn version_string() -> String {
    format!("gnnet-v{}", env!("CARGO_PKG_VERSION"))
}
