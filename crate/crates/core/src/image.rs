//! 8-bit grayscale frames.

use serde::{Deserialize, Serialize};

use crate::features::{FeatureMap, FeaturePyramid};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    /// Quantises intensities in `[0, 255]` (clamped, rounded to nearest).
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Self {
        let data = values
            .iter()
            .map(|v| v.clamp(0.0, 255.0).round() as u8)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Raw intensities in `[0, 255]` as a one-channel map.
    pub fn to_intensity_map(&self) -> FeatureMap {
        FeatureMap::new(
            1,
            self.height,
            self.width,
            self.data.iter().map(|v| *v as f64).collect(),
        )
    }

    /// Network input: intensities scaled to `[0, 1]`.
    pub fn to_network_input(&self) -> FeatureMap {
        FeatureMap::new(
            1,
            self.height,
            self.width,
            self.data.iter().map(|v| *v as f64 / 255.0).collect(),
        )
    }

    /// Box-filter pyramid of raw intensities.
    pub fn intensity_pyramid(&self, levels: usize) -> FeaturePyramid {
        FeaturePyramid::from_map(self.to_intensity_map(), levels)
    }
}
