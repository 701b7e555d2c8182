//! Photometric condition changes standing in for lighting and weather.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::GrayImage;

/// Applied in order: color matrix, luma, gamma, contrast, brightness, blur,
/// noise, clamp, 8-bit quantisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTransform {
    pub gamma: f64,
    /// Offset in 8-bit gray levels.
    pub brightness: f64,
    /// Scale about mid-gray.
    pub contrast: f64,
    /// Additive Gaussian noise, gray levels.
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels; zero disables.
    pub blur_radius: f64,
    /// Row-major 3x3 mixing of linear RGB.
    pub color_matrix: [[f64; 3]; 3],
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl ConditionTransform {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0.0,
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let gamma = rng.random_range(-1.0f64..=1.0).exp2();
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j {
                    rng.random_range(0.6..=1.3)
                } else {
                    rng.random_range(-0.35..=0.35)
                };
            }
        }
        Self {
            gamma,
            brightness: rng.random_range(-40.0..=40.0),
            contrast: rng.random_range(0.6..=1.4),
            noise_sigma: rng.random_range(0.0..=4.0),
            blur_radius: [0.0, 0.0, 0.6, 1.0][rng.random_range(0..4)],
            color_matrix: m,
        }
    }

    /// Renders linear RGB radiance to an 8-bit gray image.
    pub fn apply(&self, rgb: &[[f64; 3]], width: usize, height: usize, rng: &mut ChaCha8Rng) -> GrayImage {
        assert_eq!(rgb.len(), width * height);
        let mut g: Vec<f64> = rgb
            .iter()
            .map(|c| {
                let mut y = 0.0;
                for (i, row) in self.color_matrix.iter().enumerate() {
                    let mixed = row[0] * c[0] + row[1] * c[1] + row[2] * c[2];
                    y += LUMA[i] * mixed;
                }
                let y = y.clamp(0.0, 1.0).powf(self.gamma);
                ((y - 0.5) * self.contrast + 0.5) * 255.0 + self.brightness
            })
            .collect();
        if self.blur_radius > 0.0 {
            g = gaussian_blur(&g, width, height, self.blur_radius);
        }
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            for v in g.iter_mut() {
                *v += n.sample(rng);
            }
        }
        GrayImage::from_f64(width, height, &g)
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let o = j as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, width as i64 - 1), y)
                    } else {
                        (x, (y + o).clamp(0, height as i64 - 1))
                    };
                    acc += kv * src[(sy * width as i64 + sx) as usize];
                }
                out[(y * width as i64 + x) as usize] = acc;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}
