//! Procedural heightfield scene, ray casting and frame rendering.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, SE3Pose};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` attached to an integer lattice point.
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64((ix as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7) ^ (iy as u64).rotate_left(32)),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ix, iy) = (x0 as i64, y0 as i64);
    let (u, v) = (fade(x - x0), fade(y - y0));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * u;
    let bottom = c + (d - c) * u;
    top + (bottom - top) * v
}

/// Multi-octave value noise normalised to `[0, 1]`.
pub fn fractal_noise(seed: u64, x: f64, y: f64, octaves: u32, persistence: f64) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for o in 0..octaves {
        // Offsets keep octave lattices from lining up.
        let off = 17.31 * o as f64;
        sum += amp * value_noise(splitmix64(seed.wrapping_add(o as u64)), x * freq + off, y * freq - off);
        norm += amp;
        amp *= persistence;
        freq *= 2.0;
    }
    sum / norm
}

/// A textured heightfield `Z = z0 - amplitude * h(X, Y)` seen by cameras
/// looking along +Z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub seed: u64,
    pub z0: f64,
    pub amplitude: f64,
    pub height_frequency: f64,
    pub albedo_frequency: f64,
    pub octaves: u32,
}

impl Surface {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let f = self.height_frequency;
        self.z0 - self.amplitude * fractal_noise(self.seed, x * f, y * f, self.octaves.min(3), 0.5)
    }

    /// Linear RGB albedo in `[0, 1]`; the channels share a common field.
    pub fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let f = self.albedo_frequency;
        let n = |k: u64| {
            let v = fractal_noise(splitmix64(self.seed ^ (0xA1B0 + k)), x * f, y * f, self.octaves, 0.55);
            (0.5 + 2.2 * (v - 0.5)).clamp(0.0, 1.0)
        };
        let (n0, n1, n2) = (n(0), n(1), n(2));
        [n0, 0.6 * n0 + 0.4 * n1, 0.6 * n0 + 0.4 * n2]
    }

    /// First intersection parameter `t` of `origin + t dir` with the surface.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        if !(dir.z > 0.0) {
            return None;
        }
        let f = |t: f64| origin.z + t * dir.z - self.height(origin.x + t * dir.x, origin.y + t * dir.y);
        let t0 = ((self.z0 - self.amplitude - origin.z) / dir.z).max(0.0);
        let t1 = (self.z0 - origin.z) / dir.z;
        if !(t1 > 0.0) {
            return None;
        }
        const STEPS: usize = 24;
        let dt = (t1 - t0) / STEPS as f64;
        let (mut lo, mut hi) = (t0, t0);
        let mut found = f(t0) >= 0.0;
        if !found {
            for i in 1..=STEPS {
                let t = t0 + dt * i as f64;
                if f(t) >= 0.0 {
                    hi = t;
                    found = true;
                    break;
                }
                lo = t;
            }
        }
        if !found {
            return None;
        }
        if hi <= lo {
            return Some(hi);
        }
        // Illinois false position on the bracket [lo, hi].
        let (mut flo, mut fhi) = (f(lo), f(hi));
        let mut side = 0i8;
        for _ in 0..60 {
            let t = (lo * fhi - hi * flo) / (fhi - flo);
            if !(t > lo && t < hi) || hi - lo < 1e-12 * hi.abs().max(1.0) {
                break;
            }
            let ft = f(t);
            if ft >= 0.0 {
                hi = t;
                fhi = ft;
                if side == 1 {
                    flo *= 0.5;
                }
                side = 1;
            } else {
                lo = t;
                flo = ft;
                if side == -1 {
                    fhi *= 0.5;
                }
                side = -1;
            }
            if ft.abs() < 1e-13 {
                return Some(t);
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Camera-frame depth of the first surface point seen through `pixel`
    /// by a camera with camera-to-world pose `pose`.
    pub fn depth_at(&self, pose: &SE3Pose, intr: &CameraIntrinsics, pixel: &Vector2<f64>) -> Option<f64> {
        let dir = pose.rotation * intr.unproject_ray(pixel);
        // The ray has unit camera z, so t is the depth.
        self.raycast(&pose.translation, &dir)
    }
}

/// Rendered RGB radiance (2x2 supersampled) and per-pixel-centre depth.
pub fn render(surface: &Surface, pose: &SE3Pose, intr: &CameraIntrinsics) -> (Vec<[f64; 3]>, Vec<f64>) {
    let (w, h) = (intr.width, intr.height);
    let mut rgb = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let sample = |px: f64, py: f64| -> Option<(f64, [f64; 3])> {
        let dir = pose.rotation * intr.unproject_ray(&Vector2::new(px, py));
        let t = surface.raycast(&pose.translation, &dir)?;
        let p = pose.translation + dir * t;
        Some((t, surface.albedo(p.x, p.y)))
    };
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            depth.push(sample(fx, fy).map_or(0.0, |s| s.0));
            let mut acc = [0.0; 3];
            for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                if let Some((_, c)) = sample(fx + ox, fy + oy) {
                    for k in 0..3 {
                        acc[k] += 0.25 * c[k];
                    }
                }
            }
            rgb.push(acc);
        }
    }
    (rgb, depth)
}

/// Small random rotation/translation, components uniform in the given ranges.
pub fn random_pose(rng: &mut ChaCha8Rng, translation: [f64; 3], rotation: f64) -> SE3Pose {
    let t = Vector3::new(
        rng.random_range(-1.0..=1.0) * translation[0],
        rng.random_range(-1.0..=1.0) * translation[1],
        rng.random_range(-1.0..=1.0) * translation[2],
    );
    let w = Vector3::new(
        rng.random_range(-1.0..=1.0) * rotation,
        rng.random_range(-1.0..=1.0) * rotation,
        rng.random_range(-1.0..=1.0) * rotation,
    );
    let r = SE3Pose::exp(&nalgebra::Vector6::new(0.0, 0.0, 0.0, w.x, w.y, w.z)).rotation;
    SE3Pose::from_parts(r, t)
}
