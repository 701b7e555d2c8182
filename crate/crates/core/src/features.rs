//! Dense multi-channel maps and pyramids, with the bilinear sampling and
//! central-difference derivative shared by the losses and the solvers.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

/// A `[channels, height, width]` grid of descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Bilinear footprint along one axis; identical to the tape's sampler.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn tap(x: f64, extent: usize) -> Tap {
    if extent == 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
        };
    }
    let xc = x.clamp(0.0, (extent - 1) as f64);
    let i0 = (xc.floor() as usize).min(extent - 2);
    Tap {
        i0,
        i1: i0 + 1,
        frac: xc - i0 as f64,
    }
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    /// Builds a map from `f(channel, y, x)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TensorError> {
        match t.shape() {
            [c, h, w] => Ok(Self::new(*c, *h, *w, t.data().to_vec())),
            s => Err(TensorError::shape(
                "FeatureMap::from_tensor",
                format!("expected [c, h, w], got {s:?}"),
            )),
        }
    }

    /// Whether `(x, y)` lies inside the grid.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Whether the central-difference stencil around `(x, y)` (width 1 px)
    /// stays inside the grid.
    pub fn stencil_valid(&self, x: f64, y: f64) -> bool {
        x >= 1.0
            && y >= 1.0
            && x <= (self.width - 1) as f64 - 1.0
            && y <= (self.height - 1) as f64 - 1.0
    }

    /// Bilinear sample of every channel at `(x, y)`; out-of-grid coordinates
    /// are clamped to the border.
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let ax = tap(x, self.width);
        let ay = tap(y, self.height);
        let (w00, w01, w10, w11) = (
            (1.0 - ay.frac) * (1.0 - ax.frac),
            (1.0 - ay.frac) * ax.frac,
            ay.frac * (1.0 - ax.frac),
            ay.frac * ax.frac,
        );
        let n = self.height * self.width;
        let w = self.width;
        for (c, o) in out.iter_mut().enumerate() {
            let p = &self.data[c * n..(c + 1) * n];
            *o = w00 * p[ay.i0 * w + ax.i0]
                + w01 * p[ay.i0 * w + ax.i1]
                + w10 * p[ay.i1 * w + ax.i0]
                + w11 * p[ay.i1 * w + ax.i1];
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(x, y, &mut out);
        out
    }

    /// Central-difference derivative with a 1 px half-width: fills `dx` and
    /// `dy` with `(F(x+1) - F(x-1)) / 2` and `(F(y+1) - F(y-1)) / 2`.
    pub fn gradient_into(&self, x: f64, y: f64, dx: &mut [f64], dy: &mut [f64]) {
        let d = self.channels;
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        self.sample_into(x + 1.0, y, &mut a);
        self.sample_into(x - 1.0, y, &mut b);
        for i in 0..d {
            dx[i] = (a[i] - b[i]) * 0.5;
        }
        self.sample_into(x, y + 1.0, &mut a);
        self.sample_into(x, y - 1.0, &mut b);
        for i in 0..d {
            dy[i] = (a[i] - b[i]) * 0.5;
        }
    }

    /// 2x2 box downsampling.
    pub fn downsample2(&self) -> FeatureMap {
        let (h, w) = (self.height / 2, self.width / 2);
        FeatureMap::from_fn(self.channels, h, w, |c, y, x| {
            0.25 * (self.at(c, 2 * y, 2 * x)
                + self.at(c, 2 * y, 2 * x + 1)
                + self.at(c, 2 * y + 1, 2 * x)
                + self.at(c, 2 * y + 1, 2 * x + 1))
        })
    }
}

/// Per-level maps, level 0 at full resolution and each further level at half
/// the previous size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Self {
        Self { levels }
    }

    /// Box-filter pyramid of a map, e.g. raw intensities.
    pub fn from_map(base: FeatureMap, levels: usize) -> Self {
        let mut out = Vec::with_capacity(levels);
        out.push(base);
        for l in 1..levels {
            let next = out[l - 1].downsample2();
            out.push(next);
        }
        Self { levels: out }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &FeatureMap {
        &self.levels[l]
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(FeatureMap::is_finite)
    }
}
