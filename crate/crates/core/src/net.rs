//! Siamese multi-scale encoder-decoder producing a descriptor pyramid.
//!
//! Layout for `L` levels with widths `w_l = base_width * 2^l`:
//!
//! * encoder level 0: `conv3x3(C -> w_0)`, relu, `conv3x3(w_0 -> w_0)`, relu
//! * encoder level l > 0: avg-pool 2x2, `conv3x3(w_{l-1} -> w_l)`, relu,
//!   `conv3x3(w_l -> w_l)`, relu
//! * decoder: the deepest encoder output is decoder level `L-1`; for lower
//!   levels, nearest upsampling of the decoder output above is concatenated
//!   with the encoder skip and fused by `conv3x3(w_{l+1} + w_l -> w_l)`, relu
//! * a linear `conv1x1(w_l -> D)` head at every level emits `F^l`
//!
//! Both images of a pair go through the same [`NetworkWeights`].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMap, FeaturePyramid};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("input {height}x{width} not divisible by 2^{levels_minus_one}")]
    Dimensions {
        height: usize,
        width: usize,
        levels_minus_one: usize,
    },
    #[error("input has {found} channels, network expects {expected}")]
    Channels { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("weights file: {0}")]
    Io(#[from] std::io::Error),
    #[error("weights file does not match network layout: {0}")]
    Layout(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub descriptor_dim: usize,
    pub pyramid_levels: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            descriptor_dim: 8,
            pyramid_levels: 3,
            base_width: 16,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.input_channels == 0 {
            return fail("input_channels must be >= 1");
        }
        if self.descriptor_dim == 0 {
            return fail("descriptor_dim must be >= 1");
        }
        if self.pyramid_levels < 2 {
            return fail("pyramid_levels must be >= 2");
        }
        if self.pyramid_levels > 8 {
            return fail("pyramid_levels must be <= 8");
        }
        if self.base_width == 0 {
            return fail("base_width must be >= 1");
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Checks that an image of this size halves exactly down the pyramid.
    pub fn check_input(&self, height: usize, width: usize) -> Result<(), NetError> {
        let div = 1usize << (self.pyramid_levels - 1);
        if height == 0 || width == 0 || height % div != 0 || width % div != 0 {
            return Err(NetError::Dimensions {
                height,
                width,
                levels_minus_one: self.pyramid_levels - 1,
            });
        }
        Ok(())
    }

    /// Ordered `(name, shape)` list of every parameter.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let l_count = self.pyramid_levels;
        for l in 0..l_count {
            let w = self.width(l);
            let c_prev = if l == 0 {
                self.input_channels
            } else {
                self.width(l - 1)
            };
            out.push((format!("enc{l}.conv1.w"), vec![w, c_prev, 3, 3]));
            out.push((format!("enc{l}.conv1.b"), vec![w]));
            out.push((format!("enc{l}.conv2.w"), vec![w, w, 3, 3]));
            out.push((format!("enc{l}.conv2.b"), vec![w]));
        }
        for l in (0..l_count - 1).rev() {
            let w = self.width(l);
            out.push((format!("dec{l}.conv.w"), vec![w, self.width(l + 1) + w, 3, 3]));
            out.push((format!("dec{l}.conv.b"), vec![w]));
        }
        for l in 0..l_count {
            out.push((format!("head{l}.w"), vec![self.descriptor_dim, self.width(l), 1, 1]));
            out.push((format!("head{l}.b"), vec![self.descriptor_dim]));
        }
        out
    }

    fn header(&self) -> String {
        format!(
            "input_channels={} descriptor_dim={} pyramid_levels={} base_width={} seed={}",
            self.input_channels,
            self.descriptor_dim,
            self.pyramid_levels,
            self.base_width,
            self.seed
        )
    }

    fn parse_header(text: &str) -> Result<Self, NetError> {
        let mut cfg = NetworkConfig::default();
        for kv in text.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| NetError::Layout(format!("bad header token {kv:?}")))?;
            let bad = |_| NetError::Layout(format!("bad value for {k}: {v:?}"));
            match k {
                "input_channels" => cfg.input_channels = v.parse().map_err(bad)?,
                "descriptor_dim" => cfg.descriptor_dim = v.parse().map_err(bad)?,
                "pyramid_levels" => cfg.pyramid_levels = v.parse().map_err(bad)?,
                "base_width" => cfg.base_width = v.parse().map_err(bad)?,
                "seed" => cfg.seed = v.parse().map_err(bad)?,
                _ => return Err(NetError::Layout(format!("unknown header key {k}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameters recorded on a tape, in [`NetworkConfig::layer_shapes`] order.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub vars: Vec<Var>,
}

/// He-initialised weights from `config.seed`; biases start at zero.
pub fn build_network(config: &NetworkConfig) -> Result<NetworkWeights, NetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in config.layer_shapes() {
        let t = if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let is_head = name.starts_with("head");
            let gain = if is_head { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
        } else {
            Tensor::zeros(&shape)
        };
        names.push(name);
        params.push(t);
    }
    Ok(NetworkWeights {
        config: *config,
        names,
        params,
    })
}

impl NetworkWeights {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn bind_trainable(&self, tape: &mut Tape) -> BoundWeights {
        BoundWeights {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundWeights {
        BoundWeights {
            vars: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
        }
    }

    /// Records the forward pass for one image (`[C, H, W]`) and returns the
    /// per-level descriptor maps, finest first.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundWeights,
        image: Var,
    ) -> Result<Vec<Var>, NetError> {
        let shape = tape.shape(image).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(TensorError::shape("network input", format!("{shape:?}")).into());
        };
        if c != self.config.input_channels {
            return Err(NetError::Channels {
                expected: self.config.input_channels,
                found: c,
            });
        }
        self.config.check_input(h, w)?;
        let levels = self.config.pyramid_levels;
        let mut p = bound.vars.iter().copied();
        let mut next = || p.next().expect("parameter list matches layout");

        let mut skips = Vec::with_capacity(levels);
        let mut x = image;
        for l in 0..levels {
            if l > 0 {
                x = tape.avg_pool2(x)?;
            }
            let (w1, b1) = (next(), next());
            x = tape.conv2d(x, w1, Some(b1), 1, 1)?;
            x = tape.relu(x);
            let (w2, b2) = (next(), next());
            x = tape.conv2d(x, w2, Some(b2), 1, 1)?;
            x = tape.relu(x);
            skips.push(x);
        }
        let mut decoded = vec![skips[levels - 1]; levels];
        for l in (0..levels - 1).rev() {
            let up = tape.upsample2(decoded[l + 1])?;
            let cat = tape.concat(&[up, skips[l]], 0)?;
            let (wd, bd) = (next(), next());
            let y = tape.conv2d(cat, wd, Some(bd), 1, 1)?;
            decoded[l] = tape.relu(y);
        }
        let mut heads = Vec::with_capacity(levels);
        for d in decoded.iter().take(levels) {
            let (wh, bh) = (next(), next());
            heads.push(tape.conv2d(*d, wh, Some(bh), 1, 0)?);
        }
        Ok(heads)
    }

    /// Inference: descriptor pyramid of `image` (`[C, H, W]`, values as
    /// produced by [`crate::image::GrayImage::to_network_input`]).
    pub fn extract_pyramid(&self, image: &FeatureMap) -> Result<FeaturePyramid, NetError> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(image.to_tensor());
        let heads = self.forward(&mut tape, &bound, x)?;
        let levels = heads
            .iter()
            .map(|v| FeatureMap::from_tensor(tape.value(*v)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeaturePyramid::new(levels))
    }

    pub fn write_to(&self, path: &Path) -> Result<(), NetError> {
        let f = BufWriter::new(File::create(path)?);
        let named: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        tensor::write_tensors(f, &self.config.header(), &named)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, NetError> {
        let f = BufReader::new(File::open(path)?);
        let (header, tensors) = tensor::read_tensors(f)?;
        let config = NetworkConfig::parse_header(&header.text)?;
        let layout = config.layer_shapes();
        if layout.len() != tensors.len() {
            return Err(NetError::Layout(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), (found_name, t)) in layout.into_iter().zip(tensors) {
            if name != found_name || shape != t.shape() {
                return Err(NetError::Layout(format!(
                    "expected {name} {shape:?}, found {found_name} {:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            input_channels: 1,
            descriptor_dim: 8,
            pyramid_levels: 3,
            base_width: 4,
            seed: 11,
        }
    }

    #[test]
    fn deterministic_initialisation() {
        let a = build_network(&small()).unwrap();
        let b = build_network(&small()).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = build_network(&NetworkConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_layer_audit() {
        // C=1, D=8, widths 4, 8, 16.
        // encoder: 9*4*1+4 + 9*4*4+4 | 9*8*4+8 + 9*8*8+8 | 9*16*8+16 + 9*16*16+16
        let enc = (36 + 4 + 144 + 4) + (288 + 8 + 576 + 8) + (1152 + 16 + 2304 + 16);
        // decoder: level 1 fuses 16+8 -> 8, level 0 fuses 8+4 -> 4
        let dec = (9 * 8 * 24 + 8) + (9 * 4 * 12 + 4);
        // heads: 1x1 to 8 channels from 4, 8, 16
        let heads = (32 + 8) + (64 + 8) + (128 + 8);
        let net = build_network(&small()).unwrap();
        assert_eq!(net.parameter_count(), enc + dec + heads);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            NetworkConfig { descriptor_dim: 0, ..small() },
            NetworkConfig { pyramid_levels: 1, ..small() },
            NetworkConfig { base_width: 0, ..small() },
            NetworkConfig { input_channels: 0, ..small() },
        ] {
            assert!(matches!(build_network(&cfg), Err(NetError::InvalidConfig(_))));
        }
    }

    #[test]
    fn shape_contract_and_finiteness() {
        let net = build_network(&NetworkConfig { base_width: 4, ..NetworkConfig::default() }).unwrap();
        let pyr = net.extract_pyramid(&FeatureMap::zeros(1, 64, 64)).unwrap();
        let dims: Vec<_> = pyr
            .levels
            .iter()
            .map(|m| (m.width(), m.height(), m.channels()))
            .collect();
        assert_eq!(dims, vec![(64, 64, 8), (32, 32, 8), (16, 16, 8)]);
        assert!(pyr.is_finite());
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = build_network(&small()).unwrap();
        assert!(matches!(
            net.extract_pyramid(&FeatureMap::zeros(1, 30, 32)),
            Err(NetError::Dimensions { .. })
        ));
        assert!(matches!(
            net.extract_pyramid(&FeatureMap::zeros(2, 32, 32)),
            Err(NetError::Channels { .. })
        ));
    }

    #[test]
    fn weights_file_round_trip() {
        let net = build_network(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gnnw");
        net.write_to(&path).unwrap();
        let back = NetworkWeights::read_from(&path).unwrap();
        assert_eq!(back, net);
        let bytes = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("w2.gnnw");
        back.write_to(&path2).unwrap();
        assert_eq!(std::fs::read(&path2).unwrap(), bytes);
    }
}
