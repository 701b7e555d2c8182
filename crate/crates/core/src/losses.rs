//! Training objectives: pixelwise contrastive loss, the probabilistic
//! Gauss-Newton loss, and their multi-scale weighted sum.
//!
//! All losses are recorded on a [`Tape`] so gradients flow back into the
//! feature maps and from there into the network.

use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// `log(2 pi)`.
pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("contrastive loss needs at least one positive or negative pair")]
    EmptyBatch,
    #[error("Gauss-Newton loss needs at least one positive pair")]
    NoPositives,
    #[error("level {level} not available (pyramid has {available})")]
    MissingLevel { level: usize, available: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A pixel in image a and a pixel in image b, level-0 coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPair {
    pub ua: Vector2<f64>,
    pub ub: Vector2<f64>,
}

impl PixelPair {
    pub fn new(ua: [f64; 2], ub: [f64; 2]) -> Self {
        Self {
            ua: Vector2::new(ua[0], ua[1]),
            ub: Vector2::new(ub[0], ub[1]),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            ua: self.ua * s,
            ub: self.ub * s,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceBatch {
    pub frame_a: usize,
    pub frame_b: usize,
    pub positives: Vec<PixelPair>,
    pub negatives: Vec<PixelPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Contrastive margin M. Zero disables the contrastive term entirely.
    pub margin: f64,
    /// Weight of the Gauss-Newton term.
    pub gn_weight: f64,
    /// Half-width of the start-point square at level 0; halved per level,
    /// never below 1 px.
    pub vicinity_radius: f64,
    /// Hessian regulariser.
    pub epsilon: f64,
    /// Pyramid levels the losses are applied to.
    pub levels_used: Vec<usize>,
    /// Random start points per positive pair.
    pub gn_starts: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            gn_weight: 0.1,
            vicinity_radius: 4.0,
            epsilon: 1e-3,
            levels_used: vec![0, 1, 2],
            gn_starts: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidConfig(m));
        if !(self.margin >= 0.0) {
            return bad(format!("margin must be >= 0, got {}", self.margin));
        }
        if !(self.gn_weight >= 0.0) {
            return bad(format!("gn_weight must be >= 0, got {}", self.gn_weight));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.vicinity_radius >= 1.0) {
            return bad(format!("vicinity_radius must be >= 1, got {}", self.vicinity_radius));
        }
        if self.levels_used.is_empty() {
            return bad("levels_used is empty".into());
        }
        if self.gn_starts == 0 {
            return bad("gn_starts must be >= 1".into());
        }
        Ok(())
    }

    pub fn radius_at(&self, level: usize) -> f64 {
        (self.vicinity_radius / (1u64 << level) as f64).max(1.0)
    }
}

fn coords(tape: &mut Tape, pts: impl Iterator<Item = Vector2<f64>>) -> Var {
    let flat: Vec<f64> = pts.flat_map(|p| [p.x, p.y]).collect();
    let n = flat.len() / 2;
    tape.constant(Tensor::new(vec![n, 2], flat).expect("n x 2"))
}

fn column(tape: &mut Tape, values: Vec<f64>) -> Var {
    let n = values.len();
    tape.constant(Tensor::new(vec![n], values).expect("vector"))
}

/// Per-pair squared descriptor distances `[n]` between `fa(ua)` and `fb(ub)`.
fn squared_distances(
    tape: &mut Tape,
    fa: Var,
    fb: Var,
    pairs: &[PixelPair],
) -> Result<Var, TensorError> {
    let ca = coords(tape, pairs.iter().map(|p| p.ua));
    let cb = coords(tape, pairs.iter().map(|p| p.ub));
    let sa = tape.bilinear_sample(fa, ca)?;
    let sb = tape.bilinear_sample(fb, cb)?;
    let diff = tape.sub(sa, sb)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum_axis(sq, 1)
}

/// `(1/N_pos) sum D^2 + (1/N_neg) sum max(0, M - D)^2` with
/// `D = |fa(ua) - fb(ub)|`. Pairs are in the coordinates of the given maps.
/// Either set may be empty, not both.
pub fn contrastive_loss(
    tape: &mut Tape,
    fa: Var,
    fb: Var,
    positives: &[PixelPair],
    negatives: &[PixelPair],
    margin: f64,
) -> Result<Var, LossError> {
    if positives.is_empty() && negatives.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(2);
    if !positives.is_empty() {
        let d2 = squared_distances(tape, fa, fb, positives)?;
        let s = tape.sum(d2);
        terms.push(tape.scale(s, 1.0 / positives.len() as f64));
    }
    if !negatives.is_empty() {
        let d2 = squared_distances(tape, fa, fb, negatives)?;
        let d = tape.sqrt(d2)?;
        let neg = tape.scale(d, -1.0);
        let gap = tape.add_scalar(neg, margin);
        let hinge = tape.relu(gap);
        let sq = tape.mul(hinge, hinge)?;
        let s = tape.sum(sq);
        terms.push(tape.scale(s, 1.0 / negatives.len() as f64));
    }
    Ok(match terms[..] {
        [a, b] => tape.add(a, b)?,
        [a] => a,
        _ => unreachable!(),
    })
}

/// `e1 = 1/2 d^T H d` and `e2 = log(2 pi) - 1/2 log|H|` per row, for
/// `H = [[hxx, hxy], [hxy, hyy]]` and `d = x - mu`. All inputs are `[n]`.
pub fn gaussian_nll_terms(
    tape: &mut Tape,
    hxx: Var,
    hxy: Var,
    hyy: Var,
    dx: Var,
    dy: Var,
) -> Result<(Var, Var), TensorError> {
    let h = hessian_batch(tape, hxx, hxy, hyy)?;
    let det = tape.det2x2(h)?;
    let log_det = tape.log(det)?;
    let half_log_det = tape.scale(log_det, -0.5);
    let e2 = tape.add_scalar(half_log_det, LOG_2PI);

    let dxx = tape.mul(dx, dx)?;
    let dxy = tape.mul(dx, dy)?;
    let dyy = tape.mul(dy, dy)?;
    let a = tape.mul(hxx, dxx)?;
    let b = tape.mul(hxy, dxy)?;
    let b2 = tape.scale(b, 2.0);
    let c = tape.mul(hyy, dyy)?;
    let ab = tape.add(a, b2)?;
    let quad = tape.add(ab, c)?;
    let e1 = tape.scale(quad, 0.5);
    Ok((e1, e2))
}

fn hessian_batch(tape: &mut Tape, hxx: Var, hxy: Var, hyy: Var) -> Result<Var, TensorError> {
    let n = tape.shape(hxx)[0];
    let cols = [hxx, hxy, hxy, hyy]
        .iter()
        .map(|v| tape.reshape(*v, &[n, 1]))
        .collect::<Result<Vec<_>, _>>()?;
    let flat = tape.concat(&cols, 1)?;
    tape.reshape(flat, &[n, 2, 2])
}

/// Values of the Gauss-Newton loss pieces, kept for diagnostics and tests.
#[derive(Clone, Debug)]
pub struct GaussNewtonLoss {
    /// Mean of `e1 + e2` over all start points.
    pub loss: Var,
    pub e1: Var,
    pub e2: Var,
    /// Start points used, map coordinates.
    pub starts: Vec<Vector2<f64>>,
    /// Gauss-Newton means `mu = x_s - H^-1 b`.
    pub means: Vec<Vector2<f64>>,
}

/// Draws a start point uniformly in the square of half-width `radius`
/// around `ub`, clamped so the derivative stencil stays inside a
/// `width x height` map.
pub fn sample_start<R: Rng + ?Sized>(
    rng: &mut R,
    ub: &Vector2<f64>,
    radius: f64,
    width: usize,
    height: usize,
) -> Vector2<f64> {
    let ox = rng.random_range(-radius..=radius);
    let oy = rng.random_range(-radius..=radius);
    Vector2::new(
        (ub.x + ox).clamp(1.0, width as f64 - 2.0),
        (ub.y + oy).clamp(1.0, height as f64 - 2.0),
    )
}

/// Gauss-Newton loss for pairs already in the coordinates of `fa`/`fb`,
/// starting each pair from the given `starts` (one entry per pair).
pub fn gauss_newton_loss_from_starts(
    tape: &mut Tape,
    fa: Var,
    fb: Var,
    positives: &[PixelPair],
    starts: &[Vector2<f64>],
    epsilon: f64,
) -> Result<GaussNewtonLoss, LossError> {
    if positives.is_empty() {
        return Err(LossError::NoPositives);
    }
    assert_eq!(positives.len(), starts.len());
    let n = positives.len();

    let ua = coords(tape, positives.iter().map(|p| p.ua));
    let xs = coords(tape, starts.iter().copied());
    let shifted = |dx: f64, dy: f64| starts.iter().map(move |s| s + Vector2::new(dx, dy));
    let xp = coords(tape, shifted(1.0, 0.0));
    let xm = coords(tape, shifted(-1.0, 0.0));
    let yp = coords(tape, shifted(0.0, 1.0));
    let ym = coords(tape, shifted(0.0, -1.0));

    // Target feature, residual and numerical derivative.
    let ft = tape.bilinear_sample(fa, ua)?;
    let fs = tape.bilinear_sample(fb, xs)?;
    let r = tape.sub(fs, ft)?;
    let sxp = tape.bilinear_sample(fb, xp)?;
    let sxm = tape.bilinear_sample(fb, xm)?;
    let dxs = tape.sub(sxp, sxm)?;
    let jx = tape.scale(dxs, 0.5);
    let syp = tape.bilinear_sample(fb, yp)?;
    let sym = tape.bilinear_sample(fb, ym)?;
    let dys = tape.sub(syp, sym)?;
    let jy = tape.scale(dys, 0.5);

    // H = J^T J + eps I, b = J^T r.
    let jxx = tape.mul(jx, jx)?;
    let jxy = tape.mul(jx, jy)?;
    let jyy = tape.mul(jy, jy)?;
    let sxx = tape.sum_axis(jxx, 1)?;
    let hxx = tape.add_scalar(sxx, epsilon);
    let hxy = tape.sum_axis(jxy, 1)?;
    let syy = tape.sum_axis(jyy, 1)?;
    let hyy = tape.add_scalar(syy, epsilon);
    let jxr = tape.mul(jx, r)?;
    let jyr = tape.mul(jy, r)?;
    let bx = tape.sum_axis(jxr, 1)?;
    let by = tape.sum_axis(jyr, 1)?;

    // delta = H^-1 b; mu = x_s - delta; d = u_b - mu = (u_b - x_s) + delta.
    let h = hessian_batch(tape, hxx, hxy, hyy)?;
    let inv = tape.inv2x2(h)?;
    let inv = tape.reshape(inv, &[n, 4])?;
    let entry = |tape: &mut Tape, k: usize| -> Result<Var, TensorError> {
        let s = tape.slice(inv, 1, k, 1)?;
        tape.reshape(s, &[n])
    };
    let (i00, i01, i10, i11) = (entry(tape, 0)?, entry(tape, 1)?, entry(tape, 2)?, entry(tape, 3)?);
    let t0 = tape.mul(i00, bx)?;
    let t1 = tape.mul(i01, by)?;
    let delta_x = tape.add(t0, t1)?;
    let t2 = tape.mul(i10, bx)?;
    let t3 = tape.mul(i11, by)?;
    let delta_y = tape.add(t2, t3)?;

    let offset_x = column(tape, positives.iter().zip(starts).map(|(p, s)| p.ub.x - s.x).collect());
    let offset_y = column(tape, positives.iter().zip(starts).map(|(p, s)| p.ub.y - s.y).collect());
    let dx = tape.add(offset_x, delta_x)?;
    let dy = tape.add(offset_y, delta_y)?;

    let (e1, e2) = gaussian_nll_terms(tape, hxx, hxy, hyy, dx, dy)?;
    let e = tape.add(e1, e2)?;
    let total = tape.sum(e);
    let loss = tape.scale(total, 1.0 / n as f64);

    let dxv = tape.value(delta_x).data().to_vec();
    let dyv = tape.value(delta_y).data().to_vec();
    let means = starts
        .iter()
        .zip(dxv.iter().zip(&dyv))
        .map(|(s, (ddx, ddy))| Vector2::new(s.x - ddx, s.y - ddy))
        .collect();
    Ok(GaussNewtonLoss {
        loss,
        e1,
        e2,
        starts: starts.to_vec(),
        means,
    })
}

/// Gauss-Newton loss with `starts_per_pair` random start points per pair
/// drawn within `radius` of the true match.
#[allow(clippy::too_many_arguments)]
pub fn gauss_newton_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    fa: Var,
    fb: Var,
    positives: &[PixelPair],
    radius: f64,
    epsilon: f64,
    starts_per_pair: usize,
    rng: &mut R,
) -> Result<GaussNewtonLoss, LossError> {
    if positives.is_empty() {
        return Err(LossError::NoPositives);
    }
    let shape = tape.shape(fb).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut pairs = Vec::with_capacity(positives.len() * starts_per_pair);
    let mut starts = Vec::with_capacity(positives.len() * starts_per_pair);
    for p in positives {
        for _ in 0..starts_per_pair {
            starts.push(sample_start(rng, &p.ub, radius, w, h));
            pairs.push(*p);
        }
    }
    gauss_newton_loss_from_starts(tape, fa, fb, &pairs, &starts, epsilon)
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub contrastive: f64,
    pub gauss_newton: f64,
}

/// `sum over levels_used of contrastive(l) + gn_weight * gauss_newton(l)`.
/// `pyr_a`/`pyr_b` hold the per-level maps (finest first); the batch is in
/// level-0 pixels and is rescaled by `2^-l` per level.
pub fn total_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    pyr_a: &[Var],
    pyr_b: &[Var],
    batch: &CorrespondenceBatch,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<TotalLoss, LossError> {
    cfg.validate()?;
    let mut terms = Vec::new();
    let (mut contrastive, mut gauss_newton) = (0.0, 0.0);
    for &l in &cfg.levels_used {
        if l >= pyr_a.len() || l >= pyr_b.len() {
            return Err(LossError::MissingLevel {
                level: l,
                available: pyr_a.len().min(pyr_b.len()),
            });
        }
        let s = 1.0 / (1u64 << l) as f64;
        let pos: Vec<PixelPair> = batch.positives.iter().map(|p| p.scaled(s)).collect();
        let neg: Vec<PixelPair> = batch.negatives.iter().map(|p| p.scaled(s)).collect();
        if cfg.margin > 0.0 {
            let c = contrastive_loss(tape, pyr_a[l], pyr_b[l], &pos, &neg, cfg.margin)?;
            contrastive += tape.value(c).item();
            terms.push(c);
        }
        if cfg.gn_weight > 0.0 {
            let gn = gauss_newton_loss(
                tape,
                pyr_a[l],
                pyr_b[l],
                &pos,
                cfg.radius_at(l),
                cfg.epsilon,
                cfg.gn_starts,
                rng,
            )?;
            gauss_newton += tape.value(gn.loss).item();
            terms.push(tape.scale(gn.loss, cfg.gn_weight));
        }
    }
    let total = match terms.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = tape.add(acc, *t)?;
            }
            acc
        }
    };
    Ok(TotalLoss {
        total,
        contrastive,
        gauss_newton,
    })
}

/// Non-match sampling: for each positive, a uniformly drawn pixel in image b
/// (inside `margin` of the border) farther than `min_distance` from `ub`.
pub fn sample_negatives<R: Rng + ?Sized>(
    positives: &[PixelPair],
    count: usize,
    width: usize,
    height: usize,
    margin: f64,
    min_distance: f64,
    rng: &mut R,
) -> Vec<PixelPair> {
    let mut out = Vec::with_capacity(count);
    if positives.is_empty() {
        return out;
    }
    let (x_hi, y_hi) = (width as f64 - 1.0 - margin, height as f64 - 1.0 - margin);
    for i in 0..count {
        let p = positives[i % positives.len()];
        // Rejection sampling; images are far larger than the exclusion disc.
        for _ in 0..1000 {
            let ub = Vector2::new(rng.random_range(margin..=x_hi), rng.random_range(margin..=y_hi));
            if (ub - p.ub).norm() > min_distance {
                out.push(PixelPair { ua: p.ua, ub });
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;
    use nalgebra::Matrix2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Bilinear interpolation written out per pixel.
    fn naive_sample(m: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        (0..m.channels())
            .map(|c| {
                let g = |yy: usize, xx: usize| if yy < m.height() && xx < m.width() { m.at(c, yy, xx) } else { 0.0 };
                (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x0 + 1))
                    + fy * ((1.0 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1))
            })
            .collect()
    }

    fn naive_contrastive(fa: &FeatureMap, fb: &FeatureMap, pos: &[PixelPair], neg: &[PixelPair], m: f64) -> f64 {
        let dist = |p: &PixelPair| {
            let a = naive_sample(fa, p.ua.x, p.ua.y);
            let b = naive_sample(fb, p.ub.x, p.ub.y);
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut l = 0.0;
        if !pos.is_empty() {
            l += pos.iter().map(|p| dist(p).powi(2)).sum::<f64>() / pos.len() as f64;
        }
        if !neg.is_empty() {
            l += neg.iter().map(|p| (m - dist(p)).max(0.0).powi(2)).sum::<f64>() / neg.len() as f64;
        }
        l
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Vec<PixelPair> {
        (0..n)
            .map(|_| {
                PixelPair::new(
                    [rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64)],
                    [rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64)],
                )
            })
            .collect()
    }

    #[test]
    fn contrastive_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let fa = random_map(&mut rng, 4, 9, 11);
            let fb = random_map(&mut rng, 4, 9, 11);
            let pos = random_pairs(&mut rng, 7, 11, 9);
            let neg = random_pairs(&mut rng, 5, 11, 9);
            let mut tape = Tape::new();
            let a = tape.constant(fa.to_tensor());
            let b = tape.constant(fb.to_tensor());
            let l = contrastive_loss(&mut tape, a, b, &pos, &neg, 1.0).unwrap();
            let expected = naive_contrastive(&fa, &fb, &pos, &neg, 1.0);
            assert!((tape.value(l).item() - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn contrastive_identical_maps_have_zero_positive_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(&mut rng, 3, 8, 8);
        let mut tape = Tape::new();
        let a = tape.constant(f.to_tensor());
        let b = tape.constant(f.to_tensor());
        let pos: Vec<_> = (0..5).map(|i| PixelPair::new([i as f64 + 0.3, 2.7], [i as f64 + 0.3, 2.7])).collect();
        let l = contrastive_loss(&mut tape, a, b, &pos, &[], 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn negative_pair_at_half_margin() {
        // One channel: fa = 0 everywhere, fb = 0.5 everywhere -> D = 0.5.
        let mut tape = Tape::new();
        let a = tape.constant(FeatureMap::zeros(1, 4, 4).to_tensor());
        let b = tape.constant(FeatureMap::from_fn(1, 4, 4, |_, _, _| 0.5).to_tensor());
        let neg = [PixelPair::new([1.0, 1.0], [2.0, 2.0])];
        let l = contrastive_loss(&mut tape, a, b, &[], &neg, 1.0).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn contrastive_rejects_empty_batch() {
        let mut tape = Tape::new();
        let a = tape.constant(FeatureMap::zeros(1, 4, 4).to_tensor());
        assert!(matches!(
            contrastive_loss(&mut tape, a, a, &[], &[], 1.0),
            Err(LossError::EmptyBatch)
        ));
    }

    #[test]
    fn contrastive_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fa = random_map(&mut rng, 3, 10, 10);
        let fb = random_map(&mut rng, 3, 10, 10);
        let pos = random_pairs(&mut rng, 12, 10, 10);
        let neg = random_pairs(&mut rng, 9, 10, 10);
        let eval = |p: &[PixelPair], n: &[PixelPair]| {
            let mut tape = Tape::new();
            let a = tape.constant(fa.to_tensor());
            let b = tape.constant(fb.to_tensor());
            let l = contrastive_loss(&mut tape, a, b, p, n, 1.0).unwrap();
            tape.value(l).item()
        };
        let base = eval(&pos, &neg);
        let mut p2 = pos.clone();
        p2.reverse();
        let mut n2 = neg.clone();
        n2.rotate_left(4);
        assert!((eval(&p2, &n2) - base).abs() < 1e-12);
    }

    /// Unit-gradient map: channel 0 = x, channel 1 = y, so J = I and
    /// H = I + eps I.
    fn unit_gradient_map(h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(2, h, w, |c, y, x| if c == 0 { x as f64 } else { y as f64 })
    }

    #[test]
    fn unit_hessian_at_mean() {
        let f = unit_gradient_map(12, 12);
        let mut tape = Tape::new();
        let a = tape.constant(f.to_tensor());
        let b = tape.constant(f.to_tensor());
        let pair = PixelPair::new([5.0, 6.0], [5.0, 6.0]);
        // Start off the match: on a linear field one step lands on u_b.
        let gn = gauss_newton_loss_from_starts(&mut tape, a, b, &[pair], &[Vector2::new(6.5, 4.25)], 1e-14).unwrap();
        let e1 = tape.value(gn.e1).data()[0];
        let e2 = tape.value(gn.e2).data()[0];
        assert!(e1.abs() < 1e-12, "{e1}");
        assert!((e2 - LOG_2PI).abs() < 1e-12);
        assert!((e2 - 1.83788).abs() < 1e-5);
        assert!((gn.means[0] - pair.ub).norm() < 1e-12);
    }

    #[test]
    fn doubling_hessian_lowers_e2_by_log2() {
        let mut tape = Tape::new();
        let hxx = column(&mut tape, vec![3.0, 6.0]);
        let hxy = column(&mut tape, vec![0.5, 1.0]);
        let hyy = column(&mut tape, vec![2.0, 4.0]);
        let z = column(&mut tape, vec![0.0, 0.0]);
        let (e1, e2) = gaussian_nll_terms(&mut tape, hxx, hxy, hyy, z, z).unwrap();
        let e2v = tape.value(e2).data();
        assert!((e2v[0] - e2v[1] - 2f64.ln()).abs() < 1e-14);
        assert_eq!(tape.value(e1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn nll_terms_match_gaussian_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = Matrix2::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let h = a * a.transpose() + Matrix2::identity() * 0.1;
            let d = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let mut tape = Tape::new();
            let hxx = column(&mut tape, vec![h[(0, 0)]]);
            let hxy = column(&mut tape, vec![h[(0, 1)]]);
            let hyy = column(&mut tape, vec![h[(1, 1)]]);
            let dx = column(&mut tape, vec![d.x]);
            let dy = column(&mut tape, vec![d.y]);
            let (e1, e2) = gaussian_nll_terms(&mut tape, hxx, hxy, hyy, dx, dy).unwrap();
            let got = tape.value(e1).item() + tape.value(e2).item();
            let sigma = h.try_inverse().unwrap();
            let oracle = 0.5 * (d.transpose() * sigma.try_inverse().unwrap() * d)[0]
                + (2.0 * std::f64::consts::PI * sigma.determinant().sqrt()).ln();
            assert!((got - oracle).abs() < 1e-10);
            assert!(tape.value(e1).item() >= 0.0);
        }
    }

    #[test]
    fn zero_residual_gives_zero_e1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_map(&mut rng, 4, 10, 10);
        let mut tape = Tape::new();
        let a = tape.constant(f.to_tensor());
        let b = tape.constant(f.to_tensor());
        let pair = PixelPair::new([4.3, 5.6], [4.3, 5.6]);
        let gn = gauss_newton_loss_from_starts(&mut tape, a, b, &[pair], &[pair.ub], 1e-3).unwrap();
        assert!(tape.value(gn.e1).data()[0].abs() < 1e-20);
        assert!((gn.means[0] - pair.ub).norm() < 1e-12);
    }

    #[test]
    fn total_loss_with_zero_weight_is_contrastive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let maps_a: Vec<_> = [(16, 16), (8, 8)].iter().map(|(h, w)| random_map(&mut rng, 3, *h, *w)).collect();
        let maps_b: Vec<_> = [(16, 16), (8, 8)].iter().map(|(h, w)| random_map(&mut rng, 3, *h, *w)).collect();
        let batch = CorrespondenceBatch {
            frame_a: 0,
            frame_b: 1,
            positives: random_pairs(&mut rng, 6, 14, 14),
            negatives: random_pairs(&mut rng, 6, 14, 14),
        };
        let cfg = LossConfig { gn_weight: 0.0, levels_used: vec![0, 1], ..Default::default() };
        let mut tape = Tape::new();
        let a: Vec<Var> = maps_a.iter().map(|m| tape.constant(m.to_tensor())).collect();
        let b: Vec<Var> = maps_b.iter().map(|m| tape.constant(m.to_tensor())).collect();
        let t = total_loss(&mut tape, &a, &b, &batch, &cfg, &mut rng).unwrap();
        let mut expected = 0.0;
        for l in 0..2 {
            let s = 1.0 / (1 << l) as f64;
            let pos: Vec<_> = batch.positives.iter().map(|p| p.scaled(s)).collect();
            let neg: Vec<_> = batch.negatives.iter().map(|p| p.scaled(s)).collect();
            expected += naive_contrastive(&maps_a[l], &maps_b[l], &pos, &neg, 1.0);
        }
        assert!((tape.value(t.total).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn disabled_contrastive_reduces_to_gn_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fa = random_map(&mut rng, 3, 16, 16);
        let fb = random_map(&mut rng, 3, 16, 16);
        let batch = CorrespondenceBatch {
            positives: random_pairs(&mut rng, 6, 14, 14),
            ..Default::default()
        };
        let cfg = LossConfig { margin: 0.0, gn_weight: 1.0, levels_used: vec![0], ..Default::default() };
        let mut tape = Tape::new();
        let a = tape.constant(fa.to_tensor());
        let b = tape.constant(fb.to_tensor());
        let t = total_loss(&mut tape, &[a], &[b], &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let gn = gauss_newton_loss(&mut tape, a, b, &batch.positives, 4.0, 1e-3, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(tape.value(t.total).item(), tape.value(gn.loss).item());
    }

    #[test]
    fn negatives_respect_exclusion_zone() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pos = random_pairs(&mut rng, 20, 64, 64);
        let neg = sample_negatives(&pos, 50, 64, 64, 2.0, 8.0, &mut rng);
        assert_eq!(neg.len(), 50);
        for (i, n) in neg.iter().enumerate() {
            let p = pos[i % pos.len()];
            assert_eq!(n.ua, p.ua);
            assert!((n.ub - p.ub).norm() > 8.0);
            assert!(n.ub.x >= 2.0 && n.ub.x <= 61.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { vicinity_radius: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { gn_weight: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(LossConfig::default().radius_at(1), 2.0);
        assert_eq!(LossConfig::default().radius_at(3), 1.0);
    }
}
