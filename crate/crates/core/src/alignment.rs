//! Runtime solvers: per-pixel Gauss-Newton tracking and coarse-to-fine
//! 6-DOF feature-metric pose alignment with Levenberg damping.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x6, Matrix6, SMatrix, SVector, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMap, FeaturePyramid};
use crate::geometry::{projection_jacobian, CameraIntrinsics, PointWithDepth, SE3Pose};
use crate::image::GrayImage;
use crate::net::{NetError, NetworkWeights};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("only {valid} valid points, need at least {required}")]
    TooFewPoints { valid: usize, required: usize },
    #[error("derivative stencil at ({x}, {y}) leaves the {width}x{height} map")]
    StencilOutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("pyramid has {available} levels, level {level} requested")]
    MissingLevel { level: usize, available: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Normal equations `H x = b` of an `N`-parameter least-squares problem.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussNewtonSystem<const N: usize> {
    pub h: SMatrix<f64, N, N>,
    pub b: SVector<f64, N>,
    pub residual_sq_sum: f64,
    pub num_residuals: usize,
}

pub type PixelSystem = GaussNewtonSystem<2>;
pub type PoseSystem = GaussNewtonSystem<6>;

impl<const N: usize> GaussNewtonSystem<N> {
    pub fn zeros() -> Self {
        Self {
            h: SMatrix::zeros(),
            b: SVector::zeros(),
            residual_sq_sum: 0.0,
            num_residuals: 0,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.h == self.h.transpose()
    }

    /// Numerical rank of `H` from its singular values, relative to the largest.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let sv = DMatrix::from_iterator(N, N, self.h.iter().copied()).singular_values();
        let max = sv.max();
        if max <= 0.0 {
            return 0;
        }
        sv.iter().filter(|s| **s > rel_tol * max).count()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank(1e-12) < N
    }
}

/// Robust weighting and solver settings for pose alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub max_iterations: usize,
    pub step_norm_tol: f64,
    /// Huber threshold on the residual norm.
    pub huber_delta: f64,
    /// `c` of the gradient weight `c^2 / (c^2 + |grad F'|^2)`; `None` disables it.
    pub gradient_weight_const: Option<f64>,
    /// Pyramid levels, coarse to fine.
    pub levels: Vec<usize>,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Giving up threshold for the damping factor.
    pub lambda_max: f64,
    pub border_margin: f64,
    pub min_points: usize,
}

impl AlignmentConfig {
    /// Raw intensities in `[0, 255]`.
    pub fn for_intensity() -> Self {
        Self {
            huber_delta: 9.0,
            gradient_weight_const: Some(50.0),
            ..Self::for_features()
        }
    }

    /// Use the `n` finest levels, coarse to fine.
    pub fn with_levels(self, n: usize) -> Self {
        Self {
            levels: (0..n).rev().collect(),
            ..self
        }
    }

    pub fn for_features() -> Self {
        Self {
            max_iterations: 50,
            step_norm_tol: 1e-6,
            huber_delta: 2.0,
            gradient_weight_const: None,
            levels: vec![2, 1, 0],
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 2.0,
            lambda_max: 1e8,
            border_margin: crate::geometry::DEFAULT_BORDER_MARGIN,
            min_points: 6,
        }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: &str| Err(AlignError::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1");
        }
        if !(self.step_norm_tol > 0.0 && self.huber_delta > 0.0) {
            return bad("tolerances must be positive");
        }
        if let Some(c) = self.gradient_weight_const {
            if !(c > 0.0) {
                return bad("gradient weight constant must be positive");
            }
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[0] <= w[1]) {
            return bad("levels must be non-empty and strictly coarse to fine");
        }
        if !(self.lambda_init > 0.0 && self.lambda_up > 1.0 && self.lambda_down > 1.0) {
            return bad("damping schedule must be positive and expanding");
        }
        if self.min_points < 6 {
            return bad("min_points must be >= 6");
        }
        Ok(())
    }
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self::for_features()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub pose: SE3Pose,
    pub converged: bool,
    pub iterations: usize,
    /// RMS residual norm over valid points at the finest level.
    pub final_residual: f64,
    /// Points in view with residual norm below the Huber threshold, over all points.
    pub inlier_fraction: f64,
}

/// Huber IRLS weight for a residual norm.
pub fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

/// Huber cost for a residual norm.
pub fn huber_cost(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        0.5 * norm * norm
    } else {
        delta * (norm - 0.5 * delta)
    }
}

pub fn gradient_weight(grad_sq_norm: f64, c: Option<f64>) -> f64 {
    match c {
        Some(c) => c * c / (c * c + grad_sq_norm),
        None => 1.0,
    }
}

/// `F_tgt(p') - f_ref` for one point.
pub fn residual(f_tgt: &FeatureMap, projected: &Vector2<f64>, f_ref: &[f64]) -> Vec<f64> {
    let mut r = f_tgt.sample(projected.x, projected.y);
    for (ri, fi) in r.iter_mut().zip(f_ref) {
        *ri -= fi;
    }
    r
}

/// Per-pixel system at `x` for target descriptor `f_t`: central-difference
/// `J'`, `H' = J'^T J'` and `b' = J'^T r`.
pub fn pixel_system(f_tgt: &FeatureMap, x: &Vector2<f64>, f_t: &[f64]) -> Result<PixelSystem, AlignError> {
    if !f_tgt.stencil_valid(x.x, x.y) {
        return Err(AlignError::StencilOutOfBounds {
            x: x.x,
            y: x.y,
            width: f_tgt.width(),
            height: f_tgt.height(),
        });
    }
    let d = f_tgt.channels();
    let r = residual(f_tgt, x, f_t);
    let (mut jx, mut jy) = (vec![0.0; d], vec![0.0; d]);
    f_tgt.gradient_into(x.x, x.y, &mut jx, &mut jy);
    let (mut hxx, mut hxy, mut hyy, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..d {
        hxx += jx[i] * jx[i];
        hxy += jx[i] * jy[i];
        hyy += jy[i] * jy[i];
        bx += jx[i] * r[i];
        by += jy[i] * r[i];
    }
    Ok(PixelSystem {
        h: Matrix2::new(hxx, hxy, hxy, hyy),
        b: Vector2::new(bx, by),
        residual_sq_sum: r.iter().map(|v| v * v).sum(),
        num_residuals: 1,
    })
}

/// One per-pixel Gauss-Newton step `x <- x_s - (H' + eps I)^-1 b'`, with the
/// same closed-form 2x2 inverse as the training loss.
pub fn pixel_gn_step(
    f_tgt: &FeatureMap,
    x_s: &Vector2<f64>,
    f_t: &[f64],
    epsilon: f64,
) -> Result<(PixelSystem, Vector2<f64>), AlignError> {
    let sys = pixel_system(f_tgt, x_s, f_t)?;
    let (hxx, hxy, hyy) = (sys.h[(0, 0)] + epsilon, sys.h[(0, 1)], sys.h[(1, 1)] + epsilon);
    let id = 1.0 / (hxx * hyy - hxy * hxy);
    let (i00, i01, i10, i11) = (hyy * id, -hxy * id, -hxy * id, hxx * id);
    let dx = i00 * sys.b.x + i01 * sys.b.y;
    let dy = i10 * sys.b.x + i11 * sys.b.y;
    Ok((sys, Vector2::new(x_s.x - dx, x_s.y - dy)))
}

/// Iterated per-pixel tracking on one map. Returns the final position, or
/// `None` if the stencil leaves the map.
pub fn track_pixel(
    f_tgt: &FeatureMap,
    start: &Vector2<f64>,
    f_t: &[f64],
    epsilon: f64,
    max_iterations: usize,
    step_tol: f64,
) -> Option<Vector2<f64>> {
    let mut x = *start;
    for _ in 0..max_iterations {
        let (_, next) = pixel_gn_step(f_tgt, &x, f_t, epsilon).ok()?;
        let step = (next - x).norm();
        x = next;
        if step < step_tol {
            break;
        }
    }
    f_tgt.stencil_valid(x.x, x.y).then_some(x)
}

/// Coarse-to-fine per-pixel tracking over `levels` (coarse to fine), with
/// `f_t[l]` the target descriptor at level `l` and `start` in level-0 pixels.
pub fn track_pixel_pyramid(
    pyr_tgt: &FeaturePyramid,
    start: &Vector2<f64>,
    f_t: &[Vec<f64>],
    levels: &[usize],
    epsilon: f64,
    max_iterations: usize,
    step_tol: f64,
) -> Option<Vector2<f64>> {
    let mut x = *start;
    for &l in levels {
        let s = (1u64 << l) as f64;
        let xl = track_pixel(pyr_tgt.level(l), &(x / s), &f_t[l], epsilon, max_iterations, step_tol)?;
        x = xl * s;
    }
    Some(x)
}

/// Reference points of one pyramid level with their descriptors sampled once.
#[derive(Clone, Debug)]
pub struct LevelReference {
    pub points: Vec<PointWithDepth>,
    pub intrinsics: CameraIntrinsics,
    channels: usize,
    features: Vec<f64>,
}

impl LevelReference {
    pub fn new(f_ref: &FeatureMap, points: Vec<PointWithDepth>, intrinsics: CameraIntrinsics) -> Self {
        let channels = f_ref.channels();
        let mut features = vec![0.0; points.len() * channels];
        for (p, out) in points.iter().zip(features.chunks_exact_mut(channels)) {
            f_ref.sample_into(p.pixel.x, p.pixel.y, out);
        }
        Self {
            points,
            intrinsics,
            channels,
            features,
        }
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

/// Linearisation of one valid point at the current pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PointLinearization {
    pub index: usize,
    pub projected: Vector2<f64>,
    pub residual: DVector<f64>,
    /// `dF'/dp'`, `D x 2`.
    pub feature_jacobian: DMatrix<f64>,
    /// `dp'/dxi`.
    pub pose_jacobian: Matrix2x6<f64>,
    pub weight: f64,
}

impl PointLinearization {
    pub fn pixel_system(&self) -> PixelSystem {
        let jf = &self.feature_jacobian;
        let h = jf.transpose() * jf;
        let b = jf.transpose() * &self.residual;
        PixelSystem {
            h: Matrix2::new(h[(0, 0)], h[(0, 1)], h[(0, 1)], h[(1, 1)]),
            b: Vector2::new(b[0], b[1]),
            residual_sq_sum: self.residual.norm_squared(),
            num_residuals: 1,
        }
    }
}

/// Linearises every point that projects in view of `f_tgt` under `pose`.
pub fn linearize(
    reference: &LevelReference,
    f_tgt: &FeatureMap,
    pose: &SE3Pose,
    intr_tgt: &CameraIntrinsics,
    cfg: &AlignmentConfig,
) -> Vec<PointLinearization> {
    let d = reference.channels;
    let (mut jx, mut jy) = (vec![0.0; d], vec![0.0; d]);
    let mut out = Vec::new();
    for (i, p) in reference.points.iter().enumerate() {
        if !(p.inverse_depth > 0.0) {
            continue;
        }
        let q = pose.transform(&p.unproject(&reference.intrinsics));
        if !(q.z > 0.0) {
            continue;
        }
        let pp = intr_tgt.project_point(&q);
        if !intr_tgt.in_view(&pp, cfg.border_margin) {
            continue;
        }
        let r = DVector::from_vec(residual(f_tgt, &pp, reference.feature(i)));
        f_tgt.gradient_into(pp.x, pp.y, &mut jx, &mut jy);
        let grad_sq: f64 = jx.iter().chain(&jy).map(|v| v * v).sum();
        let weight = huber_weight(r.norm(), cfg.huber_delta) * gradient_weight(grad_sq, cfg.gradient_weight_const);
        let feature_jacobian = DMatrix::from_fn(d, 2, |row, col| if col == 0 { jx[row] } else { jy[row] });
        out.push(PointLinearization {
            index: i,
            projected: pp,
            residual: r,
            feature_jacobian,
            pose_jacobian: projection_jacobian(&q, intr_tgt),
            weight,
        });
    }
    out
}

fn symmetrize(h: &mut Matrix6<f64>) {
    for i in 0..6 {
        for j in 0..i {
            h[(i, j)] = h[(j, i)];
        }
    }
}

/// `H = sum w J^T J`, `b = -sum w J^T r` with `J = dF'/dp' * dp'/dxi`,
/// accumulated in point order.
pub fn assemble_pose_system(lins: &[PointLinearization]) -> PoseSystem {
    let mut sys = PoseSystem::zeros();
    for l in lins {
        let j = &l.feature_jacobian * l.pose_jacobian;
        for a in 0..6 {
            for c in a..6 {
                sys.h[(a, c)] += l.weight * j.column(a).dot(&j.column(c));
            }
            sys.b[a] -= l.weight * j.column(a).dot(&l.residual);
        }
        sys.residual_sq_sum += l.residual.norm_squared();
        sys.num_residuals += 1;
    }
    symmetrize(&mut sys.h);
    sys
}

/// The same pose system built from per-pixel systems:
/// `H = sum w P^T H' P`, `b = -sum w P^T b'` with `P = dp'/dxi`.
pub fn combine_pixel_systems(lins: &[PointLinearization]) -> PoseSystem {
    let mut sys = PoseSystem::zeros();
    for l in lins {
        let px = l.pixel_system();
        let p = &l.pose_jacobian;
        let mut h = p.transpose() * px.h * p;
        h *= l.weight;
        sys.h += h;
        sys.b -= p.transpose() * px.b * l.weight;
        sys.residual_sq_sum += px.residual_sq_sum;
        sys.num_residuals += 1;
    }
    symmetrize(&mut sys.h);
    sys
}

/// Direct pose system at `pose`; fails with fewer than `cfg.min_points`
/// valid points.
pub fn build_pose_system(
    reference: &LevelReference,
    f_tgt: &FeatureMap,
    pose: &SE3Pose,
    intr_tgt: &CameraIntrinsics,
    cfg: &AlignmentConfig,
) -> Result<PoseSystem, AlignError> {
    let lins = linearize(reference, f_tgt, pose, intr_tgt, cfg);
    if lins.len() < cfg.min_points {
        return Err(AlignError::TooFewPoints {
            valid: lins.len(),
            required: cfg.min_points,
        });
    }
    Ok(assemble_pose_system(&lins))
}

/// Mean robust energy `g_i * huber(|r_i|)` over valid points, with the count
/// of valid points and of inliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy {
    pub mean: f64,
    pub valid: usize,
    pub inliers: usize,
    pub rms: f64,
}

pub fn energy(lins: &[PointLinearization], cfg: &AlignmentConfig) -> Energy {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut inliers = 0;
    for l in lins {
        let n = l.residual.norm();
        let g = gradient_weight(l.feature_jacobian.norm_squared(), cfg.gradient_weight_const);
        sum += g * huber_cost(n, cfg.huber_delta);
        sq += n * n;
        if n <= cfg.huber_delta {
            inliers += 1;
        }
    }
    let k = lins.len().max(1) as f64;
    Energy {
        mean: sum / k,
        valid: lins.len(),
        inliers,
        rms: (sq / k).sqrt(),
    }
}

/// Damped solve `(H + lambda diag(H)) delta = b`.
pub fn damped_step(sys: &PoseSystem, lambda: f64) -> Option<Vector6<f64>> {
    let mut a = sys.h;
    for i in 0..6 {
        a[(i, i)] += lambda * sys.h[(i, i)].max(1e-12);
    }
    a.cholesky().map(|c| c.solve(&sys.b))
}

/// Coarse-to-fine Levenberg-damped Gauss-Newton on the pose. Points are in
/// level-0 pixels of the reference camera; `intr` is the level-0 camera.
pub fn align_pose(
    pyr_ref: &FeaturePyramid,
    pyr_tgt: &FeaturePyramid,
    points: &[PointWithDepth],
    init_pose: &SE3Pose,
    intr: &CameraIntrinsics,
    cfg: &AlignmentConfig,
) -> Result<TrackResult, AlignError> {
    cfg.validate()?;
    for &l in &cfg.levels {
        if l >= pyr_ref.num_levels() || l >= pyr_tgt.num_levels() {
            return Err(AlignError::MissingLevel {
                level: l,
                available: pyr_ref.num_levels().min(pyr_tgt.num_levels()),
            });
        }
    }
    let mut pose = *init_pose;
    let mut iterations = 0;
    let mut converged = false;
    let mut last = Energy {
        mean: f64::INFINITY,
        valid: 0,
        inliers: 0,
        rms: f64::INFINITY,
    };
    let failed = |pose: SE3Pose, iterations: usize, e: &Energy| TrackResult {
        pose,
        converged: false,
        iterations,
        final_residual: e.rms,
        inlier_fraction: e.inliers as f64 / points.len().max(1) as f64,
    };

    for &l in &cfg.levels {
        let intr_l = intr.at_level(l);
        let pts: Vec<_> = points.iter().map(|p| p.at_level(l)).collect();
        let reference = LevelReference::new(pyr_ref.level(l), pts, intr_l);
        let f_tgt = pyr_tgt.level(l);

        let mut lins = linearize(&reference, f_tgt, &pose, &intr_l, cfg);
        last = energy(&lins, cfg);
        if lins.len() < cfg.min_points {
            return Ok(failed(pose, iterations, &last));
        }
        let mut sys = assemble_pose_system(&lins);
        let mut lambda = cfg.lambda_init;
        converged = false;
        for _ in 0..cfg.max_iterations {
            let Some(delta) = damped_step(&sys, lambda) else {
                lambda *= cfg.lambda_up;
                iterations += 1;
                if lambda > cfg.lambda_max {
                    break;
                }
                continue;
            };
            if !delta.iter().all(|v| v.is_finite()) {
                break;
            }
            if delta.norm() < cfg.step_norm_tol {
                converged = true;
                break;
            }
            iterations += 1;
            let candidate = pose.left_update(&delta);
            let cand_lins = linearize(&reference, f_tgt, &candidate, &intr_l, cfg);
            let cand_energy = energy(&cand_lins, cfg);
            if cand_lins.len() >= cfg.min_points && cand_energy.mean < last.mean {
                pose = candidate;
                lins = cand_lins;
                last = cand_energy;
                sys = assemble_pose_system(&lins);
                lambda /= cfg.lambda_down;
            } else {
                lambda *= cfg.lambda_up;
                if lambda > cfg.lambda_max {
                    break;
                }
            }
        }
    }
    Ok(TrackResult {
        pose,
        converged,
        iterations,
        final_residual: last.rms,
        inlier_fraction: last.inliers as f64 / points.len().max(1) as f64,
    })
}

/// A reference frame with sparse depths.
#[derive(Clone, Debug)]
pub struct Keyframe {
    pub image: GrayImage,
    pub intrinsics: CameraIntrinsics,
    pub points: Vec<PointWithDepth>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSelection {
    pub max_points: usize,
    pub min_spacing: f64,
    pub border: usize,
}

impl Default for PointSelection {
    fn default() -> Self {
        Self {
            max_points: 512,
            min_spacing: 4.0,
            border: 4,
        }
    }
}

/// Greedy top-K selection by intensity-gradient magnitude with a minimum
/// spacing. Ties break on raster order.
pub fn select_points(image: &GrayImage, sel: &PointSelection) -> Vec<(usize, usize)> {
    let (w, h) = (image.width(), image.height());
    let mut cands = Vec::new();
    for y in sel.border.max(1)..h.saturating_sub(sel.border.max(1)) {
        for x in sel.border.max(1)..w.saturating_sub(sel.border.max(1)) {
            let gx = image.get(x + 1, y) as f64 - image.get(x - 1, y) as f64;
            let gy = image.get(x, y + 1) as f64 - image.get(x, y - 1) as f64;
            cands.push((gx * gx + gy * gy, x, y));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let cell = sel.min_spacing.max(1.0);
    let (gw, gh) = ((w as f64 / cell).ceil() as usize + 1, (h as f64 / cell).ceil() as usize + 1);
    let mut grid: Vec<Vec<(usize, usize)>> = vec![Vec::new(); gw * gh];
    let mut out = Vec::new();
    let min_sq = sel.min_spacing * sel.min_spacing;
    for (_, x, y) in cands {
        if out.len() >= sel.max_points {
            break;
        }
        let (cx, cy) = ((x as f64 / cell) as usize, (y as f64 / cell) as usize);
        let mut ok = true;
        'scan: for ny in cy.saturating_sub(1)..=(cy + 1).min(gh - 1) {
            for nx in cx.saturating_sub(1)..=(cx + 1).min(gw - 1) {
                for &(px, py) in &grid[ny * gw + nx] {
                    let (dx, dy) = (px as f64 - x as f64, py as f64 - y as f64);
                    if dx * dx + dy * dy < min_sq {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            grid[cy * gw + cx].push((x, y));
            out.push((x, y));
        }
    }
    out
}

impl Keyframe {
    /// Selects points on `image` and attaches depths from a dense row-major
    /// depth map.
    pub fn from_depth(image: GrayImage, depth: &[f64], intrinsics: CameraIntrinsics, sel: &PointSelection) -> Self {
        let w = image.width();
        let points = select_points(&image, sel)
            .into_iter()
            .filter(|(x, y)| depth[y * w + x] > 0.0)
            .map(|(x, y)| PointWithDepth::from_depth(x as f64, y as f64, depth[y * w + x]))
            .collect();
        Self {
            image,
            intrinsics,
            points,
        }
    }
}

/// Source of the maps that alignment runs on.
#[derive(Clone, Copy, Debug)]
pub enum FeatureExtractor<'a> {
    /// Raw intensities in `[0, 255]` with a box-filter pyramid.
    Intensity,
    Network(&'a NetworkWeights),
}

impl FeatureExtractor<'_> {
    pub fn pyramid(&self, image: &GrayImage, levels: usize) -> Result<FeaturePyramid, AlignError> {
        match self {
            FeatureExtractor::Intensity => Ok(image.intensity_pyramid(levels)),
            FeatureExtractor::Network(w) => Ok(w.extract_pyramid(&image.to_network_input())?),
        }
    }
}

/// Tracks `candidate` against the keyframe starting from identity.
pub fn track_candidate(
    keyframe: &Keyframe,
    candidate: &GrayImage,
    extractor: FeatureExtractor<'_>,
    cfg: &AlignmentConfig,
) -> Result<TrackResult, AlignError> {
    let levels = cfg.levels.iter().max().map_or(1, |l| l + 1);
    let pyr_ref = extractor.pyramid(&keyframe.image, levels)?;
    let pyr_tgt = extractor.pyramid(candidate, levels)?;
    align_pose(
        &pyr_ref,
        &pyr_tgt,
        &keyframe.points,
        &SE3Pose::identity(),
        &keyframe.intrinsics,
        cfg,
    )
}
