//! Synthetic relocalization-tracking benchmark: scenes with exact depth and
//! poses, photometric conditions, correspondences, evaluation and dataset IO.

mod conditions;
mod dataset;
mod eval;
mod scene;

pub use conditions::{gaussian_blur, ConditionTransform};
pub use dataset::{
    decode_correspondences, decode_depth, decode_pgm, encode_correspondences, encode_depth, encode_pgm, read_dataset,
    write_dataset, DatasetError, DATASET_FORMAT_VERSION, DATASET_MAGIC,
};
pub use eval::{
    evaluate_relocalization, relocalization_error, render_svg, write_curve_csv, EvalCurve, EvalSummary,
};
pub use scene::{fractal_noise, random_pose, render, value_noise, Surface};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PointWithDepth, SE3Pose};
use crate::image::GrayImage;
use crate::losses::{sample_negatives, CorrespondenceBatch, PixelPair};

/// Border kept free around correspondences, level-0 pixels.
pub const CORRESPONDENCE_MARGIN: f64 = 4.0;
/// Minimum distance between a negative and the true match.
pub const NEGATIVE_MIN_DISTANCE: f64 = 8.0;
/// Relative depth disagreement treated as occlusion.
pub const OCCLUSION_DEPTH_TOL: f64 = 0.02;
/// Forward-backward reprojection tolerance, pixels.
pub const FORWARD_BACKWARD_TOL: f64 = 0.1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("degenerate trajectory: {0}")]
    Degenerate(String),
    #[error("frames {frame_a} and {frame_b}: only {found} valid matches, {required} requested")]
    TooFewMatches {
        frame_a: usize,
        frame_b: usize,
        found: usize,
        required: usize,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Frames per trajectory.
    pub frames: usize,
    /// Number of conditions; condition 0 is the reference stream.
    pub conditions: usize,
    /// Distance between consecutive reference frames along +X.
    pub frame_spacing: f64,
    /// Rotation jitter of reference frames, radians per axis.
    pub trajectory_jitter: f64,
    /// Lateral candidate offset magnitude range, scene units.
    pub offset_min: f64,
    pub offset_max: f64,
    /// Candidate offset along the optical axis, uniform in +-offset_depth.
    pub offset_depth: f64,
    /// Candidate rotation offset, radians per axis.
    pub candidate_rotation: f64,
    /// Minimum fraction of reference pixels visible in the candidate.
    pub min_overlap: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub pairs_per_scene: usize,
    pub positives: usize,
    pub negatives: usize,
    pub max_frame_gap: usize,
    pub z0: f64,
    pub amplitude: f64,
    pub height_frequency: f64,
    pub albedo_frequency: f64,
    pub octaves: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            width: 64,
            height: 64,
            focal: 56.0,
            frames: 10,
            conditions: 4,
            frame_spacing: 0.15,
            trajectory_jitter: 0.01,
            offset_min: 0.3,
            offset_max: 0.9,
            offset_depth: 0.15,
            candidate_rotation: 0.03,
            min_overlap: 0.5,
            train_scenes: 6,
            val_scenes: 2,
            test_scenes: 8,
            pairs_per_scene: 16,
            positives: 64,
            negatives: 64,
            max_frame_gap: 5,
            z0: 4.0,
            amplitude: 1.0,
            height_frequency: 0.35,
            albedo_frequency: 1.5,
            octaves: 4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, pyramid_levels: usize) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        if self.conditions == 0 {
            return bad("conditions must be >= 1".into());
        }
        let div = 1usize << pyramid_levels.saturating_sub(1);
        if self.width == 0 || self.height == 0 || self.width % div != 0 || self.height % div != 0 {
            return bad(format!(
                "image {}x{} not divisible by {div}",
                self.width, self.height
            ));
        }
        if self.width < 16 || self.height < 16 {
            return bad("images must be at least 16x16".into());
        }
        if !(self.focal > 0.0) {
            return bad("focal must be positive".into());
        }
        if !(self.offset_min >= 0.0 && self.offset_max >= self.offset_min) {
            return bad("offset range must satisfy 0 <= min <= max".into());
        }
        if !(self.z0 > self.amplitude && self.amplitude >= 0.0) {
            return bad("surface must stay in front of the cameras (z0 > amplitude >= 0)".into());
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return bad("min_overlap must be in [0, 1]".into());
        }
        if self.positives == 0 {
            return bad("positives must be >= 1".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    fn surface(&self, seed: u64) -> Surface {
        Surface {
            seed,
            z0: self.z0,
            amplitude: self.amplitude,
            height_frequency: self.height_frequency,
            albedo_frequency: self.albedo_frequency,
            octaves: self.octaves,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Unique within a split.
    pub id: usize,
    pub scene: usize,
    /// Position along the trajectory.
    pub index: usize,
    pub condition: usize,
    /// Camera-to-world.
    pub pose: SE3Pose,
    pub image: GrayImage,
    pub depth: DepthMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelocCandidate {
    pub candidate: usize,
    pub reference: usize,
    /// Maps reference-camera points into the candidate camera.
    pub gt_relative: SE3Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub surface: Surface,
    pub conditions: Vec<ConditionTransform>,
    pub frames: Vec<Frame>,
    pub candidates: Vec<RelocCandidate>,
}

/// Reference-camera points mapping into `candidate` view, over a 4 px grid.
fn overlap(surface: &Surface, reference: &SE3Pose, candidate: &SE3Pose, intr: &CameraIntrinsics) -> f64 {
    let rel = candidate.inverse().compose(reference);
    let (mut seen, mut total) = (0usize, 0usize);
    for y in (2..intr.height - 2).step_by(4) {
        for x in (2..intr.width - 2).step_by(4) {
            let px = Vector2::new(x as f64, y as f64);
            let Some(d) = surface.depth_at(reference, intr, &px) else {
                continue;
            };
            total += 1;
            let p = PointWithDepth::from_depth(px.x, px.y, d);
            if crate::geometry::project(&p, &rel, intr, intr, 2.0).is_some() {
                seen += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

fn render_frame(
    surface: &Surface,
    condition: &ConditionTransform,
    pose: SE3Pose,
    intr: &CameraIntrinsics,
    noise_seed: u64,
) -> (GrayImage, DepthMap) {
    let (rgb, depth) = render(surface, &pose, intr);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let image = condition.apply(&rgb, intr.width, intr.height, &mut rng);
    (
        image,
        DepthMap {
            width: intr.width,
            height: intr.height,
            data: depth,
        },
    )
}

/// Renders one scene: a reference trajectory (condition 0) and, for each
/// further condition, one offset candidate per reference frame. Frame ids
/// start at `first_id`.
pub fn generate_scene(
    seed: u64,
    scene_index: usize,
    first_id: usize,
    cfg: &DatasetConfig,
) -> Result<SyntheticScene, BenchError> {
    cfg.validate(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = cfg.intrinsics();
    let surface = cfg.surface(rng.random());
    let mut conditions = vec![ConditionTransform::identity()];
    for _ in 1..cfg.conditions {
        conditions.push(ConditionTransform::random(&mut rng));
    }
    let start = nalgebra::Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0);

    let mut ref_poses = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        let jitter = random_pose(&mut rng, [0.0; 3], cfg.trajectory_jitter);
        let t = start + nalgebra::Vector3::new(cfg.frame_spacing * k as f64, 0.0, 0.0);
        ref_poses.push(SE3Pose::from_parts(jitter.rotation, t));
    }
    let mut poses = Vec::new();
    for (k, p) in ref_poses.iter().enumerate() {
        poses.push((0, k, *p));
    }
    for c in 1..cfg.conditions {
        for (k, reference) in ref_poses.iter().enumerate() {
            let mut accepted = None;
            for _ in 0..100 {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let mag = rng.random_range(cfg.offset_min..=cfg.offset_max);
                let small = random_pose(&mut rng, [0.0, 0.0, cfg.offset_depth], cfg.candidate_rotation);
                let t = nalgebra::Vector3::new(mag * angle.cos(), mag * angle.sin(), small.translation.z);
                let offset = SE3Pose::from_parts(small.rotation, t);
                let cand = reference.compose(&offset);
                if overlap(&surface, reference, &cand, &intr) >= cfg.min_overlap {
                    accepted = Some(cand);
                    break;
                }
            }
            let cand = accepted.ok_or_else(|| {
                BenchError::Degenerate(format!(
                    "no candidate offset reaches {:.0}% overlap with reference frame {k}",
                    cfg.min_overlap * 100.0
                ))
            })?;
            poses.push((c, k, cand));
        }
    }

    let mut frames = Vec::with_capacity(poses.len());
    for (i, (c, k, pose)) in poses.into_iter().enumerate() {
        let id = first_id + i;
        let noise_seed = seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (image, depth) = render_frame(&surface, &conditions[c], pose, &intr, noise_seed);
        frames.push(Frame {
            id,
            scene: scene_index,
            index: k,
            condition: c,
            pose,
            image,
            depth,
        });
    }
    let candidates = frames
        .iter()
        .filter(|f| f.condition > 0)
        .map(|f| {
            let r = &frames[f.index];
            RelocCandidate {
                candidate: f.id,
                reference: r.id,
                gt_relative: f.pose.inverse().compose(&r.pose),
            }
        })
        .collect();
    Ok(SyntheticScene {
        seed,
        surface,
        conditions,
        frames,
        candidates,
    })
}

/// Reprojects `ua` from frame `a` into frame `b` through the exact surface
/// and back. Returns `(ub, error)` or `None` when out of view or occluded.
pub fn forward_backward(
    surface: &Surface,
    a: &SE3Pose,
    b: &SE3Pose,
    intr: &CameraIntrinsics,
    ua: &Vector2<f64>,
    margin: f64,
) -> Option<(Vector2<f64>, f64)> {
    let da = surface.depth_at(a, intr, ua)?;
    let xw = a.transform(&(intr.unproject_ray(ua) * da));
    let xb = b.inverse().transform(&xw);
    if !(xb.z > 0.0) {
        return None;
    }
    let ub = intr.project_point(&xb);
    if !intr.in_view(&ub, margin) {
        return None;
    }
    let db = surface.depth_at(b, intr, &ub)?;
    if (db - xb.z).abs() > OCCLUSION_DEPTH_TOL * xb.z {
        return None;
    }
    let xa = a.inverse().transform(&b.transform(&(intr.unproject_ray(&ub) * db)));
    if !(xa.z > 0.0) {
        return None;
    }
    let back = intr.project_point(&xa);
    Some((ub, (back - ua).norm()))
}

/// Positives from exact geometry (occlusion and forward-backward checked)
/// and negatives by the exclusion-zone rule.
pub fn make_correspondences(
    scene: &SyntheticScene,
    frame_a: &Frame,
    frame_b: &Frame,
    intr: &CameraIntrinsics,
    n_pos: usize,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CorrespondenceBatch, BenchError> {
    let m = CORRESPONDENCE_MARGIN;
    let (xh, yh) = (intr.width as f64 - 1.0 - m, intr.height as f64 - 1.0 - m);
    let mut positives = Vec::with_capacity(n_pos);
    for _ in 0..n_pos * 20 {
        if positives.len() == n_pos {
            break;
        }
        let ua = Vector2::new(rng.random_range(m..=xh), rng.random_range(m..=yh));
        if let Some((ub, err)) = forward_backward(&scene.surface, &frame_a.pose, &frame_b.pose, intr, &ua, m) {
            if err < FORWARD_BACKWARD_TOL {
                positives.push(PixelPair { ua, ub });
            }
        }
    }
    if positives.len() < n_pos {
        return Err(BenchError::TooFewMatches {
            frame_a: frame_a.id,
            frame_b: frame_b.id,
            found: positives.len(),
            required: n_pos,
        });
    }
    let negatives = sample_negatives(&positives, n_neg, intr.width, intr.height, m, NEGATIVE_MIN_DISTANCE, rng);
    Ok(CorrespondenceBatch {
        frame_a: frame_a.id,
        frame_b: frame_b.id,
        positives,
        negatives,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub seed: u64,
    pub scenes: Vec<SyntheticScene>,
    /// Training pairs with correspondences.
    pub pairs: Vec<CorrespondenceBatch>,
}

impl Split {
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.scenes.iter().flat_map(|s| s.frames.iter())
    }

    pub fn frame(&self, id: usize) -> Option<&Frame> {
        self.frames().find(|f| f.id == id)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &RelocCandidate> {
        self.scenes.iter().flat_map(|s| s.candidates.iter())
    }

    pub fn num_frames(&self) -> usize {
        self.scenes.iter().map(|s| s.frames.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        self.splits.iter().find(|s| s.name == name)
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn split_seed(seed: u64, split: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + split as u64);
    rng.random()
}

fn generate_pairs(
    scenes: &[SyntheticScene],
    cfg: &DatasetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CorrespondenceBatch>, BenchError> {
    let intr = cfg.intrinsics();
    let mut pairs = Vec::new();
    for scene in scenes {
        let frames = &scene.frames;
        let mut made = 0;
        let mut attempts = 0;
        while made < cfg.pairs_per_scene {
            attempts += 1;
            if attempts > cfg.pairs_per_scene * 20 {
                return Err(BenchError::Degenerate(format!(
                    "scene {}: could not find {} overlapping training pairs",
                    scene.seed, cfg.pairs_per_scene
                )));
            }
            let a = &frames[rng.random_range(0..frames.len())];
            let near: Vec<&Frame> = frames
                .iter()
                .filter(|f| f.id != a.id && f.index.abs_diff(a.index) <= cfg.max_frame_gap)
                .collect();
            if near.is_empty() {
                continue;
            }
            let b = near[rng.random_range(0..near.len())];
            match make_correspondences(scene, a, b, &intr, cfg.positives, cfg.negatives, rng) {
                Ok(batch) => {
                    pairs.push(batch);
                    made += 1;
                }
                Err(BenchError::TooFewMatches { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(pairs)
}

/// Generates the train/val/test splits from disjoint seeds. Only the
/// training split carries correspondence pairs.
pub fn generate_dataset(cfg: &DatasetConfig, pyramid_levels: usize) -> Result<Dataset, BenchError> {
    cfg.validate(pyramid_levels)?;
    let counts = [cfg.train_scenes, cfg.val_scenes, cfg.test_scenes];
    let mut splits = Vec::new();
    for (i, name) in SPLIT_NAMES.iter().enumerate() {
        let seed = split_seed(cfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scenes = Vec::with_capacity(counts[i]);
        let mut next_id = 0;
        for s in 0..counts[i] {
            let scene = generate_scene(rng.random(), s, next_id, cfg)?;
            next_id += scene.frames.len();
            scenes.push(scene);
        }
        let pairs = if i == 0 { generate_pairs(&scenes, cfg, &mut rng)? } else { Vec::new() };
        splits.push(Split {
            name: name.to_string(),
            seed,
            scenes,
            pairs,
        });
    }
    Ok(Dataset {
        config: cfg.clone(),
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            width: 32,
            height: 32,
            focal: 28.0,
            frames: 4,
            conditions: 2,
            train_scenes: 1,
            val_scenes: 1,
            test_scenes: 1,
            pairs_per_scene: 2,
            positives: 16,
            negatives: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_motion_frames_are_identical() {
        let cfg = DatasetConfig {
            frame_spacing: 0.0,
            trajectory_jitter: 0.0,
            conditions: 1,
            ..small()
        };
        let scene = generate_scene(9, 0, 0, &cfg).unwrap();
        for f in &scene.frames[1..] {
            assert_eq!(f.image, scene.frames[0].image);
            assert_eq!(f.depth, scene.frames[0].depth);
        }
    }

    #[test]
    fn self_correspondences_are_identity() {
        let cfg = small();
        let scene = generate_scene(3, 0, 0, &cfg).unwrap();
        let f = &scene.frames[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_correspondences(&scene, f, f, &cfg.intrinsics(), 20, 5, &mut rng).unwrap();
        for p in &batch.positives {
            assert!((p.ua - p.ub).norm() < 1e-9);
        }
    }

    #[test]
    fn fronto_parallel_translation_has_constant_disparity() {
        let cfg = small();
        let mut scene = generate_scene(3, 0, 0, &cfg).unwrap();
        scene.surface.amplitude = 0.0;
        let mut a = scene.frames[0].clone();
        a.pose = SE3Pose::from_translation(a.pose.translation);
        let mut b = a.clone();
        b.pose = SE3Pose::from_translation(a.pose.translation + nalgebra::Vector3::new(0.2, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_correspondences(&scene, &a, &b, &cfg.intrinsics(), 20, 0, &mut rng).unwrap();
        let expected = -cfg.focal * 0.2 / cfg.z0;
        for p in &batch.positives {
            assert!((p.ub.x - p.ua.x - expected).abs() < 1e-9);
            assert!((p.ub.y - p.ua.y).abs() < 1e-9);
        }
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let d = generate_dataset(&small(), 2).unwrap();
        let mut seeds: Vec<u64> = d.splits.iter().flat_map(|s| s.scenes.iter().map(|x| x.seed)).collect();
        let n = seeds.len();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), n);
        assert_eq!(d.splits[0].pairs.len(), 2);
    }

    #[test]
    fn candidates_reference_condition_zero() {
        let cfg = small();
        let scene = generate_scene(4, 0, 10, &cfg).unwrap();
        assert_eq!(scene.candidates.len(), cfg.frames * (cfg.conditions - 1));
        for c in &scene.candidates {
            let r = scene.frames.iter().find(|f| f.id == c.reference).unwrap();
            let f = scene.frames.iter().find(|f| f.id == c.candidate).unwrap();
            assert_eq!(r.condition, 0);
            assert_eq!(r.index, f.index);
            let off = c.gt_relative.translation.norm();
            assert!(off >= cfg.offset_min - 1e-9 && off <= (cfg.offset_max.powi(2) + cfg.offset_depth.powi(2)).sqrt() + 1e-9);
        }
    }

    #[test]
    fn zero_frames_rejected() {
        let cfg = DatasetConfig { frames: 0, ..small() };
        assert!(matches!(generate_dataset(&cfg, 3), Err(BenchError::Config(_))));
    }

    #[test]
    fn impossible_overlap_is_degenerate() {
        let cfg = DatasetConfig {
            offset_min: 20.0,
            offset_max: 30.0,
            ..small()
        };
        assert!(matches!(generate_scene(1, 0, 0, &cfg), Err(BenchError::Degenerate(_))));
    }
}
