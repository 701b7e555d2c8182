//! End-to-end procedures: training, relocalization evaluation, the
//! per-pixel basin experiment and the network gradient check.

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{track_candidate, track_pixel, AlignError, AlignmentConfig, FeatureExtractor, Keyframe, PointSelection};
use crate::benchmark::{
    evaluate_relocalization, make_correspondences, relocalization_error, BenchError, EvalSummary, Split,
};
use crate::geometry::CameraIntrinsics;
use crate::image::GrayImage;
use crate::losses::{contrastive_loss, gauss_newton_loss, total_loss, CorrespondenceBatch, LossConfig, LossError};
use crate::net::{NetError, NetworkWeights};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("non-finite {what} at epoch {epoch}, pair {pair} (frames {frame_a} -> {frame_b})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        pair: usize,
        frame_a: usize,
        frame_b: usize,
    },
    #[error("frame {0} not found in split")]
    MissingFrame(usize),
    #[error("split has no {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Track the validation split after every epoch and keep the best epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            seed: 0,
            loss: LossConfig::default(),
            validate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub contrastive: f64,
    pub gauss_newton: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: NetworkWeights,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

fn image_of<'a>(split: &'a Split, id: usize) -> Result<&'a GrayImage, PipelineError> {
    split.frame(id).map(|f| &f.image).ok_or(PipelineError::MissingFrame(id))
}

fn input(tape: &mut Tape, image: &GrayImage) -> Var {
    tape.constant(image.to_network_input().to_tensor())
}

/// Loss values and parameter gradients for one image pair.
pub fn pair_gradients(
    weights: &NetworkWeights,
    image_a: &GrayImage,
    image_b: &GrayImage,
    batch: &CorrespondenceBatch,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64, Vec<Tensor>), PipelineError> {
    let mut tape = Tape::new();
    let bound = weights.bind_trainable(&mut tape);
    let xa = input(&mut tape, image_a);
    let xb = input(&mut tape, image_b);
    let fa = weights.forward(&mut tape, &bound, xa)?;
    let fb = weights.forward(&mut tape, &bound, xb)?;
    let t = total_loss(&mut tape, &fa, &fb, batch, loss, rng)?;
    let value = tape.value(t.total).item();
    let mut grads = tape.backward(t.total)?;
    let g = bound
        .vars
        .iter()
        .zip(weights.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, t.contrastive, t.gauss_newton, g))
}

/// ADAM training over the split's correspondence pairs, one pair per step,
/// visiting pairs in a seeded random order each epoch. `on_epoch` sees every
/// epoch's log and current weights.
pub fn train(
    initial: &NetworkWeights,
    train_split: &Split,
    val_split: Option<&Split>,
    intr: &CameraIntrinsics,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &NetworkWeights),
) -> Result<TrainOutcome, PipelineError> {
    if train_split.pairs.is_empty() {
        return Err(PipelineError::Empty("training pairs"));
    }
    cfg.loss.validate()?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut weights = initial.clone();
    let mut state = AdamState::new(weights.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_split.pairs.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best = (weights.clone(), 0usize, f64::NEG_INFINITY);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut con, mut gn) = (0.0, 0.0, 0.0);
        for (step, &k) in order.iter().enumerate() {
            let batch = &train_split.pairs[k];
            let a = image_of(train_split, batch.frame_a)?;
            let b = image_of(train_split, batch.frame_b)?;
            let (value, c, g, grads) = pair_gradients(&weights, a, b, batch, &cfg.loss, &mut rng)?;
            let non_finite = |what| PipelineError::NonFinite {
                what,
                epoch,
                pair: step,
                frame_a: batch.frame_a,
                frame_b: batch.frame_b,
            };
            if !value.is_finite() {
                return Err(non_finite("loss"));
            }
            if !grads.iter().all(Tensor::is_finite) {
                return Err(non_finite("gradient"));
            }
            state.step(weights.params_mut(), &grads, &adam)?;
            if !weights.is_finite() {
                return Err(non_finite("weights"));
            }
            tot += value;
            con += c;
            gn += g;
        }
        let n = order.len() as f64;
        let val_auc = match (cfg.validate, val_split) {
            (true, Some(v)) => {
                let errors = relocalization_errors(v, intr, FeatureExtractor::Network(&weights), &AlignmentConfig::for_features().with_levels(weights.config().pyramid_levels.min(3)))?;
                Some(evaluate_relocalization(&errors).1.auc)
            }
            _ => None,
        };
        let log = EpochLog {
            epoch,
            total: tot / n,
            contrastive: con / n,
            gauss_newton: gn / n,
            val_auc,
        };
        // Without validation the latest epoch is kept.
        let score = val_auc.unwrap_or(epoch as f64);
        if score > best.2 {
            best = (weights.clone(), epoch, score);
        }
        on_epoch(&log, &weights);
        logs.push(log);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        logs,
    })
}

pub fn keyframe_for(split: &Split, reference: usize, intr: &CameraIntrinsics) -> Result<Keyframe, PipelineError> {
    let f = split.frame(reference).ok_or(PipelineError::MissingFrame(reference))?;
    Ok(Keyframe::from_depth(
        f.image.clone(),
        &f.depth.data,
        *intr,
        &PointSelection::default(),
    ))
}

/// Tracks every candidate of the split from identity; failures give
/// infinite error.
pub fn relocalization_errors(
    split: &Split,
    intr: &CameraIntrinsics,
    extractor: FeatureExtractor<'_>,
    cfg: &AlignmentConfig,
) -> Result<Vec<f64>, PipelineError> {
    let mut errors = Vec::new();
    for c in split.candidates() {
        let kf = keyframe_for(split, c.reference, intr)?;
        let img = image_of(split, c.candidate)?;
        let result = track_candidate(&kf, img, extractor, cfg)?;
        errors.push(relocalization_error(c, &result));
    }
    Ok(errors)
}

pub fn evaluate_split(
    split: &Split,
    intr: &CameraIntrinsics,
    extractor: FeatureExtractor<'_>,
    cfg: &AlignmentConfig,
) -> Result<(crate::benchmark::EvalCurve, EvalSummary), PipelineError> {
    let errors = relocalization_errors(split, intr, extractor, cfg)?;
    if errors.is_empty() {
        return Err(PipelineError::Empty("relocalization candidates"));
    }
    Ok(evaluate_relocalization(&errors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinConfig {
    pub trials: usize,
    /// Half-width of the start square around the true match, level-0 pixels.
    pub radius: f64,
    pub success_px: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for BasinConfig {
    fn default() -> Self {
        Self {
            trials: 5000,
            radius: 4.0,
            success_px: 0.5,
            epsilon: 1e-3,
            max_iterations: 20,
            seed: 7,
        }
    }
}

/// Shared trial set for the per-pixel basin experiment: target pixel in the
/// reference frame, true match and start point in the candidate frame.
#[derive(Clone, Debug)]
pub struct BasinTrial {
    pub reference: usize,
    pub candidate: usize,
    pub ua: Vector2<f64>,
    pub ub: Vector2<f64>,
    pub start: Vector2<f64>,
}

pub fn basin_trials(split: &Split, intr: &CameraIntrinsics, cfg: &BasinConfig) -> Result<Vec<BasinTrial>, PipelineError> {
    let cands: Vec<_> = split.candidates().copied().collect();
    if cands.is_empty() {
        return Err(PipelineError::Empty("relocalization candidates"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per = cfg.trials.div_ceil(cands.len());
    let mut trials = Vec::with_capacity(cfg.trials);
    for c in &cands {
        let a = split.frame(c.reference).ok_or(PipelineError::MissingFrame(c.reference))?;
        let b = split.frame(c.candidate).ok_or(PipelineError::MissingFrame(c.candidate))?;
        let scene = &split.scenes[a.scene];
        let batch = make_correspondences(scene, a, b, intr, per, 0, &mut rng)?;
        for p in batch.positives {
            let lo = 1.0;
            let (hx, hy) = (intr.width as f64 - 2.0, intr.height as f64 - 2.0);
            let start = Vector2::new(
                (p.ub.x + rng.random_range(-cfg.radius..=cfg.radius)).clamp(lo, hx),
                (p.ub.y + rng.random_range(-cfg.radius..=cfg.radius)).clamp(lo, hy),
            );
            trials.push(BasinTrial {
                reference: c.reference,
                candidate: c.candidate,
                ua: p.ua,
                ub: p.ub,
                start,
            });
        }
    }
    trials.truncate(cfg.trials);
    Ok(trials)
}

/// Fraction of trials whose level-0 per-pixel Gauss-Newton tracking ends
/// within `success_px` of the true match.
pub fn basin_success(
    split: &Split,
    trials: &[BasinTrial],
    extractor: FeatureExtractor<'_>,
    cfg: &BasinConfig,
) -> Result<f64, PipelineError> {
    let mut cache: std::collections::HashMap<usize, crate::features::FeatureMap> = Default::default();
    let mut level0 = |id: usize| -> Result<crate::features::FeatureMap, PipelineError> {
        if let Some(m) = cache.get(&id) {
            return Ok(m.clone());
        }
        let img = image_of(split, id)?;
        let m = extractor.pyramid(img, 1)?.levels.swap_remove(0);
        cache.insert(id, m.clone());
        Ok(m)
    };
    let mut ok = 0usize;
    for t in trials {
        let fa = level0(t.reference)?;
        let fb = level0(t.candidate)?;
        let ft = fa.sample(t.ua.x, t.ua.y);
        if let Some(x) = track_pixel(&fb, &t.start, &ft, cfg.epsilon, cfg.max_iterations, 1e-6) {
            if (x - t.ub).norm() < cfg.success_px {
                ok += 1;
            }
        }
    }
    Ok(ok as f64 / trials.len().max(1) as f64)
}

/// Which objective a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Contrastive,
    GaussNewton,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Contrastive, Objective::GaussNewton, Objective::Total];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Contrastive => "contrastive",
            Objective::GaussNewton => "gauss_newton",
            Objective::Total => "total",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub objective: Objective,
    pub block: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }
}

/// A fixed problem instance for the gradient check.
pub struct GradcheckProblem<'a> {
    pub weights: &'a NetworkWeights,
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub batch: CorrespondenceBatch,
    pub loss: LossConfig,
    pub seed: u64,
}

impl GradcheckProblem<'_> {
    fn objective(&self, tape: &mut Tape, params: &[Var], which: Objective) -> Result<Var, PipelineError> {
        let bound = crate::net::BoundWeights { vars: params.to_vec() };
        let xa = tape.constant(self.image_a.clone());
        let xb = tape.constant(self.image_b.clone());
        let fa = self.weights.forward(tape, &bound, xa)?;
        let fb = self.weights.forward(tape, &bound, xb)?;
        // Same start points for every evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let l = self.loss.levels_used[0];
        let s = 1.0 / (1u64 << l) as f64;
        let pos: Vec<_> = self.batch.positives.iter().map(|p| p.scaled(s)).collect();
        let neg: Vec<_> = self.batch.negatives.iter().map(|p| p.scaled(s)).collect();
        Ok(match which {
            Objective::Contrastive => contrastive_loss(tape, fa[l], fb[l], &pos, &neg, self.loss.margin)?,
            Objective::GaussNewton => {
                gauss_newton_loss(
                    tape,
                    fa[l],
                    fb[l],
                    &pos,
                    self.loss.radius_at(l),
                    self.loss.epsilon,
                    self.loss.gn_starts,
                    &mut rng,
                )?
                .loss
            }
            Objective::Total => total_loss(tape, &fa, &fb, &self.batch, &self.loss, &mut rng)?.total,
        })
    }

    fn value(&self, params: &[Tensor], which: Objective) -> Result<f64, PipelineError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let v = self.objective(&mut tape, &vars, which)?;
        Ok(tape.value(v).item())
    }

    fn gradient(&self, which: Objective) -> Result<Vec<Tensor>, PipelineError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.weights.params().iter().map(|p| tape.param(p.clone())).collect();
        let v = self.objective(&mut tape, &vars, which)?;
        let mut g = tape.backward(v)?;
        Ok(vars
            .iter()
            .zip(self.weights.params())
            .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite differences over every weight for each objective.
/// `tamper` may alter the analytic gradients before comparison.
pub fn gradcheck(
    problem: &GradcheckProblem<'_>,
    step: f64,
    tolerance: f64,
    floor: f64,
    tamper: Option<&dyn Fn(Objective, &str, &mut Tensor)>,
) -> Result<GradcheckReport, PipelineError> {
    let names = problem.weights.names();
    let mut blocks = Vec::new();
    for which in Objective::ALL {
        let mut analytic = problem.gradient(which)?;
        if let Some(t) = tamper {
            for (g, n) in analytic.iter_mut().zip(names) {
                t(which, n, g);
            }
        }
        let mut params = problem.weights.params().to_vec();
        for (k, name) in names.iter().enumerate() {
            let mut max_rel: f64 = 0.0;
            for i in 0..params[k].len() {
                let orig = params[k].data()[i];
                params[k].data_mut()[i] = orig + step;
                let plus = problem.value(&params, which)?;
                params[k].data_mut()[i] = orig - step;
                let minus = problem.value(&params, which)?;
                params[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                max_rel = max_rel.max(relative_error(analytic[k].data()[i], numeric, floor));
            }
            blocks.push(BlockReport {
                objective: which,
                block: name.clone(),
                checked: params[k].len(),
                max_rel_error: max_rel,
            });
        }
    }
    Ok(GradcheckReport {
        step,
        tolerance,
        blocks,
    })
}

/// Default gradient-check instance: a random 32x32 image pair related by a
/// small shift, with random positives and negatives.
pub fn default_gradcheck_inputs(seed: u64, size: usize, pairs: usize) -> (Tensor, Tensor, CorrespondenceBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..(size + 4) * (size + 4)).map(|_| rng.random_range(0.0..1.0)).collect();
    let crop = |ox: usize, oy: usize| {
        Tensor::from_fn(&[1, size, size], |i| {
            let (y, x) = (i / size, i % size);
            base[(y + oy) * (size + 4) + x + ox]
        })
    };
    let a = crop(0, 0);
    let b = crop(2, 1);
    let lim = size as f64 - 5.0;
    let positives = (0..pairs)
        .map(|_| {
            let (x, y) = (rng.random_range(4.0..lim), rng.random_range(4.0..lim));
            crate::losses::PixelPair::new([x, y], [x - 2.0, y - 1.0])
        })
        .collect::<Vec<_>>();
    let negatives = crate::losses::sample_negatives(&positives, pairs, size, size, 4.0, 8.0, &mut rng);
    (
        a,
        b,
        CorrespondenceBatch {
            frame_a: 0,
            frame_b: 1,
            positives,
            negatives,
        },
    )
}
