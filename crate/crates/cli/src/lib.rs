//! Subcommands of the `gnnet` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use gnnet_core::alignment::{track_candidate, AlignmentConfig, FeatureExtractor};
use gnnet_core::benchmark::{
    self, generate_dataset, read_dataset, relocalization_error, render_svg, write_curve_csv, write_dataset,
    Dataset, DatasetConfig, EvalCurve, EvalSummary,
};
use gnnet_core::losses::LossConfig;
use gnnet_core::net::{build_network, NetworkConfig, NetworkWeights};
use gnnet_core::pipeline::{self, GradcheckProblem, Objective, PipelineError, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFinite { .. } | PipelineError::Tensor(_) => CliError::Numeric(e.to_string()),
            PipelineError::Bench(benchmark::BenchError::Config(_)) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn data_err<'a>(context: &str, path: &'a Path) -> impl FnOnce(std::io::Error) -> CliError + 'a {
    let context = context.to_string();
    move |e| CliError::Data(format!("{context} {}: {e}", path.display()))
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "gnnet", version, about = "Gauss-Newton feature learning and feature-metric alignment")]
pub struct Cli {
    /// Root for relative output paths.
    #[arg(long, env = "GNNET_OUTPUT_ROOT", global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Render the synthetic benchmark and write train/val/test splits.
    Generate(GenerateArgs),
    /// Train a feature network on a generated dataset.
    Train(TrainArgs),
    /// Track one relocalization candidate and print the result as JSON.
    Align(AlignArgs),
    /// Cumulative relocalization-error curves per method.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of the loss gradients over all network weights.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub conditions: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 56.0)]
    pub focal: f64,
    #[arg(long, default_value_t = 6)]
    pub train_scenes: usize,
    #[arg(long, default_value_t = 2)]
    pub val_scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub test_scenes: usize,
    #[arg(long, default_value_t = 16)]
    pub pairs_per_scene: usize,
    #[arg(long, default_value_t = 64)]
    pub positives: usize,
    #[arg(long, default_value_t = 64)]
    pub negatives: usize,
    /// Largest trajectory-index difference of a training pair.
    #[arg(long, default_value_t = 5)]
    pub max_frame_gap: usize,
    #[arg(long, default_value_t = 3)]
    pub pyramid_levels: usize,
}

impl GenerateArgs {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            width: self.width,
            height: self.height,
            focal: self.focal,
            frames: self.frames,
            conditions: self.conditions,
            train_scenes: self.train_scenes,
            val_scenes: self.val_scenes,
            test_scenes: self.test_scenes,
            pairs_per_scene: self.pairs_per_scene,
            positives: self.positives,
            negatives: self.negatives,
            max_frame_gap: self.max_frame_gap,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// ADAM learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    /// Weight of the Gauss-Newton loss; 0 trains with the contrastive loss only.
    #[arg(long, default_value_t = 0.1)]
    pub gn_weight: f64,
    #[arg(long, default_value_t = 4.0)]
    pub vicinity_radius: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1)]
    pub gn_starts: usize,
    #[arg(long, default_value_t = 8)]
    pub descriptor_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub pyramid_levels: usize,
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    /// Skip training pairs whose trajectory indices differ by more than this.
    #[arg(long, default_value_t = 5)]
    pub max_frame_gap: usize,
    /// Keep the last epoch instead of the best validation epoch.
    #[arg(long)]
    pub no_validate: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Candidate frame id.
    #[arg(long)]
    pub candidate: usize,
    /// Learned features; raw intensities when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Method {
    Intensity,
    Trained,
    Contrastive,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Intensity => "intensity",
            Method::Trained => "trained",
            Method::Contrastive => "contrastive",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Weights trained with the full loss.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Weights trained with the contrastive loss only.
    #[arg(long)]
    pub contrastive_weights: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![Method::Intensity, Method::Trained, Method::Contrastive])]
    pub methods: Vec<Method>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub descriptor_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub pyramid_levels: usize,
    #[arg(long, default_value_t = 4)]
    pub base_width: usize,
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    #[arg(long, default_value_t = 1e-6)]
    pub floor: f64,
}

fn resolve(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    version: String,
    command: &'a str,
    args: &'a T,
}

fn write_run_record<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<(), CliError> {
    let rec = RunRecord {
        version: gnnet_core::version_string(),
        command,
        args,
    };
    let text = serde_json::to_string_pretty(&rec).map_err(|e| CliError::Data(e.to_string()))?;
    let path = dir.join("run.json");
    fs::write(&path, text + "\n").map_err(data_err("writing", &path))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| CliError::Data(format!("reading dataset {}: {e}", path.display())))
}

fn load_weights(path: &Path) -> Result<NetworkWeights, CliError> {
    NetworkWeights::read_from(path).map_err(|e| CliError::Data(format!("reading weights {}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let root = cli.output_root.clone();
    match &cli.command {
        Command::Generate(a) => cmd_generate(&root, a),
        Command::Train(a) => cmd_train(&root, a),
        Command::Align(a) => cmd_align(&root, a),
        Command::Evaluate(a) => cmd_evaluate(&root, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

pub fn cmd_generate(root: &Option<PathBuf>, a: &GenerateArgs) -> Result<(), CliError> {
    let cfg = a.dataset_config();
    let out = resolve(root, &a.out);
    let dataset = generate_dataset(&cfg, a.pyramid_levels).map_err(|e| match e {
        benchmark::BenchError::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    })?;
    write_dataset(&out, &dataset).map_err(|e| CliError::Data(e.to_string()))?;
    write_run_record(&out, "generate", a)?;
    for s in &dataset.splits {
        log::info!(
            "{}: {} scenes, {} frames, {} candidates, {} pairs",
            s.name,
            s.scenes.len(),
            s.num_frames(),
            s.candidates().count(),
            s.pairs.len()
        );
    }
    Ok(())
}

pub fn cmd_train(root: &Option<PathBuf>, a: &TrainArgs) -> Result<(), CliError> {
    if a.epochs == 0 {
        return Err(CliError::Usage("--epochs must be >= 1".into()));
    }
    if !(a.lr > 0.0) {
        return Err(CliError::Usage("--lr must be positive".into()));
    }
    if a.lr != 1e-6 {
        log::warn!("learning rate {} (desk-scale setting; the reference large-scale setting is 1e-6)", a.lr);
    }
    let dataset = load_dataset(&resolve(root, &a.dataset))?;
    let out = resolve(root, &a.out);
    fs::create_dir_all(&out).map_err(data_err("creating", &out))?;
    let net_cfg = NetworkConfig {
        input_channels: 1,
        descriptor_dim: a.descriptor_dim,
        pyramid_levels: a.pyramid_levels,
        base_width: a.base_width,
        seed: a.seed,
    };
    let init = build_network(&net_cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let loss = LossConfig {
        margin: a.margin,
        gn_weight: a.gn_weight,
        vicinity_radius: a.vicinity_radius,
        epsilon: a.epsilon,
        levels_used: (0..a.pyramid_levels).collect(),
        gn_starts: a.gn_starts,
    };
    loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        loss,
        validate: !a.no_validate,
    };
    let mut train_split = dataset
        .split("train")
        .ok_or_else(|| CliError::Data("dataset has no train split".into()))?
        .clone();
    let gap = a.max_frame_gap;
    let index_of = |id: usize| train_split.frame(id).map(|f| f.index);
    let keep: Vec<bool> = train_split
        .pairs
        .iter()
        .map(|p| matches!((index_of(p.frame_a), index_of(p.frame_b)), (Some(x), Some(y)) if x.abs_diff(y) <= gap))
        .collect();
    let mut it = keep.iter();
    train_split.pairs.retain(|_| *it.next().expect("one flag per pair"));
    let val = dataset.split("val");
    let intr = dataset.config.intrinsics();

    let mut csv = String::from("epoch,total,contrastive,gauss_newton,val_auc\n");
    let outcome = pipeline::train(&init, &train_split, val, &intr, &cfg, |log, w| {
        let auc = log.val_auc.map_or(String::new(), |v| v.to_string());
        csv.push_str(&format!("{},{},{},{},{auc}\n", log.epoch, log.total, log.contrastive, log.gauss_newton));
        log::info!(
            "epoch {}: total {:.6} contrastive {:.6} gn {:.6} val_auc {auc}",
            log.epoch,
            log.total,
            log.contrastive,
            log.gauss_newton
        );
        let _ = w.write_to(&out.join("last.gnnw"));
    })?;
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, csv).map_err(data_err("writing", &log_path))?;
    let wpath = out.join("weights.gnnw");
    outcome
        .best
        .write_to(&wpath)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", wpath.display())))?;
    write_run_record(&out, "train", a)?;
    log::info!("best epoch {} written to {}", outcome.best_epoch, wpath.display());
    Ok(())
}

fn config_for(method: Method, weights: Option<&NetworkWeights>) -> AlignmentConfig {
    match (method, weights) {
        (Method::Intensity, _) | (_, None) => AlignmentConfig::for_intensity(),
        (_, Some(w)) => AlignmentConfig::for_features().with_levels(w.config().pyramid_levels.min(3)),
    }
}

pub fn cmd_align(root: &Option<PathBuf>, a: &AlignArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&resolve(root, &a.dataset))?;
    let split = dataset
        .split(&a.split)
        .ok_or_else(|| CliError::Usage(format!("no split named {:?}", a.split)))?;
    let cand = split
        .candidates()
        .find(|c| c.candidate == a.candidate)
        .ok_or_else(|| CliError::Usage(format!("frame {} is not a relocalization candidate", a.candidate)))?;
    let intr = dataset.config.intrinsics();
    let weights = a.weights.as_ref().map(|p| load_weights(&resolve(root, p))).transpose()?;
    let (extractor, cfg) = match &weights {
        Some(w) => (FeatureExtractor::Network(w), config_for(Method::Trained, Some(w))),
        None => (FeatureExtractor::Intensity, config_for(Method::Intensity, None)),
    };
    let kf = pipeline::keyframe_for(split, cand.reference, &intr)?;
    let img = &split.frame(cand.candidate).ok_or(PipelineError::MissingFrame(cand.candidate))?.image;
    let result = track_candidate(&kf, img, extractor, &cfg).map_err(|e| CliError::Data(e.to_string()))?;
    let report = serde_json::json!({
        "candidate": cand.candidate,
        "reference": cand.reference,
        "converged": result.converged,
        "iterations": result.iterations,
        "final_residual": result.final_residual,
        "inlier_fraction": result.inlier_fraction,
        "pose": result.pose.to_row_major(),
        "gt_pose": cand.gt_relative.to_row_major(),
        "translation_error": relocalization_error(cand, &result),
    });
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?);
    Ok(())
}

#[derive(Serialize)]
struct MethodSummary {
    method: &'static str,
    summary: EvalSummary,
}

pub fn cmd_evaluate(root: &Option<PathBuf>, a: &EvaluateArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&resolve(root, &a.dataset))?;
    let split = dataset
        .split(&a.split)
        .ok_or_else(|| CliError::Usage(format!("no split named {:?}", a.split)))?;
    let intr = dataset.config.intrinsics();
    let out = resolve(root, &a.out);
    fs::create_dir_all(&out).map_err(data_err("creating", &out))?;

    let need = |flag: &Option<PathBuf>, m: Method| -> Result<Option<NetworkWeights>, CliError> {
        if !a.methods.contains(&m) {
            return Ok(None);
        }
        match flag {
            Some(p) => load_weights(&resolve(root, p)).map(Some),
            None => Err(CliError::Data(format!("method {} needs a weights file", m.name()))),
        }
    };
    let trained = need(&a.weights, Method::Trained)?;
    let contrastive = need(&a.contrastive_weights, Method::Contrastive)?;

    let mut curves: Vec<(String, EvalCurve)> = Vec::new();
    let mut summaries = Vec::new();
    for m in &a.methods {
        let weights = match m {
            Method::Intensity => None,
            Method::Trained => trained.as_ref(),
            Method::Contrastive => contrastive.as_ref(),
        };
        let extractor = weights.map_or(FeatureExtractor::Intensity, FeatureExtractor::Network);
        let (curve, summary) = pipeline::evaluate_split(split, &intr, extractor, &config_for(*m, weights))?;
        let path = out.join(format!("curve_{}.csv", m.name()));
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).map_err(data_err("writing", &path))?;
        fs::write(&path, buf).map_err(data_err("writing", &path))?;
        log::info!(
            "{}: auc {:.4} success@0.1 {:.3} @0.5 {:.3} @1.0 {:.3} ({} failures of {})",
            m.name(),
            summary.auc,
            summary.success_at_0_1,
            summary.success_at_0_5,
            summary.success_at_1_0,
            summary.failures,
            summary.count
        );
        curves.push((m.name().to_string(), curve));
        summaries.push(MethodSummary {
            method: m.name(),
            summary,
        });
    }

    let mut combined = String::from("threshold");
    for (name, _) in &curves {
        combined.push(',');
        combined.push_str(name);
    }
    combined.push('\n');
    if let Some((_, first)) = curves.first() {
        for (i, t) in first.thresholds.iter().enumerate() {
            combined.push_str(&format!("{t:.2}"));
            for (_, c) in &curves {
                combined.push_str(&format!(",{}", c.fraction[i]));
            }
            combined.push('\n');
        }
    }
    let path = out.join("curves.csv");
    fs::write(&path, combined).map_err(data_err("writing", &path))?;
    let path = out.join("curves.svg");
    fs::write(&path, render_svg(&curves)).map_err(data_err("writing", &path))?;
    let path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summaries).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(data_err("writing", &path))?;
    write_run_record(&out, "evaluate", a)
}

/// Runs the gradient check and returns the report; `tamper` is forwarded to
/// [`pipeline::gradcheck`].
pub fn gradcheck_report(
    a: &GradcheckArgs,
    tamper: Option<&dyn Fn(Objective, &str, &mut gnnet_core::tensor::Tensor)>,
) -> Result<pipeline::GradcheckReport, CliError> {
    let net_cfg = NetworkConfig {
        input_channels: 1,
        descriptor_dim: a.descriptor_dim,
        pyramid_levels: a.pyramid_levels,
        base_width: a.base_width,
        seed: a.seed,
    };
    let weights = build_network(&net_cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let (image_a, image_b, batch) = pipeline::default_gradcheck_inputs(a.seed, a.size, a.pairs);
    let problem = GradcheckProblem {
        weights: &weights,
        image_a,
        image_b,
        batch,
        loss: LossConfig {
            levels_used: (0..a.pyramid_levels).collect(),
            ..Default::default()
        },
        seed: a.seed,
    };
    Ok(pipeline::gradcheck(&problem, a.step, a.tolerance, a.floor, tamper)?)
}

pub fn print_gradcheck(report: &pipeline::GradcheckReport) {
    for b in &report.blocks {
        println!(
            "{:<13} {:<16} {:>6} params  max rel err {:.3e}  {}",
            b.objective.name(),
            b.block,
            b.checked,
            b.max_rel_error,
            if b.max_rel_error < report.tolerance { "ok" } else { "FAIL" }
        );
    }
    println!(
        "gradcheck {}: max relative error {:.3e} (tolerance {:.1e}, step {:.1e})",
        if report.passed() { "passed" } else { "FAILED" },
        report.max_rel_error(),
        report.tolerance,
        report.step
    );
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let report = gradcheck_report(a, None)?;
    print_gradcheck(&report);
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error()
        )))
    }
}
