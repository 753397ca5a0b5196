//! End-to-end experiment: seed Gaussians from the point cloud, train on blurs
//! and events, then score the trained scene against held-out sharp frames and
//! the trained trajectories against ground truth.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::image::Image;
use crate::metrics::{ate, psnr_capped, ssim, AteAlignment, MetricReport, TimedPose};
use crate::sampling::{confidence_balanced_sample, initialize_scene, ConfidencePointCloud, SamplingPlan};
use crate::splat::{rasterize, Scene};
use crate::synthetic::{latent_trajectory, LoadedDataset, SyntheticDataset};
use crate::training::{train, TrainConfig, TrainOutput, ViewTrajectoryParams};

/// How the initial Gaussians are seeded from the confidence point cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub points: usize,
    pub intervals: usize,
    pub opacity: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { points: 500, intervals: 40, opacity: 0.5, seed: 0 }
    }
}

/// Confidence-balanced seeds turned into isotropic Gaussians.
pub fn seed_scene(cloud: &ConfidencePointCloud, init: &InitConfig, background: [f64; 3]) -> Result<Scene> {
    let plan = SamplingPlan::new(init.points, init.intervals, init.seed)?;
    let indices = confidence_balanced_sample(cloud, &plan)?;
    initialize_scene(cloud, &indices, init.opacity, background)
}

/// Mean PSNR and SSIM of renders at latent poses `k = 1..u` against sharp
/// frames `sharp[v][k]`.
pub fn evaluate_views(
    scene: &Scene,
    trajectories: &[ViewTrajectoryParams],
    sharp: &[Vec<Image>],
    intrinsics: &CameraIntrinsics,
    u: usize,
) -> Result<(f64, f64)> {
    if trajectories.len() != sharp.len() {
        return Err(Error::CountMismatch(format!("{} trajectories for {} views", trajectories.len(), sharp.len())));
    }
    let (mut psnr_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0usize);
    for (traj, frames) in trajectories.iter().zip(sharp) {
        if frames.len() != u + 1 {
            return Err(Error::CountMismatch(format!("{} sharp frames for u = {u}", frames.len())));
        }
        for (k, pose) in traj.latent_poses(u)?.iter().enumerate() {
            let render = rasterize(scene, pose, intrinsics)?.color;
            psnr_sum += psnr_capped(&render, &frames[k + 1], 1.0)?;
            ssim_sum += ssim(&render, &frames[k + 1], 1.0)?;
            n += 1;
        }
    }
    Ok((psnr_sum / n as f64, ssim_sum / n as f64))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output: TrainOutput,
    pub report: MetricReport,
    /// ATE of the initial trajectories, when ground truth is available.
    pub initial_ate: Option<f64>,
    pub estimated_trajectory: Vec<TimedPose>,
    pub seconds: f64,
}

impl SyntheticDataset {
    /// The same view of the data that [`crate::synthetic::load_dataset`] returns.
    pub fn to_loaded(&self) -> Result<LoadedDataset> {
        Ok(LoadedDataset {
            spec: self.spec,
            intrinsics: self.intrinsics,
            blurs: self.views.iter().map(|v| v.blur.clone()).collect(),
            events: self.views.iter().map(|v| v.events.clone()).collect(),
            initial_bases: self.views.iter().map(|v| v.initial.base).collect(),
            ground_truth_latents: Some(latent_trajectory(&self.spec, &self.ground_truth_trajectories())?),
            sharp: Some(self.views.iter().map(|v| v.sharp.clone()).collect()),
            cloud: self.cloud.clone(),
        })
    }
}

/// Seeds, trains and evaluates. `u` and `theta` of `config` are taken from
/// the dataset.
pub fn run_experiment(
    label: &str,
    data: &LoadedDataset,
    init: &InitConfig,
    config: &TrainConfig,
) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let spec = &data.spec;
    let cfg = TrainConfig { u: spec.u, theta: spec.theta, ..*config };
    let scene = seed_scene(&data.cloud, init, [spec.background; 3])?;
    let training = data.training_data(cfg.theta)?;
    let initial: Vec<ViewTrajectoryParams> = training.views.iter().map(|v| v.trajectory).collect();
    let output = train(scene, training, cfg)?;

    let estimated_trajectory = latent_trajectory(spec, &output.trajectories)?;
    let (initial_ate, ate_rmse) = match &data.ground_truth_latents {
        Some(gt) => (
            Some(ate(&latent_trajectory(spec, &initial)?, gt, AteAlignment::Similarity)?),
            Some(ate(&estimated_trajectory, gt, AteAlignment::Similarity)?),
        ),
        None => (None, None),
    };
    let (psnr, ssim) = match &data.sharp {
        Some(sharp) => evaluate_views(&output.scene, &output.trajectories, sharp, &data.intrinsics, spec.u)?,
        None => (f64::NAN, f64::NAN),
    };
    let report = MetricReport { label: label.to_string(), psnr, ssim, ate_rmse };
    Ok(ExperimentOutcome { output, report, initial_ate, estimated_trajectory, seconds: start.elapsed().as_secs_f64() })
}
