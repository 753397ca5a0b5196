//! Joint optimization of Gaussians and per-view exposure trajectories from
//! blurred frames and event-derived latent images.
//!
//! Each step renders `u` latent views along `T_k = base * dT_1 * Exp(s_k *
//! Log(dT_1^-1 dT_u))`, averages them into a synthetic blur and minimizes
//! `L_b + lambda_e * L_e`, where `L_b` mixes L1 and D-SSIM against the observed
//! blur and `L_e` is the grayscale L1 distance to the EDI latents.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{edi_decouple, EventBins};
use crate::geometry::{latent_pose_jacobian, se3_exp, CameraIntrinsics, RigidTransform, Twist};
use crate::image::{Image, LUMA};
use crate::metrics::{l1, ssim, ssim_with_gradient};
use crate::optim::Adam;
use crate::splat::{rasterize, render_backward, render_forward, RenderTape, Scene, PARAMS_PER_GAUSSIAN};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub mean: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub delta: f64,
    pub base: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { mean: 1.6e-4, scale: 5e-3, rotation: 1e-3, opacity: 5e-2, color: 2.5e-3, delta: 1e-3, base: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda_b: f64,
    pub lambda_e: f64,
    pub u: usize,
    pub theta: f64,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    pub lr: LearningRates,
    /// Keep a snapshot every this many iterations; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_b: 0.2,
            lambda_e: 5e-3,
            u: 10,
            theta: 0.27,
            iters: 2000,
            warmup: 300,
            seed: 0,
            lr: LearningRates::default(),
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_b) {
            return Err(Error::InvalidArgument(format!("lambda_b must lie in [0, 1], got {}", self.lambda_b)));
        }
        if !(self.lambda_e >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_e must be >= 0, got {}", self.lambda_e)));
        }
        if self.u == 0 {
            return Err(Error::InvalidArgument("u must be >= 1".into()));
        }
        if !(self.theta > 0.0) {
            return Err(Error::NonPositiveThreshold(self.theta));
        }
        let lr = &self.lr;
        if [lr.mean, lr.scale, lr.rotation, lr.opacity, lr.color, lr.delta, lr.base].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("learning rates must be >= 0".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::InvalidArgument(format!("config line {}: {msg}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let float = || value.parse::<f64>().map_err(|_| bad(format!("{key} expects a number, got {value:?}")));
            let int = || value.parse::<usize>().map_err(|_| bad(format!("{key} expects an integer, got {value:?}")));
            match key {
                "lambda_b" => cfg.lambda_b = float()?,
                "lambda_e" => cfg.lambda_e = float()?,
                "u" => cfg.u = int()?,
                "theta" => cfg.theta = float()?,
                "iters" => cfg.iters = int()?,
                "warmup" => cfg.warmup = int()?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(format!("seed expects an integer, got {value:?}")))?,
                "snapshot_every" => cfg.snapshot_every = int()?,
                "lr.mean" => cfg.lr.mean = float()?,
                "lr.scale" => cfg.lr.scale = float()?,
                "lr.rotation" => cfg.lr.rotation = float()?,
                "lr.opacity" => cfg.lr.opacity = float()?,
                "lr.color" => cfg.lr.color = float()?,
                "lr.delta" => cfg.lr.delta = float()?,
                "lr.base" => cfg.lr.base = float()?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let lr = &self.lr;
        format!(
            "lambda_b = {:?}\nlambda_e = {:?}\nu = {}\ntheta = {:?}\niters = {}\nwarmup = {}\nseed = {}\nsnapshot_every = {}\n\
             lr.mean = {:?}\nlr.scale = {:?}\nlr.rotation = {:?}\nlr.opacity = {:?}\nlr.color = {:?}\nlr.delta = {:?}\nlr.base = {:?}\n",
            self.lambda_b,
            self.lambda_e,
            self.u,
            self.theta,
            self.iters,
            self.warmup,
            self.seed,
            self.snapshot_every,
            lr.mean,
            lr.scale,
            lr.rotation,
            lr.opacity,
            lr.color,
            lr.delta,
            lr.base
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainConfig::parse(&crate::io::read_to_string(path)?)
    }
}

/// Base pose plus the twists of `dT_1` and `dT_u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTrajectoryParams {
    pub base: RigidTransform,
    pub start: Twist,
    pub end: Twist,
}

impl ViewTrajectoryParams {
    pub fn new(base: RigidTransform, start: Twist, end: Twist) -> Self {
        ViewTrajectoryParams { base, start, end }
    }

    pub fn fixed(base: RigidTransform) -> Self {
        ViewTrajectoryParams { base, start: Twist::zero(), end: Twist::zero() }
    }

    /// Latent poses for `k = 1..=u`.
    pub fn latent_poses(&self, u: usize) -> Result<Vec<RigidTransform>> {
        crate::geometry::interpolate_latent_poses(&self.base, &se3_exp(&self.start), &se3_exp(&self.end), u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_b: f64,
    pub l_e: f64,
    /// Event weight actually applied (0 during warm-up).
    pub lambda_e: f64,
    pub total: f64,
}

pub fn grayscale(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::WrongChannelCount { expected: 3, got: img.channels() });
    }
    Ok(img.to_gray())
}

fn gray_any(img: &Image) -> Result<Image> {
    match img.channels() {
        1 => Ok(img.clone()),
        _ => grayscale(img),
    }
}

fn check_sequences(rendered: &[Image], edi: &[Image]) -> Result<()> {
    if rendered.len() != edi.len() {
        return Err(Error::CountMismatch(format!("{} rendered latents vs {} EDI latents", rendered.len(), edi.len())));
    }
    if rendered.is_empty() {
        return Err(Error::EmptySequence("event loss needs at least one latent"));
    }
    for (a, b) in rendered.iter().zip(edi) {
        if !a.same_dims(b) {
            return Err(Error::DimensionMismatch(format!(
                "latent {}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            )));
        }
    }
    Ok(())
}

/// `(1/u) sum_k mean |G(rendered_k) - G(edi_k)|`; single-channel inputs are
/// taken as already gray.
pub fn event_loss(rendered: &[Image], edi: &[Image]) -> Result<f64> {
    check_sequences(rendered, edi)?;
    let mut total = 0.0;
    for (a, b) in rendered.iter().zip(edi) {
        total += l1(&gray_any(a)?, &gray_any(b)?)?;
    }
    Ok(total / rendered.len() as f64)
}

/// `(1 - lambda_b) * L1 + lambda_b * (1 - SSIM) / 2`.
pub fn blur_loss(rendered: &Image, observed: &Image, lambda_b: f64) -> Result<f64> {
    if !rendered.same_shape(observed) {
        return Err(Error::DimensionMismatch(format!(
            "rendered blur {}x{}x{} vs observed {}x{}x{}",
            rendered.width(),
            rendered.height(),
            rendered.channels(),
            observed.width(),
            observed.height(),
            observed.channels()
        )));
    }
    let l = l1(rendered, observed)?;
    if lambda_b == 0.0 {
        return Ok(l);
    }
    Ok((1.0 - lambda_b) * l + lambda_b * (1.0 - ssim(rendered, observed, 1.0)?) / 2.0)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn blur_loss_gradient(rendered: &Image, observed: &Image, lambda_b: f64) -> Result<(f64, Image)> {
    let n = rendered.data().len() as f64;
    let mut grad = rendered.clone();
    let mut l = 0.0;
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(rendered.data()).zip(observed.data()) {
        l += (a - b).abs();
        *g = (1.0 - lambda_b) * sign(a - b) / n;
    }
    l /= n;
    if lambda_b == 0.0 {
        return Ok((l, grad));
    }
    let (s, gs) = ssim_with_gradient(rendered, observed, 1.0)?;
    for (g, d) in grad.data_mut().iter_mut().zip(gs.data()) {
        *g -= 0.5 * lambda_b * d;
    }
    Ok(((1.0 - lambda_b) * l + lambda_b * (1.0 - s) / 2.0, grad))
}

/// One training view: observed blur, EDI latents (`k = 1..u`) and its initial trajectory.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub blur: Image,
    pub edi_latents: Vec<Image>,
    pub trajectory: ViewTrajectoryParams,
}

impl TrainingView {
    pub fn from_events(blur: Image, bins: &EventBins, theta: f64, trajectory: ViewTrajectoryParams) -> Result<Self> {
        let dec = edi_decouple(&blur, bins, theta)?;
        Ok(TrainingView { blur, edi_latents: dec.latents, trajectory })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub intrinsics: CameraIntrinsics,
    pub views: Vec<TrainingView>,
}

impl TrainingData {
    pub fn validate(&self, u: usize) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::EmptySequence("training needs at least one view"));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.blur.channels() != 3 {
                return Err(Error::WrongChannelCount { expected: 3, got: v.blur.channels() });
            }
            if v.blur.width() != self.intrinsics.width || v.blur.height() != self.intrinsics.height {
                return Err(Error::DimensionMismatch(format!("view {i} blur does not match the camera size")));
            }
            if v.edi_latents.len() != u {
                return Err(Error::CountMismatch(format!("view {i} has {} EDI latents, u = {u}", v.edi_latents.len())));
            }
        }
        Ok(())
    }
}

/// Gradients of the total loss for one view.
#[derive(Debug, Clone)]
pub struct ViewGradients {
    pub gaussians: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    /// Right increment on the base pose.
    pub base: Vector6<f64>,
    pub start: Vector6<f64>,
    pub end: Vector6<f64>,
}

/// Loss breakdown and the rendered latents for one view, without gradients.
pub fn evaluate_view(
    scene: &Scene,
    view: &TrainingView,
    traj: &ViewTrajectoryParams,
    intr: &CameraIntrinsics,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<(LossBreakdown, Vec<Image>)> {
    let poses = traj.latent_poses(cfg.u)?;
    let renders = poses.iter().map(|p| rasterize(scene, p, intr).map(|o| o.color)).collect::<Result<Vec<_>>>()?;
    let blur = crate::events::synthesize_blur(&renders)?;
    let l_b = blur_loss(&blur, &view.blur, cfg.lambda_b)?;
    let l_e = event_loss(&renders, &view.edi_latents)?;
    let lambda_e = if iter < cfg.warmup { 0.0 } else { cfg.lambda_e };
    Ok((LossBreakdown { l_b, l_e, lambda_e, total: l_b + lambda_e * l_e }, renders))
}

/// Loss and analytic gradients for one view.
pub fn view_loss_and_gradients(
    scene: &Scene,
    view: &TrainingView,
    traj: &ViewTrajectoryParams,
    intr: &CameraIntrinsics,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<(LossBreakdown, ViewGradients)> {
    let u = cfg.u;
    let jacs = (1..=u)
        .map(|k| latent_pose_jacobian(&traj.base, &traj.start, &traj.end, k as f64 / u as f64))
        .collect::<Result<Vec<_>>>()?;
    let (renders, tapes): (Vec<Image>, Vec<RenderTape>) = jacs
        .iter()
        .map(|j| render_forward(scene, &j.pose, intr).map(|(o, t)| (o.color, t)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let blur = crate::events::synthesize_blur(&renders)?;
    let (l_b, g_blur) = blur_loss_gradient(&blur, &view.blur, cfg.lambda_b)?;
    let l_e = event_loss(&renders, &view.edi_latents)?;
    let lambda_e = if iter < cfg.warmup { 0.0 } else { cfg.lambda_e };

    let mut grads = ViewGradients {
        gaussians: vec![[0.0; PARAMS_PER_GAUSSIAN]; scene.gaussians.len()],
        base: Vector6::zeros(),
        start: Vector6::zeros(),
        end: Vector6::zeros(),
    };
    let npix = (intr.width * intr.height) as f64;
    for (k, ((jac, render), tape)) in jacs.iter().zip(&renders).zip(&tapes).enumerate() {
        let mut adjoint = g_blur.map(|g| g / u as f64);
        if lambda_e > 0.0 {
            let target = gray_any(&view.edi_latents[k])?;
            let gray = render.to_gray();
            let w = lambda_e / (u as f64 * npix);
            for p in 0..gray.pixel_count() {
                let s = sign(gray.data()[p] - target.data()[p]) * w;
                for c in 0..3 {
                    adjoint.data_mut()[3 * p + c] += s * LUMA[c];
                }
            }
        }
        let g = render_backward(scene, tape, intr, &adjoint)?;
        for (acc, gg) in grads.gaussians.iter_mut().zip(&g.gaussians) {
            for (a, b) in acc.iter_mut().zip(gg) {
                *a += b;
            }
        }
        grads.base += jac.d_base.transpose() * g.pose;
        grads.start += jac.d_start.transpose() * g.pose;
        grads.end += jac.d_end.transpose() * g.pose;
    }
    Ok((LossBreakdown { l_b, l_e, lambda_e, total: l_b + lambda_e * l_e }, grads))
}

/// Scene radius seen from the cameras: the largest distance from the camera
/// centroid to a Gaussian mean (1 for an empty scene).
pub fn scene_extent(scene: &Scene, cameras: &[RigidTransform]) -> f64 {
    let centroid = if cameras.is_empty() {
        Vector3::zeros()
    } else {
        cameras.iter().map(|c| c.translation).sum::<Vector3<f64>>() / cameras.len() as f64
    };
    let r = scene.gaussians.iter().map(|g| (g.mean - centroid).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iter: usize,
    pub scene: Scene,
    pub trajectories: Vec<ViewTrajectoryParams>,
}

/// Optimizer state: one driver owning the scene, trajectories and Adam moments.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub scene: Scene,
    pub trajectories: Vec<ViewTrajectoryParams>,
    pub config: TrainConfig,
    pub history: Vec<LossBreakdown>,
    data: TrainingData,
    gaussian_adam: Adam,
    pose_adams: Vec<Adam>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    iter: usize,
}

impl Trainer {
    pub fn new(scene: Scene, data: TrainingData, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        data.validate(config.u)?;
        let trajectories: Vec<ViewTrajectoryParams> = data.views.iter().map(|v| v.trajectory).collect();
        let bases: Vec<RigidTransform> = trajectories.iter().map(|t| t.base).collect();
        let extent = scene_extent(&scene, &bases);
        let lr = &config.lr;
        let per: [f64; PARAMS_PER_GAUSSIAN] = std::array::from_fn(|i| match i {
            0..=2 => lr.mean * extent,
            3..=5 => lr.scale,
            6..=9 => lr.rotation,
            10 => lr.opacity,
            _ => lr.color,
        });
        let rates = (0..scene.gaussians.len()).flat_map(|_| per).collect();
        let pose_rates: Vec<f64> = [lr.base; 6].into_iter().chain([lr.delta; 12]).collect();
        let pose_adams = data.views.iter().map(|_| Adam::with_rates(pose_rates.clone())).collect();
        Ok(Trainer {
            scene,
            trajectories,
            history: Vec::with_capacity(config.iters),
            gaussian_adam: Adam::with_rates(rates),
            pose_adams,
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iter: 0,
            config,
            data,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    /// Next view in a round-robin order reshuffled every epoch.
    fn next_view(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.data.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        self.order.pop().unwrap()
    }

    /// One optimization step on the next scheduled view.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let v = self.next_view();
        self.step_view(v)
    }

    pub fn step_view(&mut self, v: usize) -> Result<LossBreakdown> {
        let (loss, grads) = view_loss_and_gradients(
            &self.scene,
            &self.data.views[v],
            &self.trajectories[v],
            &self.data.intrinsics,
            &self.config,
            self.iter,
        )?;

        let flat: Vec<f64> = grads.gaussians.iter().flatten().copied().collect();
        let step = self.gaussian_adam.step_direction(&flat);
        for (g, s) in self.scene.gaussians.iter_mut().zip(step.chunks_exact(PARAMS_PER_GAUSSIAN)) {
            let mut p = g.to_params();
            for (a, b) in p.iter_mut().zip(s) {
                *a -= b;
            }
            for c in &mut p[11..14] {
                *c = c.clamp(0.0, 1.0);
            }
            *g = crate::splat::Gaussian3D::from_params(&p);
        }

        let pose_grad: Vec<f64> = grads.base.iter().chain(grads.start.iter()).chain(grads.end.iter()).copied().collect();
        let step = self.pose_adams[v].step_direction(&pose_grad);
        let t = &mut self.trajectories[v];
        let d_base = Vector6::from_iterator(step[0..6].iter().map(|s| -s));
        t.base = t.base.compose(&se3_exp(&Twist::from_vector(&d_base)));
        t.start = Twist::from_vector(&(t.start.to_vector() - Vector6::from_column_slice(&step[6..12])));
        t.end = Twist::from_vector(&(t.end.to_vector() - Vector6::from_column_slice(&step[12..18])));

        self.history.push(loss);
        self.iter += 1;
        Ok(loss)
    }
}

/// Convenience wrapper for a single step: builds a trainer around `scene` and
/// the views, runs one iteration at index `iter` and returns the updated state.
pub fn training_step(
    scene: &Scene,
    data: &TrainingData,
    cfg: &TrainConfig,
    view: usize,
    iter: usize,
) -> Result<(LossBreakdown, Scene, ViewTrajectoryParams)> {
    let mut t = Trainer::new(scene.clone(), data.clone(), TrainConfig { iters: cfg.iters.max(iter + 1), ..*cfg })?;
    t.iter = iter;
    let loss = t.step_view(view)?;
    Ok((loss, t.scene, t.trajectories[view]))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub scene: Scene,
    pub trajectories: Vec<ViewTrajectoryParams>,
    pub history: Vec<LossBreakdown>,
    pub snapshots: Vec<Snapshot>,
}

pub fn train(scene: Scene, data: TrainingData, cfg: TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(scene, data, cfg)?;
    let mut snapshots = Vec::new();
    for i in 0..cfg.iters {
        trainer.step()?;
        if cfg.snapshot_every > 0 && (i + 1) % cfg.snapshot_every == 0 {
            snapshots.push(Snapshot { iter: i + 1, scene: trainer.scene.clone(), trajectories: trainer.trajectories.clone() });
        }
    }
    Ok(TrainOutput { scene: trainer.scene, trajectories: trainer.trajectories, history: trainer.history, snapshots })
}

/// CSV with header `iter,l_b,l_e,total`.
pub fn loss_log_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("iter,l_b,l_e,total\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(s, "{i},{:?},{:?},{:?}", l.l_b, l.l_e, l.total).unwrap();
    }
    s
}
