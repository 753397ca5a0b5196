//! Synthetic desk-scale datasets: a random Gaussian scene, per-view motion
//! trajectories, sharp latent frames, their blurred average, simulated events
//! and a confidence-annotated point cloud.
//!
//! View `v` sees `u + 1` sharp frames at `s = k/u`, `k = 0..u`, posed at
//! `base * Exp((s - 1/2) m)`. In latent-trajectory terms the ground truth is
//! `start = -m/2`, `end = m/2`; frame `k >= 1` is latent `k` and frame 0 is the
//! exposure start. The blur is the mean of all `u + 1` frames.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::events::{bin_events, simulate_events, EventStream, DEFAULT_LOG_EPS};
use crate::geometry::{se3_exp, so3_exp, CameraIntrinsics, Quaternion, RigidTransform, Twist};
use crate::image::Image;
use crate::io;
use crate::metrics::TimedPose;
use crate::sampling::ConfidencePointCloud;
use crate::splat::{rasterize, Gaussian3D, Scene};
use crate::training::{TrainingData, TrainingView, ViewTrajectoryParams};

/// Distance from each camera to the scene center.
pub const VIEW_DISTANCE: f64 = 3.0;
/// Seconds between the exposure starts of consecutive views in trajectory files.
pub const VIEW_PERIOD_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub u: usize,
    /// Translation travelled during one exposure (scene units).
    pub translation_amplitude: f64,
    /// Rotation swept during one exposure (radians).
    pub rotation_amplitude: f64,
    pub theta: f64,
    pub seed: u64,
    pub focal: f64,
    pub exposure_us: u64,
    pub log_eps: f64,
    pub points_per_gaussian: usize,
    /// Standard deviation of the translation error on initial base poses.
    pub init_translation_noise: f64,
    /// Standard deviation of the rotation error on initial base poses (radians).
    pub init_rotation_noise: f64,
    pub background: f64,
    /// Gaussian means lie within this distance of the scene center along the view axis.
    pub depth_spread: f64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            gaussians: 200,
            width: 64,
            height: 64,
            views: 8,
            u: 10,
            translation_amplitude: 0.15,
            rotation_amplitude: 0.03,
            theta: 0.27,
            seed: 0,
            focal: 64.0,
            exposure_us: 10_000,
            log_eps: DEFAULT_LOG_EPS,
            points_per_gaussian: 20,
            init_translation_noise: 0.01,
            init_rotation_noise: 0.005,
            background: 0.05,
            depth_spread: 1.2,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("gaussians", self.gaussians),
            ("views", self.views),
            ("u", self.u),
            ("points_per_gaussian", self.points_per_gaussian),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidArgument(format!(
                "image dims must be >= 16, got {}x{}",
                self.width, self.height
            )));
        }
        if self.exposure_us < self.u as u64 {
            return Err(Error::InvalidArgument("exposure_us must be at least u microseconds".into()));
        }
        if !(self.theta > 0.0) {
            return Err(Error::NonPositiveThreshold(self.theta));
        }
        let reals = [
            ("translation_amplitude", self.translation_amplitude),
            ("rotation_amplitude", self.rotation_amplitude),
            ("log_eps", self.log_eps),
            ("init_translation_noise", self.init_translation_noise),
            ("init_rotation_noise", self.init_rotation_noise),
            ("background", self.background),
            ("depth_spread", self.depth_spread),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
        }
        if self.depth_spread >= VIEW_DISTANCE - 0.5 {
            return Err(Error::InvalidArgument(format!(
                "depth_spread must stay below {}, got {}",
                VIEW_DISTANCE - 0.5,
                self.depth_spread
            )));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::InvalidArgument(format!("focal must be > 0, got {}", self.focal)));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unlisted keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = SyntheticDatasetSpec::default();
        let origin = Path::new("<dataset spec>");
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::parse(origin, format!("line {}: invalid value {value:?} for {key}", i + 1));
            macro_rules! set {
                ($field:expr) => {
                    $field = value.parse().map_err(|_| bad())?
                };
            }
            match key {
                "gaussians" => set!(s.gaussians),
                "width" => set!(s.width),
                "height" => set!(s.height),
                "views" => set!(s.views),
                "u" => set!(s.u),
                "translation_amplitude" => set!(s.translation_amplitude),
                "rotation_amplitude" => set!(s.rotation_amplitude),
                "theta" => set!(s.theta),
                "seed" => set!(s.seed),
                "focal" => set!(s.focal),
                "exposure_us" => set!(s.exposure_us),
                "log_eps" => set!(s.log_eps),
                "points_per_gaussian" => set!(s.points_per_gaussian),
                "init_translation_noise" => set!(s.init_translation_noise),
                "init_rotation_noise" => set!(s.init_rotation_noise),
                "background" => set!(s.background),
                "depth_spread" => set!(s.depth_spread),
                _ => return Err(Error::parse(origin, format!("line {}: unknown key {key:?}", i + 1))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = self;
        for (k, v) in [
            ("gaussians", s.gaussians.to_string()),
            ("width", s.width.to_string()),
            ("height", s.height.to_string()),
            ("views", s.views.to_string()),
            ("u", s.u.to_string()),
            ("translation_amplitude", format!("{:?}", s.translation_amplitude)),
            ("rotation_amplitude", format!("{:?}", s.rotation_amplitude)),
            ("theta", format!("{:?}", s.theta)),
            ("seed", s.seed.to_string()),
            ("focal", format!("{:?}", s.focal)),
            ("exposure_us", s.exposure_us.to_string()),
            ("log_eps", format!("{:?}", s.log_eps)),
            ("points_per_gaussian", s.points_per_gaussian.to_string()),
            ("init_translation_noise", format!("{:?}", s.init_translation_noise)),
            ("init_rotation_noise", format!("{:?}", s.init_rotation_noise)),
            ("background", format!("{:?}", s.background)),
            ("depth_spread", format!("{:?}", s.depth_spread)),
        ] {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.focal, self.width, self.height)
    }

    /// Microsecond timestamps of the `u + 1` frames of one exposure.
    pub fn frame_timestamps(&self) -> Vec<u64> {
        (0..=self.u).map(|k| (k as u128 * self.exposure_us as u128 / self.u as u128) as u64).collect()
    }

    /// Trajectory-file time (seconds) of latent `k` of view `v`.
    pub fn latent_time(&self, v: usize, k: usize) -> f64 {
        v as f64 * VIEW_PERIOD_S + self.frame_timestamps()[k] as f64 * 1e-6
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticView {
    pub ground_truth: ViewTrajectoryParams,
    /// Noisy base pose with a collapsed trajectory, as a coarse initialization.
    pub initial: ViewTrajectoryParams,
    /// `u + 1` frames, f32-quantized.
    pub sharp: Vec<Image>,
    /// Mean of `sharp`, f32-quantized.
    pub blur: Image,
    pub events: EventStream,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticDatasetSpec,
    pub intrinsics: CameraIntrinsics,
    pub scene: Scene,
    pub views: Vec<SyntheticView>,
    pub cloud: ConfidencePointCloud,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(normal(rng), normal(rng), normal(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Camera-to-world pose of view `v`: on an arc around the scene center,
/// looking at it.
pub fn view_base_pose(v: usize, views: usize) -> RigidTransform {
    let center = Vector3::new(0.0, 0.0, VIEW_DISTANCE);
    let frac = if views > 1 { v as f64 / (views - 1) as f64 - 0.5 } else { 0.0 };
    let yaw = 0.6 * frac;
    let pitch = 0.15 * (std::f64::consts::TAU * frac).sin();
    let r = so3_exp(&Vector3::new(0.0, yaw, 0.0)) * so3_exp(&Vector3::new(pitch, 0.0, 0.0));
    let position = center - r * Vector3::new(0.0, 0.0, VIEW_DISTANCE);
    RigidTransform::new(r, position)
}

fn random_scene(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> Scene {
    let gaussians = (0..spec.gaussians)
        .map(|_| {
            let mean = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                VIEW_DISTANCE + rng.random_range(-spec.depth_spread..=spec.depth_spread),
            );
            let scale = Vector3::new(
                rng.random_range(0.03..0.15),
                rng.random_range(0.03..0.15),
                rng.random_range(0.03..0.15),
            );
            let q = Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
            let color = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
            Gaussian3D::new(mean, scale, q, rng.random_range(0.6..0.95), color)
        })
        .collect();
    Scene::new(gaussians, [spec.background; 3])
}

/// Points drawn from each Gaussian's density. Confidence grows with the local
/// render support (opacity times density times view coverage) and positional
/// noise shrinks with it.
fn random_cloud(
    spec: &SyntheticDatasetSpec,
    scene: &Scene,
    bases: &[RigidTransform],
    intr: &CameraIntrinsics,
    rng: &mut ChaCha8Rng,
) -> Result<ConfidencePointCloud> {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut confidence = Vec::new();
    for g in &scene.gaussians {
        let seen = bases
            .iter()
            .filter(|b| {
                let p = b.inverse().transform_point(&g.mean);
                if p.z <= 0.01 {
                    return false;
                }
                let (x, y) = intr.project(&p);
                (0.0..intr.width as f64).contains(&x) && (0.0..intr.height as f64).contains(&y)
            })
            .count();
        let coverage = seen as f64 / bases.len() as f64;
        let m = g.quaternion().to_rotation_matrix() * nalgebra::Matrix3::from_diagonal(&g.scale());
        for _ in 0..spec.points_per_gaussian {
            let z = Vector3::new(normal(rng), normal(rng), normal(rng)).map(|c| c.clamp(-2.0, 2.0));
            let support = g.opacity() * (-0.5 * z.norm_squared()).exp() * (0.25 + 0.75 * coverage);
            let noise = 0.02 * (1.0 - support);
            let jitter = Vector3::new(normal(rng), normal(rng), normal(rng)) * noise;
            positions.push(g.mean + m * z + jitter);
            colors.push(g.color);
            confidence.push(1.0 + 9.0 * support);
        }
    }
    ConfidencePointCloud::new(positions, Some(colors), confidence)
}

/// Builds the whole dataset in memory. All randomness comes from one
/// generator seeded with `spec.seed`.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let intr = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = random_scene(spec, &mut rng);
    let timestamps = spec.frame_timestamps();

    let mut views = Vec::with_capacity(spec.views);
    for v in 0..spec.views {
        let base = view_base_pose(v, spec.views);
        let motion = Twist::new(
            random_unit(&mut rng) * spec.translation_amplitude,
            random_unit(&mut rng) * spec.rotation_amplitude,
        );
        let ground_truth = ViewTrajectoryParams::new(base, motion.scaled(-0.5), motion.scaled(0.5));
        let noise = Twist::new(
            Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * spec.init_translation_noise,
            Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * spec.init_rotation_noise,
        );
        let initial = ViewTrajectoryParams::fixed(base.compose(&se3_exp(&noise)));

        let sharp = (0..=spec.u)
            .map(|k| {
                let s = k as f64 / spec.u as f64;
                let pose = base.compose(&se3_exp(&motion.scaled(s - 0.5)));
                let mut img = rasterize(&scene, &pose, &intr)?.color;
                img.quantize_f32();
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut blur = crate::events::synthesize_blur(&sharp)?;
        blur.quantize_f32();
        let events = simulate_events(&sharp, &timestamps, spec.theta, spec.log_eps)?;
        views.push(SyntheticView { ground_truth, initial, sharp, blur, events });
    }

    let bases: Vec<RigidTransform> = views.iter().map(|v| v.ground_truth.base).collect();
    let cloud = random_cloud(spec, &scene, &bases, &intr, &mut rng)?;
    Ok(SyntheticDataset { spec: *spec, intrinsics: intr, scene, views, cloud })
}

/// Latent poses `k = 1..u` of every view, stamped with trajectory-file times.
pub fn latent_trajectory(spec: &SyntheticDatasetSpec, trajectories: &[ViewTrajectoryParams]) -> Result<Vec<TimedPose>> {
    let mut out = Vec::with_capacity(trajectories.len() * spec.u);
    for (v, t) in trajectories.iter().enumerate() {
        for (k, pose) in t.latent_poses(spec.u)?.into_iter().enumerate() {
            out.push(TimedPose { timestamp: spec.latent_time(v, k + 1), pose });
        }
    }
    Ok(out)
}

/// Base poses, one per view, stamped at the exposure midpoint.
pub fn base_trajectory(spec: &SyntheticDatasetSpec, trajectories: &[ViewTrajectoryParams]) -> Vec<TimedPose> {
    trajectories
        .iter()
        .enumerate()
        .map(|(v, t)| TimedPose {
            timestamp: v as f64 * VIEW_PERIOD_S + spec.exposure_us as f64 * 0.5e-6,
            pose: t.base,
        })
        .collect()
}

pub const SPEC_FILE: &str = "dataset.txt";
pub const SCENE_FILE: &str = "scene_gt.ply";
pub const CLOUD_FILE: &str = "points.ply";
pub const GT_TRAJECTORY_FILE: &str = "trajectory_gt.tum";
pub const INIT_POSES_FILE: &str = "poses_init.tum";

pub fn view_dir(root: &Path, v: usize) -> PathBuf {
    root.join("views").join(format!("view_{v:03}"))
}

pub fn sharp_file_name(k: usize) -> String {
    format!("sharp_{k:02}.pfm")
}

impl SyntheticDataset {
    pub fn ground_truth_trajectories(&self) -> Vec<ViewTrajectoryParams> {
        self.views.iter().map(|v| v.ground_truth).collect()
    }

    pub fn initial_trajectories(&self) -> Vec<ViewTrajectoryParams> {
        self.views.iter().map(|v| v.initial).collect()
    }

    /// Writes the on-disk layout:
    /// `dataset.txt`, `scene_gt.ply`, `points.ply`, `trajectory_gt.tum`,
    /// `poses_init.tum` and `views/view_VVV/{blur.pfm, sharp_KK.pfm, events.bin}`.
    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        io::write_text(root.join(SPEC_FILE), &self.spec.to_text())?;
        io::write_scene_ply(root.join(SCENE_FILE), &self.scene, io::PlyFormat::BinaryLittleEndian)?;
        io::write_point_cloud_ply(root.join(CLOUD_FILE), &self.cloud, io::PlyFormat::BinaryLittleEndian)?;
        io::write_tum(root.join(GT_TRAJECTORY_FILE), &latent_trajectory(&self.spec, &self.ground_truth_trajectories())?)?;
        io::write_tum(root.join(INIT_POSES_FILE), &base_trajectory(&self.spec, &self.initial_trajectories()))?;
        for (v, view) in self.views.iter().enumerate() {
            let dir = view_dir(root, v);
            io::write_pfm(dir.join("blur.pfm"), &view.blur)?;
            for (k, img) in view.sharp.iter().enumerate() {
                io::write_pfm(dir.join(sharp_file_name(k)), img)?;
            }
            io::write_events_bin(dir.join("events.bin"), self.spec.width as u16, self.spec.height as u16, &view.events.events)?;
        }
        Ok(())
    }

    /// Training inputs: blurs, EDI latents from binned events and the initial trajectories.
    pub fn training_data(&self, theta: f64) -> Result<TrainingData> {
        let views = self
            .views
            .iter()
            .map(|v| {
                let bins = bin_events(&v.events, self.spec.u)?;
                TrainingView::from_events(v.blur.clone(), &bins, theta, v.initial)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { intrinsics: self.intrinsics, views })
    }
}

/// Generates the dataset and writes it below `root`.
pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec, root: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let data = generate(spec)?;
    data.write(root)?;
    Ok(data)
}

/// A dataset read back from disk. Ground-truth trajectories are kept as poses.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub spec: SyntheticDatasetSpec,
    pub intrinsics: CameraIntrinsics,
    pub blurs: Vec<Image>,
    pub events: Vec<EventStream>,
    pub initial_bases: Vec<RigidTransform>,
    pub ground_truth_latents: Option<Vec<TimedPose>>,
    /// `u + 1` sharp frames per view, when present on disk.
    pub sharp: Option<Vec<Vec<Image>>>,
    pub cloud: ConfidencePointCloud,
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<LoadedDataset> {
    let root = root.as_ref();
    let spec = SyntheticDatasetSpec::parse(&io::read_to_string(root.join(SPEC_FILE))?)?;
    let intrinsics = spec.intrinsics()?;
    let initial_bases: Vec<RigidTransform> = io::read_tum(root.join(INIT_POSES_FILE))?.into_iter().map(|p| p.pose).collect();
    if initial_bases.len() != spec.views {
        return Err(Error::CountMismatch(format!(
            "{} initial poses for {} views",
            initial_bases.len(),
            spec.views
        )));
    }
    let mut blurs = Vec::with_capacity(spec.views);
    let mut events = Vec::with_capacity(spec.views);
    let has_sharp = view_dir(root, 0).join(sharp_file_name(0)).exists();
    let mut sharp = Vec::new();
    for v in 0..spec.views {
        let dir = view_dir(root, v);
        blurs.push(io::read_pfm(dir.join("blur.pfm"))?);
        if has_sharp {
            sharp.push((0..=spec.u).map(|k| io::read_pfm(dir.join(sharp_file_name(k)))).collect::<Result<Vec<_>>>()?);
        }
        let file = io::read_events_bin(dir.join("events.bin"))?;
        events.push(EventStream::new(file.width as usize, file.height as usize, 0, spec.exposure_us, file.events)?);
    }
    let gt_path = root.join(GT_TRAJECTORY_FILE);
    let ground_truth_latents = if gt_path.exists() { Some(io::read_tum(gt_path)?) } else { None };
    let cloud = io::read_point_cloud_ply(root.join(CLOUD_FILE))?;
    let sharp = has_sharp.then_some(sharp);
    Ok(LoadedDataset { spec, intrinsics, blurs, events, initial_bases, ground_truth_latents, sharp, cloud })
}

impl LoadedDataset {
    pub fn training_data(&self, theta: f64) -> Result<TrainingData> {
        let views = self
            .blurs
            .iter()
            .zip(&self.events)
            .zip(&self.initial_bases)
            .map(|((blur, ev), base)| {
                let bins = bin_events(ev, self.spec.u)?;
                TrainingView::from_events(blur.clone(), &bins, theta, ViewTrajectoryParams::fixed(*base))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { intrinsics: self.intrinsics, views })
    }
}
