#![allow(dead_code)]

use deblursplat::geometry::{se3_exp, CameraIntrinsics, Quaternion, RigidTransform, Twist};
use deblursplat::splat::{rasterize, render_with_gradients, Gaussian3D, Scene, PARAMS_PER_GAUSSIAN};
use deblursplat::Image;
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_scene(n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mean = Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(2.0..4.0));
            let scale = Vector3::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let q = Quaternion::from_axis_angle(&axis.normalize(), rng.random_range(0.0..3.0));
            let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            Gaussian3D::new(mean, scale, q, rng.random_range(0.3..0.9), color)
        })
        .collect();
    Scene::new(gaussians, [0.1, 0.1, 0.1])
}

pub fn random_adjoint(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Image::from_vec(w, h, 3, data).unwrap()
}

fn weighted_sum(scene: &Scene, pose: &RigidTransform, intr: &CameraIntrinsics, adjoint: &Image) -> f64 {
    let out = rasterize(scene, pose, intr).unwrap();
    out.color.data().iter().zip(adjoint.data()).map(|(a, b)| a * b).sum()
}

pub struct ProbeSummary {
    pub probed: usize,
    pub passed: usize,
    pub skipped: usize,
}

impl ProbeSummary {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.probed.max(1) as f64
    }
}

/// Compares analytic gradients of `sum(adjoint * render)` against central
/// differences on `count` random parameters, always including the 6 pose
/// components.
pub fn probe_render_gradients(
    scene: &Scene,
    pose: &RigidTransform,
    intr: &CameraIntrinsics,
    adjoint: &Image,
    count: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> ProbeSummary {
    let (_, grad) = render_with_gradients(scene, pose, intr, adjoint).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = ProbeSummary { probed: 0, passed: 0, skipped: 0 };
    for probe in 0..count {
        let (analytic, numeric) = if probe < 6 {
            let f = |h: f64| {
                let mut d = Vector6::zeros();
                d[probe] = h;
                weighted_sum(scene, &pose.compose(&se3_exp(&Twist::from_vector(&d))), intr, adjoint)
            };
            (grad.pose[probe], (f(step) - f(-step)) / (2.0 * step))
        } else {
            let gi = rng.random_range(0..scene.gaussians.len());
            let pi = rng.random_range(0..PARAMS_PER_GAUSSIAN);
            let f = |h: f64| {
                let mut s = scene.clone();
                let mut p = s.gaussians[gi].to_params();
                p[pi] += h;
                s.gaussians[gi] = Gaussian3D::from_params(&p);
                weighted_sum(&s, pose, intr, adjoint)
            };
            (grad.gaussians[gi][pi], (f(step) - f(-step)) / (2.0 * step))
        };
        if analytic.abs() < 1e-8 {
            summary.skipped += 1;
            continue;
        }
        summary.probed += 1;
        if (analytic - numeric).abs() <= tolerance * analytic.abs().max(numeric.abs()) {
            summary.passed += 1;
        }
    }
    summary
}

use deblursplat::alignment::{Edge, PointMap, ViewGraph};

pub struct SyntheticGraph {
    pub graph: ViewGraph,
    /// Camera-to-world pose per view; view 0 is the identity.
    pub poses: Vec<RigidTransform>,
    /// Per edge, the similarity used to generate it.
    pub scales: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
}

pub fn view_pose(v: usize) -> RigidTransform {
    if v == 0 {
        return RigidTransform::identity();
    }
    let a = v as f64;
    se3_exp(&Twist::new(
        Vector3::new(0.3 * a.sin(), 0.2 * (1.3 * a).cos() - 0.2, 0.1 * a),
        Vector3::new(0.05 * (0.7 * a).cos(), 0.08 * a.sin(), 0.03 * a),
    ))
}

/// Complete graph over `views` cameras; edge `e` is scaled by `scales[e]`.
/// Pairwise maps live in the frame of the edge's first view divided by the
/// edge scale, so `sigma_e * T_e * P` reproduces world points when `T_e` has
/// the rotation of `pose(n)` and its translation divided by `sigma_e`.
pub fn synthetic_graph(views: usize, width: usize, height: usize, focal: f64, scales: &[f64], noise: f64, seed: u64) -> SyntheticGraph {
    let intr = CameraIntrinsics::new(focal, width, height).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<RigidTransform> = (0..views).map(view_pose).collect();
    let world: Vec<Vec<Vector3<f64>>> = (0..views)
        .map(|v| {
            (0..width * height)
                .map(|k| {
                    let (i, j) = ((k % width) as f64, (k / width) as f64);
                    let d = 3.0 + 0.4 * (0.3 * i + v as f64).sin() + 0.3 * (0.25 * j).cos();
                    poses[v].transform_point(&(intr.unproject(i, j) * d))
                })
                .collect()
        })
        .collect();
    let mut edges = Vec::new();
    let mut e = 0;
    for n in 0..views {
        for m in n + 1..views {
            let s = scales[e];
            let to_edge = poses[n].inverse();
            let mut make = |v: usize| {
                let points = world[v]
                    .iter()
                    .map(|x| {
                        let p = to_edge.transform_point(x) / s;
                        p + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * noise
                    })
                    .collect();
                let conf = (0..width * height).map(|k| 1.0 + (k % 5) as f64 * 0.25).collect();
                PointMap::new(width, height, points, conf, vec![true; width * height]).unwrap()
            };
            edges.push(Edge { n, m, map_n: make(n), map_m: make(m) });
            e += 1;
        }
    }
    SyntheticGraph { graph: ViewGraph::new(views, edges).unwrap(), poses, scales: scales.to_vec(), intrinsics: intr }
}

pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > tol {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}
