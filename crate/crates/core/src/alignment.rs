//! Pointmap post-processing: focal recovery, RANSAC PnP and global alignment
//! of pairwise pointmaps with per-edge similarity transforms.

use std::collections::VecDeque;

use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{hat, se3_exp, umeyama, CameraIntrinsics, RigidTransform, Twist};
use crate::optim::Adam;

/// Per-pixel 3D points (row-major, pixel `(i, j)` at index `j * width + i`)
/// with confidences and a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PointMap {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        confidence: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 || points.len() != n || confidence.len() != n || valid.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "pointmap {width}x{height} with {} points, {} confidences, {} mask entries",
                points.len(),
                confidence.len(),
                valid.len()
            )));
        }
        for i in 0..n {
            if valid[i] && !(confidence[i] > 0.0 && points[i].iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidArgument(format!("pixel {i} is valid but has non-positive confidence or non-finite point")));
            }
        }
        Ok(PointMap { width, height, points, confidence, valid })
    }

    /// Back-projects a depth map (row-major) through a pinhole camera and maps
    /// the points with `camera_to_frame`.
    pub fn from_depth(
        depth: &[f64],
        intrinsics: &CameraIntrinsics,
        camera_to_frame: &RigidTransform,
        confidence: Vec<f64>,
    ) -> Result<Self> {
        let (w, h) = (intrinsics.width, intrinsics.height);
        if depth.len() != w * h {
            return Err(Error::DimensionMismatch(format!("depth has {} entries for a {w}x{h} camera", depth.len())));
        }
        let points = (0..w * h)
            .map(|k| {
                let ray = intrinsics.unproject((k % w) as f64, (k / w) as f64);
                camera_to_frame.transform_point(&(ray * depth[k]))
            })
            .collect();
        let valid = depth.iter().map(|&d| d > 0.0).collect();
        PointMap::new(w, h, points, confidence, valid)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn total_confidence(&self) -> f64 {
        self.confidence.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(c, _)| c).sum()
    }

    pub fn scale_confidence(&mut self, factor: f64) {
        for c in &mut self.confidence {
            *c *= factor;
        }
    }
}

/// Edge `(n, m)`: both pointmaps are expressed in the frame of view `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub n: usize,
    pub m: usize,
    pub map_n: PointMap,
    pub map_m: PointMap,
}

impl Edge {
    pub fn map_for(&self, view: usize) -> &PointMap {
        if view == self.n {
            &self.map_n
        } else {
            &self.map_m
        }
    }

    fn views(&self) -> [(usize, &PointMap); 2] {
        [(self.n, &self.map_n), (self.m, &self.map_m)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    pub views: usize,
    pub edges: Vec<Edge>,
}

impl ViewGraph {
    pub fn new(views: usize, edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            if e.n >= views || e.m >= views || e.n == e.m {
                return Err(Error::InvalidArgument(format!("edge ({}, {}) is invalid for {views} views", e.n, e.m)));
            }
            if e.map_n.width != e.map_m.width || e.map_n.height != e.map_m.height {
                return Err(Error::DimensionMismatch(format!("edge ({}, {}) pointmaps differ in size", e.n, e.m)));
            }
        }
        Ok(ViewGraph { views, edges })
    }

    /// Returns the first view unreachable from view 0, if any.
    pub fn unreachable_view(&self) -> Option<usize> {
        let mut seen = vec![false; self.views];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for e in &self.edges {
                let other = if e.n == v { e.m } else if e.m == v { e.n } else { continue };
                if !seen[other] {
                    seen[other] = true;
                    queue.push_back(other);
                }
            }
        }
        seen.iter().position(|s| !s)
    }
}

// ---------------------------------------------------------------------------
// Focal length
// ---------------------------------------------------------------------------

pub const WEISZFELD_MAX_ITERS: usize = 100;
pub const WEISZFELD_TOLERANCE: f64 = 1e-8;

struct FocalTerm {
    target: Vector2<f64>,
    ray: Vector2<f64>,
    weight: f64,
}

fn focal_terms(map: &PointMap) -> Vec<FocalTerm> {
    let (w, h) = (map.width as f64, map.height as f64);
    (0..map.len())
        .filter(|&k| map.valid[k] && map.points[k].z > 0.0)
        .map(|k| {
            let p = map.points[k];
            FocalTerm {
                target: Vector2::new((k % map.width) as f64 - w / 2.0, (k / map.width) as f64 - h / 2.0),
                ray: Vector2::new(p.x / p.z, p.y / p.z),
                weight: map.confidence[k],
            }
        })
        .collect()
}

/// Confidence-weighted focal objective `sum O * |(i', j') - f * (x, y) / z|`.
pub fn focal_objective(map: &PointMap, focal: f64) -> f64 {
    focal_terms(map).iter().map(|t| t.weight * (t.target - t.ray * focal).norm()).sum()
}

/// Weiszfeld estimate together with the objective after every iteration.
pub fn estimate_focal_weiszfeld_traced(map: &PointMap) -> Result<(f64, Vec<f64>)> {
    let terms = focal_terms(map);
    if terms.is_empty() {
        return Err(Error::DegeneratePointmap("no valid pixel has positive depth".into()));
    }
    if terms.len() < 10 {
        return Err(Error::InsufficientCorrespondences { needed: 10, got: terms.len() });
    }
    let solve = |weights: &dyn Fn(&FocalTerm) -> f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for t in &terms {
            let w = weights(t);
            num += w * t.target.dot(&t.ray);
            den += w * t.ray.norm_squared();
        }
        num / den
    };
    let objective = |f: f64| terms.iter().map(|t| t.weight * (t.target - t.ray * f).norm()).sum::<f64>();
    let mut f = solve(&|t| t.weight);
    if !(f.is_finite() && f > 0.0) {
        return Err(Error::DegeneratePointmap(format!("initial focal estimate {f} is not positive")));
    }
    let mut trace = vec![objective(f)];
    for _ in 0..WEISZFELD_MAX_ITERS {
        let next = solve(&|t| t.weight / (t.target - t.ray * f).norm().max(1e-12));
        let delta = (next - f).abs() / f;
        f = next;
        trace.push(objective(f));
        if delta < WEISZFELD_TOLERANCE {
            break;
        }
    }
    Ok((f, trace))
}

pub fn estimate_focal_weiszfeld(map: &PointMap) -> Result<f64> {
    estimate_focal_weiszfeld_traced(map).map(|(f, _)| f)
}

pub fn average_focal(focals: &[f64]) -> Result<f64> {
    if focals.is_empty() {
        return Err(Error::EmptySequence("no focal estimates to average"));
    }
    Ok(focals.iter().sum::<f64>() / focals.len() as f64)
}

// ---------------------------------------------------------------------------
// PnP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub iterations: usize,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { threshold: 2.0, iterations: 512, min_inlier_ratio: 0.3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    /// Camera-to-world pose.
    pub pose: RigidTransform,
    pub inliers: Vec<usize>,
    /// RMS reprojection error over the inliers, in pixels.
    pub rms: f64,
}

fn reprojection(w2c: &RigidTransform, x: &Vector3<f64>, pix: &Vector2<f64>, intr: &CameraIntrinsics) -> Option<Vector2<f64>> {
    let p = w2c.transform_point(x);
    if p.z <= 1e-9 {
        return None;
    }
    let (u, v) = intr.project(&p);
    Some(Vector2::new(u - pix.x, v - pix.y))
}

fn reprojection_cost(w2c: &RigidTransform, pts: &[Vector3<f64>], pix: &[Vector2<f64>], intr: &CameraIntrinsics) -> f64 {
    pts.iter()
        .zip(pix)
        .map(|(x, p)| reprojection(w2c, x, p, intr).map_or(1e12, |r| r.norm_squared()))
        .sum()
}

/// EPnP-style linear solve for the world-to-camera transform.
fn epnp(pts: &[Vector3<f64>], pix: &[Vector2<f64>], intr: &CameraIntrinsics) -> Option<RigidTransform> {
    let n = pts.len();
    let c0 = pts.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c0;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return None;
    }
    let mut ctrl = [c0; 4];
    for k in 0..3 {
        let spread = eig.eigenvalues[k].max(1e-12 * lmax).sqrt();
        ctrl[k + 1] = c0 + eig.eigenvectors.column(k) * spread;
    }
    let basis = Matrix3::from_columns(&[ctrl[1] - c0, ctrl[2] - c0, ctrl[3] - c0]);
    let basis_inv = basis.try_inverse()?;
    let alphas: Vec<[f64; 4]> = pts
        .iter()
        .map(|p| {
            let a = basis_inv * (p - c0);
            [1.0 - a.x - a.y - a.z, a.x, a.y, a.z]
        })
        .collect();

    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (al, px)) in alphas.iter().zip(pix).enumerate() {
        for j in 0..4 {
            m[(2 * i, 3 * j)] = al[j] * intr.focal;
            m[(2 * i, 3 * j + 2)] = al[j] * (intr.cx() - px.x);
            m[(2 * i + 1, 3 * j + 1)] = al[j] * intr.focal;
            m[(2 * i + 1, 3 * j + 2)] = al[j] * (intr.cy() - px.y);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: Vec<nalgebra::DVector<f64>> = order[..4].iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect();

    let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let ctrl_d2: Vec<f64> = pairs.iter().map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared()).collect();
    let diff = |v: &nalgebra::DVector<f64>, a: usize, b: usize| {
        Vector3::new(v[3 * a] - v[3 * b], v[3 * a + 1] - v[3 * b + 1], v[3 * a + 2] - v[3 * b + 2])
    };

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    // One null vector: closed-form scale.
    {
        let (mut num, mut den) = (0.0, 0.0);
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let d = diff(&null[0], a, b).norm();
            num += d * ctrl_d2[p].sqrt();
            den += d * d;
        }
        candidates.push(vec![num / den]);
    }
    // Two and three null vectors: linearized quadratic constraints.
    for dim in [2usize, 3] {
        let combos: Vec<(usize, usize)> = (0..dim).flat_map(|a| (a..dim).map(move |b| (a, b))).collect();
        let mut l = DMatrix::<f64>::zeros(6, combos.len());
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let d: Vec<Vector3<f64>> = (0..dim).map(|k| diff(&null[k], a, b)).collect();
            for (c, &(x, y)) in combos.iter().enumerate() {
                l[(p, c)] = if x == y { d[x].dot(&d[x]) } else { 2.0 * d[x].dot(&d[y]) };
            }
        }
        let rho = nalgebra::DVector::from_vec(ctrl_d2.clone());
        let Ok(sol) = l.svd(true, true).solve(&rho, 1e-12) else { continue };
        let get = |x: usize, y: usize| sol[combos.iter().position(|&c| c == (x, y)).unwrap()];
        let mut betas = vec![get(0, 0).abs().sqrt()];
        for k in 1..dim {
            betas.push(get(k, k).abs().sqrt() * get(0, k).signum());
        }
        candidates.push(betas);
    }
    let mut four = candidates.last().cloned().unwrap_or_default();
    four.resize(4, 0.0);
    candidates.push(four);

    let mut best: Option<(f64, RigidTransform)> = None;
    for mut betas in candidates {
        refine_betas(&mut betas, &null, &pairs, &ctrl_d2, &diff);
        let mut x = nalgebra::DVector::<f64>::zeros(12);
        for (b, v) in betas.iter().zip(&null) {
            x += v * *b;
        }
        let cam_ctrl: Vec<Vector3<f64>> = (0..4).map(|j| Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2])).collect();
        let mut cam: Vec<Vector3<f64>> = alphas
            .iter()
            .map(|al| (0..4).map(|j| cam_ctrl[j] * al[j]).sum::<Vector3<f64>>())
            .collect();
        if cam.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            for p in &mut cam {
                *p = -*p;
            }
        }
        let Ok(sim) = umeyama(pts, &cam, None, false) else { continue };
        let t = sim.transform;
        if !t.is_finite() {
            continue;
        }
        let cost = reprojection_cost(&t, pts, pix, intr);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, t));
        }
    }
    best.map(|(_, t)| t)
}

fn refine_betas(
    betas: &mut [f64],
    null: &[nalgebra::DVector<f64>],
    pairs: &[(usize, usize)],
    ctrl_d2: &[f64],
    diff: &dyn Fn(&nalgebra::DVector<f64>, usize, usize) -> Vector3<f64>,
) {
    let dim = betas.len();
    for _ in 0..5 {
        let mut jac = DMatrix::<f64>::zeros(pairs.len(), dim);
        let mut res = nalgebra::DVector::<f64>::zeros(pairs.len());
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let d: Vec<Vector3<f64>> = (0..dim).map(|k| diff(&null[k], a, b)).collect();
            let s: Vector3<f64> = d.iter().zip(betas.iter()).map(|(v, b)| v * *b).sum();
            res[p] = s.norm_squared() - ctrl_d2[p];
            for k in 0..dim {
                jac[(p, k)] = 2.0 * s.dot(&d[k]);
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&res, 1e-12) else { return };
        for k in 0..dim {
            betas[k] -= step[k];
        }
    }
}

/// Levenberg-Marquardt on reprojection error, world-to-camera parameterized
/// by left increments.
fn refine_pose(
    mut w2c: RigidTransform,
    pts: &[Vector3<f64>],
    pix: &[Vector2<f64>],
    intr: &CameraIntrinsics,
    iterations: usize,
) -> RigidTransform {
    let mut lambda = 1e-3;
    let mut cost = reprojection_cost(&w2c, pts, pix, intr);
    for _ in 0..iterations {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (x, px) in pts.iter().zip(pix) {
            let p = w2c.transform_point(x);
            if p.z <= 1e-9 {
                continue;
            }
            let (u, v) = intr.project(&p);
            let r = Vector2::new(u - px.x, v - px.y);
            let iz = 1.0 / p.z;
            let dproj = nalgebra::Matrix2x3::new(intr.focal * iz, 0.0, -intr.focal * p.x * iz * iz, 0.0, intr.focal * iz, -intr.focal * p.y * iz * iz);
            let mut dp = nalgebra::Matrix3x6::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&p)));
            let j = dproj * dp;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj;
            for k in 0..6 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-9);
            }
            let Some(delta) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = se3_exp(&Twist::from_vector(&delta)).compose(&w2c);
            let trial_cost = reprojection_cost(&trial, pts, pix, intr);
            if trial_cost < cost {
                let converged = cost - trial_cost < 1e-14 * cost.max(1e-30);
                w2c = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    w2c
}

fn inliers_of(w2c: &RigidTransform, pts: &[Vector3<f64>], pix: &[Vector2<f64>], intr: &CameraIntrinsics, thr: f64) -> Vec<usize> {
    (0..pts.len())
        .filter(|&i| reprojection(w2c, &pts[i], &pix[i], intr).is_some_and(|r| r.norm() < thr))
        .collect()
}

/// RANSAC PnP over minimal 4-point samples. Returns the camera-to-world pose
/// of the camera that observed `points3d` at `pixels2d`.
pub fn estimate_relative_pose(
    points3d: &[Vector3<f64>],
    pixels2d: &[Vector2<f64>],
    intrinsics: &CameraIntrinsics,
    ransac: &RansacConfig,
) -> Result<PnpSolution> {
    if points3d.len() != pixels2d.len() {
        return Err(Error::LengthMismatch(format!("{} points vs {} pixels", points3d.len(), pixels2d.len())));
    }
    let n = points3d.len();
    if n < 4 {
        return Err(Error::InsufficientCorrespondences { needed: 4, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ransac.seed);
    let mut best: Option<(Vec<usize>, RigidTransform)> = None;
    for _ in 0..ransac.iterations.max(1) {
        let sample = index::sample(&mut rng, n, 4).into_vec();
        let sp: Vec<Vector3<f64>> = sample.iter().map(|&i| points3d[i]).collect();
        let sx: Vec<Vector2<f64>> = sample.iter().map(|&i| pixels2d[i]).collect();
        let Some(init) = epnp(&sp, &sx, intrinsics) else { continue };
        let hyp = refine_pose(init, &sp, &sx, intrinsics, 10);
        let inl = inliers_of(&hyp, points3d, pixels2d, intrinsics, ransac.threshold);
        if best.as_ref().is_none_or(|(b, _)| inl.len() > b.len()) {
            let all = inl.len() == n;
            best = Some((inl, hyp));
            if all {
                break;
            }
        }
    }
    let Some((inl, hyp)) = best else {
        return Err(Error::NoConsensus { inliers: 0, total: n });
    };
    if inl.len() < 4 {
        return Err(Error::NoConsensus { inliers: inl.len(), total: n });
    }
    let ip: Vec<Vector3<f64>> = inl.iter().map(|&i| points3d[i]).collect();
    let ix: Vec<Vector2<f64>> = inl.iter().map(|&i| pixels2d[i]).collect();
    let refined = refine_pose(hyp, &ip, &ix, intrinsics, 50);
    let inliers = inliers_of(&refined, points3d, pixels2d, intrinsics, ransac.threshold);
    if (inliers.len() as f64) < ransac.min_inlier_ratio * n as f64 {
        return Err(Error::NoConsensus { inliers: inliers.len(), total: n });
    }
    let rms = (inliers
        .iter()
        .map(|&i| reprojection(&refined, &points3d[i], &pixels2d[i], intrinsics).map_or(0.0, |r| r.norm_squared()))
        .sum::<f64>()
        / inliers.len() as f64)
        .sqrt();
    Ok(PnpSolution { pose: refined.inverse(), inliers, rms })
}

// ---------------------------------------------------------------------------
// Global alignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Converged once an accepted step lowers the objective by less than this.
    pub tolerance: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { iterations: 500, learning_rate: 1e-2, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSolution {
    pub transforms: Vec<RigidTransform>,
    pub scales: Vec<f64>,
    /// Globally aligned pointmap per view.
    pub pointmaps: Vec<Vec<Vector3<f64>>>,
    pub objective: f64,
    /// Objective after initialization and after every accepted step.
    pub history: Vec<f64>,
    pub status: AlignStatus,
    /// Edge whose transform is held fixed.
    pub root_edge: usize,
}

#[derive(Clone)]
struct AlignState {
    transforms: Vec<RigidTransform>,
    log_scales: Vec<f64>,
    pointmaps: Vec<Vec<Vector3<f64>>>,
}

fn edge_objective(e: &Edge, t: &RigidTransform, sigma: f64, world: &[Vec<Vector3<f64>>]) -> f64 {
    let mut acc = 0.0;
    for (v, map) in e.views() {
        for k in 0..map.len() {
            if map.valid[k] {
                let r = world[v][k] - t.transform_point(&map.points[k]) * sigma;
                acc += map.confidence[k] * r.norm();
            }
        }
    }
    acc
}

fn objective(graph: &ViewGraph, s: &AlignState) -> f64 {
    let parts: Vec<f64> = graph
        .edges
        .par_iter()
        .enumerate()
        .map(|(i, e)| edge_objective(e, &s.transforms[i], s.log_scales[i].exp(), &s.pointmaps))
        .collect();
    parts.iter().sum()
}

/// Objective `sum_e sum_v sum_i O |P~_v - sigma_e T_e P_ve|` for given unknowns.
pub fn alignment_objective(
    graph: &ViewGraph,
    transforms: &[RigidTransform],
    scales: &[f64],
    pointmaps: &[Vec<Vector3<f64>>],
) -> f64 {
    graph
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| edge_objective(e, &transforms[i], scales[i], pointmaps))
        .sum()
}

struct EdgeGrad {
    twist: Vector6<f64>,
    log_scale: f64,
    points: [(usize, Vec<Vector3<f64>>); 2],
}

fn edge_gradient(e: &Edge, t: &RigidTransform, sigma: f64, world: &[Vec<Vector3<f64>>]) -> EdgeGrad {
    let mut twist = Vector6::zeros();
    let mut log_scale = 0.0;
    let mut points = [(e.n, Vec::new()), (e.m, Vec::new())];
    for (slot, (v, map)) in e.views().into_iter().enumerate() {
        let mut gp = vec![Vector3::zeros(); map.len()];
        for k in 0..map.len() {
            if !map.valid[k] {
                continue;
            }
            let q = t.transform_point(&map.points[k]);
            let r = world[v][k] - q * sigma;
            let norm = r.norm();
            if norm <= 1e-12 * (1.0 + world[v][k].norm()) {
                continue;
            }
            let rh = r * (map.confidence[k] / norm);
            gp[k] = rh;
            log_scale -= sigma * rh.dot(&q);
            let g_rho = -rh * sigma;
            let g_phi = -q.cross(&rh) * sigma;
            twist += Vector6::new(g_rho.x, g_rho.y, g_rho.z, g_phi.x, g_phi.y, g_phi.z);
        }
        points[slot].1 = gp;
    }
    EdgeGrad { twist, log_scale, points }
}

/// Gradients of the alignment objective: per edge, w.r.t. a left twist
/// `Exp(delta) * T_e` and `log sigma_e`; per view, w.r.t. the aligned points.
pub fn alignment_gradient(
    graph: &ViewGraph,
    transforms: &[RigidTransform],
    scales: &[f64],
    pointmaps: &[Vec<Vector3<f64>>],
) -> (Vec<Vector6<f64>>, Vec<f64>, Vec<Vec<Vector3<f64>>>) {
    let grads: Vec<EdgeGrad> = graph
        .edges
        .par_iter()
        .enumerate()
        .map(|(i, e)| edge_gradient(e, &transforms[i], scales[i], pointmaps))
        .collect();
    let mut g_points: Vec<Vec<Vector3<f64>>> = pointmaps.iter().map(|p| vec![Vector3::zeros(); p.len()]).collect();
    let mut g_twist = Vec::with_capacity(grads.len());
    let mut g_scale = Vec::with_capacity(grads.len());
    for g in grads {
        g_twist.push(g.twist);
        g_scale.push(g.log_scale);
        for (v, gp) in g.points {
            for (acc, x) in g_points[v].iter_mut().zip(gp) {
                *acc += x;
            }
        }
    }
    (g_twist, g_scale, g_points)
}

fn recenter(log_scales: &mut [f64]) {
    let mean = log_scales.iter().sum::<f64>() / log_scales.len() as f64;
    for s in log_scales.iter_mut() {
        *s -= mean;
    }
}

/// Greedy initialization: starting from the strongest edge anchored at view 0,
/// every edge is fitted by weighted Umeyama to the views already placed.
fn initialize(graph: &ViewGraph) -> Result<(AlignState, usize)> {
    let weight = |e: &Edge| e.map_n.total_confidence() + e.map_m.total_confidence();
    let root = (0..graph.edges.len())
        .filter(|&i| graph.edges[i].n == 0)
        .chain((0..graph.edges.len()).filter(|&i| graph.edges[i].m == 0))
        .max_by(|&a, &b| {
            let (ea, eb) = (&graph.edges[a], &graph.edges[b]);
            (ea.n == 0).cmp(&(eb.n == 0)).then(weight(ea).total_cmp(&weight(eb))).then(b.cmp(&a))
        })
        .ok_or(Error::DisconnectedGraph(0))?;

    let ne = graph.edges.len();
    let mut placed: Vec<Option<Vec<Vector3<f64>>>> = vec![None; graph.views];
    let mut transforms = vec![RigidTransform::identity(); ne];
    let mut log_scales = vec![0.0; ne];
    let mut done = vec![false; ne];
    let re = &graph.edges[root];
    placed[re.n] = Some(re.map_n.points.clone());
    placed[re.m] = Some(re.map_m.points.clone());
    done[root] = true;

    loop {
        let next = (0..ne)
            .filter(|&i| !done[i] && (placed[graph.edges[i].n].is_some() || placed[graph.edges[i].m].is_some()))
            .max_by(|&a, &b| weight(&graph.edges[a]).total_cmp(&weight(&graph.edges[b])).then(b.cmp(&a)));
        let Some(i) = next else { break };
        let e = &graph.edges[i];
        let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (v, map) in e.views() {
            if let Some(world) = &placed[v] {
                for k in 0..map.len() {
                    if map.valid[k] {
                        src.push(map.points[k]);
                        dst.push(world[k]);
                        w.push(map.confidence[k]);
                    }
                }
            }
        }
        let sim = umeyama(&src, &dst, Some(&w), true)?;
        if !(sim.scale > 0.0) {
            return Err(Error::DegeneratePointmap(format!("edge ({}, {}) has a degenerate similarity", e.n, e.m)));
        }
        // sigma * (R p + t) form.
        transforms[i] = RigidTransform::new(sim.transform.rotation, sim.transform.translation / sim.scale);
        log_scales[i] = sim.scale.ln();
        for (v, map) in e.views() {
            if placed[v].is_none() {
                placed[v] = Some(map.points.iter().map(|p| sim.apply(p)).collect());
            }
        }
        done[i] = true;
    }
    if let Some(v) = placed.iter().position(|p| p.is_none()) {
        return Err(Error::DisconnectedGraph(v));
    }
    // Average every edge's prediction of a view so no residual starts exactly
    // at the kink of its norm.
    let mut pointmaps: Vec<Vec<Vector3<f64>>> = placed.into_iter().map(|p| vec![Vector3::zeros(); p.unwrap().len()]).collect();
    let mut weights: Vec<Vec<f64>> = pointmaps.iter().map(|p| vec![0.0; p.len()]).collect();
    for (i, e) in graph.edges.iter().enumerate() {
        let sigma = log_scales[i].exp();
        for (v, map) in e.views() {
            for k in 0..map.len() {
                if map.valid[k] {
                    pointmaps[v][k] += transforms[i].transform_point(&map.points[k]) * (sigma * map.confidence[k]);
                    weights[v][k] += map.confidence[k];
                }
            }
        }
    }
    for (pm, w) in pointmaps.iter_mut().zip(&weights) {
        for (p, &w) in pm.iter_mut().zip(w) {
            if w > 0.0 {
                *p /= w;
            }
        }
    }

    // Normalize to a unit scale product; scaling the world keeps the objective's argmin.
    let mean = log_scales.iter().sum::<f64>() / ne as f64;
    let c = (-mean).exp();
    recenter(&mut log_scales);
    for pm in &mut pointmaps {
        for p in pm.iter_mut() {
            *p *= c;
        }
    }
    Ok((AlignState { transforms, log_scales, pointmaps }, root))
}

/// Jointly optimizes aligned pointmaps, edge transforms and edge scales with
/// Adam plus backtracking so that the objective never increases.
pub fn global_align(graph: &ViewGraph, config: &AlignConfig) -> Result<AlignmentSolution> {
    if graph.edges.is_empty() {
        return Err(Error::EmptySequence("view graph has no edges"));
    }
    if let Some(v) = graph.unreachable_view() {
        return Err(Error::DisconnectedGraph(v));
    }
    let (mut state, root) = initialize(graph)?;
    let ne = graph.edges.len();
    let npts: usize = state.pointmaps.iter().map(|p| p.len() * 3).sum();
    let mut adam = Adam::new(ne * 6 + ne + npts, config.learning_rate);
    let mut current = objective(graph, &state);
    let mut history = vec![current];
    let mut status = AlignStatus::MaxIterations;

    for _ in 0..config.iterations {
        let scales: Vec<f64> = state.log_scales.iter().map(|s| s.exp()).collect();
        let (g_twist, mut g_scale, g_points) = alignment_gradient(graph, &state.transforms, &scales, &state.pointmaps);
        let gm = g_scale.iter().sum::<f64>() / ne as f64;
        for g in &mut g_scale {
            *g -= gm;
        }
        let mut flat = Vec::with_capacity(adam.len());
        for (i, g) in g_twist.iter().enumerate() {
            flat.extend(if i == root { [0.0; 6] } else { [g[0], g[1], g[2], g[3], g[4], g[5]] });
        }
        flat.extend(&g_scale);
        for gp in &g_points {
            for g in gp {
                flat.extend([g.x, g.y, g.z]);
            }
        }
        let step = adam.step_direction(&flat);

        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..30 {
            let trial = apply_step(&state, &step, alpha, ne, root);
            let value = objective(graph, &trial);
            if value <= current {
                accepted = Some((trial, value));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, value)) = accepted else {
            status = AlignStatus::Converged;
            break;
        };
        let decrease = current - value;
        state = trial;
        current = value;
        history.push(current);
        if decrease < config.tolerance {
            status = AlignStatus::Converged;
            break;
        }
    }
    Ok(AlignmentSolution {
        transforms: state.transforms,
        scales: state.log_scales.iter().map(|s| s.exp()).collect(),
        pointmaps: state.pointmaps,
        objective: current,
        history,
        status,
        root_edge: root,
    })
}

fn apply_step(state: &AlignState, step: &[f64], alpha: f64, ne: usize, root: usize) -> AlignState {
    let mut next = state.clone();
    for i in 0..ne {
        if i == root {
            continue;
        }
        let d = Vector6::from_iterator(step[6 * i..6 * i + 6].iter().map(|s| -alpha * s));
        next.transforms[i] = se3_exp(&Twist::from_vector(&d)).compose(&state.transforms[i]);
    }
    for i in 0..ne {
        next.log_scales[i] -= alpha * step[6 * ne + i];
    }
    recenter(&mut next.log_scales);
    let mut off = 7 * ne;
    for pm in &mut next.pointmaps {
        for p in pm.iter_mut() {
            *p -= Vector3::new(step[off], step[off + 1], step[off + 2]) * alpha;
            off += 3;
        }
    }
    next
}

/// Camera-to-world pose per view. Views that anchor an edge take the edge
/// similarity directly; the rest are solved by PnP on their aligned points.
pub fn view_poses(graph: &ViewGraph, solution: &AlignmentSolution, focal: f64) -> Result<Vec<RigidTransform>> {
    (0..graph.views)
        .map(|v| {
            let anchored = (0..graph.edges.len())
                .filter(|&i| graph.edges[i].n == v)
                .max_by(|&a, &b| {
                    graph.edges[a].map_n.total_confidence().total_cmp(&graph.edges[b].map_n.total_confidence()).then(b.cmp(&a))
                });
            if let Some(i) = anchored {
                let t = &solution.transforms[i];
                return Ok(RigidTransform::new(t.rotation, t.translation * solution.scales[i]));
            }
            let map = graph.edges.iter().find(|e| e.m == v).map(|e| &e.map_m).ok_or(Error::DisconnectedGraph(v))?;
            let intr = CameraIntrinsics::new(focal, map.width, map.height)?;
            let idx: Vec<usize> = (0..map.len()).filter(|&k| map.valid[k]).collect();
            let pts: Vec<Vector3<f64>> = idx.iter().map(|&k| solution.pointmaps[v][k]).collect();
            let pix: Vec<Vector2<f64>> = idx.iter().map(|&k| Vector2::new((k % map.width) as f64, (k / map.width) as f64)).collect();
            Ok(estimate_relative_pose(&pts, &pix, &intr, &RansacConfig::default())?.pose)
        })
        .collect()
}
