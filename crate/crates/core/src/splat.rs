//! Differentiable CPU splatting of 3D Gaussians.
//!
//! Forward: covariance `R diag(s^2) R^T`, EWA projection `J R_c Sigma R_c^T J^T`
//! plus a 0.3 px^2 low-pass, depth-sorted front-to-back compositing with
//! `alpha = o * exp(-0.5 d^T Sigma'^-1 d)`. Backward: analytic reverse mode
//! through compositing, projection, covariance and the camera pose.
//!
//! Pixel `(x, y)` is sampled at image coordinates `(x, y)`; the principal point
//! is `(W/2, H/2)`. Poses are camera-to-world. Pose gradients are with respect
//! to a right perturbation `pose * Exp(delta)`, `delta = (rho, phi)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{hat, CameraIntrinsics, Quaternion, RigidTransform};
use crate::image::Image;

pub const NEAR_PLANE: f64 = 0.01;
pub const LOW_PASS: f64 = 0.3;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
pub const MIN_COV_DET: f64 = 1e-12;
/// Footprint radius in Mahalanobis units.
pub const FOOTPRINT_SIGMA: f64 = 3.0;
const MAX_POWER: f64 = 0.5 * FOOTPRINT_SIGMA * FOOTPRINT_SIGMA;
pub const TILE: usize = 16;
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Splat primitive in unconstrained storage: log-scales, a raw (unnormalized)
/// `wxyz` quaternion and a logit opacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gaussian3D {
    pub fn new(mean: Vector3<f64>, scale: Vector3<f64>, rotation: Quaternion, opacity: f64, color: [f64; 3]) -> Self {
        Gaussian3D {
            mean,
            log_scale: scale.map(f64::ln),
            rotation: [rotation.w, rotation.x, rotation.y, rotation.z],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn quaternion(&self) -> Quaternion {
        let [w, x, y, z] = self.rotation;
        Quaternion::new(w, x, y, z)
    }

    /// Flattened as mean(3), log_scale(3), rotation(4), opacity_logit, color(3).
    pub fn to_params(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut p = [0.0; PARAMS_PER_GAUSSIAN];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..6].copy_from_slice(self.log_scale.as_slice());
        p[6..10].copy_from_slice(&self.rotation);
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(&self.color);
        p
    }

    pub fn from_params(p: &[f64; PARAMS_PER_GAUSSIAN]) -> Self {
        Gaussian3D {
            mean: Vector3::new(p[0], p[1], p[2]),
            log_scale: Vector3::new(p[3], p[4], p[5]),
            rotation: [p[6], p[7], p[8], p[9]],
            opacity_logit: p[10],
            color: [p[11], p[12], p[13]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
    pub background: [f64; 3],
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian3D>, background: [f64; 3]) -> Self {
        Scene { gaussians, background }
    }

    /// Rigidly moves every Gaussian: means, orientations and covariances.
    pub fn transformed(&self, t: &RigidTransform) -> Scene {
        let qt = t.quaternion();
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| {
                let q = qt.mul(&g.quaternion());
                Gaussian3D { mean: t.transform_point(&g.mean), rotation: [q.w, q.x, q.y, q.z], ..*g }
            })
            .collect();
        Scene { gaussians, background: self.background }
    }
}

/// `R diag(s^2) R^T` for the Gaussian's normalized rotation.
pub fn build_covariance(g: &Gaussian3D) -> Matrix3<f64> {
    let m = g.quaternion().to_rotation_matrix() * Matrix3::from_diagonal(&g.scale());
    m * m.transpose()
}

/// Projection of one Gaussian into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(Projected),
    BehindCamera,
    SingularCovariance,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct ProjCache {
    index: usize,
    p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    mean2d: Vector2<f64>,
    cov2d: Matrix2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    /// Inclusive pixel bounding box of the footprint.
    bbox: [i64; 4],
}

fn projection_jacobian(p: &Vector3<f64>, focal: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(focal * iz, 0.0, -focal * p.x * iz * iz, 0.0, focal * iz, -focal * p.y * iz * iz)
}

fn project_cached(g: &Gaussian3D, index: usize, world_to_cam: &RigidTransform, intr: &CameraIntrinsics) -> Option<ProjCache> {
    let p_cam = world_to_cam.transform_point(&g.mean);
    if p_cam.z <= NEAR_PLANE {
        return None;
    }
    let jac = projection_jacobian(&p_cam, intr.focal);
    let r = world_to_cam.rotation;
    let sigma_cam = r * build_covariance(g) * r.transpose();
    let cov2d = jac * sigma_cam * jac.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov2d.determinant();
    if !(det >= MIN_COV_DET) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
    let (u, v) = intr.project(&p_cam);
    let mean2d = Vector2::new(u, v);
    let rx = FOOTPRINT_SIGMA * cov2d[(0, 0)].sqrt();
    let ry = FOOTPRINT_SIGMA * cov2d[(1, 1)].sqrt();
    let bbox = [
        (u - rx).floor() as i64 - 1,
        (v - ry).floor() as i64 - 1,
        (u + rx).ceil() as i64 + 1,
        (v + ry).ceil() as i64 + 1,
    ];
    Some(ProjCache {
        index,
        p_cam,
        jac,
        sigma_cam,
        mean2d,
        cov2d,
        conic,
        opacity: g.opacity(),
        color: g.color,
        bbox,
    })
}

/// Projects one Gaussian seen from a camera-to-world `pose`.
pub fn project_gaussian(g: &Gaussian3D, pose: &RigidTransform, intr: &CameraIntrinsics) -> Projection {
    let w2c = pose.inverse();
    let p = w2c.transform_point(&g.mean);
    if p.z <= NEAR_PLANE {
        return Projection::BehindCamera;
    }
    match project_cached(g, 0, &w2c, intr) {
        Some(c) => Projection::Visible(Projected { mean2d: c.mean2d, cov2d: c.cov2d, depth: c.p_cam.z }),
        None => Projection::SingularCovariance,
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// 3-channel composited color.
    pub color: Image,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// Sum of compositing weights `alpha_i * T_i` per pixel.
    pub weight_sum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradient {
    /// Per-Gaussian gradients laid out like [`Gaussian3D::to_params`].
    pub gaussians: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    /// Gradient with respect to the right-perturbation pose twist.
    pub pose: Vector6<f64>,
}

impl SceneGradient {
    pub fn zeros(n: usize) -> Self {
        SceneGradient { gaussians: vec![[0.0; PARAMS_PER_GAUSSIAN]; n], pose: Vector6::zeros() }
    }

    pub fn add_assign(&mut self, other: &SceneGradient) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.pose += other.pose;
    }
}

/// Screen-space data read by the compositing loop.
#[derive(Debug, Clone, Copy)]
struct Splat2D {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    bbox: [i64; 4],
}

struct Prepared {
    projections: Vec<ProjCache>,
    splats: Vec<Splat2D>,
}

fn prepare(scene: &Scene, pose: &RigidTransform, intr: &CameraIntrinsics) -> Prepared {
    let w2c = pose.inverse();
    let mut projections: Vec<ProjCache> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_cached(g, i, &w2c, intr))
        .collect();
    projections.sort_by(|a, b| a.p_cam.z.total_cmp(&b.p_cam.z).then(a.index.cmp(&b.index)));
    let splats = projections
        .iter()
        .map(|p| Splat2D {
            mean: [p.mean2d.x, p.mean2d.y],
            conic: p.conic,
            opacity: p.opacity,
            color: p.color,
            bbox: p.bbox,
        })
        .collect();
    Prepared { projections, splats }
}

/// One compositing contribution at a pixel, kept for the backward pass.
#[derive(Clone, Copy)]
struct Contribution {
    slot: u32,
    alpha: f64,
    t_before: f64,
}

struct PixelResult {
    color: [f64; 3],
    transmittance: f64,
    weight_sum: f64,
}

#[inline]
fn splat_power(s: &Splat2D, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    (0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy), dx, dy)
}

/// Front-to-back compositing over `order` (indices into `splats`). With `cull`
/// set, Gaussians whose bounding box misses the pixel are skipped before the
/// exact cutoff test.
#[inline]
fn shade_pixel(
    splats: &[Splat2D],
    order: impl Iterator<Item = usize>,
    px: f64,
    py: f64,
    background: &[f64; 3],
    cull: bool,
    mut record: Option<&mut Vec<Contribution>>,
) -> PixelResult {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut wsum = 0.0;
    let (ix, iy) = (px as i64, py as i64);
    for slot in order {
        let p = &splats[slot];
        if cull && (ix < p.bbox[0] || iy < p.bbox[1] || ix > p.bbox[2] || iy > p.bbox[3]) {
            continue;
        }
        let (power, _, _) = splat_power(p, px, py);
        if !(power <= MAX_POWER) {
            continue;
        }
        let alpha = p.opacity * (-power).exp();
        let w = alpha * t;
        for ch in 0..3 {
            c[ch] += p.color[ch] * w;
        }
        wsum += w;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution { slot: slot as u32, alpha, t_before: t });
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_STOP {
            break;
        }
    }
    for ch in 0..3 {
        c[ch] += background[ch] * t;
    }
    PixelResult { color: c, transmittance: t, weight_sum: wsum }
}

struct TileInfo {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Slots (indices into the depth-sorted projections) overlapping the tile.
    slots: Vec<usize>,
}

fn build_tiles(prep: &Prepared, w: usize, h: usize) -> Vec<TileInfo> {
    let tx = w.div_ceil(TILE);
    let ty = h.div_ceil(TILE);
    let mut tiles: Vec<TileInfo> = (0..tx * ty)
        .map(|i| {
            let (x0, y0) = ((i % tx) * TILE, (i / tx) * TILE);
            TileInfo { x0, y0, x1: (x0 + TILE).min(w), y1: (y0 + TILE).min(h), slots: Vec::new() }
        })
        .collect();
    for (slot, p) in prep.splats.iter().enumerate() {
        let [bx0, by0, bx1, by1] = p.bbox;
        if bx1 < 0 || by1 < 0 || bx0 >= w as i64 || by0 >= h as i64 {
            continue;
        }
        let cx0 = (bx0.max(0) as usize) / TILE;
        let cy0 = (by0.max(0) as usize) / TILE;
        let cx1 = (bx1.min(w as i64 - 1) as usize) / TILE;
        let cy1 = (by1.min(h as i64 - 1) as usize) / TILE;
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                tiles[cy * tx + cx].slots.push(slot);
            }
        }
    }
    tiles
}

fn check_render_inputs(scene: &Scene, pose: &RigidTransform, intr: &CameraIntrinsics) -> Result<()> {
    if !pose.is_finite() {
        return Err(Error::InvalidArgument("camera pose is not finite".into()));
    }
    if let Some(i) = scene.gaussians.iter().position(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument(format!("gaussian {i} has non-finite parameters")));
    }
    if intr.width == 0 || intr.height == 0 {
        return Err(Error::InvalidArgument("image dims must be >= 1".into()));
    }
    Ok(())
}

/// Per-tile shading results and, when recording, the contributions of every
/// pixel (`offsets[i]..offsets[i + 1]` for the tile's `i`-th pixel).
struct TileRecord {
    pixels: Vec<PixelResult>,
    contribs: Vec<Contribution>,
    offsets: Vec<usize>,
}

fn shade_tiles(scene: &Scene, prep: &Prepared, tiles: &[TileInfo], record: bool) -> Vec<TileRecord> {
    tiles
        .par_iter()
        .map(|tile| {
            let n = (tile.x1 - tile.x0) * (tile.y1 - tile.y0);
            let mut rec = TileRecord { pixels: Vec::with_capacity(n), contribs: Vec::new(), offsets: Vec::new() };
            if record {
                rec.offsets.reserve(n + 1);
                rec.offsets.push(0);
            }
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let r = shade_pixel(
                        &prep.splats,
                        tile.slots.iter().copied(),
                        x as f64,
                        y as f64,
                        &scene.background,
                        true,
                        record.then_some(&mut rec.contribs),
                    );
                    rec.pixels.push(r);
                    if record {
                        rec.offsets.push(rec.contribs.len());
                    }
                }
            }
            rec
        })
        .collect()
}

fn assemble(tiles: &[TileInfo], records: &mut [TileRecord], w: usize, h: usize) -> Result<RenderOutput> {
    let mut out = empty_output(w, h)?;
    for (tile, rec) in tiles.iter().zip(records.iter_mut()) {
        let mut it = rec.pixels.drain(..);
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                write_pixel(&mut out, x, y, w, it.next().unwrap());
            }
        }
    }
    Ok(out)
}

/// Tiled rasterization (16x16 tiles, footprint-culled, parallel over tiles).
pub fn rasterize(scene: &Scene, pose: &RigidTransform, intr: &CameraIntrinsics) -> Result<RenderOutput> {
    check_render_inputs(scene, pose, intr)?;
    let prep = prepare(scene, pose, intr);
    let tiles = build_tiles(&prep, intr.width, intr.height);
    let mut records = shade_tiles(scene, &prep, &tiles, false);
    assemble(&tiles, &mut records, intr.width, intr.height)
}

/// Reference rasterizer: every Gaussian tested at every pixel.
pub fn rasterize_naive(scene: &Scene, pose: &RigidTransform, intr: &CameraIntrinsics) -> Result<RenderOutput> {
    check_render_inputs(scene, pose, intr)?;
    let (w, h) = (intr.width, intr.height);
    let prep = prepare(scene, pose, intr);
    let mut out = empty_output(w, h)?;
    for y in 0..h {
        for x in 0..w {
            let r = shade_pixel(&prep.splats, 0..prep.splats.len(), x as f64, y as f64, &scene.background, false, None);
            write_pixel(&mut out, x, y, w, r);
        }
    }
    Ok(out)
}

fn empty_output(w: usize, h: usize) -> Result<RenderOutput> {
    Ok(RenderOutput { color: Image::new(w, h, 3)?, transmittance: vec![0.0; w * h], weight_sum: vec![0.0; w * h] })
}

fn write_pixel(out: &mut RenderOutput, x: usize, y: usize, w: usize, r: PixelResult) {
    for ch in 0..3 {
        out.color.set(x, y, ch, r.color[ch]);
    }
    out.transmittance[y * w + x] = r.transmittance;
    out.weight_sum[y * w + x] = r.weight_sum;
}

/// Screen-space gradient accumulated per projected Gaussian.
#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity_logit: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity_logit += o.opacity_logit;
    }
}

/// Forward pass state kept for [`render_backward`].
pub struct RenderTape {
    pose: RigidTransform,
    prep: Prepared,
    tiles: Vec<TileInfo>,
    records: Vec<TileRecord>,
    transmittance: Vec<f64>,
    width: usize,
    height: usize,
}

/// Renders and records the compositing order for a later backward pass.
pub fn render_forward(scene: &Scene, pose: &RigidTransform, intr: &CameraIntrinsics) -> Result<(RenderOutput, RenderTape)> {
    check_render_inputs(scene, pose, intr)?;
    let (w, h) = (intr.width, intr.height);
    let prep = prepare(scene, pose, intr);
    let tiles = build_tiles(&prep, w, h);
    let mut records = shade_tiles(scene, &prep, &tiles, true);
    let out = assemble(&tiles, &mut records, w, h)?;
    let tape =
        RenderTape { pose: *pose, prep, tiles, records, transmittance: out.transmittance.clone(), width: w, height: h };
    Ok((out, tape))
}

/// Back-propagates `adjoint` (dLoss/dColor, 3 channels) through a recorded
/// render to every Gaussian parameter and to the pose twist. `scene` and
/// `intr` must be the ones passed to [`render_forward`].
pub fn render_backward(
    scene: &Scene,
    tape: &RenderTape,
    intr: &CameraIntrinsics,
    adjoint: &Image,
) -> Result<SceneGradient> {
    let (w, h) = (tape.width, tape.height);
    if adjoint.width() != w || adjoint.height() != h || adjoint.channels() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "adjoint is {}x{}x{}, render is {w}x{h}x3",
            adjoint.width(),
            adjoint.height(),
            adjoint.channels()
        )));
    }
    let prep = &tape.prep;
    let bg = scene.background;
    let per_tile: Vec<Vec<ScreenGrad>> = tape
        .tiles
        .par_iter()
        .zip(&tape.records)
        .map(|(tile, rec)| {
            let mut local = vec![ScreenGrad::default(); prep.splats.len()];
            let mut i = 0;
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let contribs = &rec.contribs[rec.offsets[i]..rec.offsets[i + 1]];
                    i += 1;
                    let t_final = tape.transmittance[y * w + x];
                    let g = [adjoint.get(x, y, 0), adjoint.get(x, y, 1), adjoint.get(x, y, 2)];
                    let mut behind = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final];
                    for c in contribs.iter().rev() {
                        let slot = c.slot as usize;
                        let p = &prep.splats[slot];
                        let (_, dx, dy) = splat_power(p, x as f64, y as f64);
                        let gauss = c.alpha / p.opacity;
                        let sg = &mut local[slot];
                        let wgt = c.alpha * c.t_before;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            sg.color[ch] += g[ch] * wgt;
                            d_alpha += g[ch] * (p.color[ch] * c.t_before - behind[ch] / (1.0 - c.alpha));
                            behind[ch] += p.color[ch] * wgt;
                        }
                        sg.opacity_logit += d_alpha * gauss * p.opacity * (1.0 - p.opacity);
                        let d_power = -c.alpha * d_alpha;
                        let [ca, cb, cc] = p.conic;
                        sg.mean2d[0] -= d_power * (ca * dx + cb * dy);
                        sg.mean2d[1] -= d_power * (cb * dx + cc * dy);
                        sg.conic[0] += d_power * 0.5 * dx * dx;
                        sg.conic[1] += d_power * dx * dy;
                        sg.conic[2] += d_power * 0.5 * dy * dy;
                    }
                }
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); prep.splats.len()];
    for (tile, grads) in tape.tiles.iter().zip(per_tile) {
        for &slot in &tile.slots {
            screen[slot].add(&grads[slot]);
        }
    }

    let w2c = tape.pose.inverse();
    let mut grad = SceneGradient::zeros(scene.gaussians.len());
    for (p, sg) in prep.projections.iter().zip(&screen) {
        let (gp, pose_grad) = backprop_gaussian(&scene.gaussians[p.index], p, sg, &w2c, intr.focal);
        grad.gaussians[p.index] = gp;
        grad.pose += pose_grad;
    }
    Ok(grad)
}

/// Renders and back-propagates `adjoint` (dLoss/dColor, 3 channels) to every
/// Gaussian parameter and to the pose twist.
pub fn render_with_gradients(
    scene: &Scene,
    pose: &RigidTransform,
    intr: &CameraIntrinsics,
    adjoint: &Image,
) -> Result<(RenderOutput, SceneGradient)> {
    check_render_inputs(scene, pose, intr)?;
    if adjoint.width() != intr.width || adjoint.height() != intr.height || adjoint.channels() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "adjoint is {}x{}x{}, render is {}x{}x3",
            adjoint.width(),
            adjoint.height(),
            adjoint.channels(),
            intr.width,
            intr.height
        )));
    }
    let (out, tape) = render_forward(scene, pose, intr)?;
    let grad = render_backward(scene, &tape, intr, adjoint)?;
    Ok((out, grad))
}

fn rotation_partials(q: &Quaternion) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

fn backprop_gaussian(
    g: &Gaussian3D,
    p: &ProjCache,
    sg: &ScreenGrad,
    w2c: &RigidTransform,
    focal: f64,
) -> ([f64; PARAMS_PER_GAUSSIAN], Vector6<f64>) {
    let k = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2d = -(k * g_conic * k);
    let g_jac: Matrix2x3<f64> = g_cov2d * p.jac * p.sigma_cam * 2.0;
    let g_sigma_cam = p.jac.transpose() * g_cov2d * p.jac;

    let g_mean2d = Vector2::new(sg.mean2d[0], sg.mean2d[1]);
    let mut g_pcam = p.jac.transpose() * g_mean2d;
    let (x, y, z) = (p.p_cam.x, p.p_cam.y, p.p_cam.z);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    g_pcam.x += g_jac[(0, 2)] * (-focal * iz2);
    g_pcam.y += g_jac[(1, 2)] * (-focal * iz2);
    g_pcam.z += g_jac[(0, 0)] * (-focal * iz2)
        + g_jac[(0, 2)] * (2.0 * focal * x * iz3)
        + g_jac[(1, 1)] * (-focal * iz2)
        + g_jac[(1, 2)] * (2.0 * focal * y * iz3);

    let r_cw = w2c.rotation;
    let g_mean = r_cw.transpose() * g_pcam;
    let g_sigma = r_cw.transpose() * g_sigma_cam * r_cw;

    let q = g.quaternion();
    let rot = q.to_rotation_matrix();
    let s = g.scale();
    let m = rot * Matrix3::from_diagonal(&s);
    let g_m = g_sigma * m * 2.0;
    let mut g_rot = Matrix3::zeros();
    let mut g_logs = Vector3::zeros();
    for j in 0..3 {
        let mut gs = 0.0;
        for i in 0..3 {
            g_rot[(i, j)] = g_m[(i, j)] * s[j];
            gs += g_m[(i, j)] * rot[(i, j)];
        }
        g_logs[j] = gs * s[j];
    }
    let partials = rotation_partials(&q);
    let g_qn: [f64; 4] = std::array::from_fn(|i| g_rot.component_mul(&partials[i]).sum());
    let qn = [q.w, q.x, q.y, q.z];
    let raw_norm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|i| qn[i] * g_qn[i]).sum();
    let g_raw: [f64; 4] = std::array::from_fn(|i| (g_qn[i] - dot * qn[i]) / raw_norm);

    let mut out = [0.0; PARAMS_PER_GAUSSIAN];
    out[0..3].copy_from_slice(g_mean.as_slice());
    out[3..6].copy_from_slice(g_logs.as_slice());
    out[6..10].copy_from_slice(&g_raw);
    out[10] = sg.opacity_logit;
    out[11..14].copy_from_slice(&sg.color);

    // Right perturbation of the camera-to-world pose: p_cam -> Exp(-delta) p_cam.
    let g_rho = -g_pcam;
    let mut g_phi = g_pcam.cross(&p.p_cam);
    for i in 0..3 {
        let e = hat(&Vector3::ith(i, 1.0));
        let d_sigma = -(e * p.sigma_cam) + p.sigma_cam * e;
        g_phi[i] += g_sigma_cam.component_mul(&d_sigma).sum();
    }
    let pose_grad = Vector6::new(g_rho.x, g_rho.y, g_rho.z, g_phi.x, g_phi.y, g_phi.z);
    (out, pose_grad)
}
