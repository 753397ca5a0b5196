//! Seed selection from confidence-weighted point clouds.
//!
//! [`confidence_balanced_sample`] stratifies the confidence range into equal
//! intervals, assigns each an equal share of the target, and draws inside each
//! interval with probability proportional to confidence. The remaining
//! strategies are the random, spatial (voxel FPS) and center baselines.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Quaternion;
use crate::splat::{Gaussian3D, Scene};

/// Confidences at or below zero are clamped to this before weighting.
pub const MIN_CONFIDENCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidencePointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub confidence: Vec<f64>,
}

impl ConfidencePointCloud {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        colors: Option<Vec<[f64; 3]>>,
        confidence: Vec<f64>,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptySequence("point cloud needs at least one point"));
        }
        if confidence.len() != positions.len() {
            return Err(Error::LengthMismatch(format!(
                "{} positions but {} confidences",
                positions.len(),
                confidence.len()
            )));
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::LengthMismatch(format!("{} positions but {} colors", positions.len(), c.len())));
            }
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) || confidence.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("point cloud contains non-finite values".into()));
        }
        Ok(ConfidencePointCloud { positions, colors, confidence })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn weight(&self, i: usize) -> f64 {
        self.confidence[i].max(MIN_CONFIDENCE)
    }

    /// Keeps only the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> ConfidencePointCloud {
        ConfidencePointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            confidence: indices.iter().map(|&i| self.confidence[i]).collect(),
        }
    }

    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.positions[0];
        let mut hi = self.positions[0];
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPlan {
    /// Total number of seeds `L`.
    pub target: usize,
    /// Number of confidence intervals `M`.
    pub intervals: usize,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(target: usize, intervals: usize, seed: u64) -> Result<Self> {
        if intervals == 0 || intervals > target.max(1) {
            return Err(Error::InvalidArgument(format!(
                "interval count must satisfy 1 <= M <= L, got M={intervals}, L={target}"
            )));
        }
        Ok(SamplingPlan { target, intervals, seed })
    }
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan { target: 5000, intervals: 40, seed: 0 }
    }
}

fn check_target(cloud: &ConfidencePointCloud, target: usize) -> Result<()> {
    if target > cloud.len() {
        Err(Error::TargetExceedsCloud { requested: target, available: cloud.len() })
    } else {
        Ok(())
    }
}

/// Draws `count` distinct members of `pool` with probability proportional to
/// `weight`, using exponential race keys `-ln(U) / w` (smallest keys win).
pub fn weighted_without_replacement<R: Rng>(
    pool: &[usize],
    weight: impl Fn(usize) -> f64,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = pool
        .iter()
        .map(|&i| {
            let u: f64 = rng.random::<f64>();
            // random() is in [0, 1); flip to (0, 1] so ln stays finite.
            (-(1.0 - u).ln() / weight(i), i)
        })
        .collect();
    let count = count.min(keyed.len());
    if count < keyed.len() {
        keyed.select_nth_unstable_by(count, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }
    keyed.truncate(count);
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Interval membership `S_m` for `M` equal-width confidence intervals.
pub fn confidence_intervals(cloud: &ConfidencePointCloud, intervals: usize) -> Vec<Vec<usize>> {
    let (lo, hi) = cloud
        .confidence
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &c| (l.min(c), h.max(c)));
    let width = (hi - lo) / intervals as f64;
    let mut members = vec![Vec::new(); intervals];
    for (i, &c) in cloud.confidence.iter().enumerate() {
        let m = if width > 0.0 { (((c - lo) / width).floor() as usize).min(intervals - 1) } else { 0 };
        members[m].push(i);
    }
    members
}

/// Per-interval quotas: an equal share `L/M` (the remainder going to the
/// highest-confidence intervals), capped by interval size, with any deficit
/// re-apportioned by residual capacity until the target is met.
pub fn interval_quotas(sizes: &[usize], target: usize) -> Vec<usize> {
    let m = sizes.len();
    let base = target / m;
    let extra = target % m;
    let mut quota: Vec<usize> = (0..m).map(|i| base + usize::from(i >= m - extra)).collect();
    for (q, &s) in quota.iter_mut().zip(sizes) {
        *q = (*q).min(s);
    }
    loop {
        let assigned: usize = quota.iter().sum();
        let deficit = target.saturating_sub(assigned);
        let capacity: Vec<usize> = sizes.iter().zip(&quota).map(|(s, q)| s - q).collect();
        let total_cap: usize = capacity.iter().sum();
        if deficit == 0 || total_cap == 0 {
            return quota;
        }
        let give = deficit.min(total_cap);
        // Largest-remainder apportionment of `give` over residual capacity.
        let mut shares: Vec<(usize, f64, usize)> = capacity
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let exact = give as f64 * c as f64 / total_cap as f64;
                (i, exact - exact.floor(), (exact.floor() as usize).min(c))
            })
            .collect();
        let mut handed: usize = shares.iter().map(|s| s.2).sum();
        shares.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
        for s in shares.iter_mut() {
            if handed >= give {
                break;
            }
            if s.2 < capacity[s.0] {
                s.2 += 1;
                handed += 1;
            }
        }
        for (i, _, add) in shares {
            quota[i] += add;
        }
    }
}

/// Confidence Balanced Sampling. Returns sorted, distinct indices.
pub fn confidence_balanced_sample(cloud: &ConfidencePointCloud, plan: &SamplingPlan) -> Result<Vec<usize>> {
    check_target(cloud, plan.target)?;
    if plan.intervals == 0 {
        return Err(Error::InvalidArgument("interval count must be >= 1".into()));
    }
    let members = confidence_intervals(cloud, plan.intervals);
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quota = interval_quotas(&sizes, plan.target);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::with_capacity(plan.target);
    for (pool, &q) in members.iter().zip(&quota) {
        out.extend(weighted_without_replacement(pool, |i| cloud.weight(i), q, &mut rng));
    }
    out.sort_unstable();
    Ok(out)
}

/// Uniform sampling without replacement.
pub fn random_sample(cloud: &ConfidencePointCloud, target: usize, seed: u64) -> Result<Vec<usize>> {
    check_target(cloud, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = index::sample(&mut rng, cloud.len(), target).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Default voxel edge for [`spatial_sample`]: bounding-box diagonal / 32.
pub fn default_voxel_size(cloud: &ConfidencePointCloud) -> f64 {
    let (lo, hi) = cloud.bounding_box();
    let d = (hi - lo).norm() / 32.0;
    if d > 0.0 {
        d
    } else {
        1.0
    }
}

/// Farthest point sampling over a voxel grid. Each occupied voxel receives
/// `floor(L * n_v / K)` seeds, picked by FPS started from its most confident
/// point; the remaining seeds come from a global FPS pass that continues from
/// everything already selected (or from the most confident point overall).
pub fn spatial_sample(cloud: &ConfidencePointCloud, target: usize, voxel: f64) -> Result<Vec<usize>> {
    check_target(cloud, target)?;
    if !(voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {voxel}")));
    }
    if target == 0 {
        return Ok(Vec::new());
    }
    let (lo, _) = cloud.bounding_box();
    let mut voxels: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = [0, 1, 2].map(|a| ((p[a] - lo[a]) / voxel).floor() as i64);
        voxels.entry(key).or_default().push(i);
    }

    let k = cloud.len();
    let mut selected = Vec::with_capacity(target);
    for pool in voxels.values() {
        let quota = target * pool.len() / k;
        if quota > 0 {
            selected.extend(farthest_point_sampling(cloud, pool, &[], quota));
        }
    }
    let remaining = target - selected.len();
    if remaining > 0 {
        let mut taken = vec![false; k];
        for &i in &selected {
            taken[i] = true;
        }
        let pool: Vec<usize> = (0..k).filter(|&i| !taken[i]).collect();
        let extra = farthest_point_sampling(cloud, &pool, &selected, remaining);
        selected.extend(extra);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Greedy FPS over `pool`. Distances are measured to `anchors` plus the
/// picks so far; with no anchors the most confident pool member seeds it.
/// Ties go to the lower index.
pub fn farthest_point_sampling(
    cloud: &ConfidencePointCloud,
    pool: &[usize],
    anchors: &[usize],
    count: usize,
) -> Vec<usize> {
    let count = count.min(pool.len());
    if count == 0 {
        return Vec::new();
    }
    let mut dist = vec![f64::INFINITY; pool.len()];
    let mut used = vec![false; pool.len()];
    let update = |dist: &mut [f64], from: usize| {
        let q = cloud.positions[from];
        for (d, &i) in dist.iter_mut().zip(pool) {
            *d = d.min((cloud.positions[i] - q).norm_squared());
        }
    };
    for &a in anchors {
        update(&mut dist, a);
    }
    let mut out = Vec::with_capacity(count);
    if anchors.is_empty() {
        let first = (0..pool.len())
            .max_by(|&a, &b| {
                cloud.confidence[pool[a]]
                    .total_cmp(&cloud.confidence[pool[b]])
                    .then(pool[b].cmp(&pool[a]))
            })
            .unwrap();
        used[first] = true;
        out.push(pool[first]);
        update(&mut dist, pool[first]);
    }
    while out.len() < count {
        let next = (0..pool.len())
            .filter(|&j| !used[j])
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(pool[b].cmp(&pool[a])))
            .unwrap();
        used[next] = true;
        out.push(pool[next]);
        update(&mut dist, pool[next]);
    }
    out
}

/// Confidence-weighted centroid and mean distance to it.
pub fn confidence_center(cloud: &ConfidencePointCloud) -> (Vector3<f64>, f64) {
    let mut sum = Vector3::zeros();
    let mut wsum = 0.0;
    for (i, p) in cloud.positions.iter().enumerate() {
        let w = cloud.weight(i);
        sum += p * w;
        wsum += w;
    }
    let center = sum / wsum;
    let radius = cloud.positions.iter().map(|p| (p - center).norm()).sum::<f64>() / cloud.len() as f64;
    (center, radius)
}

/// Uniform sampling among points within the mean distance of the
/// confidence-weighted centroid.
pub fn center_sample(cloud: &ConfidencePointCloud, target: usize, seed: u64) -> Result<Vec<usize>> {
    check_target(cloud, target)?;
    let (center, radius) = confidence_center(cloud);
    let limit = radius * (1.0 + 1e-9);
    let eligible: Vec<usize> =
        (0..cloud.len()).filter(|&i| (cloud.positions[i] - center).norm() <= limit).collect();
    if target > eligible.len() {
        return Err(Error::InsufficientPointsInRadius { requested: target, available: eligible.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = index::sample(&mut rng, eligible.len(), target)
        .into_iter()
        .map(|j| eligible[j])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Isotropic Gaussians seeded at the selected points. Each scale is the root
/// mean squared distance to the three nearest selected neighbours; colors come
/// from the cloud (mid gray when absent).
pub fn initialize_scene(
    cloud: &ConfidencePointCloud,
    indices: &[usize],
    opacity: f64,
    background: [f64; 3],
) -> Result<Scene> {
    if indices.is_empty() {
        return Err(Error::EmptySequence("scene initialization needs at least one point"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::InvalidArgument(format!("point index {bad} out of range for {} points", cloud.len())));
    }
    if !(opacity > 0.0 && opacity < 1.0) {
        return Err(Error::InvalidArgument(format!("initial opacity must lie in (0, 1), got {opacity}")));
    }
    let pts: Vec<Vector3<f64>> = indices.iter().map(|&i| cloud.positions[i]).collect();
    let fallback = {
        let (lo, hi) = cloud.bounding_box();
        ((hi - lo).norm() / 100.0).max(1e-3)
    };
    let gaussians = pts
        .par_iter()
        .enumerate()
        .map(|(a, p)| {
            let mut nearest = [f64::INFINITY; 3];
            for (b, q) in pts.iter().enumerate() {
                if a == b {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < nearest[2] {
                    nearest[2] = d;
                    nearest.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = nearest.into_iter().filter(|d| d.is_finite()).collect();
            let scale = if found.is_empty() {
                fallback
            } else {
                (found.iter().sum::<f64>() / found.len() as f64).sqrt().max(1e-4)
            };
            let color = cloud.colors.as_ref().map_or([0.5; 3], |c| c[indices[a]]);
            Gaussian3D::new(*p, Vector3::repeat(scale), Quaternion::IDENTITY, opacity, color)
        })
        .collect();
    Ok(Scene::new(gaussians, background))
}
