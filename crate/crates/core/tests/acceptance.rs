//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use deblursplat::alignment::{average_focal, estimate_focal_weiszfeld, global_align, AlignConfig, PointMap};
use deblursplat::events::{bin_events, edi_decouple, simulate_events, synthesize_blur, EventBins, DEFAULT_LOG_EPS};
use deblursplat::geometry::{
    interpolate_latent_poses, latent_pose_at, se3_exp, se3_log, so3_exp, CameraIntrinsics, RigidTransform,
    Twist,
};
use deblursplat::metrics::{ate, psnr, ssim, AteAlignment, TimedPose};
use deblursplat::pipeline::{run_experiment, InitConfig};
use deblursplat::sampling::{
    confidence_balanced_sample, confidence_intervals, weighted_without_replacement, ConfidencePointCloud, SamplingPlan,
};
use deblursplat::splat::{rasterize, rasterize_naive};
use deblursplat::synthetic::{generate, SyntheticDatasetSpec};
use deblursplat::training::TrainConfig;
use deblursplat::Image;
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EDI_REL_TOL: f64 = 1e-6;
const EDI_TRIPLES: usize = 100;
const EDI_MAX_SECONDS: f64 = 5.0;
const THETA: f64 = 0.27;
const ROUND_TRIP_MEDIAN: f64 = 0.05;
const ROUND_TRIP_MAX_SECONDS: f64 = 10.0;
const EXP_LOG_CASES: usize = 10_000;
const EXP_LOG_TOL: f64 = 1e-9;
const ENDPOINT_TOL: f64 = 1e-9;
const SLERP_TOL: f64 = 1e-6;
const CBS_TARGET: usize = 5000;
const CBS_INTERVALS: usize = 40;
const DRAW_TRIALS: usize = 10_000;
const GRADIENT_PROBES: usize = 1000;
const GRADIENT_PASS_RATE: f64 = 0.99;
const GRADIENT_REL_TOL: f64 = 1e-3;
const ALPHA_TOL: f64 = 1e-6;
const FOCAL_REL_TOL: f64 = 1e-3;
const SCALE_TOL: f64 = 1e-3;
const SCALE_PRODUCT_TOL: f64 = 1e-9;
const PSNR_GAIN_DB: f64 = 2.0;
const ATE_RATIO: f64 = 0.5;
const TREND_MAX_SECONDS: f64 = 600.0;
const PSNR_TOL: f64 = 1e-6;

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, v: &Verdict) -> bool {
    println!("criterion {n} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn edi_identity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..EDI_TRIPLES {
        let (w, h, u) = (rng.random_range(4..32), rng.random_range(4..32), rng.random_range(1..16));
        let ch = if rng.random_bool(0.5) { 1 } else { 3 };
        let blur = Image::from_fn(w, h, ch, |_, _, _| rng.random_range(0.01..1.0)).unwrap();
        let mut bins = EventBins::zeros(w, h, u, 0, 1000);
        for b in &mut bins.bins {
            for c in b.iter_mut() {
                *c = rng.random_range(-4..=4);
            }
        }
        let theta = rng.random_range(0.05..0.6);
        let back = synthesize_blur(&edi_decouple(&blur, &bins, theta).unwrap().all_frames()).unwrap();
        for (a, b) in back.data().iter().zip(blur.data()) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: worst <= EDI_REL_TOL && secs < EDI_MAX_SECONDS,
        detail: format!("{EDI_TRIPLES} triples, max relative error {worst:.2e} <= {EDI_REL_TOL:.0e}, {secs:.2} s < {EDI_MAX_SECONDS} s"),
    }
}

/// A soft edge sweeping across a 64x64 sensor; each pixel brightens monotonically.
fn moving_edge(shift: f64) -> Image {
    Image::from_fn(64, 64, 1, |x, y, _| {
        let s = 1.0 / (1.0 + (-(x as f64 - 24.0 - shift) / 6.0).exp());
        (0.95 - 0.8 * s) * (0.75 + 0.25 * (0.3 * y as f64).cos())
    })
    .unwrap()
}

fn event_round_trip() -> Verdict {
    let start = Instant::now();
    let u = 10;
    let frames: Vec<Image> = (0..=u).map(|k| moving_edge(0.8 * k as f64)).collect();
    let stamps: Vec<u64> = (0..=u as u64).map(|k| k * 1000).collect();
    let stream = simulate_events(&frames, &stamps, THETA, DEFAULT_LOG_EPS).unwrap();
    let blur = synthesize_blur(&frames).unwrap();
    let dec = edi_decouple(&blur, &bin_events(&stream, u).unwrap(), THETA).unwrap();
    let mut rel = Vec::new();
    let mut worst_log = 0.0f64;
    for (k, latent) in dec.latents.iter().enumerate() {
        for (a, b) in latent.data().iter().zip(frames[k + 1].data()) {
            rel.push((a - b).abs() / b);
            worst_log = worst_log.max((a.ln() - b.ln()).abs());
        }
    }
    rel.sort_by(f64::total_cmp);
    let median = rel[rel.len() / 2];
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: median <= ROUND_TRIP_MEDIAN && worst_log <= THETA && secs < ROUND_TRIP_MAX_SECONDS,
        detail: format!(
            "{} events, median relative error {median:.4} <= {ROUND_TRIP_MEDIAN}, worst log error {worst_log:.4} <= {THETA}, {secs:.2} s",
            stream.events.len()
        ),
    }
}

fn pose_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.rotation - b.rotation).amax().max((a.translation - b.translation).amax())
}

fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
    let rho = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64)).normalize();
    Twist::new(rho, axis * rng.random_range(0.0..max_angle))
}

fn se3_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut round_trip = 0.0f64;
    for _ in 0..EXP_LOG_CASES {
        let xi = random_twist(&mut rng, PI - 0.1);
        round_trip = round_trip.max((se3_log(&se3_exp(&xi)).unwrap().to_vector() - xi.to_vector()).amax());
    }
    let mut endpoint = 0.0f64;
    let mut slerp = 0.0f64;
    for _ in 0..200 {
        let base = se3_exp(&random_twist(&mut rng, 3.0));
        let d1 = se3_exp(&random_twist(&mut rng, 1.0));
        let du = se3_exp(&random_twist(&mut rng, 1.0));
        let u = rng.random_range(1..12);
        let poses = interpolate_latent_poses(&base, &d1, &du, u).unwrap();
        endpoint = endpoint.max(pose_diff(&poses[u - 1], &(base * du)));
        endpoint = endpoint.max(pose_diff(&latent_pose_at(&base, &d1, &du, 0.0).unwrap(), &(base * d1)));

        let phi1 = random_twist(&mut rng, 1.0).phi;
        let phiu = random_twist(&mut rng, 1.0).phi;
        let (r1, ru) = (RigidTransform::new(so3_exp(&phi1), Vector3::zeros()), RigidTransform::new(so3_exp(&phiu), Vector3::zeros()));
        let mid = latent_pose_at(&RigidTransform::identity(), &r1, &ru, 0.5).unwrap();
        let expected = r1.quaternion().slerp(&ru.quaternion(), 0.5);
        slerp = slerp.max((mid.rotation - expected.to_rotation_matrix()).amax().max(mid.translation.amax()));
    }
    Verdict {
        pass: round_trip <= EXP_LOG_TOL && endpoint <= ENDPOINT_TOL && slerp <= SLERP_TOL,
        detail: format!(
            "Exp/Log over {EXP_LOG_CASES} twists {round_trip:.1e} <= {EXP_LOG_TOL:.0e}, endpoints {endpoint:.1e} <= {ENDPOINT_TOL:.0e}, midpoint vs slerp {slerp:.1e} <= {SLERP_TOL:.0e}"
        ),
    }
}

fn cbs() -> Verdict {
    let per_bin = 200;
    let confidence: Vec<f64> = (0..CBS_INTERVALS * per_bin)
        .map(|i| 1.0 + (i / per_bin) as f64 + (i % per_bin) as f64 / per_bin as f64 * 0.999)
        .collect();
    let positions = (0..confidence.len()).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    let cloud = ConfidencePointCloud::new(positions, None, confidence).unwrap();
    let picked = confidence_balanced_sample(&cloud, &SamplingPlan::new(CBS_TARGET, CBS_INTERVALS, 0).unwrap()).unwrap();
    let intervals = confidence_intervals(&cloud, CBS_INTERVALS);
    let counts: Vec<usize> = intervals.iter().map(|iv| iv.iter().filter(|i| picked.contains(i)).count()).collect();
    let quota = CBS_TARGET / CBS_INTERVALS;
    let exact = picked.len() == CBS_TARGET && counts.iter().all(|&c| c == quota);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut heavy = 0usize;
    for _ in 0..DRAW_TRIALS {
        let pick = weighted_without_replacement(&[0, 1], |i| [2.0, 1.0][i], 1, &mut rng);
        heavy += usize::from(pick[0] == 0);
    }
    let p = 2.0 / 3.0;
    let sigma = (DRAW_TRIALS as f64 * p * (1.0 - p)).sqrt();
    let z = (heavy as f64 - DRAW_TRIALS as f64 * p) / sigma;
    Verdict {
        pass: exact && z.abs() <= 3.0,
        detail: format!(
            "{} intervals with {quota} each: {exact}; 2:1 draw picked heavier {heavy}/{DRAW_TRIALS}, z = {z:.2} within 3 sigma",
            counts.len()
        ),
    }
}

fn renderer() -> Verdict {
    let scene = common::random_scene(24, 7);
    let pose = se3_exp(&Twist::from_vector(&Vector6::new(0.05, -0.03, 0.1, 0.02, -0.04, 0.01)));
    let intr = CameraIntrinsics::new(40.0, 32, 32).unwrap();
    let adjoint = common::random_adjoint(32, 32, 8);
    let probes = common::probe_render_gradients(&scene, &pose, &intr, &adjoint, GRADIENT_PROBES + 200, 1e-6, GRADIENT_REL_TOL, 11);
    let enough = probes.probed >= GRADIENT_PROBES;

    let out = rasterize(&scene, &pose, &intr).unwrap();
    let alpha = out.weight_sum.iter().zip(&out.transmittance).map(|(w, t)| (w + t - 1.0).abs()).fold(0.0, f64::max);
    let mut identical = true;
    for seed in 0..5 {
        let s = common::random_scene(60, seed);
        let wide = CameraIntrinsics::new(45.0, 53, 37).unwrap();
        let a = rasterize(&s, &pose, &wide).unwrap();
        let b = rasterize_naive(&s, &pose, &wide).unwrap();
        identical &= a.color.data() == b.color.data() && a.transmittance == b.transmittance;
    }
    Verdict {
        pass: enough && probes.pass_rate() >= GRADIENT_PASS_RATE && alpha <= ALPHA_TOL && identical,
        detail: format!(
            "{}/{} probed parameters within {GRADIENT_REL_TOL:.0e} ({:.2}% >= 99%), alpha conservation {alpha:.1e}, tiled == naive: {identical}",
            probes.passed,
            probes.probed,
            100.0 * probes.pass_rate()
        ),
    }
}

fn pinhole_view(focal: f64, phase: f64) -> PointMap {
    let intr = CameraIntrinsics::new(focal, 32, 24).unwrap();
    let depth: Vec<f64> = (0..32 * 24).map(|k| 2.0 + 0.5 * ((k % 32) as f64 * 0.1 + phase).sin() + 0.2 * ((k / 32) as f64 * 0.2).cos()).collect();
    PointMap::from_depth(&depth, &intr, &RigidTransform::identity(), vec![1.0; 32 * 24]).unwrap()
}

fn alignment() -> Verdict {
    let focal = 100.0;
    let estimates = [estimate_focal_weiszfeld(&pinhole_view(focal, 0.0)).unwrap(), estimate_focal_weiszfeld(&pinhole_view(focal, 1.3)).unwrap()];
    let f = average_focal(&estimates).unwrap();
    let focal_err = (f - focal).abs() / focal;

    let scales = [2.0, 0.5, 1.6, 1.0 / 1.6, 0.8, 1.25];
    let s = common::synthetic_graph(4, 12, 10, 20.0, &scales, 0.0, 1);
    let sol = global_align(&s.graph, &AlignConfig::default()).unwrap();
    let scale_err = sol.scales.iter().zip(&scales).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let product = (sol.scales.iter().product::<f64>() - 1.0).abs();
    let monotone = sol.history.windows(2).all(|w| w[1] <= w[0]);
    Verdict {
        pass: focal_err <= FOCAL_REL_TOL && scale_err <= SCALE_TOL && product <= SCALE_PRODUCT_TOL && monotone,
        detail: format!(
            "two-view focal {f:.4} (error {:.4}% <= 0.1%), 4-view scale error {scale_err:.1e} <= {SCALE_TOL:.0e}, |prod sigma - 1| {product:.1e}, objective non-increasing over {} steps: {monotone}",
            100.0 * focal_err,
            sol.history.len()
        ),
    }
}

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let spec = SyntheticDatasetSpec::default();
    let data = generate(&spec).unwrap().to_loaded().unwrap();
    let init = InitConfig::default();
    let with_events = run_experiment("events", &data, &init, &TrainConfig::default()).unwrap();
    let without = run_experiment("no-events", &data, &init, &TrainConfig { lambda_e: 0.0, ..Default::default() }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let gain = with_events.report.psnr - without.report.psnr;
    let ate_before = with_events.initial_ate.unwrap();
    let ate_after = with_events.report.ate_rmse.unwrap();
    let ratio = ate_after / ate_before;
    Verdict {
        pass: gain >= PSNR_GAIN_DB && ratio <= ATE_RATIO && secs <= TREND_MAX_SECONDS,
        detail: format!(
            "PSNR {:.2} dB with events vs {:.2} dB without (gain {gain:.2} >= {PSNR_GAIN_DB}), ATE {ate_after:.5} vs initial {ate_before:.5} (ratio {ratio:.3} <= {ATE_RATIO}), {secs:.0} s <= {TREND_MAX_SECONDS} s",
            with_events.report.psnr, without.report.psnr
        ),
    }
}

fn metrics() -> Verdict {
    let a = Image::from_fn(32, 32, 3, |x, y, c| 0.1 + 0.7 * (((x + 2 * y + c) % 9) as f64 / 8.0)).unwrap();
    let b = a.map(|v| v + 0.1);
    let p = psnr(&a, &b, 1.0).unwrap();
    let s = ssim(&a, &a, 1.0).unwrap();
    let reference: Vec<TimedPose> = (0..10)
        .map(|i| {
            let t = i as f64;
            TimedPose { timestamp: t, pose: se3_exp(&Twist::new(Vector3::new(t.sin(), 0.3 * t, t.cos()), Vector3::new(0.1, 0.05 * t, 0.0))) }
        })
        .collect();
    let g = se3_exp(&Twist::new(Vector3::new(1.0, -2.0, 0.5), Vector3::new(0.3, 0.2, -0.1)));
    let moved: Vec<TimedPose> = reference.iter().map(|r| TimedPose { timestamp: r.timestamp, pose: g * r.pose }).collect();
    let e = ate(&moved, &reference, AteAlignment::Similarity).unwrap();
    Verdict {
        pass: (p - 20.0).abs() <= PSNR_TOL && (s - 1.0).abs() <= 1e-12 && e <= 1e-9,
        detail: format!("PSNR(offset 0.1) {p:.9} dB, SSIM(x, x) {s:.12}, ATE of rigid copy {e:.1e}"),
    }
}

fn main() {
    let mut all = true;
    all &= report(1, "EDI identity", &edi_identity());
    all &= report(2, "event round trip", &event_round_trip());
    all &= report(3, "SE(3) suite", &se3_suite());
    all &= report(4, "confidence-balanced sampling", &cbs());
    all &= report(5, "renderer gradients", &renderer());
    all &= report(6, "alignment", &alignment());
    all &= report(8, "metrics", &metrics());
    all &= report(7, "end-to-end trend", &end_to_end());
    if !all {
        std::process::exit(1);
    }
}
