use deblursplat::geometry::{
    interpolate_latent_poses, latent_pose_at, se3_exp, se3_log, Quaternion, RigidTransform, Twist,
};
use nalgebra::Vector3;
use proptest::prelude::*;
use std::f64::consts::PI;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

/// Twists with rotation angle below `max_angle`.
fn twist(max_angle: f64) -> impl Strategy<Value = Twist> {
    (vec3(5.0), vec3(1.0), 0.0..max_angle).prop_map(|(rho, axis, angle)| {
        let phi = if axis.norm() < 1e-9 { Vector3::zeros() } else { axis.normalize() * angle };
        Twist::new(rho, phi)
    })
}

fn pose() -> impl Strategy<Value = RigidTransform> {
    twist(PI - 0.1).prop_map(|t| se3_exp(&t))
}

fn pose_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.rotation - b.rotation).abs().max().max((a.translation - b.translation).abs().max())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn exp_log_round_trip(xi in twist(PI - 0.1)) {
        let back = se3_log(&se3_exp(&xi)).unwrap();
        prop_assert!((back.to_vector() - xi.to_vector()).abs().max() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn exp_yields_valid_transforms(xi in twist(3.0)) {
        let t = se3_exp(&xi);
        prop_assert!(t.orthonormality_error() < 1e-9);
        prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn composition_is_associative_and_inverse_cancels(a in pose(), b in pose(), c in pose()) {
        prop_assert!(pose_diff(&((a * b) * c), &(a * (b * c))) < 1e-9);
        prop_assert!(pose_diff(&(a * a.inverse()), &RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn interpolation_endpoints(base in pose(), d1 in twist(1.0), du in twist(1.0), u in 1usize..12) {
        let (d1, du) = (se3_exp(&d1), se3_exp(&du));
        let poses = interpolate_latent_poses(&base, &d1, &du, u).unwrap();
        prop_assert_eq!(poses.len(), u);
        prop_assert!(pose_diff(&poses[u - 1], &(base * du)) < 1e-9);
        let start = latent_pose_at(&base, &d1, &du, 0.0).unwrap();
        prop_assert!(pose_diff(&start, &(base * d1)) < 1e-9);
        let near = latent_pose_at(&base, &d1, &du, 1e-9).unwrap();
        prop_assert!(pose_diff(&near, &(base * d1)) < 1e-7);
    }

    #[test]
    fn pure_rotation_interpolation_follows_slerp(
        axis in vec3(1.0).prop_filter("nonzero axis", |a| a.norm() > 1e-3),
        angle in 0.0..(PI - 0.1),
        u in 2usize..12,
    ) {
        let target = Quaternion::from_axis_angle(&axis.normalize(), angle);
        let du = RigidTransform::from_quaternion(&target, Vector3::zeros());
        let id = RigidTransform::identity();
        let poses = interpolate_latent_poses(&id, &id, &du, u).unwrap();
        for (i, p) in poses.iter().enumerate() {
            let s = (i + 1) as f64 / u as f64;
            let reference = Quaternion::IDENTITY.slerp(&target, s).to_rotation_matrix();
            prop_assert!((p.rotation - reference).abs().max() < 1e-6);
            prop_assert!((p.rotation_angle() - s * angle).abs() < 1e-6);
        }
    }

    #[test]
    fn quaternions_stay_unit(w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
        let q = Quaternion::new(w, x, y, z);
        prop_assert!((q.norm() - 1.0).abs() < 1e-9);
        let r = Quaternion::from_rotation_matrix(&q.to_rotation_matrix());
        prop_assert!((r.norm() - 1.0).abs() < 1e-9);
        prop_assert!((r.to_rotation_matrix() - q.to_rotation_matrix()).abs().max() < 1e-9);
    }
}

#[test]
fn quarter_turn_latent_midpoint_is_eighth_turn() {
    let base = se3_exp(&Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.1, 0.0, 0.0)));
    let du = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0)));
    let poses = interpolate_latent_poses(&base, &RigidTransform::identity(), &du, 2).unwrap();
    let eighth = RigidTransform::from_quaternion(&Quaternion::from_axis_angle(&Vector3::z(), PI / 4.0), Vector3::zeros());
    assert!(pose_diff(&poses[0], &(base * eighth)) < 1e-9);
}
