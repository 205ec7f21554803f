use proptest::prelude::*;
use radaug_core::domain::{log_quat_to_quat, pose_compose_relative, rotation_error_degrees, Pose};

fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-50.0..50.0f64), prop::array::uniform3(-1.5..1.5f64)).prop_map(|(t, w)| Pose { t, w })
}

fn rot() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.5..1.5f64)
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
fn matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Angle of `Ra^T Rb` from its trace.
fn trace_angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (ra, rb) = (matrix(log_quat_to_quat(a)), matrix(log_quat_to_quat(b)));
    let mut tr = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            tr += ra[k][i] * rb[k][i];
        }
    }
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

proptest! {
    #[test]
    fn relative_pose_is_elementwise_difference(a in pose(), b in pose()) {
        let r = pose_compose_relative(&a, &b);
        for k in 0..3 {
            prop_assert_eq!(r.dt[k], a.t[k] - b.t[k]);
            prop_assert_eq!(r.dw[k], a.w[k] - b.w[k]);
        }
    }

    #[test]
    fn relative_pose_is_antisymmetric(a in pose(), b in pose()) {
        let (ab, ba) = (pose_compose_relative(&a, &b), pose_compose_relative(&b, &a));
        for k in 0..3 {
            prop_assert_eq!(ab.dt[k], -ba.dt[k]);
            prop_assert_eq!(ab.dw[k], -ba.dw[k]);
        }
    }

    #[test]
    fn rotation_error_matches_trace_formula(a in rot(), b in rot()) {
        let e = rotation_error_degrees(a, b).unwrap();
        let oracle = trace_angle(a, b);
        // acos loses precision near 0 and 180 degrees
        let tol = if oracle < 1.0 || oracle > 179.0 { 1e-3 } else { 1e-6 };
        prop_assert!((e - oracle).abs() < tol, "{e} vs {oracle}");
    }

    #[test]
    fn rotation_error_is_a_metric(a in rot(), b in rot(), c in rot()) {
        let ab = rotation_error_degrees(a, b).unwrap();
        let ba = rotation_error_degrees(b, a).unwrap();
        let bc = rotation_error_degrees(b, c).unwrap();
        let ac = rotation_error_degrees(a, c).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ac <= ab + bc + 1e-6);
        prop_assert!((0.0..=180.0 + 1e-9).contains(&ab));
    }
}
