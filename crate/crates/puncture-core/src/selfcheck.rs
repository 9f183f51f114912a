//! Self-verification suites: finite-difference Jacobian checks, QP
//! optimality certificates, and quintic boundary identities.
//!
//! These run from the CLI `check` subcommand and from tests. Finite
//! differences are the oracle side of a dual-route check; the control
//! path always uses the analytic Jacobians.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::control::{estimated_needle_pose, parameter_jacobian, AdaptiveParameters};
use crate::geom::{line_angle, signed_dist_point_plane, sq_dist_point_line, Plane, PluckerLine, Quat};
use crate::kinematics::{
    angle_jacobian_line_line, dist_jacobian_point_line, dist_jacobian_point_plane,
    SerialManipulator,
};
use crate::qp::{check_kkt, solve_qp, QpStatus};
use crate::trajectory::QuinticSegment;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn pass(name: &str, detail: String) -> Self {
        CheckReport { name: String::from(name), passed: true, detail }
    }

    fn fail(name: &str, detail: String) -> Self {
        CheckReport { name: String::from(name), passed: false, detail }
    }

    fn from_max_err(name: &str, max_err: f64, tol: f64) -> Self {
        if max_err <= tol {
            Self::pass(name, format!("max error {max_err:.3e} <= {tol:.1e}"))
        } else {
            Self::fail(name, format!("max error {max_err:.3e} > {tol:.1e}"))
        }
    }
}

/// Test-fixture fault injection so the check harness can prove it fails
/// loudly on a broken Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultInjection {
    #[default]
    None,
    /// Flip the sign of the point-line distance Jacobian row.
    FlipPointLineRow,
}

/// Central-difference pose Jacobian of the bare kinematic chain.
pub fn fd_pose_jacobian(robot: &SerialManipulator, q: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = robot.n_joints();
    let mut jac = DMatrix::zeros(8, n);
    for j in 0..n {
        let mut qp = q.clone();
        qp[j] += h;
        let mut qm = q.clone();
        qm[j] -= h;
        let xp = robot.fkm(&qp).expect("fd eval").as_vec8();
        let xm = robot.fkm(&qm).expect("fd eval").as_vec8();
        for r in 0..8 {
            jac[(r, j)] = (xp[r] - xm[r]) / (2.0 * h);
        }
    }
    jac
}

fn rand_q(robot: &SerialManipulator, rng: &mut impl rand::Rng) -> DVector<f64> {
    DVector::from_fn(robot.n_joints(), |i, _| {
        rng.gen_range(robot.q_min()[i]..robot.q_max()[i])
    })
}

/// Finite-difference verification of every analytic Jacobian over
/// `n_configs` random in-limit configurations.
pub fn jacobian_check_suite(
    robot: &SerialManipulator,
    seed: u64,
    n_configs: usize,
    tol: f64,
    fault: FaultInjection,
) -> Vec<CheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let axis = Quat::pure(0.0, 0.0, 1.0);
    let line =
        PluckerLine::from_point_direction(&Quat::pure(0.3, 0.1, -0.2), &Quat::pure(0.0, 0.0, 1.0))
            .expect("valid line");
    let plane = Plane::new(Quat::pure(0.0, 0.0, 1.0), 0.15).expect("valid plane");
    let cone_dir = Quat::pure(0.1, 0.4, 0.9).normalized().expect("nonzero");

    let mut e_pose: f64 = 0.0;
    let mut e_trans: f64 = 0.0;
    let mut e_rot: f64 = 0.0;
    let mut e_dir: f64 = 0.0;
    let mut e_line: f64 = 0.0;
    let mut e_plane: f64 = 0.0;
    let mut e_angle: f64 = 0.0;
    let mut e_param: f64 = 0.0;

    let params = AdaptiveParameters::default();

    for _ in 0..n_configs {
        let q = rand_q(robot, &mut rng);
        let jac = match robot.pose_jacobian(&q) {
            Ok(j) => j,
            Err(e) => {
                return alloc::vec![CheckReport::fail(
                    "jacobian_suite",
                    format!("pose_jacobian failed: {e}"),
                )]
            }
        };
        let fd = fd_pose_jacobian(robot, &q, h);
        e_pose = e_pose.max((&jac.pose_jacobian - &fd).abs().max());

        let p = Quat::from_vector(jac.pose.translation_vector());
        let l_n = jac.pose.transform_direction(&axis);
        let mut row_line = dist_jacobian_point_line(&jac.translation, &p, &line);
        if fault == FaultInjection::FlipPointLineRow {
            row_line = -row_line;
        }
        let row_plane = dist_jacobian_point_plane(&jac.translation, &plane);
        let row_angle = angle_jacobian_line_line(&jac.line_direction, &l_n, &cone_dir);

        for j in 0..robot.n_joints() {
            let mut qp = q.clone();
            qp[j] += h;
            let mut qm = q.clone();
            qm[j] -= h;
            let xp = robot.fkm(&qp).expect("fd eval");
            let xm = robot.fkm(&qm).expect("fd eval");

            let dt = (xp.translation_vector() - xm.translation_vector()) / (2.0 * h);
            let dl =
                (xp.transform_direction(&axis).vector() - xm.transform_direction(&axis).vector())
                    / (2.0 * h);
            let rp = xp.rotation().as_vec4();
            let rm = xm.rotation().as_vec4();
            for r in 0..3 {
                e_trans = e_trans.max((jac.translation[(r, j)] - dt[r]).abs());
                e_dir = e_dir.max((jac.line_direction[(r, j)] - dl[r]).abs());
            }
            for r in 0..4 {
                e_rot = e_rot.max((jac.rotation[(r, j)] - (rp[r] - rm[r]) / (2.0 * h)).abs());
            }

            let pp = Quat::from_vector(xp.translation_vector());
            let pm = Quat::from_vector(xm.translation_vector());
            e_line = e_line.max(
                (row_line[j]
                    - (sq_dist_point_line(&pp, &line) - sq_dist_point_line(&pm, &line))
                        / (2.0 * h))
                    .abs(),
            );
            e_plane = e_plane.max(
                (row_plane[j]
                    - (signed_dist_point_plane(&pp, &plane) - signed_dist_point_plane(&pm, &plane))
                        / (2.0 * h))
                    .abs(),
            );
            let fp = line_angle(&xp.transform_direction(&axis), &cone_dir).1;
            let fm = line_angle(&xm.transform_direction(&axis), &cone_dir).1;
            e_angle = e_angle.max((row_angle[j] - (fp - fm) / (2.0 * h)).abs());
        }

        // Parameter Jacobian: first-order prediction of the pose change
        // under a parameter step (the Jacobian itself is the
        // finite-difference reference implementation).
        let j_param = match parameter_jacobian(robot, &q, &params) {
            Ok(j) => j,
            Err(e) => {
                return alloc::vec![CheckReport::fail(
                    "jacobian_suite",
                    format!("parameter_jacobian failed: {e}"),
                )]
            }
        };
        let delta = 1e-5;
        let mut da = DVector::zeros(12);
        for (k, item) in da.iter_mut().enumerate() {
            *item = delta * (1.0 + 0.1 * k as f64) * if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        let mut shifted = params.to_vector();
        shifted += &da;
        let shifted = AdaptiveParameters::from_vector(&shifted);
        let y0 = estimated_needle_pose(robot, &q, &params).expect("pose").as_vec8();
        let y1 = estimated_needle_pose(robot, &q, &shifted).expect("pose").as_vec8();
        let pred = &j_param * &da;
        for r in 0..8 {
            e_param = e_param.max(((y1[r] - y0[r]) - pred[r]).abs() / delta.max(1e-30));
        }
    }

    alloc::vec![
        CheckReport::from_max_err("pose_jacobian_fd", e_pose, tol),
        CheckReport::from_max_err("translation_jacobian_fd", e_trans, tol),
        CheckReport::from_max_err("rotation_jacobian_fd", e_rot, tol),
        CheckReport::from_max_err("line_direction_jacobian_fd", e_dir, tol),
        CheckReport::from_max_err("point_line_distance_row_fd", e_line, tol),
        CheckReport::from_max_err("point_plane_distance_row_fd", e_plane, tol),
        CheckReport::from_max_err("line_angle_row_fd", e_angle, tol),
        CheckReport::from_max_err("parameter_jacobian_taylor", e_param, tol * 10.0),
    ]
}

/// Random strictly convex QP instances: KKT certificates plus agreement
/// with the exhaustive active-set enumeration oracle.
pub fn qp_check_suite(seed: u64, n_instances: usize, tol: f64) -> Vec<CheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_kkt: f64 = 0.0;
    let mut max_obj_gap: f64 = 0.0;
    let mut disagreements = 0usize;
    for _ in 0..n_instances {
        let (problem, feasible) = crate::qp::test_support::random_instance(&mut rng, 5, 8);
        let sol = match solve_qp(&problem) {
            Ok(s) => s,
            Err(e) => {
                return alloc::vec![CheckReport::fail("qp_suite", format!("solver error: {e}"))]
            }
        };
        match sol.status {
            QpStatus::Optimal => {
                let kkt = check_kkt(&problem, &sol);
                max_kkt = max_kkt.max(kkt);
                if let Some(reference) = crate::qp::test_support::enumerate_optimum(&problem) {
                    let obj = |u: &DVector<f64>| {
                        0.5 * (u.transpose() * &problem.hessian * u)[(0, 0)]
                            + problem.gradient.dot(u)
                    };
                    max_obj_gap = max_obj_gap.max((obj(&sol.primal) - obj(&reference)).abs());
                } else {
                    disagreements += 1;
                }
            }
            QpStatus::Infeasible => {
                if feasible {
                    disagreements += 1;
                }
            }
        }
    }
    alloc::vec![
        CheckReport::from_max_err("qp_kkt_certificate", max_kkt, 1e-7),
        CheckReport::from_max_err("qp_reference_objective_gap", max_obj_gap, tol),
        if disagreements == 0 {
            CheckReport::pass("qp_status_agreement", String::from("all statuses agree"))
        } else {
            CheckReport::fail("qp_status_agreement", format!("{disagreements} disagreements"))
        },
    ]
}

/// Boundary identities and derivative consistency of the quintic profile.
pub fn quintic_check_suite(tol: f64) -> Vec<CheckReport> {
    let seg = QuinticSegment::new(
        Quat::pure(0.1, -0.2, 0.3),
        Quat::pure(-0.4, 0.5, 0.05),
        2.5,
    )
    .expect("valid segment");
    let (p0, v0) = seg.eval(0.0).expect("t=0");
    let (p1, v1) = seg.eval(seg.duration()).expect("t=T");
    let mut worst: f64 = 0.0;
    worst = worst.max((p0 - seg.start()).norm());
    worst = worst.max(v0.norm());
    worst = worst.max((p1 - seg.end()).norm());
    worst = worst.max(v1.norm());
    // Endpoint accelerations via one-sided second differences.
    let h = 1e-5;
    let (pa, _) = seg.eval(h).expect("t");
    let (pb, _) = seg.eval(2.0 * h).expect("t");
    let acc0 = (pb.vector() - pa.vector() * 2.0 + p0.vector()) / (h * h);
    worst = worst.max(acc0.norm() * h); // scaled: O(h) residual of a zero limit
    let boundary = CheckReport::from_max_err("quintic_boundary_identities", worst, 1e-9);

    // Velocity against central differences of the position.
    let mut e_vel: f64 = 0.0;
    let mut t = 0.05;
    while t < seg.duration() {
        let (_, v) = seg.eval(t).expect("t");
        let (pp, _) = seg.eval(t + h).expect("t");
        let (pm, _) = seg.eval(t - h).expect("t");
        let fd = (pp.vector() - pm.vector()) / (2.0 * h);
        e_vel = e_vel.max((v.vector() - fd).norm());
        t += 0.083;
    }
    let vel = CheckReport::from_max_err("quintic_velocity_fd", e_vel, tol.max(1e-6));

    alloc::vec![boundary, vel]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::test_models;

    #[test]
    fn suites_pass_on_pristine_build() {
        let robot = test_models::panda();
        let reports = jacobian_check_suite(&robot, 99, 5, 1e-5, FaultInjection::None);
        for r in &reports {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        for r in qp_check_suite(7, 50, 1e-6) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        for r in quintic_check_suite(1e-6) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn injected_sign_error_fails_named_row() {
        let robot = test_models::panda();
        let reports = jacobian_check_suite(&robot, 99, 3, 1e-5, FaultInjection::FlipPointLineRow);
        let broken = reports.iter().find(|r| r.name == "point_line_distance_row_fd").unwrap();
        assert!(!broken.passed);
        // Unrelated rows still pass.
        let fine = reports.iter().find(|r| r.name == "point_plane_distance_row_fd").unwrap();
        assert!(fine.passed);
    }
}
