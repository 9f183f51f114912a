//! Constrained task-space control with online adaptation of the
//! uncertain kinematic parameters.
//!
//! Two coupled laws run per tick:
//!
//! - the **motion law** solves a damped least-squares QP in the joint
//!   velocities with the VFI rows of the current step as inequality
//!   constraints;
//! - the **adaptation law** solves the analogous QP in the rates of the
//!   twelve uncertain parameters (robot base pose in the transmitter
//!   frame, needle tip pose in the end-effector frame), driving the
//!   estimated needle pose toward the measured one while mirroring the
//!   active VFI rows and a task-descent (Lyapunov) row.
//!
//! Each uncertain pose is charted as a rotation vector plus a body-frame
//! translation, so the pose is `r ⊗ (1 + ε t/2)` with `r = exp(rotvec)`
//! and the parameter space stays unconstrained.

use core::fmt;

use nalgebra::{DMatrix, DVector, Vector3};
#[allow(unused_imports)]
use num_traits::Float;

use crate::geom::{angle_between, haminus4, to_dmatrix, DualQuat, Quat, UnitDualQuat};
use crate::kinematics::{
    rotation_block, transform_pose_jacobian, translation_block, KinError, SerialManipulator,
    TaskJacobians,
};
use crate::qp::{build_damped_ls_qp, solve_qp, QpError, QpStatus};
use crate::vfi::{ConstraintSet, NeedleState, PointState, SceneKinematics, VfiGains};

/// Needle line direction in the needle-tip frame: −z, pointing from the
/// tip back toward the mount, so that a needle aligned for insertion
/// along the downward insertion axis reads angle 0 against the upward
/// guide direction.
pub const NEEDLE_AXIS: Quat = Quat { w: 0.0, x: 0.0, y: 0.0, z: -1.0 };

/// Central-difference step for the parameter Jacobian.
pub const PARAM_JACOBIAN_STEP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub enum ControlError {
    Kinematics(KinError),
    Qp(QpError),
    /// Target representation inconsistent with the task kind.
    InvalidTarget,
}

impl fmt::Display for ControlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlError::Kinematics(e) => write!(f, "kinematics: {e}"),
            ControlError::Qp(e) => write!(f, "qp: {e}"),
            ControlError::InvalidTarget => write!(f, "invalid task target"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ControlError {}

impl From<KinError> for ControlError {
    fn from(e: KinError) -> Self {
        ControlError::Kinematics(e)
    }
}

impl From<QpError> for ControlError {
    fn from(e: QpError) -> Self {
        ControlError::Qp(e)
    }
}

/// One uncertain pose charted as rotation vector (rad) + translation (m)
/// expressed in the rotated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseParams {
    pub fn zero() -> Self {
        PoseParams { rotation: Vector3::zeros(), translation: Vector3::zeros() }
    }

    /// Pose of this chart: `r ⊗ (1 + ε t/2)` with `r = exp(rotation)`.
    pub fn pose(&self) -> UnitDualQuat {
        let r = Quat::exp_rotation(self.rotation);
        let t = Quat::from_vector(self.translation);
        let dual = (r * t).scale(0.5);
        UnitDualQuat::new(DualQuat::new(r, dual)).expect("chart produces unit poses")
    }

    /// Chart of a pose (rotation-vector representative with angle ≤ π).
    pub fn from_pose(pose: &UnitDualQuat) -> Self {
        let r = pose.rotation();
        let rotation = r.log_rotation();
        // Body-frame translation: t_body = r̄ t r.
        let t = pose.translation();
        let t_body = r.conj().rotate(&t);
        PoseParams { rotation, translation: t_body.vector() }
    }

    /// Maps rotation vectors with angle > π back to the equivalent
    /// representative inside the chart.
    pub fn rechart(&mut self) {
        let angle = self.rotation.norm();
        if angle > core::f64::consts::PI {
            let wrapped = angle - 2.0 * core::f64::consts::PI;
            self.rotation *= wrapped / angle;
        }
    }
}

/// The twelve adapted parameters: robot base pose in the transmitter
/// frame and needle-tip pose in the end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveParameters {
    pub base: PoseParams,
    pub needle: PoseParams,
}

impl Default for AdaptiveParameters {
    fn default() -> Self {
        AdaptiveParameters { base: PoseParams::zero(), needle: PoseParams::zero() }
    }
}

impl AdaptiveParameters {
    pub fn new(base: PoseParams, needle: PoseParams) -> Self {
        AdaptiveParameters { base, needle }
    }

    /// Vector layout: base translation, base rotation, needle
    /// translation, needle rotation.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(12);
        for i in 0..3 {
            v[i] = self.base.translation[i];
            v[3 + i] = self.base.rotation[i];
            v[6 + i] = self.needle.translation[i];
            v[9 + i] = self.needle.rotation[i];
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        debug_assert_eq!(v.len(), 12);
        AdaptiveParameters {
            base: PoseParams {
                translation: Vector3::new(v[0], v[1], v[2]),
                rotation: Vector3::new(v[3], v[4], v[5]),
            },
            needle: PoseParams {
                translation: Vector3::new(v[6], v[7], v[8]),
                rotation: Vector3::new(v[9], v[10], v[11]),
            },
        }
    }

    pub fn base_pose(&self) -> UnitDualQuat {
        self.base.pose()
    }

    pub fn needle_pose(&self) -> UnitDualQuat {
        self.needle.pose()
    }

    /// Explicit-Euler parameter update with re-charting of the rotation
    /// vectors.
    pub fn integrate(&self, rates: &DVector<f64>, dt: f64) -> Self {
        let mut v = self.to_vector();
        v += rates * dt;
        let mut out = Self::from_vector(&v);
        out.base.rechart();
        out.needle.rechart();
        out
    }
}

/// Gains, damping factors, and convergence thresholds of both laws.
#[derive(Debug, Clone, Copy)]
pub struct ControllerGains {
    /// Task gain of step 1 (needle alignment), 1/s.
    pub task_gain_align: f64,
    /// Task gain of step 2 (move to start position), 1/s.
    pub task_gain_approach: f64,
    /// Task gain of step 3 (insertion), 1/s.
    pub task_gain_insert: f64,
    /// Damping factor λ of the motion QP.
    pub damping: f64,
    /// Adaptation gain η_â, 1/s.
    pub adapt_gain: f64,
    /// Damping factor λ_a of the adaptation QP.
    pub adapt_damping: f64,
    /// Per-family VFI gains.
    pub vfi: VfiGains,
    /// Convergence threshold on the tip position error, m.
    pub pos_threshold: f64,
    /// Convergence threshold on the needle direction error, rad.
    pub ang_threshold: f64,
    /// Rate budget (1/s) of the VFI rows mirrored into the adaptation
    /// QP. The estimate keeps every constraint satisfied at any positive
    /// rate; a budget of its own lets it track measurements while the
    /// physical loop rides a keep-in boundary.
    pub mirror_rate: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            task_gain_align: 0.5,
            task_gain_approach: 0.5,
            task_gain_insert: 0.5,
            damping: 0.03,
            adapt_gain: 1.5,
            adapt_damping: 0.05,
            vfi: VfiGains::default(),
            pos_threshold: 1.5e-3,
            ang_threshold: 0.5_f64 * core::f64::consts::PI / 180.0,
            mirror_rate: 25.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = [
            self.task_gain_align,
            self.task_gain_approach,
            self.task_gain_insert,
            self.damping,
            self.adapt_gain,
            self.adapt_damping,
            self.pos_threshold,
            self.ang_threshold,
            self.vfi.patient,
            self.vfi.guide,
            self.vfi.cone,
            self.vfi.plane,
            self.vfi.joint,
            self.mirror_rate,
        ];
        if positive.iter().all(|g| *g > 0.0) {
            Ok(())
        } else {
            Err(ControlError::InvalidTarget)
        }
    }
}

/// Control objective of the current step.
#[derive(Debug, Clone)]
pub enum TaskTarget {
    /// Step 1: regulate the needle rotation only (m = 4).
    RotationOnly { desired: Quat },
    /// Step 2: regulate the full needle-tip pose (m = 8).
    FullPose { desired: UnitDualQuat },
    /// Step 3: regulate the tip position with feedforward (m = 3).
    TranslationOnly { desired: Quat, feedforward: Quat },
}

/// Estimated kinematics of one configuration: transmitter-frame poses
/// and q-Jacobians of the needle-tip chain and the end-effector chain.
#[derive(Debug, Clone)]
pub struct EstimatedChain {
    pub needle: TaskJacobians,
    pub ee: TaskJacobians,
}

impl EstimatedChain {
    pub fn needle_pose(&self) -> UnitDualQuat {
        self.needle.pose
    }

    pub fn needle_tip(&self) -> Quat {
        self.needle.pose.translation()
    }

    pub fn needle_direction(&self) -> Quat {
        self.needle.pose.transform_direction(&NEEDLE_AXIS)
    }
}

/// Estimated needle-tip pose `base(â) ⊗ fkm(q) ⊗ attach(â)`.
pub fn estimated_needle_pose(
    robot: &SerialManipulator,
    q: &DVector<f64>,
    params: &AdaptiveParameters,
) -> Result<UnitDualQuat, KinError> {
    Ok(params.base_pose() * robot.fkm(q)? * params.needle_pose())
}

/// Estimated chain poses and q-Jacobians in the transmitter frame.
pub fn estimated_chain(
    robot: &SerialManipulator,
    q: &DVector<f64>,
    params: &AdaptiveParameters,
) -> Result<EstimatedChain, KinError> {
    let fkm_jac = robot.pose_jacobian(q)?;
    let base = params.base_pose();
    let attach = params.needle_pose();
    let needle_pose = base * fkm_jac.pose * attach;
    let ee_pose = base * fkm_jac.pose;
    let j_needle = transform_pose_jacobian(&base, &attach, &fkm_jac.pose_jacobian);
    let j_ee = transform_pose_jacobian(&base, &UnitDualQuat::identity(), &fkm_jac.pose_jacobian);
    Ok(EstimatedChain {
        needle: TaskJacobians::from_pose_jacobian(needle_pose, j_needle, &NEEDLE_AXIS),
        ee: TaskJacobians::from_pose_jacobian(ee_pose, j_ee, &NEEDLE_AXIS),
    })
}

fn chain_param_jacobian(
    fkm_pose: &UnitDualQuat,
    params: &AdaptiveParameters,
    with_needle: bool,
) -> DMatrix<f64> {
    let h = PARAM_JACOBIAN_STEP;
    let mut jac = DMatrix::zeros(8, 12);
    let base_vec = params.to_vector();
    let eval = |v: &DVector<f64>| -> nalgebra::SVector<f64, 8> {
        let p = AdaptiveParameters::from_vector(v);
        let pose = if with_needle {
            p.base_pose() * *fkm_pose * p.needle_pose()
        } else {
            p.base_pose() * *fkm_pose
        };
        pose.as_vec8()
    };
    let cols = if with_needle { 12 } else { 6 };
    for k in 0..cols {
        let mut vp = base_vec.clone();
        vp[k] += h;
        let mut vm = base_vec.clone();
        vm[k] -= h;
        let yp = eval(&vp);
        let ym = eval(&vm);
        for r in 0..8 {
            jac[(r, k)] = (yp[r] - ym[r]) / (2.0 * h);
        }
    }
    jac
}

/// Parameter Jacobian `J_ŷ,â` (8×12) of the estimated needle pose at
/// fixed `q`, by central differences over the twelve parameters.
pub fn parameter_jacobian(
    robot: &SerialManipulator,
    q: &DVector<f64>,
    params: &AdaptiveParameters,
) -> Result<DMatrix<f64>, KinError> {
    let fkm_pose = robot.fkm(q)?;
    Ok(chain_param_jacobian(&fkm_pose, params, true))
}

/// Parameter Jacobian of the end-effector chain (needle columns zero).
pub fn ee_parameter_jacobian(
    robot: &SerialManipulator,
    q: &DVector<f64>,
    params: &AdaptiveParameters,
) -> Result<DMatrix<f64>, KinError> {
    let fkm_pose = robot.fkm(q)?;
    Ok(chain_param_jacobian(&fkm_pose, params, false))
}

/// Task error, its q-Jacobian, its parameter Jacobian, and the
/// feedforward, all in the representation of the target kind.
#[derive(Debug, Clone)]
pub struct TaskLinearization {
    pub error: DVector<f64>,
    pub jacobian_q: DMatrix<f64>,
    pub jacobian_params: DMatrix<f64>,
    pub feedforward: DVector<f64>,
    /// Dead-zone radius of the task-descent row in the error
    /// representation; errors inside the ball count as zero for the
    /// adaptation's descent constraint.
    pub descent_deadzone: f64,
}

/// Linearizes the active task around the estimated chain. Rotation
/// errors handle the quaternion double cover: the sign fix applied to
/// the error is applied to the Jacobians consistently.
pub fn linearize_task(
    chain: &EstimatedChain,
    j_param: &DMatrix<f64>,
    target: &TaskTarget,
    gains: &ControllerGains,
) -> TaskLinearization {
    // Dead-zone radii map the convergence thresholds into the error
    // representation: a rotation by the angular threshold produces a
    // quaternion-difference norm of 2 sin(θ/4); positions enter the
    // dual part of a pose at half weight.
    let rot_deadzone = 2.0 * (gains.ang_threshold / 4.0).sin();
    let pose_deadzone = (0.5 * gains.pos_threshold).min(rot_deadzone);
    match target {
        TaskTarget::RotationOnly { desired } => {
            // Error of r̂ ⊗ r_d* against the identity quaternion.
            let r_hat = chain.needle_pose().rotation();
            let mut rel = r_hat * desired.conj();
            let sign = if rel.w < 0.0 { -1.0 } else { 1.0 };
            rel = rel.scale(sign);
            let error = DVector::from_vec(alloc::vec![rel.w - 1.0, rel.x, rel.y, rel.z]);
            let op = to_dmatrix(&haminus4(&desired.conj())) * sign;
            let jacobian_q = &op * rotation_block(&chain.needle.pose_jacobian);
            let jacobian_params = &op * rotation_block(j_param);
            TaskLinearization {
                error,
                jacobian_q,
                jacobian_params,
                feedforward: DVector::zeros(4),
                descent_deadzone: rot_deadzone,
            }
        }
        TaskTarget::FullPose { desired } => {
            let x_hat = chain.needle_pose().as_vec8();
            let mut x_d = desired.as_vec8();
            if chain.needle_pose().rotation().dot(&desired.rotation()) < 0.0 {
                x_d = -x_d;
            }
            let error = DVector::from_column_slice((x_hat - x_d).as_slice());
            TaskLinearization {
                error,
                jacobian_q: chain.needle.pose_jacobian.clone(),
                jacobian_params: j_param.clone(),
                feedforward: DVector::zeros(8),
                descent_deadzone: pose_deadzone,
            }
        }
        TaskTarget::TranslationOnly { desired, feedforward } => {
            let t_hat = chain.needle_tip();
            let error = DVector::from_vec(alloc::vec![
                t_hat.x - desired.x,
                t_hat.y - desired.y,
                t_hat.z - desired.z,
            ]);
            let jacobian_params = translation_block(&chain.needle_pose(), j_param);
            TaskLinearization {
                error,
                jacobian_q: chain.needle.translation.clone(),
                jacobian_params,
                feedforward: DVector::from_vec(alloc::vec![
                    feedforward.x,
                    feedforward.y,
                    feedforward.z
                ]),
                descent_deadzone: gains.pos_threshold,
            }
        }
    }
}

/// Scene kinematics (tip, direction, designated patient points) with
/// Jacobians taken w.r.t. the joint rates.
pub fn scene_kinematics_q(chain: &EstimatedChain) -> SceneKinematics {
    let tip = PointState {
        position: chain.needle_tip(),
        jacobian: chain.needle.translation.clone(),
    };
    let ee_origin = PointState {
        position: chain.ee.pose.translation(),
        jacobian: chain.ee.translation.clone(),
    };
    SceneKinematics {
        needle: NeedleState {
            tip: tip.clone(),
            direction: chain.needle_direction(),
            direction_jacobian: chain.needle.line_direction.clone(),
        },
        patient_points: alloc::vec![tip, ee_origin],
    }
}

/// Scene kinematics with Jacobians taken w.r.t. the parameter rates, so
/// the same row builders mirror every active VFI for the adaptation QP.
pub fn scene_kinematics_params(
    chain: &EstimatedChain,
    j_param_needle: &DMatrix<f64>,
    j_param_ee: &DMatrix<f64>,
) -> SceneKinematics {
    let tip = PointState {
        position: chain.needle_tip(),
        jacobian: translation_block(&chain.needle_pose(), j_param_needle),
    };
    let ee_origin = PointState {
        position: chain.ee.pose.translation(),
        jacobian: translation_block(&chain.ee.pose, j_param_ee),
    };
    SceneKinematics {
        needle: NeedleState {
            tip: tip.clone(),
            direction: chain.needle_direction(),
            direction_jacobian: crate::kinematics::direction_block(
                &chain.needle_pose(),
                &NEEDLE_AXIS,
                j_param_needle,
            ),
        },
        patient_points: alloc::vec![tip, ee_origin],
    }
}

/// Outcome of one motion-law tick.
#[derive(Debug, Clone)]
pub struct ControlOutcome {
    pub joint_velocity: DVector<f64>,
    /// False when the constraint set admitted no velocity; the command
    /// is zero and the caller must stop the trial.
    pub feasible: bool,
    pub kkt_residual: f64,
    pub active_rows: usize,
}

/// One tick of the motion law: damped least-squares tracking of the task
/// under the stacked inequality rows.
pub fn nominal_control_step(
    task: &TaskLinearization,
    constraints: &ConstraintSet,
    task_gain: f64,
    damping: f64,
    n_joints: usize,
) -> Result<ControlOutcome, ControlError> {
    let (b_mat, b_vec) = constraints.stacked(n_joints);
    let e_term = &task.error * task_gain - &task.feedforward;
    let problem = build_damped_ls_qp(&task.jacobian_q, &e_term, damping, b_mat, b_vec)?;
    let sol = solve_qp(&problem)?;
    match sol.status {
        QpStatus::Optimal => Ok(ControlOutcome {
            joint_velocity: sol.primal,
            feasible: true,
            kkt_residual: sol.kkt_residual,
            active_rows: sol.active_set.len(),
        }),
        QpStatus::Infeasible => Ok(ControlOutcome {
            joint_velocity: DVector::zeros(n_joints),
            feasible: false,
            kkt_residual: f64::INFINITY,
            active_rows: 0,
        }),
    }
}

/// Outcome of one adaptation tick.
#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    /// Parameter rates â̇; the caller integrates them over the tick.
    pub param_rates: DVector<f64>,
    /// Task-descent product x̆ᵀ J_x̂,â â̇ (0 when no task is active).
    pub lyapunov_product: f64,
    /// True when the adaptation QP was infeasible and the update paused.
    pub paused: bool,
}

/// One tick of the adaptation law.
///
/// Minimizes `‖J_ŷ,â â̇ + η_â ỹ‖² + λ_a²‖â̇‖²` subject to the mirrored
/// VFI rows and, when a motion task is active, the task-descent row
/// `x̆ᵀ J_x̂,â â̇ ≤ 0`. The pose error `ỹ` handles the quaternion double
/// cover by sign-aligning the measurement with the estimate.
pub fn adaptation_step(
    chain: &EstimatedChain,
    j_param: &DMatrix<f64>,
    measured: &UnitDualQuat,
    task: Option<&TaskLinearization>,
    vfi_rows: &ConstraintSet,
    gains: &ControllerGains,
) -> Result<AdaptationOutcome, ControlError> {
    let estimate = chain.needle_pose().as_vec8();
    let mut meas = measured.as_vec8();
    if chain.needle_pose().rotation().dot(&measured.rotation()) < 0.0 {
        meas = -meas;
    }
    let y_err = DVector::from_column_slice((estimate - meas).as_slice());

    // Mirrored VFI rows plus, when a task is active and its error is
    // outside the dead zone, the task-descent row x̆ᵀ J_x̂,â â̇ ≤ 0.
    // Inside the dead zone the task error counts as zero: a descent
    // constraint on a sub-threshold error has no stability content and
    // would let the noise floor deadlock the parameter corrections.
    let descent_task =
        task.filter(|t| t.error.norm() > t.descent_deadzone);
    let (vfi_mat, vfi_vec) = vfi_rows.stacked(12);
    let extra = usize::from(descent_task.is_some());
    let mut b_mat = DMatrix::zeros(vfi_rows.len() + extra, 12);
    let mut b_vec = DVector::zeros(vfi_rows.len() + extra);
    b_mat.rows_mut(0, vfi_rows.len()).copy_from(&vfi_mat);
    b_vec.rows_mut(0, vfi_rows.len()).copy_from(&vfi_vec);
    if let Some(task) = descent_task {
        let lyap = task.error.transpose() * &task.jacobian_params;
        b_mat.set_row(vfi_rows.len(), &lyap.row(0).into_owned());
        b_vec[vfi_rows.len()] = 0.0;
    }
    let e_term = &y_err * gains.adapt_gain;
    let problem = build_damped_ls_qp(j_param, &e_term, gains.adapt_damping, b_mat, b_vec)?;
    let sol = solve_qp(&problem)?;
    match sol.status {
        QpStatus::Optimal => {
            // Product of the dead-zoned task error with the rates:
            // identically zero inside the zone, row-bounded outside.
            let lyapunov_product = match descent_task {
                Some(t) => (t.error.transpose() * &t.jacobian_params * &sol.primal)[(0, 0)],
                None => 0.0,
            };
            Ok(AdaptationOutcome { param_rates: sol.primal, lyapunov_product, paused: false })
        }
        QpStatus::Infeasible => {
            log::warn!("adaptation QP infeasible; pausing the parameter update this tick");
            Ok(AdaptationOutcome {
                param_rates: DVector::zeros(12),
                lyapunov_product: 0.0,
                paused: true,
            })
        }
    }
}

/// Convergence test of the estimate against the measurement: tip
/// position error below the position threshold and needle direction
/// error below the angular threshold.
pub fn convergence_check(
    estimated: &UnitDualQuat,
    measured: &UnitDualQuat,
    gains: &ControllerGains,
) -> bool {
    let pos_err = (estimated.translation_vector() - measured.translation_vector()).norm();
    let ang_err = angle_between(
        &estimated.transform_direction(&NEEDLE_AXIS),
        &measured.transform_direction(&NEEDLE_AXIS),
    );
    pos_err < gains.pos_threshold && ang_err < gains.ang_threshold
}

/// Mirrors the active VFI rows for the adaptation variables: same
/// geometry, Jacobians w.r.t. `â̇`, rate budget `mirror_rate` per
/// family, and the *nominal* primitives rather than the margin-tightened
/// ones. The band between the two is a recovery corridor: when the true
/// state drags the estimate past the enforced bound, the motion rows see
/// a violation and actively steer the plant back inside.
pub fn adaptation_constraints(
    scene: &crate::vfi::ConstraintScene,
    step: crate::vfi::ProcedureStep,
    kin_params: &SceneKinematics,
    mirror_rate: f64,
) -> ConstraintSet {
    let gains = VfiGains {
        patient: mirror_rate,
        guide: mirror_rate,
        cone: mirror_rate,
        plane: mirror_rate,
        joint: mirror_rate,
    };
    let nominal = crate::vfi::ConstraintScene {
        margins: crate::vfi::SafetyMargins::ZERO,
        ..scene.clone()
    };
    crate::vfi::geometric_rows_with_gains(&nominal, step, kin_params, &gains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::test_models;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_params(rng: &mut ChaCha8Rng) -> AdaptiveParameters {
        AdaptiveParameters {
            base: PoseParams {
                rotation: Vector3::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                ),
                translation: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
            },
            needle: PoseParams {
                rotation: Vector3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                ),
                translation: Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(0.05..0.15),
                ),
            },
        }
    }

    #[test]
    fn pose_params_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = test_params(&mut rng).base;
            let back = PoseParams::from_pose(&p.pose());
            assert!((p.rotation - back.rotation).norm() < 1e-12);
            assert!((p.translation - back.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn estimated_pose_identity_params_is_fkm() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let pose = estimated_needle_pose(&robot, &q, &AdaptiveParameters::default()).unwrap();
        let fkm = robot.fkm(&q).unwrap();
        assert!((pose.as_vec8() - fkm.as_vec8()).norm() < 1e-14);
    }

    #[test]
    fn estimated_pose_matches_manual_composition() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = test_params(&mut rng);
        let pose = estimated_needle_pose(&robot, &q, &params).unwrap();
        let manual = params.base_pose() * robot.fkm(&q).unwrap() * params.needle_pose();
        assert!((pose.as_vec8() - manual.as_vec8()).norm() < 1e-14);
    }

    #[test]
    fn base_translation_shifts_tip_by_rotated_offset() {
        // The base translation is charted in the rotated frame, so a
        // parameter step δ moves the tip by R_base · δ.
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = test_params(&mut rng);
        let delta = Vector3::new(1e-3, -2e-3, 3e-3);
        let mut shifted = params;
        shifted.base.translation += delta;
        let t0 = estimated_needle_pose(&robot, &q, &params).unwrap().translation_vector();
        let t1 = estimated_needle_pose(&robot, &q, &shifted).unwrap().translation_vector();
        let r_base = params.base_pose().rotation();
        let expected = r_base.rotate(&Quat::from_vector(delta)).vector();
        assert!((t1 - t0 - expected).norm() < 1e-12);
    }

    #[test]
    fn parameter_jacobian_translation_columns_are_rotation_columns() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = test_params(&mut rng);
        let j = parameter_jacobian(&robot, &q, &params).unwrap();
        let chain = estimated_chain(&robot, &q, &params).unwrap();
        let j_trans = translation_block(&chain.needle_pose(), &j);
        let r = params.base_pose().rotation();
        for (col, axis) in [(0, Quat::pure(1.0, 0.0, 0.0)), (1, Quat::pure(0.0, 1.0, 0.0)), (2, Quat::pure(0.0, 0.0, 1.0))] {
            let expected = r.rotate(&axis).vector();
            for row in 0..3 {
                assert_abs_diff_eq!(j_trans[(row, col)], expected[row], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn parameter_jacobian_fd_self_consistency() {
        // Halving the step changes the entries by less than 1e-6.
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = test_params(&mut rng);
        let fkm_pose = robot.fkm(&q).unwrap();
        let j1 = chain_param_jacobian(&fkm_pose, &params, true);
        // Same computation at half step width via a local closure.
        let h = PARAM_JACOBIAN_STEP / 2.0;
        let base_vec = params.to_vector();
        for k in 0..12 {
            let mut vp = base_vec.clone();
            vp[k] += h;
            let mut vm = base_vec.clone();
            vm[k] -= h;
            let pp = AdaptiveParameters::from_vector(&vp);
            let pm = AdaptiveParameters::from_vector(&vm);
            let yp = (pp.base_pose() * fkm_pose * pp.needle_pose()).as_vec8();
            let ym = (pm.base_pose() * fkm_pose * pm.needle_pose()).as_vec8();
            for r in 0..8 {
                let fd = (yp[r] - ym[r]) / (2.0 * h);
                assert!((j1[(r, k)] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn parameter_jacobian_taylor_remainder() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let params = AdaptiveParameters::default();
        let j = parameter_jacobian(&robot, &q, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dir = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0_f64));
        let y0 = estimated_needle_pose(&robot, &q, &params).unwrap().as_vec8();
        let mut prev = f64::INFINITY;
        for scale in [1e-3, 1e-4, 1e-5] {
            let da = &dir * scale;
            let shifted = AdaptiveParameters::from_vector(&(params.to_vector() + &da));
            let y1 = estimated_needle_pose(&robot, &q, &shifted).unwrap().as_vec8();
            let pred = &j * &da;
            let mut err: f64 = 0.0;
            for r in 0..8 {
                err = err.max(((y1[r] - y0[r]) - pred[r]).abs());
            }
            assert!(err < prev / 20.0 + 1e-12, "remainder not second order: {err} vs {prev}");
            prev = err;
        }
    }

    #[test]
    fn zero_error_zero_feedforward_stops() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let params = AdaptiveParameters::default();
        let chain = estimated_chain(&robot, &q, &params).unwrap();
        let j_param = parameter_jacobian(&robot, &q, &params).unwrap();
        let target = TaskTarget::FullPose { desired: chain.needle_pose() };
        let task = linearize_task(&chain, &j_param, &target, &ControllerGains::default());
        let out = nominal_control_step(&task, &ConstraintSet::default(), 0.5, 0.05, 7).unwrap();
        assert!(out.feasible);
        assert!(out.joint_velocity.norm() < 1e-12);
    }

    #[test]
    fn binding_velocity_row_respected_exactly() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let params = AdaptiveParameters::default();
        let chain = estimated_chain(&robot, &q, &params).unwrap();
        let j_param = parameter_jacobian(&robot, &q, &params).unwrap();
        // A far target saturates the velocity rows.
        let target = TaskTarget::TranslationOnly {
            desired: Quat::pure(5.0, 5.0, 5.0),
            feedforward: Quat::ZERO,
        };
        let task = linearize_task(&chain, &j_param, &target, &ControllerGains::default());
        let mut rows = crate::vfi::joint_limit_rows(&robot, &q, 1.0);
        rows.truncate(4 * robot.n_joints());
        let set = ConstraintSet { rows };
        let out = nominal_control_step(&task, &set, 0.5, 0.01, 7).unwrap();
        assert!(out.feasible);
        assert!(out.active_rows > 0, "expected saturated rows");
        for i in 0..7 {
            assert!(out.joint_velocity[i].abs() <= robot.qdot_max()[i] + 1e-9);
        }
    }

    #[test]
    fn double_cover_sign_gives_same_command() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let params = AdaptiveParameters::default();
        let chain = estimated_chain(&robot, &q, &params).unwrap();
        let j_param = parameter_jacobian(&robot, &q, &params).unwrap();
        let desired = Quat::exp_rotation(Vector3::new(0.1, -0.4, 0.2));
        let t_plus = linearize_task(&chain, &j_param, &TaskTarget::RotationOnly { desired }, &ControllerGains::default());
        let t_minus = linearize_task(
            &chain,
            &j_param,
            &TaskTarget::RotationOnly { desired: desired.scale(-1.0) },
            &ControllerGains::default(),
        );
        let u_plus =
            nominal_control_step(&t_plus, &ConstraintSet::default(), 0.5, 0.05, 7).unwrap();
        let u_minus =
            nominal_control_step(&t_minus, &ConstraintSet::default(), 0.5, 0.05, 7).unwrap();
        assert!((u_plus.joint_velocity - u_minus.joint_velocity).norm() < 1e-10);
    }

    #[test]
    fn adaptation_stops_at_zero_error() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let params = AdaptiveParameters::default();
        let chain = estimated_chain(&robot, &q, &params).unwrap();
        let j_param = parameter_jacobian(&robot, &q, &params).unwrap();
        let out = adaptation_step(
            &chain,
            &j_param,
            &chain.needle_pose(),
            None,
            &ConstraintSet::default(),
            &ControllerGains::default(),
        )
        .unwrap();
        assert!(!out.paused);
        assert!(out.param_rates.norm() < 1e-12);
    }

    #[test]
    fn lyapunov_row_enforced() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = test_params(&mut rng);
        let chain = estimated_chain(&robot, &q, &params).unwrap();
        let j_param = parameter_jacobian(&robot, &q, &params).unwrap();
        // A measurement pulling the estimate one way and a task error
        // pulling another: the descent row must still hold.
        let measured = estimated_needle_pose(&robot, &q, &AdaptiveParameters::default()).unwrap();
        let target = TaskTarget::TranslationOnly {
            desired: Quat::pure(0.2, -0.1, 0.4),
            feedforward: Quat::ZERO,
        };
        let task = linearize_task(&chain, &j_param, &target, &ControllerGains::default());
        let out = adaptation_step(
            &chain,
            &j_param,
            &measured,
            Some(&task),
            &ConstraintSet::default(),
            &ControllerGains::default(),
        )
        .unwrap();
        assert!(!out.paused);
        assert!(out.param_rates.norm() > 1e-6, "adaptation should move");
        assert!(out.lyapunov_product <= 1e-9, "descent row violated: {}", out.lyapunov_product);
    }

    #[test]
    fn stationary_adaptation_converges_to_measurement() {
        // Robot held still, exact measurements: iterating the adaptation
        // law drives the estimated pose onto the measured one.
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let truth = AdaptiveParameters {
            base: PoseParams {
                rotation: Vector3::new(0.05, -0.1, 0.08),
                translation: Vector3::new(0.1, -0.15, 0.12),
            },
            needle: PoseParams {
                rotation: Vector3::new(0.02, 0.03, -0.01),
                translation: Vector3::new(0.005, -0.004, 0.11),
            },
        };
        let measured = estimated_needle_pose(&robot, &q, &truth).unwrap();
        let mut params = AdaptiveParameters {
            base: PoseParams {
                rotation: Vector3::new(-0.05, 0.05, 0.0),
                translation: Vector3::new(-0.05, 0.1, 0.0),
            },
            needle: PoseParams::zero(),
        };
        let gains = ControllerGains::default();
        let dt = 0.01;
        let mut err = f64::INFINITY;
        for _ in 0..3000 {
            let chain = estimated_chain(&robot, &q, &params).unwrap();
            let j_param = parameter_jacobian(&robot, &q, &params).unwrap();
            let out = adaptation_step(
                &chain,
                &j_param,
                &measured,
                None,
                &ConstraintSet::default(),
                &gains,
            )
            .unwrap();
            params = params.integrate(&out.param_rates, dt);
            err = (estimated_needle_pose(&robot, &q, &params).unwrap().as_vec8()
                - measured.as_vec8())
            .norm();
            if err < 1e-4 {
                break;
            }
        }
        assert!(err < 1e-3, "estimate did not converge: residual {err}");
    }

    #[test]
    fn convergence_check_thresholds() {
        let gains = ControllerGains::default();
        let base = UnitDualQuat::from_rotation_translation(Quat::ONE, Quat::pure(0.2, 0.0, 0.0))
            .unwrap();
        assert!(convergence_check(&base, &base, &gains));
        let off = |dx: f64, ang_deg: f64| {
            let r = Quat::exp_rotation(Vector3::new(ang_deg.to_radians(), 0.0, 0.0));
            UnitDualQuat::from_rotation_translation(r, Quat::pure(0.2 + dx, 0.0, 0.0)).unwrap()
        };
        // 1.4 mm / 0.4°: inside both thresholds.
        assert!(convergence_check(&off(1.4e-3, 0.4), &base, &gains));
        // 1.6 mm / 0.4°: position too large.
        assert!(!convergence_check(&off(1.6e-3, 0.4), &base, &gains));
        // 1.4 mm / 0.6°: angle too large; both must hold.
        assert!(!convergence_check(&off(1.4e-3, 0.6), &base, &gains));
    }

    #[test]
    fn rechart_wraps_long_rotation_vectors() {
        let mut p = PoseParams {
            rotation: Vector3::new(0.0, 0.0, core::f64::consts::PI + 0.2),
            translation: Vector3::zeros(),
        };
        let pose_before = p.pose();
        p.rechart();
        assert!(p.rotation.norm() < core::f64::consts::PI);
        let pose_after = p.pose();
        let mut v = pose_after.as_vec8();
        if pose_before.rotation().dot(&pose_after.rotation()) < 0.0 {
            v = -v;
        }
        assert!((pose_before.as_vec8() - v).norm() < 1e-12);
    }
}
