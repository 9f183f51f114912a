//! Vector-field-inequality constraint rows.
//!
//! Each row encodes a differential inequality on a signed distance
//! `d̃ = d − d_s`: enforcing `a·q̇ ≤ rhs` per tick keeps keep-out
//! distances above their safe value and keep-in distances below it, with
//! exponential approach at the row's gain. Stacked rows form the `(B, b)`
//! inequality system of the motion QP.
//!
//! Row ordering produced by [`assemble_constraints`] is fixed: geometric
//! rows first (patient-cylinder rows for each designated robot point in
//! steps 0-2; guide-cylinder, cone, plane in step 3), then the `4n` joint
//! rows grouped per joint as position-upper, position-lower,
//! velocity-upper, velocity-lower.
//!
//! The continuous-time guarantee degrades under discretization by a
//! second-order term, so the scene carries per-family safety margins that
//! tighten the *enforced* primitive (smaller keep-in radius, larger
//! keep-out radius) while trace output and violation accounting always
//! refer to the nominal one.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector, RowDVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::geom::{Cone, Cylinder, GeomError, Plane, Quat};
use crate::kinematics::SerialManipulator;

/// Family tag of a constraint row; the label fixes the sign convention
/// between `raw_distance` and `rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintLabel {
    PatientCylinderKeepOut,
    GuideCylinderKeepIn,
    ConeKeepIn,
    PlaneKeepAbove,
    JointPosUpper,
    JointPosLower,
    JointVelUpper,
    JointVelLower,
}

impl ConstraintLabel {
    /// Keep-in rows store `rhs = −gain · raw`; keep-out and joint rows
    /// store `rhs = +gain · raw`.
    pub fn is_keep_in(&self) -> bool {
        matches!(self, ConstraintLabel::GuideCylinderKeepIn | ConstraintLabel::ConeKeepIn)
    }
}

impl fmt::Display for ConstraintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConstraintLabel::PatientCylinderKeepOut => "patient_cylinder_keep_out",
            ConstraintLabel::GuideCylinderKeepIn => "guide_cylinder_keep_in",
            ConstraintLabel::ConeKeepIn => "cone_keep_in",
            ConstraintLabel::PlaneKeepAbove => "plane_keep_above",
            ConstraintLabel::JointPosUpper => "joint_pos_upper",
            ConstraintLabel::JointPosLower => "joint_pos_lower",
            ConstraintLabel::JointVelUpper => "joint_vel_upper",
            ConstraintLabel::JointVelLower => "joint_vel_lower",
        };
        f.write_str(s)
    }
}

/// One inequality row `coeffs · q̇ ≤ rhs`.
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub coeffs: RowDVector<f64>,
    pub rhs: f64,
    pub label: ConstraintLabel,
    pub gain: f64,
    /// Signed distance term before the gain (`d̃`, `D̃`, or `f̃`).
    pub raw_distance: f64,
}

impl ConstraintRow {
    /// Recomputes `rhs` from `(gain, raw_distance)` under the label's
    /// sign convention; equals the stored `rhs` exactly.
    pub fn expected_rhs(&self) -> f64 {
        if self.label.is_keep_in() {
            -self.gain * self.raw_distance
        } else {
            self.gain * self.raw_distance
        }
    }
}

/// Keep-out row for a robot point against a cylinder (squared-distance
/// form): `−Jd · q̇ ≤ gain (D − R²)`.
pub fn row_point_outside_cylinder(
    jd_row: &RowDVector<f64>,
    sq_dist: f64,
    cylinder: &Cylinder,
    gain: f64,
) -> ConstraintRow {
    let raw = sq_dist - cylinder.radius * cylinder.radius;
    ConstraintRow {
        coeffs: -jd_row,
        rhs: gain * raw,
        label: ConstraintLabel::PatientCylinderKeepOut,
        gain,
        raw_distance: raw,
    }
}

/// Keep-in row for a point inside a cylinder (sign-reversed inequality):
/// `+Jd · q̇ ≤ −gain (D − R²)`.
pub fn row_point_inside_cylinder(
    jd_row: &RowDVector<f64>,
    sq_dist: f64,
    cylinder: &Cylinder,
    gain: f64,
) -> ConstraintRow {
    let raw = sq_dist - cylinder.radius * cylinder.radius;
    ConstraintRow {
        coeffs: jd_row.clone(),
        rhs: -gain * raw,
        label: ConstraintLabel::GuideCylinderKeepIn,
        gain,
        raw_distance: raw,
    }
}

/// Keep-in row bounding the line-angle distance to a cone axis:
/// `+Jf · q̇ ≤ −gain (f − f(θ))`; equivalent to bounding the angle since
/// `f` is bijective on [0, π].
pub fn row_line_in_cone(
    jf_row: &RowDVector<f64>,
    f_value: f64,
    cone: &Cone,
    gain: f64,
) -> ConstraintRow {
    let raw = f_value - cone.half_angle_f();
    ConstraintRow {
        coeffs: jf_row.clone(),
        rhs: -gain * raw,
        label: ConstraintLabel::ConeKeepIn,
        gain,
        raw_distance: raw,
    }
}

/// Keep-above row for a signed point-plane distance:
/// `−Jd · q̇ ≤ gain d`.
pub fn row_point_above_plane(
    jd_row: &RowDVector<f64>,
    signed_dist: f64,
    gain: f64,
) -> ConstraintRow {
    ConstraintRow {
        coeffs: -jd_row,
        rhs: gain * signed_dist,
        label: ConstraintLabel::PlaneKeepAbove,
        gain,
        raw_distance: signed_dist,
    }
}

/// The `4n` joint rows: per joint `i`,
/// `q̇ᵢ ≤ gain (q_max,i − qᵢ)`, `−q̇ᵢ ≤ gain (qᵢ − q_min,i)`,
/// `q̇ᵢ ≤ q̇_max,i`, `−q̇ᵢ ≤ q̇_max,i`.
pub fn joint_limit_rows(
    robot: &SerialManipulator,
    q: &DVector<f64>,
    gain: f64,
) -> Vec<ConstraintRow> {
    let n = robot.n_joints();
    debug_assert_eq!(q.len(), n);
    let mut rows = Vec::with_capacity(4 * n);
    for i in 0..n {
        let mut plus = RowDVector::zeros(n);
        plus[i] = 1.0;
        let minus = -&plus;
        let up = robot.q_max()[i] - q[i];
        let down = q[i] - robot.q_min()[i];
        let vmax = robot.qdot_max()[i];
        rows.push(ConstraintRow {
            coeffs: plus.clone(),
            rhs: gain * up,
            label: ConstraintLabel::JointPosUpper,
            gain,
            raw_distance: up,
        });
        rows.push(ConstraintRow {
            coeffs: minus.clone(),
            rhs: gain * down,
            label: ConstraintLabel::JointPosLower,
            gain,
            raw_distance: down,
        });
        rows.push(ConstraintRow {
            coeffs: plus,
            rhs: vmax,
            label: ConstraintLabel::JointVelUpper,
            gain: 1.0,
            raw_distance: vmax,
        });
        rows.push(ConstraintRow {
            coeffs: minus,
            rhs: vmax,
            label: ConstraintLabel::JointVelLower,
            gain: 1.0,
            raw_distance: vmax,
        });
    }
    rows
}

/// Per-family first-order gains (1/s).
#[derive(Debug, Clone, Copy)]
pub struct VfiGains {
    pub patient: f64,
    pub guide: f64,
    pub cone: f64,
    pub plane: f64,
    pub joint: f64,
}

impl Default for VfiGains {
    fn default() -> Self {
        VfiGains { patient: 1.0, guide: 1.0, cone: 3.0, plane: 0.75, joint: 1.0 }
    }
}

/// Tightening applied to the enforced primitives to absorb the
/// second-order discretization error of the closed loop. Lengths in
/// meters, the cone margin in radians. Zero margins reproduce the pure
/// continuous-time rows.
#[derive(Debug, Clone, Copy)]
pub struct SafetyMargins {
    pub patient: f64,
    pub guide: f64,
    pub cone: f64,
    pub plane: f64,
}

impl Default for SafetyMargins {
    fn default() -> Self {
        SafetyMargins {
            patient: 5e-4,
            guide: 5e-5,
            cone: 0.10_f64 * core::f64::consts::PI / 180.0,
            plane: 1e-4,
        }
    }
}

impl SafetyMargins {
    pub const ZERO: SafetyMargins = SafetyMargins { patient: 0.0, guide: 0.0, cone: 0.0, plane: 0.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    Geometry(GeomError),
    /// Cone axis direction must equal the guide direction.
    ConeAxisMismatch,
    /// Target plane normal must equal the guide direction.
    PlaneNormalMismatch,
    /// A margin exceeds what its primitive can absorb.
    MarginTooLarge,
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::Geometry(e) => write!(f, "scene geometry: {e}"),
            SceneError::ConeAxisMismatch => write!(f, "cone axis must match guide direction"),
            SceneError::PlaneNormalMismatch => write!(f, "plane normal must match guide direction"),
            SceneError::MarginTooLarge => write!(f, "safety margin exceeds primitive size"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SceneError {}

impl From<GeomError> for SceneError {
    fn from(e: GeomError) -> Self {
        SceneError::Geometry(e)
    }
}

/// The geometric constraint zones of one trial, all expressed in the
/// reference (transmitter) frame, with gains and margins.
#[derive(Debug, Clone)]
pub struct ConstraintScene {
    pub patient_cylinder: Cylinder,
    pub guide_cylinder: Cylinder,
    pub cone: Cone,
    pub target_plane: Plane,
    pub gains: VfiGains,
    pub margins: SafetyMargins,
}

impl ConstraintScene {
    pub fn new(
        patient_cylinder: Cylinder,
        guide_cylinder: Cylinder,
        cone: Cone,
        target_plane: Plane,
        gains: VfiGains,
        margins: SafetyMargins,
    ) -> Result<Self, SceneError> {
        if (cone.axis.direction - guide_cylinder.axis.direction).norm() > 1e-9 {
            return Err(SceneError::ConeAxisMismatch);
        }
        if (target_plane.normal - guide_cylinder.axis.direction).norm() > 1e-9 {
            return Err(SceneError::PlaneNormalMismatch);
        }
        if margins.guide >= guide_cylinder.radius || margins.cone >= cone.half_angle {
            return Err(SceneError::MarginTooLarge);
        }
        Ok(ConstraintScene { patient_cylinder, guide_cylinder, cone, target_plane, gains, margins })
    }

    /// Enforced keep-out cylinder: nominal radius plus margin.
    pub fn effective_patient_cylinder(&self) -> Cylinder {
        Cylinder {
            axis: self.patient_cylinder.axis,
            radius: self.patient_cylinder.radius + self.margins.patient,
        }
    }

    /// Enforced keep-in cylinder: nominal radius minus margin.
    pub fn effective_guide_cylinder(&self) -> Cylinder {
        Cylinder {
            axis: self.guide_cylinder.axis,
            radius: self.guide_cylinder.radius - self.margins.guide,
        }
    }

    /// Enforced cone: nominal half-angle minus margin.
    pub fn effective_cone(&self) -> Cone {
        Cone { axis: self.cone.axis, half_angle: self.cone.half_angle - self.margins.cone }
    }

    /// Enforced plane: shifted along its normal by the margin.
    pub fn effective_target_plane(&self) -> Plane {
        Plane { normal: self.target_plane.normal, offset: self.target_plane.offset + self.margins.plane }
    }
}

/// Procedure phase; selects which geometric rows are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProcedureStep {
    /// Adaptation-only warm-up; motion rows as in step 1.
    WarmUp,
    /// Step 1: align the needle with the guide line.
    AlignNeedle,
    /// Step 2: move to the start position above the patient.
    MoveToStart,
    /// Step 3: insert along the guide; patient cylinder deactivated.
    Insert,
}

impl ProcedureStep {
    pub fn index(&self) -> u8 {
        match self {
            ProcedureStep::WarmUp => 0,
            ProcedureStep::AlignNeedle => 1,
            ProcedureStep::MoveToStart => 2,
            ProcedureStep::Insert => 3,
        }
    }
}

/// A constrained robot point with its translation Jacobian (3×k).
#[derive(Debug, Clone)]
pub struct PointState {
    pub position: Quat,
    pub jacobian: DMatrix<f64>,
}

/// Needle tip point plus the needle direction and its Jacobian (3×k).
#[derive(Debug, Clone)]
pub struct NeedleState {
    pub tip: PointState,
    pub direction: Quat,
    pub direction_jacobian: DMatrix<f64>,
}

/// Geometric state of everything the scene constrains, in the scene
/// frame. For the motion QP the Jacobians are taken w.r.t. `q̇`; the
/// adaptation law passes Jacobians w.r.t. the parameter rates instead.
#[derive(Debug, Clone)]
pub struct SceneKinematics {
    pub needle: NeedleState,
    /// Robot points checked against the patient cylinder (steps 0-2).
    pub patient_points: Vec<PointState>,
}

/// Stacked inequality rows.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    pub rows: Vec<ConstraintRow>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `(B, b)` with one matrix row per constraint, in stored order.
    pub fn stacked(&self, n_cols: usize) -> (DMatrix<f64>, DVector<f64>) {
        let l = self.rows.len();
        let mut b_mat = DMatrix::zeros(l, n_cols);
        let mut b_vec = DVector::zeros(l);
        for (i, row) in self.rows.iter().enumerate() {
            b_mat.set_row(i, &row.coeffs);
            b_vec[i] = row.rhs;
        }
        (b_mat, b_vec)
    }
}

/// Geometric VFI rows of one step (margins applied, joint rows excluded).
pub fn geometric_rows(
    scene: &ConstraintScene,
    step: ProcedureStep,
    kin: &SceneKinematics,
) -> ConstraintSet {
    geometric_rows_with_gains(scene, step, kin, &scene.gains)
}

/// As [`geometric_rows`] with explicit per-family gains. The adaptation
/// law mirrors these rows under its own rate budget: the estimate must
/// stay inside the feasible set, but throttling it to the physical
/// approach rate starves the estimator at keep-in boundaries.
pub fn geometric_rows_with_gains(
    scene: &ConstraintScene,
    step: ProcedureStep,
    kin: &SceneKinematics,
    gains: &VfiGains,
) -> ConstraintSet {
    let mut rows = Vec::new();
    match step {
        ProcedureStep::WarmUp | ProcedureStep::AlignNeedle | ProcedureStep::MoveToStart => {
            let cyl = scene.effective_patient_cylinder();
            for point in &kin.patient_points {
                let d = crate::geom::sq_dist_point_line(&point.position, &cyl.axis);
                let jd = crate::kinematics::dist_jacobian_point_line(
                    &point.jacobian,
                    &point.position,
                    &cyl.axis,
                );
                rows.push(row_point_outside_cylinder(&jd, d, &cyl, gains.patient));
            }
        }
        ProcedureStep::Insert => {
            // Guide cylinder keeps the tip near the axis.
            let guide = scene.effective_guide_cylinder();
            let d = crate::geom::sq_dist_point_line(&kin.needle.tip.position, &guide.axis);
            let jd = crate::kinematics::dist_jacobian_point_line(
                &kin.needle.tip.jacobian,
                &kin.needle.tip.position,
                &guide.axis,
            );
            rows.push(row_point_inside_cylinder(&jd, d, &guide, gains.guide));

            // Cone bounds the needle misalignment.
            let cone = scene.effective_cone();
            let (_, f_value) = crate::geom::line_angle(&kin.needle.direction, &cone.axis.direction);
            let jf = crate::kinematics::angle_jacobian_line_line(
                &kin.needle.direction_jacobian,
                &kin.needle.direction,
                &cone.axis.direction,
            );
            rows.push(row_line_in_cone(&jf, f_value, &cone, gains.cone));

            // Plane stops over-insertion.
            let plane = scene.effective_target_plane();
            let dist = crate::geom::signed_dist_point_plane(&kin.needle.tip.position, &plane);
            let jp = crate::kinematics::dist_jacobian_point_plane(&kin.needle.tip.jacobian, &plane);
            rows.push(row_point_above_plane(&jp, dist, gains.plane));
        }
    }
    ConstraintSet { rows }
}

/// Full motion constraint set of a step: geometric rows then joint rows.
pub fn assemble_constraints(
    scene: &ConstraintScene,
    step: ProcedureStep,
    kin: &SceneKinematics,
    robot: &SerialManipulator,
    q: &DVector<f64>,
) -> ConstraintSet {
    let mut set = geometric_rows(scene, step, kin);
    set.rows.extend(joint_limit_rows(robot, q, scene.gains.joint));
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{line_from_point_direction, PluckerLine};
    use crate::kinematics::test_models;
    use crate::qp::{build_damped_ls_qp, solve_qp, QpStatus};
    use approx::assert_abs_diff_eq;

    fn z_line() -> PluckerLine {
        line_from_point_direction(&Quat::ZERO, &Quat::pure(0.0, 0.0, 1.0)).unwrap()
    }

    fn test_scene(gains: VfiGains, margins: SafetyMargins) -> ConstraintScene {
        let guide_dir = Quat::pure(0.0, 0.0, 1.0);
        let axis = line_from_point_direction(&Quat::ZERO, &guide_dir).unwrap();
        let patient_axis =
            line_from_point_direction(&Quat::ZERO, &Quat::pure(1.0, 0.0, 0.0)).unwrap();
        ConstraintScene::new(
            Cylinder::new(patient_axis, 0.2).unwrap(),
            Cylinder::new(axis, 0.0015).unwrap(),
            Cone::new(axis, 0.5_f64.to_radians()).unwrap(),
            Plane::from_point_normal(&Quat::ZERO, &guide_dir).unwrap(),
            gains,
            margins,
        )
        .unwrap()
    }

    #[test]
    fn keep_out_row_semantics() {
        let cyl = Cylinder::new(z_line(), 0.1).unwrap();
        let jd = RowDVector::from_vec(alloc::vec![1.0, 0.0, 0.0]);
        // Point at distance 2R: slack rhs = gain·3R².
        let row = row_point_outside_cylinder(&jd, 0.04, &cyl, 2.0);
        assert_abs_diff_eq!(row.rhs, 2.0 * 3.0 * 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(row.coeffs[0], -1.0);
        assert_abs_diff_eq!(row.expected_rhs(), row.rhs);
        // Point exactly on the surface: rhs = 0.
        let row = row_point_outside_cylinder(&jd, 0.01, &cyl, 2.0);
        assert_abs_diff_eq!(row.rhs, 0.0);
    }

    #[test]
    fn keep_in_row_semantics() {
        let cyl = Cylinder::new(z_line(), 0.1).unwrap();
        let jd = RowDVector::from_vec(alloc::vec![1.0, 0.0, 0.0]);
        // Tip on the axis: rhs = gain·R² > 0.
        let row = row_point_inside_cylinder(&jd, 0.0, &cyl, 3.0);
        assert_abs_diff_eq!(row.rhs, 3.0 * 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(row.coeffs[0], 1.0);
        assert_abs_diff_eq!(row.expected_rhs(), row.rhs);
        // Tip on the surface: rhs = 0.
        let row = row_point_inside_cylinder(&jd, 0.01, &cyl, 3.0);
        assert_abs_diff_eq!(row.rhs, 0.0);
    }

    #[test]
    fn cone_row_semantics() {
        let cone = Cone::new(z_line(), 0.5_f64.to_radians()).unwrap();
        let jf = RowDVector::from_vec(alloc::vec![1.0]);
        // Aligned: rhs = gain·f(θ) > 0.
        let row = row_line_in_cone(&jf, 0.0, &cone, 1.5);
        assert_abs_diff_eq!(row.rhs, 1.5 * cone.half_angle_f(), epsilon = 1e-18);
        // At the boundary angle: rhs = 0.
        let row = row_line_in_cone(&jf, cone.half_angle_f(), &cone, 1.5);
        assert_abs_diff_eq!(row.rhs, 0.0);
    }

    #[test]
    fn plane_row_semantics() {
        let jd = RowDVector::from_vec(alloc::vec![0.0, 0.0, 1.0]);
        // Tip 300 mm above: rhs = 0.3·gain.
        let row = row_point_above_plane(&jd, 0.3, 0.7);
        assert_abs_diff_eq!(row.rhs, 0.21, epsilon = 1e-15);
        assert_abs_diff_eq!(row.coeffs[2], -1.0);
        // On the plane: rhs = 0.
        let row = row_point_above_plane(&jd, 0.0, 0.7);
        assert_abs_diff_eq!(row.rhs, 0.0);
    }

    #[test]
    fn joint_rows_count_and_boundaries() {
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let rows = joint_limit_rows(&robot, &q, 2.0);
        assert_eq!(rows.len(), 4 * robot.n_joints());
        // Mid-range: position rows slack, velocity rows bind first.
        let pos_up = &rows[0];
        assert!(pos_up.rhs > robot.qdot_max()[0]);
        // Joint at its upper limit: the position row forces q̇ ≤ 0.
        let mut q_lim = q.clone();
        q_lim[2] = robot.q_max()[2];
        let rows = joint_limit_rows(&robot, &q_lim, 2.0);
        let row = &rows[4 * 2];
        assert_eq!(row.label, ConstraintLabel::JointPosUpper);
        assert_abs_diff_eq!(row.rhs, 0.0);
        assert_abs_diff_eq!(row.coeffs[2], 1.0);
    }

    #[test]
    fn assemble_counts_per_step() {
        let scene = test_scene(VfiGains::default(), SafetyMargins::ZERO);
        let robot = test_models::panda();
        let q = test_models::panda_home();
        let n = robot.n_joints();
        let point = PointState {
            position: Quat::pure(0.0, 0.5, 0.0),
            jacobian: DMatrix::zeros(3, n),
        };
        let needle = NeedleState {
            tip: point.clone(),
            direction: Quat::pure(0.0, 0.0, 1.0),
            direction_jacobian: DMatrix::zeros(3, n),
        };
        // One designated patient point: ℓ = 1 + 4n in steps 1-2.
        let kin_one = SceneKinematics { needle: needle.clone(), patient_points: alloc::vec![point.clone()] };
        let set = assemble_constraints(&scene, ProcedureStep::AlignNeedle, &kin_one, &robot, &q);
        assert_eq!(set.len(), 1 + 4 * n);
        // Two designated points: ℓ = 2 + 4n.
        let kin_two = SceneKinematics {
            needle: needle.clone(),
            patient_points: alloc::vec![point.clone(), point.clone()],
        };
        let set = assemble_constraints(&scene, ProcedureStep::MoveToStart, &kin_two, &robot, &q);
        assert_eq!(set.len(), 2 + 4 * n);
        // Step 3: guide + cone + plane + joint rows, never a patient row.
        let set = assemble_constraints(&scene, ProcedureStep::Insert, &kin_two, &robot, &q);
        assert_eq!(set.len(), 3 + 4 * n);
        assert!(set
            .rows
            .iter()
            .all(|r| r.label != ConstraintLabel::PatientCylinderKeepOut));
    }

    #[test]
    fn scene_invariants_enforced() {
        let guide_dir = Quat::pure(0.0, 0.0, 1.0);
        let axis = line_from_point_direction(&Quat::ZERO, &guide_dir).unwrap();
        let other_axis =
            line_from_point_direction(&Quat::ZERO, &Quat::pure(1.0, 0.0, 0.0)).unwrap();
        let bad_cone = ConstraintScene::new(
            Cylinder::new(other_axis, 0.2).unwrap(),
            Cylinder::new(axis, 0.0015).unwrap(),
            Cone::new(other_axis, 0.01).unwrap(),
            Plane::from_point_normal(&Quat::ZERO, &guide_dir).unwrap(),
            VfiGains::default(),
            SafetyMargins::ZERO,
        );
        assert!(matches!(bad_cone, Err(SceneError::ConeAxisMismatch)));
    }

    // Closed-loop oracles on a direct Cartesian plant (J = I, ṗ = u):
    // integrate the QP-constrained loop and check the distance bounds.

    fn drive_point(
        start: [f64; 3],
        goal: [f64; 3],
        mut constrain: impl FnMut(&Quat, &DMatrix<f64>) -> ConstraintSet,
        ticks: usize,
        dt: f64,
    ) -> (Quat, Vec<Quat>) {
        let mut p = Quat::pure(start[0], start[1], start[2]);
        let goal = Quat::pure(goal[0], goal[1], goal[2]);
        let jac = DMatrix::<f64>::identity(3, 3);
        let mut path = Vec::new();
        for _ in 0..ticks {
            path.push(p);
            let err = DVector::from_vec(alloc::vec![
                p.x - goal.x,
                p.y - goal.y,
                p.z - goal.z
            ]);
            let set = constrain(&p, &jac);
            let (b_mat, b_vec) = set.stacked(3);
            let problem =
                build_damped_ls_qp(&jac, &(err * 1.0), 0.01, b_mat, b_vec).unwrap();
            let sol = solve_qp(&problem).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            p = Quat::pure(
                p.x + sol.primal[0] * dt,
                p.y + sol.primal[1] * dt,
                p.z + sol.primal[2] * dt,
            );
        }
        (p, path)
    }

    #[test]
    fn closed_loop_keep_out_never_penetrates() {
        // Command the point straight at the cylinder; the keep-out row
        // must keep D − R² ≥ −1e−9 at every tick.
        let cyl = Cylinder::new(z_line(), 0.1).unwrap();
        let gain = 1.0;
        let (_, path) = drive_point(
            [0.5, 0.02, 0.0],
            [-0.5, -0.02, 0.0],
            |p, jac| {
                let d = crate::geom::sq_dist_point_line(p, &cyl.axis);
                let jd = crate::kinematics::dist_jacobian_point_line(jac, p, &cyl.axis);
                ConstraintSet { rows: alloc::vec![row_point_outside_cylinder(&jd, d, &cyl, gain)] }
            },
            4000,
            0.01,
        );
        let min_margin = path
            .iter()
            .map(|p| crate::geom::sq_dist_point_line(p, &cyl.axis) - 0.01)
            .fold(f64::INFINITY, f64::min);
        assert!(min_margin >= -1e-9, "keep-out violated by {min_margin}");
    }

    #[test]
    fn closed_loop_keep_in_stays_inside() {
        // Pull the point sideways out of the guide cylinder; the keep-in
        // row caps the distance at R (within discretization).
        let cyl = Cylinder::new(z_line(), 0.01).unwrap();
        let (_, path) = drive_point(
            [0.0, 0.0, 0.2],
            [0.15, 0.0, -0.1],
            |p, jac| {
                let d = crate::geom::sq_dist_point_line(p, &cyl.axis);
                let jd = crate::kinematics::dist_jacobian_point_line(jac, p, &cyl.axis);
                ConstraintSet { rows: alloc::vec![row_point_inside_cylinder(&jd, d, &cyl, 1.0)] }
            },
            3000,
            0.01,
        );
        let max_d = path
            .iter()
            .map(|p| crate::geom::sq_dist_point_line(p, &cyl.axis))
            .fold(0.0, f64::max);
        assert!(max_d <= 0.01 * 0.01 + 1e-9, "keep-in exceeded: {max_d}");
    }

    #[test]
    fn closed_loop_plane_never_crossed() {
        let plane = Plane::from_point_normal(&Quat::ZERO, &Quat::pure(0.0, 0.0, 1.0)).unwrap();
        let (_, path) = drive_point(
            [0.02, -0.01, 0.3],
            [0.02, -0.01, -0.4],
            |p, jac| {
                let d = crate::geom::signed_dist_point_plane(p, &plane);
                let jd = crate::kinematics::dist_jacobian_point_plane(jac, &plane);
                ConstraintSet { rows: alloc::vec![row_point_above_plane(&jd, d, 1.0)] }
            },
            5000,
            0.01,
        );
        let min_d = path
            .iter()
            .map(|p| crate::geom::signed_dist_point_plane(p, &plane))
            .fold(f64::INFINITY, f64::min);
        assert!(min_d >= -1e-9, "plane crossed by {min_d}");
    }

    #[test]
    fn closed_loop_joint_limits_hold() {
        // Drive the arm toward a far target; joint rows must keep q
        // inside the limits within 1e-6 rad at all times.
        use rand::{Rng, SeedableRng};
        let robot = test_models::panda();
        let n = robot.n_joints();
        let dt = 0.01;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        for _ in 0..3 {
            let mut q = DVector::from_fn(n, |i, _| {
                rng.gen_range(robot.q_min()[i] * 0.9..robot.q_max()[i] * 0.9)
            });
            let goal = Quat::pure(1.2, 1.2, 1.2); // unreachable on purpose
            for _ in 0..600 {
                let jac = robot.pose_jacobian(&q).unwrap();
                let p = jac.pose.translation_vector();
                let err = DVector::from_vec(alloc::vec![
                    (p.x - goal.x) * 0.5,
                    (p.y - goal.y) * 0.5,
                    (p.z - goal.z) * 0.5
                ]);
                let set = ConstraintSet { rows: joint_limit_rows(&robot, &q, 1.0) };
                let (b_mat, b_vec) = set.stacked(n);
                let problem =
                    build_damped_ls_qp(&jac.translation, &err, 0.05, b_mat, b_vec).unwrap();
                let sol = solve_qp(&problem).unwrap();
                assert_eq!(sol.status, QpStatus::Optimal);
                q += sol.primal * dt;
                for i in 0..n {
                    assert!(q[i] >= robot.q_min()[i] - 1e-6, "lower limit broken at joint {i}");
                    assert!(q[i] <= robot.q_max()[i] + 1e-6, "upper limit broken at joint {i}");
                }
            }
        }
    }
}
