//! Serial-manipulator forward kinematics and task Jacobians.
//!
//! Robot models are tables of Denavit-Hartenberg rows in one of two
//! conventions:
//!
//! - `Standard`: `A_i = RotZ(θ_i) · TransZ(d_i) · TransX(a_i) · RotX(α_i)`
//! - `Modified` (Craig): `A_i = RotX(α_i) · TransX(a_i) · RotZ(θ_i) · TransZ(d_i)`
//!
//! For revolute joints the joint variable adds to `θ`, for prismatic
//! joints to `d`; `fixed` rows contribute a constant transform (tool
//! flanges, mounting plates) and no column in any Jacobian.
//!
//! All Jacobians are analytic. The pose Jacobian satisfies
//! `vec8(ẋ) = J_pose q̇`; translation, rotation, and line-direction blocks
//! are derived from it through the Hamilton-operator identities in
//! [`crate::geom`]. Finite-difference checks live in [`crate::selfcheck`]
//! and in tests, never on the control path.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector, Matrix4, RowDVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::geom::{
    conj4, hamiplus4, hamiplus8, haminus4, haminus8, skew, to_dmatrix, DualQuat, Plane,
    PluckerLine, Quat, UnitDualQuat,
};

/// Errors from model construction or kinematic evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum KinError {
    /// Joint vector length does not match the number of joints.
    DimensionMismatch { expected: usize, got: usize },
    /// The model table is internally inconsistent.
    InvalidModel(String),
}

impl fmt::Display for KinError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KinError::DimensionMismatch { expected, got } => {
                write!(f, "expected joint vector of length {expected}, got {got}")
            }
            KinError::InvalidModel(msg) => write!(f, "invalid robot model: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for KinError {}

/// Denavit-Hartenberg parameter convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhConvention {
    Standard,
    Modified,
}

/// How the joint variable enters a DH row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
    /// Constant transform; contributes no Jacobian column.
    Fixed,
}

/// One DH row: lengths in meters, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhRow {
    pub kind: JointKind,
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    pub theta: f64,
}

/// Kinematic model of a serial manipulator with joint limits.
#[derive(Debug, Clone)]
pub struct SerialManipulator {
    convention: DhConvention,
    rows: Vec<DhRow>,
    q_min: DVector<f64>,
    q_max: DVector<f64>,
    qdot_max: DVector<f64>,
    /// Index into `rows` for each movable joint.
    joint_rows: Vec<usize>,
}

impl SerialManipulator {
    /// Builds a model; limit vectors are indexed by movable joint.
    pub fn new(
        convention: DhConvention,
        rows: Vec<DhRow>,
        q_min: DVector<f64>,
        q_max: DVector<f64>,
        qdot_max: DVector<f64>,
    ) -> Result<Self, KinError> {
        let joint_rows: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind != JointKind::Fixed)
            .map(|(i, _)| i)
            .collect();
        let n = joint_rows.len();
        if q_min.len() != n || q_max.len() != n || qdot_max.len() != n {
            return Err(KinError::InvalidModel(alloc::format!(
                "limit vectors must have length {n} (movable joints)"
            )));
        }
        for i in 0..n {
            if !(q_min[i] < q_max[i]) {
                return Err(KinError::InvalidModel(alloc::format!(
                    "joint {i}: q_min must be < q_max"
                )));
            }
            if !(qdot_max[i] > 0.0) {
                return Err(KinError::InvalidModel(alloc::format!(
                    "joint {i}: qdot_max must be > 0"
                )));
            }
        }
        Ok(SerialManipulator { convention, rows, q_min, q_max, qdot_max, joint_rows })
    }

    pub fn n_joints(&self) -> usize {
        self.joint_rows.len()
    }

    pub fn convention(&self) -> DhConvention {
        self.convention
    }

    pub fn rows(&self) -> &[DhRow] {
        &self.rows
    }

    pub fn q_min(&self) -> &DVector<f64> {
        &self.q_min
    }

    pub fn q_max(&self) -> &DVector<f64> {
        &self.q_max
    }

    pub fn qdot_max(&self) -> &DVector<f64> {
        &self.qdot_max
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<(), KinError> {
        if q.len() != self.n_joints() {
            return Err(KinError::DimensionMismatch { expected: self.n_joints(), got: q.len() });
        }
        // Out-of-limit configurations are still evaluated (the controller
        // pushes them back inside); only warn.
        for i in 0..q.len() {
            if q[i] < self.q_min[i] - 1e-9 || q[i] > self.q_max[i] + 1e-9 {
                log::warn!(
                    "joint {} at {:.6} rad outside limits [{:.6}, {:.6}]",
                    i,
                    q[i],
                    self.q_min[i],
                    self.q_max[i]
                );
            }
        }
        Ok(())
    }

    /// Transform of one row split as `A = L ⊗ M`, where only `M` depends
    /// on the joint variable. The joint derivative is `L ⊗ ξ ⊗ M` with
    /// `ξ = k̂/2` (revolute) or `ε k̂/2` (prismatic).
    fn row_parts(&self, row: &DhRow, q_i: f64) -> (DualQuat, DualQuat) {
        let (theta, d) = match row.kind {
            JointKind::Revolute => (row.theta + q_i, row.d),
            JointKind::Prismatic => (row.theta, row.d + q_i),
            JointKind::Fixed => (row.theta, row.d),
        };
        let rot_z = Quat::new((theta / 2.0).cos(), 0.0, 0.0, (theta / 2.0).sin());
        let trans_z = Quat::pure(0.0, 0.0, d);
        let rot_x = Quat::new((row.alpha / 2.0).cos(), (row.alpha / 2.0).sin(), 0.0, 0.0);
        let trans_x = Quat::pure(row.a, 0.0, 0.0);
        // Translation along the rotation axis commutes, so one
        // rotation+translation pose serves RotZ·TransZ and TransZ·RotZ
        // alike (and likewise for x).
        let zpart = UnitDualQuat::from_rotation_translation(rot_z, trans_z)
            .expect("rotation about z is unit");
        let xpart = UnitDualQuat::from_rotation_translation(rot_x, trans_x)
            .expect("rotation about x is unit");
        match self.convention {
            DhConvention::Standard => (DualQuat::ONE, (zpart * xpart).as_dual_quat()),
            DhConvention::Modified => (xpart.as_dual_quat(), zpart.as_dual_quat()),
        }
    }

    fn joint_twist(kind: JointKind) -> DualQuat {
        let half_z = Quat::pure(0.0, 0.0, 0.5);
        match kind {
            JointKind::Revolute => DualQuat::new(half_z, Quat::ZERO),
            JointKind::Prismatic => DualQuat::new(Quat::ZERO, half_z),
            JointKind::Fixed => DualQuat::ZERO,
        }
    }

    /// End-effector pose in the robot base frame.
    pub fn fkm(&self, q: &DVector<f64>) -> Result<UnitDualQuat, KinError> {
        self.fkm_to(q, self.rows.len())
    }

    /// Pose of the frame after the first `upto` rows.
    pub fn fkm_to(&self, q: &DVector<f64>, upto: usize) -> Result<UnitDualQuat, KinError> {
        self.check_q(q)?;
        let mut x = DualQuat::ONE;
        let mut joint_idx = 0;
        for row in self.rows.iter().take(upto) {
            let q_i = if row.kind == JointKind::Fixed {
                0.0
            } else {
                let v = q[joint_idx];
                joint_idx += 1;
                v
            };
            let (l, m) = self.row_parts(row, q_i);
            x = x * l * m;
        }
        UnitDualQuat::normalize_pose(x)
            .map_err(|_| KinError::InvalidModel(String::from("degenerate chain product")))
    }

    /// All task Jacobians of the end-effector frame. The line-direction
    /// block differentiates the direction of the frame's z axis.
    pub fn pose_jacobian(&self, q: &DVector<f64>) -> Result<TaskJacobians, KinError> {
        self.pose_jacobian_to(q, self.rows.len())
    }

    /// Jacobians of the frame after the first `upto` rows; columns of
    /// joints at or beyond `upto` are zero.
    pub fn pose_jacobian_to(
        &self,
        q: &DVector<f64>,
        upto: usize,
    ) -> Result<TaskJacobians, KinError> {
        self.check_q(q)?;
        let n = self.n_joints();

        // Per-row (L, M) splits and joint values.
        let mut parts: Vec<(DualQuat, DualQuat)> = Vec::with_capacity(self.rows.len());
        let mut joint_idx = 0;
        for row in &self.rows {
            let q_i = if row.kind == JointKind::Fixed {
                0.0
            } else {
                let v = q[joint_idx];
                joint_idx += 1;
                v
            };
            parts.push(self.row_parts(row, q_i));
        }

        // Prefix products A_1…A_i and suffix products over the truncated
        // chain.
        let mut prefix: Vec<DualQuat> = Vec::with_capacity(upto + 1);
        prefix.push(DualQuat::ONE);
        for part in parts.iter().take(upto) {
            let a = part.0 * part.1;
            let last = *prefix.last().expect("non-empty");
            prefix.push(last * a);
        }
        let mut suffix: Vec<DualQuat> = alloc::vec![DualQuat::ONE; upto + 1];
        for i in (0..upto).rev() {
            let a = parts[i].0 * parts[i].1;
            suffix[i] = a * suffix[i + 1];
        }

        let pose = UnitDualQuat::new(prefix[upto])
            .or_else(|_| UnitDualQuat::normalize_pose(prefix[upto]))
            .map_err(|_| KinError::InvalidModel(String::from("degenerate chain product")))?;

        let mut j_pose = DMatrix::<f64>::zeros(8, n);
        let mut joint_idx = 0;
        for (i, row) in self.rows.iter().enumerate() {
            if row.kind == JointKind::Fixed {
                continue;
            }
            if i < upto {
                let (l, m) = parts[i];
                let twist = Self::joint_twist(row.kind);
                let col = prefix[i] * l * twist * m * suffix[i + 1];
                j_pose.set_column(joint_idx, &DVector::from_column_slice(col.as_vec8().as_slice()));
            }
            joint_idx += 1;
        }

        Ok(TaskJacobians::from_pose_jacobian(pose, j_pose, &Quat::pure(0.0, 0.0, 1.0)))
    }
}

/// Pose Jacobian of a chain plus the translation, rotation, and
/// line-direction blocks derived from it.
#[derive(Debug, Clone)]
pub struct TaskJacobians {
    /// Chain pose the Jacobians were evaluated at.
    pub pose: UnitDualQuat,
    /// 8×n block: `vec8(ẋ) = pose_jacobian · q̇`.
    pub pose_jacobian: DMatrix<f64>,
    /// 3×n block: velocity of the frame origin.
    pub translation: DMatrix<f64>,
    /// 4×n block: derivative of the rotation quaternion.
    pub rotation: DMatrix<f64>,
    /// 3×n block: derivative of the rotated axis direction.
    pub line_direction: DMatrix<f64>,
}

impl TaskJacobians {
    /// Derives all blocks from an 8×k pose Jacobian. `axis` is the pure
    /// unit quaternion (body frame) whose rotated direction the
    /// line-direction block differentiates.
    pub fn from_pose_jacobian(pose: UnitDualQuat, j_pose: DMatrix<f64>, axis: &Quat) -> Self {
        let rotation = rotation_block(&j_pose);
        let translation = translation_block(&pose, &j_pose);
        let line_direction = direction_block(&pose, axis, &j_pose);
        TaskJacobians { pose, pose_jacobian: j_pose, translation, rotation, line_direction }
    }
}

/// Rotation block: the top 4 rows of an 8×k pose Jacobian.
pub fn rotation_block(j_pose: &DMatrix<f64>) -> DMatrix<f64> {
    j_pose.rows(0, 4).into_owned()
}

/// Translation block of an 8×k pose Jacobian: with `t = 2 d p̄`,
/// `∂t/∂ξ = 2 (H⁻(p̄) J_dual + H⁺(d) C₄ J_primary)`, vector rows only.
pub fn translation_block(pose: &UnitDualQuat, j_pose: &DMatrix<f64>) -> DMatrix<f64> {
    let dq = pose.as_dual_quat();
    let p_conj = dq.primary.conj();
    let k = to_dmatrix(&haminus4(&p_conj)) * j_pose.rows(4, 4).into_owned()
        + to_dmatrix(&(hamiplus4(&dq.dual) * conj4())) * j_pose.rows(0, 4).into_owned();
    k.rows(1, 3).into_owned() * 2.0
}

/// Direction block of an 8×k pose Jacobian: with `l = p â p̄`,
/// `∂l/∂ξ = (H⁻(â p̄) + H⁺(p â) C₄) J_primary`, vector rows only.
pub fn direction_block(pose: &UnitDualQuat, axis: &Quat, j_pose: &DMatrix<f64>) -> DMatrix<f64> {
    let p = pose.rotation();
    let op = haminus4(&(*axis * p.conj())) + hamiplus4(&(p * *axis)) * conj4();
    let k = to_dmatrix(&op) * j_pose.rows(0, 4).into_owned();
    k.rows(1, 3).into_owned()
}

/// Pose Jacobian of `pre ⊗ x(ξ) ⊗ post` given the Jacobian of `x(ξ)`:
/// `J' = H⁺₈(pre) H⁻₈(post) J`.
pub fn transform_pose_jacobian(
    pre: &UnitDualQuat,
    post: &UnitDualQuat,
    j_pose: &DMatrix<f64>,
) -> DMatrix<f64> {
    let op = hamiplus8(&pre.as_dual_quat()) * haminus8(&post.as_dual_quat());
    to_dmatrix(&op) * j_pose
}

/// Row of the squared point-to-line distance `D = ‖p × l − m‖²` w.r.t.
/// the coordinates behind `j_trans` (line static): `Ḋ = row · ξ̇`.
pub fn dist_jacobian_point_line(
    j_trans: &DMatrix<f64>,
    p: &Quat,
    line: &PluckerLine,
) -> RowDVector<f64> {
    let e = p.cross(&line.direction) - line.moment;
    // dD = 2 eᵀ d(p×l) = 2 eᵀ (−skew(l)) dp, so ∇_p D = 2 skew(l) e.
    let grad_p = (skew(&line.direction.vector()) * e.vector()) * 2.0;
    RowDVector::from_iterator(
        j_trans.ncols(),
        (0..j_trans.ncols()).map(|c| {
            grad_p.x * j_trans[(0, c)] + grad_p.y * j_trans[(1, c)] + grad_p.z * j_trans[(2, c)]
        }),
    )
}

/// Row of the signed point-to-plane distance: `row = nᵀ J_trans`.
pub fn dist_jacobian_point_plane(j_trans: &DMatrix<f64>, plane: &Plane) -> RowDVector<f64> {
    let n = plane.normal.vector();
    RowDVector::from_iterator(
        j_trans.ncols(),
        (0..j_trans.ncols())
            .map(|c| n.x * j_trans[(0, c)] + n.y * j_trans[(1, c)] + n.z * j_trans[(2, c)]),
    )
}

/// Row of the line-angle distance `f = 2 − 2 ⟨l_n, c⟩` for a static axis:
/// `row = −2 cᵀ J_dir`. `f` is linear in the dot product, so the needle
/// direction enters only through the Jacobian evaluation point.
pub fn angle_jacobian_line_line(
    j_line_dir: &DMatrix<f64>,
    needle_dir: &Quat,
    axis_dir: &Quat,
) -> RowDVector<f64> {
    debug_assert!(needle_dir.is_unit(1e-6) && axis_dir.is_unit(1e-6));
    let c = axis_dir.vector();
    RowDVector::from_iterator(
        j_line_dir.ncols(),
        (0..j_line_dir.ncols()).map(|k| {
            -2.0 * (c.x * j_line_dir[(0, k)] + c.y * j_line_dir[(1, k)] + c.z * j_line_dir[(2, k)])
        }),
    )
}

/// Homogeneous matrix of one DH row (oracle path for tests and checks).
pub fn dh_row_homogeneous(convention: DhConvention, row: &DhRow, q_i: f64) -> Matrix4<f64> {
    let (theta, d) = match row.kind {
        JointKind::Revolute => (row.theta + q_i, row.d),
        JointKind::Prismatic => (row.theta, row.d + q_i),
        JointKind::Fixed => (row.theta, row.d),
    };
    let (st, ct) = (theta.sin(), theta.cos());
    let (sa, ca) = (row.alpha.sin(), row.alpha.cos());
    let mut rot_z = Matrix4::identity();
    rot_z[(0, 0)] = ct;
    rot_z[(0, 1)] = -st;
    rot_z[(1, 0)] = st;
    rot_z[(1, 1)] = ct;
    let mut rot_x = Matrix4::identity();
    rot_x[(1, 1)] = ca;
    rot_x[(1, 2)] = -sa;
    rot_x[(2, 1)] = sa;
    rot_x[(2, 2)] = ca;
    let mut trans_z = Matrix4::identity();
    trans_z[(2, 3)] = d;
    let mut trans_x = Matrix4::identity();
    trans_x[(0, 3)] = row.a;
    match convention {
        DhConvention::Standard => rot_z * trans_z * trans_x * rot_x,
        DhConvention::Modified => rot_x * trans_x * rot_z * trans_z,
    }
}

/// Built-in model tables for tests; the production model ships as a
/// versioned file next to the CLI.
#[cfg(any(test, feature = "fixtures"))]
pub mod test_models {
    use super::*;

    /// Seven-DoF arm in the modified DH convention with a fixed flange
    /// row; same table as the shipped default model file.
    pub fn panda() -> SerialManipulator {
        let rev = |a: f64, d: f64, alpha: f64| DhRow {
            kind: JointKind::Revolute,
            a,
            d,
            alpha,
            theta: 0.0,
        };
        let rows = alloc::vec![
            rev(0.0, 0.333, 0.0),
            rev(0.0, 0.0, -core::f64::consts::FRAC_PI_2),
            rev(0.0, 0.316, core::f64::consts::FRAC_PI_2),
            rev(0.0825, 0.0, core::f64::consts::FRAC_PI_2),
            rev(-0.0825, 0.384, -core::f64::consts::FRAC_PI_2),
            rev(0.0, 0.0, core::f64::consts::FRAC_PI_2),
            rev(0.088, 0.0, core::f64::consts::FRAC_PI_2),
            DhRow { kind: JointKind::Fixed, a: 0.0, d: 0.107, alpha: 0.0, theta: 0.0 },
        ];
        SerialManipulator::new(
            DhConvention::Modified,
            rows,
            DVector::from_vec(alloc::vec![
                -2.8973, -1.7628, -2.8973, -3.0718, -2.8973, -0.0175, -2.8973
            ]),
            DVector::from_vec(alloc::vec![2.8973, 1.7628, 2.8973, -0.0698, 2.8973, 3.7525, 2.8973]),
            DVector::from_vec(alloc::vec![2.175, 2.175, 2.175, 2.175, 2.61, 2.61, 2.61]),
        )
        .expect("valid model")
    }

    pub fn panda_home() -> DVector<f64> {
        DVector::from_vec(alloc::vec![
            0.0,
            -core::f64::consts::FRAC_PI_4,
            0.0,
            -3.0 * core::f64::consts::FRAC_PI_4,
            0.0,
            core::f64::consts::FRAC_PI_2,
            core::f64::consts::FRAC_PI_4,
        ])
    }

    pub fn random_q(robot: &SerialManipulator, rng: &mut impl rand::Rng) -> DVector<f64> {
        DVector::from_fn(robot.n_joints(), |i, _| rng.gen_range(robot.q_min()[i]..robot.q_max()[i]))
    }
}
