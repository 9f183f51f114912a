//! Quaternion and dual-quaternion algebra plus the geometric primitives
//! used as constraint zones.
//!
//! Conventions used throughout the crate:
//!
//! - Quaternion coefficients are stored in `w, x, y, z` order (scalar
//!   first). A *pure* quaternion has `w = 0` and represents a 3D point,
//!   direction, or moment. Cross products are right-handed.
//! - A rigid pose is the unit dual quaternion `x = r + (ε/2) t r`, where
//!   `r` is a unit rotation quaternion and `t` a pure translation in
//!   meters, both expressed in the parent frame.
//! - An 8-vector view of a dual quaternion is
//!   `[p.w, p.x, p.y, p.z, d.w, d.x, d.y, d.z]`.
//! - Angles are radians everywhere inside the library; degrees appear only
//!   at CLI and report boundaries.
//!
//! Constructed values are validated against a unit-norm tolerance of
//! `1e-10`; poses produced by numerical integration can be repaired with
//! [`UnitDualQuat::normalize_pose`].

use core::fmt;
use core::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, Matrix4, SMatrix, SVector, Vector3};

/// Fixed-size 8-vector used for dual-quaternion coefficient views.
pub type Vector8 = SVector<f64, 8>;
// Supplies sqrt/sin/cos/... on f64 in no_std builds; inherent methods win
// when std is enabled.
#[allow(unused_imports)]
use num_traits::Float;

/// Unit-norm tolerance for constructed rotations, directions, and poses.
pub const UNIT_TOL: f64 = 1e-10;

/// Errors from constructing or normalizing geometric values.
#[derive(Debug, Clone, PartialEq)]
pub enum GeomError {
    /// A direction that must be unit length was not (actual norm given).
    NonUnitDirection(f64),
    /// A value that must be a pure quaternion had a nonzero scalar part.
    NonPureQuaternion(f64),
    /// A Plücker moment was not orthogonal to its direction.
    NonOrthogonalMoment(f64),
    /// The primary part of a pose had (near-)zero norm.
    DegeneratePose,
    /// A pose failed the unit dual quaternion invariants.
    NonUnitPose { primary_norm: f64, orthogonality: f64 },
    /// A cylinder radius was not strictly positive.
    InvalidRadius(f64),
    /// A cone half-angle was outside (0, π/2).
    InvalidHalfAngle(f64),
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::NonUnitDirection(n) => write!(f, "direction is not unit length (norm {n})"),
            GeomError::NonPureQuaternion(w) => write!(f, "expected pure quaternion, scalar part {w}"),
            GeomError::NonOrthogonalMoment(d) => write!(f, "moment not orthogonal to direction (dot {d})"),
            GeomError::DegeneratePose => write!(f, "pose primary part has zero norm"),
            GeomError::NonUnitPose { primary_norm, orthogonality } => write!(
                f,
                "not a unit dual quaternion (primary norm {primary_norm}, <p,d> {orthogonality})"
            ),
            GeomError::InvalidRadius(r) => write!(f, "cylinder radius must be positive, got {r}"),
            GeomError::InvalidHalfAngle(a) => {
                write!(f, "cone half-angle must lie in (0, pi/2), got {a}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GeomError {}

/// Quaternion with coefficients `w + x î + y ĵ + z k̂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const ZERO: Quat = Quat { w: 0.0, x: 0.0, y: 0.0, z: 0.0 };
    pub const ONE: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    /// Pure quaternion from 3D components (`w = 0`).
    pub fn pure(x: f64, y: f64, z: f64) -> Self {
        Quat { w: 0.0, x, y, z }
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Quat::pure(v.x, v.y, v.z)
    }

    /// Vector (imaginary) part.
    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn conj(&self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn is_pure(&self, tol: f64) -> bool {
        self.w.abs() <= tol
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm_sq() - 1.0).abs() <= tol
    }

    /// Normalized copy; errors on (near-)zero norm.
    pub fn normalized(&self) -> Result<Quat, GeomError> {
        let n = self.norm();
        if n <= f64::EPSILON {
            return Err(GeomError::DegeneratePose);
        }
        Ok(self.scale(1.0 / n))
    }

    /// Cross product of the vector parts, returned as a pure quaternion.
    pub fn cross(&self, other: &Quat) -> Quat {
        Quat::pure(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    /// Unit rotation quaternion from a rotation vector (axis times angle).
    pub fn exp_rotation(rotvec: Vector3<f64>) -> Quat {
        let angle = rotvec.norm();
        if angle < 1e-300 {
            return Quat::ONE;
        }
        let half = 0.5 * angle;
        let k = half.sin() / angle;
        Quat::new(half.cos(), rotvec.x * k, rotvec.y * k, rotvec.z * k)
    }

    /// Rotation vector of a unit quaternion (inverse of [`Quat::exp_rotation`]).
    /// Returns the representative with angle in [0, π].
    pub fn log_rotation(&self) -> Vector3<f64> {
        let q = if self.w < 0.0 { self.scale(-1.0) } else { *self };
        let v = q.vector();
        let vn = v.norm();
        if vn < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * vn.atan2(q.w);
        v * (angle / vn)
    }

    /// Shortest-arc unit rotation mapping the unit direction `from` onto `to`.
    pub fn rotation_between(from: &Quat, to: &Quat) -> Quat {
        let f = from.vector();
        let t = to.vector();
        let c = f.dot(&t);
        if c < -1.0 + 1e-12 {
            // Antiparallel: rotate π about any axis orthogonal to `from`.
            let axis = orthonormal_to(&f);
            return Quat::new(0.0, axis.x, axis.y, axis.z);
        }
        let axis = f.cross(&t);
        let q = Quat::new(1.0 + c, axis.x, axis.y, axis.z);
        q.normalized().unwrap_or(Quat::ONE)
    }

    /// Rotates a pure quaternion by this unit rotation: `q p q*`.
    pub fn rotate(&self, p: &Quat) -> Quat {
        *self * *p * self.conj()
    }

    pub fn as_vec4(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

fn orthonormal_to(v: &Vector3<f64>) -> Vector3<f64> {
    let candidate = if v.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let o = v.cross(&candidate);
    o / o.norm()
}

impl Add for Quat {
    type Output = Quat;
    fn add(self, o: Quat) -> Quat {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Quat {
    type Output = Quat;
    fn sub(self, o: Quat) -> Quat {
        Quat::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        self.scale(-1.0)
    }
}

impl Mul for Quat {
    type Output = Quat;
    /// Hamilton product.
    fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

/// Dual quaternion `primary + ε dual` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuat {
    pub primary: Quat,
    pub dual: Quat,
}

impl DualQuat {
    pub const ZERO: DualQuat = DualQuat { primary: Quat::ZERO, dual: Quat::ZERO };
    pub const ONE: DualQuat = DualQuat { primary: Quat::ONE, dual: Quat::ZERO };

    pub fn new(primary: Quat, dual: Quat) -> Self {
        DualQuat { primary, dual }
    }

    /// Dual-quaternion conjugate (quaternion conjugate of both parts).
    pub fn conj(&self) -> Self {
        DualQuat::new(self.primary.conj(), self.dual.conj())
    }

    pub fn scale(&self, s: f64) -> Self {
        DualQuat::new(self.primary.scale(s), self.dual.scale(s))
    }

    pub fn as_vec8(&self) -> Vector8 {
        Vector8::from_column_slice(&[
            self.primary.w,
            self.primary.x,
            self.primary.y,
            self.primary.z,
            self.dual.w,
            self.dual.x,
            self.dual.y,
            self.dual.z,
        ])
    }

    pub fn from_vec8(v: &Vector8) -> Self {
        DualQuat::new(Quat::new(v[0], v[1], v[2], v[3]), Quat::new(v[4], v[5], v[6], v[7]))
    }
}

impl Add for DualQuat {
    type Output = DualQuat;
    fn add(self, o: DualQuat) -> DualQuat {
        DualQuat::new(self.primary + o.primary, self.dual + o.dual)
    }
}

impl Sub for DualQuat {
    type Output = DualQuat;
    fn sub(self, o: DualQuat) -> DualQuat {
        DualQuat::new(self.primary - o.primary, self.dual - o.dual)
    }
}

impl Mul for DualQuat {
    type Output = DualQuat;
    /// Product honoring `ε² = 0`: the dual part of a product never feeds
    /// back into the primary part.
    fn mul(self, o: DualQuat) -> DualQuat {
        DualQuat::new(
            self.primary * o.primary,
            self.primary * o.dual + self.dual * o.primary,
        )
    }
}

/// Hamilton product of two dual quaternions (operator form of `a * b`).
pub fn dq_mul(a: DualQuat, b: DualQuat) -> DualQuat {
    a * b
}

/// Rigid pose as a unit dual quaternion `x = r + (ε/2) t r`.
///
/// `rotation()` is a unit quaternion and `translation()` the pure
/// translation quaternion in the parent frame; both invariants
/// (`‖primary‖ = 1`, `⟨primary, dual⟩ = 0`) are validated on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitDualQuat(DualQuat);

impl UnitDualQuat {
    pub fn identity() -> Self {
        UnitDualQuat(DualQuat::ONE)
    }

    /// Validates the unit invariants at tolerance [`UNIT_TOL`].
    pub fn new(dq: DualQuat) -> Result<Self, GeomError> {
        let pn = dq.primary.norm();
        let ortho = dq.primary.dot(&dq.dual);
        if (pn - 1.0).abs() > UNIT_TOL || ortho.abs() > UNIT_TOL {
            return Err(GeomError::NonUnitPose { primary_norm: pn, orthogonality: ortho });
        }
        Ok(UnitDualQuat(dq))
    }

    /// Pose from a unit rotation `r` and pure translation `t` in the
    /// parent frame: `x = r + (ε/2) t r`.
    pub fn from_rotation_translation(r: Quat, t: Quat) -> Result<Self, GeomError> {
        if !r.is_unit(UNIT_TOL) {
            return Err(GeomError::NonUnitDirection(r.norm()));
        }
        if !t.is_pure(UNIT_TOL) {
            return Err(GeomError::NonPureQuaternion(t.w));
        }
        Ok(UnitDualQuat(DualQuat::new(r, (t * r).scale(0.5))))
    }

    /// Pure translation pose.
    pub fn from_translation(t: Quat) -> Result<Self, GeomError> {
        Self::from_rotation_translation(Quat::ONE, t)
    }

    /// Pure rotation pose.
    pub fn from_rotation(r: Quat) -> Result<Self, GeomError> {
        Self::from_rotation_translation(r, Quat::ZERO)
    }

    pub fn as_dual_quat(&self) -> DualQuat {
        self.0
    }

    pub fn as_vec8(&self) -> Vector8 {
        self.0.as_vec8()
    }

    /// Unit rotation part.
    pub fn rotation(&self) -> Quat {
        self.0.primary
    }

    /// Pure translation part `t = 2 d p*`.
    pub fn translation(&self) -> Quat {
        let t = (self.0.dual * self.0.primary.conj()).scale(2.0);
        // Orthogonality of primary and dual makes t pure up to rounding.
        Quat::pure(t.x, t.y, t.z)
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.translation().vector()
    }

    /// Rigid inverse.
    pub fn inverse(&self) -> UnitDualQuat {
        UnitDualQuat(self.0.conj())
    }

    /// Applies the rigid transform to a point (pure quaternion):
    /// `p' = r p r* + t`.
    pub fn transform_point(&self, p: &Quat) -> Quat {
        let rotated = self.rotation().rotate(p);
        let t = self.translation();
        Quat::pure(rotated.x + t.x, rotated.y + t.y, rotated.z + t.z)
    }

    /// Applies the rotation part only (for directions).
    pub fn transform_direction(&self, l: &Quat) -> Quat {
        let r = self.rotation().rotate(l);
        Quat::pure(r.x, r.y, r.z)
    }

    /// Transforms a Plücker line: direction rotates, moment picks up the
    /// translation term `m' = r m r* + t × l'`.
    pub fn transform_line(&self, line: &PluckerLine) -> PluckerLine {
        let dir = self.transform_direction(&line.direction);
        let rotated_moment = self.transform_direction(&line.moment);
        let moment = rotated_moment + self.translation().cross(&dir);
        PluckerLine { direction: dir, moment }
    }

    /// Projects an arbitrary dual quaternion onto the unit manifold:
    /// normalize the primary part, then remove the component of the dual
    /// part along the primary.
    pub fn normalize_pose(dq: DualQuat) -> Result<UnitDualQuat, GeomError> {
        let pn = dq.primary.norm();
        if pn <= 1e-12 {
            return Err(GeomError::DegeneratePose);
        }
        let primary = dq.primary.scale(1.0 / pn);
        let mut dual = dq.dual.scale(1.0 / pn);
        let c = primary.dot(&dual);
        dual = dual - primary.scale(c);
        Ok(UnitDualQuat(DualQuat::new(primary, dual)))
    }

    /// Equivalent 4×4 homogeneous matrix (column-convention, point on the
    /// right).
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let r = self.rotation();
        let t = self.translation_vector();
        let (w, x, y, z) = (r.w, r.x, r.y, r.z);
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.0 - 2.0 * (y * y + z * z);
        m[(0, 1)] = 2.0 * (x * y - w * z);
        m[(0, 2)] = 2.0 * (x * z + w * y);
        m[(1, 0)] = 2.0 * (x * y + w * z);
        m[(1, 1)] = 1.0 - 2.0 * (x * x + z * z);
        m[(1, 2)] = 2.0 * (y * z - w * x);
        m[(2, 0)] = 2.0 * (x * z - w * y);
        m[(2, 1)] = 2.0 * (y * z + w * x);
        m[(2, 2)] = 1.0 - 2.0 * (x * x + y * y);
        m[(0, 3)] = t.x;
        m[(1, 3)] = t.y;
        m[(2, 3)] = t.z;
        m
    }
}

impl Mul for UnitDualQuat {
    type Output = UnitDualQuat;
    fn mul(self, o: UnitDualQuat) -> UnitDualQuat {
        UnitDualQuat(self.0 * o.0)
    }
}

/// Line in Plücker coordinates: unit direction `l` and moment `m = p × l`
/// for any point `p` on the line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerLine {
    pub direction: Quat,
    pub moment: Quat,
}

impl PluckerLine {
    /// Validates `‖l‖ = 1` and `⟨l, m⟩ = 0` at tolerance [`UNIT_TOL`].
    pub fn new(direction: Quat, moment: Quat) -> Result<Self, GeomError> {
        if !direction.is_unit(UNIT_TOL) || !direction.is_pure(UNIT_TOL) {
            return Err(GeomError::NonUnitDirection(direction.norm()));
        }
        if !moment.is_pure(UNIT_TOL) {
            return Err(GeomError::NonPureQuaternion(moment.w));
        }
        let d = direction.dot(&moment);
        if d.abs() > UNIT_TOL {
            return Err(GeomError::NonOrthogonalMoment(d));
        }
        Ok(PluckerLine { direction, moment })
    }

    /// Line through point `p` with unit direction `l`: moment `m = p × l`.
    pub fn from_point_direction(p: &Quat, l: &Quat) -> Result<Self, GeomError> {
        if !l.is_unit(UNIT_TOL) || !l.is_pure(UNIT_TOL) {
            return Err(GeomError::NonUnitDirection(l.norm()));
        }
        if !p.is_pure(UNIT_TOL) {
            return Err(GeomError::NonPureQuaternion(p.w));
        }
        Ok(PluckerLine { direction: *l, moment: p.cross(l) })
    }

    /// A point on the line (the foot of the perpendicular from the origin).
    pub fn closest_point_to_origin(&self) -> Quat {
        self.direction.cross(&self.moment)
    }
}

/// Alias matching the constructor-style operation name.
pub fn line_from_point_direction(p: &Quat, l: &Quat) -> Result<PluckerLine, GeomError> {
    PluckerLine::from_point_direction(p, l)
}

/// Oriented plane with unit normal `n` and offset `d`; points `p` on the
/// plane satisfy `p·n = d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Quat,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Quat, offset: f64) -> Result<Self, GeomError> {
        if !normal.is_unit(UNIT_TOL) || !normal.is_pure(UNIT_TOL) {
            return Err(GeomError::NonUnitDirection(normal.norm()));
        }
        Ok(Plane { normal, offset })
    }

    /// Plane through `point` with unit normal `normal`.
    pub fn from_point_normal(point: &Quat, normal: &Quat) -> Result<Self, GeomError> {
        let d = point.vector().dot(&normal.vector());
        Plane::new(*normal, d)
    }
}

/// Infinite cylinder around a Plücker axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder {
    pub axis: PluckerLine,
    pub radius: f64,
}

impl Cylinder {
    pub fn new(axis: PluckerLine, radius: f64) -> Result<Self, GeomError> {
        if !(radius > 0.0) {
            return Err(GeomError::InvalidRadius(radius));
        }
        Ok(Cylinder { axis, radius })
    }
}

/// Infinite cone around a Plücker axis with half-angle in (0, π/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cone {
    pub axis: PluckerLine,
    pub half_angle: f64,
}

impl Cone {
    pub fn new(axis: PluckerLine, half_angle: f64) -> Result<Self, GeomError> {
        if !(half_angle > 0.0 && half_angle < core::f64::consts::FRAC_PI_2) {
            return Err(GeomError::InvalidHalfAngle(half_angle));
        }
        Ok(Cone { axis, half_angle })
    }

    /// Angle-distance value of the half-angle: `f(θ) = 2 − 2 cos θ`.
    pub fn half_angle_f(&self) -> f64 {
        2.0 - 2.0 * self.half_angle.cos()
    }
}

/// Squared Euclidean distance between a point and a line:
/// `D = ‖p × l − m‖²`.
pub fn sq_dist_point_line(p: &Quat, line: &PluckerLine) -> f64 {
    (p.cross(&line.direction) - line.moment).norm_sq()
}

/// Signed Euclidean distance from a point to a plane; positive on the
/// side the normal points to.
pub fn signed_dist_point_plane(p: &Quat, plane: &Plane) -> f64 {
    p.vector().dot(&plane.normal.vector()) - plane.offset
}

/// Angle φ ∈ [0, π] between two unit directions and the line-angle
/// distance `f(φ) = 2 − 2 cos φ ∈ [0, 4]`, continuous and strictly
/// increasing in φ.
pub fn line_angle(l_a: &Quat, l_b: &Quat) -> (f64, f64) {
    let c = l_a.vector().dot(&l_b.vector()).clamp(-1.0, 1.0);
    (c.acos(), 2.0 - 2.0 * c)
}

/// Angle between two unit directions (first component of [`line_angle`]).
pub fn angle_between(l_a: &Quat, l_b: &Quat) -> f64 {
    line_angle(l_a, l_b).0
}

// ---------------------------------------------------------------------------
// Hamilton operators: matrix forms of left/right quaternion multiplication,
// used to push Jacobians through products.
// ---------------------------------------------------------------------------

/// `vec4(q ⊗ r) = hamiplus4(q) · vec4(r)`.
pub fn hamiplus4(q: &Quat) -> SMatrix<f64, 4, 4> {
    SMatrix::<f64, 4, 4>::from_row_slice(&[
        q.w, -q.x, -q.y, -q.z, //
        q.x, q.w, -q.z, q.y, //
        q.y, q.z, q.w, -q.x, //
        q.z, -q.y, q.x, q.w,
    ])
}

/// `vec4(q ⊗ r) = haminus4(r) · vec4(q)`.
pub fn haminus4(q: &Quat) -> SMatrix<f64, 4, 4> {
    SMatrix::<f64, 4, 4>::from_row_slice(&[
        q.w, -q.x, -q.y, -q.z, //
        q.x, q.w, q.z, -q.y, //
        q.y, -q.z, q.w, q.x, //
        q.z, q.y, -q.x, q.w,
    ])
}

/// Matrix of quaternion conjugation on 4-vectors: `diag(1, −1, −1, −1)`.
pub fn conj4() -> SMatrix<f64, 4, 4> {
    SMatrix::<f64, 4, 4>::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, -1.0))
}

/// `vec8(a ⊗ b) = hamiplus8(a) · vec8(b)`.
pub fn hamiplus8(dq: &DualQuat) -> SMatrix<f64, 8, 8> {
    let mut m = SMatrix::<f64, 8, 8>::zeros();
    let p = hamiplus4(&dq.primary);
    let d = hamiplus4(&dq.dual);
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(&p);
    m.fixed_view_mut::<4, 4>(4, 4).copy_from(&p);
    m.fixed_view_mut::<4, 4>(4, 0).copy_from(&d);
    m
}

/// `vec8(a ⊗ b) = haminus8(b) · vec8(a)`.
pub fn haminus8(dq: &DualQuat) -> SMatrix<f64, 8, 8> {
    let mut m = SMatrix::<f64, 8, 8>::zeros();
    let p = haminus4(&dq.primary);
    let d = haminus4(&dq.dual);
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(&p);
    m.fixed_view_mut::<4, 4>(4, 4).copy_from(&p);
    m.fixed_view_mut::<4, 4>(4, 0).copy_from(&d);
    m
}

/// Skew-symmetric cross-product matrix: `skew(v) u = v × u`.
pub fn skew(v: &Vector3<f64>) -> SMatrix<f64, 3, 3> {
    SMatrix::<f64, 3, 3>::from_row_slice(&[
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    ])
}

/// Stacks the columns of `m` into a dynamically sized matrix (helper for
/// mixing fixed-size operators with dynamic Jacobians).
pub fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}
