//! Rest-to-rest quintic time scaling along a straight segment.
//!
//! The normalized profile `s(τ) = 10τ³ − 15τ⁴ + 6τ⁵` satisfies
//! `s(0) = 0`, `s(1) = 1` with zero velocity and acceleration at both
//! ends, so the coefficients are universal and no boundary system needs
//! solving per segment.

use core::fmt;

use crate::geom::Quat;

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryError {
    NonPositiveDuration(f64),
    NegativeTime(f64),
    NonPureEndpoint,
}

impl fmt::Display for TrajectoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrajectoryError::NonPositiveDuration(t) => {
                write!(f, "segment duration must be > 0, got {t}")
            }
            TrajectoryError::NegativeTime(t) => write!(f, "negative sample time {t}"),
            TrajectoryError::NonPureEndpoint => write!(f, "endpoints must be pure quaternions"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrajectoryError {}

/// Straight-line segment from `start` to `end` traversed in `duration`
/// seconds with rest-to-rest quintic time scaling.
#[derive(Debug, Clone, Copy)]
pub struct QuinticSegment {
    start: Quat,
    end: Quat,
    duration: f64,
}

impl QuinticSegment {
    pub fn new(start: Quat, end: Quat, duration: f64) -> Result<Self, TrajectoryError> {
        if !(duration > 0.0) {
            return Err(TrajectoryError::NonPositiveDuration(duration));
        }
        if !start.is_pure(1e-12) || !end.is_pure(1e-12) {
            return Err(TrajectoryError::NonPureEndpoint);
        }
        Ok(QuinticSegment { start, end, duration })
    }

    pub fn start(&self) -> Quat {
        self.start
    }

    pub fn end(&self) -> Quat {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Desired position and velocity at time `t`; `t > duration` clamps
    /// to the rest state at the end point.
    pub fn eval(&self, t: f64) -> Result<(Quat, Quat), TrajectoryError> {
        if t < 0.0 {
            return Err(TrajectoryError::NegativeTime(t));
        }
        let tau = (t / self.duration).min(1.0);
        let s = tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau));
        let s_dot = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau) / self.duration;
        let span = self.end - self.start;
        let pos = self.start + span.scale(s);
        let vel = span.scale(s_dot);
        Ok((pos, vel))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn segment() -> QuinticSegment {
        QuinticSegment::new(Quat::pure(0.1, 0.2, 0.3), Quat::pure(0.4, -0.2, 0.9), 2.0).unwrap()
    }

    #[test]
    fn boundary_conditions() {
        let seg = segment();
        let (p0, v0) = seg.eval(0.0).unwrap();
        assert!((p0 - seg.start()).norm() < 1e-15);
        assert!(v0.norm() < 1e-15);
        let (p1, v1) = seg.eval(seg.duration()).unwrap();
        assert!((p1 - seg.end()).norm() < 1e-15);
        assert!(v1.norm() < 1e-15);
        // Clamp past the end.
        let (p2, v2) = seg.eval(10.0 * seg.duration()).unwrap();
        assert!((p2 - seg.end()).norm() < 1e-15);
        assert!(v2.norm() < 1e-15);
    }

    #[test]
    fn normalized_profile_identities() {
        // s(0)=0, s(1)=1, ṡ(0)=ṡ(1)=0, s̈(0)=s̈(1)=0 within 1e-12,
        // checked through a unit segment.
        let seg = QuinticSegment::new(Quat::ZERO, Quat::pure(1.0, 0.0, 0.0), 1.0).unwrap();
        let h = 1e-4;
        let acc = |t: f64| {
            let pm = seg.eval((t - h).max(0.0)).unwrap().0.x;
            let p0 = seg.eval(t).unwrap().0.x;
            let pp = seg.eval((t + h).min(1.0)).unwrap().0.x;
            (pp - 2.0 * p0 + pm) / (h * h)
        };
        assert_abs_diff_eq!(seg.eval(0.0).unwrap().0.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seg.eval(1.0).unwrap().0.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seg.eval(0.0).unwrap().1.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seg.eval(1.0).unwrap().1.x, 0.0, epsilon = 1e-12);
        // Second differences just inside the ends shrink like O(h).
        assert!(acc(h).abs() < 0.01);
        assert!(acc(1.0 - h).abs() < 0.01);
    }

    #[test]
    fn midpoint_and_peak_speed() {
        let seg = segment();
        let (p, v) = seg.eval(seg.duration() / 2.0).unwrap();
        let mid = (seg.start() + seg.end()).scale(0.5);
        assert!((p - mid).norm() < 1e-14);
        let span = (seg.end() - seg.start()).norm();
        // Peak of ṡ is 30/16 = 1.875 at τ = 1/2.
        assert_abs_diff_eq!(v.norm(), 1.875 * span / seg.duration(), epsilon = 1e-12);
    }

    #[test]
    fn velocity_matches_finite_difference() {
        let seg = segment();
        let h = 1e-6;
        let mut t = 0.05;
        while t < seg.duration() - h {
            let (_, v) = seg.eval(t).unwrap();
            let (pp, _) = seg.eval(t + h).unwrap();
            let (pm, _) = seg.eval(t - h).unwrap();
            let fd = (pp - pm).scale(1.0 / (2.0 * h));
            assert!((v - fd).norm() < 1e-6);
            t += 0.13;
        }
    }

    #[test]
    fn monotone_progress() {
        let seg = segment();
        let mut prev = 0.0;
        let mut t = 0.01;
        while t <= seg.duration() {
            let (p, _) = seg.eval(t).unwrap();
            let progress = (p - seg.start()).norm();
            assert!(progress >= prev - 1e-15);
            prev = progress;
            t += 0.01;
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(matches!(
            QuinticSegment::new(Quat::ZERO, Quat::ZERO, 0.0),
            Err(TrajectoryError::NonPositiveDuration(_))
        ));
        assert!(matches!(
            segment().eval(-0.1),
            Err(TrajectoryError::NegativeTime(_))
        ));
        assert!(matches!(
            QuinticSegment::new(Quat::new(1.0, 0.0, 0.0, 0.0), Quat::ZERO, 1.0),
            Err(TrajectoryError::NonPureEndpoint)
        ));
    }
}
