//! Dense solver for small strictly convex quadratic programs
//!
//! ```text
//!     minimize   1/2 uᵀ H u + gᵀ u
//!     subject to A u ⪯ b
//! ```
//!
//! solved exactly with a dual active-set method (Goldfarb-Idnani family):
//! start from the unconstrained minimizer, repeatedly add the most
//! violated constraint, and take the dual steps that keep the working-set
//! multipliers nonnegative. Strict convexity makes every subproblem a
//! plain linear solve; problems here are tiny (n ≤ 12, ℓ ≤ 64), so each
//! step refactors from scratch instead of maintaining incremental
//! decompositions.
//!
//! Infeasibility is detected and surfaced, never silently relaxed.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
#[allow(unused_imports)]
use num_traits::Float;

/// Feasibility tolerance on returned solutions: `A u* ≤ b + FEAS_TOL`.
pub const FEAS_TOL: f64 = 1e-8;
/// Stationarity and complementarity tolerance of the KKT certificate.
pub const STAT_TOL: f64 = 1e-7;

// Internal thresholds, well below the certificate tolerances.
const VIOLATION_TOL: f64 = 1e-11;
const DEPENDENT_TOL: f64 = 1e-13;

/// Errors for structurally invalid problems or numerical breakdown.
#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    DimensionMismatch,
    NotSymmetric(f64),
    NotPositiveDefinite,
    /// Iteration safeguard tripped; should not occur for well-posed
    /// strictly convex inputs.
    NumericalFailure,
    InvalidDamping(f64),
}

impl fmt::Display for QpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QpError::DimensionMismatch => write!(f, "inconsistent problem dimensions"),
            QpError::NotSymmetric(e) => write!(f, "hessian asymmetry {e} exceeds tolerance"),
            QpError::NotPositiveDefinite => write!(f, "hessian is not positive definite"),
            QpError::NumericalFailure => write!(f, "active-set iteration failed to converge"),
            QpError::InvalidDamping(l) => write!(f, "damping factor must be > 0, got {l}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for QpError {}

/// Strictly convex QP with linear inequality rows.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Validates dimensions and symmetry (within `1e-10`).
    pub fn new(
        hessian: DMatrix<f64>,
        gradient: DVector<f64>,
        ineq_matrix: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n || gradient.len() != n {
            return Err(QpError::DimensionMismatch);
        }
        if ineq_matrix.nrows() != ineq_rhs.len() {
            return Err(QpError::DimensionMismatch);
        }
        if ineq_matrix.nrows() > 0 && ineq_matrix.ncols() != n {
            return Err(QpError::DimensionMismatch);
        }
        let asym = (&hessian - hessian.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(QpProblem { hessian, gradient, ineq_matrix, ineq_rhs })
    }

    pub fn n_vars(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * (u.transpose() * &self.hessian * u)[(0, 0)] + self.gradient.dot(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// Solver output; `duals` holds one multiplier per constraint row
/// (zero off the active set).
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub duals: DVector<f64>,
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
    pub status: QpStatus,
}

/// Builds the damped least-squares QP
/// `min ‖J u + e‖² + λ²‖u‖²  s.t.  A u ⪯ b`,
/// expanded as `H = 2(JᵀJ + λ²I)`, `g = 2 Jᵀ e`.
pub fn build_damped_ls_qp(
    task_matrix: &DMatrix<f64>,
    task_error: &DVector<f64>,
    damping: f64,
    ineq_matrix: DMatrix<f64>,
    ineq_rhs: DVector<f64>,
) -> Result<QpProblem, QpError> {
    if !(damping > 0.0) {
        return Err(QpError::InvalidDamping(damping));
    }
    if task_matrix.nrows() != task_error.len() {
        return Err(QpError::DimensionMismatch);
    }
    let n = task_matrix.ncols();
    let mut hessian = task_matrix.transpose() * task_matrix;
    for i in 0..n {
        hessian[(i, i)] += damping * damping;
    }
    hessian *= 2.0;
    // Exact symmetry despite rounding in the Gram product.
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let gradient = task_matrix.transpose() * task_error * 2.0;
    QpProblem::new(hessian, gradient, ineq_matrix, ineq_rhs)
}

/// Solves a strictly convex inequality-constrained QP exactly.
///
/// Deterministic for identical inputs: ties in the most-violated
/// selection break toward the lowest row index.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    let n = problem.n_vars();
    let m = problem.n_constraints();
    let chol: Cholesky<f64, Dyn> = Cholesky::new(problem.hessian.clone())
        .ok_or(QpError::NotPositiveDefinite)?;

    // Unconstrained minimizer.
    let mut x = chol.solve(&(-&problem.gradient));
    let mut duals = DVector::<f64>::zeros(m);
    let mut active: Vec<usize> = Vec::new();
    // Cached H⁻¹ aᵢᵀ columns for the active set.
    let mut hinv_normals: Vec<DVector<f64>> = Vec::new();

    if m == 0 {
        let kkt = check_kkt_parts(problem, &x, &duals).max_residual();
        return Ok(QpSolution {
            primal: x,
            duals,
            active_set: active,
            kkt_residual: kkt,
            status: QpStatus::Optimal,
        });
    }

    // Normals of the ≥ form: nᵢ = −aᵢ, slack sᵢ = bᵢ − aᵢᵀx ≥ 0.
    let row_normal = |i: usize| -> DVector<f64> {
        -problem.ineq_matrix.row(i).transpose()
    };

    let max_iter = 50 + 10 * (m + n);
    let mut iter = 0;

    'outer: loop {
        // Most violated constraint among the inactive ones.
        let mut worst = -VIOLATION_TOL;
        let mut p: Option<usize> = None;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let slack = problem.ineq_rhs[i] - problem.ineq_matrix.row(i).dot(&x.transpose());
            if slack < worst {
                worst = slack;
                p = Some(i);
            }
        }
        let p = match p {
            Some(i) => i,
            None => {
                let kkt = check_kkt_parts(problem, &x, &duals).max_residual();
                active.sort_unstable();
                return Ok(QpSolution {
                    primal: x,
                    duals,
                    active_set: active,
                    kkt_residual: kkt,
                    status: QpStatus::Optimal,
                });
            }
        };

        let n_plus = row_normal(p);
        let hinv_nplus = chol.solve(&n_plus);
        let mut lambda_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::NumericalFailure);
            }

            // Dual direction r = (NᵀH⁻¹N)⁻¹ NᵀH⁻¹ n⁺ and primal
            // direction z = H⁻¹ n⁺ − H⁻¹ N r.
            let k = active.len();
            let (z, r) = if k == 0 {
                (hinv_nplus.clone(), DVector::zeros(0))
            } else {
                let mut gram = DMatrix::<f64>::zeros(k, k);
                let mut w = DVector::<f64>::zeros(k);
                for (a_idx, &i) in active.iter().enumerate() {
                    let ni = row_normal(i);
                    w[a_idx] = ni.dot(&hinv_nplus);
                    for (b_idx, hin) in hinv_normals.iter().enumerate() {
                        gram[(a_idx, b_idx)] = ni.dot(hin);
                    }
                }
                let r = gram
                    .lu()
                    .solve(&w)
                    .ok_or(QpError::NumericalFailure)?;
                let mut z = hinv_nplus.clone();
                for (b_idx, hin) in hinv_normals.iter().enumerate() {
                    z -= hin * r[b_idx];
                }
                (z, r)
            };

            // Partial (dual) step length.
            let mut t1 = f64::INFINITY;
            let mut blocking: Option<usize> = None;
            for (a_idx, &i) in active.iter().enumerate() {
                if r[a_idx] > DEPENDENT_TOL {
                    let step = duals[i] / r[a_idx];
                    if step < t1 {
                        t1 = step;
                        blocking = Some(a_idx);
                    }
                }
            }

            // Full (primal) step length.
            let denom = z.dot(&n_plus);
            let slack_p = problem.ineq_rhs[p] - problem.ineq_matrix.row(p).dot(&x.transpose());
            let scale = hinv_nplus.dot(&n_plus).abs().max(1e-300);
            let t2 = if denom > DEPENDENT_TOL * scale {
                -slack_p / denom
            } else {
                f64::INFINITY
            };

            let t = t1.min(t2);
            if !t.is_finite() {
                // No step can restore feasibility of row p.
                active.sort_unstable();
                return Ok(QpSolution {
                    primal: x,
                    duals: DVector::zeros(m),
                    active_set: active,
                    kkt_residual: f64::INFINITY,
                    status: QpStatus::Infeasible,
                });
            }

            // Dual update (and primal when t2 is finite and chosen).
            for (a_idx, &i) in active.iter().enumerate() {
                duals[i] -= t * r[a_idx];
            }
            lambda_p += t;

            if t2.is_finite() && t == t2 {
                x += &z * t;
                duals[p] = lambda_p;
                active.push(p);
                hinv_normals.push(hinv_nplus.clone());
                continue 'outer;
            }

            if t2.is_finite() {
                x += &z * t;
            }
            // Drop the blocking constraint and retry with the same p.
            let a_idx = blocking.expect("finite t1 implies a blocking index");
            let dropped = active.remove(a_idx);
            hinv_normals.remove(a_idx);
            duals[dropped] = 0.0;
        }
    }
}

/// Per-part KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub primal_feasibility: f64,
    pub dual_feasibility: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max_residual(&self) -> f64 {
        self.primal_feasibility
            .max(self.dual_feasibility)
            .max(self.stationarity)
            .max(self.complementarity)
    }
}

fn check_kkt_parts(problem: &QpProblem, u: &DVector<f64>, duals: &DVector<f64>) -> KktResiduals {
    let m = problem.n_constraints();
    let mut primal: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut compl: f64 = 0.0;
    for i in 0..m {
        let slack = problem.ineq_matrix.row(i).dot(&u.transpose()) - problem.ineq_rhs[i];
        primal = primal.max(slack);
        dual = dual.max(-duals[i]);
        compl = compl.max((duals[i] * slack).abs());
    }
    let stat = (&problem.hessian * u
        + &problem.gradient
        + problem.ineq_matrix.transpose() * duals)
        .abs()
        .max();
    KktResiduals {
        primal_feasibility: primal.max(0.0),
        dual_feasibility: dual.max(0.0),
        stationarity: stat,
        complementarity: compl,
    }
}

/// Maximum KKT residual of a solution (primal/dual feasibility,
/// stationarity, complementary slackness).
pub fn check_kkt(problem: &QpProblem, solution: &QpSolution) -> f64 {
    check_kkt_parts(problem, &solution.primal, &solution.duals).max_residual()
}

/// Instance generation and an exhaustive reference solver, shared by unit
/// tests, the self-check command, and the acceptance suite.
pub mod test_support {
    use super::*;
    use rand::Rng;

    /// Random strictly convex instance; the flag reports whether the
    /// constraints are feasible by construction.
    pub fn random_instance(
        rng: &mut impl Rng,
        n: usize,
        n_rows: usize,
    ) -> (QpProblem, bool) {
        let m_mat = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut hessian = &m_mat * m_mat.transpose();
        let jitter = rng.gen_range(0.1..1.0);
        for i in 0..n {
            hessian[(i, i)] += jitter;
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let gradient = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let mut ineq = DMatrix::<f64>::from_fn(n_rows, n, |_, _| rng.gen_range(-1.0..1.0));
        let anchor = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let mut rhs = DVector::zeros(n_rows);
        let feasible = rng.gen_bool(0.8);
        for i in 0..n_rows {
            let margin: f64 = rng.gen_range(-0.3..1.0);
            rhs[i] = ineq.row(i).dot(&anchor.transpose()) + margin.abs();
        }
        if !feasible && n_rows >= 2 {
            // Contradictory pair: a·u ≤ −1 and −a·u ≤ −1.
            let dir = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            ineq.set_row(0, &dir.transpose());
            rhs[0] = -1.0;
            ineq.set_row(1, &(-&dir).transpose());
            rhs[1] = -1.0;
        }
        (QpProblem::new(hessian, gradient, ineq, rhs).expect("valid instance"), feasible)
    }

    /// Exhaustive active-set enumeration: solves the equality-constrained
    /// KKT system for every candidate working set and keeps the best
    /// point satisfying primal and dual feasibility. Independent of the
    /// production solver path. `None` means no feasible candidate.
    pub fn enumerate_optimum(problem: &QpProblem) -> Option<DVector<f64>> {
        let n = problem.n_vars();
        let m = problem.n_constraints();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let subsets: u64 = 1 << m;
        for mask in 0..subsets {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if rows.len() > n {
                continue;
            }
            let k = rows.len();
            let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
            for (j, &i) in rows.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + j, c)] = problem.ineq_matrix[(i, c)];
                    kkt[(c, n + j)] = problem.ineq_matrix[(i, c)];
                }
            }
            let mut rhs = DVector::<f64>::zeros(n + k);
            for c in 0..n {
                rhs[c] = -problem.gradient[c];
            }
            for (j, &i) in rows.iter().enumerate() {
                rhs[n + j] = problem.ineq_rhs[i];
            }
            let sol = match kkt.lu().solve(&rhs) {
                Some(s) => s,
                None => continue,
            };
            let u = sol.rows(0, n).into_owned();
            let lambda = sol.rows(n, k).into_owned();
            if lambda.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let feasible = (0..m).all(|i| {
                problem.ineq_matrix.row(i).dot(&u.transpose()) <= problem.ineq_rhs[i] + 1e-9
            });
            if !feasible {
                continue;
            }
            let obj = problem.objective(&u);
            if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                best = Some((obj, u));
            }
        }
        best.map(|(_, u)| u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unconstrained_minimum() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![2.0, 4.0]));
        let g = DVector::from_vec(alloc::vec![-2.0, 4.0]);
        let p = QpProblem::new(h, g, DMatrix::zeros(0, 2), DVector::zeros(0)).unwrap();
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.primal[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.primal[1], -1.0, epsilon = 1e-12);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn projection_onto_halfspace() {
        // H = I, g = 0, constraint −u₁ ≤ −1  ⇒  u* = (1, 0, 0).
        let n = 3;
        let mut a = DMatrix::zeros(1, n);
        a[(0, 0)] = -1.0;
        let p = QpProblem::new(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            a,
            DVector::from_vec(alloc::vec![-1.0]),
        )
        .unwrap();
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.primal[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.primal[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.primal[2], 0.0, epsilon = 1e-12);
        assert_eq!(sol.active_set, alloc::vec![0]);
        assert!(check_kkt(&p, &sol) < STAT_TOL);
    }

    #[test]
    fn detects_infeasible_pair() {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 0)] = 1.0;
        a[(1, 0)] = -1.0;
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            a,
            DVector::from_vec(alloc::vec![-1.0, -1.0]),
        )
        .unwrap();
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_non_pd_hessian() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![1.0, -1.0]));
        let p = QpProblem::new(h, DVector::zeros(2), DMatrix::zeros(0, 2), DVector::zeros(0))
            .unwrap();
        assert!(matches!(solve_qp(&p), Err(QpError::NotPositiveDefinite)));
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        let mut h = DMatrix::identity(2, 2);
        h[(0, 1)] = 0.5;
        assert!(matches!(
            QpProblem::new(h, DVector::zeros(2), DMatrix::zeros(0, 2), DVector::zeros(0)),
            Err(QpError::NotSymmetric(_))
        ));
    }

    #[test]
    fn random_instances_match_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut optimal = 0;
        for _ in 0..300 {
            let (p, feasible_built) = test_support::random_instance(&mut rng, 5, 8);
            let sol = solve_qp(&p).unwrap();
            match sol.status {
                QpStatus::Optimal => {
                    optimal += 1;
                    assert!(check_kkt(&p, &sol) < STAT_TOL, "kkt {}", check_kkt(&p, &sol));
                    let reference = test_support::enumerate_optimum(&p)
                        .expect("oracle agrees problem is feasible");
                    assert!(
                        (p.objective(&sol.primal) - p.objective(&reference)).abs() < 1e-6,
                        "objective gap {}",
                        (p.objective(&sol.primal) - p.objective(&reference)).abs()
                    );
                }
                QpStatus::Infeasible => {
                    assert!(!feasible_built, "solver claims infeasible on a feasible instance");
                }
            }
        }
        assert!(optimal > 200);
    }

    #[test]
    fn damped_ls_identity_case() {
        // J = I, e = −v: u* = v / (1 + λ²).
        let n = 4;
        let v = DVector::from_vec(alloc::vec![1.0, -2.0, 0.5, 3.0]);
        let damping = 0.3;
        let p = build_damped_ls_qp(
            &DMatrix::identity(n, n),
            &(-&v),
            damping,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve_qp(&p).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(sol.primal[i], v[i] / (1.0 + damping * damping), epsilon = 1e-12);
        }
    }

    #[test]
    fn damping_shrinks_solution_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = DMatrix::<f64>::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let e = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let mut prev = f64::INFINITY;
        for damping in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let p =
                build_damped_ls_qp(&j, &e, damping, DMatrix::zeros(0, 5), DVector::zeros(0))
                    .unwrap();
            let norm = solve_qp(&p).unwrap().primal.norm();
            assert!(norm <= prev + 1e-12);
            prev = norm;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn damped_ls_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let m = rng.gen_range(2..6);
            let n = rng.gen_range(2..7);
            let j = DMatrix::<f64>::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let e = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let damping = rng.gen_range(0.05..0.5);
            let p = build_damped_ls_qp(&j, &e, damping, DMatrix::zeros(0, n), DVector::zeros(0))
                .unwrap();
            let sol = solve_qp(&p).unwrap();
            let mut gram = j.transpose() * &j;
            for i in 0..n {
                gram[(i, i)] += damping * damping;
            }
            let reference = gram.lu().solve(&(j.transpose() * (-&e))).unwrap();
            assert!((sol.primal - reference).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_damping_and_dims() {
        let j = DMatrix::<f64>::identity(2, 2);
        let e = DVector::zeros(2);
        assert!(matches!(
            build_damped_ls_qp(&j, &e, 0.0, DMatrix::zeros(0, 2), DVector::zeros(0)),
            Err(QpError::InvalidDamping(_))
        ));
        assert!(matches!(
            build_damped_ls_qp(&j, &DVector::zeros(3), 0.1, DMatrix::zeros(0, 2), DVector::zeros(0)),
            Err(QpError::DimensionMismatch)
        ));
    }

    #[test]
    fn solution_continuity_in_rhs() {
        // Perturbing b with an unchanged active set moves u* by O(δ).
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (p, _) = test_support::random_instance(&mut rng, 4, 6);
        let sol = solve_qp(&p).unwrap();
        if sol.status != QpStatus::Optimal {
            return;
        }
        let delta = 1e-6;
        let mut p2 = p.clone();
        for i in 0..p2.ineq_rhs.len() {
            p2.ineq_rhs[i] += delta;
        }
        let sol2 = solve_qp(&p2).unwrap();
        if sol2.active_set == sol.active_set {
            assert!((sol.primal - sol2.primal).norm() < 100.0 * delta);
        }
    }

    #[test]
    fn deterministic_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (p, _) = test_support::random_instance(&mut rng, 5, 8);
        let a = solve_qp(&p).unwrap();
        let b = solve_qp(&p).unwrap();
        assert_eq!(a.primal, b.primal);
        assert_eq!(a.active_set, b.active_set);
    }
}
