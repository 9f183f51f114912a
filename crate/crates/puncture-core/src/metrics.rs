//! Puncture-quality and measurement-quality variables, summary
//! statistics, and Spearman rank correlation.
//!
//! Position metrics are point-to-plane or point-to-point distances in
//! meters; angular metrics are line-to-line angles in radians. The
//! midline plane contains the nominal midline and trachea directions
//! through the anatomy anchor; projected deviations use the trachea
//! cross-section plane (orthogonal to the trachea direction).
//!
//! Percentiles interpolate linearly between closest ranks, so quartiles
//! of `[1, 2, 3, 4]` are 1.75/2.5/3.25 and the IQR is 1.5.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::Vector3;
#[allow(unused_imports)]
use num_traits::Float;

use crate::geom::{signed_dist_point_plane, Plane, Quat};
use crate::sim::{Scenario, TrialRecord, TrialStatus};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// Metrics are only defined for completed trials.
    IncompleteTrial(TrialStatus),
    /// Input slices empty or of mismatched length.
    InvalidInput,
    /// Ranks are undefined for constant input.
    ConstantInput,
    /// A direction is (numerically) parallel to the projection axis.
    DegenerateProjection,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::IncompleteTrial(s) => write!(f, "trial did not complete: {s:?}"),
            MetricsError::InvalidInput => write!(f, "empty or mismatched input"),
            MetricsError::ConstantInput => write!(f, "constant input has undefined ranks"),
            MetricsError::DegenerateProjection => {
                write!(f, "direction parallel to the projection axis")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetricsError {}

/// Final-pose quality variables of one completed trial.
///
/// `eps_*` are distances in meters, `delta_*` angles in radians:
/// - `eps_n`: needle tip to the midline plane;
/// - `eps_r`: needle tip to the target puncture position;
/// - `eps_m`: measured target to the midline plane;
/// - `delta_n`: needle vs. nominal midline;
/// - `delta_r`: needle vs. puncture guide line;
/// - `delta_mn`: needle vs. nominal midline, projected onto the trachea
///   cross-section;
/// - `delta_m`: guide line vs. nominal midline;
/// - `delta_mm`: guide line vs. nominal midline, projected;
/// - `delta_x`: measured vs. nominal trachea direction.
#[derive(Debug, Clone, Copy)]
pub struct PunctureMetrics {
    pub eps_n: f64,
    pub eps_r: f64,
    pub eps_m: f64,
    pub delta_n: f64,
    pub delta_r: f64,
    pub delta_mn: f64,
    pub delta_m: f64,
    pub delta_mm: f64,
    pub delta_x: f64,
}

impl PunctureMetrics {
    /// Metric values keyed for report output, in report units
    /// (millimeters and degrees).
    pub const LABELS: [&'static str; 9] = [
        "eps_n_mm", "eps_r_mm", "eps_m_mm", "delta_n_deg", "delta_r_deg", "delta_mn_deg",
        "delta_m_deg", "delta_mm_deg", "delta_x_deg",
    ];

    pub fn report_values(&self) -> [f64; 9] {
        [
            self.eps_n * 1e3,
            self.eps_r * 1e3,
            self.eps_m * 1e3,
            self.delta_n.to_degrees(),
            self.delta_r.to_degrees(),
            self.delta_mn.to_degrees(),
            self.delta_m.to_degrees(),
            self.delta_mm.to_degrees(),
            self.delta_x.to_degrees(),
        ]
    }
}

fn angle_between_vectors(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    (a.dot(b) / denom).clamp(-1.0, 1.0).acos()
}

/// Angle between two directions after projecting both onto the plane
/// orthogonal to `axis`.
fn projected_angle(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    axis: &Vector3<f64>,
) -> Result<f64, MetricsError> {
    let project = |v: &Vector3<f64>| v - axis * v.dot(axis);
    let pa = project(a);
    let pb = project(b);
    if pa.norm() < 1e-9 || pb.norm() < 1e-9 {
        return Err(MetricsError::DegenerateProjection);
    }
    Ok(angle_between_vectors(&pa, &pb))
}

/// Computes the Fig-of-merit variables from the final tick of a
/// completed trial and the scenario geometry.
pub fn compute_metrics(
    record: &TrialRecord,
    scenario: &Scenario,
) -> Result<PunctureMetrics, MetricsError> {
    if record.status != TrialStatus::Completed {
        return Err(MetricsError::IncompleteTrial(record.status));
    }
    let tip = record.summary.final_tip_true;
    let dir = record.summary.final_dir_true;
    let midline = scenario.nominal_midline.vector();
    let trachea = scenario.nominal_trachea_dir.vector();
    let guide = scenario.guide_direction.vector();

    // Midline plane: contains midline and trachea directions, anchored
    // at the anatomy anchor.
    let normal = midline.cross(&trachea);
    let normal = normal / normal.norm();
    let midline_plane =
        Plane::from_point_normal(&scenario.midline_anchor, &Quat::from_vector(normal))
            .expect("unit normal");

    Ok(PunctureMetrics {
        eps_n: signed_dist_point_plane(&Quat::from_vector(tip), &midline_plane).abs(),
        eps_r: (tip - scenario.target_point.vector()).norm(),
        eps_m: signed_dist_point_plane(&scenario.measured_target, &midline_plane).abs(),
        delta_n: angle_between_vectors(&dir, &midline),
        delta_r: angle_between_vectors(&dir, &guide),
        delta_mn: projected_angle(&dir, &midline, &trachea)?,
        delta_m: angle_between_vectors(&guide, &midline),
        delta_mm: projected_angle(&guide, &midline, &trachea)?,
        delta_x: angle_between_vectors(&scenario.measured_trachea_dir.vector(), &trachea),
    })
}

/// Mean, sample standard deviation, median, and interquartile range.
#[derive(Debug, Clone, Copy)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub iqr: f64,
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Summary statistics of a nonempty sample; quartiles by linear
/// interpolation between closest ranks.
pub fn summarize(xs: &[f64]) -> Result<SummaryStats, MetricsError> {
    if xs.is_empty() {
        return Err(MetricsError::InvalidInput);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in metrics"));
    let median = percentile_sorted(&sorted, 0.5);
    let iqr = percentile_sorted(&sorted, 0.75) - percentile_sorted(&sorted, 0.25);
    Ok(SummaryStats { mean, sd, median, iqr })
}

/// Fractional (average-tie) ranks, 1-based.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("no NaN in ranks"));
    let mut ranks = alloc::vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Tied block [i, j]: average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average-rank ties and the two-sided
/// large-sample t approximation of the p-value (n − 2 degrees of
/// freedom).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64), MetricsError> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(MetricsError::InvalidInput);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let r = pearson(&rx, &ry).ok_or(MetricsError::ConstantInput)?;
    let dof = (x.len() - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        // Two-sided tail of Student's t: p = I_{ν/(ν+t²)}(ν/2, 1/2).
        regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    };
    Ok((r, p))
}

// Regularized incomplete beta via the Lentz continued fraction; accuracy
// far beyond what the p-value discrimination here needs.
fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 200;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

// Lanczos approximation, g = 7, n = 9.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = core::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.999_999_999_999_809_9;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i as f64) + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * core::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Per-metric statistics of a batch plus the correlation pairs and the
/// failure accounting.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub n_trials: usize,
    pub n_completed: usize,
    pub failure_rate: f64,
    /// One entry per metric label, over completed trials (report units).
    pub stats: Vec<(&'static str, SummaryStats)>,
    /// Spearman (r, p) of (eps_m, eps_n), when computable.
    pub spearman_eps: Option<(f64, f64)>,
    /// Spearman (r, p) of (delta_m, delta_n), when computable.
    pub spearman_delta: Option<(f64, f64)>,
}

impl fmt::Display for BatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trials: {} completed: {} failure rate: {:.1}%",
            self.n_trials, self.n_completed, self.failure_rate * 100.0)?;
        writeln!(f, "{:<14} {:>10} {:>10} {:>10} {:>10}", "metric", "mean", "sd", "median", "iqr")?;
        for (label, s) in &self.stats {
            writeln!(f, "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", label, s.mean, s.sd, s.median, s.iqr)?;
        }
        if let Some((r, p)) = self.spearman_eps {
            writeln!(f, "spearman eps_m vs eps_n:     r = {r:.4}  p = {p:.2e}")?;
        }
        if let Some((r, p)) = self.spearman_delta {
            writeln!(f, "spearman delta_m vs delta_n: r = {r:.4}  p = {p:.2e}")?;
        }
        Ok(())
    }
}

/// Builds the batch report over the completed trials.
pub fn batch_report(
    records: &[TrialRecord],
    scenarios: &[Scenario],
) -> Result<BatchReport, MetricsError> {
    if records.is_empty() || records.len() != scenarios.len() {
        return Err(MetricsError::InvalidInput);
    }
    let mut per_metric: [Vec<f64>; 9] = Default::default();
    let mut n_completed = 0;
    for (record, scenario) in records.iter().zip(scenarios) {
        if record.status != TrialStatus::Completed {
            continue;
        }
        n_completed += 1;
        let m = compute_metrics(record, scenario)?;
        for (k, v) in m.report_values().iter().enumerate() {
            per_metric[k].push(*v);
        }
    }
    if n_completed == 0 {
        return Err(MetricsError::InvalidInput);
    }
    let mut stats = Vec::with_capacity(9);
    for (k, label) in PunctureMetrics::LABELS.iter().enumerate() {
        stats.push((*label, summarize(&per_metric[k])?));
    }
    let spearman_eps = spearman(&per_metric[2], &per_metric[0]).ok();
    let spearman_delta = spearman(&per_metric[6], &per_metric[3]).ok();
    Ok(BatchReport {
        n_trials: records.len(),
        n_completed,
        failure_rate: 1.0 - n_completed as f64 / records.len() as f64,
        stats,
        spearman_eps,
        spearman_delta,
    })
}
