//! Ground-truth world model, noisy virtual sensors, randomized scenario
//! generation, and the three-step procedure state machine.
//!
//! The transmitter frame is the global reference: the true robot base
//! pose, the anatomy (target cube, nominal midline and trachea
//! direction), the acquired measurements, and every constraint primitive
//! live in it. A trial is fully determined by `(seed, config, gains)`:
//! scenario geometry, acquisition noise, and per-tick sensor noise use
//! independent streams derived from the trial seed.
//!
//! Procedure per trial:
//!
//! 1. adaptation-only warm-up until the estimated needle pose matches
//!    the measured one (position/direction thresholds) or the cap hits;
//! 2. step 1: align the needle direction with the guide line;
//! 3. step 2: move the tip to the start position above the target,
//!    rotation held, patient keep-out active, then hold until the
//!    adaptation re-converges;
//! 4. step 3: insert along the guide with quintic feedforward under the
//!    guide-cylinder, cone, and plane rows; the patient row is off.
//!
//! Joint state and parameters integrate with explicit Euler at `dt`.

use alloc::vec::Vec;

use nalgebra::{DVector, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::control::{
    adaptation_constraints, adaptation_step, convergence_check, estimated_chain,
    ee_parameter_jacobian, linearize_task, nominal_control_step, parameter_jacobian,
    scene_kinematics_params, scene_kinematics_q, AdaptiveParameters, ControlError,
    ControllerGains, PoseParams, TaskTarget, NEEDLE_AXIS,
};
use crate::geom::{
    angle_between, line_from_point_direction, signed_dist_point_plane, sq_dist_point_line, Cone,
    Cylinder, Plane, Quat, UnitDualQuat,
};
use crate::kinematics::SerialManipulator;
use crate::trajectory::QuinticSegment;
use crate::vfi::{assemble_constraints, ConstraintScene, ProcedureStep, SafetyMargins, VfiGains};

/// Virtual sensor noise: per-axis Gaussian position noise and a
/// random-axis rotation with Gaussian angle. Zero sigmas reproduce the
/// ground truth exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub pos_sigma: f64,
    pub ang_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { pos_sigma: 1e-3, ang_sigma: 0.2_f64 * core::f64::consts::PI / 180.0 }
    }
}

impl NoiseModel {
    pub const ZERO: NoiseModel = NoiseModel { pos_sigma: 0.0, ang_sigma: 0.0 };
}

/// Scenario randomization ranges and world nominals; defaults reproduce
/// the reference simulation study.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// True robot base pose in the transmitter frame.
    pub nominal_base: PoseParams,
    /// True needle-tip pose in the end-effector frame.
    pub nominal_needle: PoseParams,
    /// Start configuration of the arm.
    pub q_home: Vec<f64>,
    /// Center of the target sampling cube (transmitter frame), m.
    pub cube_center: Vector3<f64>,
    /// Half edge length of the target cube (10 mm cube -> 0.005), m.
    pub cube_half_extent: f64,
    /// Lateral (x, y) component magnitude range of the guide direction.
    pub guide_lateral_min: f64,
    pub guide_lateral_max: f64,
    /// Vertical (z) component range of the guide direction.
    pub guide_vertical_min: f64,
    pub guide_vertical_max: f64,
    /// Half-range of the trachea-direction yaw tilt, rad.
    pub trachea_tilt_half_range: f64,
    /// Initial-estimate uncertainty half-ranges (uniform).
    pub base_pos_uncertainty: f64,
    pub base_rot_uncertainty: f64,
    pub needle_pos_uncertainty: f64,
    pub needle_rot_uncertainty: f64,
    /// Start distance above the target along the guide, m.
    pub start_distance: f64,
    /// Patient keep-out cylinder radius, m.
    pub patient_radius: f64,
    /// Guiding cylinder radius, m.
    pub guide_radius: f64,
    /// Cone half-angle, rad.
    pub cone_half_angle: f64,
    /// Insertion trajectory duration, s.
    pub trajectory_duration: f64,
    /// Samples averaged when acquiring the target/guide measurement.
    pub target_meas_samples: u32,
    pub vfi_gains: VfiGains,
    pub margins: SafetyMargins,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            nominal_base: PoseParams {
                rotation: Vector3::zeros(),
                translation: Vector3::new(-0.12, 0.0, 0.28),
            },
            nominal_needle: PoseParams {
                rotation: Vector3::zeros(),
                translation: Vector3::new(0.0, 0.0, 0.1),
            },
            q_home: alloc::vec![
                0.0,
                -core::f64::consts::FRAC_PI_4,
                0.0,
                -3.0 * core::f64::consts::FRAC_PI_4,
                0.0,
                core::f64::consts::FRAC_PI_2,
                core::f64::consts::FRAC_PI_4,
            ],
            cube_center: Vector3::new(0.25, 0.0, -0.10),
            cube_half_extent: 0.005,
            guide_lateral_min: 0.10,
            guide_lateral_max: 0.45,
            guide_vertical_min: 0.75,
            guide_vertical_max: 1.0,
            trachea_tilt_half_range: 10.0_f64 * core::f64::consts::PI / 180.0,
            base_pos_uncertainty: 0.2,
            base_rot_uncertainty: 10.0_f64 * core::f64::consts::PI / 180.0,
            needle_pos_uncertainty: 0.01,
            needle_rot_uncertainty: 5.0_f64 * core::f64::consts::PI / 180.0,
            start_distance: 0.3,
            patient_radius: 0.2,
            guide_radius: 1.5e-3,
            cone_half_angle: 0.5_f64 * core::f64::consts::PI / 180.0,
            trajectory_duration: 20.0,
            target_meas_samples: 10,
            vfi_gains: VfiGains::default(),
            margins: SafetyMargins::default(),
        }
    }
}

/// Tick size, phase caps, exit thresholds, and settling time.
#[derive(Debug, Clone, Copy)]
pub struct Procedure {
    pub dt: f64,
    /// Warm-up cap; exceeding it marks the trial as timed out, s.
    pub warmup_cap: f64,
    pub align_cap: f64,
    pub approach_cap: f64,
    pub recheck_cap: f64,
    /// Settling time after the trajectory completes, s.
    pub settle: f64,
    /// Step-1 exit: needle-to-guide angle below this, rad.
    pub align_exit_angle: f64,
    /// Step-2 exit: estimated tip within this of the start position, m.
    pub approach_exit_dist: f64,
}

impl Default for Procedure {
    fn default() -> Self {
        Procedure {
            dt: 0.01,
            warmup_cap: 30.0,
            align_cap: 20.0,
            approach_cap: 40.0,
            recheck_cap: 15.0,
            settle: 1.0,
            align_exit_angle: 0.2_f64 * core::f64::consts::PI / 180.0,
            approach_exit_dist: 1e-3,
        }
    }
}

/// Everything `(seed, config)` determines about one trial.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub true_base: PoseParams,
    pub true_needle: PoseParams,
    pub initial_params: AdaptiveParameters,
    pub q_home: DVector<f64>,
    /// True target puncture position, m.
    pub target_point: Quat,
    /// True anatomical midline direction (unit, points above the plane).
    pub nominal_midline: Quat,
    /// True trachea axis direction (unit, orthogonal to the midline).
    pub nominal_trachea_dir: Quat,
    /// Anchor of the anatomical midline plane (cube center).
    pub midline_anchor: Quat,
    /// Acquired target measurement driving the scene and trajectory.
    pub measured_target: Quat,
    /// Acquired guide direction l_g (unit): the measured midline.
    pub guide_direction: Quat,
    /// Acquired trachea direction (unit).
    pub measured_trachea_dir: Quat,
    pub start_distance: f64,
    pub trajectory_duration: f64,
    pub scene: ConstraintScene,
    pub noise: NoiseModel,
    pub procedure: Procedure,
    /// Octant index (0..4) the guide direction was drawn from.
    pub octant: u8,
}

impl Scenario {
    /// Insertion start position above the measured target.
    pub fn start_position(&self) -> Quat {
        self.measured_target + self.guide_direction.scale(self.start_distance)
    }

    pub fn true_base_pose(&self) -> UnitDualQuat {
        self.true_base.pose()
    }

    pub fn true_needle_attach(&self) -> UnitDualQuat {
        self.true_needle.pose()
    }
}

// Seed streams: geometry, acquisition, per-tick sensor noise.
const STREAM_GEOMETRY: u64 = 0x47_45_4f_4d;
const STREAM_ACQUISITION: u64 = 0x41_43_51_55;
const STREAM_SENSOR: u64 = 0x53_45_4e_53;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index` within a batch.
pub fn trial_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(index.wrapping_add(1)))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

fn sym_uniform(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..half_width)
    } else {
        0.0
    }
}

/// Applies sensor noise to a pose: iid Gaussian position noise per axis
/// and a random-axis rotation with Gaussian angle, renormalized.
pub fn sensor_measure(
    true_pose: &UnitDualQuat,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> UnitDualQuat {
    let pos = Normal::new(0.0, noise.pos_sigma).expect("sigma >= 0");
    let ang = Normal::new(0.0, noise.ang_sigma).expect("sigma >= 0");
    let t = true_pose.translation();
    let t_noisy = Quat::pure(
        t.x + pos.sample(rng),
        t.y + pos.sample(rng),
        t.z + pos.sample(rng),
    );
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = ang.sample(rng);
    let r_noise = Quat::exp_rotation(Vector3::new(axis[0], axis[1], axis[2]) * angle);
    let r_noisy = r_noise * true_pose.rotation();
    UnitDualQuat::from_rotation_translation(
        r_noisy.normalized().expect("unit product"),
        t_noisy,
    )
    .expect("valid pose")
}

fn measure_direction(dir: &Quat, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> Quat {
    let ang = Normal::new(0.0, noise.ang_sigma).expect("sigma >= 0");
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let r = Quat::exp_rotation(Vector3::new(axis[0], axis[1], axis[2]) * ang.sample(rng));
    r.rotate(dir)
}

fn measure_point(p: &Quat, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> Quat {
    let pos = Normal::new(0.0, noise.pos_sigma).expect("sigma >= 0");
    Quat::pure(p.x + pos.sample(rng), p.y + pos.sample(rng), p.z + pos.sample(rng))
}

/// Deterministic scenario generation from a seed: anatomy sampling,
/// initial-estimate perturbation, and the averaged acquisition
/// measurement that defines the constraint scene and the trajectory.
pub fn generate_scenario(seed: u64, config: &ScenarioConfig, noise: &NoiseModel) -> Scenario {
    generate_scenario_with(seed, config, noise, &Procedure::default())
}

/// As [`generate_scenario`] with explicit procedure timing.
pub fn generate_scenario_with(
    seed: u64,
    config: &ScenarioConfig,
    noise: &NoiseModel,
    procedure: &Procedure,
) -> Scenario {
    let mut geo = stream_rng(seed, STREAM_GEOMETRY);

    // True target inside the cube.
    let target_point = Quat::pure(
        config.cube_center.x + sym_uniform(&mut geo, config.cube_half_extent),
        config.cube_center.y + sym_uniform(&mut geo, config.cube_half_extent),
        config.cube_center.z + sym_uniform(&mut geo, config.cube_half_extent),
    );

    // Anatomical midline from one of the four octants above the plane.
    let octant = geo.gen_range(0..4u8);
    let (sx, sy) = match octant {
        0 => (1.0, 1.0),
        1 => (1.0, -1.0),
        2 => (-1.0, 1.0),
        _ => (-1.0, -1.0),
    };
    let lx = geo.gen_range(config.guide_lateral_min..config.guide_lateral_max);
    let ly = geo.gen_range(config.guide_lateral_min..config.guide_lateral_max);
    let lz = geo.gen_range(config.guide_vertical_min..config.guide_vertical_max);
    let nominal_midline = Quat::pure(sx * lx, sy * ly, lz).normalized().expect("nonzero");

    // Trachea direction: tilted x axis, orthogonalized to the midline.
    let yaw = sym_uniform(&mut geo, config.trachea_tilt_half_range);
    let raw = Quat::pure(yaw.cos(), yaw.sin(), 0.0);
    let along = raw.vector().dot(&nominal_midline.vector());
    let nominal_trachea_dir = (raw - nominal_midline.scale(along)).normalized().expect("nonzero");

    // Initial estimate: truth perturbed inside the uncertainty ranges.
    let perturb = |rng: &mut ChaCha8Rng, p: &PoseParams, dpos: f64, drot: f64| PoseParams {
        translation: Vector3::new(
            p.translation.x + sym_uniform(rng, dpos),
            p.translation.y + sym_uniform(rng, dpos),
            p.translation.z + sym_uniform(rng, dpos),
        ),
        rotation: Vector3::new(
            p.rotation.x + sym_uniform(rng, drot),
            p.rotation.y + sym_uniform(rng, drot),
            p.rotation.z + sym_uniform(rng, drot),
        ),
    };
    let initial_params = AdaptiveParameters {
        base: perturb(
            &mut geo,
            &config.nominal_base,
            config.base_pos_uncertainty,
            config.base_rot_uncertainty,
        ),
        needle: perturb(
            &mut geo,
            &config.nominal_needle,
            config.needle_pos_uncertainty,
            config.needle_rot_uncertainty,
        ),
    };

    // Acquisition: averaged noisy samples of the target point and the
    // direction pair, on a stream independent of the geometry.
    let mut acq = stream_rng(seed, STREAM_ACQUISITION);
    let n_samples = config.target_meas_samples.max(1);
    let mut target_acc = Vector3::zeros();
    let mut guide_acc = Vector3::zeros();
    let mut trachea_acc = Vector3::zeros();
    for _ in 0..n_samples {
        target_acc += measure_point(&target_point, noise, &mut acq).vector();
        guide_acc += measure_direction(&nominal_midline, noise, &mut acq).vector();
        trachea_acc += measure_direction(&nominal_trachea_dir, noise, &mut acq).vector();
    }
    let measured_target = Quat::from_vector(target_acc / n_samples as f64);
    let guide_direction =
        Quat::from_vector(guide_acc / n_samples as f64).normalized().expect("nonzero");
    let measured_trachea_raw =
        Quat::from_vector(trachea_acc / n_samples as f64).normalized().expect("nonzero");
    // The patient axis must not be parallel to the guide; keep the raw
    // measured trachea for metrics and use it for the keep-out axis.
    let measured_trachea_dir = measured_trachea_raw;

    let guide_axis = line_from_point_direction(&measured_target, &guide_direction)
        .expect("unit direction");
    let patient_axis = line_from_point_direction(&measured_target, &measured_trachea_dir)
        .expect("unit direction");
    let scene = ConstraintScene::new(
        Cylinder::new(patient_axis, config.patient_radius).expect("radius > 0"),
        Cylinder::new(guide_axis, config.guide_radius).expect("radius > 0"),
        Cone::new(guide_axis, config.cone_half_angle).expect("angle in range"),
        Plane::from_point_normal(&measured_target, &guide_direction).expect("unit normal"),
        config.vfi_gains,
        config.margins,
    )
    .expect("consistent scene");

    Scenario {
        seed,
        true_base: config.nominal_base,
        true_needle: config.nominal_needle,
        initial_params,
        q_home: DVector::from_vec(config.q_home.clone()),
        target_point,
        nominal_midline,
        nominal_trachea_dir,
        midline_anchor: Quat::pure(
            config.cube_center.x,
            config.cube_center.y,
            config.cube_center.z,
        ),
        measured_target,
        guide_direction,
        measured_trachea_dir,
        start_distance: config.start_distance,
        trajectory_duration: config.trajectory_duration,
        scene,
        noise: *noise,
        procedure: *procedure,
        octant,
    }
}

/// Explicit-Euler joint integration.
pub fn integrate_joint_state(q: &DVector<f64>, qdot: &DVector<f64>, dt: f64) -> DVector<f64> {
    q + qdot * dt
}

/// Trial outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Completed,
    /// The motion QP became infeasible; the robot stopped partway.
    InfeasibleStop,
    /// A phase cap was exceeded.
    Timeout,
}

/// One logged control tick.
#[derive(Debug, Clone)]
pub struct TickRow {
    pub t: f64,
    pub step: u8,
    pub q: DVector<f64>,
    pub params: DVector<f64>,
    pub true_tip: Vector3<f64>,
    pub true_dir: Vector3<f64>,
    pub est_tip: Vector3<f64>,
    pub est_dir: Vector3<f64>,
    pub meas_tip: Vector3<f64>,
    /// Distance of the true tip to the true target, m.
    pub dist_target_true: f64,
    /// Distance of the true tip to the measured target, m.
    pub dist_target_meas: f64,
    /// True/estimated tip distance to the guide axis, m.
    pub guide_dist_true: f64,
    pub guide_dist_est: f64,
    /// True/estimated needle angle to the guide direction, rad.
    pub cone_angle_true: f64,
    pub cone_angle_est: f64,
    /// True/estimated signed tip distance to the target plane, m.
    pub plane_dist_true: f64,
    pub plane_dist_est: f64,
    /// Smallest estimated designated-point distance to the patient
    /// axis, m.
    pub patient_dist_est: f64,
    pub patient_dist_true: f64,
    /// Smallest margin to any joint limit, rad.
    pub joint_margin: f64,
    /// Task-descent product of the adaptation QP this tick.
    pub lyapunov: f64,
    /// Parameter estimation errors against ground truth.
    pub base_pos_err: f64,
    pub base_rot_err: f64,
    pub needle_pos_err: f64,
    pub needle_rot_err: f64,
}

/// Reduced per-trial summary, kept even when tick rows are dropped.
#[derive(Debug, Clone)]
pub struct TrialSummary {
    pub warmup_converged: bool,
    pub warmup_time: f64,
    /// Simulation time at entry of steps 1, 2, 3 (NaN if never reached).
    pub align_entry: f64,
    pub approach_entry: f64,
    pub insert_entry: f64,
    pub total_time: f64,
    pub ticks_total: usize,
    /// Final true tip and needle direction (metrics inputs).
    pub final_tip_true: Vector3<f64>,
    pub final_dir_true: Vector3<f64>,
    pub final_tip_error_true: f64,
    pub final_tip_error_meas: f64,
    pub final_guide_angle: f64,
    /// Maximum task-descent product over all adaptation ticks.
    pub max_lyapunov: f64,
    /// Violation extrema on the controlled (estimated) geometry against
    /// the nominal primitives.
    pub max_guide_violation_est: f64,
    pub max_cone_violation_est: f64,
    pub min_patient_margin_est: f64,
    pub min_plane_dist_est: f64,
    /// Same extrema evaluated on the true geometry.
    pub max_guide_violation_true: f64,
    pub max_cone_violation_true: f64,
    pub min_patient_margin_true: f64,
    pub min_plane_dist_true: f64,
    /// Worst excursion beyond a joint limit, rad (0 when none).
    pub max_joint_violation: f64,
    pub adaptation_pauses: usize,
}

/// Full record of one trial.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub seed: u64,
    pub status: TrialStatus,
    pub ticks: Vec<TickRow>,
    pub summary: TrialSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    WarmUp,
    Align,
    Approach,
    Hold,
    Insert,
}

impl Phase {
    fn vfi_step(self) -> ProcedureStep {
        match self {
            Phase::WarmUp => ProcedureStep::WarmUp,
            Phase::Align => ProcedureStep::AlignNeedle,
            Phase::Approach | Phase::Hold => ProcedureStep::MoveToStart,
            Phase::Insert => ProcedureStep::Insert,
        }
    }

    fn index(self) -> u8 {
        match self {
            Phase::WarmUp => 0,
            Phase::Align => 1,
            Phase::Approach | Phase::Hold => 2,
            Phase::Insert => 3,
        }
    }
}

/// Runs one trial to completion or failure, logging every tick.
pub fn run_trial(
    robot: &SerialManipulator,
    scenario: &Scenario,
    gains: &ControllerGains,
) -> Result<TrialRecord, ControlError> {
    let dt = scenario.procedure.dt;
    let n = robot.n_joints();
    let mut sensor_rng = stream_rng(scenario.seed, STREAM_SENSOR);

    let true_base = scenario.true_base_pose();
    let true_attach = scenario.true_needle_attach();
    let mut q = scenario.q_home.clone();
    let mut params = scenario.initial_params;

    let start_position = scenario.start_position();
    let segment = QuinticSegment::new(
        start_position,
        scenario.measured_target,
        scenario.trajectory_duration,
    )
    .expect("valid segment");

    let mut phase = Phase::WarmUp;
    let mut phase_start = 0.0;
    let mut held_rotation: Option<Quat> = None;
    let mut status = TrialStatus::Timeout;

    let mut ticks: Vec<TickRow> = Vec::new();
    let mut summary = TrialSummary {
        warmup_converged: false,
        warmup_time: f64::NAN,
        align_entry: f64::NAN,
        approach_entry: f64::NAN,
        insert_entry: f64::NAN,
        total_time: 0.0,
        ticks_total: 0,
        final_tip_true: Vector3::zeros(),
        final_dir_true: Vector3::zeros(),
        final_tip_error_true: f64::NAN,
        final_tip_error_meas: f64::NAN,
        final_guide_angle: f64::NAN,
        max_lyapunov: f64::NEG_INFINITY,
        max_guide_violation_est: 0.0,
        max_cone_violation_est: 0.0,
        min_patient_margin_est: f64::INFINITY,
        min_plane_dist_est: f64::INFINITY,
        max_guide_violation_true: 0.0,
        max_cone_violation_true: 0.0,
        min_patient_margin_true: f64::INFINITY,
        min_plane_dist_true: f64::INFINITY,
        max_joint_violation: 0.0,
        adaptation_pauses: 0,
    };

    let hard_cap_ticks = (((scenario.procedure.warmup_cap
        + scenario.procedure.align_cap
        + scenario.procedure.approach_cap
        + scenario.procedure.recheck_cap
        + scenario.trajectory_duration
        + scenario.procedure.settle)
        / dt)
        .ceil() as usize)
        + 16;

    let mut t = 0.0;
    for _ in 0..hard_cap_ticks {
        // Ground truth and measurement.
        let fkm = robot.fkm(&q)?;
        let true_pose = true_base * fkm * true_attach;
        let true_ee_pose = true_base * fkm;
        let measured = sensor_measure(&true_pose, &scenario.noise, &mut sensor_rng);

        // Estimated chain and parameter Jacobians.
        let chain = estimated_chain(robot, &q, &params)?;
        let j_param = parameter_jacobian(robot, &q, &params)?;
        let j_param_ee = ee_parameter_jacobian(robot, &q, &params)?;

        // Task of the current phase.
        let target = match phase {
            Phase::WarmUp => None,
            Phase::Align => {
                let current_dir = chain.needle_direction();
                let swing = Quat::rotation_between(&current_dir, &scenario.guide_direction);
                Some(TaskTarget::RotationOnly {
                    desired: swing * chain.needle_pose().rotation(),
                })
            }
            Phase::Approach | Phase::Hold => {
                let rot = held_rotation.expect("set at approach entry");
                Some(TaskTarget::FullPose {
                    desired: UnitDualQuat::from_rotation_translation(rot, start_position)
                        .expect("unit rotation"),
                })
            }
            Phase::Insert => {
                let (pos, vel) = segment.eval(t - phase_start).expect("t >= 0");
                Some(TaskTarget::TranslationOnly { desired: pos, feedforward: vel })
            }
        };
        let task = target.as_ref().map(|tg| linearize_task(&chain, &j_param, tg, gains));

        // Adaptation tick.
        let vfi_step = phase.vfi_step();
        let kin_params = scene_kinematics_params(&chain, &j_param, &j_param_ee);
        let adapt_rows =
            adaptation_constraints(&scenario.scene, vfi_step, &kin_params, gains.mirror_rate);
        let adapt =
            adaptation_step(&chain, &j_param, &measured, task.as_ref(), &adapt_rows, gains)?;
        if adapt.paused {
            summary.adaptation_pauses += 1;
        }
        summary.max_lyapunov = summary.max_lyapunov.max(adapt.lyapunov_product);

        // The estimate moves under the adaptation rates within this same
        // tick; fold that known rate into the feedforward so the motion
        // law inverts the complete estimated-task dynamics.
        let task = task.map(|mut tk| {
            let est_rate = &tk.jacobian_params * &adapt.param_rates;
            tk.feedforward -= est_rate;
            tk
        });

        // Motion tick.
        let mut infeasible = false;
        let qdot = if let Some(task) = &task {
            let kin_q = scene_kinematics_q(&chain);
            let rows = assemble_constraints(&scenario.scene, vfi_step, &kin_q, robot, &q);
            let task_gain = match phase {
                Phase::Align => gains.task_gain_align,
                Phase::Approach | Phase::Hold => gains.task_gain_approach,
                Phase::Insert => gains.task_gain_insert,
                Phase::WarmUp => unreachable!("warm-up has no task"),
            };
            let out = nominal_control_step(task, &rows, task_gain, gains.damping, n)?;
            infeasible = !out.feasible;
            out.joint_velocity
        } else {
            DVector::zeros(n)
        };

        // Log the tick.
        let est_tip = chain.needle_tip();
        let est_dir = chain.needle_direction();
        let true_tip = true_pose.translation();
        let true_dir = true_pose.transform_direction(&NEEDLE_AXIS);
        let guide_axis = &scenario.scene.guide_cylinder.axis;
        let patient_axis = &scenario.scene.patient_cylinder.axis;
        let plane = &scenario.scene.target_plane;

        let guide_dist_true = sq_dist_point_line(&true_tip, guide_axis).sqrt();
        let guide_dist_est = sq_dist_point_line(&est_tip, guide_axis).sqrt();
        let cone_angle_true = angle_between(&true_dir, &scenario.guide_direction);
        let cone_angle_est = angle_between(&est_dir, &scenario.guide_direction);
        let plane_dist_true = signed_dist_point_plane(&true_tip, plane);
        let plane_dist_est = signed_dist_point_plane(&est_tip, plane);
        let patient_dist_est = sq_dist_point_line(&est_tip, patient_axis)
            .min(sq_dist_point_line(&chain.ee.pose.translation(), patient_axis))
            .sqrt();
        let patient_dist_true = sq_dist_point_line(&true_tip, patient_axis)
            .min(sq_dist_point_line(&true_ee_pose.translation(), patient_axis))
            .sqrt();
        let mut joint_margin = f64::INFINITY;
        let mut joint_violation: f64 = 0.0;
        for i in 0..n {
            let lo = q[i] - robot.q_min()[i];
            let hi = robot.q_max()[i] - q[i];
            joint_margin = joint_margin.min(lo.min(hi));
            joint_violation = joint_violation.max((-lo).max(-hi).max(0.0));
        }

        let base_err_pose = params.base.pose() * scenario.true_base.pose().inverse();
        let needle_err_pose = params.needle.pose() * scenario.true_needle.pose().inverse();

        ticks.push(TickRow {
            t,
            step: phase.index(),
            q: q.clone(),
            params: params.to_vector(),
            true_tip: true_tip.vector(),
            true_dir: true_dir.vector(),
            est_tip: est_tip.vector(),
            est_dir: est_dir.vector(),
            meas_tip: measured.translation_vector(),
            dist_target_true: (true_tip - scenario.target_point).norm(),
            dist_target_meas: (true_tip - scenario.measured_target).norm(),
            guide_dist_true,
            guide_dist_est,
            cone_angle_true,
            cone_angle_est,
            plane_dist_true,
            plane_dist_est,
            patient_dist_est,
            patient_dist_true,
            joint_margin,
            lyapunov: adapt.lyapunov_product,
            base_pos_err: (params.base.pose().translation_vector()
                - scenario.true_base.pose().translation_vector())
            .norm(),
            base_rot_err: base_err_pose.rotation().log_rotation().norm(),
            needle_pos_err: (params.needle.pose().translation_vector()
                - scenario.true_needle.pose().translation_vector())
            .norm(),
            needle_rot_err: needle_err_pose.rotation().log_rotation().norm(),
        });

        // Safety accounting per phase.
        summary.max_joint_violation = summary.max_joint_violation.max(joint_violation);
        match vfi_step {
            ProcedureStep::Insert => {
                let r_g = scenario.scene.guide_cylinder.radius;
                let theta = scenario.scene.cone.half_angle;
                summary.max_guide_violation_est =
                    summary.max_guide_violation_est.max((guide_dist_est - r_g).max(0.0));
                summary.max_cone_violation_est =
                    summary.max_cone_violation_est.max((cone_angle_est - theta).max(0.0));
                summary.max_guide_violation_true =
                    summary.max_guide_violation_true.max((guide_dist_true - r_g).max(0.0));
                summary.max_cone_violation_true =
                    summary.max_cone_violation_true.max((cone_angle_true - theta).max(0.0));
                summary.min_plane_dist_est = summary.min_plane_dist_est.min(plane_dist_est);
                summary.min_plane_dist_true = summary.min_plane_dist_true.min(plane_dist_true);
            }
            _ => {
                let r_p = scenario.scene.patient_cylinder.radius;
                summary.min_patient_margin_est =
                    summary.min_patient_margin_est.min(patient_dist_est - r_p);
                summary.min_patient_margin_true =
                    summary.min_patient_margin_true.min(patient_dist_true - r_p);
            }
        }

        if infeasible {
            status = TrialStatus::InfeasibleStop;
            summary.total_time = t;
            break;
        }

        // Integrate.
        q = integrate_joint_state(&q, &qdot, dt);
        params = params.integrate(&adapt.param_rates, dt);
        t += dt;

        // Phase transitions.
        let elapsed = t - phase_start;
        match phase {
            Phase::WarmUp => {
                if convergence_check(&chain.needle_pose(), &measured, gains) {
                    summary.warmup_converged = true;
                    summary.warmup_time = t;
                    summary.align_entry = t;
                    phase = Phase::Align;
                    phase_start = t;
                } else if elapsed > scenario.procedure.warmup_cap {
                    status = TrialStatus::Timeout;
                    summary.total_time = t;
                    break;
                }
            }
            Phase::Align => {
                let ang = angle_between(&chain.needle_direction(), &scenario.guide_direction);
                if ang <= scenario.procedure.align_exit_angle {
                    held_rotation = Some(chain.needle_pose().rotation());
                    summary.approach_entry = t;
                    phase = Phase::Approach;
                    phase_start = t;
                } else if elapsed > scenario.procedure.align_cap {
                    status = TrialStatus::Timeout;
                    summary.total_time = t;
                    break;
                }
            }
            Phase::Approach => {
                let dist = (chain.needle_tip() - start_position).norm();
                if dist <= scenario.procedure.approach_exit_dist {
                    phase = Phase::Hold;
                    phase_start = t;
                } else if elapsed > scenario.procedure.approach_cap {
                    status = TrialStatus::Timeout;
                    summary.total_time = t;
                    break;
                }
            }
            Phase::Hold => {
                if convergence_check(&chain.needle_pose(), &measured, gains) {
                    summary.insert_entry = t;
                    phase = Phase::Insert;
                    phase_start = t;
                } else if elapsed > scenario.procedure.recheck_cap {
                    status = TrialStatus::Timeout;
                    summary.total_time = t;
                    break;
                }
            }
            Phase::Insert => {
                if elapsed >= scenario.trajectory_duration + scenario.procedure.settle {
                    status = TrialStatus::Completed;
                    summary.total_time = t;
                    break;
                }
            }
        }
    }

    if let Some(last) = ticks.last() {
        summary.ticks_total = ticks.len();
        summary.final_tip_true = last.true_tip;
        summary.final_dir_true = last.true_dir;
        summary.final_tip_error_true = last.dist_target_true;
        summary.final_tip_error_meas = last.dist_target_meas;
        summary.final_guide_angle = last.cone_angle_true;
    }

    Ok(TrialRecord { seed: scenario.seed, status, ticks, summary })
}

/// Scenario + gain bundle of one batch.
#[derive(Debug, Clone, Default)]
pub struct SimConfig {
    pub scenario: ScenarioConfig,
    pub noise: NoiseModel,
    pub procedure: Procedure,
    pub gains: ControllerGains,
}

/// Runs `n_trials` sequentially, invoking `visit` with each finished
/// record (trial index, record, scenario). Output order equals seed
/// order. Parallel callers drive [`run_trial`] per seed instead.
pub fn run_batch_with<E>(
    robot: &SerialManipulator,
    n_trials: usize,
    base_seed: u64,
    config: &SimConfig,
    mut visit: impl FnMut(usize, TrialRecord, &Scenario) -> Result<(), E>,
) -> Result<(), BatchError<E>> {
    for i in 0..n_trials {
        let seed = trial_seed(base_seed, i as u64);
        let scenario =
            generate_scenario_with(seed, &config.scenario, &config.noise, &config.procedure);
        let record = run_trial(robot, &scenario, &config.gains)
            .map_err(BatchError::Control)?;
        visit(i, record, &scenario).map_err(BatchError::Visitor)?;
    }
    Ok(())
}

/// Batch error: a controller/kinematics failure or a visitor failure.
#[derive(Debug)]
pub enum BatchError<E> {
    Control(ControlError),
    Visitor(E),
}

impl<E: core::fmt::Display> core::fmt::Display for BatchError<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BatchError::Control(e) => write!(f, "trial failed to run: {e}"),
            BatchError::Visitor(e) => write!(f, "batch consumer failed: {e}"),
        }
    }
}

/// Convenience wrapper retaining every record in memory.
pub fn run_batch(
    robot: &SerialManipulator,
    n_trials: usize,
    base_seed: u64,
    config: &SimConfig,
) -> Result<Vec<TrialRecord>, ControlError> {
    let mut out = Vec::with_capacity(n_trials);
    let result: Result<(), BatchError<core::convert::Infallible>> =
        run_batch_with(robot, n_trials, base_seed, config, |_, record, _| {
            out.push(record);
            Ok(())
        });
    match result {
        Ok(()) => Ok(out),
        Err(BatchError::Control(e)) => Err(e),
        Err(BatchError::Visitor(_)) => unreachable!("visitor is infallible"),
    }
}
