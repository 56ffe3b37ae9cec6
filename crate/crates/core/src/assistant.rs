//! The virtual assistant: lateral balance and forward propulsion forces on
//! the pelvis, and the in-rollout milestone schedule that weakens them.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::charmodel::CharacterModel;
use crate::dynamics::{ExternalForce, Kinematics, SVec, SimState};
use crate::error::{Error, Result};

/// Damping of the balance controller relative to its stiffness.
pub const BALANCE_DAMPING_RATIO: f64 = 0.1;

/// Largest assist force magnitude per axis, N.
pub const MAX_ASSIST_FORCE: f64 = 1e5;

/// A point in curriculum space: balance stiffness `kp` (N/m) and propel
/// gain `kd` (N·s/m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Lesson {
    pub kp: f64,
    pub kd: f64,
}

impl Lesson {
    pub const NONE: Lesson = Lesson { kp: 0.0, kd: 0.0 };

    pub fn new(kp: f64, kd: f64) -> Result<Self> {
        if !(kp >= 0.0 && kd >= 0.0 && kp.is_finite() && kd.is_finite()) {
            return Err(Error::Validation(format!(
                "lesson gains must be finite and non-negative, got ({kp}, {kd})"
            )));
        }
        Ok(Self { kp, kd })
    }

    pub fn norm(&self) -> f64 {
        self.kp.hypot(self.kd)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            kp: self.kp * s,
            kd: self.kd * s,
        }
    }

    /// `self + alpha * d`, with each component clamped at zero.
    pub fn step_along(&self, d: (f64, f64), alpha: f64) -> Self {
        Self {
            kp: (self.kp + alpha * d.0).max(0.0),
            kd: (self.kd + alpha * d.1).max(0.0),
        }
    }
}

/// Strength at the start and at the end of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LessonRange {
    pub begin: Lesson,
    pub end: Lesson,
}

impl LessonRange {
    /// Range whose end is two milestone drops below `begin`.
    pub fn from_begin(begin: Lesson, k_percent: f64) -> Self {
        let f = k_percent / 100.0;
        Self {
            begin,
            end: begin.scale(f * f),
        }
    }

    /// Constant assistance for the whole rollout.
    pub fn constant(lesson: Lesson) -> Self {
        Self {
            begin: lesson,
            end: lesson,
        }
    }
}

/// Piecewise-constant strength: `begin * (k%)^floor(t/p)`, floored at `end`.
pub fn milestone_strength(range: &LessonRange, t: f64, k_percent: f64, p: f64) -> Lesson {
    let drops = (t.max(0.0) / p).floor();
    let f = (k_percent / 100.0).powf(drops);
    Lesson {
        kp: (range.begin.kp * f).max(range.end.kp),
        kd: (range.begin.kd * f).max(range.end.kd),
    }
}

/// One-axis stable PD force on a body of effective mass `mass`.
///
/// The position and velocity errors are taken at the end of the step, so the
/// force is the fully implicit Euler solution of the closed loop.
#[allow(clippy::too_many_arguments)]
pub fn spd_force(
    kp: f64,
    kd: f64,
    p: f64,
    pd: f64,
    p_target: f64,
    v_target: f64,
    mass: f64,
    dt: f64,
) -> f64 {
    if kp == 0.0 && kd == 0.0 {
        return 0.0;
    }
    let num = -kp * (p + dt * pd - p_target) - kd * (pd - v_target);
    num / (1.0 + (kd * dt + kp * dt * dt) / mass)
}

/// Root translational 3×3 block of the mass matrix.
///
/// The root translates along fixed world axes before any rotation, so the
/// block is the total mass times identity for every configuration.
pub fn root_translational_block(model: &CharacterModel) -> Matrix3<f64> {
    Matrix3::identity() * model.total_mass()
}

fn effective_mass(block: &Matrix3<f64>, axis: usize) -> f64 {
    let inv = block.try_inverse().unwrap_or_else(Matrix3::zeros);
    let d = inv[(axis, axis)];
    if d > 0.0 {
        1.0 / d
    } else {
        f64::INFINITY
    }
}

fn clamp_force(f: f64, axis: &str) -> f64 {
    if !f.is_finite() || f.abs() > MAX_ASSIST_FORCE {
        warn!("assist force {axis} = {f:e} N clamped to ±{MAX_ASSIST_FORCE:e} N");
        if f.is_nan() {
            return 0.0;
        }
        return f.clamp(-MAX_ASSIST_FORCE, MAX_ASSIST_FORCE);
    }
    f
}

/// Pelvis COM position and velocity, world frame.
pub fn pelvis_motion(
    model: &CharacterModel,
    kin: &Kinematics,
    velocities: &[SVec],
) -> (Vector3<f64>, Vector3<f64>) {
    let l = model.pelvis_link;
    let p = kin.com[l];
    let v = velocities[kin.link_node(l)].point_velocity(&p);
    (p, v)
}

/// Assist force from pelvis position `p` and velocity `v`.
pub fn assist_force_at(
    model: &CharacterModel,
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    lesson: Lesson,
    v_target: f64,
    dt: f64,
) -> ExternalForce {
    let block = root_translational_block(model);
    let fx = spd_force(
        lesson.kp,
        BALANCE_DAMPING_RATIO * lesson.kp,
        p.x,
        v.x,
        0.0,
        0.0,
        effective_mass(&block, 0),
        dt,
    );
    let fz = spd_force(0.0, lesson.kd, p.z, v.z, 0.0, v_target, effective_mass(&block, 2), dt);
    let pelvis = &model.links[model.pelvis_link];
    ExternalForce {
        link: model.pelvis_link,
        point: pelvis.com_offset,
        force: Vector3::new(clamp_force(fx, "x"), 0.0, clamp_force(fz, "z")),
    }
}

/// Balance (frontal) and propel (sagittal) force at the pelvis COM.
pub fn spd_assist_force(
    model: &CharacterModel,
    state: &SimState,
    lesson: Lesson,
    v_target: f64,
    dt: f64,
) -> ExternalForce {
    let kin = crate::dynamics::kinematics(model, &state.q);
    let vel = model.tree.velocities(&kin, &state.qd);
    let (p, v) = pelvis_motion(model, &kin, &vel);
    assist_force_at(model, &p, &v, lesson, v_target, dt)
}
