//! The locomotion MDP: observation, reward, termination and control-rate
//! sub-stepping with the assistant in the loop.

use std::sync::Arc;

use nalgebra::{DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assistant::{assist_force_at, milestone_strength, pelvis_motion, Lesson, LessonRange};
use crate::charmodel::{CharacterModel, ROOT_SAGITTAL_DOF};
use crate::dynamics::{self, SimState, World};
use crate::error::{Error, Result};

/// Weights of the reward terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Final target velocity along +Z, m/s (negative walks backwards).
    pub v_hat_final: f64,
    pub w_v: f64,
    pub w_ux: f64,
    pub w_uy: f64,
    pub w_uz: f64,
    pub w_l: f64,
    /// Alive bonus per control step.
    pub e_a: f64,
    pub w_e: f64,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("w_v", self.w_v),
            ("w_ux", self.w_ux),
            ("w_uy", self.w_uy),
            ("w_uz", self.w_uz),
            ("w_l", self.w_l),
            ("e_a", self.e_a),
            ("w_e", self.w_e),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: format!("reward.{name}"),
                    message: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        if !self.v_hat_final.is_finite() {
            return Err(Error::Config {
                field: "reward.v_hat_final".into(),
                message: "must be finite".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    /// Simulation steps per control step.
    pub substeps: usize,
    /// Rollout horizon, s.
    pub horizon: f64,
    /// Rollout horizon in control steps.
    pub max_steps: usize,
    /// Half-width of the uniform reset noise on each `q` and `qd` entry.
    pub reset_noise: f64,
    /// Terminate when the COM drops below this fraction of its reference height.
    pub com_low_fraction: f64,
    /// Largest torso tilt from vertical, rad.
    pub max_tilt: f64,
    /// Window of the average-velocity estimate, s.
    pub velocity_window: f64,
    /// Target acceleration of the velocity ramp, m/s².
    pub target_accel: f64,
    /// Milestone drop, percent retained.
    pub milestone_k: f64,
    /// Milestone period, s.
    pub milestone_p: f64,
    pub world: World,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: dynamics::DEFAULT_DT,
            substeps: 15,
            horizon: 9.0,
            max_steps: 297,
            reset_noise: 0.005,
            com_low_fraction: 0.5,
            max_tilt: 0.8,
            velocity_window: 2.0,
            target_accel: 2.0,
            milestone_k: 25.0,
            milestone_p: 3.0,
            world: World::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.dt > 0.0) {
            return bad("env.dt", "must be positive");
        }
        if self.substeps == 0 {
            return bad("env.substeps", "must be at least 1");
        }
        if !(self.horizon > 0.0) || self.max_steps == 0 {
            return bad("env.horizon", "must be positive");
        }
        if !(self.milestone_k > 0.0 && self.milestone_k <= 100.0) {
            return bad("env.milestone_k", "must lie in (0, 100]");
        }
        if !(self.milestone_p > 0.0) {
            return bad("env.milestone_p", "must be positive");
        }
        if !(self.velocity_window > 0.0) {
            return bad("env.velocity_window", "must be positive");
        }
        Ok(())
    }

    pub fn control_dt(&self) -> f64 {
        self.dt * self.substeps as f64
    }
}

/// Why a rollout ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ComLow,
    Tilt,
    Horizon,
    SimDiverged,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::ComLow => "com_low",
            Termination::Tilt => "tilt",
            Termination::Horizon => "horizon",
            Termination::SimDiverged => "sim_diverged",
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five reward terms before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub e_v: f64,
    pub e_u: f64,
    pub e_l: f64,
    pub e_a: f64,
    pub e_e: f64,
}

impl RewardComponents {
    pub fn total(&self, cfg: &RewardConfig) -> f64 {
        cfg.w_v * self.e_v + self.e_u + cfg.w_l * self.e_l + self.e_a + cfg.w_e * self.e_e
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    pub components: RewardComponents,
    /// Assistance in effect at the end of the step.
    pub lesson: Lesson,
    /// Mean assist force over the sub-steps, N.
    pub assist_fx: f64,
    pub assist_fz: f64,
    /// Applied joint torques, one per action entry.
    pub torques: Vec<f64>,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// The interface a learner needs from an episodic task.
pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    /// Assistance used by subsequent rollouts.
    fn set_lesson(&mut self, range: LessonRange);
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> StepResult;
}

/// `sign(v_final) * min(accel * t, |v_final|)`.
pub fn target_velocity(t: f64, v_final: f64, accel: f64) -> f64 {
    v_final.signum() * (accel * t).min(v_final.abs())
}

/// Average sagittal COM velocity over the trailing window.
///
/// `history[n]` is the COM position at time `n * dt`; the last entry is now.
/// With a single sample the instantaneous velocity `v_now` is returned.
pub fn average_velocity(history: &[f64], dt: f64, window: f64, v_now: f64) -> f64 {
    let n = history.len();
    if n <= 1 {
        return v_now;
    }
    let back = ((window / dt).round() as usize).min(n - 1);
    let span = back as f64 * dt;
    (history[n - 1] - history[n - 1 - back]) / span
}

/// Intrinsic X-Y-Z angles `(phi_x, phi_y, phi_z)` with `R = Rx Ry Rz`.
pub fn xyz_angles(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let phi_y = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let phi_x = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let phi_z = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (phi_x, phi_y, phi_z)
}

/// Angle between the torso's up axis and world vertical.
pub fn tilt(r: &Matrix3<f64>) -> f64 {
    r[(1, 1)].clamp(-1.0, 1.0).acos()
}

/// Reward terms for the state at the end of a control step.
pub fn reward_components(
    cfg: &RewardConfig,
    v_avg: f64,
    v_hat: f64,
    torso: &Matrix3<f64>,
    com_x: f64,
    action: &[f64],
) -> RewardComponents {
    let (px, py, pz) = xyz_angles(torso);
    let a_norm = action.iter().map(|a| a.clamp(-1.0, 1.0).powi(2)).sum::<f64>().sqrt();
    RewardComponents {
        e_v: -(v_avg - v_hat).abs(),
        e_u: -(cfg.w_ux * px.abs() + cfg.w_uy * py.abs() + cfg.w_uz * pz.abs()),
        e_l: -com_x.abs(),
        e_a: cfg.e_a,
        e_e: -a_norm,
    }
}

/// Weighted reward and its components.
pub fn reward(
    cfg: &RewardConfig,
    v_avg: f64,
    v_hat: f64,
    torso: &Matrix3<f64>,
    com_x: f64,
    action: &[f64],
) -> (f64, RewardComponents) {
    let c = reward_components(cfg, v_avg, v_hat, torso, com_x, action);
    (c.total(cfg), c)
}

/// Whether a state ends the rollout, checked in the order low COM, tilt, horizon.
pub fn check_termination(
    model: &CharacterModel,
    config: &EnvConfig,
    reference_com_height: f64,
    state: &SimState,
    control_steps: usize,
) -> Option<Termination> {
    let kin = dynamics::kinematics(model, &state.q);
    let com = dynamics::com_from(model, &kin);
    if com.y < config.com_low_fraction * reference_com_height {
        return Some(Termination::ComLow);
    }
    if tilt(kin.link_rotation(model.torso_link)) > config.max_tilt {
        return Some(Termination::Tilt);
    }
    if control_steps >= config.max_steps || state.t >= config.horizon - 1e-9 {
        return Some(Termination::Horizon);
    }
    None
}

/// Locomotion environment for one character.
#[derive(Debug, Clone)]
pub struct LocomotionEnv {
    model: Arc<CharacterModel>,
    config: EnvConfig,
    reward: RewardConfig,
    range: LessonRange,
    reference_com_height: f64,
    state: SimState,
    substep: u64,
    control_steps: usize,
    com_z: Vec<f64>,
    done: bool,
}

impl LocomotionEnv {
    pub fn new(model: Arc<CharacterModel>, config: EnvConfig, reward: RewardConfig) -> Result<Self> {
        config.validate()?;
        reward.validate()?;
        let state = SimState::reference(&model);
        let reference_com_height = dynamics::com(&model, &state).y;
        Ok(Self {
            model,
            config,
            reward,
            range: LessonRange::constant(Lesson::NONE),
            reference_com_height,
            state,
            substep: 0,
            control_steps: 0,
            com_z: Vec::new(),
            done: true,
        })
    }

    pub fn model(&self) -> &CharacterModel {
        &self.model
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn lesson_range(&self) -> LessonRange {
        self.range
    }

    pub fn control_steps(&self) -> usize {
        self.control_steps
    }

    /// Simulation time derived from the integer step counter.
    pub fn time(&self) -> f64 {
        self.substep as f64 * self.config.dt
    }

    pub fn target_velocity(&self, t: f64) -> f64 {
        target_velocity(t, self.reward.v_hat_final, self.config.target_accel)
    }

    /// Starts a rollout from an explicit state.
    pub fn reset_to(&mut self, mut state: SimState) -> Result<Vec<f64>> {
        if state.q.len() != self.model.dof() || state.qd.len() != self.model.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dof(),
                got: state.q.len(),
            });
        }
        state.t = 0.0;
        state.contacts = dynamics::detect_contacts(&self.model, &state).1;
        self.state = state;
        self.substep = 0;
        self.control_steps = 0;
        self.com_z.clear();
        self.com_z.push(dynamics::com(&self.model, &self.state).z);
        self.done = false;
        Ok(self.observation())
    }

    /// Reference pose plus uniform noise on every `q` and `qd` entry.
    pub fn reset_with_seed(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.config.reset_noise;
        let n = self.model.dof();
        let noise = |rng: &mut ChaCha8Rng| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        let q = DVector::from_iterator(n, self.model.reference_q.iter().map(|v| v + noise(&mut rng)));
        let qd = DVector::from_iterator(n, (0..n).map(|_| noise(&mut rng)));
        let state = SimState {
            q,
            qd,
            t: 0.0,
            contacts: Vec::new(),
        };
        self.reset_to(state).expect("reference pose has model dimension")
    }

    /// `[q without sagittal root position, qd, contact flags, target velocity]`.
    pub fn observation(&self) -> Vec<f64> {
        let s = &self.state;
        let mut o = Vec::with_capacity(self.model.obs_dim());
        o.extend(
            s.q.iter()
                .enumerate()
                .filter(|(i, _)| *i != ROOT_SAGITTAL_DOF)
                .map(|(_, v)| *v),
        );
        o.extend(s.qd.iter());
        o.extend(s.contacts.iter().map(|c| if *c { 1.0 } else { 0.0 }));
        o.push(self.target_velocity(self.time()));
        o
    }

    /// Applies one action for `substeps` simulation steps.
    pub fn step_action(&mut self, action: &[f64]) -> Result<StepResult> {
        let model = self.model.clone();
        let act_dim = model.action_dim();
        if action.len() != act_dim {
            return Err(Error::DimensionMismatch {
                expected: act_dim,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numerical("action has non-finite entries".into()));
        }
        let clamped: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let mut tau = DVector::zeros(model.dof());
        let mut torques = Vec::with_capacity(act_dim);
        for ((dof, limit), a) in model.actuated_dofs().iter().zip(model.torque_limits()).zip(&clamped) {
            tau[*dof] = a * limit;
            torques.push(a * limit);
        }

        let cfg = &self.config;
        let dt = cfg.dt;
        let (mut fx, mut fz) = (0.0, 0.0);
        let mut diverged = false;
        for _ in 0..cfg.substeps {
            let t = self.substep as f64 * dt;
            let lesson = milestone_strength(&self.range, t, cfg.milestone_k, cfg.milestone_p);
            let ext = if lesson == Lesson::NONE {
                vec![]
            } else {
                let kin = dynamics::kinematics(&model, &self.state.q);
                let vel = model.tree.velocities(&kin, &self.state.qd);
                let (p, v) = pelvis_motion(&model, &kin, &vel);
                let v_hat = self.target_velocity(t);
                let f = assist_force_at(&model, &p, &v, lesson, v_hat, dt);
                fx += f.force.x;
                fz += f.force.z;
                vec![f]
            };
            match dynamics::step(&model, &cfg.world, &self.state, &tau, &ext, dt) {
                Ok(next) => {
                    self.state = next;
                    self.substep += 1;
                    self.state.t = self.substep as f64 * dt;
                    self.com_z.push(dynamics::com(&model, &self.state).z);
                }
                Err(e) => {
                    log::debug!("rollout truncated: {e}");
                    diverged = true;
                    break;
                }
            }
        }
        self.control_steps += 1;
        let n_sub = cfg.substeps as f64;
        let t = self.time();
        let lesson = milestone_strength(&self.range, t, cfg.milestone_k, cfg.milestone_p);
        let mut info = StepInfo {
            lesson,
            assist_fx: fx / n_sub,
            assist_fz: fz / n_sub,
            torques,
            ..StepInfo::default()
        };
        if diverged {
            info.termination = Some(Termination::SimDiverged);
            self.done = true;
            return Ok(StepResult {
                observation: self.observation(),
                reward: 0.0,
                done: true,
                info,
            });
        }

        let kin = dynamics::kinematics(&model, &self.state.q);
        let com = dynamics::com_from(&model, &kin);
        let v_now = dynamics::com_velocity(&model, &self.state).z;
        let v_avg = average_velocity(&self.com_z, dt, cfg.velocity_window, v_now);
        let v_hat = self.target_velocity(t);
        let (r, comps) = reward(&self.reward, v_avg, v_hat, kin.link_rotation(model.torso_link), com.x, &clamped);
        info.components = comps;
        info.termination = check_termination(&model, cfg, self.reference_com_height, &self.state, self.control_steps);
        self.done = info.termination.is_some();
        Ok(StepResult {
            observation: self.observation(),
            reward: r,
            done: self.done,
            info,
        })
    }
}

impl Environment for LocomotionEnv {
    fn obs_dim(&self) -> usize {
        self.model.obs_dim()
    }

    fn act_dim(&self) -> usize {
        self.model.action_dim()
    }

    fn set_lesson(&mut self, range: LessonRange) {
        self.range = range;
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.reset_with_seed(seed)
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        match self.step_action(action) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("invalid action: {e}");
                self.done = true;
                StepResult {
                    observation: self.observation(),
                    reward: 0.0,
                    done: true,
                    info: StepInfo {
                        termination: Some(Termination::SimDiverged),
                        ..StepInfo::default()
                    },
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_angles_invert_composition() {
        use nalgebra::{Rotation3, Vector3};
        let (a, b, c) = (0.3, -0.5, 0.9);
        let r = Rotation3::from_axis_angle(&Vector3::x_axis(), a)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), b)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), c);
        let (x, y, z) = xyz_angles(r.matrix());
        assert!((x - a).abs() < 1e-12 && (y - b).abs() < 1e-12 && (z - c).abs() < 1e-12);
    }

    #[test]
    fn velocity_ramp() {
        assert_eq!(target_velocity(0.0, 1.0, 2.0), 0.0);
        assert_eq!(target_velocity(0.25, 1.0, 2.0), 0.5);
        assert_eq!(target_velocity(0.7, 1.0, 2.0), 1.0);
        assert_eq!(target_velocity(0.25, -1.5, 2.0), -0.5);
    }
}
