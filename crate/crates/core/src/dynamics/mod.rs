//! Reduced-coordinate articulated rigid-body simulation on a flat ground.
//!
//! Generalized coordinates follow the stage layout of the character: the root
//! occupies `[x, y, z, rx, ry, rz]` (translation, then a rotation vector),
//! followed by one angle per joint axis. Root velocities are the linear and
//! angular velocity in world coordinates, so `q` and `qd` have equal length.

pub mod contact;
pub mod tree;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use serde::{Deserialize, Serialize};

use crate::charmodel::CharacterModel;
use crate::error::{Error, Result};

pub use contact::{ContactImpulse, ContactPoint, StepReport};
pub use tree::{Kinematics, Rbi, SVec};

/// Simulation step used throughout training, s.
pub const DEFAULT_DT: f64 = 0.002;

/// Gap below which a sphere counts as touching the ground, m.
pub const CONTACT_TOLERANCE: f64 = 1e-4;

/// Generalized state of a character at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub t: f64,
    /// One flag per end-effector.
    pub contacts: Vec<bool>,
}

impl SimState {
    pub fn new(model: &CharacterModel, q: DVector<f64>, qd: DVector<f64>) -> Result<Self> {
        let n = model.dof();
        for v in [&q, &qd] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        let mut s = Self {
            q,
            qd,
            t: 0.0,
            contacts: vec![false; model.end_effectors.len()],
        };
        s.contacts = detect_contacts(model, &s).1;
        Ok(s)
    }

    /// The model's reference pose at rest.
    pub fn reference(model: &CharacterModel) -> Self {
        let n = model.dof();
        Self::new(
            model,
            DVector::from_column_slice(&model.reference_q),
            DVector::zeros(n),
        )
        .expect("reference pose has model dimension")
    }
}

/// A force applied to a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExternalForce {
    pub link: usize,
    /// Application point in the link frame, m.
    pub point: Vector3<f64>,
    /// Force in world coordinates, N.
    pub force: Vector3<f64>,
}

/// Global simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct World {
    /// Gravitational acceleration along −Y, m/s².
    pub gravity: f64,
    /// Fraction of penetration removed per step.
    pub baumgarte: f64,
    /// Cap on the penetration-recovery velocity, m/s.
    pub max_correction_velocity: f64,
    /// Constraints are added once a gap drops below this, m or rad.
    pub contact_margin: f64,
    /// Approach speed below which restitution is ignored, m/s.
    pub restitution_threshold: f64,
    pub solver_iterations: usize,
    /// Stop once no row changes its velocity by more than this.
    pub solver_tolerance: f64,
    /// Largest admissible `|qd|` before the state is declared diverged.
    pub divergence_limit: f64,
}

impl Default for World {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            baumgarte: 0.2,
            max_correction_velocity: 1.0,
            contact_margin: 0.01,
            restitution_threshold: 0.1,
            solver_iterations: 300,
            solver_tolerance: 1e-10,
            divergence_limit: 1e6,
        }
    }
}

impl World {
    pub fn zero_gravity() -> Self {
        Self {
            gravity: 0.0,
            ..Self::default()
        }
    }

    fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, -self.gravity, 0.0)
    }
}

fn check_len(model: &CharacterModel, v: &DVector<f64>) -> Result<()> {
    if v.len() != model.dof() {
        return Err(Error::DimensionMismatch {
            expected: model.dof(),
            got: v.len(),
        });
    }
    Ok(())
}

pub fn kinematics(model: &CharacterModel, q: &DVector<f64>) -> Kinematics {
    model.tree.kinematics(q)
}

/// Joint-space inertia matrix via the composite-rigid-body algorithm.
pub fn mass_matrix(model: &CharacterModel, q: &DVector<f64>) -> DMatrix<f64> {
    let kin = model.tree.kinematics(q);
    model.tree.mass_matrix(&kin)
}

fn spatial_external(model: &CharacterModel, kin: &Kinematics, ext: &[ExternalForce]) -> Vec<SVec> {
    let mut out = vec![SVec::ZERO; model.dof()];
    for e in ext {
        let p = kin.link_point(e.link, &e.point);
        let node = kin.link_node(e.link);
        out[node] = out[node].add(&SVec::new(p.cross(&e.force), e.force));
    }
    out
}

fn damping_torque(model: &CharacterModel, qd: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        qd.len(),
        model.tree.damping.iter().zip(qd.iter()).map(|(d, v)| d * v),
    )
}

/// Torques that produce `qdd` from `(q, qd)` while `ext` acts on the body.
///
/// Includes viscous joint damping, so it inverts [`forward_dynamics`].
pub fn inverse_dynamics(
    model: &CharacterModel,
    world: &World,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    qdd: &DVector<f64>,
    ext: &[ExternalForce],
) -> Result<DVector<f64>> {
    check_len(model, q)?;
    check_len(model, qd)?;
    check_len(model, qdd)?;
    let kin = model.tree.kinematics(q);
    let fext = spatial_external(model, &kin, ext);
    let tau = model
        .tree
        .inverse_dynamics(&kin, qd, qdd, &world.gravity_vector(), &fext);
    Ok(tau + damping_torque(model, qd))
}

fn factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Numerical("mass matrix is not positive definite".into()))
}

/// Generalized accelerations for joint torques `tau` and external forces.
pub fn forward_dynamics(
    model: &CharacterModel,
    world: &World,
    state: &SimState,
    tau: &DVector<f64>,
    ext: &[ExternalForce],
) -> Result<DVector<f64>> {
    check_len(model, tau)?;
    let kin = model.tree.kinematics(&state.q);
    let fext = spatial_external(model, &kin, ext);
    let zero = DVector::zeros(model.dof());
    let bias = model
        .tree
        .inverse_dynamics(&kin, &state.qd, &zero, &world.gravity_vector(), &fext);
    let rhs = tau - bias - damping_torque(model, &state.qd);
    let chol = factor(model.tree.mass_matrix(&kin))?;
    Ok(chol.solve(&rhs))
}

/// Advances the state by `dt`.
pub fn step(
    model: &CharacterModel,
    world: &World,
    state: &SimState,
    tau: &DVector<f64>,
    ext: &[ExternalForce],
    dt: f64,
) -> Result<SimState> {
    step_detailed(model, world, state, tau, ext, dt).map(|(s, _)| s)
}

/// [`step`] that also reports the constraint impulses.
///
/// Joint damping is integrated implicitly, which keeps light distal links
/// stable at the training step size.
pub fn step_detailed(
    model: &CharacterModel,
    world: &World,
    state: &SimState,
    tau: &DVector<f64>,
    ext: &[ExternalForce],
    dt: f64,
) -> Result<(SimState, StepReport)> {
    if !(dt > 0.0) {
        return Err(Error::Numerical(format!("time step must be positive, got {dt}")));
    }
    check_len(model, &state.q)?;
    check_len(model, &state.qd)?;
    check_len(model, tau)?;
    let kin = model.tree.kinematics(&state.q);
    let fext = spatial_external(model, &kin, ext);
    let zero = DVector::zeros(model.dof());
    let bias = model
        .tree
        .inverse_dynamics(&kin, &state.qd, &zero, &world.gravity_vector(), &fext);
    let damping = damping_torque(model, &state.qd);
    let mut m = model.tree.mass_matrix(&kin);
    for (i, d) in model.tree.damping.iter().enumerate() {
        m[(i, i)] += dt * d;
    }
    let chol = factor(m)?;
    let qdd = chol.solve(&(tau - bias - damping));
    let qd_star = &state.qd + qdd * dt;
    let (qd, report) = contact::solve(model, &kin, &state.q, &state.qd, &qd_star, &chol, dt, world);

    let amax = qd.amax();
    if !qd.iter().all(|v| v.is_finite()) || amax > world.divergence_limit {
        return Err(Error::Numerical(format!(
            "simulation diverged at t = {:.4} s (|qd|max = {amax:e})",
            state.t
        )));
    }
    let q = model.tree.integrate(&state.q, &qd, dt);
    let mut next = SimState {
        q,
        qd,
        t: state.t + dt,
        contacts: Vec::new(),
    };
    next.contacts = detect_contacts(model, &next).1;
    Ok((next, report))
}

/// Spheres touching the ground, and the per-end-effector contact flags.
pub fn detect_contacts(model: &CharacterModel, state: &SimState) -> (Vec<ContactPoint>, Vec<bool>) {
    let kin = model.tree.kinematics(&state.q);
    let touching = contact::sphere_contacts(model, &kin, CONTACT_TOLERANCE);
    let flags = model
        .end_effectors
        .iter()
        .map(|ee| touching.iter().any(|c| c.link == *ee))
        .collect();
    (touching, flags)
}

/// Whole-body center of mass, world frame.
pub fn com(model: &CharacterModel, state: &SimState) -> Vector3<f64> {
    com_from(model, &model.tree.kinematics(&state.q))
}

pub(crate) fn com_from(model: &CharacterModel, kin: &Kinematics) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    for (l, link) in model.links.iter().enumerate() {
        acc += kin.com[l] * link.mass;
    }
    acc / model.total_mass()
}

pub fn com_velocity(model: &CharacterModel, state: &SimState) -> Vector3<f64> {
    let kin = model.tree.kinematics(&state.q);
    let v = model.tree.velocities(&kin, &state.qd);
    let mut acc = Vector3::zeros();
    for (l, link) in model.links.iter().enumerate() {
        acc += v[kin.link_node(l)].point_velocity(&kin.com[l]) * link.mass;
    }
    acc / model.total_mass()
}

/// Kinetic plus gravitational potential energy (zero at `y = 0`), J.
pub fn total_energy(model: &CharacterModel, world: &World, state: &SimState) -> f64 {
    let kin = model.tree.kinematics(&state.q);
    let m = model.tree.mass_matrix(&kin);
    let kinetic = 0.5 * state.qd.dot(&(&m * &state.qd));
    let potential: f64 = model
        .links
        .iter()
        .enumerate()
        .map(|(l, link)| link.mass * world.gravity * kin.com[l].y)
        .sum();
    kinetic + potential
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charmodel::tests::SINGLE_BODY;

    #[test]
    fn free_body_falls() {
        let model = CharacterModel::from_json_str(SINGLE_BODY).unwrap();
        let mut q = DVector::zeros(6);
        q[1] = 3.0;
        let s = SimState::new(&model, q, DVector::zeros(6)).unwrap();
        let qdd = forward_dynamics(&model, &World::default(), &s, &DVector::zeros(6), &[]).unwrap();
        assert!((qdd[0]).abs() < 1e-12);
        assert!((qdd[1] + 9.81).abs() < 1e-12);
        assert!((qdd[2]).abs() < 1e-12);
        for i in 3..6 {
            assert!(qdd[i].abs() < 1e-12);
        }
    }

    #[test]
    fn bad_dt_rejected() {
        let model = CharacterModel::biped9();
        let s = SimState::reference(&model);
        let tau = DVector::zeros(model.dof());
        assert!(step(&model, &World::default(), &s, &tau, &[], 0.0).is_err());
    }
}
