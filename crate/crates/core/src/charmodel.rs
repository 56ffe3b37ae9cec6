//! Articulated character descriptions.
//!
//! A character is a tree of rigid links connected by joints. The first joint
//! is always a 6-DOF free root; every other joint is a ball (3 DOF),
//! universal (2 DOF) or revolute (1 DOF) joint. Multi-DOF joints are
//! expanded into sequential single-axis stages, so the generalized
//! coordinates of a ball joint are three intrinsic angles about its declared
//! axes.
//!
//! World axes: +X is frontal (left/right), +Y is vertical, +Z is sagittal
//! (forward). The free root uses coordinates `[x, y, z, rx, ry, rz]` where
//! `r` is a rotation vector; its velocities are world linear and angular
//! velocity. Under the left/right reflection `x -> -x` the entries `x`, `ry`,
//! `rz` (and their rates) change sign.
//!
//! Left/right symmetry is declared as data: `mirror_obs` and `mirror_act` are
//! signed permutations over the observation and action vectors.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::tree::KinematicTree;
use crate::error::{Error, Result};

/// Index of the sagittal (forward) root translation coordinate.
pub const ROOT_SAGITTAL_DOF: usize = 2;

/// Number of generalized coordinates of the free root joint.
pub const ROOT_DOF: usize = 6;

/// The shipped simplified biped.
pub const BIPED9: &str = include_str!("../assets/biped9.model");

#[derive(Debug, Clone, PartialEq)]
pub struct SignedPermutation {
    target_index: Vec<usize>,
    sign: Vec<f64>,
}

/// Why a candidate signed permutation was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationDefect {
    LengthMismatch,
    NotAPermutation,
    BadSign,
    NotInvolution,
}

impl SignedPermutation {
    /// Builds `v ↦ w` with `w[i] = sign[i] * v[target_index[i]]`.
    pub fn new(
        target_index: Vec<usize>,
        sign: Vec<i32>,
    ) -> std::result::Result<Self, PermutationDefect> {
        let n = target_index.len();
        if sign.len() != n {
            return Err(PermutationDefect::LengthMismatch);
        }
        let mut seen = vec![false; n];
        for &t in &target_index {
            if t >= n || seen[t] {
                return Err(PermutationDefect::NotAPermutation);
            }
            seen[t] = true;
        }
        if sign.iter().any(|&s| s != 1 && s != -1) {
            return Err(PermutationDefect::BadSign);
        }
        for i in 0..n {
            let j = target_index[i];
            if target_index[j] != i || sign[i] * sign[j] != 1 {
                return Err(PermutationDefect::NotInvolution);
            }
        }
        Ok(Self {
            target_index,
            sign: sign.into_iter().map(f64::from).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            target_index: (0..n).collect(),
            sign: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }

    pub fn target(&self, i: usize) -> usize {
        self.target_index[i]
    }

    pub fn sign(&self, i: usize) -> f64 {
        self.sign[i]
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.apply_into(v, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        if v.len() != self.len() || out.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: if v.len() != self.len() { v.len() } else { out.len() },
            });
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.sign[i] * v[self.target_index[i]];
        }
        Ok(())
    }

    /// Dense matrix form `P` with `P v = apply(v)`.
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.len();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, self.target_index[i])] = self.sign[i];
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CollisionShape {
    Sphere { center: [f64; 3], radius: f64 },
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64 },
}

impl CollisionShape {
    /// Spheres used for plane contact. A capsule contributes its two end caps.
    pub fn contact_spheres(&self) -> Vec<(Vector3<f64>, f64)> {
        match *self {
            CollisionShape::Sphere { center, radius } => vec![(Vector3::from(center), radius)],
            CollisionShape::Capsule { a, b, radius } => {
                vec![(Vector3::from(a), radius), (Vector3::from(b), radius)]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub mass: f64,
    /// Rotational inertia about the COM, in the link frame.
    pub inertia: Matrix3<f64>,
    pub com_offset: Vector3<f64>,
    pub collision_shapes: Vec<CollisionShape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Free6,
    Ball3,
    Universal2,
    Revolute1,
}

impl JointKind {
    pub fn dof(self) -> usize {
        match self {
            JointKind::Free6 => 6,
            JointKind::Ball3 => 3,
            JointKind::Universal2 => 2,
            JointKind::Revolute1 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Stage axes in the parent link frame (empty for the free root).
    pub axes: Vec<Vector3<f64>>,
    pub parent_link: Option<usize>,
    pub child_link: usize,
    /// Joint origin in the parent link frame.
    pub anchor: Vector3<f64>,
    /// Per-DOF `(lower, upper)`; unbounded coordinates use infinities.
    pub position_limits: Vec<(f64, f64)>,
    pub torque_limits: Vec<f64>,
    pub actuated: bool,
    /// Viscous joint damping, N·m·s/rad.
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactParams {
    pub friction: f64,
    pub restitution: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            friction: 1.0,
            restitution: 0.0,
        }
    }
}

/// A validated, immutable character description.
#[derive(Debug, Clone)]
pub struct CharacterModel {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub end_effectors: Vec<usize>,
    pub mirror_obs: SignedPermutation,
    pub mirror_act: SignedPermutation,
    /// Action indices of the left leg actuators.
    pub left_leg_dofs: Vec<usize>,
    /// Action indices of the right leg actuators.
    pub right_leg_dofs: Vec<usize>,
    pub torso_link: usize,
    pub pelvis_link: usize,
    pub reference_q: Vec<f64>,
    pub contact: ContactParams,
    dof_offsets: Vec<usize>,
    dof_count: usize,
    actuated_dofs: Vec<usize>,
    torque_limits: Vec<f64>,
    pub(crate) tree: KinematicTree,
}

impl CharacterModel {
    pub fn dof(&self) -> usize {
        self.dof_count
    }

    pub fn action_dim(&self) -> usize {
        self.actuated_dofs.len()
    }

    /// `[q without root z, qd, contact flags, target velocity]`.
    pub fn obs_dim(&self) -> usize {
        (self.dof_count - 1) + self.dof_count + self.end_effectors.len() + 1
    }

    /// First generalized coordinate of joint `j`.
    pub fn dof_offset(&self, j: usize) -> usize {
        self.dof_offsets[j]
    }

    /// Generalized-coordinate index of each action entry.
    pub fn actuated_dofs(&self) -> &[usize] {
        &self.actuated_dofs
    }

    /// Torque limit for each action entry, N·m.
    pub fn torque_limits(&self) -> &[f64] {
        &self.torque_limits
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    /// Per-DOF position limits, root coordinates unbounded.
    pub fn position_limits(&self) -> Vec<(f64, f64)> {
        self.joints
            .iter()
            .flat_map(|j| j.position_limits.iter().copied())
            .collect()
    }

    pub fn mirror_observation(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mirror_obs.apply(obs)
    }

    pub fn mirror_action(&self, act: &[f64]) -> Result<Vec<f64>> {
        self.mirror_act.apply(act)
    }

    pub fn from_json_str(document: &str) -> Result<Self> {
        let raw: RawModel =
            serde_json::from_str(document).map_err(|e| Error::Parse(e.to_string()))?;
        raw.validate()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn biped9() -> Self {
        Self::from_json_str(BIPED9).expect("shipped biped model is valid")
    }
}

/// Parses and validates a character document.
pub fn load_character(document: &str) -> Result<CharacterModel> {
    CharacterModel::from_json_str(document)
}

pub fn mirror_observation(obs: &[f64], model: &CharacterModel) -> Result<Vec<f64>> {
    model.mirror_observation(obs)
}

pub fn mirror_action(act: &[f64], model: &CharacterModel) -> Result<Vec<f64>> {
    model.mirror_action(act)
}

// ---------------------------------------------------------------------------
// Document schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(default = "default_name")]
    name: String,
    links: Vec<RawLink>,
    joints: Vec<RawJoint>,
    end_effectors: Vec<usize>,
    mirror_obs: RawPermutation,
    mirror_act: RawPermutation,
    left_leg_dofs: Vec<usize>,
    right_leg_dofs: Vec<usize>,
    #[serde(default)]
    torso_link: Option<usize>,
    #[serde(default)]
    pelvis_link: Option<usize>,
    #[serde(default)]
    reference_q: Option<Vec<f64>>,
    #[serde(default)]
    contact: ContactParams,
}

fn default_name() -> String {
    "character".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    #[serde(default)]
    name: String,
    mass: f64,
    inertia: [[f64; 3]; 3],
    #[serde(default)]
    com_offset: [f64; 3],
    #[serde(default)]
    collision_shapes: Vec<CollisionShape>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    #[serde(default)]
    name: String,
    kind: JointKind,
    #[serde(default)]
    axes: Vec<[f64; 3]>,
    parent_link: Option<usize>,
    child_link: usize,
    #[serde(default)]
    anchor: [f64; 3],
    #[serde(default)]
    position_limits: Option<Vec<[Option<f64>; 2]>>,
    #[serde(default)]
    torque_limits: Vec<f64>,
    #[serde(default)]
    actuated: Option<bool>,
    #[serde(default)]
    damping: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPermutation {
    target_index: Vec<usize>,
    sign: Vec<i32>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn finite3(v: &[f64; 3]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn permutation(name: &str, raw: RawPermutation, expected_len: usize) -> Result<SignedPermutation> {
    if raw.target_index.len() != expected_len {
        return Err(invalid(format!(
            "{name} has length {} but the model requires {expected_len}",
            raw.target_index.len()
        )));
    }
    SignedPermutation::new(raw.target_index, raw.sign).map_err(|d| match d {
        PermutationDefect::LengthMismatch => invalid(format!("{name} sign/target lengths differ")),
        PermutationDefect::NotAPermutation => invalid(format!("{name} not a permutation")),
        PermutationDefect::BadSign => invalid(format!("{name} signs must be +1 or -1")),
        PermutationDefect::NotInvolution => invalid(format!("{name} is not an involution")),
    })
}

impl RawModel {
    fn validate(self) -> Result<CharacterModel> {
        if self.links.is_empty() {
            return Err(invalid("model has no links"));
        }
        let n_links = self.links.len();

        let mut links = Vec::with_capacity(n_links);
        for (i, l) in self.links.into_iter().enumerate() {
            if !(l.mass > 0.0 && l.mass.is_finite()) {
                return Err(invalid(format!("link {i} mass must be positive")));
            }
            let inertia = Matrix3::from_fn(|r, c| l.inertia[r][c]);
            if (inertia - inertia.transpose()).abs().max() > 1e-9 * (1.0 + inertia.abs().max()) {
                return Err(invalid(format!("link {i} inertia is not symmetric")));
            }
            if inertia.cholesky().is_none() || !inertia.iter().all(|x| x.is_finite()) {
                return Err(invalid(format!("link {i} inertia is not positive definite")));
            }
            if !finite3(&l.com_offset) {
                return Err(invalid(format!("link {i} com_offset is not finite")));
            }
            for s in &l.collision_shapes {
                let ok = match s {
                    CollisionShape::Sphere { center, radius } => finite3(center) && *radius > 0.0,
                    CollisionShape::Capsule { a, b, radius } => {
                        finite3(a) && finite3(b) && *radius > 0.0
                    }
                };
                if !ok {
                    return Err(invalid(format!("link {i} has an invalid collision shape")));
                }
            }
            links.push(Link {
                name: if l.name.is_empty() { format!("link{i}") } else { l.name },
                mass: l.mass,
                inertia,
                com_offset: Vector3::from(l.com_offset),
                collision_shapes: l.collision_shapes,
            });
        }

        if self.joints.len() != n_links {
            return Err(invalid(format!(
                "expected one joint per link ({n_links}), found {}",
                self.joints.len()
            )));
        }

        // child link -> joint index
        let mut owner = vec![None; n_links];
        let mut joints = Vec::with_capacity(n_links);
        let mut dof_offsets = Vec::with_capacity(n_links);
        let mut dof_count = 0;
        let mut actuated_dofs = Vec::new();
        let mut torque_limits = Vec::new();

        for (ji, j) in self.joints.into_iter().enumerate() {
            let jname = if j.name.is_empty() { format!("joint{ji}") } else { j.name };
            if j.child_link >= n_links {
                return Err(invalid(format!("joint {jname}: child_link out of range")));
            }
            if owner[j.child_link].is_some() {
                return Err(invalid(format!(
                    "joint {jname}: link {} already has a parent joint",
                    j.child_link
                )));
            }
            if ji == 0 {
                if j.kind != JointKind::Free6 || j.parent_link.is_some() {
                    return Err(invalid("first joint must be a free6 root with no parent"));
                }
            } else {
                if j.kind == JointKind::Free6 {
                    return Err(invalid(format!("joint {jname}: only the root may be free6")));
                }
                let p = j
                    .parent_link
                    .ok_or_else(|| invalid(format!("joint {jname}: missing parent_link")))?;
                if p >= n_links {
                    return Err(invalid(format!("joint {jname}: parent_link out of range")));
                }
                // The parent link must already be attached by an earlier joint,
                // which makes the tree connected, acyclic and topologically ordered.
                match owner[p] {
                    Some(pj) if pj < ji => {}
                    _ => {
                        return Err(invalid(format!(
                            "joint {jname}: parent joint index must precede {ji}"
                        )))
                    }
                }
            }
            owner[j.child_link] = Some(ji);

            let dof = j.kind.dof();
            let axes: Vec<Vector3<f64>> = if j.kind == JointKind::Free6 {
                if !j.axes.is_empty() {
                    return Err(invalid("free6 root axes are fixed and must be omitted"));
                }
                Vec::new()
            } else {
                if j.axes.len() != dof {
                    return Err(invalid(format!(
                        "joint {jname}: expected {dof} axes, found {}",
                        j.axes.len()
                    )));
                }
                let mut out = Vec::with_capacity(dof);
                for a in &j.axes {
                    let v = Vector3::from(*a);
                    if !finite3(a) || (v.norm() - 1.0).abs() > 1e-9 {
                        return Err(invalid(format!("joint {jname}: axes must be unit length")));
                    }
                    out.push(v);
                }
                out
            };
            if !finite3(&j.anchor) {
                return Err(invalid(format!("joint {jname}: anchor is not finite")));
            }

            let position_limits: Vec<(f64, f64)> = match j.position_limits {
                None => vec![(f64::NEG_INFINITY, f64::INFINITY); dof],
                Some(lims) => {
                    if lims.len() != dof {
                        return Err(invalid(format!(
                            "joint {jname}: expected {dof} position limits"
                        )));
                    }
                    let mut out = Vec::with_capacity(dof);
                    for [lo, hi] in lims {
                        let lo = lo.unwrap_or(f64::NEG_INFINITY);
                        let hi = hi.unwrap_or(f64::INFINITY);
                        if lo.is_nan() || hi.is_nan() || lo > hi {
                            return Err(invalid(format!(
                                "joint {jname}: lower limit exceeds upper limit"
                            )));
                        }
                        out.push((lo, hi));
                    }
                    out
                }
            };

            let actuated = j.actuated.unwrap_or(j.kind != JointKind::Free6);
            if ji == 0 && actuated {
                return Err(invalid("root free joint must be unactuated"));
            }
            if actuated {
                if j.torque_limits.len() != dof {
                    return Err(invalid(format!(
                        "joint {jname}: expected {dof} torque limits"
                    )));
                }
                if j.torque_limits.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                    return Err(invalid(format!(
                        "joint {jname}: torque limits must be finite and positive"
                    )));
                }
                for k in 0..dof {
                    actuated_dofs.push(dof_count + k);
                    torque_limits.push(j.torque_limits[k]);
                }
            } else if !j.torque_limits.is_empty() {
                return Err(invalid(format!(
                    "joint {jname}: unactuated joints take no torque limits"
                )));
            }
            if !(j.damping >= 0.0 && j.damping.is_finite()) {
                return Err(invalid(format!("joint {jname}: damping must be >= 0")));
            }

            dof_offsets.push(dof_count);
            dof_count += dof;
            joints.push(Joint {
                name: jname,
                kind: j.kind,
                axes,
                parent_link: j.parent_link,
                child_link: j.child_link,
                anchor: Vector3::from(j.anchor),
                position_limits,
                torque_limits: j.torque_limits,
                actuated,
                damping: j.damping,
            });
        }

        for &e in &self.end_effectors {
            if e >= n_links {
                return Err(invalid(format!("end effector {e} out of range")));
            }
        }
        let obs_dim = (dof_count - 1) + dof_count + self.end_effectors.len() + 1;
        let act_dim = actuated_dofs.len();
        let mirror_obs = permutation("mirror_obs", self.mirror_obs, obs_dim)?;
        let mirror_act = permutation("mirror_act", self.mirror_act, act_dim)?;

        let left = self.left_leg_dofs;
        let right = self.right_leg_dofs;
        if left.iter().chain(&right).any(|&i| i >= act_dim) {
            return Err(invalid("leg dof index out of range"));
        }
        if left.len() != right.len() {
            return Err(invalid("left_leg_dofs and right_leg_dofs differ in size"));
        }
        let mut marks = vec![0u8; act_dim];
        for &i in &left {
            marks[i] |= 1;
        }
        for &i in &right {
            marks[i] |= 2;
        }
        if marks.iter().any(|&m| m == 3) {
            return Err(invalid("left_leg_dofs and right_leg_dofs overlap"));
        }
        let mut dup = vec![false; act_dim];
        for &i in left.iter().chain(&right) {
            if dup[i] {
                return Err(invalid("duplicate leg dof index"));
            }
            dup[i] = true;
        }
        for &i in &left {
            if marks[mirror_act.target(i)] != 2 {
                return Err(invalid("mirror_act does not map left_leg_dofs onto right_leg_dofs"));
            }
        }

        let torso_link = self.torso_link.unwrap_or(0);
        let pelvis_link = self.pelvis_link.unwrap_or(0);
        if torso_link >= n_links || pelvis_link >= n_links {
            return Err(invalid("torso_link/pelvis_link out of range"));
        }

        let reference_q = self.reference_q.unwrap_or_else(|| vec![0.0; dof_count]);
        if reference_q.len() != dof_count || reference_q.iter().any(|x| !x.is_finite()) {
            return Err(invalid(format!(
                "reference_q must hold {dof_count} finite values"
            )));
        }
        let c = self.contact;
        if !(c.friction >= 0.0 && c.friction.is_finite()) || !(0.0..=1.0).contains(&c.restitution)
        {
            return Err(invalid("contact friction must be >= 0 and restitution in [0, 1]"));
        }

        let tree = KinematicTree::build(&links, &joints);
        Ok(CharacterModel {
            name: self.name,
            links,
            joints,
            end_effectors: self.end_effectors,
            mirror_obs,
            mirror_act,
            left_leg_dofs: left,
            right_leg_dofs: right,
            torso_link,
            pelvis_link,
            reference_q,
            contact: c,
            dof_offsets,
            dof_count,
            actuated_dofs,
            torque_limits,
            tree,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SINGLE_BODY: &str = r#"{
        "name": "block",
        "links": [{"mass": 2.0, "inertia": [[0.1,0,0],[0,0.1,0],[0,0,0.1]]}],
        "joints": [{"kind": "free6", "parent_link": null, "child_link": 0}],
        "end_effectors": [],
        "mirror_obs": {"target_index": [0,1,2,3,4,5,6,7,8,9,10,11],
                       "sign": [-1,1,1,-1,-1,-1,1,1,1,-1,-1,1]},
        "mirror_act": {"target_index": [], "sign": []},
        "left_leg_dofs": [], "right_leg_dofs": []
    }"#;

    #[test]
    fn minimal_free_body_loads() {
        let m = load_character(SINGLE_BODY).unwrap();
        assert_eq!(m.links.len(), 1);
        assert_eq!(m.dof(), 6);
        assert_eq!(m.action_dim(), 0);
        assert!(m.mirror_act.is_empty());
        assert_eq!(m.obs_dim(), 12);
    }

    #[test]
    fn duplicated_mirror_index_rejected() {
        let doc = SINGLE_BODY.replace("[0,1,2,3,4,5,6,7,8,9,10,11]", "[0,0,2,3,4,5,6,7,8,9,10,11]");
        match load_character(&doc) {
            Err(Error::Validation(msg)) => assert_eq!(msg, "mirror_obs not a permutation"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(load_character("{ not json"), Err(Error::Parse(_))));
        assert!(matches!(load_character("{\"links\": []}"), Err(Error::Parse(_))));
    }

    #[test]
    fn non_involution_rejected() {
        // 0 -> 1 -> 2 -> 0 cycle is a permutation but not an involution.
        assert_eq!(
            SignedPermutation::new(vec![1, 2, 0], vec![1, 1, 1]),
            Err(PermutationDefect::NotInvolution)
        );
        assert_eq!(
            SignedPermutation::new(vec![1, 0], vec![1, -1]),
            Err(PermutationDefect::NotInvolution)
        );
    }

    #[test]
    fn bad_mass_rejected() {
        let doc = SINGLE_BODY.replace("\"mass\": 2.0", "\"mass\": 0.0");
        assert!(matches!(load_character(&doc), Err(Error::Validation(_))));
    }

    #[test]
    fn non_pd_inertia_rejected() {
        let doc = SINGLE_BODY.replace("[[0.1,0,0],[0,0.1,0],[0,0,0.1]]", "[[0.1,0,0],[0,-0.1,0],[0,0,0.1]]");
        let err = load_character(&doc).unwrap_err().to_string();
        assert!(err.contains("positive definite"), "{err}");
    }

    #[test]
    fn biped_shape() {
        let m = CharacterModel::biped9();
        assert_eq!(m.links.len(), 9);
        assert_eq!(m.dof(), 21);
        assert_eq!(m.end_effectors.len(), 2);
        assert!((m.total_mass() - 50.0).abs() < 1e-12);
        assert_eq!(m.action_dim(), 15);
        assert_eq!(m.obs_dim(), 44);
    }

    #[test]
    fn biped_left_hip_maps_to_right_hip() {
        let m = CharacterModel::biped9();
        let hip = m.left_leg_dofs[0];
        let mut a = vec![0.0; m.action_dim()];
        a[hip] = 5.0;
        let b = m.mirror_action(&a).unwrap();
        let right_hip = m.mirror_act.target(hip);
        assert!(m.right_leg_dofs.contains(&right_hip));
        assert_eq!(b[right_hip], 5.0 * m.mirror_act.sign(right_hip));
        assert_eq!(b.iter().filter(|x| **x != 0.0).count(), 1);
        assert_eq!(m.mirror_action(&vec![0.0; 15]).unwrap(), vec![0.0; 15]);
    }

    #[test]
    fn frontal_root_offset_flips() {
        let m = CharacterModel::biped9();
        let mut obs = vec![0.0; m.obs_dim()];
        obs[0] = 0.3;
        let mo = m.mirror_observation(&obs).unwrap();
        assert_eq!(mo[0], -0.3);
        // target velocity is the last entry and maps to itself
        let last = m.obs_dim() - 1;
        assert_eq!(m.mirror_obs.target(last), last);
        assert_eq!(m.mirror_obs.sign(last), 1.0);
    }

    #[test]
    fn wrong_length_is_dimension_mismatch() {
        let m = CharacterModel::biped9();
        assert!(matches!(
            m.mirror_observation(&[0.0; 3]),
            Err(Error::DimensionMismatch { expected: 44, got: 3 })
        ));
    }
}
