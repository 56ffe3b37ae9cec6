#![allow(dead_code)]

use gaitforge::charmodel::CharacterModel;
use serde_json::{json, Value};

fn identity_perm(n: usize) -> Value {
    json!({"target_index": (0..n).collect::<Vec<_>>(), "sign": vec![1; n]})
}

fn box_inertia(m: f64, x: f64, y: f64, z: f64) -> Value {
    json!([
        [m * (y * y + z * z) / 12.0, 0.0, 0.0],
        [0.0, m * (x * x + z * z) / 12.0, 0.0],
        [0.0, 0.0, m * (x * x + y * y) / 12.0]
    ])
}

/// Free root body followed by `n` hanging links on revolute joints about X.
/// Joint k alternates its axis between X and Z so the chain moves in 3-D.
pub fn chain(n: usize, damping: f64) -> CharacterModel {
    let mut links = vec![json!({"mass": 2.0, "inertia": box_inertia(2.0, 0.2, 0.2, 0.2)})];
    let mut joints = vec![json!({"kind": "free6", "parent_link": null, "child_link": 0})];
    for k in 0..n {
        links.push(json!({
            "mass": 1.0,
            "inertia": box_inertia(1.0, 0.05, 0.5, 0.05),
            "com_offset": [0.0, -0.25, 0.0]
        }));
        let axis = if k % 2 == 0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        joints.push(json!({
            "kind": "revolute1",
            "axes": [axis],
            "parent_link": k,
            "child_link": k + 1,
            "anchor": if k == 0 { [0.0, -0.1, 0.0] } else { [0.0, -0.5, 0.0] },
            "torque_limits": [50.0],
            "damping": damping
        }));
    }
    let dof = 6 + n;
    let doc = json!({
        "name": "chain",
        "links": links,
        "joints": joints,
        "end_effectors": [],
        "mirror_obs": identity_perm(2 * dof),
        "mirror_act": identity_perm(n),
        "left_leg_dofs": [],
        "right_leg_dofs": []
    });
    CharacterModel::from_json_str(&doc.to_string()).unwrap()
}

/// Free sphere of radius `r` and mass `m`.
pub fn ball(m: f64, r: f64, friction: f64, restitution: f64) -> CharacterModel {
    let i = 0.4 * m * r * r;
    let doc = json!({
        "name": "ball",
        "links": [{
            "mass": m,
            "inertia": [[i, 0, 0], [0, i, 0], [0, 0, i]],
            "collision_shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": r}]
        }],
        "joints": [{"kind": "free6", "parent_link": null, "child_link": 0}],
        "end_effectors": [0],
        "mirror_obs": identity_perm(13),
        "mirror_act": identity_perm(0),
        "left_leg_dofs": [],
        "right_leg_dofs": [],
        "contact": {"friction": friction, "restitution": restitution}
    });
    CharacterModel::from_json_str(&doc.to_string()).unwrap()
}

/// Two unit masses: the root at the origin and a second body pinned at `x = 2`.
pub fn dumbbell() -> CharacterModel {
    let doc = json!({
        "links": [
            {"mass": 1.0, "inertia": box_inertia(1.0, 0.1, 0.1, 0.1)},
            {"mass": 1.0, "inertia": box_inertia(1.0, 0.1, 0.1, 0.1)}
        ],
        "joints": [
            {"kind": "free6", "parent_link": null, "child_link": 0},
            {"kind": "revolute1", "axes": [[0, 1, 0]], "parent_link": 0, "child_link": 1,
             "anchor": [2.0, 0.0, 0.0], "torque_limits": [1.0]}
        ],
        "end_effectors": [],
        "mirror_obs": identity_perm(14),
        "mirror_act": identity_perm(1),
        "left_leg_dofs": [],
        "right_leg_dofs": []
    });
    CharacterModel::from_json_str(&doc.to_string()).unwrap()
}

/// Random biped configuration and velocity with a moderately tilted root.
pub fn random_state(
    model: &CharacterModel,
    rng: &mut impl rand::Rng,
) -> (nalgebra::DVector<f64>, nalgebra::DVector<f64>) {
    let n = model.dof();
    let q = nalgebra::DVector::from_fn(n, |i, _| match i {
        0..=2 => rng.random_range(-1.0..1.0),
        3..=5 => rng.random_range(-1.0..1.0),
        _ => rng.random_range(-1.2..1.2),
    });
    let qd = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    (q, qd)
}
