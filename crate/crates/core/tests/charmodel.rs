use gaitforge::charmodel::{load_character, CharacterModel, SignedPermutation, BIPED9};
use gaitforge::error::Error;
use proptest::prelude::*;

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn observation_mirror_is_an_involution(v in vector(44)) {
        let m = CharacterModel::biped9();
        let back = m.mirror_observation(&m.mirror_observation(&v).unwrap()).unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn action_mirror_is_an_involution(v in vector(15)) {
        let m = CharacterModel::biped9();
        let back = m.mirror_action(&m.mirror_action(&v).unwrap()).unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn mirrors_preserve_norm(o in vector(44), a in vector(15)) {
        let m = CharacterModel::biped9();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mo = m.mirror_observation(&o).unwrap();
        let ma = m.mirror_action(&a).unwrap();
        prop_assert!((norm(&mo) - norm(&o)).abs() <= 1e-12 * norm(&o).max(1.0));
        prop_assert!((norm(&ma) - norm(&a)).abs() <= 1e-12 * norm(&a).max(1.0));
    }

    #[test]
    fn mirror_is_linear(a in vector(15), b in vector(15), c in -3.0f64..3.0) {
        let m = CharacterModel::biped9();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + c * y).collect();
        let lhs = m.mirror_action(&sum).unwrap();
        let ma = m.mirror_action(&a).unwrap();
        let mb = m.mirror_action(&b).unwrap();
        for i in 0..15 {
            prop_assert!((lhs[i] - (ma[i] + c * mb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn random_involutions_accepted(pairs in prop::collection::vec(any::<bool>(), 1..20), flips in prop::collection::vec(any::<bool>(), 20)) {
        // Swap neighbours where `pairs` says so; negate fixed points or swapped pairs together.
        let n = pairs.len() * 2;
        let mut target: Vec<usize> = (0..n).collect();
        let mut sign = vec![1; n];
        for (k, &swap) in pairs.iter().enumerate() {
            let (i, j) = (2 * k, 2 * k + 1);
            if swap {
                target.swap(i, j);
            }
            if flips[k] {
                sign[i] = -1;
                sign[j] = -1;
            }
        }
        let p = SignedPermutation::new(target, sign).unwrap();
        let m = p.to_matrix();
        prop_assert_eq!(&m * &m, nalgebra::DMatrix::identity(n, n));
    }
}

#[test]
fn leg_partition_maps_left_onto_right() {
    let m = CharacterModel::biped9();
    assert_eq!(m.left_leg_dofs.len(), m.right_leg_dofs.len());
    assert!(m.left_leg_dofs.iter().all(|d| !m.right_leg_dofs.contains(d)));
    let mut image: Vec<usize> = m.left_leg_dofs.iter().map(|&d| m.mirror_act.target(d)).collect();
    let mut right = m.right_leg_dofs.clone();
    image.sort_unstable();
    right.sort_unstable();
    assert_eq!(image, right);
}

#[test]
fn shipped_document_matches_builtin() {
    let m = load_character(BIPED9).unwrap();
    assert_eq!(m.name, CharacterModel::biped9().name);
    assert_eq!((m.links.len(), m.dof(), m.end_effectors.len()), (9, 21, 2));
    assert!((m.total_mass() - 50.0).abs() < 1e-12);
    for j in &m.joints {
        if let Some(p) = j.parent_link {
            assert!(p < j.child_link);
        }
        for a in &j.axes {
            assert!((a.norm() - 1.0).abs() < 1e-12);
        }
        for (lo, hi) in &j.position_limits {
            assert!(lo <= hi);
        }
    }
    assert_eq!(m.torque_limits().len(), m.action_dim());
    assert!(m.torque_limits().iter().all(|t| t.is_finite() && *t > 0.0));
}

#[test]
fn parent_after_child_rejected() {
    let mut doc: serde_json::Value = serde_json::from_str(BIPED9).unwrap();
    let joints = doc["joints"].as_array_mut().unwrap();
    let last = joints.len() - 1;
    let child = joints[last]["child_link"].clone();
    joints[last]["parent_link"] = child;
    assert!(matches!(load_character(&doc.to_string()), Err(Error::Validation(_))));
}

#[test]
fn zero_torque_limit_rejected() {
    let mut doc: serde_json::Value = serde_json::from_str(BIPED9).unwrap();
    let joints = doc["joints"].as_array_mut().unwrap();
    let j = joints.iter_mut().find(|j| j.get("torque_limits").is_some_and(|t| t.as_array().is_some_and(|a| !a.is_empty()))).unwrap();
    j["torque_limits"][0] = serde_json::json!(0.0);
    assert!(matches!(load_character(&doc.to_string()), Err(Error::Validation(_))));
}

#[test]
fn unbalanced_leg_sets_rejected() {
    let mut doc: serde_json::Value = serde_json::from_str(BIPED9).unwrap();
    doc["right_leg_dofs"].as_array_mut().unwrap().pop();
    assert!(matches!(load_character(&doc.to_string()), Err(Error::Validation(_))));
}
