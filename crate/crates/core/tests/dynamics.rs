mod common;

use gaitforge::charmodel::CharacterModel;
use gaitforge::dynamics::{
    com, com_velocity, detect_contacts, forward_dynamics, inverse_dynamics, mass_matrix, step,
    step_detailed, total_energy, ExternalForce, SimState, World,
};
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

#[test]
fn free_body_translational_block_is_mass() {
    let model = common::ball(3.5, 0.2, 1.0, 0.0);
    let q = DVector::from_vec(vec![0.3, 1.0, -2.0, 0.4, -0.2, 1.1]);
    let m = mass_matrix(&model, &q);
    let block = m.view((0, 0), (3, 3));
    assert!((block - DMatrix::identity(3, 3) * 3.5).amax() < 1e-12);
}

#[test]
fn mass_matrix_matches_inverse_dynamics_columns() {
    let model = CharacterModel::biped9();
    let world = World::zero_gravity();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = model.dof();
    for _ in 0..20 {
        let (q, _) = common::random_state(&model, &mut rng);
        let m = mass_matrix(&model, &q);
        let zero = DVector::zeros(n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            let col = inverse_dynamics(&model, &world, &q, &zero, &e, &[]).unwrap();
            for i in 0..n {
                let err = (m[(i, j)] - col[i]).abs() / m[(i, j)].abs().max(1e-3);
                assert!(err < 1e-8, "M[{i},{j}] = {} vs {}", m[(i, j)], col[i]);
            }
        }
    }
}

#[test]
fn forward_inverse_round_trip() {
    let model = CharacterModel::biped9();
    let world = World::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = model.dof();
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let (q, qd) = common::random_state(&model, &mut rng);
        let state = SimState::new(&model, q.clone(), qd.clone()).unwrap();
        let tau = DVector::from_fn(n, |i, _| if i < 6 { 0.0 } else { 40.0 * ((i * k) % 7) as f64 / 7.0 - 20.0 });
        let ext = [ExternalForce {
            link: 0,
            point: Vector3::new(0.01, 0.02, -0.03),
            force: Vector3::new(30.0, -5.0, 12.0),
        }];
        let qdd = forward_dynamics(&model, &world, &state, &tau, &ext).unwrap();
        let back = inverse_dynamics(&model, &world, &q, &qd, &qdd, &ext).unwrap();
        worst = worst.max(rel_err(&back, &tau));
    }
    assert!(worst < 1e-8, "round-trip relative error {worst:e}");
}

#[test]
fn free_fall_acceleration() {
    let model = common::chain(3, 0.0);
    let mut q = DVector::zeros(model.dof());
    q[1] = 5.0;
    q[6] = 0.4;
    q[7] = -0.3;
    let state = SimState::new(&model, q, DVector::zeros(model.dof())).unwrap();
    let tau = DVector::zeros(model.dof());
    let qdd = forward_dynamics(&model, &World::default(), &state, &tau, &[]).unwrap();
    // a passive chain at rest in free fall keeps its shape
    assert!((qdd[1] + 9.81).abs() < 1e-10);
    assert!(qdd.rows(3, model.dof() - 3).amax() < 1e-10);
    assert!(qdd[0].abs() < 1e-10 && qdd[2].abs() < 1e-10);
}

#[test]
fn hanging_chain_held_at_root_is_static() {
    let model = common::chain(2, 0.0);
    let mut q = DVector::zeros(model.dof());
    q[1] = 5.0;
    let state = SimState::new(&model, q, DVector::zeros(model.dof())).unwrap();
    let weight = model.total_mass() * 9.81;
    // the whole weight supported at the root joint axis line, straight above the chain COM
    let ext = [ExternalForce {
        link: 0,
        point: Vector3::zeros(),
        force: Vector3::new(0.0, weight, 0.0),
    }];
    let qdd = forward_dynamics(&model, &World::default(), &state, &DVector::zeros(model.dof()), &ext).unwrap();
    assert!(qdd.amax() < 1e-10, "{qdd}");
}

#[test]
fn gravity_compensation_holds_pose() {
    let model = CharacterModel::biped9();
    let world = World::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, _) = common::random_state(&model, &mut rng);
    let zero = DVector::zeros(model.dof());
    let tau = inverse_dynamics(&model, &world, &q, &zero, &zero, &[]).unwrap();
    let state = SimState::new(&model, q, zero.clone()).unwrap();
    let qdd = forward_dynamics(&model, &world, &state, &tau, &[]).unwrap();
    assert!(qdd.amax() < 1e-9);
}

#[test]
fn uniform_motion_without_gravity() {
    let model = common::ball(2.0, 0.1, 1.0, 0.0);
    let world = World::zero_gravity();
    let mut q = DVector::zeros(6);
    q[1] = 3.0;
    let mut qd = DVector::zeros(6);
    qd[0] = 0.7;
    qd[2] = -1.3;
    qd[1] = 0.25;
    let mut s = SimState::new(&model, q.clone(), qd.clone()).unwrap();
    let tau = DVector::zeros(6);
    let dt = 0.002;
    for k in 1..=500 {
        let next = step(&model, &world, &s, &tau, &[], dt).unwrap();
        let expect = &s.q + &qd * dt;
        assert!((&next.q - &expect).amax() < 1e-12, "step {k}");
        assert_eq!(next.qd, qd);
        s = next;
    }
}

#[test]
fn passive_chain_energy_drift() {
    let model = common::chain(3, 0.0);
    let world = World::default();
    let n = model.dof();
    let mut q = DVector::zeros(n);
    q[1] = 3.0;
    q[6] = 0.8;
    q[7] = -0.5;
    q[8] = 0.3;
    let mut qd = DVector::zeros(n);
    qd[4] = 0.5;
    qd[6] = 2.0;
    qd[7] = -3.0;
    qd[8] = 1.5;
    let mut s = SimState::new(&model, q, qd).unwrap();
    let e0 = total_energy(&model, &world, &s);
    let tau = DVector::zeros(n);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        s = step(&model, &world, &s, &tau, &[], 1e-4).unwrap();
        worst = worst.max((total_energy(&model, &world, &s) - e0).abs());
    }
    assert!(worst / e0.abs() < 0.02, "drift {} of {e0}", worst / e0.abs());
}

#[test]
fn sphere_drop_comes_to_rest() {
    let r = 0.1;
    let model = common::ball(1.0, r, 1.0, 0.0);
    let world = World::default();
    let mut q = DVector::zeros(6);
    q[1] = 0.5;
    let mut s = SimState::new(&model, q, DVector::zeros(6)).unwrap();
    let tau = DVector::zeros(6);
    let dt = 0.002;
    let t_contact = (2.0 * (0.5 - r) / 9.81).sqrt();
    let mut first_touch = None;
    let mut max_pen: f64 = 0.0;
    for k in 0..1500 {
        let (next, report) = step_detailed(&model, &world, &s, &tau, &[], dt).unwrap();
        for c in &report.contacts {
            assert!(c.normal >= 0.0);
        }
        s = next;
        if first_touch.is_none() && s.contacts[0] {
            first_touch = Some((k + 1) as f64 * dt);
        }
        if s.t > 0.6 {
            max_pen = max_pen.max(r - s.q[1]);
        }
    }
    let t1 = first_touch.expect("ball never touched the ground");
    assert!((t1 - t_contact).abs() <= 2.0 * dt, "contact at {t1} vs {t_contact}");
    assert!(max_pen < 0.01, "penetration {max_pen}");
    assert!(s.qd.amax() < 1e-6, "still moving: {}", s.qd);
    assert!(s.contacts[0]);
}

#[test]
fn sliding_ball_respects_friction_cone() {
    let model = common::ball(1.0, 0.1, 0.3, 0.0);
    let world = World::default();
    let mut q = DVector::zeros(6);
    q[1] = 0.1;
    let mut qd = DVector::zeros(6);
    qd[0] = 2.0;
    qd[2] = -1.0;
    let mut s = SimState::new(&model, q, qd).unwrap();
    let tau = DVector::zeros(6);
    for _ in 0..400 {
        let (next, report) = step_detailed(&model, &world, &s, &tau, &[], 0.002).unwrap();
        for c in &report.contacts {
            let t = c.tangent[0].hypot(c.tangent[1]);
            assert!(c.normal >= 0.0);
            assert!(t <= 0.3 * c.normal + 1e-12, "{t} > mu * {}", c.normal);
        }
        s = next;
    }
    // the ball ends up rolling: contact point velocity vanishes
    let v = s.qd[0].hypot(s.qd[2]);
    assert!(v > 0.1);
}

#[test]
fn biped_standing_contacts_and_cone() {
    let model = CharacterModel::biped9();
    let world = World::default();
    let mut s = SimState::reference(&model);
    assert_eq!(s.contacts, vec![true, true]);
    let mu = model.contact.friction;
    let n = model.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..300 {
        let tau = DVector::from_fn(n, |i, _| {
            if i < 6 {
                0.0
            } else {
                use rand::Rng;
                rng.random_range(-20.0..20.0) * ((k % 3) as f64)
            }
        });
        let (next, report) = step_detailed(&model, &world, &s, &tau, &[], 0.002).unwrap();
        for c in &report.contacts {
            assert!(c.normal >= 0.0);
            assert!(c.tangent[0].hypot(c.tangent[1]) <= mu * c.normal + 1e-12);
            assert!(c.gap > -0.01, "penetration {}", c.gap);
        }
        s = next;
    }
}

#[test]
fn step_is_deterministic() {
    let model = CharacterModel::biped9();
    let world = World::default();
    let mut s = SimState::reference(&model);
    s.qd[9] = 1.0;
    s.qd[16] = -0.5;
    let tau = DVector::from_fn(model.dof(), |i, _| if i < 6 { 0.0 } else { (i as f64).sin() * 30.0 });
    let ext = [ExternalForce {
        link: 0,
        point: Vector3::zeros(),
        force: Vector3::new(10.0, 0.0, 40.0),
    }];
    let a = step(&model, &world, &s, &tau, &ext, 0.002).unwrap();
    let b = step(&model, &world, &s, &tau, &ext, 0.002).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.q.iter().zip(b.q.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn hovering_biped_has_no_contacts() {
    let model = CharacterModel::biped9();
    let mut s = SimState::reference(&model);
    let c0 = com(&model, &s);
    s.q[1] += 2.0 - c0.y;
    let (touching, flags) = detect_contacts(&model, &s);
    assert!(touching.is_empty());
    assert_eq!(flags, vec![false, false]);
}

#[test]
fn single_support_flags_match_geometry() {
    let model = CharacterModel::biped9();
    let mut s = SimState::reference(&model);
    for theta in [-0.6f64, -0.2, -0.05, -0.01, 0.0, 0.2] {
        s.q[9] = theta;
        // foot sphere bottoms of the rotated left leg, hip at height 0.91
        let lowest = [-0.05f64, 0.16]
            .iter()
            .map(|&zc| {
                let (y, z) = (-0.84 - 0.045, zc);
                0.91 + y * theta.cos() - z * theta.sin() - 0.025
            })
            .fold(f64::INFINITY, f64::min);
        let (_, flags) = detect_contacts(&model, &s);
        assert_eq!(flags[0], lowest <= 1e-4, "theta {theta}: lowest {lowest}");
        assert!(flags[1]);
    }
}

#[test]
fn com_of_simple_bodies() {
    let model = common::ball(2.0, 0.1, 1.0, 0.0);
    let mut q = DVector::zeros(6);
    q[0] = 0.4;
    q[1] = 1.5;
    q[2] = -0.2;
    let s = SimState::new(&model, q, DVector::zeros(6)).unwrap();
    assert_eq!(com(&model, &s), Vector3::new(0.4, 1.5, -0.2));

    let db = common::dumbbell();
    let s = SimState::new(&db, DVector::zeros(7), DVector::zeros(7)).unwrap();
    assert!((com(&db, &s) - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
}

#[test]
fn com_velocity_matches_finite_difference() {
    let model = CharacterModel::biped9();
    let world = World::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let (mut q, qd) = common::random_state(&model, &mut rng);
        q[1] = 5.0;
        let s = SimState::new(&model, q, qd).unwrap();
        let dt = 1e-7;
        let next = step(&model, &world, &s, &DVector::zeros(model.dof()), &[], dt).unwrap();
        let fd = (com(&model, &next) - com(&model, &s)) / dt;
        let v = com_velocity(&model, &s);
        assert!((fd - v).norm() / v.norm().max(1e-3) < 1e-4, "{fd} vs {v}");
    }
}

#[test]
fn energy_of_simple_states() {
    let model = common::ball(2.0, 0.1, 1.0, 0.0);
    let world = World::default();
    let mut q = DVector::zeros(6);
    q[1] = 1.5;
    let s = SimState::new(&model, q, DVector::zeros(6)).unwrap();
    assert!((total_energy(&model, &world, &s) - 2.0 * 9.81 * 1.5).abs() < 1e-12);
    let mut qd = DVector::zeros(6);
    qd[2] = 3.0;
    let s = SimState::new(&model, DVector::zeros(6), qd).unwrap();
    assert!((total_energy(&model, &world, &s) - 0.5 * 2.0 * 9.0).abs() < 1e-12);
}

#[test]
fn joint_limits_hold() {
    let model = CharacterModel::biped9();
    let world = World::zero_gravity();
    let mut q = DVector::from_column_slice(&model.reference_q);
    q[1] = 3.0;
    let mut s = SimState::new(&model, q, DVector::zeros(model.dof())).unwrap();
    let mut tau = DVector::zeros(model.dof());
    tau[12] = -150.0; // left knee pushed into hyperextension
    for _ in 0..500 {
        s = step(&model, &world, &s, &tau, &[], 0.002).unwrap();
    }
    assert!(s.q[12] > -0.02 - 0.01, "knee at {}", s.q[12]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_matrix_symmetric_positive_definite(seed in any::<u64>()) {
        let model = CharacterModel::biped9();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, _) = common::random_state(&model, &mut rng);
        let m = mass_matrix(&model, &q);
        prop_assert!((&m - m.transpose()).amax() < 1e-10);
        prop_assert!(m.cholesky().is_some());
    }
}

#[test]
fn spin_about_principal_axis_follows_exponential_map() {
    let model = common::ball(1.0, 0.2, 1.0, 0.0);
    let world = World::zero_gravity();
    let mut q = DVector::zeros(6);
    q[1] = 2.0;
    let w = Vector3::new(0.3, -1.1, 0.7);
    let mut qd = DVector::zeros(6);
    qd.rows_mut(3, 3).copy_from(&w);
    let mut s = SimState::new(&model, q, qd).unwrap();
    let tau = DVector::zeros(6);
    for _ in 0..1000 {
        s = step(&model, &world, &s, &tau, &[], 0.002).unwrap();
    }
    // a sphere has isotropic inertia, so the world angular velocity is constant
    let expect = nalgebra::Rotation3::new(w * 2.0);
    let got = nalgebra::Rotation3::new(Vector3::new(s.q[3], s.q[4], s.q[5]));
    assert!((expect.matrix() - got.matrix()).amax() < 1e-9);
    assert!((s.qd.rows(3, 3) - w).amax() < 1e-12);
}
