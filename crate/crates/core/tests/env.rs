use std::sync::Arc;

use gaitforge::assistant::{Lesson, LessonRange};
use gaitforge::charmodel::CharacterModel;
use gaitforge::dynamics::{self, SimState, World};
use gaitforge::env::{
    average_velocity, check_termination, reward, Environment, EnvConfig, LocomotionEnv, RewardConfig, Termination,
};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn walk() -> RewardConfig {
    RewardConfig {
        v_hat_final: 1.0,
        w_v: 3.0,
        w_ux: 1.0,
        w_uy: 1.0,
        w_uz: 1.0,
        w_l: 3.0,
        e_a: 4.0,
        w_e: 0.4,
    }
}

fn env_with(config: EnvConfig) -> LocomotionEnv {
    LocomotionEnv::new(Arc::new(CharacterModel::biped9()), config, walk()).unwrap()
}

fn random_actions(n: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

#[test]
fn reward_examples() {
    let cfg = walk();
    let up = Matrix3::identity();
    let (r, _) = reward(&cfg, 1.0, 1.0, &up, 0.0, &[0.0; 15]);
    assert_eq!(r, 4.0);
    let (r, _) = reward(&cfg, 0.0, 1.0, &up, 0.0, &[0.0; 15]);
    assert_eq!(r, 1.0);
    // ||a|| = 10 needs unclamped entries, so use the weighted term directly.
    let (_, c) = reward(&cfg, 1.0, 1.0, &up, 0.0, &[1.0; 15]);
    assert!((c.e_e + 15f64.sqrt()).abs() < 1e-15);
    let mut c10 = c;
    c10.e_e = -10.0;
    assert!(c10.total(&cfg).abs() < 1e-12);
}

#[test]
fn reward_components_are_penalties() {
    let cfg = walk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let rot = Rotation3::from_scaled_axis(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let a: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (r, c) = reward(&cfg, rng.random_range(-2.0..2.0), 1.0, rot.matrix(), rng.random_range(-1.0..1.0), &a);
        assert!(c.e_v <= 0.0 && c.e_u <= 0.0 && c.e_l <= 0.0 && c.e_e <= 0.0);
        assert!(r <= cfg.e_a);
        let sum = cfg.w_v * c.e_v + c.e_u + cfg.w_l * c.e_l + c.e_a + cfg.w_e * c.e_e;
        assert!((r - sum).abs() < 1e-12);
    }
}

#[test]
fn average_velocity_examples() {
    let dt = 0.002;
    let constant: Vec<f64> = (0..2000).map(|k| 0.7 * k as f64 * dt).collect();
    assert!((average_velocity(&constant, dt, 2.0, 0.7) - 0.7).abs() < 1e-12);
    assert_eq!(average_velocity(&[3.0; 50], dt, 2.0, 0.0), 0.0);
    // 0 m/s for 1 s, then 1 m/s for 1 s, queried at t = 2.
    let piecewise: Vec<f64> = (0..=1000)
        .map(|k| if k <= 500 { 0.0 } else { (k - 500) as f64 * dt })
        .collect();
    assert!((average_velocity(&piecewise, dt, 2.0, 1.0) - 0.5).abs() < 1e-12);
    assert_eq!(average_velocity(&[1.0], dt, 2.0, 0.3), 0.3);
    // Shorter than the window: displacement over elapsed time.
    let short = [0.0, 0.002, 0.004];
    assert!((average_velocity(&short, dt, 2.0, 0.0) - 1.0).abs() < 1e-12);
}

#[test]
fn reset_is_seeded_and_bounded() {
    let mut env = env_with(EnvConfig::default());
    assert_eq!(env.reset(5), env.reset(5));
    assert_ne!(env.reset(5), env.reset(6));
    let q_ref = env.model().reference_q.clone();
    let mut worst: f64 = 0.0;
    for seed in 0..1000 {
        env.reset(seed);
        let s = env.state();
        for (q, r) in s.q.iter().zip(&q_ref) {
            worst = worst.max((q - r).abs());
        }
        worst = worst.max(s.qd.amax());
        assert_eq!(s.t, 0.0);
    }
    assert!(worst <= 0.005);
    assert!(worst > 0.004);
}

#[test]
fn noiseless_reset_is_reference_pose() {
    let mut env = env_with(EnvConfig {
        reset_noise: 0.0,
        ..EnvConfig::default()
    });
    let obs = env.reset(3);
    let model = env.model();
    let mut expect: Vec<f64> = model.reference_q.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, v)| *v).collect();
    expect.extend(std::iter::repeat_n(0.0, model.dof()));
    expect.extend(SimState::reference(model).contacts.iter().map(|c| if *c { 1.0 } else { 0.0 }));
    expect.push(0.0);
    assert_eq!(obs, expect);
    assert_eq!(obs.len(), model.obs_dim());
}

#[test]
fn hover_without_gravity_only_advances_time() {
    let mut env = env_with(EnvConfig {
        world: World::zero_gravity(),
        ..EnvConfig::default()
    });
    let model = env.model().clone();
    let mut s = SimState::reference(&model);
    s.q[1] += 1.0;
    env.reset_to(s.clone()).unwrap();
    let r = env.step(&vec![0.0; 15]);
    assert!(!r.done);
    assert_eq!(env.state().q, s.q);
    assert_eq!(env.state().qd, s.qd);
    assert!((env.state().t - 0.03).abs() < 1e-15);
    assert!((env.time() - 0.03).abs() < 1e-15);
}

#[test]
fn actions_are_clamped() {
    let mut a = env_with(EnvConfig::default());
    let mut b = env_with(EnvConfig::default());
    a.reset(1);
    b.reset(1);
    let big: Vec<f64> = (0..15).map(|i| if i % 2 == 0 { 2.0 } else { -2.0 }).collect();
    let unit: Vec<f64> = big.iter().map(|v| v / 2.0).collect();
    for _ in 0..3 {
        let ra = a.step(&big);
        let rb = b.step(&unit);
        assert_eq!(ra, rb);
    }
}

#[test]
fn one_control_step_is_fifteen_substeps() {
    let mut env = env_with(EnvConfig::default());
    env.reset(0);
    for k in 1..=4 {
        env.step(&vec![0.0; 15]);
        assert!((env.state().t - 0.03 * k as f64).abs() < 1e-12);
    }
}

#[test]
fn trajectories_are_deterministic() {
    let acts = random_actions(30, 15, 1.0, 4);
    let run = || {
        let mut env = env_with(EnvConfig::default());
        env.set_lesson(LessonRange::from_begin(Lesson::new(2000.0, 2000.0).unwrap(), 25.0));
        env.reset(11);
        acts.iter().map(|a| env.step(a)).collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.observation), bits(&y.observation));
        assert_eq!(x.reward.to_bits(), y.reward.to_bits());
    }
}

#[test]
fn termination_checks() {
    let model = CharacterModel::biped9();
    let cfg = EnvConfig::default();
    let s = SimState::reference(&model);
    let h = dynamics::com(&model, &s).y;
    assert_eq!(check_termination(&model, &cfg, h, &s, 0), None);

    let mut low = s.clone();
    low.q[1] -= 0.8 * h;
    assert_eq!(check_termination(&model, &cfg, h, &low, 0), Some(Termination::ComLow));

    let mut tilted = s.clone();
    tilted.q[3] = 0.9;
    assert_eq!(check_termination(&model, &cfg, h, &tilted, 0), Some(Termination::Tilt));

    let mut late = s.clone();
    late.t = 9.0;
    assert_eq!(check_termination(&model, &cfg, h, &late, 297), Some(Termination::Horizon));
    assert_eq!(check_termination(&model, &cfg, h, &s, 297), Some(Termination::Horizon));
    assert_eq!(check_termination(&model, &cfg, h, &s, 296), None);
}

#[test]
fn horizon_is_297_control_steps() {
    let mut env = env_with(EnvConfig {
        world: World::zero_gravity(),
        ..EnvConfig::default()
    });
    let mut s = SimState::reference(env.model());
    s.q[1] += 1.0;
    env.reset_to(s).unwrap();
    let mut steps = 0;
    loop {
        let r = env.step(&vec![0.0; 15]);
        steps += 1;
        assert!(r.reward <= walk().e_a);
        if r.done {
            assert_eq!(r.info.termination, Some(Termination::Horizon));
            break;
        }
    }
    assert_eq!(steps, 297);
    assert!((env.time() - 8.91).abs() < 1e-12);
}

#[test]
fn falling_character_terminates() {
    let mut env = env_with(EnvConfig::default());
    env.reset(2);
    let mut last = None;
    for _ in 0..297 {
        let r = env.step(&vec![0.0; 15]);
        if r.done {
            last = r.info.termination;
            break;
        }
    }
    assert!(matches!(last, Some(Termination::ComLow | Termination::Tilt)), "{last:?}");
}

#[test]
fn logged_components_reproduce_reward() {
    let mut env = env_with(EnvConfig::default());
    env.set_lesson(LessonRange::from_begin(Lesson::new(500.0, 300.0).unwrap(), 25.0));
    env.reset(7);
    for a in random_actions(20, 15, 1.5, 8) {
        let r = env.step(&a);
        assert!((r.reward - r.info.components.total(&walk())).abs() < 1e-12);
        assert_eq!(r.info.torques.len(), 15);
        if r.done {
            break;
        }
    }
}

#[test]
fn mirrored_actions_give_mirrored_trajectories() {
    let cfg = EnvConfig {
        reset_noise: 0.0,
        ..EnvConfig::default()
    };
    let mut a = env_with(cfg.clone());
    let mut b = env_with(cfg);
    let range = LessonRange::from_begin(Lesson::new(1000.0, 800.0).unwrap(), 25.0);
    a.set_lesson(range);
    b.set_lesson(range);
    a.reset(0);
    b.reset(0);
    let model = a.model().clone();
    for act in random_actions(12, 15, 0.6, 21) {
        let ra = a.step(&act);
        let rb = b.step(&model.mirror_action(&act).unwrap());
        let expect = model.mirror_observation(&ra.observation).unwrap();
        for (i, (x, y)) in expect.iter().zip(&rb.observation).enumerate() {
            assert!((x - y).abs() < 1e-6, "entry {i}: {x} vs {y}");
        }
        assert!((ra.reward - rb.reward).abs() < 1e-6);
        if ra.done || rb.done {
            assert_eq!(ra.done, rb.done);
            break;
        }
    }
}

#[test]
fn invalid_configs_rejected() {
    let model = Arc::new(CharacterModel::biped9());
    let bad_reward = RewardConfig { w_v: -1.0, ..walk() };
    assert!(LocomotionEnv::new(model.clone(), EnvConfig::default(), bad_reward).is_err());
    let bad_env = EnvConfig {
        substeps: 0,
        ..EnvConfig::default()
    };
    assert!(LocomotionEnv::new(model.clone(), bad_env, walk()).is_err());
    let mut env = LocomotionEnv::new(model, EnvConfig::default(), walk()).unwrap();
    env.reset(0);
    assert!(env.step_action(&[0.0; 3]).is_err());
    assert!(env.step_action(&[f64::NAN; 15]).is_err());
}
