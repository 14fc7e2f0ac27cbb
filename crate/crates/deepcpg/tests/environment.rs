use deepcpg::env::*;
use deepcpg::Error;
use proptest::prelude::*;

fn body(legs: usize, modules: usize) -> EnvConfig {
    EnvConfig {
        legs,
        modules,
        ..EnvConfig::default()
    }
}

#[test]
fn audit_examples() {
    assert_eq!(energy_audit(&vec![vec![0.0; 3]; 5], &vec![vec![0.2; 3]; 5]).unwrap().total, 0.0);
    let r = energy_audit(&vec![vec![1.0]; 100], &vec![vec![0.01]; 100]).unwrap();
    assert!((r.total - 1.0).abs() < 1e-12);
    assert_eq!(r.per_joint.len(), 1);
    assert!(matches!(energy_audit(&[vec![1.0]], &[]), Err(Error::Structural(_))));
}

#[test]
fn actuator_follows_first_order_lag() {
    let cfg = body(4, 1);
    let mut s = CrawlerState::rest(&cfg);
    let mut goals = vec![0.0; cfg.joints()];
    goals[0] = 0.5;
    // hand-rolled PD torque into the motor lag, no joint limit reached
    let (mut angle, mut rate) = (0.0f64, 0.0f64);
    for _ in 0..30 {
        let tau = (cfg.kp * (0.5 - angle) - cfg.kd * rate).clamp(-cfg.torque_max, cfg.torque_max);
        rate += cfg.dt / cfg.motor_time_constant * (cfg.motor_gain * tau - rate);
        angle += rate * cfg.dt;
        let out = env_step(&cfg, &s, &goals).unwrap();
        assert!((out.state.joints[0] - angle).abs() < 1e-12);
        assert!((out.torque[0] - tau).abs() < 1e-12);
        s = out.state;
    }
    assert!(s.joints[1..].iter().all(|&a| a == 0.0));
}

#[test]
fn only_grounded_backward_strokes_propel() {
    let cfg = EnvConfig {
        stride_jitter: 0.0,
        ..body(2, 1)
    };
    let mut s = CrawlerState::rest(&cfg);
    s.joints = vec![0.5, 0.5, 0.5, 0.5];
    // both hips swing back with knees down: straight forward push
    let out = env_step(&cfg, &s, &[-1.0, 0.5, -1.0, 0.5]).unwrap();
    assert!(out.state.x > 0.0);
    assert!(out.state.heading.abs() < 1e-15);
    // forward swing never propels
    let out = env_step(&cfg, &s, &[1.0, 0.5, 1.0, 0.5]).unwrap();
    assert_eq!(out.state.x, 0.0);
    // knees lifted: no contact, no motion
    s.joints = vec![0.5, -0.5, 0.5, -0.5];
    let out = env_step(&cfg, &s, &[-1.0, -0.5, -1.0, -0.5]).unwrap();
    assert_eq!(out.state.distance, 0.0);
}

#[test]
fn one_sided_push_turns_toward_the_idle_side() {
    let cfg = body(2, 1);
    let mut s = CrawlerState::rest(&cfg);
    s.joints = vec![0.5, 0.5, 0.5, 0.5];
    // push only with the right leg (odd index)
    let out = env_step(&cfg, &s, &[0.5, 0.5, -1.0, 0.5]).unwrap();
    let push = cfg.stride_gain * -out.joint_delta[2];
    assert!((out.state.heading - cfg.yaw_gain * push).abs() < 1e-12);
}

#[test]
fn rejects_bad_goals() {
    let cfg = body(4, 1);
    let s = CrawlerState::rest(&cfg);
    assert!(matches!(env_step(&cfg, &s, &[0.0; 3]), Err(Error::Structural(_))));
    let mut g = vec![0.0; 8];
    g[2] = f64::NAN;
    assert!(matches!(env_step(&cfg, &s, &g), Err(Error::Numeric { .. })));
}

#[test]
fn resting_body_collects_the_base_reward_until_the_limit() {
    for task in [Task::Intrinsic, Task::XAxis, Task::Goto] {
        let cfg = EnvConfig { task, ..EnvConfig::default() };
        let c = RewardCoefficients::default();
        let mut env = CrawlerEnv::new(cfg, c, 50, 3).unwrap();
        env.reset();
        let mut total = 0.0;
        for k in 1..=50 {
            let st = env.step(&[0.0; 8]).unwrap();
            total += st.reward;
            assert_eq!(st.done, k == 50);
        }
        assert_eq!(total, 50.0 * c.base);
    }
}

#[test]
fn tipping_ends_the_episode() {
    let cfg = EnvConfig::default();
    let mut env = CrawlerEnv::new(cfg, RewardCoefficients::default(), 500, 0).unwrap();
    env.reset();
    let mut steps = 0;
    loop {
        steps += 1;
        // every knee pressed to the limit lowers the body past the tip height
        if env.step(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap().done {
            break;
        }
    }
    assert!(steps < 500);
    assert!(env.state.z.abs() > env.cfg.tip_height);
}

#[test]
fn goto_waypoints_refresh_on_schedule() {
    let cfg = EnvConfig {
        task: Task::Goto,
        waypoint_period: 10,
        ..EnvConfig::default()
    };
    let mut env = CrawlerEnv::new(cfg, RewardCoefficients::default(), 100, 9).unwrap();
    env.reset();
    let mut goal = env.state.goal;
    for k in 1..=30u64 {
        env.step(&[0.0; 8]).unwrap();
        assert_eq!(env.state.goal != goal, k % 10 == 0);
        goal = env.state.goal;
        let d = goal[0].hypot(goal[1]);
        assert!((2.0..=4.0).contains(&d));
    }
}

proptest! {
    #[test]
    fn joints_respect_limits_and_faults(
        seed in any::<u64>(),
        frozen in proptest::collection::btree_set(0usize..8, 0..4),
        goals in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 8), 1..40),
    ) {
        let cfg = EnvConfig { frozen_joints: frozen.iter().copied().collect(), ..EnvConfig::default() };
        let mut env = CrawlerEnv::new(cfg, RewardCoefficients::default(), 1000, seed).unwrap();
        env.reset();
        let mut torques = Vec::new();
        let mut deltas = Vec::new();
        for g in &goals {
            let st = env.step(g).unwrap();
            prop_assert!(env.state.joints.iter().all(|a| a.abs() <= env.cfg.joint_limit));
            for &j in &frozen {
                prop_assert_eq!(env.state.joints[j], 0.0);
                prop_assert_eq!(st.torque[j], 0.0);
            }
            torques.push(st.torque);
            deltas.push(st.joint_delta);
        }
        let audit = energy_audit(&torques, &deltas).unwrap();
        prop_assert!(audit.total >= 0.0);
        for &j in &frozen {
            prop_assert_eq!(audit.per_joint[j], 0.0);
        }
    }

    #[test]
    fn observation_width_matches_config(legs in 1usize..4, modules in 1usize..4, goto in any::<bool>()) {
        let cfg = EnvConfig {
            task: if goto { Task::Goto } else { Task::Intrinsic },
            ..body(legs, modules)
        };
        let s = CrawlerState::rest(&cfg);
        prop_assert_eq!(observe(&cfg, &s).len(), cfg.obs_dim());
    }
}

#[test]
fn waypoint_path_turns_by_bounded_steps() {
    let cfg = EnvConfig {
        task: Task::Goto,
        waypoint_period: 5,
        ..EnvConfig::default()
    };
    let turn = cfg.waypoint_turn;
    let mut env = CrawlerEnv::new(cfg, RewardCoefficients::default(), 400, 2).unwrap();
    env.reset();
    let mut path = env.state.path_heading;
    for k in 1..=200u64 {
        env.step(&[0.0; 8]).unwrap();
        if k % 5 == 0 {
            let d = env.state.path_heading - path;
            assert!(d.abs() <= turn + 1e-12);
            let g = env.state.goal;
            let along = (g[1] - env.state.y).atan2(g[0] - env.state.x);
            assert!(((along - env.state.path_heading + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-9);
            path = env.state.path_heading;
        }
    }
}
