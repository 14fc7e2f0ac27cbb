use deepcpg::config::{Algorithm, RunConfig};
use deepcpg::marl::Partition;
use deepcpg::nn::{ActorKind, NetworkConfig, Parameterized};
use deepcpg::td3::{build_system, deploy, Batch, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(actor: ActorKind, algorithm: Algorithm, modules: usize) -> RunConfig {
    let mut run = RunConfig::default();
    run.seed = 5;
    run.env.modules = modules;
    run.partition = if modules > 1 { Partition::Modular } else { Partition::Monolithic };
    run.train.actor = actor;
    run.train.algorithm = algorithm;
    run.train.t_max = 40;
    run.train.batch_size = 6;
    run.train.babbling_steps = 80;
    run.train.replay_capacity = 200;
    run.network = NetworkConfig {
        actor_hidden: vec![12, 8],
        head_hidden: 6,
        critic_hidden: vec![12, 8],
    };
    run
}

/// A trainer with enough data for batches but no gradient updates yet.
fn warmed(run: RunConfig) -> Trainer {
    let mut tr = Trainer::new(run).unwrap();
    while tr.counters.env_steps < 60 {
        tr.collect_segment(true).unwrap();
    }
    tr
}

fn objective(tr: &Trainer, m: usize, batch: &Batch) -> f64 {
    tr.actor_gradient(m, batch).unwrap().0
}

/// Directional derivative of the critic objective along random actor
/// parameter directions, against the analytic gradient.
fn actor_gradient_matches_differences(run: RunConfig) {
    let mut tr = warmed(run);
    let segs = tr.replay.sample(tr.run.train.batch_size, &mut tr.rng).unwrap();
    let batch = Batch::assemble(&tr, &segs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for m in 0..tr.agents.len() {
        let (_, grads) = tr.actor_gradient(m, &batch).unwrap();
        for _ in 0..3 {
            let dir: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let analytic: f64 = -grads.iter().flatten().zip(dir.iter().flatten()).map(|(g, d)| g * d).sum::<f64>();
            let h = 1e-6;
            let shifted = |sign: f64| {
                let mut t = tr.clone();
                for (b, d) in t.agents[m].actor.blocks_mut().into_iter().zip(&dir) {
                    b.params.iter_mut().zip(d).for_each(|(p, v)| *p += sign * h * v);
                }
                objective(&t, m, &batch)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * (1.0 + fd.abs()),
                "agent {m}: finite difference {fd} vs analytic {analytic}"
            );
        }
    }
}

#[test]
fn cpg_actor_gradient_is_exact() {
    actor_gradient_matches_differences(small(ActorKind::Cpg, Algorithm::Td3, 1));
}

#[test]
fn feed_forward_actor_gradient_is_exact() {
    actor_gradient_matches_differences(small(ActorKind::FeedForward, Algorithm::Td3, 1));
}

#[test]
fn modular_actor_gradients_are_exact() {
    actor_gradient_matches_differences(small(ActorKind::Cpg, Algorithm::Ddpg, 2));
}

#[test]
fn td3_delays_actor_and_target_updates() {
    let mut tr = warmed(small(ActorKind::Cpg, Algorithm::Td3, 1));
    assert_eq!(tr.agents[0].critics.len(), 2);
    let actor = tr.agents[0].actor.clone();
    let target = tr.agents[0].critic_targets[0].clone();
    let critic = tr.agents[0].critics[0].clone();

    let first = tr.update_step().unwrap();
    assert!(first.actor_objective.is_none());
    assert_eq!(tr.agents[0].actor, actor);
    assert_eq!(tr.agents[0].critic_targets[0], target);
    assert_ne!(tr.agents[0].critics[0], critic);

    let second = tr.update_step().unwrap();
    assert!(second.actor_objective.is_some());
    assert_ne!(tr.agents[0].actor, actor);
    assert_ne!(tr.agents[0].critic_targets[0], target);
}

#[test]
fn ddpg_updates_the_actor_every_step() {
    let mut tr = warmed(small(ActorKind::Cpg, Algorithm::Ddpg, 1));
    assert_eq!(tr.agents[0].critics.len(), 1);
    let actor = tr.agents[0].actor.clone();
    assert!(tr.update_step().unwrap().actor_objective.is_some());
    assert_ne!(tr.agents[0].actor, actor);
}

#[test]
fn targets_trail_their_sources_by_polyak_averaging() {
    let mut tr = warmed(small(ActorKind::FeedForward, Algorithm::Ddpg, 1));
    let before = tr.agents[0].actor_target.flat_params();
    tr.update_step().unwrap();
    let rho = tr.run.train.polyak;
    let src = tr.agents[0].actor.flat_params();
    for ((t, b), s) in tr.agents[0].actor_target.flat_params().iter().zip(before).zip(src) {
        assert!((t - (rho * b + (1.0 - rho) * s)).abs() < 1e-14);
    }
}

#[test]
fn deployment_is_a_function_of_the_seed() {
    let mut tr = Trainer::new(small(ActorKind::Cpg, Algorithm::Td3, 1)).unwrap();
    tr.train_until(150).unwrap();
    let policy = tr.policy();
    let run = |seed| {
        let mut sys = build_system(&tr.run, tr.run.partition).unwrap();
        deploy(&policy, &mut sys, 2, seed, false).unwrap()
    };
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(a.returns, b.returns);
    assert_eq!(a.work, b.work);
    assert_ne!(a.returns, c.returns);
    assert!(a.lengths.iter().all(|&l| l <= tr.run.train.t_max));
}

#[test]
fn training_logs_metrics_and_returns() {
    let mut tr = Trainer::new(small(ActorKind::Cpg, Algorithm::Td3, 1)).unwrap();
    tr.train_until(200).unwrap();
    assert!(tr.counters.env_steps >= 200);
    assert!(!tr.returns.is_empty());
    assert!(tr.counters.updates > 0);
    assert!(tr.metrics.iter().all(|m| m.record().len() == tr.metrics[0].record().len()));
}

#[test]
fn critic_warmup_holds_the_actor_fixed() {
    let mut run = small(ActorKind::Cpg, Algorithm::Ddpg, 1);
    run.train.babbling_steps = 0;
    run.train.critic_warmup = 100;
    let mut tr = warmed(run);
    let actor = tr.agents[0].actor.clone();
    let target = tr.agents[0].critic_targets[0].clone();
    tr.update_step().unwrap();
    assert_eq!(tr.agents[0].actor, actor);
    assert_eq!(tr.agents[0].actor_target, actor);
    assert_ne!(tr.agents[0].critic_targets[0], target);
    tr.train_until(140).unwrap();
    assert_ne!(tr.agents[0].actor, actor);
}
