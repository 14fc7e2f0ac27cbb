//! Hierarchical TD3 training loop and deterministic deployment.
//!
//! One actor decision fixes the CPG parameters for `tau_c` environment
//! steps. Critics score the observation window together with the joint-goal
//! window, and the actor is improved by backpropagating the critic's action
//! gradient through the CPG rollout into the parameter heads.
//!
//! The trainer is written for any number of agents over one body. A single
//! agent with twin critics is plain TD3; one DDPG agent per module gives
//! centralised critics with decentralised actors.

use std::collections::VecDeque;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{Algorithm, RunConfig};
use crate::cpg::{cpg_rollout, cpg_step, unpack_params, CpgParams, CpgState, HeadVectors, Modulation};
use crate::env::{CrawlerEnv, EnvStep};
use crate::error::{numeric, structural, Error, Result};
use crate::grad::{backward, rollout_with_tape};
use crate::marl::{Partition, System};
use crate::nn::{heads_from_rows, polyak_update, Actor, ActorKind, Adam, Critic, Normalizer, Parameterized};
use crate::replay::{ReplayBuffer, Segment, Transition};

/// Networks, optimizers and rollout state of one agent.
#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: Actor,
    pub actor_target: Actor,
    pub actor_opt: Adam,
    pub critics: Vec<Critic>,
    pub critic_targets: Vec<Critic>,
    pub critic_opts: Vec<Adam>,
    /// Statistics of this agent's local observations.
    pub norm: Normalizer,
    pub cpg: CpgState,
    pub history: VecDeque<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeProgress {
    pub active: bool,
    pub ret: f64,
    pub len: u64,
}

/// One row per gradient update.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub critic_loss: f64,
    pub critic2_loss: f64,
    /// Mean Q of the current policy when the actor was updated.
    pub actor_objective: Option<f64>,
    pub last_return: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 7] = [
        "update",
        "env_steps",
        "episodes",
        "critic1_loss",
        "critic2_loss",
        "actor_objective",
        "last_return",
    ];

    pub fn record(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.update.to_string(),
            self.env_steps.to_string(),
            self.episodes.to_string(),
            self.critic_loss.to_string(),
            self.critic2_loss.to_string(),
            opt(self.actor_objective),
            opt(self.last_return),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub episode: u64,
    pub env_steps: u64,
    pub ret: f64,
    pub length: u64,
    pub distance: f64,
}

impl EpisodeRow {
    pub const HEADER: [&'static str; 5] = ["episode", "env_steps", "return", "length", "distance"];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.episode.to_string(),
            self.env_steps.to_string(),
            self.ret.to_string(),
            self.length.to_string(),
            self.distance.to_string(),
        ]
    }
}

/// Loss diagnostics of one [`Trainer::update_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    /// Per agent, per critic.
    pub critic_losses: Vec<Vec<f64>>,
    pub actor_objective: Option<f64>,
}

/// Complete training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub run: RunConfig,
    pub system: System,
    pub agents: Vec<Agent>,
    pub replay: ReplayBuffer,
    pub rng: ChaCha8Rng,
    /// Statistics of the full-body observation seen by the critics.
    pub state_norm: Normalizer,
    pub counters: Counters,
    pub episode: EpisodeProgress,
    pub metrics: Vec<MetricsRow>,
    pub returns: Vec<EpisodeRow>,
}

fn joint_limit(run: &RunConfig) -> f64 {
    run.env.joint_limit
}

/// Builds the body for a run; the environment stream is derived from the
/// run seed.
pub fn build_system(run: &RunConfig, partition: Partition) -> Result<System> {
    let env = CrawlerEnv::new(
        run.env.clone(),
        run.rewards,
        run.train.t_max,
        run.seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    Ok(System::new(env, partition))
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let system = build_system(&run, run.partition)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let mut agents = Vec::with_capacity(system.agents());
        let critic_in = critic_input_dim(&run, &system);
        for spec in &system.specs {
            let actor = Actor::new(
                run.train.actor,
                run.train.tau_o * spec.obs_dim,
                spec.joints.len(),
                &run.network,
                &run.modulation,
                &mut rng,
            )?;
            let critics = (0..run.train.critics())
                .map(|_| Critic::new(critic_in, &run.network, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            agents.push(Agent::fresh(&run, actor, critics, spec.obs_dim, spec.joints.len()));
        }
        Self::assemble(run, system, agents, rng)
    }

    /// Wraps prepared agents into a trainer at step zero.
    pub fn assemble(run: RunConfig, system: System, agents: Vec<Agent>, rng: ChaCha8Rng) -> Result<Self> {
        if agents.len() != system.agents() {
            return Err(structural("one agent per partition entry expected"));
        }
        let state_dim = system.env.cfg.obs_dim();
        Ok(Self {
            replay: ReplayBuffer::new(run.train.replay_capacity)?,
            state_norm: Normalizer::new(state_dim),
            system,
            agents,
            rng,
            counters: Counters::default(),
            episode: EpisodeProgress::default(),
            metrics: Vec::new(),
            returns: Vec::new(),
            run,
        })
    }

    fn babbling(&self) -> bool {
        self.counters.env_steps < self.run.train.babbling_steps
    }

    fn reset_episode(&mut self) {
        self.system.env.reset();
        let n_obs = self.system.global_observation();
        self.state_norm.observe(&n_obs);
        for m in 0..self.agents.len() {
            let o = self.system.local_observation(m);
            let joints = self.system.specs[m].joints.len();
            let a = &mut self.agents[m];
            a.cpg = CpgState::random_phases(joints, self.run.env.dt, &mut self.rng);
            a.norm.observe(&o);
            a.history = std::iter::repeat_n(o, self.run.train.tau_o).collect();
        }
        self.episode = EpisodeProgress {
            active: true,
            ret: 0.0,
            len: 0,
        };
    }

    fn actor_input(&self, m: usize) -> Vec<f64> {
        let a = &self.agents[m];
        a.history.iter().flat_map(|o| a.norm.normalize(o)).collect()
    }

    /// One actor decision: up to `tau_c` environment steps (one for a
    /// feed-forward actor), stored in the replay buffer. Returns the number
    /// of steps taken.
    pub fn collect_segment(&mut self, explore: bool) -> Result<usize> {
        if !self.episode.active {
            self.reset_episode();
        }
        let babbling = self.babbling();
        if !babbling {
            self.freeze_normalizers();
        }
        let lim = joint_limit(&self.run);
        let sigma = self.run.train.exploration_noise;
        let window = self.run.train.window();
        let n_agents = self.agents.len();

        let mut params: Vec<Option<CpgParams>> = Vec::with_capacity(n_agents);
        for m in 0..n_agents {
            let joints = self.system.specs[m].joints.len();
            params.push(match self.run.train.actor {
                ActorKind::Cpg if babbling => Some(CpgParams::sample_uniform(joints, &mut self.rng)),
                ActorKind::Cpg => {
                    let raw = self.agents[m].actor.heads_for(&self.actor_input(m))?;
                    Some(unpack_params(&raw, joints)?)
                }
                ActorKind::FeedForward => None,
            });
        }

        let mut taken = 0;
        for k in 0..window {
            let mut actions = Vec::with_capacity(n_agents);
            let mut h = Vec::new();
            let mut h_next = Vec::new();
            for m in 0..n_agents {
                let joints = self.system.specs[m].joints.len();
                let mut g = match &params[m] {
                    Some(p) => {
                        let (next, y) = cpg_step(p, &self.run.modulation, &self.agents[m].cpg)?;
                        h.push(std::mem::replace(&mut self.agents[m].cpg, next));
                        h_next.push(self.agents[m].cpg.clone());
                        y
                    }
                    None if babbling => (0..joints).map(|_| self.rng.random_range(-lim..=lim)).collect(),
                    None => {
                        let x = self.actor_input(m);
                        self.agents[m].actor.joint_goals(&x)?.iter().map(|v| v * lim).collect()
                    }
                };
                let noisy = explore && !(babbling && params[m].is_none());
                for v in g.iter_mut() {
                    if noisy && sigma > 0.0 {
                        let e: f64 = self.rng.sample(StandardNormal);
                        *v += sigma * e;
                    }
                    *v = v.clamp(-lim, lim);
                }
                actions.push(g);
            }
            let state = self.system.global_observation();
            let local: Vec<_> = (0..n_agents).map(|m| self.system.local_observation(m)).collect();
            let EnvStep { reward, done, .. } = self.system.step(&actions)?;
            let next_state = self.system.global_observation();
            let next_local: Vec<_> = (0..n_agents).map(|m| self.system.local_observation(m)).collect();
            self.state_norm.observe(&next_state);
            for m in 0..n_agents {
                let a = &mut self.agents[m];
                a.norm.observe(&next_local[m]);
                a.history.pop_front();
                a.history.push_back(next_local[m].clone());
            }
            self.replay.push(Transition {
                state,
                next_state,
                local,
                next_local,
                actions,
                reward,
                done,
                h,
                h_next,
                params: params
                    .iter()
                    .map(|p| p.as_ref().map(|p| p.packed().to_flat()).unwrap_or_default())
                    .collect(),
                goal: Vec::new(),
                episode: self.counters.episodes,
                offset: k as u32,
            });
            self.counters.env_steps += 1;
            self.episode.ret += reward;
            self.episode.len += 1;
            taken += 1;
            if done {
                self.returns.push(EpisodeRow {
                    episode: self.counters.episodes,
                    env_steps: self.counters.env_steps,
                    ret: self.episode.ret,
                    length: self.episode.len,
                    distance: self.system.env.state.distance,
                });
                self.counters.episodes += 1;
                self.episode.active = false;
                break;
            }
        }
        self.replay.close_segment(taken as u32)?;
        Ok(taken)
    }

    fn freeze_normalizers(&mut self) {
        self.state_norm.frozen = true;
        for a in &mut self.agents {
            a.norm.frozen = true;
        }
    }

    /// Collects one segment and runs the configured number of updates once
    /// babbling is over and enough decisions are stored.
    pub fn train_segment(&mut self) -> Result<()> {
        self.collect_segment(true)?;
        if !self.babbling() && self.replay.segments.len() >= self.run.train.batch_size {
            for _ in 0..self.run.train.updates_per_segment {
                let stats = self.update_step()?;
                self.log_update(&stats);
            }
        }
        Ok(())
    }

    fn log_update(&mut self, stats: &UpdateStats) {
        let mean = |i: usize| {
            let v: Vec<f64> = stats.critic_losses.iter().filter_map(|c| c.get(i).copied()).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        self.metrics.push(MetricsRow {
            update: self.counters.updates,
            env_steps: self.counters.env_steps,
            episodes: self.counters.episodes,
            critic_loss: mean(0),
            critic2_loss: mean(1),
            actor_objective: stats.actor_objective,
            last_return: self.returns.last().map(|r| r.ret),
        });
    }

    /// Trains until at least `env_steps` environment steps were taken.
    pub fn train_until(&mut self, env_steps: u64) -> Result<()> {
        while self.counters.env_steps < env_steps {
            self.train_segment()?;
        }
        Ok(())
    }

    /// Deterministic policy snapshot for deployment.
    pub fn policy(&self) -> Policy {
        Policy {
            kind: self.run.train.actor,
            actors: self.agents.iter().map(|a| a.actor.clone()).collect(),
            norms: self.agents.iter().map(|a| a.norm.clone()).collect(),
            tau_c: self.run.train.tau_c,
            tau_o: self.run.train.tau_o,
            modulation: self.run.modulation,
        }
    }

    /// One gradient update of every agent's critics, and of the actors on
    /// every `policy_delay`-th call, followed by target averaging.
    pub fn update_step(&mut self) -> Result<UpdateStats> {
        let cfg = self.run.train.clone();
        let segs = self.replay.sample(cfg.batch_size, &mut self.rng)?;
        let batch = Batch::assemble(self, &segs)?;
        let iteration = self.counters.updates + 1;
        let n_agents = self.agents.len();
        let lim = joint_limit(&self.run);

        // target joint-goal windows of every agent
        let mut target_actions = Vec::with_capacity(n_agents);
        for m in 0..n_agents {
            let a = &self.agents[m];
            let raw = a.actor_target.forward(batch.next_local[m].view())?;
            let mut u = self.policy_actions(m, &raw, &batch.h_end[m])?;
            if cfg.algorithm == Algorithm::Td3 && cfg.target_noise > 0.0 {
                u.mapv_inplace(|v| {
                    let e: f64 = self.rng.sample(StandardNormal);
                    let e = (cfg.target_noise * e).clamp(-cfg.noise_clip, cfg.noise_clip);
                    (v + e).clamp(-lim, lim)
                });
            }
            target_actions.push(u);
        }
        let next_input = batch.critic_input(&batch.next_states, &target_actions);
        let input = batch.critic_input(&batch.states, &batch.actions);

        // critic regression, all gradients computed before any update
        let mut critic_losses = Vec::with_capacity(n_agents);
        let mut critic_grads = Vec::with_capacity(n_agents);
        for a in &self.agents {
            let mut q_next = vec![f64::INFINITY; batch.len()];
            for t in &a.critic_targets {
                for (q, v) in q_next.iter_mut().zip(t.forward(next_input.view())?) {
                    *q = q.min(v);
                }
            }
            let y: Vec<f64> = (0..batch.len())
                .map(|i| batch.returns[i] + batch.bootstrap[i] * q_next[i])
                .collect();
            let mut losses = Vec::new();
            let mut grads = Vec::new();
            for c in &a.critics {
                let cache = c.net.forward_cached(input.view())?;
                let q = cache.output().column(0).to_owned();
                let b = batch.len() as f64;
                let loss = q.iter().zip(&y).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / b;
                if !loss.is_finite() {
                    return Err(numeric(self.counters.env_steps, "non-finite critic loss"));
                }
                let dy = Array2::from_shape_fn((batch.len(), 1), |(i, _)| 2.0 * (q[i] - y[i]) / b);
                let mut g = c.zero_grads();
                c.net.backward(&cache, &dy, &mut g[0])?;
                losses.push(loss);
                grads.push(g);
            }
            critic_losses.push(losses);
            critic_grads.push(grads);
        }

        let mut actor_objective = None;
        let mut actor_grads = Vec::new();
        let warming = cfg.critic_warmup > 0 && self.counters.env_steps < cfg.babbling_steps + cfg.critic_warmup;
        let actor_turn = iteration % cfg.policy_delay == 0 || cfg.algorithm == Algorithm::Ddpg;
        if actor_turn && !warming {
            let mut total = 0.0;
            for m in 0..n_agents {
                let (obj, g) = self.actor_gradient(m, &batch)?;
                total += obj;
                actor_grads.push(g);
            }
            actor_objective = Some(total / n_agents as f64);
        }

        for (a, grads) in self.agents.iter_mut().zip(&critic_grads) {
            for ((c, opt), g) in a.critics.iter_mut().zip(&mut a.critic_opts).zip(grads) {
                opt.update(c, g)?;
            }
        }
        if actor_turn {
            for (a, g) in self.agents.iter_mut().zip(&actor_grads) {
                a.actor_opt.update(&mut a.actor, g)?;
            }
            for a in &mut self.agents {
                if !warming {
                    polyak_update(&mut a.actor_target, &a.actor, cfg.polyak)?;
                }
                for (t, c) in a.critic_targets.iter_mut().zip(&a.critics) {
                    polyak_update(t, c, cfg.polyak)?;
                }
            }
        }
        self.counters.updates = iteration;
        Ok(UpdateStats {
            critic_losses,
            actor_objective,
        })
    }

    /// Joint-goal windows (batch × window·joints) produced by raw actor
    /// outputs: a CPG rollout from `h` or the feed-forward goals.
    fn policy_actions(&self, m: usize, raw: &[Array2<f64>], h: &[CpgState]) -> Result<Array2<f64>> {
        let joints = self.system.specs[m].joints.len();
        let lim = joint_limit(&self.run);
        let rows = raw[0].nrows();
        match self.run.train.actor {
            ActorKind::FeedForward => Ok(raw[0].mapv(|v| v * lim)),
            ActorKind::Cpg => {
                let tau_c = self.run.train.tau_c;
                let mut out = Array2::zeros((rows, tau_c * joints));
                for i in 0..rows {
                    let p = unpack_params(&heads_from_rows(raw, i, joints), joints)?;
                    let r = cpg_rollout(&p, &self.run.modulation, &h[i], tau_c)?;
                    for (t, y) in r.outputs.iter().enumerate() {
                        for (j, v) in y.iter().enumerate() {
                            out[[i, t * joints + j]] = v.clamp(-lim, lim);
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Mean first-critic value of agent `m`'s current policy and the actor
    /// parameter gradient of its negation.
    pub fn actor_gradient(&self, m: usize, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>)> {
        let a = &self.agents[m];
        let joints = self.system.specs[m].joints.len();
        let lim = joint_limit(&self.run);
        let rows = batch.len();
        let cache = a.actor.forward_cached(batch.local[m].view())?;
        let outs: Vec<Array2<f64>> = cache.head_outputs().into_iter().cloned().collect();

        let mut actions = batch.actions.clone();
        let mut tapes = Vec::new();
        match self.run.train.actor {
            ActorKind::FeedForward => actions[m] = outs[0].mapv(|v| v * lim),
            ActorKind::Cpg => {
                let tau_c = self.run.train.tau_c;
                let mut u = Array2::zeros((rows, tau_c * joints));
                for i in 0..rows {
                    let p = unpack_params(&heads_from_rows(&outs, i, joints), joints)?;
                    let (_, y, tape) = rollout_with_tape(&p, &self.run.modulation, &batch.h_start[m][i], tau_c)?;
                    for (t, yt) in y.iter().enumerate() {
                        for (j, v) in yt.iter().enumerate() {
                            u[[i, t * joints + j]] = *v;
                        }
                    }
                    tapes.push(tape);
                }
                actions[m] = u;
            }
        }
        let input = batch.critic_input(&batch.states, &actions);
        let critic = &a.critics[0];
        let c_cache = critic.net.forward_cached(input.view())?;
        let objective = c_cache.output().mean().unwrap_or(0.0);
        let dy = Array2::from_elem((rows, 1), -1.0 / rows as f64);
        let mut scratch = critic.zero_grads();
        let dx = critic.net.backward(&c_cache, &dy, &mut scratch[0])?;
        let start = batch.action_offset(m);
        let du = dx.slice(s![.., start..start + actions[m].ncols()]);

        let head_grads: Vec<Array2<f64>> = match self.run.train.actor {
            ActorKind::FeedForward => vec![du.mapv(|v| v * lim)],
            ActorKind::Cpg => {
                let sizes = HeadVectors::sizes(joints);
                let mut hg: Vec<Array2<f64>> = outs.iter().map(|o| Array2::zeros(o.dim())).collect();
                let tau_c = self.run.train.tau_c;
                for i in 0..rows {
                    let gy: Vec<Vec<f64>> = (0..tau_c)
                        .map(|t| (0..joints).map(|j| du[[i, t * joints + j]]).collect())
                        .collect();
                    let mut g = backward(&tapes[i], &gy)?.0;
                    g.scale_by_affine_slope();
                    for (k, fam) in g.families().into_iter().enumerate() {
                        for (c, v) in fam.iter().enumerate().take(sizes[k]) {
                            hg[k][[i, c]] = *v;
                        }
                    }
                }
                hg
            }
        };
        let mut grads = a.actor.zero_grads();
        a.actor.backward(&cache, &head_grads, &mut grads)?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(numeric(self.counters.env_steps, "non-finite actor gradient"));
        }
        Ok((objective, grads))
    }
}

impl Agent {
    pub fn fresh(run: &RunConfig, actor: Actor, critics: Vec<Critic>, obs_dim: usize, joints: usize) -> Self {
        let t = &run.train;
        let actor_opt = Adam::new(&actor, t.learning_rate, t.adam_betas, t.grad_clip);
        let critic_opts = critics
            .iter()
            .map(|c| Adam::new(c, t.learning_rate, t.adam_betas, t.grad_clip))
            .collect();
        Self {
            actor_target: actor.clone(),
            actor,
            actor_opt,
            critic_targets: critics.clone(),
            critics,
            critic_opts,
            norm: Normalizer::new(obs_dim),
            cpg: CpgState::zeros(joints, run.env.dt),
            history: VecDeque::new(),
        }
    }
}

/// Input width of every critic: the full-body observation window followed
/// by all agents' joint-goal windows.
pub fn critic_input_dim(run: &RunConfig, system: &System) -> usize {
    let joints: usize = system.specs.iter().map(|s| s.joints.len()).sum();
    run.train.tau_o * system.env.cfg.obs_dim() + run.train.window() * joints
}

/// A sampled minibatch with windows assembled and normalized.
pub struct Batch {
    pub states: Array2<f64>,
    pub next_states: Array2<f64>,
    /// Per agent: normalized local observation windows.
    pub local: Vec<Array2<f64>>,
    pub next_local: Vec<Array2<f64>>,
    /// Per agent: stored joint-goal windows, padded past early terminals.
    pub actions: Vec<Array2<f64>>,
    pub h_start: Vec<Vec<CpgState>>,
    pub h_end: Vec<Vec<CpgState>>,
    pub returns: Vec<f64>,
    /// `γ(1−d)` or `γ^len(1−d)`.
    pub bootstrap: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn action_offset(&self, m: usize) -> usize {
        self.states.ncols() + self.actions[..m].iter().map(|a| a.ncols()).sum::<usize>()
    }

    pub fn critic_input(&self, states: &Array2<f64>, actions: &[Array2<f64>]) -> Array2<f64> {
        let mut views = vec![states.view()];
        views.extend(actions.iter().map(|a| a.view()));
        ndarray::concatenate(ndarray::Axis(1), &views).expect("rows agree")
    }

    pub fn assemble(tr: &Trainer, segs: &[Segment]) -> Result<Self> {
        let cfg = &tr.run.train;
        let rb = &tr.replay;
        let n_agents = tr.agents.len();
        let b = segs.len();
        let tau_o = cfg.tau_o;
        let window = cfg.window();
        let lim = joint_limit(&tr.run);
        let state_dim = tr.state_norm.dim();

        let mut states = Vec::with_capacity(b * tau_o * state_dim);
        let mut next_states = Vec::with_capacity(b * tau_o * state_dim);
        let mut local = vec![Vec::new(); n_agents];
        let mut next_local = vec![Vec::new(); n_agents];
        let mut actions = vec![Vec::new(); n_agents];
        let mut h_start = vec![Vec::with_capacity(b); n_agents];
        let mut h_end = vec![Vec::with_capacity(b); n_agents];
        let mut returns = Vec::with_capacity(b);
        let mut bootstrap = Vec::with_capacity(b);
        let mut raw = Vec::new();

        let normed = |norm: &Normalizer, raw: &[f64], out: &mut Vec<f64>| {
            let d = norm.dim();
            for chunk in raw.chunks(d) {
                let start = out.len();
                out.resize(start + d, 0.0);
                norm.normalize_into(chunk, &mut out[start..]);
            }
        };

        for seg in segs {
            let first = seg.start;
            let last = seg.start + seg.len as u64 - 1;
            raw.clear();
            rb.window(first, tau_o, |t| &t.state, &mut raw);
            normed(&tr.state_norm, &raw, &mut states);
            raw.clear();
            rb.next_window(last, tau_o, |t| &t.state, |t| &t.next_state, &mut raw);
            normed(&tr.state_norm, &raw, &mut next_states);
            for m in 0..n_agents {
                raw.clear();
                rb.window(first, tau_o, |t| &t.local[m], &mut raw);
                normed(&tr.agents[m].norm, &raw, &mut local[m]);
                raw.clear();
                rb.next_window(last, tau_o, |t| &t.local[m], |t| &t.next_local[m], &mut raw);
                normed(&tr.agents[m].norm, &raw, &mut next_local[m]);
            }

            let mut ret = 0.0;
            let mut disc = 1.0;
            let mut done = false;
            for t in rb.transitions(*seg) {
                ret += if cfg.discount_within_window { disc * t.reward } else { t.reward };
                disc *= cfg.gamma;
                done = t.done;
                for m in 0..n_agents {
                    actions[m].extend_from_slice(&t.actions[m]);
                }
            }
            if (seg.len as usize) < window && !done {
                return Err(structural("short segment without a terminal"));
            }
            returns.push(ret);
            let g = if cfg.discount_within_window { disc } else { cfg.gamma };
            bootstrap.push(if done { 0.0 } else { g });

            let first_t = rb.get(first).ok_or_else(|| structural("segment evicted"))?;
            let last_t = rb.get(last).ok_or_else(|| structural("segment evicted"))?;
            for m in 0..n_agents {
                if cfg.actor == ActorKind::Cpg {
                    h_start[m].push(first_t.h[m].clone());
                    h_end[m].push(last_t.h_next[m].clone());
                    let missing = window - seg.len as usize;
                    if missing > 0 {
                        let joints = first_t.actions[m].len();
                        let packed = HeadVectors::from_flat(joints, &last_t.params[m])?;
                        let p = CpgParams::from_packed(joints, &packed)?;
                        let r = cpg_rollout(&p, &tr.run.modulation, &last_t.h_next[m], missing)?;
                        for y in r.outputs {
                            actions[m].extend(y.iter().map(|v| v.clamp(-lim, lim)));
                        }
                    }
                }
            }
        }
        let mat = |v: Vec<f64>| {
            let cols = v.len() / b.max(1);
            Array2::from_shape_vec((b, cols), v).expect("uniform rows")
        };
        Ok(Self {
            states: mat(states),
            next_states: mat(next_states),
            local: local.into_iter().map(mat).collect(),
            next_local: next_local.into_iter().map(mat).collect(),
            actions: actions.into_iter().map(mat).collect(),
            h_start,
            h_end,
            returns,
            bootstrap,
        })
    }
}

/// Frozen actors and normalizers deployed without critics or noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub kind: ActorKind,
    pub actors: Vec<Actor>,
    pub norms: Vec<Normalizer>,
    pub tau_c: usize,
    pub tau_o: usize,
    pub modulation: Modulation,
}

/// One logged deployment step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub episode: u64,
    pub step: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
    pub z: f64,
    pub joints: Vec<f64>,
    pub goals: Vec<f64>,
    pub torque: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl TrajectoryRow {
    pub fn header(joints: usize) -> Vec<String> {
        let mut h: Vec<String> = ["episode", "step", "x", "y", "theta", "v_x", "v_y", "yaw_rate", "z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for prefix in ["s", "g", "torque"] {
            h.extend((0..joints).map(|j| format!("{prefix}_{j}")));
        }
        h.push("r".into());
        h.push("d".into());
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.episode.to_string(), self.step.to_string()];
        r.extend(
            [self.x, self.y, self.heading, self.velocity[0], self.velocity[1], self.yaw_rate, self.z]
                .iter()
                .map(|v| v.to_string()),
        );
        for v in self.joints.iter().chain(&self.goals).chain(&self.torque) {
            r.push(v.to_string());
        }
        r.push(self.reward.to_string());
        r.push(u8::from(self.done).to_string());
        r
    }
}

/// Outcome of [`deploy`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeployReport {
    pub returns: Vec<f64>,
    pub lengths: Vec<u64>,
    pub distances: Vec<f64>,
    pub work: Vec<f64>,
    pub actor_calls: u64,
    pub rows: Vec<TrajectoryRow>,
}

impl DeployReport {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }
}

/// Runs `episodes` noise-free episodes, calling the actors once per
/// `tau_c` steps (every step for feed-forward actors).
pub fn deploy(policy: &Policy, system: &mut System, episodes: usize, seed: u64, log: bool) -> Result<DeployReport> {
    if policy.actors.len() != system.agents() {
        return Err(structural("policy and system disagree on the number of agents"));
    }
    for (a, spec) in policy.actors.iter().zip(&system.specs) {
        if a.input_dim() != policy.tau_o * spec.obs_dim || a.joints != spec.joints.len() {
            return Err(structural("actor shape does not fit the system"));
        }
    }
    if policy.tau_c == 0 || policy.tau_o == 0 {
        return Err(Error::Config("tau_c and tau_o must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    system.env.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let lim = system.env.cfg.joint_limit;
    let dt = system.env.cfg.dt;
    let mut report = DeployReport::default();
    for ep in 0..episodes {
        system.env.reset();
        let n_agents = system.agents();
        let mut cpg: Vec<CpgState> = system
            .specs
            .iter()
            .map(|s| CpgState::random_phases(s.joints.len(), dt, &mut rng))
            .collect();
        let mut hist: Vec<VecDeque<Vec<f64>>> = (0..n_agents)
            .map(|m| std::iter::repeat_n(system.local_observation(m), policy.tau_o).collect())
            .collect();
        let mut params: Vec<Option<CpgParams>> = vec![None; n_agents];
        let (mut ret, mut work) = (0.0, 0.0);
        let mut t = 0usize;
        loop {
            let decide = policy.kind == ActorKind::FeedForward || t % policy.tau_c == 0;
            let mut actions = Vec::with_capacity(n_agents);
            for m in 0..n_agents {
                let x: Vec<f64> = hist[m].iter().flat_map(|o| policy.norms[m].normalize(o)).collect();
                let joints = system.specs[m].joints.len();
                let g = match policy.kind {
                    ActorKind::Cpg => {
                        if decide {
                            let raw = policy.actors[m].heads_for(&x)?;
                            params[m] = Some(unpack_params(&raw, joints)?);
                            report.actor_calls += 1;
                        }
                        let p = params[m].as_ref().expect("decided at t = 0");
                        let (next, y) = cpg_step(p, &policy.modulation, &cpg[m])?;
                        cpg[m] = next;
                        y
                    }
                    ActorKind::FeedForward => {
                        report.actor_calls += 1;
                        policy.actors[m].joint_goals(&x)?.iter().map(|v| v * lim).collect()
                    }
                };
                actions.push(g.iter().map(|v| v.clamp(-lim, lim)).collect::<Vec<_>>());
            }
            let st = system.step(&actions)?;
            ret += st.reward;
            work += st.torque.iter().zip(&st.joint_delta).map(|(a, b)| (a * b).abs()).sum::<f64>();
            for (m, h) in hist.iter_mut().enumerate() {
                h.pop_front();
                h.push_back(system.local_observation(m));
            }
            if log {
                let s = &system.env.state;
                report.rows.push(TrajectoryRow {
                    episode: ep as u64,
                    step: s.step,
                    x: s.x,
                    y: s.y,
                    heading: s.heading,
                    velocity: s.velocity,
                    yaw_rate: s.yaw_rate,
                    z: s.z,
                    joints: s.joints.clone(),
                    goals: actions.concat(),
                    torque: st.torque.clone(),
                    reward: st.reward,
                    done: st.done,
                });
            }
            t += 1;
            if st.done {
                break;
            }
        }
        report.returns.push(ret);
        report.lengths.push(t as u64);
        report.distances.push(system.env.state.distance);
        report.work.push(work);
    }
    Ok(report)
}
