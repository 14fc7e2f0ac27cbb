//! Weight transfer between runs whose observation layouts differ.
//!
//! Every observation entry gets a semantic label, and input columns are
//! copied wherever the destination label matches a (possibly relabelled)
//! source label. Unmatched columns start small-uniform.

use rand::Rng;

use crate::config::RunConfig;
use crate::env::{EnvConfig, Task};
use crate::error::{structural, Result};
use crate::marl::{transfer_actor, transfer_critic, transfer_normalizer, window_columns, ModuleSpec, Routine};
use crate::nn::Normalizer;
use rand::SeedableRng;
use crate::td3::{Agent, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    Angle { module: usize, joint: usize },
    Rate { module: usize, joint: usize },
    VelocityX,
    VelocityY,
    YawRate,
    GoalX,
    GoalY,
    HeadingX,
    HeadingY,
}

impl Feature {
    /// Same feature with module `from` renamed to `to`.
    pub fn relabel(self, from: usize, to: usize) -> Self {
        let swap = |m: usize| if m == from { to } else { m };
        match self {
            Feature::Angle { module, joint } => Feature::Angle { module: swap(module), joint },
            Feature::Rate { module, joint } => Feature::Rate { module: swap(module), joint },
            f => f,
        }
    }
}

fn goal_features(cfg: &EnvConfig, out: &mut Vec<Feature>) {
    if cfg.task == Task::Goto {
        out.extend([Feature::GoalX, Feature::GoalY]);
    }
}

/// Labels of the full-body observation.
pub fn global_features(cfg: &EnvConfig) -> Vec<Feature> {
    let jpm = cfg.joints_per_module();
    let all = |f: fn(usize, usize) -> Feature| (0..cfg.joints()).map(move |j| f(j / jpm, j % jpm));
    let mut out: Vec<Feature> = all(|module, joint| Feature::Angle { module, joint }).collect();
    out.extend(all(|module, joint| Feature::Rate { module, joint }));
    out.extend([Feature::VelocityX, Feature::VelocityY, Feature::YawRate]);
    goal_features(cfg, &mut out);
    out
}

/// Labels of one agent's local observation.
pub fn local_features(cfg: &EnvConfig, spec: &ModuleSpec) -> Vec<Feature> {
    if spec.global.is_empty() && spec.joints.len() == cfg.joints() {
        return global_features(cfg);
    }
    let jpm = cfg.joints_per_module();
    let mut out = vec![Feature::YawRate; spec.obs_dim];
    for (k, r) in &spec.shared {
        for (j, slot) in r.clone().enumerate() {
            out[slot] = Feature::Angle { module: *k, joint: j };
        }
    }
    let mut p = spec.private.start;
    for j in spec.joints.clone() {
        out[p] = Feature::Rate { module: j / jpm, joint: j % jpm };
        p += 1;
    }
    out[p] = Feature::VelocityX;
    out[p + 1] = Feature::VelocityY;
    out[p + 2] = Feature::YawRate;
    if cfg.task == Task::Goto {
        out[p + 3] = Feature::GoalX;
        out[p + 4] = Feature::GoalY;
    }
    if !spec.global.is_empty() {
        out[spec.global.start] = Feature::HeadingX;
        out[spec.global.start + 1] = Feature::HeadingY;
    }
    out
}

/// `(source, destination)` index pairs of matching labels.
pub fn match_features<F: Fn(Feature) -> Feature>(src: &[Feature], dst: &[Feature], relabel: F) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, f) in src.iter().enumerate() {
        let g = relabel(*f);
        pairs.extend(dst.iter().enumerate().filter(|(_, d)| **d == g).map(|(j, _)| (i, j)));
    }
    pairs
}

fn time_major(steps: usize, src_w: usize, dst_w: usize, offset: usize, pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    window_columns(steps, src_w, dst_w, pairs, &[])
        .into_iter()
        .map(|(a, b)| (a, b + offset))
        .collect()
}

/// Copies a single-agent source into agent `m` of `dst`, mapping the
/// source's module 0 onto module `m` of the destination body.
fn copy_agent<R: Rng + ?Sized>(
    src_run: &RunConfig,
    src: &Agent,
    src_spec: &ModuleSpec,
    dst: &mut Trainer,
    m: usize,
    rng: &mut R,
) -> Result<()> {
    let (scfg, dcfg) = (&src_run.env, &dst.run.env);
    let (st, dt) = (&src_run.train, &dst.run.train);
    if st.actor != dt.actor || st.tau_o != dt.tau_o || st.window() != dt.window() {
        return Err(structural("source and destination differ in actor kind or windows"));
    }
    let spec = dst.system.specs[m].clone();
    if spec.joints.len() != src_spec.joints.len() {
        return Err(structural("source agent drives a different number of joints"));
    }
    let relabel = |f: Feature| f.relabel(0, spec.id);

    let src_local = local_features(scfg, src_spec);
    let dst_local = local_features(dcfg, &spec);
    let local = match_features(&src_local, &dst_local, relabel);
    let actor_cols = time_major(st.tau_o, src_local.len(), dst_local.len(), 0, &local);

    let src_global = global_features(scfg);
    let dst_global = global_features(dcfg);
    let global = match_features(&src_global, &dst_global, relabel);
    let mut critic_cols = time_major(st.tau_o, src_global.len(), dst_global.len(), 0, &global);
    let src_state = st.tau_o * src_global.len();
    let dst_state = dt.tau_o * dst_global.len();
    let window = dt.window();
    let joints = spec.joints.len();
    let action_offset = dst_state
        + dst.system.specs[..m]
            .iter()
            .map(|s| window * s.joints.len())
            .sum::<usize>();
    for k in 0..window * joints {
        critic_cols.push((src_state + k, action_offset + k));
    }

    let agent = &mut dst.agents[m];
    let dst_in = agent.actor.input_dim();
    agent.actor = transfer_actor(&src.actor, dst_in, &actor_cols, rng)?;
    agent.actor_target = agent.actor.clone();
    let critic_in = agent.critics[0].net.sizes()[0];
    if src.critics.len() < agent.critics.len() {
        return Err(structural("source has fewer critics than the destination needs"));
    }
    for k in 0..agent.critics.len() {
        agent.critics[k] = transfer_critic(&src.critics[k], critic_in, &critic_cols, rng)?;
    }
    agent.critic_targets = agent.critics.clone();
    agent.actor_opt.reset();
    agent.critic_opts.iter_mut().for_each(|o| o.reset());
    agent.norm = transfer_normalizer(&src.norm, dst_local.len(), &local);
    Ok(())
}

/// Fresh trainer for `dst_run` whose copied agents start from a trained
/// single-agent source; `copies(m)` selects which agents are copied.
pub fn seeded_trainer<F: Fn(usize) -> bool>(
    src_run: &RunConfig,
    src_agents: &[Agent],
    src_state_norm: &Normalizer,
    dst_run: RunConfig,
    copies: F,
) -> Result<Trainer> {
    if src_agents.len() != 1 {
        return Err(structural("transfer source must hold exactly one agent"));
    }
    let src_system = crate::td3::build_system(src_run, src_run.partition)?;
    let src_spec = src_system.specs[0].clone();
    let mut tr = Trainer::new(dst_run)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tr.run.seed ^ 0x7472_616e_7366_6572);
    let src_global = global_features(&src_run.env);
    let dst_global = global_features(&tr.run.env);
    let mut pairs = Vec::new();
    for m in 0..tr.agents.len() {
        if copies(m) {
            copy_agent(src_run, &src_agents[0], &src_spec, &mut tr, m, &mut rng)?;
            let module = tr.system.specs[m].id;
            pairs.extend(match_features(&src_global, &dst_global, |f| f.relabel(0, module)));
        }
    }
    if !pairs.is_empty() {
        tr.state_norm = transfer_normalizer(src_state_norm, dst_global.len(), &pairs);
        // Fresh agents still need statistics for the dimensions they add.
        tr.state_norm.frozen &= tr.agents.iter().all(|a| a.norm.frozen);
    }
    Ok(tr)
}

/// Trainer for `dst_run` starting from a trained checkpoint on the same
/// body, e.g. moving from the intrinsic to the goto reward.
pub fn finetune_trainer(src_run: &RunConfig, src_agents: &[Agent], src_state_norm: &Normalizer, dst_run: RunConfig) -> Result<Trainer> {
    if src_run.env.modules != dst_run.env.modules || src_run.env.legs != dst_run.env.legs {
        return Err(structural("fine-tuning needs the same body"));
    }
    seeded_trainer(src_run, src_agents, src_state_norm, dst_run, |_| true)
}

/// Trainer for a multi-module body initialised by `routine` from a
/// single-module source (ignored by the first routine).
pub fn routine_trainer(
    routine: Routine,
    source: Option<(&RunConfig, &[Agent], &Normalizer)>,
    mut dst_run: RunConfig,
) -> Result<Trainer> {
    dst_run.partition = routine.partition();
    match (routine, source) {
        (Routine::NotMod, _) => Trainer::new(dst_run),
        (_, Some((run, agents, norm))) => seeded_trainer(run, agents, norm, dst_run, |m| routine.copies(m)),
        (_, None) => Err(crate::error::Error::Config("this routine needs a source checkpoint".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::{module_specs, Partition};

    #[test]
    fn local_labels_cover_each_slot_once() {
        let mut cfg = EnvConfig::default();
        cfg.modules = 2;
        cfg.task = Task::Goto;
        for spec in module_specs(&cfg, Partition::Modular) {
            let f = local_features(&cfg, &spec);
            assert_eq!(f.len(), spec.obs_dim);
            let mut uniq = f.clone();
            uniq.sort_by_key(|x| format!("{x:?}"));
            uniq.dedup();
            assert_eq!(uniq.len(), f.len());
        }
    }
}
