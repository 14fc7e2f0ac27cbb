//! Modular agents over one body: joint partitions, local observation
//! composition and weight transfer between single- and multi-module systems.
//!
//! Centralised training and decentralised execution live in the shared
//! trainer ([`crate::td3`]); this module decides who sees and drives what.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::env::{observe, CrawlerEnv, CrawlerState, EnvConfig, EnvStep, Task};
use crate::error::{structural, Result};
use crate::nn::{Actor, Critic, Init, Mlp, Normalizer, Parameterized};

/// How the body's joints are split into agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    /// One agent drives every joint and sees the full observation.
    Monolithic,
    /// One agent per crawler module with a local observation.
    Modular,
}

/// Which joints an agent drives and how its local observation is laid out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleSpec {
    pub id: usize,
    pub joints: Range<usize>,
    pub obs_dim: usize,
    /// Joint-angle slices of module `k` inside this agent's observation.
    pub shared: Vec<(usize, Range<usize>)>,
    /// Own rates, body velocity, yaw rate and goal direction.
    pub private: Range<usize>,
    /// Global context: the first module's velocity direction.
    pub global: Range<usize>,
}

pub fn module_specs(cfg: &EnvConfig, partition: Partition) -> Vec<ModuleSpec> {
    match partition {
        Partition::Monolithic => {
            let n = cfg.joints();
            let jpm = cfg.joints_per_module();
            vec![ModuleSpec {
                id: 0,
                joints: 0..n,
                obs_dim: cfg.obs_dim(),
                shared: (0..cfg.modules).map(|k| (k, k * jpm..(k + 1) * jpm)).collect(),
                private: n..cfg.obs_dim(),
                global: 0..0,
            }]
        }
        Partition::Modular => {
            let jpm = cfg.joints_per_module();
            let own = cfg.module_obs_dim();
            let context = if cfg.modules > 1 { 2 } else { 0 };
            (0..cfg.modules)
                .map(|m| {
                    let mut shared = vec![(m, 0..jpm)];
                    let mut at = own + context;
                    for k in (0..cfg.modules).filter(|&k| k != m) {
                        shared.push((k, at..at + jpm));
                        at += jpm;
                    }
                    shared.sort_by_key(|(k, _)| *k);
                    ModuleSpec {
                        id: m,
                        joints: m * jpm..(m + 1) * jpm,
                        obs_dim: at,
                        shared,
                        private: jpm..own,
                        global: own..own + context,
                    }
                })
                .collect()
        }
    }
}

/// Unit velocity direction in the body frame, zero when at rest.
fn velocity_direction(s: &CrawlerState) -> [f64; 2] {
    let v = s.body_velocity();
    let n = v[0].hypot(v[1]);
    if n < 1e-9 {
        [0.0; 2]
    } else {
        [v[0] / n, v[1] / n]
    }
}

/// Observation of one agent: only its own slices, never another module's
/// rates.
pub fn local_observation(cfg: &EnvConfig, s: &CrawlerState, spec: &ModuleSpec) -> Vec<f64> {
    if spec.global.is_empty() && spec.joints.len() == cfg.joints() {
        return observe(cfg, s);
    }
    let mut o = vec![0.0; spec.obs_dim];
    let jpm = cfg.joints_per_module();
    for (k, r) in &spec.shared {
        o[r.clone()].copy_from_slice(&s.joints[k * jpm..(k + 1) * jpm]);
    }
    let mut p = spec.private.start;
    for &v in &s.joint_rates[spec.joints.clone()] {
        o[p] = v;
        p += 1;
    }
    let v = s.body_velocity();
    o[p] = v[0];
    o[p + 1] = v[1];
    o[p + 2] = s.yaw_rate;
    p += 3;
    if cfg.task == Task::Goto {
        let g = s.goal_direction_body();
        o[p] = g[0];
        o[p + 1] = g[1];
    }
    if !spec.global.is_empty() {
        let d = velocity_direction(s);
        o[spec.global.start] = d[0];
        o[spec.global.start + 1] = d[1];
    }
    o
}

/// A body plus its agent partition.
#[derive(Debug, Clone)]
pub struct System {
    pub env: CrawlerEnv,
    pub partition: Partition,
    pub specs: Vec<ModuleSpec>,
}

impl System {
    pub fn new(env: CrawlerEnv, partition: Partition) -> Self {
        let specs = module_specs(&env.cfg, partition);
        Self {
            env,
            partition,
            specs,
        }
    }

    pub fn agents(&self) -> usize {
        self.specs.len()
    }

    pub fn global_observation(&self) -> Vec<f64> {
        self.env.observe()
    }

    pub fn local_observation(&self, agent: usize) -> Vec<f64> {
        local_observation(&self.env.cfg, &self.env.state, &self.specs[agent])
    }

    /// Applies every agent's joint goals in one body step.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<EnvStep> {
        if actions.len() != self.specs.len() {
            return Err(structural("one action vector per agent expected"));
        }
        let mut goals = vec![0.0; self.env.cfg.joints()];
        for (spec, a) in self.specs.iter().zip(actions) {
            if a.len() != spec.joints.len() {
                return Err(structural(format!(
                    "agent {} expects {} joint goals",
                    spec.id,
                    spec.joints.len()
                )));
            }
            goals[spec.joints.clone()].copy_from_slice(a);
        }
        self.env.step(&goals)
    }
}

/// Initialisation strategy when growing from one module to two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routine {
    /// Fresh monolithic policy over all joints.
    NotMod = 1,
    /// Module 1 copies the source, module 2 starts random.
    ModRand = 2,
    /// Every module copies the source.
    Mod = 3,
}

impl Routine {
    pub fn from_number(k: u8) -> Option<Self> {
        match k {
            1 => Some(Routine::NotMod),
            2 => Some(Routine::ModRand),
            3 => Some(Routine::Mod),
            _ => None,
        }
    }

    pub fn partition(self) -> Partition {
        match self {
            Routine::NotMod => Partition::Monolithic,
            _ => Partition::Modular,
        }
    }

    /// Whether module `m` starts from the source weights.
    pub fn copies(self, m: usize) -> bool {
        match self {
            Routine::NotMod => false,
            Routine::ModRand => m == 0,
            Routine::Mod => true,
        }
    }
}

/// Copy of `src` whose first layer reads `dst_inputs` columns: column
/// `to` takes `src` column `from` for each `(from, to)` in `columns`, every
/// other column starts small-uniform. Deeper layers are copied as is.
pub fn grow_input<R: Rng + ?Sized>(src: &Mlp, dst_inputs: usize, columns: &[(usize, usize)], rng: &mut R) -> Result<Mlp> {
    let mut sizes = src.sizes().to_vec();
    let src_inputs = sizes[0];
    sizes[0] = dst_inputs;
    let mut dst = Mlp::zeros(&sizes, src.activations())?;
    dst.init_layer(0, Init::Uniform(1e-3), rng);
    let out = sizes[1];
    let (sw, sb) = src.layer_ranges(0);
    let (dw, db) = dst.layer_ranges(0);
    for &(from, to) in columns {
        if from >= src_inputs || to >= dst_inputs {
            return Err(structural("column mapping outside the layer"));
        }
        for r in 0..out {
            dst.params[dw.start + r * dst_inputs + to] = src.params[sw.start + r * src_inputs + from];
        }
    }
    dst.params[db.clone()].copy_from_slice(&src.params[sb]);
    let tail = db.end;
    let src_tail = src.layer_ranges(0).1.end;
    if src.params.len() - src_tail != dst.params.len() - tail {
        return Err(structural("hidden widths differ"));
    }
    dst.params[tail..].copy_from_slice(&src.params[src_tail..]);
    Ok(dst)
}

/// Input-column mapping for a stacked observation window followed by
/// extra blocks: window step `t` of width `src_width` maps onto window step
/// `t` of width `dst_width` through `per_step`, and `tail` maps the
/// remaining columns (given relative to the end of each window).
pub fn window_columns(
    steps: usize,
    src_width: usize,
    dst_width: usize,
    per_step: &[(usize, usize)],
    tail: &[(usize, usize)],
) -> Vec<(usize, usize)> {
    let mut cols = Vec::new();
    for t in 0..steps {
        for &(a, b) in per_step {
            cols.push((t * src_width + a, t * dst_width + b));
        }
    }
    for &(a, b) in tail {
        cols.push((steps * src_width + a, steps * dst_width + b));
    }
    cols
}

/// Grows an actor onto a wider input; heads are copied unchanged.
pub fn transfer_actor<R: Rng + ?Sized>(src: &Actor, dst_inputs: usize, columns: &[(usize, usize)], rng: &mut R) -> Result<Actor> {
    let mut a = src.clone();
    a.trunk = grow_input(&src.trunk, dst_inputs, columns, rng)?;
    Ok(a)
}

pub fn transfer_critic<R: Rng + ?Sized>(src: &Critic, dst_inputs: usize, columns: &[(usize, usize)], rng: &mut R) -> Result<Critic> {
    Ok(Critic {
        net: grow_input(&src.net, dst_inputs, columns, rng)?,
    })
}

/// Normalizer over `dst_dim` inputs carrying `src`'s statistics on mapped
/// dimensions and unit variance elsewhere.
pub fn transfer_normalizer(src: &Normalizer, dst_dim: usize, dims: &[(usize, usize)]) -> Normalizer {
    let mut n = Normalizer::new(dst_dim);
    n.count = src.count;
    n.frozen = src.frozen;
    n.m2.iter_mut().for_each(|m| *m = src.count as f64);
    for &(a, b) in dims {
        n.mean[b] = src.mean[a];
        n.m2[b] = src.m2[a];
    }
    n
}

/// Whether two parameter sets share any block bit-for-bit.
pub fn shares_parameters<P: Parameterized, Q: Parameterized>(a: &P, b: &Q) -> bool {
    a.blocks()
        .iter()
        .any(|x| b.blocks().iter().any(|y| x.params == y.params))
}
