//! Self-describing binary checkpoints.
//!
//! Layout (little endian): the magic `DCPGCKPT`, a version byte, a `u32`
//! entry count, then entries of `u16` name length, UTF-8 name, a type tag
//! (`0` f64 array, `1` u64 array, `2` bytes), a `u64` element count and the
//! payload. Names are unique and nothing may follow the last entry, so the
//! encoding of a decoded record is byte-identical to its input.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::cpg::CpgState;
use crate::env::CrawlerState;
use crate::error::{Error, Result};
use crate::marl::System;
use crate::nn::{Activation, Actor, ActorKind, Adam, Critic, Mlp, Normalizer};
use crate::replay::{ReplayBuffer, Segment, Transition};
use crate::td3::{build_system, Agent, Counters, EpisodeProgress, EpisodeRow, MetricsRow, Policy, Trainer};

pub const MAGIC: &[u8; 8] = b"DCPGCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

/// Ordered named entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Record {
    entries: Vec<(String, Value)>,
    index: HashMap<String, usize>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn put(&mut self, name: impl Into<String>, value: Value) {
        let name = name.into();
        assert!(name.len() <= u16::MAX as usize, "entry name too long");
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn put_f64s(&mut self, name: impl Into<String>, v: &[f64]) {
        self.put(name, Value::F64(v.to_vec()));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, v: &[u64]) {
        self.put(name, Value::U64(v.to_vec()));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, v: &[u8]) {
        self.put(name, Value::Bytes(v.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&Value> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| fmt_err(format!("missing entry `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name)? {
            Value::F64(v) => Ok(v),
            _ => Err(fmt_err(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Value::U64(v) => Ok(v),
            _ => Err(fmt_err(format!("entry `{name}` is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Value::Bytes(v) => Ok(v),
            _ => Err(fmt_err(format!("entry `{name}` is not bytes"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [x] => Ok(*x),
            _ => Err(fmt_err(format!("entry `{name}` is not a scalar"))),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.bytes(name)?).map_err(|_| fmt_err(format!("entry `{name}` is not UTF-8")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, value) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match value {
                Value::F64(v) => {
                    out.push(0);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Value::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Value::Bytes(v) => {
                    out.push(2);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    out.extend_from_slice(v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut rec = Record::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fmt_err("entry name is not UTF-8"))?
                .to_string();
            if rec.index.contains_key(&name) {
                return Err(fmt_err(format!("duplicate entry `{name}`")));
            }
            let tag = r.take(1)?[0];
            let n = u64::from_le_bytes(r.array()?);
            let width = match tag {
                0 | 1 => 8,
                2 => 1,
                t => return Err(fmt_err(format!("unknown tag {t}"))),
            };
            let size = n
                .checked_mul(width)
                .filter(|s| *s <= (bytes.len() - r.at) as u64)
                .ok_or_else(|| fmt_err("entry runs past the end"))? as usize;
            let payload = r.take(size)?;
            let value = match tag {
                0 => Value::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => Value::U64(
                    payload
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                _ => Value::Bytes(payload.to_vec()),
            };
            rec.put(name, value);
        }
        if r.at != bytes.len() {
            return Err(fmt_err("trailing bytes after the last entry"));
        }
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err("unexpected end of data"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

// ---- component encoders -------------------------------------------------

fn put_mlp(r: &mut Record, p: &str, m: &Mlp) {
    r.put_u64s(format!("{p}.sizes"), &m.sizes().iter().map(|&s| s as u64).collect::<Vec<_>>());
    r.put_bytes(format!("{p}.acts"), &m.activations().iter().map(|a| a.code()).collect::<Vec<_>>());
    r.put_f64s(format!("{p}.params"), &m.params);
}

fn get_mlp(r: &Record, p: &str) -> Result<Mlp> {
    let sizes = r.u64s(&format!("{p}.sizes"))?.iter().map(|&s| s as usize).collect();
    let acts = r
        .bytes(&format!("{p}.acts"))?
        .iter()
        .map(|&c| Activation::from_code(c).ok_or_else(|| fmt_err("unknown activation")))
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_parts(sizes, acts, r.f64s(&format!("{p}.params"))?.to_vec()).map_err(|e| fmt_err(e.to_string()))
}

fn put_actor(r: &mut Record, p: &str, a: &Actor) {
    let kind = match a.kind {
        ActorKind::Cpg => 0,
        ActorKind::FeedForward => 1,
    };
    r.put_u64s(format!("{p}.meta"), &[kind, a.joints as u64, a.heads.len() as u64]);
    put_mlp(r, &format!("{p}.trunk"), &a.trunk);
    for (k, h) in a.heads.iter().enumerate() {
        put_mlp(r, &format!("{p}.head{k}"), h);
    }
}

fn get_actor(r: &Record, p: &str) -> Result<Actor> {
    let meta = r.u64s(&format!("{p}.meta"))?;
    let [kind, joints, heads] = meta else {
        return Err(fmt_err("actor meta must have three entries"));
    };
    let kind = match kind {
        0 => ActorKind::Cpg,
        1 => ActorKind::FeedForward,
        _ => return Err(fmt_err("unknown actor kind")),
    };
    if *heads > 16 {
        return Err(fmt_err("implausible head count"));
    }
    Ok(Actor {
        kind,
        joints: *joints as usize,
        trunk: get_mlp(r, &format!("{p}.trunk"))?,
        heads: (0..*heads)
            .map(|k| get_mlp(r, &format!("{p}.head{k}")))
            .collect::<Result<_>>()?,
    })
}

fn put_adam(r: &mut Record, p: &str, o: &Adam) {
    r.put_f64s(format!("{p}.hyper"), &[o.lr, o.beta1, o.beta2, o.eps, o.clip]);
    r.put_u64s(format!("{p}.step"), &[o.step, o.m.len() as u64]);
    for k in 0..o.m.len() {
        r.put_f64s(format!("{p}.m{k}"), &o.m[k]);
        r.put_f64s(format!("{p}.v{k}"), &o.v[k]);
    }
}

fn get_adam(r: &Record, p: &str) -> Result<Adam> {
    let h = r.f64s(&format!("{p}.hyper"))?;
    let [lr, beta1, beta2, eps, clip] = h else {
        return Err(fmt_err("adam hyperparameters must have five entries"));
    };
    let s = r.u64s(&format!("{p}.step"))?;
    let [step, blocks] = s else {
        return Err(fmt_err("adam step entry must have two values"));
    };
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for k in 0..(*blocks).min(64) {
        m.push(r.f64s(&format!("{p}.m{k}"))?.to_vec());
        v.push(r.f64s(&format!("{p}.v{k}"))?.to_vec());
    }
    Ok(Adam {
        lr: *lr,
        beta1: *beta1,
        beta2: *beta2,
        eps: *eps,
        clip: *clip,
        step: *step,
        m,
        v,
    })
}

fn put_norm(r: &mut Record, p: &str, n: &Normalizer) {
    r.put_u64s(format!("{p}.count"), &[n.count, u64::from(n.frozen)]);
    r.put_f64s(format!("{p}.mean"), &n.mean);
    r.put_f64s(format!("{p}.m2"), &n.m2);
}

fn get_norm(r: &Record, p: &str) -> Result<Normalizer> {
    let c = r.u64s(&format!("{p}.count"))?;
    let [count, frozen] = c else {
        return Err(fmt_err("normalizer count entry must have two values"));
    };
    let mean = r.f64s(&format!("{p}.mean"))?.to_vec();
    let m2 = r.f64s(&format!("{p}.m2"))?.to_vec();
    if mean.len() != m2.len() {
        return Err(fmt_err("normalizer statistics differ in length"));
    }
    Ok(Normalizer {
        count: *count,
        mean,
        m2,
        frozen: *frozen != 0,
    })
}

fn put_rng(r: &mut Record, p: &str, rng: &ChaCha8Rng) {
    r.put_bytes(format!("{p}.seed"), &rng.get_seed());
    let pos = rng.get_word_pos();
    r.put_u64s(format!("{p}.pos"), &[rng.get_stream(), pos as u64, (pos >> 64) as u64]);
}

fn get_rng(r: &Record, p: &str) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let seed: [u8; 32] = r
        .bytes(&format!("{p}.seed"))?
        .try_into()
        .map_err(|_| fmt_err("rng seed must be 32 bytes"))?;
    let pos = r.u64s(&format!("{p}.pos"))?;
    let [stream, lo, hi] = pos else {
        return Err(fmt_err("rng position must have three values"));
    };
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(*stream);
    rng.set_word_pos(u128::from(*lo) | (u128::from(*hi) << 64));
    Ok(rng)
}

fn put_cpg(r: &mut Record, p: &str, s: &CpgState) {
    r.put_u64s(format!("{p}.n"), &[s.n() as u64]);
    r.put_f64s(format!("{p}.flat"), &s.to_flat());
}

fn get_cpg(r: &Record, p: &str) -> Result<CpgState> {
    let n = r.u64(&format!("{p}.n"))? as usize;
    CpgState::from_flat(n, r.f64s(&format!("{p}.flat"))?).map_err(|e| fmt_err(e.to_string()))
}

const BODY_SCALARS: usize = 12;

fn put_body(r: &mut Record, p: &str, s: &CrawlerState) {
    let mut f = vec![
        s.x,
        s.y,
        s.heading,
        s.velocity[0],
        s.velocity[1],
        s.yaw_rate,
        s.z,
        s.stride_gain,
        s.goal[0],
        s.goal[1],
        s.distance,
        s.path_heading,
    ];
    f.extend(&s.joints);
    f.extend(&s.joint_rates);
    r.put_f64s(format!("{p}.f"), &f);
    r.put_u64s(format!("{p}.step"), &[s.step]);
    r.put_bytes(format!("{p}.contact"), &s.contact.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
    r.put_bytes(format!("{p}.frozen"), &s.frozen.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
}

fn get_body(r: &Record, p: &str, joints: usize) -> Result<CrawlerState> {
    let f = r.f64s(&format!("{p}.f"))?;
    if f.len() != BODY_SCALARS + 2 * joints {
        return Err(fmt_err("body state has the wrong length"));
    }
    let bools = |name: &str| -> Result<Vec<bool>> { Ok(r.bytes(&format!("{p}.{name}"))?.iter().map(|&b| b != 0).collect()) };
    let frozen = bools("frozen")?;
    if frozen.len() != joints {
        return Err(fmt_err("fault mask has the wrong length"));
    }
    Ok(CrawlerState {
        x: f[0],
        y: f[1],
        heading: f[2],
        velocity: [f[3], f[4]],
        yaw_rate: f[5],
        z: f[6],
        stride_gain: f[7],
        goal: [f[8], f[9]],
        distance: f[10],
        path_heading: f[11],
        joints: f[BODY_SCALARS..BODY_SCALARS + joints].to_vec(),
        joint_rates: f[BODY_SCALARS + joints..].to_vec(),
        step: r.u64(&format!("{p}.step"))?,
        contact: bools("contact")?,
        frozen,
    })
}

fn put_agent(r: &mut Record, p: &str, a: &Agent) {
    put_actor(r, &format!("{p}.actor"), &a.actor);
    put_actor(r, &format!("{p}.actor_target"), &a.actor_target);
    put_adam(r, &format!("{p}.actor_opt"), &a.actor_opt);
    r.put_u64s(format!("{p}.critics"), &[a.critics.len() as u64]);
    for k in 0..a.critics.len() {
        put_mlp(r, &format!("{p}.critic{k}"), &a.critics[k].net);
        put_mlp(r, &format!("{p}.critic_target{k}"), &a.critic_targets[k].net);
        put_adam(r, &format!("{p}.critic_opt{k}"), &a.critic_opts[k]);
    }
    put_norm(r, &format!("{p}.norm"), &a.norm);
    put_cpg(r, &format!("{p}.cpg"), &a.cpg);
    r.put_u64s(format!("{p}.history.len"), &[a.history.len() as u64]);
    r.put_f64s(format!("{p}.history"), &a.history.iter().flatten().copied().collect::<Vec<_>>());
}

fn get_agent(r: &Record, p: &str) -> Result<Agent> {
    let critics = r.u64(&format!("{p}.critics"))?.min(8) as usize;
    let norm = get_norm(r, &format!("{p}.norm"))?;
    let hist_len = r.u64(&format!("{p}.history.len"))? as usize;
    let flat = r.f64s(&format!("{p}.history"))?;
    let dim = norm.dim();
    if flat.len() != hist_len.saturating_mul(dim) {
        return Err(fmt_err("observation history has the wrong length"));
    }
    let history: VecDeque<Vec<f64>> = if dim == 0 {
        VecDeque::new()
    } else {
        flat.chunks(dim).map(<[f64]>::to_vec).collect()
    };
    Ok(Agent {
        actor: get_actor(r, &format!("{p}.actor"))?,
        actor_target: get_actor(r, &format!("{p}.actor_target"))?,
        actor_opt: get_adam(r, &format!("{p}.actor_opt"))?,
        critics: (0..critics)
            .map(|k| get_mlp(r, &format!("{p}.critic{k}")).map(|net| Critic { net }))
            .collect::<Result<_>>()?,
        critic_targets: (0..critics)
            .map(|k| get_mlp(r, &format!("{p}.critic_target{k}")).map(|net| Critic { net }))
            .collect::<Result<_>>()?,
        critic_opts: (0..critics)
            .map(|k| get_adam(r, &format!("{p}.critic_opt{k}")))
            .collect::<Result<_>>()?,
        norm,
        cpg: get_cpg(r, &format!("{p}.cpg"))?,
        history,
    })
}

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Full training state, resumable.
    Trainer,
    /// Networks, optimizers and normalizers only.
    Agents,
}

fn header(r: &mut Record, kind: Kind, run: &RunConfig, agents: usize) {
    r.put_bytes(
        "kind",
        match kind {
            Kind::Trainer => b"trainer".as_slice(),
            Kind::Agents => b"agents".as_slice(),
        },
    );
    r.put_bytes("config", run.to_toml().as_bytes());
    r.put_u64s("agents", &[agents as u64]);
}

pub fn kind(r: &Record) -> Result<Kind> {
    match r.bytes("kind")? {
        b"trainer" => Ok(Kind::Trainer),
        b"agents" => Ok(Kind::Agents),
        _ => Err(fmt_err("unknown checkpoint kind")),
    }
}

pub fn config(r: &Record) -> Result<RunConfig> {
    RunConfig::from_toml(r.str("config")?)
}

/// Networks, optimizers and normalizers of every agent, plus the critics'
/// state normalizer.
pub fn agents_record(run: &RunConfig, agents: &[Agent], state_norm: &Normalizer) -> Record {
    let mut r = Record::new();
    header(&mut r, Kind::Agents, run, agents.len());
    put_norm(&mut r, "state_norm", state_norm);
    for (m, a) in agents.iter().enumerate() {
        put_agent(&mut r, &format!("agent{m}"), a);
    }
    r
}

/// Trained agents and the state normalizer, from either checkpoint kind.
pub struct Snapshot {
    pub run: RunConfig,
    pub agents: Vec<Agent>,
    pub state_norm: Normalizer,
}

pub fn load_agents(r: &Record) -> Result<Snapshot> {
    let run = config(r)?;
    let n = r.u64("agents")?.min(64) as usize;
    let agents = (0..n)
        .map(|m| get_agent(r, &format!("agent{m}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot {
        run,
        agents,
        state_norm: get_norm(r, "state_norm")?,
    })
}

/// Deployable policy from either checkpoint kind.
pub fn load_policy(r: &Record) -> Result<(RunConfig, Policy)> {
    let Snapshot { run, agents, .. } = load_agents(r)?;
    let policy = Policy {
        kind: run.train.actor,
        actors: agents.iter().map(|a| a.actor.clone()).collect(),
        norms: agents.iter().map(|a| a.norm.clone()).collect(),
        tau_c: run.train.tau_c,
        tau_o: run.train.tau_o,
        modulation: run.modulation,
    };
    Ok((run, policy))
}

pub fn trainer_record(tr: &Trainer) -> Record {
    let mut r = agents_record(&tr.run, &tr.agents, &tr.state_norm);
    header(&mut r, Kind::Trainer, &tr.run, tr.agents.len());
    put_rng(&mut r, "rng", &tr.rng);
    put_rng(&mut r, "env.rng", &tr.system.env.rng);
    put_body(&mut r, "env.state", &tr.system.env.state);
    let c = tr.counters;
    r.put_u64s("counters", &[c.env_steps, c.episodes, c.updates]);
    r.put_u64s("episode.flags", &[u64::from(tr.episode.active), tr.episode.len]);
    r.put_f64s("episode.ret", &[tr.episode.ret]);
    put_replay(&mut r, &tr.replay);

    let m = &tr.metrics;
    r.put_u64s(
        "metrics.u",
        &m.iter()
            .flat_map(|x| {
                [
                    x.update,
                    x.env_steps,
                    x.episodes,
                    u64::from(x.actor_objective.is_some()),
                    u64::from(x.last_return.is_some()),
                ]
            })
            .collect::<Vec<_>>(),
    );
    r.put_f64s(
        "metrics.f",
        &m.iter()
            .flat_map(|x| {
                [
                    x.critic_loss,
                    x.critic2_loss,
                    x.actor_objective.unwrap_or(0.0),
                    x.last_return.unwrap_or(0.0),
                ]
            })
            .collect::<Vec<_>>(),
    );
    let e = &tr.returns;
    r.put_u64s("returns.u", &e.iter().flat_map(|x| [x.episode, x.env_steps, x.length]).collect::<Vec<_>>());
    r.put_f64s("returns.f", &e.iter().flat_map(|x| [x.ret, x.distance]).collect::<Vec<_>>());
    r
}

fn put_replay(r: &mut Record, rb: &ReplayBuffer) {
    r.put_u64s("replay.meta", &[rb.capacity as u64, rb.first, rb.items.len() as u64]);
    r.put_u64s(
        "replay.segments",
        &rb.segments.iter().flat_map(|s| [s.start, u64::from(s.len)]).collect::<Vec<_>>(),
    );
    let mut f = Vec::new();
    let mut u = Vec::new();
    for t in &rb.items {
        u.extend([t.episode, u64::from(t.offset), u64::from(t.done)]);
        f.push(t.reward);
        f.extend(&t.state);
        f.extend(&t.next_state);
        for m in 0..t.local.len() {
            f.extend(&t.local[m]);
            f.extend(&t.next_local[m]);
            f.extend(&t.actions[m]);
            f.extend(&t.params[m]);
        }
        for h in t.h.iter().chain(&t.h_next) {
            f.extend(h.to_flat());
        }
        f.extend(&t.goal);
    }
    r.put_u64s("replay.u", &u);
    r.put_f64s("replay.f", &f);
}

struct Widths {
    state: usize,
    local: Vec<usize>,
    joints: Vec<usize>,
    params: Vec<usize>,
    cpg: bool,
}

fn get_replay(r: &Record, w: &Widths) -> Result<ReplayBuffer> {
    let meta = r.u64s("replay.meta")?;
    let [capacity, first, count] = meta else {
        return Err(fmt_err("replay meta must have three values"));
    };
    let count = *count as usize;
    let u = r.u64s("replay.u")?;
    let f = r.f64s("replay.f")?;
    if u.len() != 3 * count {
        return Err(fmt_err("replay index data has the wrong length"));
    }
    let mut rb = ReplayBuffer::new((*capacity as usize).max(1)).map_err(|e| fmt_err(e.to_string()))?;
    rb.first = *first;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let s = f.get(at..at + n).ok_or_else(|| fmt_err("replay data runs short"))?;
        at += n;
        Ok(s.to_vec())
    };
    for i in 0..count {
        let reward = take(1)?[0];
        let state = take(w.state)?;
        let next_state = take(w.state)?;
        let agents = w.local.len();
        let (mut local, mut next_local, mut actions, mut params) = (vec![], vec![], vec![], vec![]);
        for m in 0..agents {
            local.push(take(w.local[m])?);
            next_local.push(take(w.local[m])?);
            actions.push(take(w.joints[m])?);
            params.push(take(w.params[m])?);
        }
        let (mut h, mut h_next) = (vec![], vec![]);
        if w.cpg {
            for m in 0..agents {
                let n = w.joints[m];
                h.push(CpgState::from_flat(n, &take(8 * n + 2)?).map_err(|e| fmt_err(e.to_string()))?);
            }
            for m in 0..agents {
                let n = w.joints[m];
                h_next.push(CpgState::from_flat(n, &take(8 * n + 2)?).map_err(|e| fmt_err(e.to_string()))?);
            }
        }
        rb.items.push_back(Transition {
            state,
            next_state,
            local,
            next_local,
            actions,
            reward,
            done: u[3 * i + 2] != 0,
            h,
            h_next,
            params,
            goal: Vec::new(),
            episode: u[3 * i],
            offset: u32::try_from(u[3 * i + 1]).map_err(|_| fmt_err("segment offset overflow"))?,
        });
    }
    if at != f.len() {
        return Err(fmt_err("replay data has trailing values"));
    }
    let segs = r.u64s("replay.segments")?;
    if segs.len() % 2 != 0 {
        return Err(fmt_err("replay segments must be pairs"));
    }
    let end = rb.next_index();
    for p in segs.chunks(2) {
        let len = u32::try_from(p[1]).map_err(|_| fmt_err("segment length overflow"))?;
        if p[0] < rb.first || p[0].saturating_add(p[1]) > end || len == 0 {
            return Err(fmt_err("segment outside the stored transitions"));
        }
        rb.segments.push_back(Segment { start: p[0], len });
    }
    Ok(rb)
}

/// Rebuilds a trainer that continues exactly where the saved one stopped.
pub fn load_trainer(r: &Record) -> Result<Trainer> {
    if kind(r)? != Kind::Trainer {
        return Err(fmt_err("checkpoint holds no training state"));
    }
    let Snapshot { run, agents, state_norm } = load_agents(r)?;
    let mut system: System = build_system(&run, run.partition)?;
    if agents.len() != system.agents() {
        return Err(fmt_err("agent count does not match the configured partition"));
    }
    let joints = run.env.joints();
    system.env.rng = get_rng(r, "env.rng")?;
    system.env.state = get_body(r, "env.state", joints)?;
    let rng = get_rng(r, "rng")?;
    let mut tr = Trainer::assemble(run, system, agents, rng).map_err(|e| fmt_err(e.to_string()))?;
    tr.state_norm = state_norm;
    let c = r.u64s("counters")?;
    let [env_steps, episodes, updates] = c else {
        return Err(fmt_err("counters must have three values"));
    };
    tr.counters = Counters {
        env_steps: *env_steps,
        episodes: *episodes,
        updates: *updates,
    };
    let flags = r.u64s("episode.flags")?;
    let [active, len] = flags else {
        return Err(fmt_err("episode flags must have two values"));
    };
    let ret = r.f64s("episode.ret")?;
    let [ret] = ret else {
        return Err(fmt_err("episode return must be a scalar"));
    };
    tr.episode = EpisodeProgress {
        active: *active != 0,
        ret: *ret,
        len: *len,
    };
    let cpg = tr.run.train.actor == ActorKind::Cpg;
    let widths = Widths {
        state: tr.system.env.cfg.obs_dim(),
        local: tr.system.specs.iter().map(|s| s.obs_dim).collect(),
        joints: tr.system.specs.iter().map(|s| s.joints.len()).collect(),
        params: tr
            .system
            .specs
            .iter()
            .map(|s| if cpg { crate::cpg::HeadVectors::sizes(s.joints.len()).iter().sum() } else { 0 })
            .collect(),
        cpg,
    };
    tr.replay = get_replay(r, &widths)?;

    let mu = r.u64s("metrics.u")?;
    let mf = r.f64s("metrics.f")?;
    if mu.len() % 5 != 0 || mf.len() != mu.len() / 5 * 4 {
        return Err(fmt_err("metrics have the wrong length"));
    }
    tr.metrics = mu
        .chunks(5)
        .zip(mf.chunks(4))
        .map(|(u, f)| MetricsRow {
            update: u[0],
            env_steps: u[1],
            episodes: u[2],
            critic_loss: f[0],
            critic2_loss: f[1],
            actor_objective: (u[3] != 0).then_some(f[2]),
            last_return: (u[4] != 0).then_some(f[3]),
        })
        .collect();
    let eu = r.u64s("returns.u")?;
    let ef = r.f64s("returns.f")?;
    if eu.len() % 3 != 0 || ef.len() != eu.len() / 3 * 2 {
        return Err(fmt_err("episode returns have the wrong length"));
    }
    tr.returns = eu
        .chunks(3)
        .zip(ef.chunks(2))
        .map(|(u, f)| EpisodeRow {
            episode: u[0],
            env_steps: u[1],
            length: u[2],
            ret: f[0],
            distance: f[1],
        })
        .collect();
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip_and_rejections() {
        let mut r = Record::new();
        r.put_f64s("a", &[1.5, f64::NAN, -0.0]);
        r.put_u64s("b", &[7]);
        r.put_bytes("c", b"xyz");
        let bytes = r.encode();
        let back = Record::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.u64("b").unwrap(), 7);
        assert!(Record::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Record::decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Record::decode(&bad).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(matches!(Record::decode(&ver), Err(Error::Format(_))));
    }
}
