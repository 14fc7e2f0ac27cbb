//! `deepcpg` command-line runner.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepcpg::checkpoint::{self, Record};
use deepcpg::config::{Algorithm, RunConfig};
use deepcpg::env::Task;
use deepcpg::gradcheck;
use deepcpg::marl::{Partition, Routine};
use deepcpg::nn::ActorKind;
use deepcpg::perturb::{perturbation_trace, PerturbConfig, PerturbMode};
use deepcpg::td3::{build_system, deploy, DeployReport, EpisodeRow, MetricsRow, Policy, TrajectoryRow, Trainer};
use deepcpg::transfer;
use deepcpg::Error;
use plot::Series;

#[derive(Parser)]
#[command(name = "deepcpg", version, about = "Train, deploy and inspect CPG-based locomotion policies")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "DEEPCPG_OUT", default_value = "deepcpg-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration.
    InitConfig,
    /// Train a single-agent policy.
    Train(TrainArgs),
    /// Train a two-module body under one of the initialisation routines.
    TrainModular(ModularArgs),
    /// Run a trained policy and log its trajectories.
    Deploy(DeployArgs),
    /// Check analytic CPG gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Deploy a checkpoint with one modulation parameter varied.
    Ablate(AblateArgs),
    /// Compare the mechanical work of two policies.
    Energy(EnergyArgs),
    /// Perturb a single oscillator's state or parameters.
    Perturb(PerturbArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ActorArg {
    Cpg,
    Ff,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Intrinsic,
    Xaxis,
    Goto,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Environment steps to train (defaults to `train.total_steps`).
    #[arg(long)]
    steps: Option<u64>,
    /// Evaluate the deterministic policy every this many steps (0 = never).
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    #[arg(long, default_value_t = 3)]
    eval_episodes: usize,
    /// Stop once an evaluation's mean return reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    actor: Option<ActorArg>,
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    /// One agent per module instead of a monolithic policy.
    #[arg(long)]
    modular: bool,
    /// Continue a saved run.
    #[arg(long, conflicts_with = "finetune_from")]
    resume: Option<PathBuf>,
    /// Start from the weights of a trained checkpoint on the same body.
    #[arg(long)]
    finetune_from: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct ModularArgs {
    /// 1: fresh monolithic policy, 2: copy the source into module 1 only,
    /// 3: copy the source into every module.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    routine: u8,
    /// Single-module checkpoint copied by routines 2 and 3.
    #[arg(long)]
    source_checkpoint: Option<PathBuf>,
    /// Number of connected modules.
    #[arg(long, default_value_t = 2)]
    modules: usize,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct DeployArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only check the direct-path recurrences on decoupled networks.
    #[arg(long)]
    direct_only: bool,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4, 8])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![5usize, 20])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = gradcheck::REL_TOLERANCE)]
    tolerance: f64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AblateParam {
    #[value(name = "tau_c")]
    TauC,
    #[value(name = "alpha_w")]
    AlphaW,
    #[value(name = "alpha_phi")]
    AlphaPhi,
    #[value(name = "alpha_A")]
    AlphaA,
    #[value(name = "alpha_omega")]
    AlphaOmega,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    param: AblateParam,
    /// Grid values; the training value is always added.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    checkpoint_a: PathBuf,
    #[arg(long)]
    checkpoint_b: PathBuf,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long, value_enum, default_value = "parameter")]
    mode: ModeArg,
    /// Perturbations happen at period/2, 3·period/2, …
    #[arg(long, default_value_t = 1000)]
    period: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    State,
    Parameter,
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Lib(Error::Io(std::io::Error::other(e)))
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Lib(Error::Config(_) | Error::Structural(_) | Error::Index(_)) => 2,
        Failure::Lib(Error::Numeric { .. }) => 3,
        Failure::Lib(Error::Io(_) | Error::Format(_)) => 4,
        Failure::Check(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    let c = &cli.common;
    fs::create_dir_all(&c.out)?;
    match &cli.command {
        Command::InitConfig => {
            let path = c.out.join("config.toml");
            fs::write(&path, resolve_config(c)?.to_toml())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train(a) => cmd_train(c, a),
        Command::TrainModular(a) => cmd_train_modular(c, a),
        Command::Deploy(a) => cmd_deploy(c, a),
        Command::Gradcheck(a) => cmd_gradcheck(c, a),
        Command::Ablate(a) => cmd_ablate(c, a),
        Command::Energy(a) => cmd_energy(c, a),
        Command::Perturb(a) => cmd_perturb(c, a),
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut run = match &c.config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        run.seed = s;
    }
    Ok(run)
}

fn load(path: &Path) -> Result<Record, Failure> {
    Ok(Record::load(path)?)
}

fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> CmdResult
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

/// Mean and population standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Deterministic evaluation on a fresh body, independent of the trainer's
/// random streams.
fn evaluate(tr: &Trainer, episodes: usize) -> Result<DeployReport, Failure> {
    let mut sys = build_system(&tr.run, tr.run.partition)?;
    Ok(deploy(&tr.policy(), &mut sys, episodes, tr.run.seed.wrapping_add(1_000_003), false)?)
}

struct EvalRow {
    env_steps: u64,
    mean: f64,
    std: f64,
    distance: f64,
}

/// Trains to the step target with periodic checkpoints and evaluations,
/// then writes metrics, episode returns, evaluations, the final checkpoint
/// and a return plot.
fn drive(tr: &mut Trainer, ev: &EvalArgs, out: &Path, label: &str) -> CmdResult {
    let target = ev.steps.unwrap_or(tr.run.train.total_steps);
    let every = tr.run.checkpoint_every;
    let mut evals = Vec::new();
    let next_multiple = |s: u64, k: u64| if k == 0 { u64::MAX } else { (s / k + 1) * k };
    while tr.counters.env_steps < target {
        let s = tr.counters.env_steps;
        let bound = target.min(next_multiple(s, every)).min(next_multiple(s, ev.eval_every));
        tr.train_until(bound)?;
        let s = tr.counters.env_steps;
        if every > 0 && s >= bound && bound % every == 0 && s < target {
            checkpoint::trainer_record(tr).save(&out.join(format!("checkpoint-{bound}.ckpt")))?;
        }
        if ev.eval_every > 0 && (bound % ev.eval_every == 0 || s >= target) {
            let r = evaluate(tr, ev.eval_episodes)?;
            let (mean, std) = mean_std(&r.returns);
            let distance = mean_std(&r.distances).0;
            println!("{label} steps {s} eval return {mean:.2} ± {std:.2} distance {distance:.3}");
            evals.push(EvalRow {
                env_steps: s,
                mean,
                std,
                distance,
            });
            if ev.stop_at.is_some_and(|bar| mean >= bar) {
                break;
            }
        }
    }
    write_csv(
        &out.join("metrics.csv"),
        &strings(&MetricsRow::HEADER),
        tr.metrics.iter().map(MetricsRow::record),
    )?;
    write_csv(
        &out.join("episodes.csv"),
        &strings(&EpisodeRow::HEADER),
        tr.returns.iter().map(EpisodeRow::record),
    )?;
    if !evals.is_empty() {
        write_csv(
            &out.join("eval.csv"),
            &strings(&["run", "env_steps", "mean_return", "std_return", "mean_distance"]),
            evals.iter().map(|e| {
                vec![
                    label.to_string(),
                    e.env_steps.to_string(),
                    e.mean.to_string(),
                    e.std.to_string(),
                    e.distance.to_string(),
                ]
            }),
        )?;
    }
    checkpoint::trainer_record(tr).save(&out.join("checkpoint.ckpt"))?;
    let mut series = vec![Series {
        label: "episode return",
        points: tr.returns.iter().map(|r| (r.env_steps as f64, r.ret)).collect(),
    }];
    if !evals.is_empty() {
        series.push(Series {
            label: "evaluation",
            points: evals.iter().map(|e| (e.env_steps as f64, e.mean)).collect(),
        });
    }
    plot::write(&out.join("returns.svg"), label, "environment steps", "return", &series)?;
    println!(
        "{label} finished: {} steps, {} episodes, {} updates",
        tr.counters.env_steps, tr.counters.episodes, tr.counters.updates
    );
    Ok(())
}

fn cmd_train(c: &Common, a: &TrainArgs) -> CmdResult {
    let mut tr = if let Some(p) = &a.resume {
        checkpoint::load_trainer(&load(p)?)?
    } else {
        let mut run = resolve_config(c)?;
        match a.actor {
            Some(ActorArg::Cpg) => run.train.actor = ActorKind::Cpg,
            Some(ActorArg::Ff) => run.train.actor = ActorKind::FeedForward,
            None => {}
        }
        match a.reward {
            Some(RewardArg::Intrinsic) => run.env.task = Task::Intrinsic,
            Some(RewardArg::Xaxis) => run.env.task = Task::XAxis,
            Some(RewardArg::Goto) => run.env.task = Task::Goto,
            None => {}
        }
        if a.modular {
            run.partition = Partition::Modular;
        }
        run.validate()?;
        match &a.finetune_from {
            Some(p) => {
                let src = checkpoint::load_agents(&load(p)?)?;
                // The transferred policy acts from the start; the babbling
                // budget goes to fitting the critics to the new reward.
                run.train.critic_warmup = run.train.critic_warmup.max(run.train.babbling_steps);
                run.train.babbling_steps = 0;
                transfer::finetune_trainer(&src.run, &src.agents, &src.state_norm, run)?
            }
            None => Trainer::new(run)?,
        }
    };
    fs::write(c.out.join("config.toml"), tr.run.to_toml())?;
    drive(&mut tr, &a.eval, &c.out, "train")
}

fn cmd_train_modular(c: &Common, a: &ModularArgs) -> CmdResult {
    let mut run = resolve_config(c)?;
    run.env.modules = a.modules;
    // One actor and one centralised critic per agent.
    run.train.algorithm = Algorithm::Ddpg;
    run.validate()?;
    let routine = Routine::from_number(a.routine).expect("range checked by the parser");
    let source = match &a.source_checkpoint {
        Some(p) => Some(checkpoint::load_agents(&load(p)?)?),
        None => None,
    };
    let mut tr = transfer::routine_trainer(
        routine,
        source.as_ref().map(|s| (&s.run, &s.agents[..], &s.state_norm)),
        run,
    )?;
    fs::write(c.out.join("config.toml"), tr.run.to_toml())?;
    drive(&mut tr, &a.eval, &c.out, &format!("routine-{}", a.routine))
}

fn load_policy(path: &Path) -> Result<(RunConfig, Policy), Failure> {
    Ok(checkpoint::load_policy(&load(path)?)?)
}

fn cmd_deploy(c: &Common, a: &DeployArgs) -> CmdResult {
    let (run, policy) = load_policy(&a.checkpoint)?;
    let seed = c.seed.unwrap_or(run.seed);
    let mut sys = build_system(&run, run.partition)?;
    let r = deploy(&policy, &mut sys, a.episodes, seed, true)?;
    write_csv(
        &c.out.join("deploy.csv"),
        &strings(&["episode", "return", "length", "distance", "work"]),
        (0..r.returns.len()).map(|e| {
            vec![
                e.to_string(),
                r.returns[e].to_string(),
                r.lengths[e].to_string(),
                r.distances[e].to_string(),
                r.work[e].to_string(),
            ]
        }),
    )?;
    write_csv(
        &c.out.join("trajectory.csv"),
        &TrajectoryRow::header(run.env.joints()),
        r.rows.iter().map(TrajectoryRow::record),
    )?;
    let labels: Vec<String> = (0..a.episodes).map(|e| format!("episode {e}")).collect();
    let series: Vec<Series> = labels
        .iter()
        .enumerate()
        .map(|(e, label)| Series {
            label,
            points: r.rows.iter().filter(|x| x.episode == e as u64).map(|x| (x.x, x.y)).collect(),
        })
        .collect();
    plot::write(&c.out.join("trajectory.svg"), "body path", "x", "y", &series)?;
    let (m, s) = mean_std(&r.returns);
    println!("deploy: {} episodes, return {m:.2} ± {s:.2}, actor calls {}", a.episodes, r.actor_calls);
    Ok(())
}

fn cmd_gradcheck(c: &Common, a: &GradcheckArgs) -> CmdResult {
    let run = resolve_config(c)?;
    let modulation = run.modulation;
    let header = strings(&["check", "n", "steps", "seed", "entries", "failures", "worst_relative", "worst_absolute", "passed"]);
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut failed = 0usize;
    let mut row = |check: &str, n: usize, steps: usize, seed: u64, cmp: &gradcheck::Comparison, ok: bool| {
        if !ok {
            failed += 1;
        }
        rows.push(vec![
            check.into(),
            n.to_string(),
            steps.to_string(),
            seed.to_string(),
            cmp.entries.to_string(),
            cmp.failures.to_string(),
            cmp.worst_relative.to_string(),
            cmp.worst_absolute.to_string(),
            ok.to_string(),
        ]);
    };
    let started = Instant::now();
    let mut worst_rel: f64 = 0.0;
    let mut worst_direct: f64 = 0.0;
    if a.direct_only {
        // Fifty decoupled cases spread over the configured sizes and lengths.
        for k in 0..50u64 {
            let n = a.sizes[k as usize % a.sizes.len()];
            let steps = a.lengths[(k as usize / a.sizes.len()) % a.lengths.len()];
            let diff = gradcheck::check_direct_paths(n, steps, k, modulation)?;
            worst_direct = worst_direct.max(diff);
            let cmp = gradcheck::Comparison {
                entries: 1,
                failures: usize::from(diff >= 1e-10),
                worst_relative: 0.0,
                worst_absolute: diff,
            };
            row("direct-path", n, steps, k, &cmp, diff < 1e-10);
        }
    } else {
        for &n in &a.sizes {
            for &steps in &a.lengths {
                for seed in 0..a.seeds {
                    let r = gradcheck::check_case_with_tolerance(n, steps, seed, modulation, a.tolerance)?;
                    worst_rel = worst_rel.max(r.comparison.worst_relative);
                    row("cpg", n, steps, seed, &r.comparison, r.comparison.passed());
                }
            }
        }
        for seed in 0..3 {
            let cmp = gradcheck::check_actor_through_cpg(2, 5, seed, modulation)?;
            row("actor-through-cpg", 2, 5, seed, &cmp, cmp.passed());
        }
        let mut zero = gradcheck::random_problem(4, 5, 0, modulation);
        zero.coefficients.iter_mut().flatten().for_each(|c| *c = 0.0);
        let g = gradcheck::analytic(&zero)?.to_flat();
        let cmp = gradcheck::compare(&g, &vec![0.0; g.len()], 0.0, 0.0);
        row("zero-loss", 4, 5, 0, &cmp, g.iter().all(|x| *x == 0.0));
    }
    let elapsed = started.elapsed().as_secs_f64();
    write_csv(&c.out.join("gradcheck.csv"), &header, rows)?;
    if a.direct_only {
        println!("gradcheck direct paths: worst |difference| {worst_direct:.3e}, {failed} failing cases, {elapsed:.2}s");
    } else {
        println!("gradcheck: worst relative error {worst_rel:.3e}, {failed} failing cases, {elapsed:.2}s");
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient cases out of tolerance")));
    }
    Ok(())
}

fn default_grid(param: AblateParam, run: &RunConfig) -> (f64, Vec<f64>) {
    let m = &run.modulation;
    match param {
        AblateParam::TauC => (run.train.tau_c as f64, vec![1.0, 5.0, 10.0, 20.0, 50.0]),
        AblateParam::AlphaW => (m.alpha_w, [0.0, 0.25, 0.5, 1.0, 2.0].iter().map(|k| k * m.alpha_w).collect()),
        AblateParam::AlphaPhi => (
            m.alpha_phi,
            vec![0.0, std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2, std::f64::consts::PI],
        ),
        AblateParam::AlphaA => (m.alpha_amp, vec![0.2, 0.4, 0.6, 0.8, 1.0]),
        AblateParam::AlphaOmega => (m.alpha_omega, vec![5.0, 10.0, 20.0, 40.0]),
    }
}

fn cmd_ablate(c: &Common, a: &AblateArgs) -> CmdResult {
    let (run, policy) = load_policy(&a.checkpoint)?;
    let seed = c.seed.unwrap_or(run.seed);
    let (trained, mut grid) = default_grid(a.param, &run);
    if let Some(v) = &a.values {
        grid = v.clone();
    }
    grid.push(trained);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let name = AblateParam::value_variants()
        .iter()
        .find(|p| **p == a.param)
        .and_then(|p| p.to_possible_value())
        .map(|p| p.get_name().to_string())
        .unwrap_or_default();
    let mut rows = Vec::new();
    for &v in &grid {
        let mut p = policy.clone();
        match a.param {
            AblateParam::TauC => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Failure::Lib(Error::Config(format!("tau_c must be a positive integer, got {v}"))));
                }
                p.tau_c = v as usize;
            }
            AblateParam::AlphaW => p.modulation.alpha_w = v,
            AblateParam::AlphaPhi => p.modulation.alpha_phi = v,
            AblateParam::AlphaA => p.modulation.alpha_amp = v,
            AblateParam::AlphaOmega => p.modulation.alpha_omega = v,
        }
        let mut sys = build_system(&run, run.partition)?;
        let r = deploy(&p, &mut sys, a.episodes, seed, false)?;
        let (m, s) = mean_std(&r.returns);
        let d = mean_std(&r.distances).0;
        println!("ablate {name} = {v}: return {m:.2} ± {s:.2}");
        rows.push((v, m, s, d));
    }
    write_csv(
        &c.out.join("ablate.csv"),
        &strings(&["param", "value", "mean_return", "std_return", "mean_distance", "episodes", "trained"]),
        rows.iter().map(|(v, m, s, d)| {
            vec![
                name.clone(),
                v.to_string(),
                m.to_string(),
                s.to_string(),
                d.to_string(),
                a.episodes.to_string(),
                (*v == trained).to_string(),
            ]
        }),
    )?;
    plot::write(
        &c.out.join("ablate.svg"),
        &format!("{name} ablation"),
        &name,
        "mean return",
        &[Series {
            label: "mean return",
            points: rows.iter().map(|(v, m, _, _)| (*v, *m)).collect(),
        }],
    )?;
    Ok(())
}

fn cmd_energy(c: &Common, a: &EnergyArgs) -> CmdResult {
    let mut table = Vec::new();
    let mut hips = Vec::new();
    for (label, path) in [("a", &a.checkpoint_a), ("b", &a.checkpoint_b)] {
        let (run, policy) = load_policy(path)?;
        let seed = c.seed.unwrap_or(0);
        let mut sys = build_system(&run, run.partition)?;
        let started = Instant::now();
        let r = deploy(&policy, &mut sys, a.episodes, seed, true)?;
        let wall = started.elapsed().as_secs_f64();
        let steps: u64 = r.lengths.iter().sum();
        let work: f64 = r.work.iter().sum();
        let distance: f64 = r.distances.iter().sum();
        let task_time = mean_std(&r.lengths.iter().map(|l| *l as f64 * run.env.dt).collect::<Vec<_>>()).0;
        let kind = match policy.kind {
            ActorKind::Cpg => "cpg",
            ActorKind::FeedForward => "feed-forward",
        };
        println!("energy {label} ({kind}): work {work:.3} J, distance {distance:.3}, {} steps", steps);
        table.push(vec![
            label.to_string(),
            path.display().to_string(),
            kind.to_string(),
            work.to_string(),
            (1e3 * wall / steps.max(1) as f64).to_string(),
            task_time.to_string(),
            distance.to_string(),
            mean_std(&r.returns).0.to_string(),
            a.episodes.to_string(),
        ]);
        let joints = run.env.joints();
        write_csv(
            &c.out.join(format!("trajectory_{label}.csv")),
            &TrajectoryRow::header(joints),
            r.rows.iter().map(TrajectoryRow::record),
        )?;
        hips.push((label, r.rows.into_iter().filter(|x| x.episode == 0).collect::<Vec<_>>()));
    }
    write_csv(
        &c.out.join("energy.csv"),
        &strings(&[
            "policy",
            "checkpoint",
            "actor",
            "work_j",
            "t_ms_per_iter",
            "task_time_s",
            "distance",
            "mean_return",
            "episodes",
        ]),
        table,
    )?;
    let labels: Vec<String> = hips.iter().map(|(l, _)| format!("hip 0 ({l})")).collect();
    let series: Vec<Series> = hips
        .iter()
        .zip(&labels)
        .map(|((_, rows), label)| Series {
            label,
            points: rows.iter().map(|x| (x.step as f64, x.joints[0])).collect(),
        })
        .collect();
    plot::write(&c.out.join("hips.svg"), "hip joint trajectories", "step", "angle", &series)?;
    Ok(())
}

fn cmd_perturb(c: &Common, a: &PerturbArgs) -> CmdResult {
    let run = resolve_config(c)?;
    let cfg = PerturbConfig {
        mode: match a.mode {
            ModeArg::State => PerturbMode::State,
            ModeArg::Parameter => PerturbMode::Parameter,
        },
        period: a.period,
        steps: a.steps,
        seed: run.seed,
        modulation: run.modulation,
        ..PerturbConfig::default()
    };
    let rows = perturbation_trace(&cfg)?;
    write_csv(
        &c.out.join("perturb.csv"),
        &strings(&["step", "output", "jump", "bound", "perturbed"]),
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.output.to_string(),
                r.jump.to_string(),
                r.bound.to_string(),
                u8::from(r.perturbed).to_string(),
            ]
        }),
    )?;
    let ratio = |r: &&deepcpg::perturb::TraceRow| if r.bound > 0.0 { r.jump / r.bound } else { f64::INFINITY };
    let worst = rows.iter().map(|r| ratio(&r)).fold(0.0, f64::max);
    let at_perturbation = rows.iter().filter(|r| r.perturbed).map(|r| ratio(&r)).fold(0.0, f64::max);
    println!("perturb: max jump/bound {worst:.3}, at perturbation steps {at_perturbation:.3}");
    plot::write(
        &c.out.join("perturb.svg"),
        "oscillator output",
        "step",
        "y",
        &[Series {
            label: "output",
            points: rows.iter().map(|r| (r.step as f64, r.output)).collect(),
        }],
    )?;
    Ok(())
}
