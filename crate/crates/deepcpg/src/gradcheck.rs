//! Finite-difference oracle for CPG gradients.
//!
//! The oracle only re-runs the forward rollout with perturbed parameters;
//! it never touches the tape or the adjoint code it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpg::{
    coupling_stability_limit, cpg_rollout, CpgParams, CpgState, HeadVectors, Modulation, DEFAULT_DT,
};
use ndarray::{Array2, ArrayView2};

use crate::cpg::unpack_params;
use crate::error::Result;
use crate::grad::{backward, direct_path_gradients, rollout_with_tape};
use crate::nn::{Actor, ActorKind, Init, NetworkConfig, Parameterized};

/// Central-difference step on the bounded parameters.
pub const FD_EPSILON: f64 = 1e-5;
/// Relative tolerance for analytic vs finite-difference agreement.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Absolute differences below this pass regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-7;

/// A random gradient-check problem: parameters, initial state and the
/// coefficients of the linear loss `L = Σ_t Σ_i c[t][i]·y_i(t)`.
#[derive(Debug, Clone)]
pub struct GradcheckProblem {
    pub params: CpgParams,
    pub modulation: Modulation,
    pub state: CpgState,
    pub coefficients: Vec<Vec<f64>>,
}

/// Draws a problem with parameters uniform over their bounds, except for
/// coupling weights, which stay below half the explicit scheme's stability
/// limit. Past that limit the phase map is chaotic and finite differences
/// stop being meaningful.
pub fn random_problem(n: usize, steps: usize, seed: u64, modulation: Modulation) -> GradcheckProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32) ^ ((steps as u64) << 48));
    let mut raw = HeadVectors::zeros(n);
    for v in raw.families_mut() {
        v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
    }
    let mut packed = raw.to_bounded();
    let w_max = 0.5 * coupling_stability_limit(n, &modulation, modulation.alpha_amp, DEFAULT_DT);
    packed
        .coupling
        .iter_mut()
        .for_each(|w| *w = rng.random_range(0.0..=w_max));
    let params = CpgParams::from_packed(n, &packed).expect("sizes match");

    let mut state = CpgState::random_phases(n, DEFAULT_DT, &mut rng);
    for i in 0..n {
        state.phase_rate[i] = rng.random_range(0.0..=modulation.alpha_omega);
        state.amp[i] = rng.random_range(0.0..=modulation.alpha_amp);
        state.amp_rate[i] = rng.random_range(-1.0..=1.0);
        state.amp_accel[i] = rng.random_range(-10.0..=10.0);
        state.offset[i] = rng.random_range(-modulation.alpha_offset..=modulation.alpha_offset);
        state.offset_rate[i] = rng.random_range(-1.0..=1.0);
        state.offset_accel[i] = rng.random_range(-10.0..=10.0);
    }
    let coefficients = (0..steps)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    GradcheckProblem {
        params,
        modulation,
        state,
        coefficients,
    }
}

fn linear_loss(outputs: &[Vec<f64>], coefficients: &[Vec<f64>]) -> f64 {
    outputs
        .iter()
        .zip(coefficients)
        .map(|(y, c)| y.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn loss_at(problem: &GradcheckProblem, packed: &HeadVectors) -> Result<f64> {
    let params = CpgParams::from_packed(problem.params.n, packed)?;
    let r = cpg_rollout(
        &params,
        &problem.modulation,
        &problem.state,
        problem.coefficients.len(),
    )?;
    Ok(linear_loss(&r.outputs, &problem.coefficients))
}

/// Central finite differences of the linear loss with respect to every
/// packed parameter.
pub fn finite_difference(problem: &GradcheckProblem, eps: f64) -> Result<HeadVectors> {
    let base = problem.params.packed();
    let mut grad = HeadVectors::zeros(problem.params.n);
    for fam in 0..5 {
        for k in 0..base.families()[fam].len() {
            let mut plus = base.clone();
            plus.families_mut()[fam][k] += eps;
            let mut minus = base.clone();
            minus.families_mut()[fam][k] -= eps;
            let d = (loss_at(problem, &plus)? - loss_at(problem, &minus)?) / (2.0 * eps);
            grad.families_mut()[fam][k] = d;
        }
    }
    Ok(grad)
}

/// Analytic gradient of the same loss through the tape.
pub fn analytic(problem: &GradcheckProblem) -> Result<HeadVectors> {
    let (_, _, tape) = rollout_with_tape(
        &problem.params,
        &problem.modulation,
        &problem.state,
        problem.coefficients.len(),
    )?;
    Ok(backward(&tape, &problem.coefficients)?.0)
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Comparison of two gradient vectors entry by entry.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Comparison {
    pub entries: usize,
    pub failures: usize,
    /// Worst relative error among entries above the absolute floor.
    pub worst_relative: f64,
    pub worst_absolute: f64,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &Comparison) {
        self.entries += other.entries;
        self.failures += other.failures;
        self.worst_relative = self.worst_relative.max(other.worst_relative);
        self.worst_absolute = self.worst_absolute.max(other.worst_absolute);
    }
}

pub fn compare(analytic: &[f64], oracle: &[f64], rel_tol: f64, abs_floor: f64) -> Comparison {
    let mut c = Comparison::default();
    for (a, b) in analytic.iter().zip(oracle) {
        c.entries += 1;
        let abs = (a - b).abs();
        c.worst_absolute = c.worst_absolute.max(abs);
        if abs <= abs_floor {
            continue;
        }
        let rel = relative_error(*a, *b);
        c.worst_relative = c.worst_relative.max(rel);
        if rel >= rel_tol || !abs.is_finite() {
            c.failures += 1;
        }
    }
    c
}

/// One row of a suite report.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub n: usize,
    pub steps: usize,
    pub seed: u64,
    pub comparison: Comparison,
}

/// Analytic vs finite-difference check for a single random problem.
pub fn check_case(n: usize, steps: usize, seed: u64, modulation: Modulation) -> Result<CaseResult> {
    check_case_with_tolerance(n, steps, seed, modulation, REL_TOLERANCE)
}

pub fn check_case_with_tolerance(n: usize, steps: usize, seed: u64, modulation: Modulation, rel_tol: f64) -> Result<CaseResult> {
    let problem = random_problem(n, steps, seed, modulation);
    let a = analytic(&problem)?.to_flat();
    let f = finite_difference(&problem, FD_EPSILON)?.to_flat();
    Ok(CaseResult {
        n,
        steps,
        seed,
        comparison: compare(&a, &f, rel_tol, ABS_FLOOR),
    })
}

/// Runs [`check_case`] over the cartesian product of sizes, lengths and seeds.
pub fn run_suite(sizes: &[usize], lengths: &[usize], seeds: u64, modulation: Modulation) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for &n in sizes {
        for &steps in lengths {
            for seed in 0..seeds {
                out.push(check_case(n, steps, seed, modulation)?);
            }
        }
    }
    Ok(out)
}

/// Direct-path recurrences against the full adjoint on a decoupled network.
///
/// With all coupling weights zero no cross-oscillator path exists, so for
/// the loss `L = y_i(t)` both routes must give the same numbers.
pub fn check_direct_paths(n: usize, steps: usize, seed: u64, modulation: Modulation) -> Result<f64> {
    let mut problem = random_problem(n, steps, seed, modulation);
    problem.params.coupling.iter_mut().for_each(|w| *w = 0.0);
    let (_, _, tape) = rollout_with_tape(&problem.params, &modulation, &problem.state, steps)?;
    let mut worst: f64 = 0.0;
    for t in 1..=steps {
        for i in 0..n {
            let mut gy = vec![vec![0.0; n]; steps];
            gy[t - 1][i] = 1.0;
            let total = backward(&tape, &gy)?;
            let direct = direct_path_gradients(&tape, i, t)?;
            let state = tape.state_at(t);
            let dy_dphase = state.amp[i] * state.phase[i].cos();
            let dy_damp = state.phase[i].sin();

            let mut diffs = vec![
                total.frequency[i] - dy_dphase * direct.phase_wrt_frequency,
                total.amplitude[i] - dy_damp * direct.amp_wrt_amplitude,
                total.offset[i] - direct.offset_wrt_offset,
            ];
            for (k, (a, b)) in crate::cpg::upper_pairs(n).enumerate() {
                if a != i && b != i {
                    continue;
                }
                let j = if a == i { b } else { a };
                // the packed entry stores ϕ_ab; ϕ_ba = −ϕ_ab
                let sign = if a == i { 1.0 } else { -1.0 };
                diffs.push(total.phase_bias[k] - sign * dy_dphase * direct.phase_wrt_bias[j]);
                diffs.push(total.coupling[k] - dy_dphase * direct.phase_wrt_coupling[j]);
            }
            // other oscillators' own parameters must not reach y_i at all
            for other in (0..n).filter(|&o| o != i) {
                diffs.push(total.frequency[other]);
                diffs.push(total.amplitude[other]);
                diffs.push(total.offset[other]);
            }
            worst = diffs.iter().fold(worst, |w, d| w.max(d.abs()));
        }
    }
    Ok(worst)
}

/// Relative tolerance of the end-to-end actor check, looser than the CPG
/// suite because errors compound through the network layers.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn actor_loss(actor: &Actor, x: &[f64], state: &CpgState, modulation: &Modulation, coefficients: &[Vec<f64>]) -> Result<f64> {
    let params = unpack_params(&actor.heads_for(x)?, actor.joints)?;
    let (_, ys, _) = rollout_with_tape(&params, modulation, state, coefficients.len())?;
    Ok(ys
        .iter()
        .zip(coefficients)
        .map(|(y, c)| y.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// Gradient of a linear loss on a CPG rollout with respect to every
/// parameter of the actor that produced the CPG parameters, analytic
/// (tape backward, affine slope, network backward) against central
/// differences.
pub fn check_actor_through_cpg(joints: usize, steps: usize, seed: u64, modulation: Modulation) -> Result<Comparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xac70_4e2e);
    let net = NetworkConfig {
        actor_hidden: vec![8, 8],
        head_hidden: 6,
        critic_hidden: vec![4],
    };
    let inputs = 6;
    let mut actor = Actor::new(ActorKind::Cpg, inputs, joints, &net, &modulation, &mut rng)?;
    // Larger output weights than the default init so every head matters.
    for h in &mut actor.heads {
        h.init_layer(1, Init::Uniform(0.3), &mut rng);
    }
    let x: Vec<f64> = (0..inputs).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let state = CpgState::random_phases(joints, DEFAULT_DT, &mut rng);
    let coefficients: Vec<Vec<f64>> = (0..steps)
        .map(|_| (0..joints).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();

    let xv = ArrayView2::from_shape((1, inputs), &x[..]).map_err(|e| crate::error::structural(e.to_string()))?;
    let cache = actor.forward_cached(xv)?;
    let params = unpack_params(&actor.heads_for(&x)?, joints)?;
    let (_, _, tape) = rollout_with_tape(&params, &modulation, &state, steps)?;
    let mut g = backward(&tape, &coefficients)?.0;
    g.scale_by_affine_slope();
    let head_grads: Vec<Array2<f64>> = g
        .families()
        .into_iter()
        .map(|f| Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("row"))
        .collect();
    let mut grads = actor.zero_grads();
    actor.backward(&cache, &head_grads, &mut grads)?;
    let analytic: Vec<f64> = grads.concat();

    let mut oracle = Vec::with_capacity(analytic.len());
    let blocks = actor.blocks().len();
    for b in 0..blocks {
        for k in 0..actor.blocks()[b].params.len() {
            let mut plus = actor.clone();
            plus.blocks_mut()[b].params[k] += FD_EPSILON;
            let mut minus = actor.clone();
            minus.blocks_mut()[b].params[k] -= FD_EPSILON;
            let d = actor_loss(&plus, &x, &state, &modulation, &coefficients)?
                - actor_loss(&minus, &x, &state, &modulation, &coefficients)?;
            oracle.push(d / (2.0 * FD_EPSILON));
        }
    }
    Ok(compare(&analytic, &oracle, END_TO_END_TOLERANCE, ABS_FLOOR))
}
