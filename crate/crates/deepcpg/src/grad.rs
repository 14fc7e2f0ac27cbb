//! Reverse-mode differentiation of CPG rollouts.
//!
//! [`rollout_with_tape`] records every step of a rollout. [`backward`] runs
//! the adjoint of the discrete scheme over that tape and returns gradients
//! with respect to the packed, bounded parameters (modulation constants are
//! folded in by the chain rule). [`direct_path_gradients`] evaluates the
//! per-oscillator forward recurrences that ignore cross-oscillator paths;
//! on decoupled networks the two must agree.

use std::ops::{Deref, DerefMut};

use crate::cpg::{step_impl, upper_pairs, CouplingTrig, CpgParams, CpgState, HeadVectors, Modulation};
use crate::error::{structural, Error, Result};

/// One recorded step: the state the step started from, the coupling
/// trigonometry it evaluated and the joint goals it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub prev: CpgState,
    pub trig: CouplingTrig,
    pub output: Vec<f64>,
}

/// Everything the backward pass needs from a forward rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct CpgTape {
    pub params: CpgParams,
    pub modulation: Modulation,
    pub records: Vec<StepRecord>,
    pub final_state: CpgState,
}

impl CpgTape {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn outputs(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.output.clone()).collect()
    }

    /// State after `t` steps (`t = 0` is the initial state).
    pub fn state_at(&self, t: usize) -> &CpgState {
        if t < self.records.len() {
            &self.records[t].prev
        } else {
            &self.final_state
        }
    }

    /// Re-runs the forward pass from the recorded initial state and checks
    /// that every record is reproduced bit for bit.
    pub fn replay_matches(&self) -> bool {
        let Some(first) = self.records.first() else {
            return false;
        };
        match rollout_with_tape(&self.params, &self.modulation, &first.prev, self.records.len()) {
            Ok((_, _, replay)) => replay == *self,
            Err(_) => false,
        }
    }
}

/// [`crate::cpg::cpg_rollout`] that also returns the tape.
pub fn rollout_with_tape(
    params: &CpgParams,
    modulation: &Modulation,
    state: &CpgState,
    steps: usize,
) -> Result<(CpgState, Vec<Vec<f64>>, CpgTape)> {
    if steps == 0 {
        return Err(structural("rollout needs at least one step"));
    }
    let mut records = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    let mut cur = state.clone();
    for _ in 0..steps {
        let mut trig = CouplingTrig {
            sin: Vec::new(),
            cos: Vec::new(),
        };
        let (next, y) = step_impl(params, modulation, &cur, Some(&mut trig))?;
        outputs.push(y.clone());
        records.push(StepRecord {
            prev: cur,
            trig,
            output: y,
        });
        cur = next;
    }
    let tape = CpgTape {
        params: params.clone(),
        modulation: *modulation,
        records,
        final_state: cur.clone(),
    };
    Ok((cur, outputs, tape))
}

/// Gradients with respect to the packed parameter heads, in bounded units.
#[derive(Debug, Clone, PartialEq)]
pub struct CpgGradients(pub HeadVectors);

impl Deref for CpgGradients {
    type Target = HeadVectors;
    fn deref(&self) -> &HeadVectors {
        &self.0
    }
}

impl DerefMut for CpgGradients {
    fn deref_mut(&mut self) -> &mut HeadVectors {
        &mut self.0
    }
}

impl CpgGradients {
    /// Chains through the affine map and the tanh of the raw heads, giving
    /// gradients with respect to the heads' pre-activations.
    pub fn to_preactivation(&self, raw_heads: &HeadVectors) -> HeadVectors {
        let mut g = self.0.clone();
        g.scale_by_affine_slope();
        for (gv, hv) in g.families_mut().into_iter().zip(raw_heads.families()) {
            for (x, h) in gv.iter_mut().zip(hv.iter()) {
                *x *= 1.0 - h * h;
            }
        }
        g
    }
}

struct Adjoint {
    phase: Vec<f64>,
    phase_rate: Vec<f64>,
    amp: Vec<f64>,
    amp_rate: Vec<f64>,
    amp_accel: Vec<f64>,
    offset: Vec<f64>,
    offset_rate: Vec<f64>,
    offset_accel: Vec<f64>,
}

impl Adjoint {
    fn zeros(n: usize) -> Self {
        Self {
            phase: vec![0.0; n],
            phase_rate: vec![0.0; n],
            amp: vec![0.0; n],
            amp_rate: vec![0.0; n],
            amp_accel: vec![0.0; n],
            offset: vec![0.0; n],
            offset_rate: vec![0.0; n],
            offset_accel: vec![0.0; n],
        }
    }
}

/// Adjoint of the recorded rollout for the loss whose gradient with
/// respect to the step-`t` outputs is `output_grads[t]`.
pub fn backward(tape: &CpgTape, output_grads: &[Vec<f64>]) -> Result<CpgGradients> {
    let n = tape.n();
    let steps = tape.len();
    if output_grads.len() != steps || output_grads.iter().any(|r| r.len() != n) {
        return Err(structural(format!(
            "output gradients must be {steps}×{n}, got {}×{}",
            output_grads.len(),
            output_grads.first().map_or(0, |r| r.len())
        )));
    }
    let p = &tape.params;
    let m = &tape.modulation;
    let mut g_w = vec![0.0; n * n];
    let mut g_bias = vec![0.0; n * n];
    let mut g_freq = vec![0.0; n];
    let mut g_amp = vec![0.0; n];
    let mut g_off = vec![0.0; n];

    let mut adj = Adjoint::zeros(n);
    for t in (1..=steps).rev() {
        let cur = tape.state_at(t);
        let rec = &tape.records[t - 1];
        let prev = &rec.prev;
        let dt = prev.dt;
        let gy = &output_grads[t - 1];
        for i in 0..n {
            let (s, c) = cur.phase[i].sin_cos();
            adj.offset[i] += gy[i];
            adj.amp[i] += gy[i] * s;
            adj.phase[i] += gy[i] * cur.amp[i] * c;
        }

        let mut nxt = Adjoint::zeros(n);
        for i in 0..n {
            // phase_t = phase_{t-1} + phase_rate_{t-1}·dt
            nxt.phase[i] += adj.phase[i];
            nxt.phase_rate[i] += adj.phase[i] * dt;

            // phase_rate_t from the coupled Kuramoto sum over the previous state
            let lr = adj.phase_rate[i];
            if lr != 0.0 {
                g_freq[i] += lr * m.alpha_omega;
                for k in 0..n {
                    if k == i {
                        continue;
                    }
                    let s = rec.trig.sin[i * n + k];
                    let c = rec.trig.cos[i * n + k];
                    let w = p.w(i, k);
                    nxt.amp[k] += lr * m.alpha_w * w * s;
                    g_w[i * n + k] += lr * m.alpha_w * prev.amp[k] * s;
                    let d = lr * prev.amp[k] * m.alpha_w * w * c;
                    nxt.phase[k] += d;
                    nxt.phase[i] -= d;
                    g_bias[i * n + k] -= d * m.alpha_phi;
                }
            }

            // amplitude filter
            let la = adj.amp_accel[i];
            g_amp[i] += la * m.alpha_a * m.beta_a * m.alpha_amp;
            nxt.amp[i] -= la * m.alpha_a * m.beta_a;
            nxt.amp_rate[i] -= la * m.alpha_a;
            nxt.amp_rate[i] += adj.amp_rate[i];
            nxt.amp_accel[i] += adj.amp_rate[i] * dt;
            nxt.amp[i] += adj.amp[i];
            nxt.amp_rate[i] += adj.amp[i] * dt;

            // offset filter
            let lb = adj.offset_accel[i];
            g_off[i] += lb * m.alpha_b * m.beta_b * m.alpha_offset;
            nxt.offset[i] -= lb * m.alpha_b * m.beta_b;
            nxt.offset_rate[i] -= lb * m.alpha_b;
            nxt.offset_rate[i] += adj.offset_rate[i];
            nxt.offset_accel[i] += adj.offset_rate[i] * dt;
            nxt.offset[i] += adj.offset[i];
            nxt.offset_rate[i] += adj.offset[i] * dt;
        }
        adj = nxt;
    }

    let packed = HeadVectors {
        coupling: upper_pairs(n)
            .map(|(i, j)| g_w[i * n + j] + g_w[j * n + i])
            .collect(),
        phase_bias: upper_pairs(n)
            .map(|(i, j)| g_bias[i * n + j] - g_bias[j * n + i])
            .collect(),
        frequency: g_freq,
        amplitude: g_amp,
        offset: g_off,
    };
    if !packed.is_finite() {
        return Err(crate::error::numeric(tape.final_state.step, "non-finite CPG gradient"));
    }
    Ok(CpgGradients(packed))
}

/// Per-oscillator partials from the direct-path recurrences.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectPartials {
    /// `∂φ_i/∂ϕ_ij` for each neighbour `j` (entry `i` is zero).
    pub phase_wrt_bias: Vec<f64>,
    /// `∂φ_i/∂w_ij` for each neighbour `j` (entry `i` is zero).
    pub phase_wrt_coupling: Vec<f64>,
    /// `∂φ_i/∂ω_i`.
    pub phase_wrt_frequency: f64,
    /// `∂a_i/∂A_i`.
    pub amp_wrt_amplitude: f64,
    /// `∂b_i/∂B_i`.
    pub offset_wrt_offset: f64,
}

/// Evaluates the direct-path recurrences for oscillator `target` after
/// `step` steps of the recorded rollout.
///
/// The recurrences follow each parameter only through oscillator
/// `target`'s own phase, amplitude and offset and drop every path through
/// neighbouring oscillators.
pub fn direct_path_gradients(tape: &CpgTape, target: usize, step: usize) -> Result<DirectPartials> {
    let n = tape.n();
    if target >= n {
        return Err(Error::Index(format!("oscillator {target} of {n}")));
    }
    if step > tape.len() {
        return Err(Error::Index(format!("step {step} of {}", tape.len())));
    }
    let m = &tape.modulation;
    let p = &tape.params;
    let i = target;

    // Each phase recurrence carries (∂φ_i, ∂φ̇_i); rates at t = 0 belong to
    // the initial state and do not depend on the parameters.
    let mut bias = vec![(0.0, 0.0); n];
    let mut coupling = vec![(0.0, 0.0); n];
    let mut freq = (0.0, 0.0);
    let mut amp = (0.0, 0.0, 0.0);
    let mut off = (0.0, 0.0, 0.0);

    for s in 1..=step {
        let rec = &tape.records[s - 1];
        let prev = &rec.prev;
        let dt = prev.dt;
        let trig = |k: usize| (rec.trig.sin[i * n + k], rec.trig.cos[i * n + k]);

        for j in (0..n).filter(|&j| j != i) {
            let (sn, cs) = trig(j);
            let gain = m.alpha_w * p.w(i, j) * prev.amp[j];
            let (d, r) = bias[j];
            bias[j] = (d + r * dt, gain * cs * (-d - m.alpha_phi));
            let (d, r) = coupling[j];
            coupling[j] = (d + r * dt, m.alpha_w * prev.amp[j] * sn - gain * cs * d);
        }
        let (d, r) = freq;
        let pull: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| m.alpha_w * p.w(i, j) * prev.amp[j] * trig(j).1)
            .sum();
        freq = (d + r * dt, m.alpha_omega - pull * d);

        let (e, f, g) = amp;
        amp = (e + f * dt, f + g * dt, m.alpha_a * (m.beta_a * (m.alpha_amp - e) - f));
        let (e, f, g) = off;
        off = (e + f * dt, f + g * dt, m.alpha_b * (m.beta_b * (m.alpha_offset - e) - f));
    }

    Ok(DirectPartials {
        phase_wrt_bias: bias.iter().map(|b| b.0).collect(),
        phase_wrt_coupling: coupling.iter().map(|c| c.0).collect(),
        phase_wrt_frequency: freq.0,
        amp_wrt_amplitude: amp.0,
        offset_wrt_offset: off.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpg::{cpg_rollout, DEFAULT_DT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, seed: u64) -> (CpgParams, Modulation, CpgState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CpgParams::sample_uniform(n, &mut rng);
        let s = CpgState::random_phases(n, DEFAULT_DT, &mut rng);
        (p, Modulation::default(), s)
    }

    #[test]
    fn tape_outputs_match_rollout() {
        let (p, m, s) = setup(4, 1);
        let r = cpg_rollout(&p, &m, &s, 5).unwrap();
        let (st, out, tape) = rollout_with_tape(&p, &m, &s, 5).unwrap();
        assert_eq!(out, r.outputs);
        assert_eq!(st, r.state);
        assert_eq!(tape.len(), 5);
        assert!(tape.replay_matches());
    }

    #[test]
    fn zero_output_grads_give_zero_gradients() {
        let (p, m, s) = setup(3, 2);
        let (_, _, tape) = rollout_with_tape(&p, &m, &s, 6).unwrap();
        let g = backward(&tape, &vec![vec![0.0; 3]; 6]).unwrap();
        assert!(g.to_flat().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let (p, m, s) = setup(3, 2);
        let (_, _, tape) = rollout_with_tape(&p, &m, &s, 4).unwrap();
        assert!(backward(&tape, &vec![vec![0.0; 3]; 3]).is_err());
        assert!(backward(&tape, &vec![vec![0.0; 2]; 4]).is_err());
    }

    #[test]
    fn offset_gradient_by_hand_for_three_steps() {
        // n = 1, L = y_T. Unrolling the offset filter from rest:
        //   t=1: b=0, ḃ=0, b̈=α_b·β_b·α_B·B
        //   t=2: b=0, ḃ=b̈₁·dt, b̈=...
        //   t=3: b=ḃ₂·dt = α_b·β_b·α_B·B·dt²
        // so ∂b_3/∂B = α_b·β_b·α_B·dt² and ∂y_3/∂B is the same.
        let m = Modulation::default();
        let p = CpgParams::from_packed(
            1,
            &HeadVectors {
                coupling: vec![],
                phase_bias: vec![],
                frequency: vec![0.4],
                amplitude: vec![0.6],
                offset: vec![0.3],
            },
        )
        .unwrap();
        let s = CpgState::zeros(1, DEFAULT_DT);
        for (steps, expect) in [
            (1usize, 0.0),
            (2, 0.0),
            (3, m.alpha_b * m.beta_b * m.alpha_offset * DEFAULT_DT * DEFAULT_DT),
        ] {
            let (_, _, tape) = rollout_with_tape(&p, &m, &s, steps).unwrap();
            let mut gy = vec![vec![0.0]; steps];
            gy[steps - 1][0] = 1.0;
            let g = backward(&tape, &gy).unwrap();
            assert!((g.offset[0] - expect).abs() < 1e-15, "steps={steps}");
            let d = direct_path_gradients(&tape, 0, steps).unwrap();
            assert!((d.offset_wrt_offset - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_is_linear_in_output_grads() {
        let (p, m, s) = setup(4, 9);
        let (_, _, tape) = rollout_with_tape(&p, &m, &s, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut rand_grads = || -> Vec<Vec<f64>> {
            (0..7)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let g1 = rand_grads();
        let g2 = rand_grads();
        let sum: Vec<Vec<f64>> = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let a = backward(&tape, &g1).unwrap().to_flat();
        let b = backward(&tape, &g2).unwrap().to_flat();
        let c = backward(&tape, &sum).unwrap().to_flat();
        for k in 0..c.len() {
            let scale = 1.0f64.max(c[k].abs());
            assert!((a[k] + b[k] - c[k]).abs() <= 1e-12 * scale, "entry {k}");
        }
    }

    #[test]
    fn direct_partials_vanish_at_step_zero() {
        let (p, m, s) = setup(3, 4);
        let (_, _, tape) = rollout_with_tape(&p, &m, &s, 3).unwrap();
        let d = direct_path_gradients(&tape, 1, 0).unwrap();
        assert!(d.phase_wrt_bias.iter().chain(&d.phase_wrt_coupling).all(|x| *x == 0.0));
        assert_eq!(d.phase_wrt_frequency, 0.0);
        assert_eq!(d.amp_wrt_amplitude, 0.0);
        assert_eq!(d.offset_wrt_offset, 0.0);
        assert!(direct_path_gradients(&tape, 3, 1).is_err());
        assert!(direct_path_gradients(&tape, 0, 4).is_err());
    }

    #[test]
    fn amplitude_partial_ignores_couplings() {
        let (p, m, s) = setup(4, 5);
        let mut decoupled = p.clone();
        decoupled.coupling.iter_mut().for_each(|w| *w = 0.0);
        let (_, _, t1) = rollout_with_tape(&p, &m, &s, 12).unwrap();
        let (_, _, t2) = rollout_with_tape(&decoupled, &m, &s, 12).unwrap();
        for t in 0..=12 {
            let a = direct_path_gradients(&t1, 2, t).unwrap().amp_wrt_amplitude;
            let b = direct_path_gradients(&t2, 2, t).unwrap().amp_wrt_amplitude;
            assert_eq!(a, b);
        }
    }
}
