//! Single-oscillator perturbation experiment.
//!
//! One oscillator runs with fixed parameters; at regular intervals either
//! its state (phase, amplitude, offset) or its parameters (frequency,
//! amplitude, offset goals) are replaced by random values. State jumps
//! show up as discontinuities in the output, parameter jumps do not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::cpg::{cpg_step, CpgParams, CpgState, HeadVectors, Modulation, DEFAULT_DT};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    State,
    Parameter,
}

#[derive(Debug, Clone)]
pub struct PerturbConfig {
    pub mode: PerturbMode,
    /// Perturbations happen at `period/2, 3·period/2, …`.
    pub period: usize,
    pub steps: usize,
    pub seed: u64,
    pub modulation: Modulation,
    pub frequency: f64,
    pub amplitude: f64,
    pub offset: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            mode: PerturbMode::Parameter,
            period: 1000,
            steps: 2000,
            seed: 0,
            modulation: Modulation::default(),
            frequency: 0.1,
            amplitude: 1.0,
            offset: 0.0,
        }
    }
}

/// One output sample. `bound` is the smoothness bound predicted from the
/// state the step started from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub output: f64,
    pub jump: f64,
    pub bound: f64,
    pub perturbed: bool,
}

/// Per-oscillator bound on `|y(t+1) − y(t)|`: `2·δt·(|ḃ| + |ȧ| + a·|φ̇|)`.
pub fn smoothness_bound(state: &CpgState) -> Vec<f64> {
    (0..state.n())
        .map(|i| {
            2.0 * state.dt
                * (state.offset_rate[i].abs()
                    + state.amp_rate[i].abs()
                    + state.amp[i].abs() * state.phase_rate[i].abs())
        })
        .collect()
}

fn single(frequency: f64, amplitude: f64, offset: f64) -> CpgParams {
    CpgParams::from_packed(
        1,
        &HeadVectors {
            coupling: vec![],
            phase_bias: vec![],
            frequency: vec![frequency],
            amplitude: vec![amplitude],
            offset: vec![offset],
        },
    )
    .expect("one oscillator")
}

pub fn is_perturbation_step(step: usize, period: usize) -> bool {
    period > 0 && step >= period / 2 && (step - period / 2) % period == 0
}

/// Runs the experiment and returns one row per step.
pub fn perturbation_trace(cfg: &PerturbConfig) -> Result<Vec<TraceRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = single(cfg.frequency, cfg.amplitude, cfg.offset);
    let mut state = CpgState::zeros(1, DEFAULT_DT);
    let mut prev_y = state.output()[0];
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let perturbed = is_perturbation_step(step, cfg.period);
        if perturbed {
            match cfg.mode {
                PerturbMode::State => {
                    state.phase[0] = rng.random_range(0.0..2.0 * PI);
                    state.amp[0] = rng.random_range(0.0..=1.0);
                    state.offset[0] = rng.random_range(-1.0..=1.0);
                }
                PerturbMode::Parameter => {
                    params = single(
                        rng.random_range(0.0..=1.0),
                        rng.random_range(0.0..=1.0),
                        rng.random_range(-1.0..=1.0),
                    );
                }
            }
        }
        let bound = smoothness_bound(&state)[0];
        let (next, y) = cpg_step(&params, &cfg.modulation, &state)?;
        state = next;
        rows.push(TraceRow {
            step,
            output: y[0],
            jump: (y[0] - prev_y).abs(),
            bound,
            perturbed,
        });
        prev_y = y[0];
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_perturbations_at_500_and_1500() {
        let steps: Vec<usize> = (1..=2000).filter(|s| is_perturbation_step(*s, 1000)).collect();
        assert_eq!(steps, vec![500, 1500]);
    }

    #[test]
    fn parameter_mode_stays_within_bound() {
        let rows = perturbation_trace(&PerturbConfig::default()).unwrap();
        for r in &rows {
            assert!(r.jump <= r.bound + 1e-12, "step {}: {} > {}", r.step, r.jump, r.bound);
        }
    }

    #[test]
    fn state_mode_jumps_at_perturbations() {
        let cfg = PerturbConfig {
            mode: PerturbMode::State,
            ..PerturbConfig::default()
        };
        let rows = perturbation_trace(&cfg).unwrap();
        for r in rows.iter().filter(|r| r.perturbed) {
            assert!(r.jump > 10.0 * r.bound, "step {}: {} vs {}", r.step, r.jump, r.bound);
        }
    }
}
