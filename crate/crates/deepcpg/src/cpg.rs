//! Kuramoto oscillator network used as a recurrent action layer.
//!
//! Each oscillator drives one joint. Its phase follows the coupled
//! Kuramoto equation, while amplitude and offset follow critically damped
//! second-order filters toward the desired values predicted by the actor:
//!
//! ```text
//! phase_rate_i = αω·ω_i + Σ_k a_k·αw·w_ik·sin(φ_k − φ_i − αφ·ϕ_ik)
//! amp_accel_i  = α_a·(β_a·(α_A·A_i − a_i) − amp_rate_i)
//! off_accel_i  = α_b·(β_b·(α_B·B_i − b_i) − off_rate_i)
//! y_i          = b_i + a_i·sin(φ_i)
//! ```
//!
//! The discrete scheme is explicit with lagged rates: new rates are
//! computed from the previous state, and every state variable is advanced
//! with the *previous* rate. The reverse-mode pass in [`crate::grad`]
//! differentiates exactly this scheme.
//!
//! The lag makes the coupling term conditionally stable. Linearising the
//! phase dynamics gives a per-step gain of roughly `n·αw·w·a·δt`; above
//! one the phases stop locking and the oscillator outputs turn chaotic.
//! See [`coupling_stability_limit`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{numeric, structural, Error, Result};

/// Bounds of each parameter family after the affine map of the tanh heads.
pub const COUPLING_BOUNDS: (f64, f64) = (0.0, 1.0);
pub const PHASE_BIAS_BOUNDS: (f64, f64) = (-1.0, 1.0);
pub const FREQUENCY_BOUNDS: (f64, f64) = (0.0, 1.0);
pub const AMPLITUDE_BOUNDS: (f64, f64) = (0.0, 1.0);
pub const OFFSET_BOUNDS: (f64, f64) = (-1.0, 1.0);

/// Maps a tanh output `x ∈ [−1, 1]` onto `[lo, hi]`.
#[inline]
pub fn affine(x: f64, (lo, hi): (f64, f64)) -> f64 {
    0.5 * (x * (hi - lo) + (hi + lo))
}

/// Slope `d affine / dx` of [`affine`].
#[inline]
pub fn affine_slope((lo, hi): (f64, f64)) -> f64 {
    0.5 * (hi - lo)
}

/// Number of free entries of a symmetric (or skew-symmetric) `n×n` matrix
/// with zero diagonal.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Upper-triangle index pairs `(i, j)` with `i < j`, row-major.
pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// The five per-family vectors the actor predicts: packed coupling weights,
/// packed phase biases, frequencies, amplitudes and offsets.
///
/// The same layout carries raw tanh outputs, bounded parameter values and
/// gradients with respect to either.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadVectors {
    pub coupling: Vec<f64>,
    pub phase_bias: Vec<f64>,
    pub frequency: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub offset: Vec<f64>,
}

impl HeadVectors {
    /// Head sizes `{n(n−1)/2, n(n−1)/2, n, n, n}` for an `n`-oscillator network.
    pub fn sizes(n: usize) -> [usize; 5] {
        let p = pair_count(n);
        [p, p, n, n, n]
    }

    pub fn zeros(n: usize) -> Self {
        let p = pair_count(n);
        Self {
            coupling: vec![0.0; p],
            phase_bias: vec![0.0; p],
            frequency: vec![0.0; n],
            amplitude: vec![0.0; n],
            offset: vec![0.0; n],
        }
    }

    /// Builds from one flat vector laid out head after head.
    pub fn from_flat(n: usize, flat: &[f64]) -> Result<Self> {
        let sizes = Self::sizes(n);
        let total: usize = sizes.iter().sum();
        if flat.len() != total {
            return Err(structural(format!(
                "flat head vector has {} entries, expected {total} for n={n}",
                flat.len()
            )));
        }
        let mut parts = Vec::with_capacity(5);
        let mut at = 0;
        for s in sizes {
            parts.push(flat[at..at + s].to_vec());
            at += s;
        }
        let mut it = parts.into_iter();
        Ok(Self {
            coupling: it.next().unwrap(),
            phase_bias: it.next().unwrap(),
            frequency: it.next().unwrap(),
            amplitude: it.next().unwrap(),
            offset: it.next().unwrap(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.families().iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn families(&self) -> [&Vec<f64>; 5] {
        [
            &self.coupling,
            &self.phase_bias,
            &self.frequency,
            &self.amplitude,
            &self.offset,
        ]
    }

    pub fn families_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.coupling,
            &mut self.phase_bias,
            &mut self.frequency,
            &mut self.amplitude,
            &mut self.offset,
        ]
    }

    /// Bounds of each family, in [`HeadVectors::families`] order.
    pub fn bounds() -> [(f64, f64); 5] {
        [
            COUPLING_BOUNDS,
            PHASE_BIAS_BOUNDS,
            FREQUENCY_BOUNDS,
            AMPLITUDE_BOUNDS,
            OFFSET_BOUNDS,
        ]
    }

    pub fn check_sizes(&self, n: usize) -> Result<()> {
        let want = Self::sizes(n);
        for (k, (v, w)) in self.families().iter().zip(want).enumerate() {
            if v.len() != w {
                return Err(structural(format!(
                    "head {k} has {} entries, expected {w} for n={n}",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// Applies the affine head map family by family.
    pub fn to_bounded(&self) -> Self {
        let mut out = self.clone();
        for (v, b) in out.families_mut().into_iter().zip(Self::bounds()) {
            v.iter_mut().for_each(|x| *x = affine(*x, b));
        }
        out
    }

    /// Chain rule through the affine head map: scales each family by its slope.
    pub fn scale_by_affine_slope(&mut self) {
        for (v, b) in self.families_mut().into_iter().zip(Self::bounds()) {
            let s = affine_slope(b);
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.families()
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// The CPG goal set: coupling weights, phase biases, frequencies, desired
/// amplitudes and desired offsets, all in their pre-modulation bounds.
///
/// `coupling` is symmetric with zero diagonal and `phase_bias` is
/// skew-symmetric; both are stored row-major as `n×n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpgParams {
    pub n: usize,
    pub coupling: Vec<f64>,
    pub phase_bias: Vec<f64>,
    pub frequency: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub offset: Vec<f64>,
}

impl CpgParams {
    /// Expands packed, bounded head values into full matrices.
    pub fn from_packed(n: usize, packed: &HeadVectors) -> Result<Self> {
        packed.check_sizes(n)?;
        let mut coupling = vec![0.0; n * n];
        let mut phase_bias = vec![0.0; n * n];
        for (k, (i, j)) in upper_pairs(n).enumerate() {
            coupling[i * n + j] = packed.coupling[k];
            coupling[j * n + i] = packed.coupling[k];
            phase_bias[i * n + j] = packed.phase_bias[k];
            phase_bias[j * n + i] = -packed.phase_bias[k];
        }
        Ok(Self {
            n,
            coupling,
            phase_bias,
            frequency: packed.frequency.clone(),
            amplitude: packed.amplitude.clone(),
            offset: packed.offset.clone(),
        })
    }

    /// Inverse of [`CpgParams::from_packed`]: reads the upper triangles.
    pub fn packed(&self) -> HeadVectors {
        let n = self.n;
        HeadVectors {
            coupling: upper_pairs(n).map(|(i, j)| self.coupling[i * n + j]).collect(),
            phase_bias: upper_pairs(n)
                .map(|(i, j)| self.phase_bias[i * n + j])
                .collect(),
            frequency: self.frequency.clone(),
            amplitude: self.amplitude.clone(),
            offset: self.offset.clone(),
        }
    }

    /// Parameters at the centre of every bound (all raw heads zero).
    pub fn midpoint(n: usize) -> Self {
        unpack_params(&HeadVectors::zeros(n), n).expect("sizes match by construction")
    }

    /// Uniform sample over the bounded parameter box.
    pub fn sample_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut raw = HeadVectors::zeros(n);
        for v in raw.families_mut() {
            v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
        }
        unpack_params(&raw, n).expect("sizes match by construction")
    }

    #[inline]
    pub fn w(&self, i: usize, k: usize) -> f64 {
        self.coupling[i * self.n + k]
    }

    #[inline]
    pub fn bias(&self, i: usize, k: usize) -> f64 {
        self.phase_bias[i * self.n + k]
    }

    /// Checks the structural invariants: sizes, symmetry and bounds.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if self.coupling.len() != n * n || self.phase_bias.len() != n * n {
            return Err(structural("coupling/phase_bias must be n×n"));
        }
        for v in [&self.frequency, &self.amplitude, &self.offset] {
            if v.len() != n {
                return Err(structural("per-oscillator vectors must have length n"));
            }
        }
        for i in 0..n {
            if self.w(i, i) != 0.0 || self.bias(i, i) != 0.0 {
                return Err(structural("diagonals must be zero"));
            }
            for k in 0..n {
                if self.w(i, k) != self.w(k, i) {
                    return Err(structural("coupling must be symmetric"));
                }
                if self.bias(i, k) != -self.bias(k, i) {
                    return Err(structural("phase_bias must be skew-symmetric"));
                }
            }
        }
        let within = |v: &[f64], (lo, hi): (f64, f64)| v.iter().all(|x| *x >= lo && *x <= hi);
        if !within(&self.coupling, COUPLING_BOUNDS)
            || !within(&self.phase_bias, PHASE_BIAS_BOUNDS)
            || !within(&self.frequency, FREQUENCY_BOUNDS)
            || !within(&self.amplitude, AMPLITUDE_BOUNDS)
            || !within(&self.offset, OFFSET_BOUNDS)
        {
            return Err(structural("parameter outside its bounds"));
        }
        Ok(())
    }
}

/// Turns raw tanh head outputs into [`CpgParams`].
pub fn unpack_params(raw: &HeadVectors, n: usize) -> Result<CpgParams> {
    raw.check_sizes(n)?;
    CpgParams::from_packed(n, &raw.to_bounded())
}

/// External modulation constants and second-order filter gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modulation {
    pub alpha_w: f64,
    pub alpha_phi: f64,
    pub alpha_omega: f64,
    pub alpha_amp: f64,
    pub alpha_offset: f64,
    pub alpha_a: f64,
    pub beta_a: f64,
    pub alpha_b: f64,
    pub beta_b: f64,
}

impl Default for Modulation {
    fn default() -> Self {
        Self {
            alpha_w: 600.0,
            alpha_phi: PI,
            alpha_omega: 20.0,
            alpha_amp: 0.8,
            alpha_offset: 0.2,
            alpha_a: 20.0,
            beta_a: 5.0,
            alpha_b: 20.0,
            beta_b: 5.0,
        }
    }
}

impl Modulation {
    /// Validated constructor with critically damped filter gains
    /// (`β = α/4`) for the given filter rates.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha_w: f64,
        alpha_phi: f64,
        alpha_omega: f64,
        alpha_amp: f64,
        alpha_offset: f64,
        alpha_a: f64,
        alpha_b: f64,
    ) -> Result<Self> {
        let m = Self {
            alpha_w,
            alpha_phi,
            alpha_omega,
            alpha_amp,
            alpha_offset,
            alpha_a,
            beta_a: alpha_a / 4.0,
            alpha_b,
            beta_b: alpha_b / 4.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let gains = [
            self.alpha_w,
            self.alpha_phi,
            self.alpha_omega,
            self.alpha_amp,
            self.alpha_offset,
        ];
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Config("modulation gains must be finite and ≥ 0".into()));
        }
        let filt = [self.alpha_a, self.beta_a, self.alpha_b, self.beta_b];
        if filt.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(Error::Config("filter constants must be finite and > 0".into()));
        }
        if self.alpha_amp + self.alpha_offset > 1.0 + 1e-12 {
            return Err(Error::Config("alpha_amp + alpha_offset must not exceed 1".into()));
        }
        Ok(())
    }
}

/// Largest uniform coupling weight for which the lagged phase update of a
/// fully connected `n`-node network stays contractive, assuming neighbour
/// amplitudes of at most `amplitude`.
pub fn coupling_stability_limit(n: usize, modulation: &Modulation, amplitude: f64, dt: f64) -> f64 {
    let gain = n.max(2) as f64 * modulation.alpha_w * amplitude * dt;
    if gain <= 0.0 {
        COUPLING_BOUNDS.1
    } else {
        (1.0 / gain).min(COUPLING_BOUNDS.1)
    }
}

/// Recurrent hidden state of the oscillator network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpgState {
    pub phase: Vec<f64>,
    pub phase_rate: Vec<f64>,
    pub amp: Vec<f64>,
    pub amp_rate: Vec<f64>,
    pub amp_accel: Vec<f64>,
    pub offset: Vec<f64>,
    pub offset_rate: Vec<f64>,
    pub offset_accel: Vec<f64>,
    pub step: u64,
    pub dt: f64,
}

/// Default integration step in seconds.
pub const DEFAULT_DT: f64 = 0.01;

impl CpgState {
    /// All-zero state.
    pub fn zeros(n: usize, dt: f64) -> Self {
        Self {
            phase: vec![0.0; n],
            phase_rate: vec![0.0; n],
            amp: vec![0.0; n],
            amp_rate: vec![0.0; n],
            amp_accel: vec![0.0; n],
            offset: vec![0.0; n],
            offset_rate: vec![0.0; n],
            offset_accel: vec![0.0; n],
            step: 0,
            dt,
        }
    }

    /// Phases uniform in `[0, 2π)`, everything else at rest.
    pub fn random_phases<R: Rng + ?Sized>(n: usize, dt: f64, rng: &mut R) -> Self {
        let mut s = Self::zeros(n, dt);
        s.phase
            .iter_mut()
            .for_each(|p| *p = rng.random_range(0.0..2.0 * PI));
        s
    }

    pub fn n(&self) -> usize {
        self.phase.len()
    }

    /// Joint goals `b + a·sin φ` for the current state.
    pub fn output(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.offset[i] + self.amp[i] * self.phase[i].sin())
            .collect()
    }

    pub fn fields(&self) -> [&Vec<f64>; 8] {
        [
            &self.phase,
            &self.phase_rate,
            &self.amp,
            &self.amp_rate,
            &self.amp_accel,
            &self.offset,
            &self.offset_rate,
            &self.offset_accel,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.phase,
            &mut self.phase_rate,
            &mut self.amp,
            &mut self.amp_rate,
            &mut self.amp_accel,
            &mut self.offset,
            &mut self.offset_rate,
            &mut self.offset_accel,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.fields().iter().any(|f| f.len() != n) {
            return Err(structural("state vectors must share one length"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(structural("dt must be positive"));
        }
        if self.fields().iter().any(|f| f.iter().any(|x| !x.is_finite())) {
            return Err(numeric(self.step, "non-finite CPG state"));
        }
        Ok(())
    }

    /// Flattens all fields followed by `step` and `dt`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.fields().iter().flat_map(|f| f.iter().copied()).collect();
        v.push(self.step as f64);
        v.push(self.dt);
        v
    }

    pub fn from_flat(n: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 8 * n + 2 {
            return Err(structural("flat CPG state has the wrong length"));
        }
        let mut s = Self::zeros(n, flat[8 * n + 1]);
        for (k, f) in s.fields_mut().into_iter().enumerate() {
            f.copy_from_slice(&flat[k * n..(k + 1) * n]);
        }
        s.step = flat[8 * n] as u64;
        Ok(s)
    }
}

/// Sine and cosine of the coupling argument `φ_k − φ_i − αφ·ϕ_ik` for every
/// ordered pair, row-major `n×n` (diagonal unused).
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTrig {
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
}

pub(crate) fn step_impl(
    params: &CpgParams,
    m: &Modulation,
    prev: &CpgState,
    trig: Option<&mut CouplingTrig>,
) -> Result<(CpgState, Vec<f64>)> {
    let n = params.n;
    if prev.n() != n {
        return Err(structural(format!(
            "state has {} oscillators, params have {n}",
            prev.n()
        )));
    }
    let dt = prev.dt;
    let mut next = CpgState::zeros(n, dt);
    next.step = prev.step + 1;
    let mut trig = trig;
    if let Some(t) = trig.as_deref_mut() {
        t.sin.clear();
        t.sin.resize(n * n, 0.0);
        t.cos.clear();
        t.cos.resize(n * n, 0.0);
    }
    for i in 0..n {
        let mut rate = m.alpha_omega * params.frequency[i];
        for k in 0..n {
            if k == i {
                continue;
            }
            let arg = prev.phase[k] - prev.phase[i] - m.alpha_phi * params.bias(i, k);
            let (s, c) = arg.sin_cos();
            if let Some(t) = trig.as_deref_mut() {
                t.sin[i * n + k] = s;
                t.cos[i * n + k] = c;
            }
            rate += prev.amp[k] * m.alpha_w * params.w(i, k) * s;
        }
        next.phase_rate[i] = rate;
        next.phase[i] = prev.phase[i] + prev.phase_rate[i] * dt;

        next.amp_accel[i] =
            m.alpha_a * (m.beta_a * (m.alpha_amp * params.amplitude[i] - prev.amp[i]) - prev.amp_rate[i]);
        next.amp_rate[i] = prev.amp_rate[i] + prev.amp_accel[i] * dt;
        next.amp[i] = prev.amp[i] + prev.amp_rate[i] * dt;

        next.offset_accel[i] = m.alpha_b
            * (m.beta_b * (m.alpha_offset * params.offset[i] - prev.offset[i]) - prev.offset_rate[i]);
        next.offset_rate[i] = prev.offset_rate[i] + prev.offset_accel[i] * dt;
        next.offset[i] = prev.offset[i] + prev.offset_rate[i] * dt;
    }
    let y = next.output();
    if y.iter().any(|v| !v.is_finite()) || next.fields().iter().any(|f| f.iter().any(|x| !x.is_finite())) {
        return Err(numeric(next.step, "non-finite CPG state or output"));
    }
    Ok((next, y))
}

/// Advances the network by one `δt` and returns the new state with its
/// joint goals.
pub fn cpg_step(params: &CpgParams, modulation: &Modulation, state: &CpgState) -> Result<(CpgState, Vec<f64>)> {
    step_impl(params, modulation, state, None)
}

/// Result of a multi-step rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub state: CpgState,
    /// One row of joint goals per step.
    pub outputs: Vec<Vec<f64>>,
}

/// Runs `steps` consecutive [`cpg_step`]s with fixed parameters.
pub fn cpg_rollout(params: &CpgParams, modulation: &Modulation, state: &CpgState, steps: usize) -> Result<Rollout> {
    if steps == 0 {
        return Err(structural("rollout needs at least one step"));
    }
    let mut state = state.clone();
    let mut outputs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, y) = cpg_step(params, modulation, &state)?;
        state = next;
        outputs.push(y);
    }
    Ok(Rollout { state, outputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(freq: f64, amp: f64, off: f64) -> CpgParams {
        CpgParams::from_packed(
            1,
            &HeadVectors {
                coupling: vec![],
                phase_bias: vec![],
                frequency: vec![freq],
                amplitude: vec![amp],
                offset: vec![off],
            },
        )
        .unwrap()
    }

    #[test]
    fn midpoint_of_zero_heads() {
        let p = unpack_params(&HeadVectors::zeros(2), 2).unwrap();
        assert_eq!(p.w(0, 1), 0.5);
        assert_eq!(p.bias(0, 1), 0.0);
        assert_eq!(p.frequency, vec![0.5, 0.5]);
        assert_eq!(p.amplitude, vec![0.5, 0.5]);
        assert_eq!(p.offset, vec![0.0, 0.0]);
    }

    #[test]
    fn head_sizes_for_four_nodes() {
        assert_eq!(HeadVectors::sizes(4), [6, 6, 4, 4, 4]);
    }

    #[test]
    fn endpoint_heads_map_to_endpoint_weights() {
        let mut raw = HeadVectors::zeros(3);
        raw.coupling = vec![1.0, -1.0, 1.0];
        let p = unpack_params(&raw, 3).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|k| p.w(i, k)).collect()).collect();
        assert_eq!(rows, vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
    }

    #[test]
    fn size_mismatch_is_structural() {
        let mut raw = HeadVectors::zeros(4);
        raw.phase_bias.pop();
        assert!(matches!(unpack_params(&raw, 4), Err(Error::Structural(_))));
        assert!(matches!(unpack_params(&HeadVectors::zeros(3), 4), Err(Error::Structural(_))));
    }

    #[test]
    fn lone_oscillator_advances_by_natural_frequency() {
        let m = Modulation::default();
        let p = single(0.3, 0.5, 0.0);
        let mut s = CpgState::zeros(1, DEFAULT_DT);
        // the first step only sets the rate; afterwards the phase moves every step
        let (next, _) = cpg_step(&p, &m, &s).unwrap();
        s = next;
        for _ in 0..50 {
            let (next, _) = cpg_step(&p, &m, &s).unwrap();
            let advance = next.phase[0] - s.phase[0];
            assert!((advance - m.alpha_omega * 0.3 * DEFAULT_DT).abs() < 1e-15);
            s = next;
        }
    }

    #[test]
    fn rollout_of_one_equals_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Modulation::default();
        let p = CpgParams::sample_uniform(3, &mut rng);
        let s = CpgState::random_phases(3, DEFAULT_DT, &mut rng);
        let (next, y) = cpg_step(&p, &m, &s).unwrap();
        let r = cpg_rollout(&p, &m, &s, 1).unwrap();
        assert_eq!(r.state, next);
        assert_eq!(r.outputs, vec![y]);
        assert!(cpg_rollout(&p, &m, &s, 0).is_err());
    }

    #[test]
    fn modulation_rejects_excess_amplitude_budget() {
        assert!(Modulation::new(600.0, PI, 20.0, 0.9, 0.2, 20.0, 20.0).is_err());
        assert!(Modulation::new(600.0, PI, 20.0, 0.8, 0.2, 20.0, 20.0).is_ok());
        assert!(Modulation::new(-1.0, PI, 20.0, 0.8, 0.2, 20.0, 20.0).is_err());
        let m = Modulation::new(600.0, PI, 20.0, 0.8, 0.2, 20.0, 20.0).unwrap();
        assert_eq!(m.beta_a, 5.0);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let m = Modulation::default();
        let p = single(0.5, 0.5, 0.0);
        let mut s = CpgState::zeros(1, DEFAULT_DT);
        s.amp_rate[0] = f64::INFINITY;
        s.step = 7;
        match cpg_step(&p, &m, &s) {
            Err(Error::Numeric { step, .. }) => assert_eq!(step, 8),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn stability_limit_shrinks_with_network_size() {
        let m = Modulation::default();
        let l2 = coupling_stability_limit(2, &m, 0.8, DEFAULT_DT);
        let l8 = coupling_stability_limit(8, &m, 0.8, DEFAULT_DT);
        assert!(l8 < l2 && l2 < 1.0);
    }
}
