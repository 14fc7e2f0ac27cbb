//! Dense networks on `ndarray`: a bounded multi-head actor, a feed-forward
//! baseline actor, scalar critics, Adam with global-norm clipping, Polyak
//! averaging and a running observation normalizer.
//!
//! Every network stores its weights as flat `Vec<f64>` blocks (one per
//! [`Mlp`]) so optimizers, target copies and checkpoints can treat them
//! uniformly.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cpg::{coupling_stability_limit, HeadVectors, Modulation, DEFAULT_DT};
use crate::error::{numeric, structural, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Linear => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Weight initialisation for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(±sqrt(6/fan_in))`.
    He,
    /// `U(±1/sqrt(fan_in))`.
    FanIn,
    /// `U(±scale)`.
    Uniform(f64),
}

/// A stack of dense layers. Layer `l` maps `sizes[l]` inputs to
/// `sizes[l+1]` outputs; its row-major `out×in` weights are followed by
/// its biases inside `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    acts: Vec<Activation>,
    pub params: Vec<f64>,
}

/// Layer inputs and the final output of a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("at least the input")
    }
}

impl Mlp {
    pub fn zeros(sizes: &[usize], acts: &[Activation]) -> Result<Self> {
        if sizes.len() < 2 || acts.len() != sizes.len() - 1 {
            return Err(structural("an mlp needs n+1 sizes for n activations"));
        }
        if sizes.contains(&0) {
            return Err(structural("layer widths must be positive"));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            acts: acts.to_vec(),
            params: vec![0.0; count],
        })
    }

    pub fn from_parts(sizes: Vec<usize>, acts: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(&sizes, &acts)?;
        if params.len() != m.params.len() {
            return Err(structural("parameter count does not match layer sizes"));
        }
        m.params = params;
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.acts
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn layers(&self) -> usize {
        self.acts.len()
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weights, biases)` ranges of `layer` within `params`.
    pub fn layer_ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = self.offset(layer);
        let (i, o) = (self.sizes[layer], self.sizes[layer + 1]);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w, _) = self.layer_ranges(layer);
        ArrayView2::from_shape((self.sizes[layer + 1], self.sizes[layer]), &self.params[w])
            .expect("range sized from shape")
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let (_, b) = self.layer_ranges(layer);
        &self.params[b]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b) = self.layer_ranges(layer);
        &mut self.params[b]
    }

    pub fn init_layer<R: Rng + ?Sized>(&mut self, layer: usize, init: Init, rng: &mut R) {
        let fan_in = self.sizes[layer] as f64;
        let scale = match init {
            Init::He => (6.0 / fan_in).sqrt(),
            Init::FanIn => 1.0 / fan_in.sqrt(),
            Init::Uniform(s) => s,
        };
        let (w, b) = self.layer_ranges(layer);
        for x in &mut self.params[w] {
            *x = rng.random_range(-scale..=scale);
        }
        self.params[b].iter_mut().for_each(|x| *x = 0.0);
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(structural(format!(
                "input width {} does not match layer width {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn layer_forward(&self, layer: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights(layer).t());
        let b = self.biases(layer);
        let act = self.acts[layer];
        for mut row in z.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b) {
                *v = act.apply(*v + bias);
            }
        }
        z
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = self.layer_forward(0, &x);
        for l in 1..self.layers() {
            h = self.layer_forward(l, &h.view());
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        self.check_input(&x)?;
        let mut activations = Vec::with_capacity(self.layers() + 1);
        activations.push(x.to_owned());
        for l in 0..self.layers() {
            let h = self.layer_forward(l, &activations[l].view());
            activations.push(h);
        }
        Ok(MlpCache { activations })
    }

    /// Accumulates `dL/dparams` into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grads: &mut [f64]) -> Result<Array2<f64>> {
        if grads.len() != self.params.len() {
            return Err(structural("gradient buffer size mismatch"));
        }
        if dy.dim() != cache.output().dim() {
            return Err(structural("output gradient shape mismatch"));
        }
        let mut delta = dy.clone();
        for l in (0..self.layers()).rev() {
            let out = &cache.activations[l + 1];
            let act = self.acts[l];
            delta.zip_mut_with(out, |d, y| *d *= act.slope_from_output(*y));
            let input = &cache.activations[l];
            let (wr, br) = self.layer_ranges(l);
            let gw = delta.t().dot(input);
            for (g, v) in grads[wr].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            for (g, v) in grads[br].iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
                *g += v;
            }
            delta = delta.dot(&self.weights(l));
        }
        Ok(delta)
    }

    /// Product of layer spectral norms: a Lipschitz constant of the whole
    /// map, valid because every supported activation is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        (0..self.layers())
            .map(|l| spectral_norm(&self.weights(l)))
            .product()
    }
}

fn spectral_norm(w: &ArrayView2<f64>) -> f64 {
    let mut v = ndarray::Array1::from_elem(w.ncols(), 1.0 / (w.ncols() as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..200 {
        let u = w.dot(&v);
        let wtu = w.t().dot(&u);
        let norm = wtu.dot(&wtu).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = wtu / norm;
        sigma = norm.sqrt();
    }
    // power iteration underestimates slightly; pad for a safe bound
    sigma * (1.0 + 1e-6)
}

/// Any collection of [`Mlp`] blocks updated together by one optimizer.
pub trait Parameterized {
    fn blocks(&self) -> Vec<&Mlp>;
    fn blocks_mut(&mut self) -> Vec<&mut Mlp>;

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.blocks().iter().map(|m| vec![0.0; m.params.len()]).collect()
    }

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|m| m.params.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|m| m.params.iter().copied()).collect()
    }
}

/// Layer widths of actor and critic networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub actor_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub critic_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![1024, 512],
            head_hidden: 512,
            critic_hidden: vec![1024, 1024, 512, 512],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actor_hidden.is_empty() || self.actor_hidden.contains(&0) {
            return Err(crate::Error::Config("actor_hidden needs positive widths".into()));
        }
        if self.head_hidden == 0 {
            return Err(crate::Error::Config("head_hidden must be positive".into()));
        }
        if self.critic_hidden.len() < 2 || self.critic_hidden.contains(&0) {
            return Err(crate::Error::Config(
                "critic_hidden needs at least two positive widths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActorKind {
    /// Five bounded heads predicting CPG parameters.
    Cpg,
    /// One bounded head predicting joint goals directly.
    FeedForward,
}

/// Trunk plus heads. For [`ActorKind::Cpg`] the heads output the packed
/// coupling, phase-bias, frequency, amplitude and offset vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub kind: ActorKind,
    pub joints: usize,
    pub trunk: Mlp,
    pub heads: Vec<Mlp>,
}

/// Intermediate values of a batched actor pass.
pub struct ActorCache {
    trunk: MlpCache,
    heads: Vec<MlpCache>,
}

impl ActorCache {
    pub fn head_outputs(&self) -> Vec<&Array2<f64>> {
        self.heads.iter().map(|h| h.output()).collect()
    }
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(
        kind: ActorKind,
        input_dim: usize,
        joints: usize,
        cfg: &NetworkConfig,
        modulation: &Modulation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend(&cfg.actor_hidden);
        let acts = vec![Activation::Relu; cfg.actor_hidden.len()];
        let mut trunk = Mlp::zeros(&sizes, &acts)?;
        for l in 0..trunk.layers() {
            trunk.init_layer(l, Init::He, rng);
        }
        let top = *sizes.last().expect("non-empty");
        let heads = match kind {
            ActorKind::Cpg => {
                let mut heads = Vec::with_capacity(5);
                for (f, &k) in HeadVectors::sizes(joints).iter().enumerate() {
                    let mut h = Mlp::zeros(
                        &[top, cfg.head_hidden, k.max(1)],
                        &[Activation::Relu, Activation::Tanh],
                    )?;
                    h.init_layer(0, Init::He, rng);
                    h.init_layer(1, Init::Uniform(1e-3), rng);
                    if f == 0 {
                        let b = coupling_head_bias(joints, modulation);
                        h.biases_mut(1).iter_mut().for_each(|x| *x = b);
                    }
                    heads.push(h);
                }
                heads
            }
            ActorKind::FeedForward => {
                let mut h = Mlp::zeros(&[top, joints], &[Activation::Tanh])?;
                h.init_layer(0, Init::Uniform(1e-3), rng);
                vec![h]
            }
        };
        Ok(Self {
            kind,
            joints,
            trunk,
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ActorCache> {
        let trunk = self.trunk.forward_cached(x)?;
        let top = trunk.output().view();
        let heads = self
            .heads
            .iter()
            .map(|h| h.forward_cached(top))
            .collect::<Result<Vec<_>>>()?;
        Ok(ActorCache { trunk, heads })
    }

    /// Raw bounded head outputs for each row of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let c = self.forward_cached(x)?;
        Ok(c.heads.into_iter().map(|h| h.activations.into_iter().last().expect("output")).collect())
    }

    /// Head outputs of a single input row as [`HeadVectors`]. Only valid for
    /// CPG actors.
    pub fn heads_for(&self, input: &[f64]) -> Result<HeadVectors> {
        if self.kind != ActorKind::Cpg {
            return Err(structural("head vectors requested from a feed-forward actor"));
        }
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| structural(e.to_string()))?;
        let outs = self.forward(x)?;
        Ok(heads_from_rows(&outs, 0, self.joints))
    }

    /// Joint goals of a single input row. Only valid for feed-forward actors.
    pub fn joint_goals(&self, input: &[f64]) -> Result<Vec<f64>> {
        if self.kind != ActorKind::FeedForward {
            return Err(structural("joint goals requested from a CPG actor"));
        }
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| structural(e.to_string()))?;
        Ok(self.forward(x)?[0].row(0).to_vec())
    }

    /// Backpropagates head-output gradients into `grads` (one buffer per
    /// block, trunk first) and returns the input gradient.
    pub fn backward(&self, cache: &ActorCache, head_grads: &[Array2<f64>], grads: &mut [Vec<f64>]) -> Result<Array2<f64>> {
        if head_grads.len() != self.heads.len() || grads.len() != self.heads.len() + 1 {
            return Err(structural("actor gradient buffers do not match the heads"));
        }
        let mut d_top = Array2::zeros(cache.trunk.output().dim());
        for (k, head) in self.heads.iter().enumerate() {
            d_top += &head.backward(&cache.heads[k], &head_grads[k], &mut grads[k + 1])?;
        }
        self.trunk.backward(&cache.trunk, &d_top, &mut grads[0])
    }
}

impl Parameterized for Actor {
    fn blocks(&self) -> Vec<&Mlp> {
        std::iter::once(&self.trunk).chain(self.heads.iter()).collect()
    }
    fn blocks_mut(&mut self) -> Vec<&mut Mlp> {
        std::iter::once(&mut self.trunk)
            .chain(self.heads.iter_mut())
            .collect()
    }
}

/// Pre-tanh bias of the coupling head: starts the weights at a quarter of
/// the explicit scheme's stability limit, which keeps the initial gaits
/// regular rather than chaotic.
pub fn coupling_head_bias(joints: usize, modulation: &Modulation) -> f64 {
    let w0 = 0.25 * coupling_stability_limit(joints, modulation, modulation.alpha_amp, DEFAULT_DT);
    (2.0 * w0 - 1.0).clamp(-0.999_999, 0.999_999).atanh()
}

/// Splits row `r` of the five head outputs into [`HeadVectors`].
pub fn heads_from_rows(outs: &[Array2<f64>], r: usize, joints: usize) -> HeadVectors {
    let sizes = HeadVectors::sizes(joints);
    let take = |k: usize| outs[k].row(r).iter().take(sizes[k]).copied().collect::<Vec<_>>();
    HeadVectors {
        coupling: take(0),
        phase_bias: take(1),
        frequency: take(2),
        amplitude: take(3),
        offset: take(4),
    }
}

/// Scalar action-value network.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend(&cfg.critic_hidden);
        sizes.push(1);
        let hidden = cfg.critic_hidden.len();
        let mut acts = vec![Activation::Relu; hidden];
        // the last hidden layer is linear, then the scalar output
        acts[hidden - 1] = Activation::Linear;
        acts.push(Activation::Linear);
        let mut net = Mlp::zeros(&sizes, &acts)?;
        for l in 0..net.layers() {
            let init = match acts[l] {
                Activation::Relu => Init::He,
                _ if l + 1 == net.layers() => Init::Uniform(3e-3),
                _ => Init::FanIn,
            };
            net.init_layer(l, init, rng);
        }
        Ok(Self { net })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// One value per row of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward(x)?.column(0).to_vec())
    }
}

impl Parameterized for Critic {
    fn blocks(&self) -> Vec<&Mlp> {
        vec![&self.net]
    }
    fn blocks_mut(&mut self) -> Vec<&mut Mlp> {
        vec![&mut self.net]
    }
}

/// Adam moments and hyperparameters for one [`Parameterized`] value.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameterized + ?Sized>(p: &P, lr: f64, betas: (f64, f64), clip: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            clip,
            step: 0,
            m: p.zero_grads(),
            v: p.zero_grads(),
        }
    }

    /// Forgets the moment estimates and the step count.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(0.0));
    }

    /// Clips `grads` to the global-norm threshold, then applies one
    /// bias-corrected Adam update. Non-finite gradients leave everything
    /// untouched.
    pub fn update<P: Parameterized + ?Sized>(&mut self, p: &mut P, grads: &[Vec<f64>]) -> Result<()> {
        let mut blocks = p.blocks_mut();
        if blocks.len() != grads.len()
            || blocks.len() != self.m.len()
            || blocks.iter().zip(grads).any(|(b, g)| b.params.len() != g.len())
            || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(structural("optimizer and gradient shapes differ"));
        }
        let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
        if !sq.is_finite() {
            return Err(numeric(self.step, "non-finite gradient"));
        }
        let norm = sq.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, block) in blocks.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in block.params.iter_mut().enumerate() {
                let g = grads[k][i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `target ← ρ·target + (1−ρ)·source`, block by block.
pub fn polyak_update<P: Parameterized + ?Sized>(target: &mut P, source: &P, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(structural("polyak rho must lie in [0, 1]"));
    }
    let src = source.blocks();
    let mut dst = target.blocks_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(s, d)| s.params.len() != d.params.len()) {
        return Err(structural("polyak shapes differ"));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        for (t, x) in d.params.iter_mut().zip(&s.params) {
            *t = rho * *t + (1.0 - rho) * x;
        }
    }
    Ok(())
}

/// Running per-dimension mean and variance (Welford), frozen on request.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub frozen: bool,
}

const STD_FLOOR: f64 = 1e-2;
const NORM_CLIP: f64 = 10.0;

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn observe(&mut self, x: &[f64]) {
        if self.frozen {
            return;
        }
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|s| {
                if self.count < 2 {
                    1.0
                } else {
                    (s / self.count as f64).sqrt().max(STD_FLOOR)
                }
            })
            .collect()
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        if self.count < 2 {
            out.copy_from_slice(x);
            return;
        }
        for (((o, v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.m2) {
            let sd = (s / self.count as f64).sqrt().max(STD_FLOOR);
            *o = ((v - m) / sd).clamp(-NORM_CLIP, NORM_CLIP);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            actor_hidden: vec![6, 5],
            head_hidden: 4,
            critic_hidden: vec![6, 6, 5, 4],
        }
    }

    #[test]
    fn zero_actor_gives_midpoint_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Actor::new(ActorKind::Cpg, 7, 3, &small(), &Modulation::default(), &mut rng).unwrap();
        a.blocks_mut().into_iter().for_each(|b| b.params.iter_mut().for_each(|x| *x = 0.0));
        let h = a.heads_for(&[0.3; 7]).unwrap();
        assert_eq!(h, HeadVectors::zeros(3));
        assert_eq!(
            crate::cpg::unpack_params(&h, 3).unwrap(),
            crate::cpg::CpgParams::midpoint(3)
        );
    }

    #[test]
    fn zero_critic_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Critic::new(4, &small(), &mut rng).unwrap();
        c.net.params.iter_mut().for_each(|x| *x = 0.0);
        let x = Array2::from_elem((3, 4), 0.7);
        assert_eq!(c.forward(x.view()).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn width_mismatch_is_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Critic::new(4, &small(), &mut rng).unwrap();
        let x = Array2::zeros((1, 5));
        assert!(matches!(c.forward(x.view()), Err(crate::Error::Structural(_))));
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut m = Critic {
            net: Mlp::zeros(&[1, 1], &[Activation::Linear]).unwrap(),
        };
        let mut opt = Adam::new(&m, 2e-4, (0.9, 0.999), 2.0);
        opt.update(&mut m, &[vec![1.0, 0.0]]).unwrap();
        assert!((m.net.params[0] + 2e-4).abs() < 1e-10);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_zero_grads_and_refusal() {
        let mut m = Critic {
            net: Mlp::zeros(&[2, 1], &[Activation::Linear]).unwrap(),
        };
        m.net.params = vec![0.5, -0.5, 0.1];
        let mut opt = Adam::new(&m, 1e-3, (0.9, 0.999), 2.0);
        opt.update(&mut m, &[vec![0.0; 3]]).unwrap();
        assert_eq!(m.net.params, vec![0.5, -0.5, 0.1]);
        assert_eq!(opt.step, 1);
        let before = (m.clone(), opt.clone());
        assert!(opt.update(&mut m, &[vec![f64::NAN, 0.0, 0.0]]).is_err());
        assert_eq!((m, opt), before);
    }

    #[test]
    fn adam_clips_global_norm() {
        let make = || Critic {
            net: Mlp::zeros(&[1, 1], &[Activation::Linear]).unwrap(),
        };
        let (mut a, mut b) = (make(), make());
        let mut oa = Adam::new(&a, 1e-3, (0.9, 0.999), 2.0);
        let mut ob = Adam::new(&b, 1e-3, (0.9, 0.999), 0.0);
        // norm 4 clipped to 2 equals an unclipped gradient of half the size
        oa.update(&mut a, &[vec![4.0 * 0.6, 4.0 * 0.8]]).unwrap();
        ob.update(&mut b, &[vec![2.0 * 0.6, 2.0 * 0.8]]).unwrap();
        assert_eq!(oa.m, ob.m);
        assert_eq!(oa.v, ob.v);
    }

    #[test]
    fn polyak_endpoints_and_arithmetic() {
        let make = |x: f64| Critic {
            net: Mlp::from_parts(vec![1, 1], vec![Activation::Linear], vec![x, 0.0]).unwrap(),
        };
        let src = make(1.0);
        let mut t = make(0.0);
        polyak_update(&mut t, &src, 1.0).unwrap();
        assert_eq!(t.net.params[0], 0.0);
        polyak_update(&mut t, &src, 0.995).unwrap();
        assert!((t.net.params[0] - 0.005).abs() < 1e-15);
        polyak_update(&mut t, &src, 0.0).unwrap();
        assert_eq!(t, src);
        assert!(polyak_update(&mut t, &src, 1.5).is_err());
    }

    #[test]
    fn normalizer_freezes() {
        let mut n = Normalizer::new(1);
        for x in [1.0, 2.0, 3.0] {
            n.observe(&[x]);
        }
        assert_eq!(n.mean, vec![2.0]);
        n.frozen = true;
        n.observe(&[100.0]);
        assert_eq!(n.count, 3);
        let z = n.normalize(&[2.0]);
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn coupling_bias_hits_quarter_limit() {
        let m = Modulation::default();
        let b = coupling_head_bias(8, &m);
        let w = crate::cpg::affine(b.tanh(), crate::cpg::COUPLING_BOUNDS);
        let limit = coupling_stability_limit(8, &m, m.alpha_amp, DEFAULT_DT);
        assert!((w - 0.25 * limit).abs() < 1e-9);
    }
}
