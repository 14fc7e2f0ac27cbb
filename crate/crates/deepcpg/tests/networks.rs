use deepcpg::cpg::{CpgParams, Modulation};
use deepcpg::nn::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mlp(seed: u64, sizes: &[usize], acts: &[Activation]) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mlp::zeros(sizes, acts).unwrap();
    for l in 0..m.layers() {
        m.init_layer(l, Init::FanIn, &mut rng);
    }
    m
}

fn batch(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Loss `Σ c·y` for a fixed random cotangent `c`.
fn loss(m: &Mlp, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (m.forward(x.view()).unwrap() * c).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_matches_central_differences(seed in any::<u64>()) {
        // tanh everywhere keeps the map smooth for finite differences
        let m = random_mlp(seed, &[5, 7, 6, 3], &[Activation::Tanh, Activation::Tanh, Activation::Linear]);
        let x = batch(seed, 4, 5);
        let c = batch(seed.wrapping_add(1), 4, 3);
        let cache = m.forward_cached(x.view()).unwrap();
        let mut grads = vec![0.0; m.params.len()];
        let dx = m.backward(&cache, &c, &mut grads).unwrap();

        let h = 1e-6;
        for k in 0..m.params.len() {
            let (mut up, mut dn) = (m.clone(), m.clone());
            up.params[k] += h;
            dn.params[k] -= h;
            let fd = (loss(&up, &x, &c) - loss(&dn, &x, &c)) / (2.0 * h);
            prop_assert!((fd - grads[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grads[k]);
        }
        for ((r, col), g) in dx.indexed_iter() {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[(r, col)] += h;
            dn[(r, col)] -= h;
            let fd = (loss(&m, &up, &c) - loss(&m, &dn, &c)) / (2.0 * h);
            prop_assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn lipschitz_bound_dominates_observed_ratios(seed in any::<u64>()) {
        let m = random_mlp(seed, &[6, 8, 8, 4], &[Activation::Relu, Activation::Relu, Activation::Tanh]);
        let bound = m.lipschitz_bound();
        let a = batch(seed, 16, 6);
        let b = batch(seed.wrapping_mul(3), 16, 6);
        let ya = m.forward(a.view()).unwrap();
        let yb = m.forward(b.view()).unwrap();
        for r in 0..16 {
            let dy = (&ya.row(r) - &yb.row(r)).mapv(|v| v * v).sum().sqrt();
            let dx = (&a.row(r) - &b.row(r)).mapv(|v| v * v).sum().sqrt();
            prop_assert!(dy <= bound * dx + 1e-12);
        }
    }

    #[test]
    fn polyak_is_a_convex_combination(seed in any::<u64>(), rho in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetworkConfig { actor_hidden: vec![4], head_hidden: 3, critic_hidden: vec![5, 4] };
        let src = Critic::new(3, &cfg, &mut rng).unwrap();
        let old = Critic::new(3, &cfg, &mut rng).unwrap();
        let mut tgt = old.clone();
        polyak_update(&mut tgt, &src, rho).unwrap();
        for ((t, o), s) in tgt.flat_params().iter().zip(old.flat_params()).zip(src.flat_params()) {
            prop_assert!((t - (rho * o + (1.0 - rho) * s)).abs() < 1e-15);
        }
    }

    #[test]
    fn normalizer_matches_two_pass_statistics(xs in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 2..60)) {
        let mut n = Normalizer::new(3);
        xs.iter().for_each(|x| n.observe(x));
        let c = xs.len() as f64;
        for d in 0..3 {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / c;
            let var = xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / c;
            prop_assert!((n.mean[d] - mean).abs() < 1e-9);
            prop_assert!((n.std()[d] - var.sqrt().max(1e-2)).abs() < 1e-9);
        }
        for v in n.normalize(&xs[0]) {
            prop_assert!(v.abs() <= 10.0);
        }
    }

    #[test]
    fn actor_heads_always_unpack_to_valid_parameters(seed in any::<u64>(), joints in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetworkConfig { actor_hidden: vec![8], head_hidden: 6, critic_hidden: vec![4, 4] };
        let mut a = Actor::new(ActorKind::Cpg, 5, joints, &cfg, &Modulation::default(), &mut rng).unwrap();
        // push heads into saturation
        for h in a.heads.iter_mut() {
            h.init_layer(1, Init::Uniform(5.0), &mut rng);
        }
        let input: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
        let heads = a.heads_for(&input).unwrap();
        prop_assert!(CpgParams::from_packed(joints, &heads).is_ok());
    }
}

#[test]
fn feed_forward_goals_stay_in_unit_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = NetworkConfig {
        actor_hidden: vec![8],
        head_hidden: 6,
        critic_hidden: vec![4, 4],
    };
    let mut a = Actor::new(ActorKind::FeedForward, 4, 6, &cfg, &Modulation::default(), &mut rng).unwrap();
    a.heads[0].init_layer(0, Init::Uniform(10.0), &mut rng);
    let g = a.joint_goals(&[3.0, -7.0, 1.0, 9.0]).unwrap();
    assert_eq!(g.len(), 6);
    assert!(g.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn adam_reset_forgets_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = NetworkConfig {
        actor_hidden: vec![4],
        head_hidden: 3,
        critic_hidden: vec![5, 4],
    };
    let mut c = Critic::new(3, &cfg, &mut rng).unwrap();
    let mut fresh = c.clone();
    let mut opt = Adam::new(&c, 1e-3, (0.9, 0.999), 0.0);
    let mut fresh_opt = opt.clone();
    let g: Vec<Vec<f64>> = c.blocks().iter().map(|b| vec![0.5; b.params.len()]).collect();
    opt.update(&mut c, &g).unwrap();
    opt.reset();
    fresh.blocks_mut()[0].params.clone_from(&c.blocks()[0].params);
    opt.update(&mut c, &g).unwrap();
    fresh_opt.update(&mut fresh, &g).unwrap();
    assert_eq!(c, fresh);
}
