use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use styledial_core::latent_style::*;
use styledial_core::numerics::{grad_check, ParamStore, Tape, Tensor};
use styledial_core::seq2seq::{EncoderStates, ModelConfig, PrefixPositions, Seq2Seq};

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::new(20);
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 16;
    c.prefix_len = 3;
    c.latent_dim = 4;
    c.latent_hidden = 6;
    c.prefix_hidden = 5;
    c
}

fn states(tape: &mut Tape, rows: &[Vec<f64>], mask: Vec<bool>) -> EncoderStates {
    let s = tape.leaf(Tensor::from_rows(rows).unwrap(), true).unwrap();
    EncoderStates {
        states: s,
        mask,
        truncated: 0,
    }
}

fn kl_oracle(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
}

/// Monte-Carlo estimate of KL(q || p) for a 1-D Gaussian pair, with
/// antithetic pairs to cancel the odd part of the noise.
fn kl_monte_carlo(mq: f64, sq: f64, mp: f64, sp: f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logpdf = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
    let mut acc = 0.0;
    for _ in 0..n {
        let e: f64 = StandardNormal.sample(&mut rng);
        for x in [mq + sq * e, mq - sq * e] {
            acc += logpdf(x, mq, sq) - logpdf(x, mp, sp);
        }
    }
    acc / (2 * n) as f64
}

#[test]
fn pool_examples() {
    let mut tape = Tape::new();
    let one = states(&mut tape, &[vec![1.0, -2.0]], vec![true]);
    let p = pool(&mut tape, &one).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, -2.0]);
    let two = states(&mut tape, &[vec![3.0, 4.0], vec![3.0, 4.0]], vec![true, true]);
    let p = pool(&mut tape, &two).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 4.0]);
    let padded = states(
        &mut tape,
        &[vec![1.0, 2.0], vec![3.0, 6.0], vec![99.0, 99.0]],
        vec![true, true, false],
    );
    let p = pool(&mut tape, &padded).unwrap();
    assert_eq!(tape.value(p).data(), &[2.0, 4.0]);
    let all_pad = states(&mut tape, &[vec![1.0, 2.0]], vec![false]);
    assert!(pool(&mut tape, &all_pad).is_err());
}

#[test]
fn zero_weights_give_softplus_floor() {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let nets = LatentNets::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::vector(vec![0.5; 8])).unwrap();
    let g = nets.prior(&mut tape, &store, h).unwrap();
    let expect = 2f64.ln() + 1e-4;
    assert!((expect - 0.6933).abs() < 1e-4);
    assert!(tape.value(g.mu).data().iter().all(|&m| m == 0.0));
    assert!(tape.value(g.sigma).data().iter().all(|&s| (s - expect).abs() < 1e-15));
    let g = nets.posterior(&mut tape, &store, h, h).unwrap();
    assert!(tape.value(g.sigma).data().iter().all(|&s| (s - expect).abs() < 1e-15));
}

#[test]
fn prior_and_posterior_are_deterministic_and_positive() {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let nets = LatentNets::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1));
    let run = || {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector((0..8).map(|i| i as f64 * 0.3 - 1.0).collect())).unwrap();
        let r = tape.constant(Tensor::vector(vec![0.7; 8])).unwrap();
        let p = nets.prior(&mut tape, &store, h).unwrap();
        let q = nets.posterior(&mut tape, &store, h, r).unwrap();
        (
            tape.value(p.mu).clone(),
            tape.value(p.sigma).clone(),
            tape.value(q.mu).clone(),
            tape.value(q.sigma).clone(),
        )
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.1.data().iter().chain(a.3.data()).all(|&s| s > 0.0));
    let mut tape = Tape::new();
    let wrong = tape.constant(Tensor::vector(vec![0.0; 7])).unwrap();
    assert!(nets.prior(&mut tape, &store, wrong).is_err());
}

#[test]
fn latent_net_gradients_match_central_differences() {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let nets = LatentNets::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2));
    let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    let r: Vec<f64> = (0..8).map(|i| (i as f64 * 0.4).cos()).collect();
    let eps = vec![vec![0.3, -1.1, 0.5, 0.9]];
    let coords: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("prior") || p.name.starts_with("posterior"))
        .flat_map(|(id, p)| (0..p.value.len().min(3)).map(move |k| (id, k)))
        .collect();
    assert!(coords.len() >= 30);
    let report = grad_check(&mut store, &coords, 1e-6, |tape, store| {
        let hv = tape.constant(Tensor::vector(h.clone()))?;
        let rv = tape.constant(Tensor::vector(r.clone()))?;
        let p = nets.prior(tape, store, hv)?;
        let q = nets.posterior(tape, store, hv, rv)?;
        let s = reparameterize_with(tape, q, eps.clone())?;
        let kl = kl_divergence(tape, q, p)?;
        let zz = tape.square(s.z)?;
        let zz = tape.sum(zz)?;
        tape.add(kl, zz)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{:?}", report.worst());
}

#[test]
fn reparameterize_records_noise_and_tiny_sigma_returns_mu() {
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::vector(vec![1.0, -2.0])).unwrap();
    let sigma = tape.constant(Tensor::vector(vec![1e-300, 1e-300])).unwrap();
    let s = reparameterize(&mut tape, Gaussian { mu, sigma }, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(tape.value(s.z).data(), &[1.0, -2.0]);
    assert_eq!(s.eps.len(), 1);
    assert!(s.z_hat.is_none());

    let sigma = tape.constant(Tensor::vector(vec![0.5, 2.0])).unwrap();
    let s = reparameterize(&mut tape, Gaussian { mu, sigma }, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let z = tape.value(s.z).data().to_vec();
    let zh = tape.value(s.z_hat.unwrap()).data().to_vec();
    assert_ne!(z, zh);
    for (k, (m, sd)) in [(1.0, 0.5), (-2.0, 2.0)].into_iter().enumerate() {
        assert_eq!(z[k], m + sd * s.eps[0][k]);
        assert_eq!(zh[k], m + sd * s.eps[1][k]);
        assert!((z[k] - m).abs() < 6.0 * sd && (zh[k] - m).abs() < 6.0 * sd);
    }
    assert!(reparameterize(&mut tape, Gaussian { mu, sigma }, 3, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    let bad = tape.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
    assert!(reparameterize(&mut tape, Gaussian { mu, sigma: bad }, 1, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
}

#[test]
fn reparameterize_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let mut tape = Tape::inference();
    let mu = tape.constant(Tensor::vector(vec![1.0])).unwrap();
    let sigma = tape.constant(Tensor::vector(vec![2.0])).unwrap();
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let mut t = Tape::inference();
        let m = t.constant(tape.value(mu).clone()).unwrap();
        let s = t.constant(tape.value(sigma).clone()).unwrap();
        let d = reparameterize(&mut t, Gaussian { mu: m, sigma: s }, 1, &mut rng).unwrap();
        let z = t.value(d.z).item();
        s1 += z;
        s2 += z * z;
    }
    let mean = s1 / n as f64;
    let std = (s2 / n as f64 - mean * mean).sqrt();
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!((std - 2.0).abs() < 0.02, "{std}");
}

#[test]
fn kl_examples_and_monte_carlo() {
    assert!(kl_gaussian(&[0.3], &[1.7], &[0.3], &[1.7]).abs() < 1e-15);
    let kl = kl_gaussian(&[1.0], &[1.0], &[0.0], &[1.0]);
    assert!((kl - 0.5).abs() < 1e-15);
    let mc = kl_monte_carlo(1.0, 1.0, 0.0, 1.0, 1_000_000, 1);
    assert!((mc - 0.5).abs() < 0.01, "{mc}");

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10 {
        let mq = rng.random_range(-1.0..1.0);
        let mp = rng.random_range(-1.0..1.0);
        let sq = rng.random_range(0.5..1.5);
        let sp = rng.random_range(0.8..1.6);
        let closed = kl_gaussian(&[mq], &[sq], &[mp], &[sp]);
        assert!((closed - kl_oracle(mq, sq, mp, sp)).abs() < 1e-12);
        let mc = kl_monte_carlo(mq, sq, mp, sp, 400_000, trial);
        assert!(closed >= 0.0);
        // Relative 1% with an absolute floor for near-identical pairs.
        assert!((mc - closed).abs() <= 0.01 * closed.max(0.1), "{mc} vs {closed}");
    }
}

#[test]
fn tape_kl_matches_closed_form() {
    let mut tape = Tape::new();
    let v = |t: &mut Tape, x: Vec<f64>| t.constant(Tensor::vector(x)).unwrap();
    let q = Gaussian {
        mu: v(&mut tape, vec![0.1, -0.4, 2.0]),
        sigma: v(&mut tape, vec![0.5, 1.0, 1.5]),
    };
    let p = Gaussian {
        mu: v(&mut tape, vec![0.0, 0.3, 1.0]),
        sigma: v(&mut tape, vec![1.0, 0.7, 2.0]),
    };
    let k = kl_divergence(&mut tape, q, p).unwrap();
    let oracle: f64 = [(0.1, 0.5, 0.0, 1.0), (-0.4, 1.0, 0.3, 0.7), (2.0, 1.5, 1.0, 2.0)]
        .iter()
        .map(|&(a, b, c, d)| kl_oracle(a, b, c, d))
        .sum();
    assert!((tape.value(k).item() - oracle).abs() < 1e-12);
}

#[test]
fn fuse_properties() {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let nets = LatentNets::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3));
    // Give the zero-initialized projection some weight.
    let fid = store.id("fuse.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.set(fid, Tensor::new(&[4, 8], w).unwrap()).unwrap();
    let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..8).map(|j| (i * 8 + j) as f64 * 0.1).collect()).collect();
    let mut tape = Tape::new();
    let h = states(&mut tape, &rows, vec![true, true, false]);
    let zero = tape.constant(Tensor::vector(vec![0.0; 4])).unwrap();
    let f = nets.fuse(&mut tape, &store, zero, &h).unwrap();
    assert_eq!(tape.value(f), tape.value(h.states));
    let z = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.1])).unwrap();
    let f = nets.fuse(&mut tape, &store, z, &h).unwrap();
    let fv = tape.value(f).clone();
    let hv = tape.value(h.states).clone();
    let delta = |i: usize| -> Vec<f64> { (0..8).map(|j| fv.at(i, j) - hv.at(i, j)).collect() };
    let d0 = delta(0);
    assert!(d0.iter().any(|x| x.abs() > 1e-6));
    for (a, b) in d0.iter().zip(delta(1)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(delta(2).iter().all(|&x| x == 0.0));
}

#[test]
fn fuse_gradient_wrt_z_matches_central_differences() {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let nets = LatentNets::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3));
    let fid = store.id("fuse.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.set(fid, Tensor::new(&[4, 8], w).unwrap()).unwrap();
    let zid = store.add("z", Tensor::vector(vec![0.2, -0.3, 0.8, 0.1]));
    let coords: Vec<_> = (0..4).map(|k| (zid, k)).collect();
    let rows: Vec<Vec<f64>> = (0..2).map(|i| (0..8).map(|j| ((i + j) as f64).sin()).collect()).collect();
    let report = grad_check(&mut store, &coords, 1e-6, |tape, store| {
        let h = EncoderStates {
            states: tape.constant(Tensor::from_rows(&rows)?)?,
            mask: vec![true, true],
            truncated: 0,
        };
        let z = tape.param(store, zid);
        let f = nets.fuse(tape, store, z, &h)?;
        let t = tape.tanh(f)?;
        let sq = tape.square(t)?;
        tape.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{:?}", report.worst());
}

fn build_with_prefix() -> (ModelConfig, ParamStore, Seq2Seq, LatentNets) {
    let mut cfg = small_config();
    cfg.prefix_positions = PrefixPositions::ALL;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = Seq2Seq::build(&cfg, &mut store, &mut rng).unwrap();
    let nets = LatentNets::build(&cfg, &mut store, &mut rng);
    (cfg, store, seq, nets)
}

#[test]
fn style_prefix_from_zero_latent_is_base() {
    let (_, store, seq, nets) = build_with_prefix();
    let mut tape = Tape::new();
    let base = seq.base_prefixes(&mut tape, &store);
    assert_eq!(base.len(), 3);
    let z = tape.constant(Tensor::vector(vec![0.0; 4])).unwrap();
    let out = nets.style_prefix_from_z(&mut tape, &store, z, &base).unwrap();
    for (site, layer, p) in out.iter() {
        let b = base.get(site, layer).unwrap();
        assert_eq!(tape.value(p.key), tape.value(b.key));
        assert_eq!(tape.value(p.value), tape.value(b.value));
    }
    // Zero-initialized second layer also ignores a nonzero z.
    let z = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    let out = nets.style_prefix_from_z(&mut tape, &store, z, &base).unwrap();
    for (site, layer, p) in out.iter() {
        assert_eq!(tape.value(p.key), tape.value(base.get(site, layer).unwrap().key));
    }
}

#[test]
fn distinct_latents_give_distinct_prefixes_and_gradients_reach_z() {
    let (cfg, mut store, seq, nets) = build_with_prefix();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("prefix_mlp") && p.name.ends_with(".2.w"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.set(id, Tensor::new(&shape, v).unwrap()).unwrap();
    }
    let mut tape = Tape::new();
    let base = seq.base_prefixes(&mut tape, &store);
    let za = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
    let zb = tape.constant(Tensor::vector(vec![-0.4, 0.2, 0.0, 0.9])).unwrap();
    let pa = nets.style_prefix_from_z(&mut tape, &store, za, &base).unwrap();
    let pb = nets.style_prefix_from_z(&mut tape, &store, zb, &base).unwrap();
    for (site, layer, p) in pa.iter() {
        assert_ne!(tape.value(p.key), tape.value(pb.get(site, layer).unwrap().key));
        assert_eq!(tape.value(p.key).shape(), &[cfg.n_heads, cfg.prefix_len, cfg.d_head()]);
    }

    // Decoder loss through the prefix path only (memory is not fused).
    let mut tape = Tape::new();
    let base = seq.base_prefixes(&mut tape, &store);
    let z = tape.leaf(Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]), true).unwrap();
    let prefixes = nets.style_prefix_from_z(&mut tape, &store, z, &base).unwrap();
    let enc = seq.encode(&mut tape, &store, &[3, 4, 5], &prefixes, None).unwrap();
    let logits = seq
        .decode(&mut tape, &store, enc.states, &enc.mask, &[1, 6, 7], &prefixes, None)
        .unwrap();
    let loss = tape.cross_entropy(logits, &[6, 7, 2], 0).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(z).unwrap();
    assert!(g.iter().any(|x| x.abs() > 1e-8));
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_only_when_equal(
        mq in proptest::collection::vec(-3.0f64..3.0, 1..6),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = mq.len();
        let sq: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        let mp: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sp: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        prop_assert!(kl_gaussian(&mq, &sq, &mp, &sp) >= -1e-12);
        prop_assert!(kl_gaussian(&mq, &sq, &mq, &sq).abs() <= 1e-12);
    }

    #[test]
    fn pool_ignores_padding_extension(extra in 0usize..5, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut rows = real.clone();
        let mut mask = vec![true; 3];
        for _ in 0..extra {
            rows.push((0..4).map(|_| rng.random_range(-9.0..9.0)).collect());
            mask.push(false);
        }
        let mut tape = Tape::new();
        let a = states(&mut tape, &real, vec![true; 3]);
        let b = states(&mut tape, &rows, mask);
        let pa = pool(&mut tape, &a).unwrap();
        let pb = pool(&mut tape, &b).unwrap();
        prop_assert_eq!(tape.value(pa), tape.value(pb));
    }
}
