use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styledial_core::contrast::*;
use styledial_core::numerics::{grad_check, ParamStore, Tape, Tensor};
use styledial_core::Error;

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

fn random_pool(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn on_tape(tape: &mut Tape, pool: &[Vec<f64>]) -> Vec<styledial_core::numerics::Var> {
    pool.iter()
        .map(|v| tape.leaf(Tensor::vector(v.clone()), true).unwrap())
        .collect()
}

#[test]
fn cosine_distance_examples() {
    let v = [0.3, -1.2, 2.0];
    assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-15);
    assert!((cosine_distance(&[1.0, 0.0], &[0.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((cosine_distance(&v, &neg).unwrap() - 2.0).abs() < 1e-15);
    assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector)));
}

/// Unit vectors in the plane whose pairwise distances hit chosen values.
fn planar(angle: f64) -> Vec<f64> {
    vec![angle.cos(), angle.sin()]
}

#[test]
fn triplet_hinge_examples() {
    // d = 1 - cos(theta): choose angles giving d(a,p) and d(a,n) exactly.
    let ang = |d: f64| (1.0f64 - d).acos();
    let inactive = vec![planar(0.0), planar(ang(0.1)), planar(-ang(0.9))];
    // A one-triplet batch (anchor 0, positive 1, negative 2).
    let one = |pool: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let vars = on_tape(&mut tape, pool);
        let b = build_supervised_triplets_capped(&[0, 0, 1], 1);
        let l = triplet_loss(&mut tape, &vars, &b, 0.3).unwrap();
        tape.value(l).item()
    };
    assert!(one(&inactive).abs() < 1e-12);
    let active = vec![planar(0.0), planar(ang(0.5)), planar(-ang(0.2))];
    assert!((one(&active) - 0.6).abs() < 1e-12);
}

#[test]
fn supervised_enumeration() {
    let b = build_supervised_triplets(&["tod", "tod", "odd"]);
    let got: Vec<_> = b.iter().collect();
    assert_eq!(got, vec![(0, 1, 2), (1, 0, 2)]);
    assert_eq!(b.provenance, Provenance::Supervised);
    assert!(build_supervised_triplets(&["tod"; 5]).is_empty());
}

#[test]
fn supervised_count_matches_brute_force() {
    for n_a in 0..6usize {
        for n_b in 0..6usize {
            let labels: Vec<u8> = (0..n_a).map(|_| 0).chain((0..n_b).map(|_| 1)).collect();
            let mut brute = 0;
            for a in 0..labels.len() {
                for p in 0..labels.len() {
                    for q in 0..labels.len() {
                        if a != p && labels[a] == labels[p] && labels[q] != labels[a] {
                            brute += 1;
                        }
                    }
                }
            }
            assert_eq!(build_supervised_triplets(&labels).len(), brute.min(SUPERVISED_CAP));
        }
    }
    // 4 + 4: each anchor has 3 positives and 4 negatives.
    assert_eq!(build_supervised_triplets(&[0, 0, 0, 0, 1, 1, 1, 1]).len(), 8 * 3 * 4);
    let big: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
    let capped = build_supervised_triplets(&big);
    assert_eq!(capped.len(), SUPERVISED_CAP);
    assert_eq!(capped.iter().next(), Some((0, 2, 1)));
}

#[test]
fn self_supervised_enumeration() {
    let b = build_self_supervised_triplets(2);
    let got: Vec<_> = b.iter().collect();
    // pool: z1 -> 0, z2 -> 1, z1' -> 2, z2' -> 3
    assert_eq!(got, vec![(0, 2, 1), (0, 2, 3), (1, 3, 0), (1, 3, 2)]);
    assert!(build_self_supervised_triplets(1).is_empty());
    for n in 0..=8usize {
        assert_eq!(build_self_supervised_triplets(n).len(), 2 * n * n.saturating_sub(1));
    }
}

#[test]
fn triplet_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let n = 3 + trial % 6;
        let pool = random_pool(&mut rng, 2 * n, 5);
        let labels: Vec<u8> = (0..2 * n).map(|_| rng.random_range(0..2)).collect();
        let sup = build_supervised_triplets(&labels);
        let ssl = build_self_supervised_triplets(n);
        for (b, margin) in [(sup, 0.3), (ssl, 0.7)] {
            if b.is_empty() {
                continue;
            }
            let mut oracle = 0.0;
            for (a, p, q) in b.iter() {
                oracle += (margin + cos_dist(&pool[a], &pool[p]) - cos_dist(&pool[a], &pool[q])).max(0.0);
            }
            oracle /= b.len() as f64;
            let mut tape = Tape::new();
            let vars = on_tape(&mut tape, &pool);
            let l = triplet_loss(&mut tape, &vars, &b, margin).unwrap();
            let got = tape.value(l).item();
            assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0), "{got} vs {oracle}");
            let plain = triplet_loss_values(&pool, &b, margin).unwrap();
            assert!((plain - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }
    }
}

#[test]
fn info_nce_examples() {
    // Identical pairs, orthogonal across indices, tau = 1.
    let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let v = info_nce_values(&z, &z, 1.0).unwrap();
    let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((v - expect).abs() < 1e-12);
    assert!((expect - 0.3133).abs() < 1e-4);
    // Uniform similarities give log B.
    let same = vec![vec![1.0, 1.0]; 3];
    assert!((info_nce_values(&same, &same, 0.5).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert!(matches!(info_nce_values(&z, &z, 0.0), Err(Error::InvalidParameter(_))));
    assert!(matches!(info_nce_values(&z[..1], &z[..1], 1.0), Err(Error::EmptyBatch(_))));
}

#[test]
fn info_nce_decreases_with_positive_similarity() {
    let z = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let mut last = f64::INFINITY;
    for k in 0..6 {
        let t = 1.0 - k as f64 / 5.0;
        let z_hat = vec![vec![1.0 - t, t, 0.3], vec![0.0, 1.0, 0.3]];
        let v = info_nce_values(&z, &z_hat, 0.5).unwrap();
        assert!(v < last);
        last = v;
    }
}

#[test]
fn info_nce_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &tau in &TEMPERATURE_GRID {
        let z = random_pool(&mut rng, 6, 4);
        let zh = random_pool(&mut rng, 6, 4);
        let mut oracle = 0.0;
        for i in 0..6 {
            let denom: f64 = (0..6).map(|j| ((1.0 - cos_dist(&z[i], &zh[j])) / tau).exp()).sum();
            oracle -= (((1.0 - cos_dist(&z[i], &zh[i])) / tau).exp() / denom).ln();
        }
        oracle /= 6.0;
        let mut tape = Tape::new();
        let a = on_tape(&mut tape, &z);
        let b = on_tape(&mut tape, &zh);
        let l = info_nce_loss(&mut tape, &a, &b, tau).unwrap();
        assert!((tape.value(l).item() - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
    }
}

#[test]
fn empty_batch_is_explicit() {
    let b = build_supervised_triplets(&[1, 1]);
    assert!(matches!(triplet_loss_values(&[], &b, 0.3), Err(Error::EmptyBatch(_))));
    let mut tape = Tape::new();
    assert!(matches!(triplet_loss(&mut tape, &[], &b, 0.3), Err(Error::EmptyBatch(_))));
}

#[test]
fn triplet_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 6;
    let pool = random_pool(&mut rng, n, 4);
    let labels = [0, 0, 0, 1, 1, 1];
    let batch = build_supervised_triplets(&labels);
    // Keep away from hinge kinks.
    for (a, p, q) in batch.iter() {
        let s = 0.3 + cos_dist(&pool[a], &pool[p]) - cos_dist(&pool[a], &pool[q]);
        assert!(s.abs() > 1e-3);
    }
    let mut store = ParamStore::new();
    let ids: Vec<_> = pool
        .iter()
        .enumerate()
        .map(|(i, v)| store.add(&format!("z{i}"), Tensor::vector(v.clone())))
        .collect();
    let coords: Vec<_> = ids.iter().flat_map(|&id| (0..4).map(move |k| (id, k))).collect();
    let report = grad_check(&mut store, &coords, 1e-6, |tape, store| {
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect();
        triplet_loss(tape, &vars, &batch, 0.3)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{:?}", report.worst());
}

proptest! {
    #[test]
    fn triplet_loss_is_scale_invariant(
        seed in 0u64..1000,
        c in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = random_pool(&mut rng, 8, 3);
        let scaled: Vec<Vec<f64>> = pool.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        let b = build_self_supervised_triplets(4);
        let l1 = triplet_loss_values(&pool, &b, 0.3).unwrap();
        let l2 = triplet_loss_values(&scaled, &b, 0.3).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn hinge_inactive_gives_exact_zero(seed in 0u64..1000) {
        // Two tight antipodal clusters: every negative is far beyond its positive.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            pool.push(vec![sign * 10.0 + rng.random_range(-0.1..0.1), sign * 10.0 + rng.random_range(-0.1..0.1)]);
            labels.push(i % 2);
        }
        let b = build_supervised_triplets(&labels);
        prop_assert_eq!(triplet_loss_values(&pool, &b, 0.3).unwrap(), 0.0);
        let mut tape = Tape::new();
        let vars = on_tape(&mut tape, &pool);
        let l = triplet_loss(&mut tape, &vars, &b, 0.3).unwrap();
        prop_assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn builders_are_deterministic(labels in proptest::collection::vec(0u8..3, 0..12)) {
        prop_assert_eq!(build_supervised_triplets(&labels), build_supervised_triplets(&labels));
        let b = build_supervised_triplets(&labels);
        for (a, p, q) in b.iter() {
            prop_assert!(a != p && labels[a] == labels[p] && labels[a] != labels[q]);
        }
    }
}

#[test]
fn grids_are_exposed() {
    assert_eq!(MARGIN_GRID, [0.1, 0.3, 0.5, 0.7]);
    assert_eq!(TEMPERATURE_GRID, [0.05, 0.1, 0.5, 1.0]);
    assert_eq!(DEFAULT_MARGIN, 0.3);
}
