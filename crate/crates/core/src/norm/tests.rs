use super::*;
use crate::gradcheck::finite_diff_check;
use crate::tensor::{conv2d, ConvParams, FilterBank};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: Shape4, data: &[f64]) -> Tensor4 {
    Tensor4::new(shape, data.to_vec()).unwrap()
}

fn random(shape: Shape4, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-2.0..2.0))
}

const KINDS: [NormalizerKind; 4] = [NormalizerKind::Bn, NormalizerKind::In, NormalizerKind::Ln, NormalizerKind::Gn { groups: 2 }];

#[test]
fn bn_and_in_moments_by_direct_summation() {
    let x = t(Shape4::new(2, 1, 1, 2), &[1.0, 3.0, 5.0, 7.0]);
    let bn = compute_moments(NormalizerKind::Bn, &x, ShardConfig::single(2)).unwrap();
    assert_eq!(bn.means, vec![4.0]);
    assert_eq!(bn.vars, vec![5.0]);
    let inn = compute_moments(NormalizerKind::In, &x, ShardConfig::single(2)).unwrap();
    assert_eq!(inn.means, vec![2.0, 6.0]);
    assert_eq!(inn.vars, vec![1.0, 1.0]);
}

#[test]
fn group_counts_follow_axis_scheme() {
    let x = random(Shape4::new(4, 6, 2, 3), 1);
    let count = |k| compute_moments(k, &x, ShardConfig::single(4)).unwrap().group_count();
    assert_eq!(count(NormalizerKind::Bn), 6);
    assert_eq!(count(NormalizerKind::In), 24);
    assert_eq!(count(NormalizerKind::Ln), 4);
    assert_eq!(count(NormalizerKind::Gn { groups: 3 }), 12);
    let sharded = compute_moments(NormalizerKind::Bn, &x, ShardConfig::new(2, 2).unwrap()).unwrap();
    assert_eq!(sharded.group_count(), 12);
    assert!(compute_moments(NormalizerKind::Gn { groups: 4 }, &x, ShardConfig::single(4)).is_err());
    assert!(compute_moments(NormalizerKind::Bn, &x, ShardConfig::new(3, 1).unwrap()).is_err());
    assert!(compute_moments(NormalizerKind::Wn, &x, ShardConfig::single(4)).is_err());
}

#[test]
fn constant_input_has_zero_variance() {
    let x = Tensor4::filled(Shape4::new(3, 4, 2, 2), 0.7);
    for kind in KINDS {
        let m = compute_moments(kind, &x, ShardConfig::single(3)).unwrap();
        for (mu, var) in m.means.iter().zip(&m.vars) {
            assert!((mu - 0.7).abs() < 1e-15);
            assert!(*var >= 0.0 && *var < 1e-30);
        }
        let y = normalize(&x, &m, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }
}

#[test]
fn normalize_worked_example() {
    let x = t(Shape4::new(1, 1, 1, 2), &[0.0, 2.0]);
    let m = compute_moments(NormalizerKind::In, &x, ShardConfig::single(1)).unwrap();
    assert_eq!((m.means[0], m.vars[0]), (1.0, 1.0));
    assert_eq!(normalize(&x, &m, 0.0).unwrap().data(), &[-1.0, 1.0]);
    assert!(matches!(normalize(&x, &m, -1.0), Err(Error::Config(_))));
}

#[test]
fn normalized_groups_are_standardized() {
    let x = random(Shape4::new(2, 4, 3, 3), 2);
    let eps = 1e-5;
    for kind in KINDS {
        let m = compute_moments(kind, &x, ShardConfig::single(2)).unwrap();
        let y = normalize(&x, &m, eps).unwrap();
        let out = compute_moments(kind, &y, ShardConfig::single(2)).unwrap();
        for g in 0..m.group_count() {
            assert!(out.means[g].abs() < 1e-10);
            let expect = m.vars[g] / (m.vars[g] + eps);
            assert!((out.vars[g] - expect).abs() < 1e-10, "{kind}");
        }
    }
}

#[test]
fn affine_examples() {
    let xhat = t(Shape4::new(1, 1, 1, 2), &[-1.0, 1.0]);
    assert_eq!(affine_transform(&xhat, &AffineParams::identity(1)).unwrap(), xhat);
    let p = AffineParams { gamma: vec![2.0], beta: vec![1.0] };
    assert_eq!(affine_transform(&xhat, &p).unwrap().data(), &[-1.0, 3.0]);
    assert!(affine_transform(&xhat, &AffineParams::identity(2)).is_err());
}

#[test]
fn affine_gamma_gradient_matches_finite_differences() {
    let xhat = random(Shape4::new(2, 3, 2, 2), 3);
    let dy = random(xhat.shape(), 4);
    let beta = vec![0.1, -0.2, 0.3];
    let gamma = vec![1.5, 0.5, -1.0];
    let (dgamma, _) = affine_param_grads(&xhat, &dy).unwrap();
    let loss = |g: &[f64]| {
        let p = AffineParams { gamma: g.to_vec(), beta: beta.clone() };
        let y = affine_transform(&xhat, &p).unwrap();
        y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let r = finite_diff_check(loss, &gamma, &dgamma, 1e-8).unwrap();
    assert!(r.passed(), "{r:?}");
}

/// Loss `sum(r * affine(normalize(x)))` with parameters packed as `[x, gamma, beta]`.
fn packed_loss(kind: NormalizerKind, shape: Shape4, shard: ShardConfig, r: &Tensor4) -> impl Fn(&[f64]) -> f64 + '_ {
    move |p: &[f64]| {
        let len = shape.len();
        let x = Tensor4::new(shape, p[..len].to_vec()).unwrap();
        let affine = AffineParams { gamma: p[len..len + shape.c].to_vec(), beta: p[len + shape.c..].to_vec() };
        let (y, _) = norm_forward(kind, &x, shard, &affine, DEFAULT_EPS).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }
}

#[test]
fn norm_backward_matches_finite_differences() {
    let shape = Shape4::new(2, 4, 3, 3);
    let x = random(shape, 5);
    let r = random(shape, 6);
    let affine = AffineParams { gamma: vec![1.2, 0.8, -0.5, 1.0], beta: vec![0.1, 0.0, -0.3, 0.2] };
    for (kind, shard) in [
        (NormalizerKind::Bn, ShardConfig::single(2)),
        (NormalizerKind::Bn, ShardConfig::new(2, 1).unwrap()),
        (NormalizerKind::In, ShardConfig::single(2)),
        (NormalizerKind::Ln, ShardConfig::single(2)),
        (NormalizerKind::Gn { groups: 2 }, ShardConfig::single(2)),
    ] {
        let (_, cache) = norm_forward(kind, &x, shard, &affine, DEFAULT_EPS).unwrap();
        let g = norm_backward(&cache, &r).unwrap();
        let mut params = x.data().to_vec();
        params.extend(&affine.gamma);
        params.extend(&affine.beta);
        let mut analytic = g.dx.data().to_vec();
        analytic.extend(&g.dgamma);
        analytic.extend(&g.dbeta);
        let rep = finite_diff_check(packed_loss(kind, shape, shard, &r), &params, &analytic, 1e-5).unwrap();
        assert!(rep.passed(), "{kind} {shard}: {rep:?}");
    }
}

#[test]
fn input_gradient_sums_to_zero_per_group() {
    let x = random(Shape4::new(2, 4, 3, 3), 7);
    let dy = random(x.shape(), 8);
    let affine = AffineParams { gamma: vec![1.2, 0.8, -0.5, 1.0], beta: vec![0.0; 4] };
    for kind in KINDS {
        let (_, cache) = norm_forward(kind, &x, ShardConfig::single(2), &affine, 1e-12).unwrap();
        let g = norm_backward(&cache, &dy).unwrap();
        let mut sums = vec![0.0; cache.moments.group_count()];
        for (i, &grp) in cache.moments.grouping.iter().enumerate() {
            sums[grp] += g.dx.plane(i / 4, i % 4).iter().sum::<f64>();
        }
        assert!(sums.iter().all(|s| s.abs() < 1e-9), "{kind}: {sums:?}");
    }
}

#[test]
fn zero_cotangent_and_stale_cache() {
    let x = random(Shape4::new(2, 2, 2, 2), 9);
    let (_, cache) = norm_forward(NormalizerKind::Ln, &x, ShardConfig::single(2), &AffineParams::identity(2), 1e-5).unwrap();
    let g = norm_backward(&cache, &Tensor4::zeros(x.shape())).unwrap();
    assert!(g.dx.data().iter().chain(&g.dgamma).chain(&g.dbeta).all(|&v| v == 0.0));
    let stale = Tensor4::zeros(Shape4::new(1, 2, 2, 2));
    assert!(matches!(norm_backward(&cache, &stale), Err(Error::Usage(_))));
}

#[test]
fn weight_normalization_examples() {
    let w = FilterBank::new([1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
    let n = wn_normalize(&w, 1.0).unwrap();
    assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
    let unit = FilterBank::new([2, 1, 1, 2], vec![1.0, 0.0, 0.6, 0.8]).unwrap();
    let same = wn_normalize(&unit, 1.0).unwrap();
    for (a, b) in same.data().iter().zip(unit.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    let scaled = wn_normalize(&w, 2.5).unwrap();
    assert!((scaled.filter(0).iter().map(|v| v * v).sum::<f64>().sqrt() - 2.5).abs() < 1e-14);
    let zero = FilterBank::zeros([1, 1, 1, 2]);
    assert!(matches!(wn_normalize(&zero, 1.0), Err(Error::Numeric(_))));
}

/// With whitened patches (zero mean, identity covariance) the IN-normalized
/// response of a 1x1 filter equals the WN-normalized response.
#[test]
fn instance_norm_reduces_to_weight_norm_on_whitened_patches() {
    let d = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scale = (d as f64).sqrt();
    // Patches +-sqrt(d) e_i, one per spatial position.
    let positions = 2 * d;
    let x = Tensor4::from_fn(Shape4::new(1, d, 1, positions), |_, c, _, p| {
        let (i, sign) = (p / 2, if p % 2 == 0 { 1.0 } else { -1.0 });
        if i == c {
            sign * scale
        } else {
            0.0
        }
    });
    let w = FilterBank::new([1, d, 1, 1], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let h = conv2d(&x, &w, ConvParams::default()).unwrap();
    let m = compute_moments(NormalizerKind::In, &h, ShardConfig::single(1)).unwrap();
    let h_in = normalize(&h, &m, 0.0).unwrap();
    let h_wn = conv2d(&x, &wn_normalize(&w, 1.0).unwrap(), ConvParams::default()).unwrap();
    for (a, b) in h_in.data().iter().zip(h_wn.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn batch_average_and_moving_statistics() {
    let mut avg = BnRunningStats::batch_average(1);
    for mean in [1.0, 3.0] {
        let x = Tensor4::filled(Shape4::new(2, 1, 1, 1), mean);
        avg.observe(&compute_moments(NormalizerKind::Bn, &x, ShardConfig::single(2)).unwrap()).unwrap();
    }
    avg.finalize().unwrap();
    assert_eq!(avg.means, vec![2.0]);
    assert_eq!(avg.vars, vec![0.0]);
    let x = Tensor4::filled(Shape4::new(2, 1, 1, 1), 1.0);
    let m = compute_moments(NormalizerKind::Bn, &x, ShardConfig::single(2)).unwrap();
    assert!(matches!(avg.observe(&m), Err(Error::Usage(_))));

    let mut empty = BnRunningStats::batch_average(1);
    assert!(matches!(empty.finalize(), Err(Error::Config(_))));

    let mut moving = BnRunningStats::moving(1, 0.9).unwrap();
    moving.observe(&m).unwrap();
    assert!((moving.means[0] - 0.1).abs() < 1e-15);
    assert!(BnRunningStats::moving(1, 1.0).is_err());
}

#[test]
fn equivalences_between_normalizers() {
    let x = random(Shape4::new(3, 4, 3, 2), 11);
    let s = ShardConfig::single(3);
    let eps = DEFAULT_EPS;
    let run = |k: NormalizerKind, x: &Tensor4, s: ShardConfig| normalize(x, &compute_moments(k, x, s).unwrap(), eps).unwrap();
    let close = |a: &Tensor4, b: &Tensor4| a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() <= 1e-12);
    assert!(close(&run(NormalizerKind::Gn { groups: 1 }, &x, s), &run(NormalizerKind::Ln, &x, s)));
    assert!(close(&run(NormalizerKind::Gn { groups: 4 }, &x, s), &run(NormalizerKind::In, &x, s)));
    let one = x.slice_samples(1, 1);
    let s1 = ShardConfig::single(1);
    assert!(close(&run(NormalizerKind::Bn, &one, s1), &run(NormalizerKind::In, &one, s1)));
}

#[test]
fn shard_moments_only_see_their_samples() {
    let x = t(Shape4::new(4, 1, 1, 1), &[0.0, 2.0, 4.0, 6.0]);
    let m = compute_moments(NormalizerKind::Bn, &x, ShardConfig::new(2, 2).unwrap()).unwrap();
    assert_eq!(m.means, vec![1.0, 5.0]);
    assert_eq!(m.vars, vec![1.0, 1.0]);
    let global = compute_moments(NormalizerKind::Bn, &x, ShardConfig::single(4)).unwrap();
    assert_eq!((global.means[0], global.vars[0]), (3.0, 5.0));
    // Swapping across shards changes the shard moments; within a shard it does not.
    let within = t(Shape4::new(4, 1, 1, 1), &[2.0, 0.0, 6.0, 4.0]);
    let across = t(Shape4::new(4, 1, 1, 1), &[0.0, 4.0, 2.0, 6.0]);
    let sc = ShardConfig::new(2, 2).unwrap();
    assert_eq!(compute_moments(NormalizerKind::Bn, &within, sc).unwrap().means, m.means);
    assert_ne!(compute_moments(NormalizerKind::Bn, &across, sc).unwrap().means, m.means);
}

fn tensor_strategy() -> impl Strategy<Value = Tensor4> {
    (1usize..4, 1usize..4, 1usize..4, 2usize..4).prop_flat_map(|(n, g, h, w)| {
        let shape = Shape4::new(n, 2 * g, h, w);
        proptest::collection::vec(-3.0f64..3.0, shape.len()).prop_map(move |d| Tensor4::new(shape, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_moments_compose_from_instance_moments(x in tensor_strategy()) {
        let s = ShardConfig::single(x.shape().n);
        let inn = compute_moments(NormalizerKind::In, &x, s).unwrap();
        let ln = compute_moments(NormalizerKind::Ln, &x, s).unwrap();
        let c = x.shape().c;
        for n in 0..x.shape().n {
            let mu: f64 = (0..c).map(|ch| inn.means[n * c + ch]).sum::<f64>() / c as f64;
            let second: f64 = (0..c).map(|ch| inn.vars[n * c + ch] + inn.means[n * c + ch].powi(2)).sum::<f64>() / c as f64;
            prop_assert!((ln.means[n] - mu).abs() < 1e-10);
            prop_assert!((ln.vars[n] - (second - mu * mu)).abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_output_is_shift_invariant(x in tensor_strategy(), shift in -50.0f64..50.0) {
        let s = ShardConfig::single(x.shape().n);
        let moved = x.map(|v| v + shift);
        for kind in KINDS {
            let a = normalize(&x, &compute_moments(kind, &x, s).unwrap(), DEFAULT_EPS).unwrap();
            let b = normalize(&moved, &compute_moments(kind, &moved, s).unwrap(), DEFAULT_EPS).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalized_output_is_scale_equivariant(x in tensor_strategy(), scale in 0.5f64..20.0) {
        let s = ShardConfig::single(x.shape().n);
        let eps = DEFAULT_EPS;
        let scaled = x.map(|v| v * scale);
        for kind in KINDS {
            let m = compute_moments(kind, &x, s).unwrap();
            let a = normalize(&x, &m, eps).unwrap();
            let b = normalize(&scaled, &compute_moments(kind, &scaled, s).unwrap(), eps).unwrap();
            for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
                let var = m.vars[m.grouping[i / x.shape().plane()]];
                // |xhat| * |1 - sqrt((v + e) / (v + e / a^2))| <= |xhat| * e * max(1, 1/a^2) / v
                let bound = p.abs() * eps * scale.powi(-2).max(1.0) / var.max(1e-300) + 1e-12;
                prop_assert!((p - q).abs() <= bound);
            }
            let exact_a = normalize(&x, &m, 0.0).unwrap();
            let exact_b = normalize(&scaled, &compute_moments(kind, &scaled, s).unwrap(), 0.0).unwrap();
            for (p, q) in exact_a.data().iter().zip(exact_b.data()) {
                if p.is_finite() {
                    prop_assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }
}
