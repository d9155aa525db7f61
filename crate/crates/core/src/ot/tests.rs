use proptest::prelude::*;

use super::*;
use crate::rng::Rng;

fn line(xs: &[f64]) -> PointSet {
    PointSet::new(xs.to_vec(), xs.len(), 1, Domain::Other).unwrap()
}

fn random_set(rng: &mut Rng, n: usize, d: usize) -> PointSet {
    PointSet::new((0..n * d).map(|_| rng.normal()).collect(), n, d, Domain::Other).unwrap()
}

/// Exhaustive `Σ_{ijkl}` straight from the definition, with distances
/// recomputed from coordinates (no [`DistanceMatrix`] involved).
fn gw_energy_oracle(c: &[f64], x: &[f64], gamma: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..c.len() {
        for j in 0..x.len() {
            for k in 0..c.len() {
                for l in 0..x.len() {
                    let diff = (c[i] - c[k]).abs() - (x[j] - x[l]).abs();
                    s += diff * diff * gamma[i][j] * gamma[k][l];
                }
            }
        }
    }
    s
}

/// O(n²) evaluation of a sorted matching, for the closed form in `matched_cost`.
fn matching_oracle(a: &[f64], b: &[f64], descending: bool) -> f64 {
    let n = a.len();
    let bb: Vec<f64> = if descending { b.iter().rev().copied().collect() } else { b.to_vec() };
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..n {
            let diff = (a[i] - a[k]).abs() - (bb[i] - bb[k]).abs();
            s += diff * diff;
        }
    }
    s / (n * n) as f64
}

#[test]
fn pairwise_dist_examples() {
    let single = pairwise_dist(&line(&[3.0]));
    assert_eq!(single.values(), &[0.0]);
    let two = pairwise_dist(&line(&[0.0, 1.0]));
    assert_eq!(two.values(), &[0.0, 1.0, 1.0, 0.0]);

    let mut rng = Rng::new(5);
    let ps = random_set(&mut rng, 3, 4);
    let m = pairwise_dist(&ps);
    for i in 0..3 {
        for k in 0..3 {
            let mut s = 0.0;
            for j in 0..4 {
                s += (ps.point(i)[j] - ps.point(k)[j]).powi(2);
            }
            assert!((m.get(i, k) - s.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn distance_matrix_is_a_metric() {
    let mut rng = Rng::new(9);
    let ps = random_set(&mut rng, 7, 3);
    let m = pairwise_dist(&ps);
    for i in 0..7 {
        assert_eq!(m.get(i, i), 0.0);
        for k in 0..7 {
            assert_eq!(m.get(i, k), m.get(k, i));
            for j in 0..7 {
                assert!(m.get(i, k) <= m.get(i, j) + m.get(j, k) + 1e-12);
            }
        }
    }
}

#[test]
fn gw_objective_examples() {
    let c = line(&[0.0, 1.0]);
    let x = line(&[0.0, 2.0]);
    let (mc, mx) = (pairwise_dist(&c), pairwise_dist(&x));

    let ident = Coupling::permutation(&[0, 1]).unwrap();
    assert_eq!(gw_objective(&mc, &mc, &ident).unwrap(), 0.0);

    let diag = gw_objective(&mc, &mx, &ident).unwrap();
    let oracle = gw_energy_oracle(&[0.0, 1.0], &[0.0, 2.0], &[vec![0.5, 0.0], vec![0.0, 0.5]]);
    assert!((oracle - 0.5).abs() < 1e-12);
    assert!((diag - oracle).abs() < 1e-12);

    let uni = gw_objective(&mc, &mx, &Coupling::uniform(2, 2).unwrap()).unwrap();
    let oracle = gw_energy_oracle(&[0.0, 1.0], &[0.0, 2.0], &[vec![0.25; 2], vec![0.25; 2]]);
    assert!((oracle - 1.5).abs() < 1e-12);
    assert!((uni - oracle).abs() < 1e-12);
}

#[test]
fn coupling_marginals_enforced() {
    assert!(Coupling::new(vec![0.5, 0.0, 0.0, 0.4], vec![0.5, 0.5], vec![0.5, 0.5]).is_err());
    assert!(Coupling::new(vec![0.5, 0.0, 0.0, 0.5], vec![0.6, 0.4], vec![0.5, 0.5]).is_err());
    assert!(Coupling::new(vec![-0.1, 0.6, 0.6, -0.1], vec![0.5, 0.5], vec![0.5, 0.5]).is_err());
    let mc = pairwise_dist(&line(&[0.0, 1.0, 2.0]));
    let bad = Coupling::permutation(&[0, 1]).unwrap();
    assert!(gw_objective(&mc, &mc, &bad).is_err());
}

#[test]
fn bruteforce_examples() {
    let c = line(&[0.0, 1.0]);
    let (cost, plan) = gw_bruteforce(&c, &c).unwrap();
    assert_eq!(cost, 0.0);
    assert_eq!(plan.as_permutation().unwrap(), vec![0, 1]);

    let (cost, _) = gw_bruteforce(&c, &line(&[0.0, 2.0])).unwrap();
    assert!((cost - 0.5).abs() < 1e-12);
    // Both 2-permutations give 1/2 + 16ab with ab = 0.
    for perm in [[0, 1], [1, 0]] {
        let p = Coupling::permutation(&perm).unwrap();
        let v = gw_objective(&pairwise_dist(&c), &pairwise_dist(&line(&[0.0, 2.0])), &p).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    let mut rng = Rng::new(3);
    let ps = random_set(&mut rng, 5, 2);
    let shuffled = ps.permuted(&[3, 0, 4, 1, 2]);
    assert!(gw_bruteforce(&ps, &shuffled).unwrap().0 < 1e-12);

    assert!(gw_bruteforce(&random_set(&mut rng, 7, 2), &random_set(&mut rng, 7, 2)).is_err());
    assert!(gw_bruteforce(&random_set(&mut rng, 3, 2), &random_set(&mut rng, 4, 2)).is_err());
}

#[test]
fn bruteforce_accepts_different_dimensions() {
    // GW compares intra-set distances, so the two spaces need not match.
    let c = line(&[0.0, 1.0, 3.0]);
    let x = PointSet::new(vec![0.0, 0.0, 0.6, 0.8, 1.8, 2.4], 3, 2, Domain::Other).unwrap();
    assert!(gw_bruteforce(&c, &x).unwrap().0 < 1e-12);
}

#[test]
fn project_examples() {
    let ps = line(&[2.0, -1.0, 0.5]);
    let p = project(&ps, &[1.0]).unwrap();
    assert_eq!(p.values, vec![-1.0, 0.5, 2.0]);
    assert_eq!(p.perm, vec![1, 2, 0]);

    let constant = PointSet::new(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 3, 2, Domain::Other).unwrap();
    let dir = [0.6, 0.8];
    let p = project(&constant, &dir).unwrap();
    assert!(p.values.iter().all(|&v| v == p.values[0]));
    assert_eq!(p.perm, vec![0, 1, 2], "ties keep original order");

    let mut rng = Rng::new(8);
    let ps = random_set(&mut rng, 10, 3);
    let dir = sample_directions(3, 1, 4).unwrap();
    let p = project(&ps, dir.direction(0)).unwrap();
    let mut expected: Vec<f64> = (0..10).map(|i| dot(ps.point(i), dir.direction(0))).collect();
    expected.sort_by(f64::total_cmp);
    assert_eq!(p.values, expected);
    let mut seen = p.perm.clone();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());

    assert!(project(&ps, &[1.0, 1.0, 0.0]).is_err());
}

#[test]
fn gw_1d_examples() {
    assert_eq!(gw_1d(&[0.0, 1.0, 4.0], &[0.0, 1.0, 4.0]).unwrap(), 0.0);
    assert!((gw_1d(&[0.0, 1.0], &[0.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!((matching_oracle(&[0.0, 1.0], &[0.0, 2.0], false) - 0.5).abs() < 1e-12);
    assert!((matching_oracle(&[0.0, 1.0], &[0.0, 2.0], true) - 0.5).abs() < 1e-12);
    // Reflection: the descending matching recovers the isometry.
    let a = [-0.5, 0.25, 1.0, 3.0];
    let mut b: Vec<f64> = a.iter().map(|v| -v).collect();
    b.sort_by(f64::total_cmp);
    assert!(gw_1d(&a, &b).unwrap() < 1e-12);
    assert!(gw_1d(&[0.0], &[0.0, 1.0]).is_err());
    assert!(gw_1d(&[1.0, 0.0], &[0.0, 1.0]).is_err());
}

#[test]
fn sliced_gw_examples() {
    let mut rng = Rng::new(12);
    let c = random_set(&mut rng, 8, 3);
    let proj = sample_directions(3, 32, 1).unwrap();
    assert_eq!(sliced_gw(&c, &c, &proj).unwrap(), 0.0);

    let plus = ProjectionSet::from_directions(&[vec![1.0]]).unwrap();
    let v = sliced_gw(&line(&[0.0, 1.0]), &line(&[0.0, 2.0]), &plus).unwrap();
    assert!((v - 0.5).abs() < 1e-12);

    let other = random_set(&mut rng, 9, 3);
    assert!(sliced_gw(&c, &other, &proj).is_err());
}

#[test]
fn sliced_wasserstein_examples() {
    let plus = ProjectionSet::from_directions(&[vec![1.0]]).unwrap();
    let a = line(&[0.0, 1.0]);
    assert_eq!(sliced_wasserstein(&a, &a, &plus).unwrap(), 0.0);
    let v = sliced_wasserstein(&a, &line(&[0.0, 2.0]), &plus).unwrap();
    assert!((v - 0.5).abs() < 1e-12);
    let mut last = 0.0;
    for t in [0.5, 1.0, 2.0, 4.0] {
        let b = line(&[t, 1.0 + t]);
        let v = sliced_wasserstein(&a, &b, &plus).unwrap();
        assert!((v - t * t).abs() < 1e-12);
        assert!(v > last);
        last = v;
        assert!(sliced_gw(&a, &b, &plus).unwrap() < 1e-12);
    }
}

#[test]
fn direction_sampling() {
    let p = sample_directions(5, 100, 77).unwrap();
    for m in 0..p.len() {
        let norm = p.direction(m).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    assert_eq!(p, sample_directions(5, 100, 77).unwrap());
    assert_ne!(p, sample_directions(5, 100, 78).unwrap());

    let iso = sample_directions(2, 10_000, 3).unwrap();
    let mut mean = [0.0; 2];
    for m in 0..iso.len() {
        mean[0] += iso.direction(m)[0] / 1e4;
        mean[1] += iso.direction(m)[1] / 1e4;
    }
    assert!((mean[0].powi(2) + mean[1].powi(2)).sqrt() < 0.05);
    assert!(sample_directions(0, 3, 1).is_err());
    assert!(sample_directions(3, 0, 1).is_err());
}

#[test]
fn sliced_gw_gradient_matches_finite_differences() {
    let mut rng = Rng::new(21);
    let (n, d) = (6, 3);
    let c: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let proj = sample_directions(d, 16, 2).unwrap();
    let (_, gc, gx) = sliced_gw_with_grad(&c, &x, n, d, &proj);
    let f = |c: &[f64], x: &[f64]| sliced_gw_with_grad(c, x, n, d, &proj).0;
    let h = 1e-6;
    for (buf, grad, is_c) in [(&c, &gc, true), (&x, &gx, false)] {
        for e in 0..n * d {
            let mut plus = buf.clone();
            let mut minus = buf.clone();
            plus[e] += h;
            minus[e] -= h;
            let fd = if is_c {
                (f(&plus, &x) - f(&minus, &x)) / (2.0 * h)
            } else {
                (f(&c, &plus) - f(&c, &minus)) / (2.0 * h)
            };
            assert!((fd - grad[e]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", grad[e]);
        }
    }
}

proptest! {
    #[test]
    fn closed_form_matches_quadratic_sum(
        mut a in prop::collection::vec(-5.0f64..5.0, 1..12),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let mut b: Vec<f64> = a.iter().map(|_| rng.normal() * 2.0).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for desc in [false, true] {
            let (fast, _) = matched_cost(&a, &b, desc);
            let slow = matching_oracle(&a, &b, desc);
            prop_assert!((fast - slow).abs() < 1e-9 * (1.0 + slow));
        }
    }

    #[test]
    fn sliced_gw_symmetric_nonnegative_invariant(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = Rng::new(seed);
        let c = random_set(&mut rng, n, 3);
        let x = random_set(&mut rng, n, 3);
        let proj = sample_directions(3, 24, seed ^ 1).unwrap();
        let base = sliced_gw(&c, &x, &proj).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((sliced_gw(&x, &c, &proj).unwrap() - base).abs() < 1e-9);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        prop_assert!((sliced_gw(&c.permuted(&perm), &x, &proj).unwrap() - base).abs() < 1e-9);
        let t = [rng.normal() * 3.0, rng.normal(), -2.0];
        prop_assert!((sliced_gw(&c, &x.translated(&t), &proj).unwrap() - base).abs() < 1e-9);
    }
}
