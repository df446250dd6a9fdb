use ppgen::sampling::{latin_hypercube, Sobol};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin(x: f64, k: u32) -> usize {
    (x * (1u64 << k) as f64) as usize
}

/// Every dyadic `2^-a x 2^-b` box of a two-dimensional projection holds
/// exactly `2^(m-a-b)` of the first `2^m` points.
fn check_pair(pts: &[Vec<f64>], i: usize, j: usize, m: u32) {
    for a in 0..=m {
        let b = m - a;
        let mut counts = vec![0usize; 1 << m];
        for p in pts {
            counts[(bin(p[i], a) << b) | bin(p[j], b)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1), "dims ({i},{j}) a={a}: {counts:?}");
    }
}

#[test]
fn every_axis_is_fully_stratified() {
    let m = 10;
    for shift in [false, true] {
        let mut s = Sobol::new(Sobol::MAX_DIM).unwrap();
        if shift {
            s = s.with_random_shift(&mut ChaCha8Rng::seed_from_u64(1));
        }
        let pts = s.points(1 << m);
        for d in 0..s.dim() {
            let mut counts = vec![0usize; 1 << m];
            for p in &pts {
                assert!(p[d] > 0.0 && p[d] < 1.0);
                counts[bin(p[d], m)] += 1;
            }
            assert!(counts.iter().all(|&c| c == 1), "dim {d} shift {shift}");
        }
    }
}

#[test]
fn leading_pair_forms_a_net() {
    let m = 8;
    let pts = Sobol::new(2).unwrap().points(1 << m);
    check_pair(&pts, 0, 1, m);
    let shifted = Sobol::new(2).unwrap().with_random_shift(&mut ChaCha8Rng::seed_from_u64(7)).points(1 << m);
    check_pair(&shifted, 0, 1, m);
}

#[test]
fn dimension_bounds_are_enforced() {
    assert!(Sobol::new(0).is_err());
    assert!(Sobol::new(Sobol::MAX_DIM + 1).is_err());
    assert_eq!(Sobol::new(3).unwrap().dim(), 3);
}

#[test]
fn sequence_prefixes_agree() {
    let s = Sobol::new(4).unwrap();
    let long = s.points(100);
    assert_eq!(s.points(37)[..], long[..37]);
}

proptest! {
    #[test]
    fn latin_hypercube_has_one_point_per_stratum(n in 1usize..200, dim in 1usize..6, seed in 0u64..1000) {
        let pts = latin_hypercube(n, dim, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(pts.len(), n);
        for d in 0..dim {
            let mut seen = vec![false; n];
            for p in &pts {
                prop_assert!((0.0..1.0).contains(&p[d]));
                let k = ((p[d] * n as f64) as usize).min(n - 1);
                prop_assert!(!seen[k]);
                seen[k] = true;
            }
        }
        let again = latin_hypercube(n, dim, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(pts, again);
    }
}
