//! Property tests for the selection operator, metrics and file formats.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use softsae::eval::{fve, spearman};
use softsae::soft_topk::{hard_topk, soft_topk_forward, solve_threshold};

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..max_len)
}

fn instance() -> impl Strategy<Value = (Vec<f64>, f64, f64)> {
    scores(64).prop_flat_map(|z| {
        let d = z.len() as f64;
        (Just(z), 0.05f64..0.95, prop::sample::select(vec![1e-3, 0.1, 1.0, 10.0]))
            .prop_map(move |(z, frac, alpha)| (z, frac * d, alpha))
    })
}

proptest! {
    #[test]
    fn sum_constraint_holds((z, k, alpha) in instance()) {
        let out = soft_topk_forward(&z, k, alpha).unwrap();
        let sum: f64 = out.weights.iter().sum();
        prop_assert!((sum - k).abs() <= 1e-9 * z.len() as f64, "sum {} k {}", sum, k);
        prop_assert!(out.weights.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn permutation_equivariance((z, k, alpha) in instance(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut perm: Vec<usize> = (0..z.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let zp: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        let a = soft_topk_forward(&z, k, alpha).unwrap();
        let b = soft_topk_forward(&zp, k, alpha).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.weights[j] - a.weights[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_monotone_in_scores((z, k, alpha) in instance()) {
        let out = soft_topk_forward(&z, k, alpha).unwrap();
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] > z[j] {
                    prop_assert!(out.weights[i] >= out.weights[j] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn shift_covariance((z, k, alpha) in instance(), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = soft_topk_forward(&z, k, alpha).unwrap();
        let b = soft_topk_forward(&shifted, k, alpha).unwrap();
        for (p, q) in a.weights.iter().zip(&b.weights) {
            prop_assert!((p - q).abs() < 1e-7, "{} vs {}", p, q);
        }
        let tau_a = solve_threshold(&z, k, alpha).unwrap();
        let tau_b = solve_threshold(&shifted, k, alpha).unwrap();
        prop_assert!((tau_b - tau_a - c).abs() < 1e-9 * (1.0 + c.abs()) + 1e-7 * alpha);
    }

    #[test]
    fn weight_sum_is_flat_in_each_score((z, k, alpha) in instance(), j in any::<prop::sample::Index>()) {
        // d/dz_j sum(p) = 0 because the sum is pinned to k_hat.
        let j = j.index(z.len());
        let h = 1e-3;
        let sum_at = |v: f64| {
            let mut zz = z.clone();
            zz[j] = v;
            soft_topk_forward(&zz, k, alpha).unwrap().weights.iter().sum::<f64>()
        };
        prop_assert!(((sum_at(z[j] + h) - sum_at(z[j] - h)) / (2.0 * h)).abs() < 1e-6);
    }

    #[test]
    fn hard_topk_selects_k_largest(z in scores(64), k_frac in 0.0f64..1.0) {
        let k = ((z.len() as f64 * k_frac) as usize).max(1).min(z.len());
        let sel = hard_topk(&z, k).unwrap();
        prop_assert_eq!(sel.indices.len(), k);
        prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(sel.mask.iter().filter(|m| **m).count(), k);
        let min_in = sel.indices.iter().map(|&i| z[i]).fold(f64::INFINITY, f64::min);
        for (i, &v) in z.iter().enumerate() {
            if !sel.mask[i] {
                prop_assert!(v <= min_in);
            }
        }
    }

    #[test]
    fn fve_orthogonal_invariance(seed in any::<u64>(), rows in 3usize..20, noise in 0.0f64..1.0) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let n = 5;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r, c| Array2::from_shape_fn((r, c), |_| -> f64 { StandardNormal.sample(&mut rng) });
        let x = g(rows, n);
        let x_hat = &x + &(g(rows, n) * noise);
        // Orthogonal matrix from Gram-Schmidt on a random square matrix.
        let a = g(n, n);
        let mut q = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let mut v: Array1<f64> = a.row(i).to_owned();
            for j in 0..i {
                let proj = v.dot(&q.row(j));
                v.scaled_add(-proj, &q.row(j));
            }
            let norm = v.dot(&v).sqrt();
            q.row_mut(i).assign(&(v / norm));
        }
        let before = fve(x.view(), x_hat.view()).unwrap();
        let after = fve(x.dot(&q).view(), x_hat.dot(&q).view()).unwrap();
        prop_assert!((before - after).abs() < 1e-10 * (1.0 + before.abs()));
    }

    #[test]
    fn spearman_invariant_under_increasing_maps(a in prop::collection::vec(-10.0f64..10.0, 10..60), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-5.0..5.0)).collect();
        let base = spearman(&a, &b).unwrap();
        let ta: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * v * v + 2.0 * v).collect();
        let mapped = spearman(&ta, &tb).unwrap();
        match (base, mapped) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn activation_files_round_trip(rows in 0usize..40, cols in 1usize..9, seed in any::<u64>(), batch in 1usize..50) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1e3f32..1e3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.saea");
        softsae::dataio::write_activations(x.view(), &path).unwrap();
        let file = softsae::dataio::ActivationFile::open(&path).unwrap();
        let mut got = Vec::new();
        for b in file.batches(batch, None).unwrap() {
            let b = b.unwrap();
            prop_assert!(b.nrows() <= batch);
            got.extend(b.iter().map(|v| v.to_bits()));
        }
        let want: Vec<u32> = x.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }
}
