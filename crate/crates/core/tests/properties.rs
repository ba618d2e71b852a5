use geoattack_core::attacks::linf::{linf_distance, project};
use geoattack_core::diffmath::Graph;
use geoattack_core::ga::budget_schedule;
use geoattack_core::metrics::reward;
use geoattack_core::partition::{enumerate_partitions, partition_loss, pearson, TransferMatrix};
use geoattack_core::{DenseArray, Metric};
use proptest::prelude::*;

fn matrix(n: usize, rates: &[f64]) -> TransferMatrix {
    TransferMatrix::new((0..n).map(|i| i.to_string()).collect(), rates[..n * n].to_vec()).unwrap()
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

proptest! {
    #[test]
    fn projection_lands_in_ball_and_is_idempotent(
        pairs in prop::collection::vec((0.0f64..1.0, -2.0f64..2.0), 1..64),
        eps in 0.001f64..0.3,
    ) {
        let x0 = DenseArray::from_vec(pairs.iter().map(|p| p.0).collect()).unwrap();
        let x = DenseArray::from_vec(pairs.iter().map(|p| p.0 + p.1).collect()).unwrap();
        let p = project(&x, &x0, eps);
        prop_assert!(linf_distance(&p, &x0) <= 255.0 * (eps + f64::EPSILON));
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(project(&p, &x0, eps), p);
    }

    #[test]
    fn partition_count_is_binomial(n in 4usize..10, k_off in 0usize..6) {
        let k = 2 + k_off % (n - 3);
        let pool: Vec<usize> = (0..n).collect();
        let parts = enumerate_partitions(&pool, k).unwrap();
        prop_assert_eq!(parts.len(), binomial(n, k));
        for (t, v) in &parts {
            prop_assert_eq!(t.len() + v.len(), n);
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn partition_loss_ignores_relabelling(
        rates in prop::collection::vec(0.0f64..1.0, 36),
        perm_seed in any::<u64>(),
    ) {
        let n = 6;
        let w = matrix(n, &rates);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut permuted = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                permuted[perm[a] * n + perm[b]] = w.get(a, b);
            }
        }
        let wp = matrix(n, &permuted);
        let (t, v) = (vec![0, 1, 2], vec![3, 4, 5]);
        let tp: Vec<usize> = t.iter().map(|&i| perm[i]).collect();
        let vp: Vec<usize> = v.iter().map(|&i| perm[i]).collect();
        let a = partition_loss(&w, &t, &v).unwrap();
        let b = partition_loss(&wp, &tp, &vp).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn partition_loss_is_monotone_in_rates(
        rates in prop::collection::vec(0.0f64..0.5, 25),
        cell in 0usize..25,
        bump in 0.0f64..0.5,
    ) {
        let w = matrix(5, &rates);
        let mut raised = rates.clone();
        raised[cell] += bump;
        let w2 = matrix(5, &raised);
        let a = partition_loss(&w, &[0, 3], &[1, 2, 4]).unwrap();
        let b = partition_loss(&w2, &[0, 3], &[1, 2, 4]).unwrap();
        prop_assert!(b >= a - 1e-15);
    }

    #[test]
    fn pearson_is_bounded(xs in prop::collection::vec(-1e3f64..1e3, 3..30), shift in -5.0f64..5.0) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + shift * i as f64).collect();
        if let Ok(r) = pearson(&xs, &ys) {
            prop_assert!(r.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn reward_decreases_with_distance(a in 0.01f64..100.0, b in 0.01f64..100.0) {
        prop_assume!(a < b);
        prop_assert!(reward(a).unwrap() > reward(b).unwrap());
    }

    #[test]
    fn schedules_grow_to_the_budget(eps in 1.0f64..300.0, k in 1usize..12) {
        for metric in [Metric::Linf, Metric::Unrestricted] {
            let s = budget_schedule(eps, k, metric).unwrap();
            prop_assert_eq!(s.len(), k);
            prop_assert_eq!(s[k - 1], eps);
            prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn resizing_a_constant_image_keeps_it_constant(
        c in -3.0f64..3.0, h in 1usize..9, w in 1usize..9, oh in 1usize..12, ow in 1usize..12,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(DenseArray::full(&[1, 2, h, w], c));
        let y = g.resize_bilinear(x, oh, ow).unwrap();
        prop_assert!(g.value(y).data().iter().all(|v| (v - c).abs() < 1e-12));
    }
}
