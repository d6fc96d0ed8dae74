use proptest::prelude::*;
use smoothdit_core::schedule::longest_run;
use smoothdit_core::{build_layer_mask, sway_timesteps, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-50.0f32..50.0, rows * cols).prop_map(move |v| Tensor::from_vec(&[rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_sum_to_one((r, c) in (1usize..6, 1usize..9), seed in any::<u64>()) {
        let mut rng = smoothdit_core::Rng::new(seed);
        let x = rng.normal_tensor(&[r, c], 20.0);
        let p = x.softmax(1).unwrap();
        for i in 0..r {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5, "row {i} sums to {s}");
        }
    }

    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(k, n)))
    ) {
        let (m, k, n) = (a.rows(), a.last_dim(), b.last_dim());
        let got = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                prop_assert_eq!(got.data()[i * n + j].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn sway_grid_is_strictly_increasing(nfe in 1usize..=1024, s in -1.0f32..=1.0) {
        let g = sway_timesteps(nfe, s).unwrap();
        prop_assert_eq!(g.len(), nfe + 1);
        prop_assert_eq!(g[0], 0.0);
        prop_assert_eq!(g[nfe], 1.0);
        prop_assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn masks_respect_the_run_cap(
        errors in prop::collection::vec(0.0f64..1.0, 1..40),
        alpha in 0.0f64..1.2,
        cap in 1usize..6,
    ) {
        let mask = build_layer_mask(&errors, alpha, cap).unwrap();
        prop_assert_eq!(mask.len(), errors.len() + 1);
        prop_assert!(!mask[0]);
        prop_assert!(longest_run(&mask) <= cap);
        for (j, &c) in mask.iter().enumerate().skip(1) {
            if c {
                prop_assert!(errors[j - 1] < alpha);
            }
        }
    }
}
