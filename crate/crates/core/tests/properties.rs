use ctss::coteach::{remember_rate, select_small_loss_subjects, selection_count};
use ctss::eval::ConfusionMatrix;
use ctss::nn::{build_mini_resnet1d, ModelConfig};
use ctss::ops;
use ctss::optim::{adam_step, AdamState};
use ctss::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Minimum-sum subset of size `k` by enumeration; ties go to the
/// lexicographically smallest index set.
fn brute_force(sums: &[f64], k: usize) -> Vec<usize> {
    let n = sums.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let total: f64 = idx.iter().map(|&i| sums[i]).sum();
        let better = match &best {
            None => true,
            Some((b, bi)) => total < *b - 1e-12 || ((total - b).abs() <= 1e-12 && idx < *bi),
        };
        if better {
            best = Some((total, idx));
        }
    }
    best.unwrap().1
}

fn sums_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.0f64..10.0, 1..=12),
        // small integers force ties
        prop::collection::vec((0u8..4).prop_map(f64::from), 1..=12),
    ]
}

proptest! {
    #[test]
    fn conv_output_len_matches_kernel(
        len in 1usize..40, k in 1usize..8, stride in 1usize..4, pad in 0usize..4,
    ) {
        prop_assume!(len + 2 * pad >= k);
        let expected = (len + 2 * pad - k) / stride + 1;
        prop_assert_eq!(ops::conv1d_output_len(len, k, stride, pad).unwrap(), expected);
        let x = Tensor::zeros(&[2, len]);
        let w = Tensor::zeros(&[3, 2, k]);
        let y = ops::conv1d(&x, &w, &Tensor::zeros(&[3]), stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[3, expected][..]);
    }

    #[test]
    fn pool_output_len_matches_kernel(len in 1usize..40, k in 1usize..6, stride in 1usize..6) {
        prop_assume!(len >= k);
        let expected = (len - k) / stride + 1;
        prop_assert_eq!(ops::pool_output_len(len, k, stride).unwrap(), expected);
        let y = ops::maxpool1d(&Tensor::zeros(&[1, len]), k, stride).unwrap();
        prop_assert_eq!(y.shape(), &[1, expected][..]);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5, cols in 1usize..6, seed in prop::collection::vec(-50.0f64..50.0, 30),
    ) {
        let logits = tensor(&[rows, cols], seed[..rows * cols].to_vec());
        let p = ops::softmax(&logits).unwrap();
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let labels: Vec<usize> = (0..rows).map(|r| r % cols).collect();
        let (losses, grad) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
        prop_assert!(losses.data().iter().all(|&l| l >= 0.0 && l.is_finite()));
        for r in 0..rows {
            prop_assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn selection_matches_exhaustive_search(sums in sums_strategy(), r in 0.01f64..=1.0) {
        let n = sums.len();
        let k = (1..=n).find(|&k| k as f64 >= r * n as f64 - 1e-9).unwrap_or(n);
        prop_assert_eq!(selection_count(r, n), k);
        let sel = select_small_loss_subjects(&sums, r).unwrap();
        prop_assert_eq!(sel, brute_force(&sums, k));
    }

    #[test]
    fn remember_rate_is_bounded_and_non_increasing(
        t in 0usize..200, t_k in 1usize..50, tau in 0.0f64..0.99,
    ) {
        let now = remember_rate(t, t_k, tau);
        let next = remember_rate(t + 1, t_k, tau);
        prop_assert!(now <= 1.0 && now >= 1.0 - tau - 1e-15);
        prop_assert!(next <= now);
        if t >= t_k {
            prop_assert_eq!(now, 1.0 - tau);
        }
    }

    #[test]
    fn adam_update_is_odd_in_the_gradient(
        p in prop::collection::vec(-2.0f64..2.0, 1..8),
        g_scale in 1e-6f64..10.0,
        steps in 1usize..4,
    ) {
        let g: Vec<f64> = p.iter().map(|v| g_scale * (v * 7.3).sin()).collect();
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let shape = [p.len()];
        let start = vec![tensor(&shape, p.clone())];
        let (mut a, mut b) = (start.clone(), start.clone());
        let mut sa = AdamState::new(&a);
        let mut sb = AdamState::new(&b);
        for _ in 0..steps {
            adam_step(&mut a, &[tensor(&shape, g.clone())], &mut sa, 0.01).unwrap();
            adam_step(&mut b, &[tensor(&shape, neg.clone())], &mut sb, 0.01).unwrap();
        }
        for ((p0, pa), pb) in p.iter().zip(a[0].data()).zip(b[0].data()) {
            let da = pa - p0;
            let db = pb - p0;
            prop_assert!((da + db).abs() <= 1e-15, "{} vs {}", da, db);
        }
    }

    #[test]
    fn balanced_accuracy_ignores_class_relabelling(
        counts in prop::collection::vec(0u64..20, 9),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let mut counts = counts;
        for c in 0..3 {
            counts[c * 3 + c] += 1;
        }
        let cm = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
        let mut moved = vec![0u64; 9];
        for t in 0..3 {
            for p in 0..3 {
                moved[perm[t] * 3 + perm[p]] = counts[t * 3 + p];
            }
        }
        let cm2 = ConfusionMatrix::from_counts(3, moved).unwrap();
        let (a, b) = (cm.balanced_accuracy().unwrap(), cm2.balanced_accuracy().unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_follow_batch_permutation(
        perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            n_electrodes: 2,
            n_timesteps: 32,
            n_classes: 3,
            width_base: 2,
            n_blocks: 2,
            seed,
        };
        let model = build_mini_resnet1d(&cfg).unwrap();
        let x = tensor(&[5, 2, 32], (0..320).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect());
        let full = model.logits(&x).unwrap();
        let permuted = model.logits(&x.select_rows(&perm).unwrap()).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.row(row), full.row(src));
        }
        let again = build_mini_resnet1d(&cfg).unwrap().logits(&x).unwrap();
        prop_assert_eq!(again, full);
    }
}
