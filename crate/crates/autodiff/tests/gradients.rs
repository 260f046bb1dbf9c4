use autodiff::gradcheck::{self, TOLERANCE};
use autodiff::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    let reports = gradcheck::run_suite(2024).unwrap();
    assert_eq!(reports.len(), gradcheck::OPS.len());
    for r in &reports {
        assert!(r.cases >= 5);
        assert!(r.passed(), "{} max rel err {:e}", r.op, r.max_rel_err);
    }
}

#[test]
fn suite_is_stable_across_seeds() {
    for seed in [1, 7, 99] {
        for r in gradcheck::run_suite(seed).unwrap() {
            assert!(r.passed(), "seed {seed}: {} {:e}", r.op, r.max_rel_err);
        }
    }
}

#[test]
fn matmul_4x5_by_5x3_sum_gradient() {
    let a = Tensor::new(
        vec![4, 5],
        (0..20).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .unwrap();
    let b = Tensor::new(
        vec![5, 3],
        (0..15).map(|i| (i as f64 * 0.91).cos()).collect(),
    )
    .unwrap();
    let err = gradcheck::check(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.sum(c)
    })
    .unwrap();
    assert!(err < TOLERANCE, "{err:e}");
}

#[test]
fn cross_entropy_half_mask_gradient() {
    let logits = Tensor::new(
        vec![6, 5],
        (0..30).map(|i| ((i * 7 % 11) as f64) * 0.3 - 1.5).collect(),
    )
    .unwrap();
    let targets = [0, 4, 2, 2, 1, 3];
    let mask = [true, false, true, false, true, false];
    let err = gradcheck::check(&[logits], |g, v| g.cross_entropy(v[0], &targets, &mask)).unwrap();
    assert!(err < TOLERANCE, "{err:e}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(
                vec![3, 4],
                (0..12).map(|i| (i as f64).sqrt() - 1.3).collect(),
            )
            .unwrap()
            .with_requires_grad(true),
        );
        let x = g.constant(Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -2.0]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let s = g.softmax(h, 1).unwrap();
        let l = g.cross_entropy(s, &[1, 3], &[true, true]).unwrap();
        let loss = g.value(l).data()[0];
        let grads = g.backward(l).unwrap();
        (
            loss.to_bits(),
            grads
                .get(w)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.1f64..300.0,
        seed in any::<u64>(),
    ) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 / 500.0 - 1.0) * scale)
            .collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_self_similarity_is_one(v in proptest::collection::vec(-100.0f64..100.0, 1..12)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let n = v.len();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, n], v.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![1, n], v).unwrap());
        let c = g.cosine_rows(a, b).unwrap();
        prop_assert_eq!(g.value(c).data()[0], 1.0);
    }
}
