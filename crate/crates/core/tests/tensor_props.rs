use mugs::tensor::ops;
use mugs::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, scale: f32) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

fn sized(scale: f32) -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..9).prop_flat_map(move |(r, c)| tensor(r, c, scale))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in sized(50.0)) {
        let p = ops::softmax(&x, 1).unwrap();
        for row in p.data().chunks(x.shape()[1]) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn forward_ops_keep_finite_values(x in sized(20.0)) {
        let c = x.shape()[1];
        let g = Tensor::new([c], vec![1.0; c]).unwrap();
        let b = Tensor::zeros([c]);
        let outs = [
            ops::gelu(&x),
            ops::layer_norm(&x, &g, &b, 1e-6).unwrap(),
            ops::softmax(&x, 0).unwrap(),
            ops::matmul_t(&x, &x).unwrap(),
        ];
        for t in &outs {
            prop_assert!(t.data().iter().all(|v| v.is_finite()));
            prop_assert_eq!(t.shape().iter().product::<usize>(), t.data().len());
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(a in tensor(4, 6, 2.0), b in tensor(6, 3, 2.0)) {
        let run = || {
            let mut tape = Tape::new();
            let va = tape.leaf(a.clone());
            let vb = tape.leaf(b.clone());
            let m = tape.matmul(va, vb).unwrap();
            let s = tape.softmax(m, 1).unwrap();
            tape.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn leaf_gradients_match_leaf_shapes(a in tensor(3, 5, 1.0), b in tensor(5, 2, 1.0)) {
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone().with_requires_grad(true));
        let vb = tape.leaf(b.clone().with_requires_grad(true));
        let m = tape.matmul(va, vb).unwrap();
        let g = tape.gelu(m);
        let l = tape.sum_all(g);
        let grads = tape.backward(l).unwrap();
        prop_assert_eq!(grads.get(va).unwrap().shape(), a.shape());
        prop_assert_eq!(grads.get(vb).unwrap().shape(), b.shape());
    }

    #[test]
    fn l2_rows_are_unit_norm(x in sized(5.0)) {
        prop_assume!(x.data().chunks(x.shape()[1]).all(|r| r.iter().map(|v| v * v).sum::<f32>() > 1e-4));
        let n = ops::l2_normalize(&x).unwrap();
        for row in n.data().chunks(x.shape()[1]) {
            let s: f32 = row.iter().map(|v| v * v).sum();
            prop_assert!((s.sqrt() - 1.0).abs() < 1e-5);
        }
    }
}
