use amodal_core::gradcheck::random_tensor;
use amodal_core::kernels::{self, SampleTable};
use amodal_core::rng::{stream, Purpose};
use amodal_core::{Tape, Tensor};

mod support;

#[test]
fn gradcheck_every_op() {
    let checks = support::op_gradchecks();
    for c in &checks {
        assert!(c.passed(), "{c}");
    }
    assert!(checks.iter().any(|c| c.name == "attention"));
}

#[test]
fn conv_fast_path_matches_direct_loops() {
    let mut rng = stream(5, Purpose::Data);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
        let x = random_tensor(&mut rng, &[2, 3, 7, 6]);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let fast = kernels::conv2d(&x, &w, stride, pad).unwrap();
        let slow = kernels::conv2d_direct(&x, &w, stride, pad).unwrap();
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn conv_hand_cases() {
    let ones = Tensor::ones(&[1, 1, 3, 3]);
    let y = kernels::conv2d(&ones, &ones, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);

    let mut rng = stream(6, Purpose::Data);
    let x = random_tensor(&mut rng, &[1, 2, 4, 5]);
    let mut id = Tensor::zeros(&[2, 2, 3, 3]);
    id.set(&[0, 0, 1, 1], 1.0);
    id.set(&[1, 1, 1, 1], 1.0);
    assert_eq!(kernels::conv2d(&x, &id, 1, 1).unwrap(), x);

    let two = Tensor::full(&[1, 1, 1, 1], 2.0);
    let up = kernels::conv_transpose2d(&two, &Tensor::ones(&[1, 1, 2, 2]), 2, 0).unwrap();
    assert_eq!(up.shape(), &[1, 1, 2, 2]);
    assert!(up.data().iter().all(|&v| v == 2.0));

    assert!(kernels::conv2d(&Tensor::ones(&[1, 1, 2, 2]), &Tensor::ones(&[1, 1, 3, 3]), 1, 0).is_err());
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = stream(7, Purpose::Data);
    for (stride, pad, k, h) in [(1, 1, 3, 6), (2, 1, 4, 8), (2, 0, 2, 8), (2, 1, 3, 9)] {
        let x = random_tensor(&mut rng, &[2, 3, h, h]);
        let w = random_tensor(&mut rng, &[4, 3, k, k]);
        let cx = kernels::conv2d(&x, &w, stride, pad).unwrap();
        let y = random_tensor(&mut rng, cx.shape());
        let ty = kernels::conv_transpose2d(&y, &w, stride, pad).unwrap();
        assert_eq!(ty.shape(), x.shape(), "stride {stride} pad {pad} k {k}");
        let lhs = cx.dot(&y);
        let rhs = x.dot(&ty);
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn bilinear_hand_cases() {
    let map = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let t = SampleTable::new(2, 2, &[(0.5, 0.5), (-5.0, -5.0), (1.0, 1.0), (1.0, 0.0)]);
    let s = t.sample(&map).unwrap();
    assert_eq!(s.data(), &[1.5, 0.0, 3.0, 1.0]);
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = stream(11, Purpose::Data);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let grad_of = |which: u8| {
        let tape = Tape::new();
        let (x, w) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let y = x.matmul(w).unwrap();
        let l1 = y.mul(y).unwrap().sum_all();
        let l2 = y.softmax(1).unwrap().slice(1, 0, 1).unwrap().sum_all();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => l1.add(l2).unwrap(),
        };
        tape.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
    for i in 0..g12.len() {
        assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() <= 1e-12);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12), shift in -100.0f64..100.0) {
            let x = Tensor::new(&[3, 4], vals).unwrap();
            let y = kernels::softmax(&x, 1).unwrap();
            for r in 0..3 {
                let s: f64 = (0..4).map(|c| y.at(&[r, c])).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let ys = kernels::softmax(&x.map(|v| v + shift), 1).unwrap();
            for (a, b) in y.data().iter().zip(ys.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
