//! Forward-semantics and error-path tests for the tensor op set.

use autodiff::{Tape, Tensor, TensorError};

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = tape.leaf(&Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = tape.matmul(&a, &b).unwrap();
    assert_eq!(c.data, vec![3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_arithmetic() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(&Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(&a, &b).unwrap();
    assert_eq!(c.shape, vec![1, 1]);
    assert_eq!(c.data, vec![11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(&Tensor::zeros(vec![4, 2]));
    match tape.matmul(&a, &b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {:?}", other),
    }
}

#[test]
fn matmul_batched_leading_dims() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.leaf(&Tensor::from_rows(&[&[1.0], &[1.0]]));
    let c = tape.matmul(&a, &b).unwrap();
    assert_eq!(c.shape, vec![2, 1, 1]);
    assert_eq!(c.data, vec![3.0, 7.0]);
}

#[test]
fn softmax_symmetry() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax_last(&x).unwrap();
    for v in &y.data {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_stabilized_no_overflow() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax_last(&x).unwrap();
    assert!(y.is_finite());
    assert!((y.data[0] - 1.0).abs() < 1e-12);
    assert!(y.data[1] < 1e-300);
}

#[test]
fn softmax_empty_last_dim_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![2, 0]));
    assert!(tape.softmax_last(&x).is_err());
}

#[test]
fn layer_norm_constant_vector() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
    let g = tape.leaf(&Tensor::full(vec![3], 1.0));
    let b = tape.leaf(&Tensor::zeros(vec![3]));
    let y = tape.layer_norm(&x, &g, &b, 1e-5).unwrap();
    for v in &y.data {
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn layer_norm_two_point() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
    let g = tape.leaf(&Tensor::full(vec![2], 1.0));
    let b = tape.leaf(&Tensor::zeros(vec![2]));
    let y = tape.layer_norm(&x, &g, &b, 1e-12).unwrap();
    assert!((y.data[0] + 1.0).abs() < 1e-6);
    assert!((y.data[1] - 1.0).abs() < 1e-6);
}

#[test]
fn gelu_odd_symmetric_point() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(0.0));
    let y = tape.gelu(&x).unwrap();
    assert_eq!(y.data[0], 0.0);
}

#[test]
fn concat_then_slice_is_identity_bitwise() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
    let b = tape.leaf(&Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap());
    let cat = tape.concat(&[&a, &b], 0).unwrap();
    let back = tape.slice(&cat, 0, 0, 2).unwrap();
    assert_eq!(back.data, a.data);
    assert_eq!(back.shape, a.shape);
}

#[test]
fn slice_out_of_range_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
    match tape.slice(&a, 1, 1, 5) {
        Err(TensorError::SliceBounds { extent, .. }) => assert_eq!(extent, 3),
        other => panic!("expected bounds error, got {:?}", other),
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&Tensor::zeros(vec![4]));
    let loss = tape.cross_entropy(&logits, 2).unwrap();
    assert!((loss.item() - 4.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&Tensor::new(vec![3], vec![0.0, 1e6, 0.0]).unwrap());
    let loss = tape.cross_entropy(&logits, 1).unwrap();
    assert!(loss.item().abs() < 1e-9);
}

#[test]
fn cross_entropy_target_out_of_range() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&Tensor::zeros(vec![3]));
    match tape.cross_entropy(&logits, 3) {
        Err(TensorError::IndexOutOfRange { index, classes }) => {
            assert_eq!((index, classes), (3, 3));
        }
        other => panic!("expected index error, got {:?}", other),
    }
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let loss = tape.sum_all(&x).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y = tape.add(&x, &x).unwrap();
    let loss = tape.sum_all(&y).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![2]));
    match tape.backward(&x) {
        Err(TensorError::NotScalar { shape }) => assert_eq!(shape, vec![2]),
        other => panic!("expected NotScalar, got {:?}", other),
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.4, 0.7]).unwrap());
        let w = tape.leaf(&Tensor::new(vec![2, 2], vec![1.1, 0.2, -0.5, 0.9]).unwrap());
        let h = tape.matmul(&x, &w).unwrap();
        let a = tape.gelu(&h).unwrap();
        let s = tape.softmax_last(&a).unwrap();
        let loss = tape.sum_all(&s).unwrap();
        tape.backward(&loss).unwrap();
        (tape.grad(&x).unwrap().to_vec(), tape.grad(&w).unwrap().to_vec())
    };
    let (gx1, gw1) = run();
    let (gx2, gw2) = run();
    // bit-identical, not just approximately equal
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn detached_tensor_rejected_by_ops() {
    let mut tape = Tape::new();
    let x = Tensor::zeros(vec![2, 2]);
    let y = tape.leaf(&x);
    assert!(matches!(tape.add(&x, &y), Err(TensorError::NotOnTape)));
}
