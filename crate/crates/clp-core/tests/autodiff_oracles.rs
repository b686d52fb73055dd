//! Finite-difference oracles for the tensor engine: every differentiable
//! primitive against central differences, second-order products against
//! differences of analytic gradients, plus a handful of frozen closed-form
//! values. All probes rebuild their graphs from scratch.

use clp_core::tensorad::{
    finite_diff_check, finite_diff_check_grad, primitive_gradient_sweep, second_order_sweep,
    Graph, Tensor,
};

#[test]
fn primitives_match_central_differences() {
    let worst = primitive_gradient_sweep::<f64>().unwrap();
    assert!(worst <= 1e-4, "worst primitive gradient error {worst}");
}

#[test]
fn second_order_matches_differentiated_gradients() {
    let worst = second_order_sweep::<f64>().unwrap();
    assert!(worst <= 1e-3, "worst second-order error {worst}");
}

#[test]
fn mlp_end_to_end_gradient() {
    // 2-layer network, CE-shaped objective, checked w.r.t. the input
    let x = Tensor::from_vec(vec![2, 5], vec![0.3, -0.8, 1.1, 0.2, -0.4, 0.9, 0.05, -1.3, 0.7, 0.6])
        .unwrap();
    let err = finite_diff_check(
        &|g: &mut Graph<f64>, xid| {
            let w1 = g.constant(Tensor::from_vec(
                vec![5, 4],
                (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect(),
            )?)?;
            let w2 = g.constant(Tensor::from_vec(
                vec![4, 3],
                (0..12).map(|i| ((i * 5 % 9) as f64 - 4.0) / 5.0).collect(),
            )?)?;
            let z1 = g.matmul(xid, w1)?;
            let a1 = g.relu(z1)?;
            let u = g.matmul(a1, w2)?;
            let ls = g.log_softmax(u)?;
            let picked = g.row_gather(ls, &[0, 2])?;
            let s = g.sum(picked)?;
            g.scale(s, -0.5)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "MLP input gradient error {err}");
}

#[test]
fn mlp_second_order_against_differences() {
    let x = Tensor::from_vec(vec![1, 4], vec![0.4, -0.7, 0.9, 0.15]).unwrap();
    let probe = Tensor::from_vec(vec![1, 4], vec![0.31, -0.54, 0.18, 0.92]).unwrap();
    let err = finite_diff_check_grad(
        &|g: &mut Graph<f64>, xid| {
            let w1 = g.constant(Tensor::from_vec(
                vec![4, 3],
                vec![0.5, -0.2, 0.3, 0.1, 0.8, -0.6, -0.4, 0.25, 0.7, 0.05, -0.9, 0.45],
            )?)?;
            let z1 = g.matmul(xid, w1)?;
            let a1 = g.tanh(z1)?;
            let ls = g.log_softmax(a1)?;
            let picked = g.row_gather(ls, &[1])?;
            let s = g.sum(picked)?;
            g.scale(s, -1.0)
        },
        &x,
        &probe,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-3, "MLP second-order error {err}");
}

#[test]
fn frozen_softmax_values() {
    // softmax([2,1,0]) and its cross-entropy, from an independent evaluation
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(Tensor::from_vec(vec![1, 3], vec![2.0, 1.0, 0.0]).unwrap(), true)
        .unwrap();
    let s = g.softmax(x).unwrap();
    let sv = g.value(s).data().to_vec();
    assert!((sv[0] - 0.665240955775).abs() < 1e-9);
    assert!((sv[1] - 0.244728471055).abs() < 1e-9);
    assert!((sv[2] - 0.090030573170).abs() < 1e-9);

    let ls = g.log_softmax(x).unwrap();
    let picked = g.row_gather(ls, &[0]).unwrap();
    let total = g.sum(picked).unwrap();
    let nll = g.scale(total, -1.0).unwrap();
    assert!((g.value_scalar(nll).unwrap() - 0.407605964444).abs() < 1e-9);

    // gradient of CE w.r.t. logits is S − onehot
    let grads = g.backward(nll, &[x], false).unwrap();
    let gv = g.value(grads[0]).data().to_vec();
    assert!((gv[0] - (sv[0] - 1.0)).abs() < 1e-12);
    assert!((gv[1] - sv[1]).abs() < 1e-12);
    assert!((gv[2] - sv[2]).abs() < 1e-12);
}

#[test]
fn log_softmax_rows_normalize() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(
            Tensor::from_vec(vec![2, 4], vec![3.0, -1.0, 0.5, 2.0, -40.0, 0.0, 12.0, 7.5]).unwrap(),
            false,
        )
        .unwrap();
    let ls = g.log_softmax(x).unwrap();
    let data = g.value(ls).data();
    for row in 0..2 {
        let total: f64 = data[row * 4..(row + 1) * 4].iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "row {row} sums to {total}");
    }
}

#[test]
fn gradients_are_detached_without_create_graph() {
    // double-backward through a detached gradient must see a constant
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(Tensor::from_vec(vec![2], vec![0.7, -0.3]).unwrap(), true)
        .unwrap();
    let q = g.square(x).unwrap();
    let s = g.sum(q).unwrap();
    let gx = g.backward(s, &[x], false).unwrap()[0];
    let sq = g.square(gx).unwrap();
    let root = g.sum(sq).unwrap();
    let second = g.backward(root, &[x], false).unwrap()[0];
    assert_eq!(g.value(second).data(), &[0.0, 0.0]);

    // with create_graph the same construction has the true second-order value
    let mut g2 = Graph::<f64>::new();
    let x2 = g2
        .leaf(Tensor::from_vec(vec![2], vec![0.7, -0.3]).unwrap(), true)
        .unwrap();
    let q2 = g2.square(x2).unwrap();
    let s2 = g2.sum(q2).unwrap();
    let gx2 = g2.backward(s2, &[x2], true).unwrap()[0];
    let sq2 = g2.square(gx2).unwrap();
    let root2 = g2.sum(sq2).unwrap();
    let second2 = g2.backward(root2, &[x2], false).unwrap()[0];
    // d/dx Σ(2x)² = 8x
    assert!((g2.value(second2).data()[0] - 8.0 * 0.7).abs() < 1e-12);
    assert!((g2.value(second2).data()[1] - 8.0 * -0.3).abs() < 1e-12);
}
