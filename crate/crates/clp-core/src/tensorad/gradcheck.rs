//! Finite-difference oracles for first- and second-order gradients.
//!
//! The check rebuilds the graph from scratch for every probe, so the
//! analytic side (one `backward` call) and the numeric side (central
//! differences of fresh forward evaluations) share no state.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::{AdError, AdResult};
use crate::scalar::{lit, Scalar};

/// Max over coordinates of `|analytic − central| / max(1, |analytic|)` for a
/// scalar-valued function of `x` expressed as a graph builder.
pub fn finite_diff_check<F, B>(build: &B, x: &Tensor<F>, h: F) -> AdResult<F>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, NodeId) -> AdResult<NodeId>,
{
    if h <= F::zero() {
        return Err(AdError::Contract("finite_diff_check: h must be > 0".into()));
    }
    let analytic = {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), true)?;
        let root = build(&mut g, xid)?;
        let grads = g.backward(root, &[xid], false)?;
        g.value(grads[0]).clone()
    };
    let eval = |probe: &Tensor<F>| -> AdResult<F> {
        let mut g = Graph::new();
        let xid = g.leaf(probe.clone(), false)?;
        let root = build(&mut g, xid)?;
        let v = g.value_scalar(root)?;
        if !v.is_finite() {
            return Err(AdError::Numeric("finite_diff_check: f non-finite".into()));
        }
        Ok(v)
    };
    let mut probe = x.clone();
    let mut max_rel = F::zero();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (lit::<F>(2.0) * h);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / F::one().max(a.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Second-order check: compares the double-backward Hessian-vector product
/// `H·probe` against central differences of the analytic first gradient
/// projected onto `probe`.
pub fn finite_diff_check_grad<F, B>(
    build: &B,
    x: &Tensor<F>,
    probe: &Tensor<F>,
    h: F,
) -> AdResult<F>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, NodeId) -> AdResult<NodeId>,
{
    if probe.shape() != x.shape() {
        return Err(AdError::Conformance(format!(
            "probe shape {:?} must match x {:?}",
            probe.shape(),
            x.shape()
        )));
    }
    let hvp = {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), true)?;
        let root = build(&mut g, xid)?;
        let gx = g.backward(root, &[xid], true)?[0];
        let p = g.constant(probe.clone())?;
        let prod = g.mul(gx, p)?;
        let s = g.sum(prod)?;
        let hv = g.backward(s, &[xid], false)?;
        g.value(hv[0]).clone()
    };
    // Directional first gradient g(x)·probe via a fresh analytic backward.
    let grad_dot = |at: &Tensor<F>| -> AdResult<F> {
        let mut g = Graph::new();
        let xid = g.leaf(at.clone(), true)?;
        let root = build(&mut g, xid)?;
        let gx = g.backward(root, &[xid], false)?[0];
        Ok(g.value(gx)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| a * b)
            .sum())
    };
    let mut shifted = x.clone();
    let mut max_rel = F::zero();
    for i in 0..x.numel() {
        let orig = shifted.data()[i];
        shifted.data_mut()[i] = orig + h;
        let fp = grad_dot(&shifted)?;
        shifted.data_mut()[i] = orig - h;
        let fm = grad_dot(&shifted)?;
        shifted.data_mut()[i] = orig;
        let central = (fp - fm) / (lit::<F>(2.0) * h);
        let a = hvp.data()[i];
        let rel = (a - central).abs() / F::one().max(a.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Deterministic tensor with values cycling through a fixed pattern, offset
/// so different constants in one sweep don't coincide.
fn pattern<F: Scalar>(shape: &[usize], phase: usize) -> Tensor<F> {
    const VALS: [f64; 7] = [0.62, -0.48, 1.21, 0.33, -1.05, 0.87, -0.19];
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| lit::<F>(VALS[(i + phase) % VALS.len()]))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("pattern tensor")
}

/// Like [`pattern`] but strictly positive (for `log`, `sqrt`, `recip`).
fn positive_pattern<F: Scalar>(shape: &[usize], phase: usize) -> Tensor<F> {
    const VALS: [f64; 7] = [0.62, 0.48, 1.21, 0.33, 1.05, 0.87, 0.19];
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| lit::<F>(VALS[(i + phase) % VALS.len()]))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("pattern tensor")
}

/// Runs one nontrivial scalar function through [`finite_diff_check`] for
/// every differentiable primitive, on fixed deterministic inputs, and
/// returns the worst error seen. Keeping this in the library lets both the
/// integration suite and the acceptance gate share one oracle.
pub fn primitive_gradient_sweep<F: Scalar>() -> AdResult<F> {
    let h = lit::<F>(1e-5);
    let mut worst = F::zero();
    let mut run = |x: Tensor<F>,
                   build: &dyn Fn(&mut Graph<F>, NodeId) -> AdResult<NodeId>|
     -> AdResult<()> {
        let e = finite_diff_check(&build, &x, h)?;
        if e > worst {
            worst = e;
        }
        Ok(())
    };

    // add + mul: Σ (x + c) ⊙ x
    run(pattern(&[2, 3], 0), &|g, x| {
        let c = g.constant(pattern(&[2, 3], 1))?;
        let s = g.add(x, c)?;
        let m = g.mul(s, x)?;
        g.sum(m)
    })?;
    // sub + square
    run(pattern(&[2, 3], 2), &|g, x| {
        let c = g.constant(pattern(&[2, 3], 3))?;
        let d = g.sub(x, c)?;
        let q = g.square(d)?;
        g.sum(q)
    })?;
    // matmul, variable on the left
    run(pattern(&[2, 3], 4), &|g, x| {
        let b = g.constant(pattern(&[3, 2], 5))?;
        let m = g.matmul(x, b)?;
        let q = g.square(m)?;
        g.sum(q)
    })?;
    // matmul, variable on the right
    run(pattern(&[3, 2], 6), &|g, x| {
        let a = g.constant(pattern(&[2, 3], 0))?;
        let m = g.matmul(a, x)?;
        let q = g.square(m)?;
        g.sum(q)
    })?;
    // relu (inputs away from the kink)
    run(pattern(&[2, 3], 1), &|g, x| {
        let r = g.relu(x)?;
        let q = g.square(r)?;
        g.sum(q)
    })?;
    // tanh
    run(pattern(&[2, 3], 2), &|g, x| {
        let t = g.tanh(x)?;
        let q = g.square(t)?;
        g.sum(q)
    })?;
    // exp
    run(pattern(&[2, 3], 3), &|g, x| {
        let e = g.exp(x)?;
        let q = g.square(e)?;
        g.sum(q)
    })?;
    // log
    run(positive_pattern(&[2, 3], 0), &|g, x| {
        let l = g.log(x)?;
        let q = g.square(l)?;
        g.sum(q)
    })?;
    // sqrt
    run(positive_pattern(&[2, 3], 1), &|g, x| {
        let s = g.sqrt(x)?;
        let c = g.constant(pattern(&[2, 3], 4))?;
        let m = g.mul(s, c)?;
        g.sum(m)
    })?;
    // recip
    run(positive_pattern(&[2, 3], 2), &|g, x| {
        let r = g.recip(x)?;
        let q = g.square(r)?;
        g.sum(q)
    })?;
    // scale
    run(pattern(&[2, 3], 4), &|g, x| {
        let q = g.square(x)?;
        let s = g.sum(q)?;
        g.scale(s, lit::<F>(2.5))
    })?;
    // clamp (coordinates stay > 1e-3 from the bounds)
    run(pattern(&[2, 3], 5), &|g, x| {
        let c = g.clamp(x, lit::<F>(-0.5), lit::<F>(0.8))?;
        let q = g.square(c)?;
        g.sum(q)
    })?;
    // mean
    run(pattern(&[2, 3], 6), &|g, x| {
        let q = g.square(x)?;
        g.mean(q)
    })?;
    // transpose
    run(pattern(&[2, 3], 0), &|g, x| {
        let t = g.transpose(x)?;
        let b = g.constant(pattern(&[2, 1], 1))?;
        let m = g.matmul(t, b)?;
        let q = g.square(m)?;
        g.sum(q)
    })?;
    // row_gather
    run(pattern(&[3, 4], 1), &|g, x| {
        let picked = g.row_gather(x, &[2, 0, 3])?;
        let q = g.square(picked)?;
        g.sum(q)
    })?;
    // concat
    run(pattern(&[4], 2), &|g, x| {
        let c = g.constant(pattern(&[3], 3))?;
        let cc = g.concat(&[x, c])?;
        let q = g.square(cc)?;
        g.sum(q)
    })?;
    // slice
    run(pattern(&[6], 3), &|g, x| {
        let s = g.slice(x, 1, &[4])?;
        let q = g.square(s)?;
        g.sum(q)
    })?;
    // log_softmax
    run(pattern(&[2, 3], 4), &|g, x| {
        let ls = g.log_softmax(x)?;
        let c = g.constant(pattern(&[2, 3], 5))?;
        let m = g.mul(ls, c)?;
        g.sum(m)
    })?;
    // softmax
    run(pattern(&[2, 3], 5), &|g, x| {
        let s = g.softmax(x)?;
        let c = g.constant(pattern(&[2, 3], 6))?;
        let m = g.mul(s, c)?;
        g.sum(m)
    })?;
    Ok(worst)
}

/// Second-order sweep: double-backward Hessian-vector products against
/// finite differences of analytic first gradients, over compositions that
/// mirror the training graphs (dense layers, softmax losses, squared
/// gradients). Returns the worst error.
pub fn second_order_sweep<F: Scalar>() -> AdResult<F> {
    let h = lit::<F>(1e-4);
    let mut worst = F::zero();
    let mut run = |x: Tensor<F>,
                   probe: Tensor<F>,
                   build: &dyn Fn(&mut Graph<F>, NodeId) -> AdResult<NodeId>|
     -> AdResult<()> {
        let e = finite_diff_check_grad(&build, &x, &probe, h)?;
        if e > worst {
            worst = e;
        }
        Ok(())
    };

    // two-layer tanh MLP on the input
    run(pattern(&[1, 4], 0), pattern(&[1, 4], 3), &|g, x| {
        let w1 = g.constant(pattern(&[4, 3], 1))?;
        let w2 = g.constant(pattern(&[3, 1], 2))?;
        let z = g.matmul(x, w1)?;
        let a = g.tanh(z)?;
        let o = g.matmul(a, w2)?;
        let q = g.square(o)?;
        g.sum(q)
    })?;
    // weighted log_softmax (cross-entropy shape)
    run(pattern(&[2, 3], 1), pattern(&[2, 3], 4), &|g, x| {
        let ls = g.log_softmax(x)?;
        let c = g.constant(pattern(&[2, 3], 2))?;
        let m = g.mul(ls, c)?;
        g.sum(m)
    })?;
    // squared softmax (saliency shape)
    run(pattern(&[2, 3], 2), pattern(&[2, 3], 5), &|g, x| {
        let s = g.softmax(x)?;
        let q = g.square(s)?;
        g.sum(q)
    })?;
    // relu chain away from kinks
    run(pattern(&[1, 4], 3), pattern(&[1, 4], 6), &|g, x| {
        let w = g.constant(pattern(&[4, 2], 4))?;
        let z = g.matmul(x, w)?;
        let r = g.relu(z)?;
        let q = g.square(r)?;
        g.sum(q)
    })?;
    // exp/log/recip composition
    run(positive_pattern(&[3], 1), pattern(&[3], 0), &|g, x| {
        let l = g.log(x)?;
        let e = g.exp(l)?;
        let r = g.recip(e)?;
        let q = g.square(r)?;
        g.sum(q)
    })?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let err = finite_diff_check(
            &|g: &mut Graph<f64>, x| g.sum(x),
            &t(&[4], &[0.3, -1.2, 2.0, 5.5]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "sum should be exact, err = {err}");
    }

    #[test]
    fn sum_exp_matches() {
        let err = finite_diff_check(
            &|g: &mut Graph<f64>, x| {
                let e = g.exp(x)?;
                g.sum(e)
            },
            &t(&[2], &[0.0, 1.0]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn rejects_bad_step() {
        let r = finite_diff_check(&|g: &mut Graph<f64>, x| g.sum(x), &t(&[1], &[0.0]), 0.0);
        assert!(matches!(r, Err(AdError::Contract(_))));
    }
}
