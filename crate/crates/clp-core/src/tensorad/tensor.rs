//! Dense row-major tensors and the value-level kernels behind the graph ops.

use super::{AdError, AdResult};
use crate::scalar::{lit, Scalar};

/// Dense row-major tensor. Rank 0 (`shape == []`, one element) is the scalar
/// convention used by reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from a shape and matching backing data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> AdResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AdError::Conformance(format!(
                "shape {:?} wants {} elements, data holds {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![v; numel],
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds exactly one element (any rank).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> AdResult<F> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(AdError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Row count / column count of a 2-D tensor.
    pub fn dims2(&self) -> AdResult<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(AdError::Conformance(format!("expected 2-D, got {s:?}"))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Elementwise binary op; shapes must match exactly, except that either side
/// may be a one-element tensor broadcast against the other.
pub(crate) fn ew_binary<F: Scalar>(
    name: &str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> AdResult<Tensor<F>> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(a.shape.clone(), data)
    } else if b.is_scalar() {
        let s = b.data[0];
        Ok(a.map(|x| f(x, s)))
    } else if a.is_scalar() {
        let s = a.data[0];
        Ok(b.map(|y| f(s, y)))
    } else {
        Err(AdError::Conformance(format!(
            "{name}: shapes {:?} and {:?} neither match nor scalar-broadcast",
            a.shape, b.shape
        )))
    }
}

/// 2-D matrix product, (m×k)·(k×n) → m×n.
pub(crate) fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> AdResult<Tensor<F>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(AdError::Conformance(format!(
            "matmul: inner dims {k} vs {k2} (shapes {:?}·{:?})",
            a.shape, b.shape
        )));
    }
    let mut out = vec![F::zero(); m * n];
    // i-k-j order keeps the inner loop contiguous over both `b` and `out`.
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub(crate) fn transpose<F: Scalar>(a: &Tensor<F>) -> AdResult<Tensor<F>> {
    let (m, n) = a.dims2()?;
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

/// Picks one column per row: (m×c, idx of length m) → m×1.
pub(crate) fn row_gather<F: Scalar>(a: &Tensor<F>, idx: &[usize]) -> AdResult<Tensor<F>> {
    let (m, c) = a.dims2()?;
    if idx.len() != m {
        return Err(AdError::Conformance(format!(
            "row_gather: {} indices for {} rows",
            idx.len(),
            m
        )));
    }
    let mut out = Vec::with_capacity(m);
    for (i, &j) in idx.iter().enumerate() {
        if j >= c {
            return Err(AdError::Domain(format!(
                "row_gather: index {j} out of 0..{c} at row {i}"
            )));
        }
        out.push(a.data[i * c + j]);
    }
    Tensor::from_vec(vec![m, 1], out)
}

/// Adjoint of `row_gather`: scatters an m×1 column into zeros of m×ncols.
pub(crate) fn row_scatter<F: Scalar>(
    v: &Tensor<F>,
    idx: &[usize],
    ncols: usize,
) -> AdResult<Tensor<F>> {
    let (m, one) = v.dims2()?;
    if one != 1 || idx.len() != m {
        return Err(AdError::Conformance(format!(
            "row_scatter: value shape {:?}, {} indices",
            v.shape,
            idx.len()
        )));
    }
    let mut out = vec![F::zero(); m * ncols];
    for (i, &j) in idx.iter().enumerate() {
        out[i * ncols + j] = v.data[i];
    }
    Tensor::from_vec(vec![m, ncols], out)
}

/// Flattens and concatenates the parts into a 1-D tensor.
pub(crate) fn concat<F: Scalar>(parts: &[&Tensor<F>]) -> Tensor<F> {
    let total = parts.iter().map(|t| t.numel()).sum();
    let mut data = Vec::with_capacity(total);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor {
        shape: vec![total],
        data,
    }
}

/// Copies `numel(shape)` elements starting at flat `offset` into a tensor of
/// the requested shape.
pub(crate) fn slice<F: Scalar>(
    a: &Tensor<F>,
    offset: usize,
    shape: &[usize],
) -> AdResult<Tensor<F>> {
    let n: usize = shape.iter().product();
    if offset + n > a.numel() {
        return Err(AdError::Conformance(format!(
            "slice: offset {offset} + len {n} exceeds {} elements",
            a.numel()
        )));
    }
    Tensor::from_vec(shape.to_vec(), a.data[offset..offset + n].to_vec())
}

/// Adjoint of `slice`: embeds the flattened child at `offset` into zeros of
/// the parent shape.
pub(crate) fn pad_scatter<F: Scalar>(
    v: &Tensor<F>,
    offset: usize,
    shape: &[usize],
) -> AdResult<Tensor<F>> {
    let n: usize = shape.iter().product();
    if offset + v.numel() > n {
        return Err(AdError::Conformance(format!(
            "pad_scatter: offset {offset} + len {} exceeds {n}",
            v.numel()
        )));
    }
    let mut data = vec![F::zero(); n];
    data[offset..offset + v.numel()].copy_from_slice(&v.data);
    Tensor::from_vec(shape.to_vec(), data)
}

pub(crate) fn sum_all<F: Scalar>(a: &Tensor<F>) -> Tensor<F> {
    Tensor::scalar(a.data.iter().copied().sum())
}

pub(crate) fn mean_all<F: Scalar>(a: &Tensor<F>) -> AdResult<Tensor<F>> {
    if a.numel() == 0 {
        return Err(AdError::Domain("mean of empty tensor".into()));
    }
    let n = lit::<F>(a.numel() as f64);
    Ok(Tensor::scalar(a.data.iter().copied().sum::<F>() / n))
}

pub(crate) fn sign_of<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
