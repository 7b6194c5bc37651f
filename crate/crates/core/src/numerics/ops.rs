//! Forward and backward kernels. Each backward takes the upstream gradient and
//! whatever the forward saved, and returns gradients for the inputs.

use crate::scalar::Scalar;

use super::{NumericsError, Tensor};

fn require_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(), NumericsError> {
    if t.rank() != 2 {
        return Err(NumericsError::Shape(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `C = A · B`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    require_matrix(a, "matmul lhs")?;
    require_matrix(b, "matmul rhs")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul inner dims differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(dA, dB) = (dC · Bᵀ, Aᵀ · dC)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), NumericsError> {
    let da = matmul(dc, &b.transpose())?;
    let db = matmul(&a.transpose(), dc)?;
    Ok((da, db))
}

/// Adds the length-`d` vector `b` to every row of the `m × d` matrix `x`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    require_matrix(x, "add_bias input")?;
    let d = x.cols();
    if b.len() != d {
        return Err(NumericsError::Shape(format!(
            "bias of length {} cannot broadcast over {} columns",
            b.len(),
            d
        )));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Column sums of `dy`, shaped like the bias.
pub fn add_bias_backward<T: Scalar>(dy: &Tensor<T>, bias_shape: &[usize]) -> Tensor<T> {
    let mut db = vec![T::zero(); dy.cols()];
    for i in 0..dy.rows() {
        for (acc, &g) in db.iter_mut().zip(dy.row(i)) {
            *acc += g;
        }
    }
    Tensor::from_vec(bias_shape.to_vec(), db).expect("bias shape matches column count")
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("same shape")
}

/// Column-wise max over the rows selected by `mask`, as a `1 × d` row.
///
/// Ties resolve to the lowest row index so the backward routing is
/// deterministic.
pub fn masked_max_pool<T: Scalar>(
    x: &Tensor<T>,
    mask: &[bool],
) -> Result<(Tensor<T>, Vec<usize>), NumericsError> {
    require_matrix(x, "pool input")?;
    let (n, d) = (x.rows(), x.cols());
    if mask.len() != n {
        return Err(NumericsError::Shape(format!(
            "pool mask has {} entries for {n} rows",
            mask.len()
        )));
    }
    let first = mask
        .iter()
        .position(|&m| m)
        .ok_or_else(|| NumericsError::Pool("mask selects no rows".into()))?;
    let mut best: Vec<T> = x.row(first).to_vec();
    let mut argmax = vec![first; d];
    for i in (first + 1)..n {
        if !mask[i] {
            continue;
        }
        for (j, &v) in x.row(i).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                argmax[j] = i;
            }
        }
    }
    Ok((Tensor::row_vector(best), argmax))
}

/// Routes each pooled gradient back to the row that produced the maximum.
pub fn masked_max_pool_backward<T: Scalar>(
    argmax: &[usize],
    rows: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let d = argmax.len();
    let mut dx = Tensor::zeros(&[rows, d]);
    for (j, (&r, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        let cur = dx.get(r, j);
        dx.set(r, j, cur + g);
    }
    dx
}

/// Concatenates vectors (any shape, flattened) into one `1 × Σd` row.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::row_vector(data)
}

/// Splits a concatenated gradient back into pieces of the given shapes.
pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let len: usize = s.iter().product();
            let piece = dy.data()[offset..offset + len].to_vec();
            offset += len;
            Tensor::from_vec(s.clone(), piece).expect("split matches recorded shape")
        })
        .collect()
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `logits` against class `gold`.
///
/// Returns `(loss, softmax(logits) - onehot(gold))`.
pub fn softmax_xent<T: Scalar>(logits: &[T], gold: usize) -> Result<(T, Vec<T>), NumericsError> {
    if gold >= logits.len() {
        return Err(NumericsError::Label {
            gold,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("logits".into()));
    }
    let (top, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    // ln Σ exp(z - max) = ln(1 + rest) keeps precision when one logit dominates
    let rest: T = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    let loss = (max - logits[gold]) + log_norm;
    let mut grad: Vec<T> = logits
        .iter()
        .map(|&z| ((z - max) - log_norm).exp())
        .collect();
    grad[gold] -= T::one();
    Ok((loss, grad))
}
