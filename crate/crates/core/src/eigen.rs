//! Symmetric generalized eigensolver for `L v = lambda D v` with diagonal `D`.
//!
//! The problem is reduced to the standard symmetric form
//! `S = D^{-1/2} L D^{-1/2}`, diagonalized with cyclic Jacobi rotations, and
//! the eigenvectors are mapped back through `v = D^{-1/2} w`.

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct EigOptions {
    pub zero_threshold: f64,
    pub max_dim: usize,
}

impl Default for EigOptions {
    fn default() -> Self {
        Self {
            zero_threshold: 1e-8,
            max_dim: 256,
        }
    }
}

/// Full eigendecomposition of a symmetric matrix. Returns eigenvalues in
/// ascending order and the matching unit eigenvectors as columns.
pub fn jacobi_symmetric(a: &DenseArray) -> Result<(Vec<f64>, DenseArray)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "eigensolver needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let mut m = a.data().to_vec();
    let mut v = DenseArray::identity(n).into_data();
    let idx = |i: usize, j: usize| i * n + j;

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[idx(i, j)] * m[idx(i, j)])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[idx(q, q)] - m[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[idx(k, p)];
                    let mkq = m[idx(k, q)];
                    m[idx(k, p)] = c * mkp - s * mkq;
                    m[idx(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[idx(p, k)];
                    let mqk = m[idx(q, k)];
                    m[idx(p, k)] = c * mpk - s * mqk;
                    m[idx(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[idx(k, p)];
                    let vkq = v[idx(k, q)];
                    v[idx(k, p)] = c * vkp - s * vkq;
                    v[idx(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[idx(i, i)].total_cmp(&m[idx(j, j)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[idx(i, i)]).collect();
    let vectors = DenseArray::from_fn2(n, n, |r, c| v[idx(r, order[c])]);
    Ok((values, vectors))
}

/// Eigenpair of `L v = lambda D v` with the smallest eigenvalue strictly
/// above the zero threshold. The vector is scaled to `v^T D v = 1` and its
/// first nonzero entry is made positive.
pub fn generalized_eig_smallest(
    l: &DenseArray,
    d: &DenseArray,
    opts: EigOptions,
) -> Result<(f64, DenseArray)> {
    let n = l.rows();
    if l.cols() != n || d.rows() != n || d.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "L {:?} and D {:?} must be square and equal",
            l.shape(),
            d.shape()
        )));
    }
    if n > opts.max_dim {
        return Err(Error::TooLarge {
            n,
            cap: opts.max_dim,
        });
    }
    let diag: Vec<f64> = (0..n).map(|i| d.at(i, i)).collect();
    if let Some((index, &value)) = diag.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
        return Err(Error::SingularDegree { index, value });
    }
    let inv_sqrt: Vec<f64> = diag.iter().map(|x| 1.0 / x.sqrt()).collect();
    let s = DenseArray::from_fn2(n, n, |i, j| {
        // symmetrize to absorb rounding asymmetry in the caller's L
        0.5 * (l.at(i, j) + l.at(j, i)) * inv_sqrt[i] * inv_sqrt[j]
    });
    let (values, vectors) = jacobi_symmetric(&s)?;
    let k = values
        .iter()
        .position(|&x| x > opts.zero_threshold)
        .ok_or(Error::Degenerate {
            threshold: opts.zero_threshold,
        })?;
    let mut v: Vec<f64> = (0..n).map(|i| vectors.at(i, k) * inv_sqrt[i]).collect();
    let norm: f64 = v
        .iter()
        .zip(&diag)
        .map(|(x, di)| x * x * di)
        .sum::<f64>()
        .sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok((values[k], DenseArray::vector(v)))
}
