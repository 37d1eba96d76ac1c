//! Correlation-aware channel ordering.
//!
//! Channels are placed on a line by minimizing
//! `sum_ij (v_i - v_j)^2 g_ij` under `v^T D v = 1`, whose solution is the
//! generalized eigenvector of `L v = lambda D v` (with `L = D - G` the graph
//! Laplacian of the similarity matrix) at the smallest non-zero eigenvalue.
//! Sorting that vector gives the scan order.

use crate::array::DenseArray;
use crate::eigen::{generalized_eig_smallest, EigOptions};
use crate::error::{Error, Result};
use serde::Serialize;

/// Symmetric, non-negative channel similarity with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    g: DenseArray,
}

impl SimilarityMatrix {
    pub fn new(g: DenseArray) -> Result<Self> {
        let c = g.rows();
        if g.shape() != [c, c] {
            return Err(Error::DimensionMismatch(format!(
                "similarity must be square, got {:?}",
                g.shape()
            )));
        }
        for i in 0..c {
            if g.at(i, i) != 0.0 {
                return Err(Error::ShapeMismatch(format!(
                    "diagonal entry {i} is nonzero"
                )));
            }
            for j in 0..c {
                let v = g.at(i, j);
                if !(v >= 0.0) || v != g.at(j, i) {
                    return Err(Error::ShapeMismatch(format!(
                        "entry ({i}, {j}) must be non-negative and symmetric"
                    )));
                }
            }
        }
        Ok(Self { g })
    }

    pub fn matrix(&self) -> &DenseArray {
        &self.g
    }

    pub fn channels(&self) -> usize {
        self.g.rows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|i| self.g.row(i).iter().sum())
            .collect()
    }

    /// `L = D - G`.
    pub fn laplacian(&self) -> DenseArray {
        let d = self.degrees();
        DenseArray::from_fn2(self.channels(), self.channels(), |i, j| {
            if i == j {
                d[i]
            } else {
                -self.g.at(i, j)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelPermutation {
    /// Scan order: position `k` reads channel `pi[k]`.
    pub pi: Vec<usize>,
    /// Row `k` has its single one in column `pi[k]`, so `(H x)_k = x_{pi[k]}`.
    #[serde(skip)]
    pub h: DenseArray,
    /// The channel mapping vector whose sort produced `pi`.
    pub fiedler: Vec<f64>,
    pub eigenvalue: Option<f64>,
    /// Ordering objective evaluated on `fiedler`.
    pub objective: f64,
    /// Set when the eigenproblem was degenerate and the identity was used.
    pub fallback: bool,
}

impl ChannelPermutation {
    pub fn identity(c: usize) -> Self {
        Self {
            pi: (0..c).collect(),
            h: DenseArray::identity(c),
            fiedler: vec![0.0; c],
            eigenvalue: None,
            objective: 0.0,
            fallback: true,
        }
    }

    pub fn from_order(pi: Vec<usize>) -> Result<Self> {
        let h = permutation_matrix(&pi)?;
        let c = pi.len();
        Ok(Self {
            pi,
            h,
            fiedler: vec![0.0; c],
            eigenvalue: None,
            objective: 0.0,
            fallback: false,
        })
    }
}

pub fn permutation_matrix(pi: &[usize]) -> Result<DenseArray> {
    let c = pi.len();
    let mut seen = vec![false; c];
    for &p in pi {
        if p >= c || seen[p] {
            return Err(Error::NotPermutation(format!("{pi:?}")));
        }
        seen[p] = true;
    }
    Ok(DenseArray::from_fn2(c, c, |k, j| {
        if pi[k] == j {
            1.0
        } else {
            0.0
        }
    }))
}

/// Absolute Pearson correlation between channels, pooled over every window
/// and time step of a `[M x L x C]` dataset.
/// A zero-variance channel is reported by its index.
pub fn pearson_similarity(data: &DenseArray) -> Result<SimilarityMatrix> {
    let c = *data.shape().last().expect("non-empty shape");
    let names: Vec<String> = (0..c).map(|i| i.to_string()).collect();
    pearson_similarity_named(data, &names)
}

/// As [`pearson_similarity`], reporting zero-variance channels by name.
pub fn pearson_similarity_named(data: &DenseArray, names: &[String]) -> Result<SimilarityMatrix> {
    let c = *data.shape().last().expect("non-empty shape");
    let rows = data.len() / c;
    let corr = pooled_correlation(data.data(), rows, c, names)?;
    let g = DenseArray::from_fn2(c, c, |i, j| {
        if i == j {
            0.0
        } else {
            corr[i][j].abs().min(1.0)
        }
    });
    SimilarityMatrix::new(g)
}

/// Pearson correlation matrix of `c` interleaved columns over `rows` rows.
pub(crate) fn pooled_correlation(
    data: &[f64],
    rows: usize,
    c: usize,
    names: &[String],
) -> Result<Vec<Vec<f64>>> {
    let mean: Vec<f64> = (0..c)
        .map(|j| (0..rows).map(|r| data[r * c + j]).sum::<f64>() / rows as f64)
        .collect();
    let mut cov = vec![vec![0.0; c]; c];
    for r in 0..rows {
        let row = &data[r * c..(r + 1) * c];
        for i in 0..c {
            let di = row[i] - mean[i];
            for j in i..c {
                cov[i][j] += di * (row[j] - mean[j]);
            }
        }
    }
    for (i, name) in names.iter().enumerate().take(c) {
        if !(cov[i][i] > 0.0) {
            return Err(Error::ZeroVariance {
                channel: name.clone(),
            });
        }
    }
    let mut corr = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in i..c {
            let v = cov[i][j] / (cov[i][i] * cov[j][j]).sqrt();
            corr[i][j] = v;
            corr[j][i] = v;
        }
    }
    Ok(corr)
}

/// `sum_i sum_j (v_i - v_j)^2 g_ij` over ordered pairs.
pub fn eval_ordering_objective(v: &[f64], g: &SimilarityMatrix) -> f64 {
    let m = g.matrix();
    let c = v.len();
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            let d = v[i] - v[j];
            total += d * d * m.at(i, j);
        }
    }
    total
}

/// Spectral ordering of channels. Degenerate similarity structures (an
/// isolated channel, or no eigenvalue above the threshold) fall back to the
/// identity order with `fallback` set.
pub fn solve_ordering(g: &SimilarityMatrix) -> Result<ChannelPermutation> {
    let c = g.channels();
    if c == 1 {
        return Ok(ChannelPermutation {
            fallback: false,
            ..ChannelPermutation::identity(1)
        });
    }
    let d = g.degrees();
    let dmat = DenseArray::from_fn2(c, c, |i, j| if i == j { d[i] } else { 0.0 });
    let (lambda, v) = match generalized_eig_smallest(&g.laplacian(), &dmat, EigOptions::default()) {
        Ok(pair) => pair,
        Err(e @ (Error::Degenerate { .. } | Error::SingularDegree { .. })) => {
            log::warn!("channel ordering fell back to identity: {e}");
            return Ok(ChannelPermutation::identity(c));
        }
        Err(e) => return Err(e),
    };
    let fiedler = v.into_data();
    let mut pi: Vec<usize> = (0..c).collect();
    // stable: equal values keep ascending channel index
    pi.sort_by(|&a, &b| fiedler[a].total_cmp(&fiedler[b]));
    let objective = eval_ordering_objective(&fiedler, g);
    Ok(ChannelPermutation {
        h: permutation_matrix(&pi)?,
        pi,
        fiedler,
        eigenvalue: Some(lambda),
        objective,
        fallback: false,
    })
}

/// Sum of similarities between scan-adjacent channels.
pub fn adjacency_score(pi: &[usize], g: &SimilarityMatrix) -> f64 {
    pi.windows(2).map(|w| g.matrix().at(w[0], w[1])).sum()
}
