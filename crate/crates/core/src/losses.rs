//! Training objective: reconstruction, Fourier-domain and channel
//! correlation-distribution (MMD) terms.
//!
//! Each term exists as a graph node builder (`*_node`) for training and as a
//! plain function on arrays.

use crate::array::DenseArray;
use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }
}

fn same_shape(a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse_node(g: &mut Graph, x0: Var, x_out: Var) -> Result<Var> {
    same_shape(g.value(x0), g.value(x_out))?;
    let d = g.sub(x_out, x0)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `|DFT(x0) - DFT(x_out)|^2` summed over frequencies, averaged over the
/// columns (channels) of a `[L x C]` window.
pub fn fourier_node(g: &mut Graph, x0: Var, x_out: Var) -> Result<Var> {
    same_shape(g.value(x0), g.value(x_out))?;
    let channels = g.value(x0).cols() as f64;
    let d = g.sub(x_out, x0)?;
    let re = g.dft_re(d);
    let im = g.dft_im(d);
    let re2 = g.square(re);
    let im2 = g.square(im);
    let total = g.add(re2, im2)?;
    let s = g.sum(total);
    Ok(g.scale(s, 1.0 / channels))
}

/// Number of unordered channel pairs.
pub fn pair_count(c: usize) -> usize {
    c * c.saturating_sub(1) / 2
}

/// Pairs `(i, j)`, `i < j`, in row-major order.
pub fn channel_pairs(c: usize) -> Vec<(usize, usize)> {
    (0..c)
        .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
        .collect()
}

struct Centered {
    cols: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn center(x: &DenseArray) -> Centered {
    let (l, c) = (x.rows(), x.cols());
    let mut cols = Vec::with_capacity(c);
    let mut norms = Vec::with_capacity(c);
    for j in 0..c {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / l as f64;
        let v: Vec<f64> = col.iter().map(|a| a - mean).collect();
        norms.push(v.iter().map(|a| a * a).sum::<f64>().sqrt());
        cols.push(v);
    }
    Centered { cols, norms }
}

// Columns whose centered norm falls below this count as constant.
const DEGENERATE_NORM: f64 = 1e-12;

fn pair_value(cen: &Centered, i: usize, j: usize) -> Option<f64> {
    let (ni, nj) = (cen.norms[i], cen.norms[j]);
    if ni < DEGENERATE_NORM || nj < DEGENERATE_NORM {
        return None;
    }
    let dot: f64 = cen.cols[i]
        .iter()
        .zip(&cen.cols[j])
        .map(|(a, b)| a * b)
        .sum();
    Some((dot / (ni * nj)).clamp(-1.0, 1.0))
}

/// Per-window Pearson correlations of every channel pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSample {
    /// `[B x P]`
    pub values: DenseArray,
    /// Number of (window, pair) entries set to 0 because a channel was
    /// constant inside the window.
    pub degenerate: usize,
}

impl CorrelationSample {
    /// Values of pair `p` across windows.
    pub fn pair(&self, p: usize) -> Vec<f64> {
        self.values.column(p)
    }
}

fn window_correlations(x: &DenseArray) -> (Vec<f64>, usize) {
    let cen = center(x);
    let mut degenerate = 0;
    let vals = channel_pairs(x.cols())
        .into_iter()
        .map(|(i, j)| {
            pair_value(&cen, i, j).unwrap_or_else(|| {
                degenerate += 1;
                0.0
            })
        })
        .collect();
    (vals, degenerate)
}

/// Pearson correlation per pair per window of a `[B x L x C]` batch.
pub fn pairwise_correlations(batch: &DenseArray) -> Result<CorrelationSample> {
    if batch.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [B, L, C], got {:?}",
            batch.shape()
        )));
    }
    let (b, l, c) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    if l < 2 || c < 2 {
        return Err(Error::InsufficientData(format!(
            "correlations need L >= 2 and C >= 2, got L={l}, C={c}"
        )));
    }
    let mut data = Vec::with_capacity(b * pair_count(c));
    let mut degenerate = 0;
    for w in 0..b {
        let (vals, deg) = window_correlations(&batch.slab(w));
        data.extend(vals);
        degenerate += deg;
    }
    Ok(CorrelationSample {
        values: DenseArray::matrix(b, pair_count(c), data)?,
        degenerate,
    })
}

struct CorrelationBackward;

impl Backward for CorrelationBackward {
    fn backward(
        &self,
        grad_out: &DenseArray,
        inputs: &[&DenseArray],
        output: &DenseArray,
    ) -> Result<Vec<DenseArray>> {
        let x = inputs[0];
        let (l, c) = (x.rows(), x.cols());
        let cen = center(x);
        let mut gx = DenseArray::zeros(&[l, c]);
        for (p, (i, j)) in channel_pairs(c).into_iter().enumerate() {
            let (ni, nj) = (cen.norms[i], cen.norms[j]);
            if ni < DEGENERATE_NORM || nj < DEGENERATE_NORM {
                continue;
            }
            let r = output.data()[p];
            let go = grad_out.data()[p];
            let (a, b) = (&cen.cols[i], &cen.cols[j]);
            // d r / d a = b / (|a||b|) - r a / |a|^2 (a, b centered, so the
            // result is already mean-free)
            for k in 0..l {
                let da = b[k] / (ni * nj) - r * a[k] / (ni * ni);
                let db = a[k] / (ni * nj) - r * b[k] / (nj * nj);
                gx.data_mut()[k * c + i] += go * da;
                gx.data_mut()[k * c + j] += go * db;
            }
        }
        Ok(vec![gx])
    }
}

/// Correlation vector `[P]` of one `[L x C]` window.
pub fn correlation_node(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.value(x);
    if xv.shape().len() != 2 || xv.rows() < 2 || xv.cols() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlations need a [L >= 2, C >= 2] window, got {:?}",
            xv.shape()
        )));
    }
    let (vals, _) = window_correlations(xv);
    Ok(g.custom(
        &[x],
        DenseArray::vector(vals),
        Box::new(CorrelationBackward),
    ))
}

fn rbf(a: f64, b: f64, sigma: f64) -> f64 {
    (-(a - b) * (a - b) / (2.0 * sigma * sigma)).exp()
}

fn check_mmd_args(x: &[f64], y: &[f64], sigma: f64) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput(
            "MMD needs two non-empty sample sets".into(),
        ));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::NonFinite(format!("MMD bandwidth {sigma}")));
    }
    Ok(())
}

fn mean_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let s: f64 = x
        .iter()
        .map(|&a| y.iter().map(|&b| rbf(a, b, sigma)).sum::<f64>())
        .sum();
    s / (x.len() * y.len()) as f64
}

/// Biased squared MMD with a Gaussian kernel
/// `k(a, b) = exp(-(a - b)^2 / (2 sigma^2))`.
pub fn mmd(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_mmd_args(x, y, sigma)?;
    Ok(mean_kernel(x, x, sigma) + mean_kernel(y, y, sigma) - 2.0 * mean_kernel(x, y, sigma))
}

struct MmdBackward {
    sigma: f64,
}

impl MmdBackward {
    /// Gradient of the MMD wrt each entry of `own`.
    fn side(&self, own: &[f64], other: &[f64], go: f64) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        let (n, m) = (own.len() as f64, other.len() as f64);
        own.iter()
            .map(|&a| {
                // dk(a, b)/da = -k (a - b) / sigma^2
                let within: f64 = own
                    .iter()
                    .map(|&b| -rbf(a, b, self.sigma) * (a - b) / s2)
                    .sum();
                let across: f64 = other
                    .iter()
                    .map(|&b| -rbf(a, b, self.sigma) * (a - b) / s2)
                    .sum();
                go * (2.0 * within / (n * n) - 2.0 * across / (n * m))
            })
            .collect()
    }
}

impl Backward for MmdBackward {
    fn backward(
        &self,
        grad_out: &DenseArray,
        inputs: &[&DenseArray],
        _output: &DenseArray,
    ) -> Result<Vec<DenseArray>> {
        let (x, y) = (inputs[0], inputs[1]);
        let go = grad_out.data()[0];
        let gx = self.side(x.data(), y.data(), go);
        let gy = self.side(y.data(), x.data(), go);
        Ok(vec![
            DenseArray::new(x.shape().to_vec(), gx)?,
            DenseArray::new(y.shape().to_vec(), gy)?,
        ])
    }
}

/// Squared MMD between the entries of two nodes, as a scalar node.
pub fn mmd_node(g: &mut Graph, x: Var, y: Var, sigma: f64) -> Result<Var> {
    let value = mmd(g.value(x).data(), g.value(y).data(), sigma)?;
    Ok(g.custom(
        &[x, y],
        DenseArray::scalar(value),
        Box::new(MmdBackward { sigma }),
    ))
}

/// Per-pair kernel bandwidths: the median absolute difference between
/// real correlation samples of that pair (at most `MEDIAN_SAMPLES` evenly
/// strided windows are used), floored at `MIN_BANDWIDTH`.
pub fn median_bandwidths(real: &CorrelationSample) -> Vec<f64> {
    let b = real.values.rows();
    let stride = b.div_ceil(MEDIAN_SAMPLES).max(1);
    (0..real.values.cols())
        .map(|p| {
            let vals: Vec<f64> = real.pair(p).into_iter().step_by(stride).collect();
            let mut d: Vec<f64> = Vec::with_capacity(vals.len() * vals.len() / 2);
            for i in 0..vals.len() {
                for j in i + 1..vals.len() {
                    d.push((vals[i] - vals[j]).abs());
                }
            }
            if d.is_empty() {
                return 1.0;
            }
            d.sort_by(f64::total_cmp);
            let mid = d.len() / 2;
            let med = if d.len().is_multiple_of(2) {
                0.5 * (d[mid - 1] + d[mid])
            } else {
                d[mid]
            };
            med.max(MIN_BANDWIDTH)
        })
        .collect()
}

pub const MEDIAN_SAMPLES: usize = 512;
pub const MIN_BANDWIDTH: f64 = 1e-3;

/// Mean over channel pairs of the MMD between the per-window correlation
/// distributions of two batches of windows.
pub fn correlation_shift_node(
    g: &mut Graph,
    x0: &[Var],
    x_out: &[Var],
    bandwidths: &[f64],
) -> Result<Var> {
    if x0.len() < 2 || x_out.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation distributions need >= 2 windows per batch, got {} and {}",
            x0.len(),
            x_out.len()
        )));
    }
    let real: Vec<Var> = x0
        .iter()
        .map(|&w| correlation_node(g, w))
        .collect::<Result<_>>()?;
    let fake: Vec<Var> = x_out
        .iter()
        .map(|&w| correlation_node(g, w))
        .collect::<Result<_>>()?;
    let real = g.concat_rows(&real)?;
    let fake = g.concat_rows(&fake)?;
    let p = g.value(real).cols();
    if bandwidths.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} bandwidths for {p} channel pairs",
            bandwidths.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, &sigma) in bandwidths.iter().enumerate() {
        let a = g.slice_cols(real, i, 1)?;
        let b = g.slice_cols(fake, i, 1)?;
        let m = mmd_node(g, a, b, sigma)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    let total = total.expect("at least one pair");
    Ok(g.scale(total, 1.0 / p as f64))
}

/// Loss terms of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub ddpm: T,
    pub fourier: T,
    pub correlation: T,
    pub total: T,
}

impl LossBreakdown<Var> {
    pub fn values(&self, g: &Graph) -> LossBreakdown<f64> {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            ddpm: v(self.ddpm),
            fourier: v(self.fourier),
            correlation: v(self.correlation),
            total: v(self.total),
        }
    }
}

fn batch_mean(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n))
}

/// `L = L_ddpm + lambda1 L_fourier + lambda2 L_corr` over a batch of
/// windows. Reconstruction and Fourier terms are averaged over windows.
/// The correlation term is computed only for `C >= 2` and at least two
/// windows, and is zero otherwise.
pub fn total_loss_node(
    g: &mut Graph,
    x0: &[Var],
    x_out: &[Var],
    weights: LossWeights,
    bandwidths: &[f64],
) -> Result<LossBreakdown<Var>> {
    if x0.is_empty() || x0.len() != x_out.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} clean windows, {} predictions",
            x0.len(),
            x_out.len()
        )));
    }
    let mse: Vec<Var> = x0
        .iter()
        .zip(x_out)
        .map(|(&a, &b)| mse_node(g, a, b))
        .collect::<Result<_>>()?;
    let ddpm = batch_mean(g, mse)?;
    let four: Vec<Var> = x0
        .iter()
        .zip(x_out)
        .map(|(&a, &b)| fourier_node(g, a, b))
        .collect::<Result<_>>()?;
    let fourier = batch_mean(g, four)?;
    let channels = g.value(x0[0]).cols();
    let correlation = if channels >= 2 && x0.len() >= 2 {
        correlation_shift_node(g, x0, x_out, bandwidths)?
    } else {
        g.constant(DenseArray::scalar(0.0))
    };
    let wf = g.scale(fourier, weights.lambda1);
    let wc = g.scale(correlation, weights.lambda2);
    let total = g.add(ddpm, wf)?;
    let total = g.add(total, wc)?;
    Ok(LossBreakdown {
        ddpm,
        fourier,
        correlation,
        total,
    })
}

fn with_graph<T>(f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
    let mut g = Graph::new();
    f(&mut g)
}

pub fn ddpm_loss(x0: &DenseArray, x_out: &DenseArray) -> Result<f64> {
    same_shape(x0, x_out)?;
    Ok(x0
        .data()
        .iter()
        .zip(x_out.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x0.len() as f64)
}

pub fn fourier_loss(x0: &DenseArray, x_out: &DenseArray) -> Result<f64> {
    with_graph(|g| {
        let a = g.constant(x0.clone());
        let b = g.constant(x_out.clone());
        let l = fourier_node(g, a, b)?;
        Ok(g.value(l).data()[0])
    })
}

/// Batches are `[B x L x C]`.
pub fn correlation_shift_loss(
    x0: &DenseArray,
    x_out: &DenseArray,
    bandwidths: &[f64],
) -> Result<f64> {
    same_shape(x0, x_out)?;
    if x0.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [B, L, C], got {:?}",
            x0.shape()
        )));
    }
    let real = pairwise_correlations(x0)?;
    let fake = pairwise_correlations(x_out)?;
    if real.values.rows() < 2 {
        return Err(Error::InsufficientData(
            "correlation distributions need >= 2 windows".into(),
        ));
    }
    if bandwidths.len() != real.values.cols() {
        return Err(Error::DimensionMismatch(format!(
            "{} bandwidths for {} channel pairs",
            bandwidths.len(),
            real.values.cols()
        )));
    }
    let mut total = 0.0;
    for (p, &s) in bandwidths.iter().enumerate() {
        total += mmd(&real.pair(p), &fake.pair(p), s)?;
    }
    Ok(total / bandwidths.len() as f64)
}

/// Batches are `[B x L x C]`.
pub fn total_loss(
    x0: &DenseArray,
    x_out: &DenseArray,
    weights: LossWeights,
    bandwidths: &[f64],
) -> Result<LossBreakdown<f64>> {
    same_shape(x0, x_out)?;
    if x0.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [B, L, C], got {:?}",
            x0.shape()
        )));
    }
    with_graph(|g| {
        let b = x0.shape()[0];
        let a: Vec<Var> = (0..b).map(|i| g.constant(x0.slab(i))).collect();
        let o: Vec<Var> = (0..b).map(|i| g.constant(x_out.slab(i))).collect();
        let parts = total_loss_node(g, &a, &o, weights, bandwidths)?;
        Ok(parts.values(g))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ddpm_examples() {
        let z = DenseArray::zeros(&[4, 3]);
        let o = DenseArray::ones(&[4, 3]);
        assert_eq!(ddpm_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(ddpm_loss(&z, &o).unwrap(), 1.0);
        assert!(ddpm_loss(&z, &DenseArray::zeros(&[3, 4])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_array(&mut rng, &[4, 3]);
        let b = random_array(&mut rng, &[4, 3]);
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                want += (a.at(i, j) - b.at(i, j)).powi(2);
            }
        }
        assert!((ddpm_loss(&a, &b).unwrap() - want / 12.0).abs() < 1e-15);
        let via_graph = with_graph(|g| {
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let l = mse_node(g, av, bv)?;
            Ok(g.value(l).data()[0])
        })
        .unwrap();
        assert!((via_graph - want / 12.0).abs() < 1e-15);
    }

    #[test]
    fn fourier_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_array(&mut rng, &[16, 1]);
        let b = random_array(&mut rng, &[16, 1]);
        let sq: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!((fourier_loss(&a, &b).unwrap() - 16.0 * sq).abs() < 1e-9);
        assert_eq!(fourier_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn fourier_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_array(&mut rng, &[12, 3]);
        let start = random_array(&mut rng, &[12, 3]);
        let f = |x: &DenseArray| {
            let mut g = Graph::new();
            let a = g.constant(x0.clone());
            let b = g.param(x.clone());
            let l = fourier_node(&mut g, a, b).unwrap();
            g.backward(l).unwrap();
            (g.value(l).data()[0], g.grad(b))
        };
        check_gradient(f, &start, 1e-6, 1e-4).unwrap();
    }

    #[test]
    fn correlation_examples() {
        let w = DenseArray::from_rows(&[
            vec![1.0, 1.0, -1.0],
            vec![2.0, 2.0, -2.0],
            vec![4.0, 4.0, -4.0],
        ])
        .unwrap();
        let s = pairwise_correlations(&DenseArray::stack(&[w]).unwrap()).unwrap();
        assert_eq!(s.values.shape(), &[1, 3]);
        assert!((s.values.at(0, 0) - 1.0).abs() < 1e-15);
        assert!((s.values.at(0, 1) + 1.0).abs() < 1e-15);
        assert!((s.values.at(0, 2) + 1.0).abs() < 1e-15);
        assert_eq!(s.degenerate, 0);
    }

    #[test]
    fn correlation_matches_covariance_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_array(&mut rng, &[5, 10, 4]);
        let s = pairwise_correlations(&batch).unwrap();
        for w in 0..5 {
            let x = batch.slab(w);
            for (p, (i, j)) in channel_pairs(4).into_iter().enumerate() {
                let n = 10.0;
                let (a, b) = (x.column(i), x.column(j));
                let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
                let cov = a.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>() / n - ma * mb;
                let va = a.iter().map(|u| u * u).sum::<f64>() / n - ma * ma;
                let vb = b.iter().map(|u| u * u).sum::<f64>() / n - mb * mb;
                assert!((s.values.at(w, p) - cov / (va * vb).sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_channel_gives_zero_with_flag() {
        let w = DenseArray::from_rows(&[vec![1.0, 3.0], vec![2.0, 3.0], vec![0.0, 3.0]]).unwrap();
        let s = pairwise_correlations(&DenseArray::stack(&[w]).unwrap()).unwrap();
        assert_eq!(s.values.data(), &[0.0]);
        assert_eq!(s.degenerate, 1);
    }

    #[test]
    fn correlation_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_array(&mut rng, &[6, 3]);
        let w = random_array(&mut rng, &[3]);
        let f = |x: &DenseArray| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let r = correlation_node(&mut g, xv).unwrap();
            let wv = g.constant(w.clone());
            let prod = g.mul(r, wv).unwrap();
            let s = g.sum(prod);
            g.backward(s).unwrap();
            (g.value(s).data()[0], g.grad(xv))
        };
        check_gradient(f, &x, 1e-6, 1e-4).unwrap();
    }

    #[test]
    fn mmd_examples() {
        let want = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((mmd(&[0.0], &[1.0], 1.0).unwrap() - want).abs() < 1e-12);
        assert!(
            mmd(&[0.3, -0.2, 0.3], &[0.3, 0.3, -0.2], 0.7)
                .unwrap()
                .abs()
                < 1e-15
        );
        assert!(mmd(&[], &[1.0], 1.0).is_err());
        assert!(mmd(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn mmd_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_array(&mut rng, &[5, 1]);
        let y0 = random_array(&mut rng, &[4, 1]);
        let f = |y: &DenseArray| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let yv = g.param(y.clone());
            let m = mmd_node(&mut g, xv, yv, 0.4).unwrap();
            g.backward(m).unwrap();
            (g.value(m).data()[0], g.grad(yv))
        };
        check_gradient(f, &y0, 1e-6, 1e-4).unwrap();
        let f = |xx: &DenseArray| {
            let mut g = Graph::new();
            let xv = g.param(xx.clone());
            let yv = g.param(y0.clone());
            let m = mmd_node(&mut g, xv, yv, 0.4).unwrap();
            g.backward(m).unwrap();
            (g.value(m).data()[0], g.grad(xv))
        };
        check_gradient(f, &x, 1e-6, 1e-4).unwrap();
    }

    #[test]
    fn correlation_shift_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_array(&mut rng, &[4, 8, 2]);
        assert_eq!(correlation_shift_loss(&a, &a, &[0.5]).unwrap(), 0.0);
        let b = random_array(&mut rng, &[4, 8, 2]);
        let ra = pairwise_correlations(&a).unwrap();
        let rb = pairwise_correlations(&b).unwrap();
        let want = mmd(&ra.pair(0), &rb.pair(0), 0.5).unwrap();
        assert!((correlation_shift_loss(&a, &b, &[0.5]).unwrap() - want).abs() < 1e-15);
        let one = random_array(&mut rng, &[1, 8, 2]);
        assert!(matches!(
            correlation_shift_loss(&one, &one, &[0.5]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn total_loss_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_array(&mut rng, &[3, 8, 3]);
        let b = random_array(&mut rng, &[3, 8, 3]);
        let bw = median_bandwidths(&pairwise_correlations(&a).unwrap());
        let z = total_loss(&a, &a, LossWeights::default(), &bw).unwrap();
        assert_eq!(z.total, 0.0);
        let plain = total_loss(&a, &b, LossWeights::new(0.0, 0.0).unwrap(), &bw).unwrap();
        assert!((plain.total - ddpm_loss(&a, &b).unwrap()).abs() < 1e-15);
        let t1 = total_loss(&a, &b, LossWeights::new(1.0, 0.2).unwrap(), &bw).unwrap();
        let t2 = total_loss(&a, &b, LossWeights::new(2.0, 0.2).unwrap(), &bw).unwrap();
        assert!((t2.total - t1.total - t1.fourier).abs() < 1e-9);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn median_bandwidth_small_case() {
        let values = DenseArray::matrix(3, 1, vec![0.0, 0.2, 0.6]).unwrap();
        let s = CorrelationSample {
            values,
            degenerate: 0,
        };
        // distances 0.2, 0.6, 0.4
        assert!((median_bandwidths(&s)[0] - 0.4).abs() < 1e-15);
        let flat = CorrelationSample {
            values: DenseArray::filled(&[4, 1], 0.9),
            degenerate: 0,
        };
        assert_eq!(median_bandwidths(&flat), vec![MIN_BANDWIDTH]);
    }
}
