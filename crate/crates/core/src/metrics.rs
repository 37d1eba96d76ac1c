//! Fidelity metrics between a real and a synthetic set of windows, both
//! `[M x L x C]`. Histogram-based metrics bin on the real data's range.

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::losses::{channel_pairs, pairwise_correlations};
use crate::permutation::pooled_correlation;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Fixed divisor of the correlational score.
pub const CORRELATIONAL_SCALE: f64 = 0.1;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Jensen-Shannon divergence (natural log)
    #[default]
    Js,
    /// KL(real || synthetic) with both histograms smoothed by `KL_SMOOTHING`
    Kl,
}

pub const KL_SMOOTHING: f64 = 1e-10;

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Js => "js",
            Distance::Kl => "kl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bins: usize,
    /// `None` means `L / 4` (at least 1).
    pub max_lag: Option<usize>,
    pub distance: Distance,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            max_lag: None,
            distance: Distance::Js,
        }
    }
}

/// Real and synthetic windows with matching `L` and `C`.
#[derive(Debug, Clone, Copy)]
pub struct DatasetPair<'a> {
    real: &'a DenseArray,
    synthetic: &'a DenseArray,
    names: &'a [String],
}

impl<'a> DatasetPair<'a> {
    pub fn new(
        real: &'a DenseArray,
        synthetic: &'a DenseArray,
        names: &'a [String],
    ) -> Result<Self> {
        for (what, a) in [("real", real), ("synthetic", synthetic)] {
            if a.shape().len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "{what} data must be [M, L, C], got {:?}",
                    a.shape()
                )));
            }
            if !a.all_finite() {
                return Err(Error::NonFinite(format!("{what} data")));
            }
        }
        if real.shape()[1..] != synthetic.shape()[1..] {
            return Err(Error::SchemaMismatch(format!(
                "real windows {:?} vs synthetic {:?}",
                &real.shape()[1..],
                &synthetic.shape()[1..]
            )));
        }
        if !names.is_empty() && names.len() != real.shape()[2] {
            return Err(Error::SchemaMismatch(format!(
                "{} channel names for {} channels",
                names.len(),
                real.shape()[2]
            )));
        }
        Ok(Self {
            real,
            synthetic,
            names,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.real.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.real.shape()[2]
    }

    fn name(&self, c: usize) -> String {
        self.names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("channel {c}"))
    }
}

/// Values of channel `c` over every window and time step.
fn channel_values(x: &DenseArray, c: usize) -> Vec<f64> {
    let ch = x.shape()[2];
    x.data().iter().skip(c).step_by(ch).copied().collect()
}

/// Values at time step `l`, channel `c` across windows.
fn marginal(x: &DenseArray, l: usize, c: usize) -> Vec<f64> {
    let (len, ch) = (x.shape()[1], x.shape()[2]);
    (0..x.shape()[0])
        .map(|m| x.data()[(m * len + l) * ch + c])
        .collect()
}

/// Equal-width bins spanning the range of a reference sample; values
/// outside the range land in the edge bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bins {
    lo: f64,
    width: f64,
    count: usize,
}

impl Bins {
    pub fn spanning(reference: &[f64], count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("bin count must be positive".into()));
        }
        if reference.is_empty() {
            return Err(Error::EmptyInput("histogram reference".into()));
        }
        let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        Ok(Self {
            lo,
            width: (hi - lo) / count as f64,
            count,
        })
    }

    pub fn index(&self, v: f64) -> usize {
        let i = ((v - self.lo) / self.width).floor();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.count - 1)
        }
    }

    /// Normalized histogram of `values`.
    pub fn probabilities(&self, values: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.count];
        for &v in values {
            h[self.index(v)] += 1.0;
        }
        let n = values.len() as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }
}

pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        s += 0.5 * term(a, m) + 0.5 * term(b, m);
    }
    s.max(0.0)
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len() as f64;
    let smooth = |v: f64| (v + KL_SMOOTHING) / (1.0 + n * KL_SMOOTHING);
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (smooth(a), smooth(b));
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

fn divergence(d: Distance, p: &[f64], q: &[f64]) -> f64 {
    match d {
        Distance::Js => js_divergence(p, q),
        Distance::Kl => kl_divergence(p, q),
    }
}

fn histogram_distance(real: &[f64], synth: &[f64], bins: usize, d: Distance) -> Result<f64> {
    let b = Bins::spanning(real, bins)?;
    Ok(divergence(
        d,
        &b.probabilities(real),
        &b.probabilities(synth),
    ))
}

fn correlation_matrix(pair: &DatasetPair, x: &DenseArray) -> Result<Vec<Vec<f64>>> {
    let (l, c) = (pair.seq_len(), pair.channels());
    let rows = x.shape()[0] * l;
    let names: Vec<String> = (0..c).map(|i| pair.name(i)).collect();
    pooled_correlation(x.data(), rows, c, &names)
}

/// `0.1 * sum_{i != j} |corr_real(i, j) - corr_synth(i, j)|` with Pearson
/// correlations pooled over all windows and time steps.
pub fn correlational_score(pair: &DatasetPair) -> Result<f64> {
    let c = pair.channels();
    if c < 2 {
        return Ok(0.0);
    }
    let r = correlation_matrix(pair, pair.real)?;
    let s = correlation_matrix(pair, pair.synthetic)?;
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                total += (r[i][j] - s[i][j]).abs();
            }
        }
    }
    Ok(CORRELATIONAL_SCALE * total)
}

/// Mean absolute bin-wise difference between per-(time step, channel)
/// histograms, averaged over all time steps and channels.
pub fn mdd(pair: &DatasetPair, bins: usize) -> Result<f64> {
    let (l, c) = (pair.seq_len(), pair.channels());
    let mut total = 0.0;
    for t in 0..l {
        for ch in 0..c {
            let real = marginal(pair.real, t, ch);
            let b = Bins::spanning(&real, bins)?;
            let p = b.probabilities(&real);
            let q = b.probabilities(&marginal(pair.synthetic, t, ch));
            total += p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / bins as f64;
        }
    }
    Ok(total / (l * c) as f64)
}

/// Autocorrelation of one series at lags `1..=max_lag`; `None` when the
/// series is constant.
pub fn acf(series: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let dev: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let denom: f64 = dev.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return None;
    }
    Some(
        (1..=max_lag)
            .map(|lag| {
                dev.iter()
                    .zip(&dev[lag.min(dev.len())..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / denom
            })
            .collect(),
    )
}

/// Per-channel ACF averaged over windows, `[C][max_lag]`. Constant windows
/// are skipped; a channel constant in every window is an error.
pub fn average_acf(x: &DenseArray, max_lag: usize, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let (m, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if max_lag < 1 || max_lag >= l {
        return Err(Error::OutOfRange {
            what: "max lag",
            value: max_lag,
            lo: 1,
            hi: l.saturating_sub(1),
        });
    }
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = vec![0.0; max_lag];
        let mut used = 0usize;
        for w in 0..m {
            let series: Vec<f64> = (0..l).map(|t| x.data()[(w * l + t) * c + ch]).collect();
            if let Some(a) = acf(&series, max_lag) {
                sum.iter_mut().zip(&a).for_each(|(s, v)| *s += v);
                used += 1;
            }
        }
        if used == 0 {
            return Err(Error::ZeroVariance {
                channel: names
                    .get(ch)
                    .cloned()
                    .unwrap_or_else(|| format!("channel {ch}")),
            });
        }
        sum.iter_mut().for_each(|s| *s /= used as f64);
        out.push(sum);
    }
    Ok(out)
}

pub fn default_max_lag(len: usize) -> usize {
    (len / 4).max(1)
}

/// Mean absolute difference of the average ACFs, and its per-channel means.
pub fn acd(pair: &DatasetPair, max_lag: usize) -> Result<(f64, Vec<f64>)> {
    let r = average_acf(pair.real, max_lag, pair.names)?;
    let s = average_acf(pair.synthetic, max_lag, pair.names)?;
    let per: Vec<f64> = r
        .iter()
        .zip(&s)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / max_lag as f64)
        .collect();
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

/// Standardized central moment `E[(x - mu)^k] / sigma^k`.
pub fn standardized_moment(values: &[f64], k: i32) -> Option<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return None;
    }
    let m = values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    Some(m / var.powf(k as f64 / 2.0))
}

fn moment_diff(pair: &DatasetPair, k: i32) -> Result<(f64, Vec<f64>)> {
    let mut per = Vec::with_capacity(pair.channels());
    for ch in 0..pair.channels() {
        let zero = || Error::ZeroVariance {
            channel: pair.name(ch),
        };
        let r = standardized_moment(&channel_values(pair.real, ch), k).ok_or_else(zero)?;
        let s = standardized_moment(&channel_values(pair.synthetic, ch), k).ok_or_else(zero)?;
        per.push((r - s).abs());
    }
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

pub fn skewness_diff(pair: &DatasetPair) -> Result<(f64, Vec<f64>)> {
    moment_diff(pair, 3)
}

pub fn kurtosis_diff(pair: &DatasetPair) -> Result<(f64, Vec<f64>)> {
    moment_diff(pair, 4)
}

/// Per-channel divergence between pooled value histograms, averaged.
pub fn vds(pair: &DatasetPair, distance: Distance, bins: usize) -> Result<(f64, Vec<f64>)> {
    let per: Vec<f64> = (0..pair.channels())
        .map(|ch| {
            histogram_distance(
                &channel_values(pair.real, ch),
                &channel_values(pair.synthetic, ch),
                bins,
                distance,
            )
        })
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

/// Per-pair divergence between distributions of per-window Pearson
/// correlations, averaged over pairs.
pub fn fdds(pair: &DatasetPair, distance: Distance, bins: usize) -> Result<(f64, Vec<f64>)> {
    let c = pair.channels();
    if c < 2 {
        return Err(Error::InsufficientData(
            "FDDS needs at least 2 channels".into(),
        ));
    }
    if pair.real.shape()[0] < 2 || pair.synthetic.shape()[0] < 2 {
        return Err(Error::InsufficientData(
            "FDDS needs at least 2 windows on each side".into(),
        ));
    }
    let r = pairwise_correlations(pair.real)?;
    let s = pairwise_correlations(pair.synthetic)?;
    let per: Vec<f64> = (0..channel_pairs(c).len())
        .map(|p| histogram_distance(&r.pair(p), &s.pair(p), bins, distance))
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub real_windows: usize,
    pub synthetic_windows: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub bins: usize,
    pub max_lag: usize,
    pub distance: Distance,
    pub correlational_scale: f64,
    pub channel_names: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub correlational_score: f64,
    pub mdd: f64,
    pub acd: f64,
    pub skewness_diff: f64,
    pub kurtosis_diff: f64,
    pub vds: f64,
    /// absent for single-channel data
    pub fdds: Option<f64>,
    pub acd_per_channel: Vec<f64>,
    pub skewness_per_channel: Vec<f64>,
    pub kurtosis_per_channel: Vec<f64>,
    pub vds_per_channel: Vec<f64>,
    pub fdds_per_pair: Vec<f64>,
    pub meta: ReportMeta,
}

pub fn evaluate(pair: &DatasetPair, opts: &EvalOptions) -> Result<MetricReport> {
    let max_lag = opts
        .max_lag
        .unwrap_or_else(|| default_max_lag(pair.seq_len()));
    let (acd_v, acd_per) = acd(pair, max_lag)?;
    let (sd, sd_per) = skewness_diff(pair)?;
    let (kd, kd_per) = kurtosis_diff(pair)?;
    let (vds_v, vds_per) = vds(pair, opts.distance, opts.bins)?;
    let mut notes = vec![format!(
        "correlational score uses a fixed {CORRELATIONAL_SCALE} scale regardless of channel count"
    )];
    let (fdds_v, fdds_per) = if pair.channels() >= 2 {
        let (v, per) = fdds(pair, opts.distance, opts.bins)?;
        (Some(v), per)
    } else {
        notes.push("fdds skipped: single channel".into());
        (None, Vec::new())
    };
    Ok(MetricReport {
        correlational_score: correlational_score(pair)?,
        mdd: mdd(pair, opts.bins)?,
        acd: acd_v,
        skewness_diff: sd,
        kurtosis_diff: kd,
        vds: vds_v,
        fdds: fdds_v,
        acd_per_channel: acd_per,
        skewness_per_channel: sd_per,
        kurtosis_per_channel: kd_per,
        vds_per_channel: vds_per,
        fdds_per_pair: fdds_per,
        meta: ReportMeta {
            real_windows: pair.real.shape()[0],
            synthetic_windows: pair.synthetic.shape()[0],
            seq_len: pair.seq_len(),
            channels: pair.channels(),
            bins: opts.bins,
            max_lag,
            distance: opts.distance,
            correlational_scale: CORRELATIONAL_SCALE,
            channel_names: (0..pair.channels()).map(|c| pair.name(c)).collect(),
            notes,
        },
    })
}

impl MetricReport {
    /// `(name, value)` for every headline score, `None` for skipped ones.
    pub fn scores(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("correlational", Some(self.correlational_score)),
            ("mdd", Some(self.mdd)),
            ("acd", Some(self.acd)),
            ("sd", Some(self.skewness_diff)),
            ("kd", Some(self.kurtosis_diff)),
            ("vds", Some(self.vds)),
            ("fdds", self.fdds),
        ]
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} real / {} synthetic windows, L={}, C={}, {} bins, max lag {}, {}",
            self.meta.real_windows,
            self.meta.synthetic_windows,
            self.meta.seq_len,
            self.meta.channels,
            self.meta.bins,
            self.meta.max_lag,
            self.meta.distance
        )?;
        for (name, v) in self.scores() {
            match v {
                Some(v) => writeln!(f, "{name:<14} {v:.6}")?,
                None => writeln!(f, "{name:<14} n/a")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pair<'a>(r: &'a DenseArray, s: &'a DenseArray) -> DatasetPair<'a> {
        DatasetPair::new(r, s, &[]).unwrap()
    }

    #[test]
    fn identity_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = random_array(&mut rng, &[6, 12, 3]);
        let rep = evaluate(&pair(&real, &real), &EvalOptions::default()).unwrap();
        for (name, v) in rep.scores() {
            assert_eq!(v, Some(0.0), "{name}");
        }
        assert_eq!(rep.meta.max_lag, 3);
    }

    #[test]
    fn schema_checks() {
        let a = DenseArray::zeros(&[2, 4, 3]);
        let b = DenseArray::zeros(&[2, 4, 2]);
        assert!(matches!(
            DatasetPair::new(&a, &b, &[]),
            Err(Error::SchemaMismatch(_))
        ));
        let mut c = a.clone();
        c.data_mut()[0] = f64::NAN;
        assert!(matches!(
            DatasetPair::new(&c, &a, &[]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn correlational_matches_pearson_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_array(&mut rng, &[5, 10, 2]);
        let s = random_array(&mut rng, &[4, 10, 2]);
        let pearson = |x: &DenseArray| {
            let a = channel_values(x, 0);
            let b = channel_values(x, 1);
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(&b).map(|(u, v)| (u - ma) * (v - mb)).sum();
            let va: f64 = a.iter().map(|u| (u - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let want = 0.1 * 2.0 * (pearson(&r) - pearson(&s)).abs();
        assert!((correlational_score(&pair(&r, &s)).unwrap() - want).abs() < 1e-12);
        let one = random_array(&mut rng, &[3, 10, 1]);
        assert_eq!(correlational_score(&pair(&one, &one)).unwrap(), 0.0);
    }

    #[test]
    fn zero_variance_is_named() {
        let mut r = random_array(&mut ChaCha8Rng::seed_from_u64(3), &[3, 6, 2]);
        for w in 0..3 {
            for t in 0..6 {
                r.data_mut()[(w * 6 + t) * 2 + 1] = 0.5;
            }
        }
        let names = vec!["load".to_string(), "flat".to_string()];
        let p = DatasetPair::new(&r, &r, &names).unwrap();
        match correlational_score(&p) {
            Err(Error::ZeroVariance { channel }) => assert_eq!(channel, "flat"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(skewness_diff(&p), Err(Error::ZeroVariance { .. })));
        assert!(matches!(acd(&p, 2), Err(Error::ZeroVariance { .. })));
    }

    #[test]
    fn mdd_two_bin_disjoint() {
        let r = DenseArray::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap();
        let s = DenseArray::new(vec![2, 1, 1], vec![-5.0, -5.0]).unwrap();
        // degenerate real range widens to [-0.5, 0.5]: real -> bin 1, synth -> bin 0
        assert!((mdd(&pair(&r, &s), 2).unwrap() - 1.0).abs() < 1e-15);
        let r = DenseArray::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap();
        let s = DenseArray::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(mdd(&pair(&r, &s), 2).unwrap(), 0.0);
    }

    #[test]
    fn acf_sine_vs_noise() {
        let l = 256;
        let p = 16;
        let sine: Vec<f64> = (0..l)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / p as f64).sin())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        let a = acf(&sine, p).unwrap();
        let b = acf(&noise, p).unwrap();
        assert!(((a[p - 1] - b[p - 1]) - 1.0).abs() < 0.1);
        assert!(acf(&[1.0, 1.0, 1.0], 1).is_none());
    }

    #[test]
    fn mirrored_data_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_array(&mut rng, &[4, 20, 1]).map(|v| v * v * v);
        let mu = r.sum() / r.len() as f64;
        let s = r.map(|v| 2.0 * mu - v);
        let skew = standardized_moment(r.data(), 3).unwrap();
        let (sd, _) = skewness_diff(&pair(&r, &s)).unwrap();
        let (kd, _) = kurtosis_diff(&pair(&r, &s)).unwrap();
        assert!((sd - 2.0 * skew.abs()).abs() < 1e-12);
        assert!(kd < 1e-12);
    }

    #[test]
    fn uniform_vs_normal_kurtosis() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let u = DenseArray::new(
            vec![n, 1, 1],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let g = DenseArray::new(
            vec![n, 1, 1],
            (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap();
        let (kd, _) = kurtosis_diff(&pair(&u, &g)).unwrap();
        assert!((kd - 1.2).abs() < 0.2);
    }

    #[test]
    fn js_examples() {
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
        let p = [0.5, 0.25, 0.25];
        let q = [0.25, 0.25, 0.5];
        let m = [0.375, 0.25, 0.375];
        let kl =
            |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum() };
        let want = 0.5 * kl(&p, &m) + 0.5 * kl(&q, &m);
        assert!((js_divergence(&p, &q) - want).abs() < 1e-15);
        assert!((js_divergence(&p, &q) - js_divergence(&q, &p)).abs() < 1e-15);
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn vds_disjoint_supports() {
        let r = DenseArray::new(vec![2, 2, 1], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        // all synthetic values beyond the real range pile into the top bin
        let s = DenseArray::new(vec![2, 2, 1], vec![9.0; 4]).unwrap();
        let (v, _) = vds(&pair(&r, &s), Distance::Js, 50).unwrap();
        // real fills bins 0, 16, 33, 49 (top edge) so only 1/4 overlaps
        let p = {
            let b = Bins::spanning(r.data(), 50).unwrap();
            (b.probabilities(r.data()), b.probabilities(s.data()))
        };
        assert!((v - js_divergence(&p.0, &p.1)).abs() < 1e-15);
        let s2 = DenseArray::new(vec![2, 2, 1], vec![0.15; 4]).unwrap();
        let r2 = DenseArray::new(vec![2, 2, 1], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (v2, _) = vds(&pair(&r2, &s2), Distance::Js, 2).unwrap();
        // real = (1/2, 1/2), synth = (1, 0)
        let want = js_divergence(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((v2 - want).abs() < 1e-15);
    }

    #[test]
    fn window_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_array(&mut rng, &[5, 8, 3]);
        let s = random_array(&mut rng, &[4, 8, 3]);
        let order = [3, 1, 0, 2];
        let shuffled =
            DenseArray::stack(&order.iter().map(|&i| s.slab(i)).collect::<Vec<_>>()).unwrap();
        let a = evaluate(&pair(&r, &s), &EvalOptions::default()).unwrap();
        let b = evaluate(&pair(&r, &shuffled), &EvalOptions::default()).unwrap();
        for ((n, x), (_, y)) in a.scores().into_iter().zip(b.scores()) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-12, "{n}");
        }
    }

    #[test]
    fn fdds_single_pair_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random_array(&mut rng, &[6, 8, 2]);
        let s = random_array(&mut rng, &[6, 8, 2]);
        let (v, per) = fdds(&pair(&r, &s), Distance::Js, 10).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(v, per[0]);
        let one = random_array(&mut rng, &[1, 8, 2]);
        assert!(fdds(&pair(&one, &s), Distance::Js, 10).is_err());
        let single = random_array(&mut rng, &[3, 8, 1]);
        let rep = evaluate(&pair(&single, &single), &EvalOptions::default()).unwrap();
        assert_eq!(rep.fdds, None);
    }
}
