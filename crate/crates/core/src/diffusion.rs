//! Gaussian diffusion: cosine schedule, closed-form noising, posterior and
//! the x0-parameterized reverse chain.

use crate::array::DenseArray;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Per-step tables. Index 0 is the clean-data boundary (`alpha_bar[0] = 1`,
/// `beta[0] = 0`); steps run `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn cosine_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::OutOfRange {
            what: "diffusion steps",
            value: steps,
            lo: 1,
            hi: usize::MAX,
        });
    }
    let f = |t: usize| {
        let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let mut beta = vec![0.0];
    let mut alpha = vec![1.0];
    let mut alpha_bar = vec![1.0];
    for t in 1..=steps {
        let ratio = (f(t) / f0) / (f(t - 1) / f0);
        let b = (1.0 - ratio).clamp(0.0, MAX_BETA);
        beta.push(b);
        alpha.push(1.0 - b);
        alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
    }
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                value: t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0 x0 + ct x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab_t = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let denom = 1.0 - ab_t;
        (
            ab_prev.sqrt() * self.beta[t] / denom,
            self.alpha[t].sqrt() * (1.0 - ab_prev) / denom,
        )
    }

    /// `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x_t: DenseArray,
    pub t: usize,
    pub eps: DenseArray,
}

pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> DenseArray {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseArray::new(shape.to_vec(), data).expect("valid shape")
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    x0: &DenseArray,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<NoisedSample> {
    schedule.check_step(t)?;
    let eps = standard_normal(rng, x0.shape());
    let x_t = noise_with(x0, &eps, t, schedule)?;
    Ok(NoisedSample { x_t, t, eps })
}

/// Closed-form noising with a caller-supplied Gaussian draw.
pub fn noise_with(
    x0: &DenseArray,
    eps: &DenseArray,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<DenseArray> {
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |a, e| s * a + n * e)
}

pub fn posterior_mean(
    x0: &DenseArray,
    x_t: &DenseArray,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<DenseArray> {
    schedule.check_step(t)?;
    let (c0, ct) = schedule.posterior_coefficients(t);
    x0.zip_map(x_t, |a, b| c0 * a + ct * b)
}

/// Anything that predicts the clean sample from a noised one.
pub trait Denoiser {
    fn predict_x0(&self, x_t: &DenseArray, t: usize) -> Result<DenseArray>;
}

/// Standard deviation of the noise injected by each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseNoise {
    /// `sigma_t^2 = beta_t`
    #[default]
    Beta,
    /// `sigma_t^2` = posterior variance
    Posterior,
    /// deterministic chain
    Zero,
}

impl ReverseNoise {
    fn sigma(self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        match self {
            ReverseNoise::Beta => schedule.beta(t).sqrt(),
            ReverseNoise::Posterior => schedule.posterior_variance(t).sqrt(),
            ReverseNoise::Zero => 0.0,
        }
    }
}

/// One reverse transition `x_t -> x_{t-1}`; no noise is added at `t = 1`.
pub fn reverse_step(
    x_t: &DenseArray,
    t: usize,
    model: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    noise: ReverseNoise,
    rng: &mut impl Rng,
) -> Result<DenseArray> {
    schedule.check_step(t)?;
    let x0_hat = model.predict_x0(x_t, t)?;
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "denoiser returned {:?} for input {:?}",
            x0_hat.shape(),
            x_t.shape()
        )));
    }
    let mean = posterior_mean(&x0_hat, x_t, t, schedule)?;
    let sigma = noise.sigma(schedule, t);
    if t == 1 || sigma == 0.0 {
        return Ok(mean);
    }
    let z = standard_normal(rng, x_t.shape());
    mean.zip_map(&z, |m, e| m + sigma * e)
}

/// Runs one full reverse chain from a supplied `x_T`.
pub fn reverse_chain(
    x_big_t: DenseArray,
    model: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    noise: ReverseNoise,
    rng: &mut impl Rng,
) -> Result<DenseArray> {
    let mut x = x_big_t;
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(&x, t, model, schedule, noise, rng)?;
    }
    Ok(x)
}

/// Draws `n` samples of shape `[len x channels]`, returned as
/// `[n x len x channels]` and clipped to [-1, 1]. Chain `i` uses its own RNG
/// stream seeded from `seed + i`.
pub fn sample(
    model: &(dyn Denoiser + Sync),
    schedule: &DiffusionSchedule,
    n: usize,
    shape: (usize, usize),
    noise: ReverseNoise,
    seed: u64,
) -> Result<DenseArray> {
    if n == 0 {
        return Err(Error::EmptyInput("zero samples requested".into()));
    }
    let run = |i: usize| -> Result<DenseArray> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let x_big_t = standard_normal(&mut rng, &[shape.0, shape.1]);
        let x = reverse_chain(x_big_t, model, schedule, noise, &mut rng)?;
        Ok(x.map(|v| v.clamp(-1.0, 1.0)))
    };
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(n);
    let mut outputs: Vec<Option<Result<DenseArray>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = outputs
            .chunks_mut(n.div_ceil(workers))
            .enumerate()
            .map(|(ci, chunk)| {
                let run = &run;
                let base = ci * n.div_ceil(workers);
                scope.spawn(move || {
                    for (off, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run(base + off));
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("sampling worker panicked");
        }
    });
    let windows = outputs
        .into_iter()
        .map(|o| o.expect("every chain ran"))
        .collect::<Result<Vec<_>>>()?;
    DenseArray::stack(&windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle(DenseArray);

    impl Denoiser for Oracle {
        fn predict_x0(&self, _x_t: &DenseArray, _t: usize) -> Result<DenseArray> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = cosine_schedule(500).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=500 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
        assert!(s.alpha_bar(500) < 0.01);
        let mut prod = 1.0;
        for t in 1..=500 {
            prod *= s.alpha(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
        }
        assert!(cosine_schedule(0).is_err());
    }

    #[test]
    fn cosine_matches_closed_form_before_clipping() {
        let s = cosine_schedule(500).unwrap();
        let f = |t: f64| (((t / 500.0 + 0.008) / 1.008) * FRAC_PI_2).cos().powi(2);
        for t in [1usize, 10, 250, 400] {
            assert!((s.alpha_bar(t) - f(t as f64) / f(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn noising_is_reproducible_and_range_checked() {
        let s = cosine_schedule(50).unwrap();
        let x0 = DenseArray::filled(&[4, 2], 0.5);
        let a = forward_noise(&x0, 10, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = forward_noise(&x0, 10, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(forward_noise(&x0, 0, &s, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
        assert!(forward_noise(&x0, 51, &s, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
        // alpha_bar_0 = 1 is the zero-noise boundary
        let eps = standard_normal(&mut ChaCha8Rng::seed_from_u64(1), &[4, 2]);
        assert_eq!(noise_with(&x0, &eps, 0, &s).unwrap(), x0);
    }

    #[test]
    fn terminal_marginal_is_standard_normal() {
        let s = cosine_schedule(500).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = DenseArray::filled(&[10_000], 0.7);
        let xt = forward_noise(&x0, 500, &s, &mut rng).unwrap().x_t;
        let n = xt.len() as f64;
        let mean = xt.sum() / n;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt());
        // standard error of the sample variance for a normal is sqrt(2/n)
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn posterior_coefficients_at_midpoint() {
        let s = cosine_schedule(500).unwrap();
        let t = 250;
        let (c0, ct) = s.posterior_coefficients(t);
        let ab_t = s.alpha_bar(t);
        let ab_p = s.alpha_bar(t - 1);
        let want0 = ab_p.sqrt() * s.beta(t) / (1.0 - ab_t);
        let wantt = s.alpha(t).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
        assert!((c0 - want0).abs() < 1e-15 && (ct - wantt).abs() < 1e-15);
        let one = DenseArray::scalar(1.0);
        let mu = posterior_mean(&one, &one, t, &s).unwrap();
        assert!((mu.data()[0] - (want0 + wantt)).abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_tends_to_xt_for_small_beta() {
        // a single-step schedule with tiny beta and alpha_bar_{t-1} < 1
        let sched = DiffusionSchedule {
            beta: vec![0.0, 0.5, 1e-12],
            alpha: vec![1.0, 0.5, 1.0 - 1e-12],
            alpha_bar: vec![1.0, 0.5, 0.5 * (1.0 - 1e-12)],
        };
        let x0 = DenseArray::scalar(3.0);
        let xt = DenseArray::scalar(-1.0);
        let mu = posterior_mean(&x0, &xt, 2, &sched).unwrap();
        assert!((mu.data()[0] - -1.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_denoiser_reconstructs() {
        let s = cosine_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = standard_normal(&mut rng, &[6, 3]).map(|v| v.tanh());
        let noised = forward_noise(&x0, 100, &s, &mut rng).unwrap();
        let model = Oracle(x0.clone());
        let out = reverse_chain(noised.x_t, &model, &s, ReverseNoise::Zero, &mut rng).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn final_step_is_noise_free() {
        let s = cosine_schedule(10).unwrap();
        let x0 = DenseArray::filled(&[3, 2], 0.25);
        let model = Oracle(x0.clone());
        let xt = DenseArray::filled(&[3, 2], -0.5);
        let a = reverse_step(
            &xt,
            1,
            &model,
            &s,
            ReverseNoise::Beta,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = reverse_step(
            &xt,
            1,
            &model,
            &s,
            ReverseNoise::Beta,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), xt.shape());
    }

    #[test]
    fn shape_mismatch_from_model() {
        let s = cosine_schedule(10).unwrap();
        let model = Oracle(DenseArray::zeros(&[2, 2]));
        let xt = DenseArray::zeros(&[3, 2]);
        assert!(matches!(
            reverse_step(
                &xt,
                5,
                &model,
                &s,
                ReverseNoise::Beta,
                &mut ChaCha8Rng::seed_from_u64(1)
            ),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sampling_is_seeded_and_finite() {
        let s = cosine_schedule(20).unwrap();
        let model = Oracle(DenseArray::filled(&[5, 2], 0.3));
        let a = sample(&model, &s, 3, (5, 2), ReverseNoise::Beta, 7).unwrap();
        let b = sample(&model, &s, 3, (5, 2), ReverseNoise::Beta, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 5, 2]);
        assert!(a.all_finite());
        let z = sample(&model, &s, 2, (5, 2), ReverseNoise::Zero, 1).unwrap();
        assert!(z.data().iter().all(|v| (v - 0.3).abs() < 1e-9));
    }
}
