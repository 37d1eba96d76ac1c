//! Discrete Fourier transform of real sequences.
//!
//! Power-of-two lengths go through an iterative radix-2 Cooley-Tukey
//! transform; every other length falls back to direct O(n^2) summation.
//! Both compute `X_k = sum_j x_j exp(-2 pi i j k / n)` with no normalization.

use crate::array::{ComplexArray, DenseArray};
use crate::error::{Error, Result};
use std::f64::consts::PI;

pub fn dft(x: &[f64]) -> Result<ComplexArray> {
    if x.is_empty() {
        return Err(Error::EmptyInput("dft of empty sequence".into()));
    }
    let (re, im) = if x.len().is_power_of_two() {
        radix2(x)
    } else {
        direct(x)
    };
    ComplexArray::new(DenseArray::vector(re), DenseArray::vector(im))
}

/// Same as [`dft`] but returns plain vectors; used on hot paths.
pub(crate) fn dft_parts(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if x.len().is_power_of_two() {
        radix2(x)
    } else {
        direct(x)
    }
}

fn direct(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for (j, &xj) in x.iter().enumerate() {
            // reduce jk mod n first so the angle stays small
            let ang = -2.0 * PI * ((j * k) % n) as f64 / n as f64;
            sr += xj * ang.cos();
            si += xj * ang.sin();
        }
        re[k] = sr;
        im[k] = si;
    }
    (re, im)
}

fn radix2(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let bits = n.trailing_zeros();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for (i, &v) in x.iter().enumerate() {
        let r = if bits == 0 {
            0
        } else {
            i.reverse_bits() >> (usize::BITS - bits)
        };
        re[r] = v;
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for m in 0..half {
                let (ws, wc) = (step * m as f64).sin_cos();
                let (a, b) = (start + m, start + m + half);
                let tr = wc * re[b] - ws * im[b];
                let ti = wc * im[b] + ws * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_oracle(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(r, i), (j, &v)| {
                    let a = -2.0 * PI * (j as f64) * (k as f64) / n;
                    (r + v * a.cos(), i + v * a.sin())
                })
            })
            .unzip()
    }

    #[test]
    fn constant_and_impulse() {
        let c = dft(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c.re.data(), &[4.0, 0.0, 0.0, 0.0]);
        assert!(c.im.data().iter().all(|v| v.abs() < 1e-15));
        let d = dft(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.re.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(d.im.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn empty_is_error() {
        assert!(dft(&[]).is_err());
    }

    #[test]
    fn fast_path_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 4, 8, 16, 32] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = dft(&x).unwrap();
            let (re, im) = naive_oracle(&x);
            for k in 0..n {
                assert!((fast.re.data()[k] - re[k]).abs() < 1e-10, "n={n}");
                assert!((fast.im.data()[k] - im[k]).abs() < 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn non_power_of_two_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [3usize, 5, 12, 48] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = dft(&x).unwrap();
            let (re, im) = naive_oracle(&x);
            assert!(got
                .re
                .data()
                .iter()
                .zip(&re)
                .all(|(a, b)| (a - b).abs() < 1e-10));
            assert!(got
                .im
                .data()
                .iter()
                .zip(&im)
                .all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    proptest::proptest! {
        #[test]
        fn parseval(xs in proptest::collection::vec(-1.0f64..1.0, 1..40)) {
            let x = dft(&xs).unwrap();
            let time: f64 = xs.iter().map(|v| v * v).sum();
            let freq = x.norm_sqr() / xs.len() as f64;
            proptest::prop_assert!((time - freq).abs() < 1e-9);
        }
    }
}
