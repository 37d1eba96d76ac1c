//! Central finite-difference gradient checking.

use crate::array::DenseArray;
use rand::Rng;

/// Uniform entries in [-1, 1].
pub fn random_array(rng: &mut impl Rng, shape: &[usize]) -> DenseArray {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseArray::new(shape.to_vec(), data).expect("valid shape")
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(f: impl Fn(&DenseArray) -> f64, x: &DenseArray, step: f64) -> DenseArray {
    let mut g = DenseArray::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn relative_error(a: &DenseArray, b: &DenseArray) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares the analytic gradient returned by `f` with central differences.
/// `f` maps an input to `(value, analytic gradient)`.
pub fn check_gradient(
    f: impl Fn(&DenseArray) -> (f64, DenseArray),
    x: &DenseArray,
    step: f64,
    tol: f64,
) -> Result<f64, String> {
    let (_, analytic) = f(x);
    let numeric = numeric_gradient(|p| f(p).0, x, step);
    let err = relative_error(&analytic, &numeric);
    if err < tol {
        Ok(err)
    } else {
        Err(format!(
            "relative error {err:.3e} >= {tol:.1e}\nanalytic {:?}\nnumeric  {:?}",
            analytic.data(),
            numeric.data()
        ))
    }
}
