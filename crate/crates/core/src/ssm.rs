//! Selective state-space scans and their structured-matrix forms.
//!
//! Every scan here runs the diagonal recurrence
//!
//! ```text
//! h_k = Abar_k * h_{k-1} + Bbar_k * x_k      (h_{-1} = 0, so h_0 = Bbar_0 x_0)
//! y_k = C_k . h_k
//! ```
//!
//! independently for each of the `H` input channels, with a length-`N`
//! state per channel. `A` is diagonal (one row of `N` negative entries per
//! channel), `Delta` is per token and channel, and `B`/`C` are per token and
//! shared across channels.
//!
//! Three variants are provided:
//!
//! * [`selective_scan`]: the plain recurrence;
//! * [`lag_fusion_scan`]: replaces `h_k` in the readout by the weighted lag
//!   sum `u_k = sum_p eta_p h_{k - o_p}` (lags before the sequence start
//!   contribute zero);
//! * [`permutation_scan`]: reorders the tokens with a permutation matrix,
//!   scans, and restores the original order.
//!
//! The `materialize_*` functions build the equivalent lower-triangular (or
//! permuted) matrices from explicit transition products, independently of
//! the recurrence, so `y = M x` can be used as an oracle.

use crate::array::DenseArray;
use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};

/// Zero-order-hold discretization of a diagonal continuous system:
/// `Abar = exp(Delta A)`, `Bbar = (Delta A)^{-1} (exp(Delta A) - I) Delta B`.
pub fn discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "A has {} entries, B has {}",
            a.len(),
            b.len()
        )));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::NonFinite(format!("discretization step {delta}")));
    }
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, &v)| !(v < 0.0)) {
        return Err(Error::Unstable { index, value });
    }
    let abar = a.iter().map(|&an| (delta * an).exp()).collect();
    let bbar = a
        .iter()
        .zip(b)
        .map(|(&an, &bn)| (delta * an).exp_m1() / an * bn)
        .collect();
    Ok((abar, bbar))
}

/// Input-independent ("frozen") scan parameters for a length-`K` sequence
/// of `H` channels with state size `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `[H x N]`, strictly negative.
    pub a: DenseArray,
    /// `[K x H]`, strictly positive.
    pub delta: DenseArray,
    /// `[K x N]`
    pub b: DenseArray,
    /// `[K x N]`
    pub c: DenseArray,
}

impl SsmParams {
    pub fn new(a: DenseArray, delta: DenseArray, b: DenseArray, c: DenseArray) -> Result<Self> {
        let p = Self { a, delta, b, c };
        p.validate()?;
        Ok(p)
    }

    pub fn seq_len(&self) -> usize {
        self.delta.rows()
    }

    pub fn channels(&self) -> usize {
        self.a.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.a.cols()
    }

    fn validate(&self) -> Result<()> {
        let (k, h, n) = (self.seq_len(), self.channels(), self.state_dim());
        let want = |arr: &DenseArray, r: usize, c: usize, name: &str| {
            if arr.shape() != [r, c] {
                Err(Error::DimensionMismatch(format!(
                    "{name} is {:?}, expected [{r}, {c}]",
                    arr.shape()
                )))
            } else {
                Ok(())
            }
        };
        want(&self.delta, k, h, "delta")?;
        want(&self.b, k, n, "B")?;
        want(&self.c, k, n, "C")?;
        if let Some((index, &value)) = self.a.data().iter().enumerate().find(|(_, &v)| !(v < 0.0)) {
            return Err(Error::Unstable { index, value });
        }
        if self
            .delta
            .data()
            .iter()
            .any(|&d| !(d > 0.0) || !d.is_finite())
        {
            return Err(Error::NonFinite("delta must be finite and positive".into()));
        }
        if !self.b.all_finite() || !self.c.all_finite() {
            return Err(Error::NonFinite("B/C".into()));
        }
        Ok(())
    }

    /// Discretized `(Abar, Bbar)` for token `k`, channel `h`.
    pub fn discretized(&self, k: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
        discretize(self.a.row(h), self.b.row(k), self.delta.at(k, h)).expect("validated parameters")
    }

    /// Reorders the per-token parameters so token `k` takes the parameters
    /// of token `order[k]`.
    pub fn reorder(&self, order: &[usize]) -> Self {
        let pick = |arr: &DenseArray| {
            DenseArray::from_fn2(order.len(), arr.cols(), |i, j| arr.at(order[i], j))
        };
        Self {
            a: self.a.clone(),
            delta: pick(&self.delta),
            b: pick(&self.b),
            c: pick(&self.c),
        }
    }
}

/// Lag set with fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LagSpec {
    offsets: Vec<usize>,
    weights: Vec<f64>,
    dilation_factors: Vec<usize>,
}

impl LagSpec {
    pub fn new(offsets: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if offsets.is_empty() || !offsets.contains(&0) {
            return Err(Error::DimensionMismatch(
                "lag set must be non-empty and contain offset 0".into(),
            ));
        }
        if offsets.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} lags but {} weights",
                offsets.len(),
                weights.len()
            )));
        }
        Ok(Self {
            offsets,
            weights,
            dilation_factors: Vec::new(),
        })
    }

    /// The single-lag set `{0}` with unit weight.
    pub fn current_only() -> Self {
        Self::new(vec![0], vec![1.0]).expect("valid")
    }

    /// Lags `{0} U {period * f}` for each dilation factor `f`.
    /// `weights[0]` weighs the current state, `weights[i + 1]` factor `i`.
    pub fn from_dilations(period: usize, factors: &[usize], weights: Vec<f64>) -> Result<Self> {
        if period < 1 {
            return Err(Error::InvalidPeriod(period));
        }
        if factors.contains(&0) {
            return Err(Error::DimensionMismatch(
                "dilation factors must be >= 1".into(),
            ));
        }
        let mut offsets = vec![0];
        offsets.extend(factors.iter().map(|f| f * period));
        let mut spec = Self::new(offsets, weights)?;
        spec.dilation_factors = factors.to_vec();
        Ok(spec)
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dilation_factors(&self) -> &[usize] {
        &self.dilation_factors
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(Error::DimensionMismatch("weight count changed".into()));
        }
        Ok(Self {
            weights,
            ..self.clone()
        })
    }
}

/// Divisor of `len` closest to `floor(sqrt(len))`; ties go to the smaller.
pub fn default_period(len: usize) -> usize {
    let target = (len as f64).sqrt().floor() as usize;
    (1..=len.max(1))
        .filter(|d| len.is_multiple_of(*d))
        .min_by_key(|&d| (d.abs_diff(target), d))
        .unwrap_or(1)
}

/// Everything the backward pass needs from a forward scan.
struct Trace {
    k: usize,
    h: usize,
    n: usize,
    /// `[K, H, N]` states
    states: Vec<f64>,
    abar: Vec<f64>,
    /// `expm1(Delta A) / A`, so that `Bbar = phi * B`
    phi: Vec<f64>,
}

impl Trace {
    fn at(&self, k: usize, h: usize, n: usize) -> usize {
        (k * self.h + h) * self.n + n
    }
}

fn check_input(x: &DenseArray, k: usize, h: usize) -> Result<()> {
    if x.shape() != [k, h] {
        return Err(Error::DimensionMismatch(format!(
            "input is {:?}, parameters expect [{k}, {h}]",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("scan input".into()));
    }
    Ok(())
}

fn run_states(a: &DenseArray, delta: &DenseArray, b: &DenseArray, x: &DenseArray) -> Trace {
    let (k_len, h_len, n_len) = (x.rows(), x.cols(), a.cols());
    let total = k_len * h_len * n_len;
    let mut tr = Trace {
        k: k_len,
        h: h_len,
        n: n_len,
        states: vec![0.0; total],
        abar: vec![0.0; total],
        phi: vec![0.0; total],
    };
    for k in 0..k_len {
        for h in 0..h_len {
            let dt = delta.at(k, h);
            let xk = x.at(k, h);
            for n in 0..n_len {
                let an = a.at(h, n);
                let ab = (dt * an).exp();
                let phi = (dt * an).exp_m1() / an;
                let i = tr.at(k, h, n);
                let prev = if k == 0 {
                    0.0
                } else {
                    tr.states[tr.at(k - 1, h, n)]
                };
                tr.states[i] = ab * prev + phi * b.at(k, n) * xk;
                tr.abar[i] = ab;
                tr.phi[i] = phi;
            }
        }
    }
    tr
}

/// Fused readout state `u_k` at `(k, h, n)`.
fn fused(tr: &Trace, lags: Option<(&[usize], &[f64])>, k: usize, h: usize, n: usize) -> f64 {
    match lags {
        None => tr.states[tr.at(k, h, n)],
        Some((offsets, weights)) => {
            let mut acc: Option<f64> = None;
            for (&o, &w) in offsets.iter().zip(weights) {
                if o <= k {
                    let term = w * tr.states[tr.at(k - o, h, n)];
                    acc = Some(acc.map_or(term, |a| a + term));
                }
            }
            acc.unwrap_or(0.0)
        }
    }
}

fn readout(tr: &Trace, c: &DenseArray, lags: Option<(&[usize], &[f64])>) -> DenseArray {
    DenseArray::from_fn2(tr.k, tr.h, |k, h| {
        (0..tr.n)
            .map(|n| c.at(k, n) * fused(tr, lags, k, h, n))
            .sum()
    })
}

/// Plain selective scan: `y_k = C_k . h_k`.
pub fn selective_scan(params: &SsmParams, x: &DenseArray) -> Result<DenseArray> {
    check_input(x, params.seq_len(), params.channels())?;
    let tr = run_states(&params.a, &params.delta, &params.b, x);
    Ok(readout(&tr, &params.c, None))
}

/// Lag-state fusion scan: `y_k = C_k . sum_p eta_p h_{k - o_p}`.
pub fn lag_fusion_scan(params: &SsmParams, lags: &LagSpec, x: &DenseArray) -> Result<DenseArray> {
    check_input(x, params.seq_len(), params.channels())?;
    let tr = run_states(&params.a, &params.delta, &params.b, x);
    Ok(readout(
        &tr,
        &params.c,
        Some((lags.offsets(), lags.weights())),
    ))
}

/// Latent state sequence of the plain scan for a single input channel,
/// shaped `[K x N]`.
pub fn state_sequence(params: &SsmParams, x: &DenseArray, channel: usize) -> Result<DenseArray> {
    check_input(x, params.seq_len(), params.channels())?;
    let tr = run_states(&params.a, &params.delta, &params.b, x);
    Ok(DenseArray::from_fn2(tr.k, tr.n, |k, n| {
        tr.states[tr.at(k, channel, n)]
    }))
}

/// Lag fusion realized as a 2-D depth-wise dilated convolution.
///
/// The `[K x N]` state sequence is zero-padded at the end to a multiple of
/// `period` and viewed as a `[K / period, period]` grid per state entry.
/// Each dilation factor `f` contributes a causal tap `f` rows up, i.e. a lag
/// of `f * period` positions, and taps that fall above the grid read zero.
/// `weights[0]` scales the current state and `weights[i + 1]` the tap of
/// dilation factor `i`.
pub fn dilated_fusion(states: &DenseArray, lags: &LagSpec, period: usize) -> Result<DenseArray> {
    if period < 1 {
        return Err(Error::InvalidPeriod(period));
    }
    let factors = lags.dilation_factors();
    let weights = lags.weights();
    if weights.len() != factors.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} dilation factors need {} weights, got {}",
            factors.len(),
            factors.len() + 1,
            weights.len()
        )));
    }
    let (k_len, n_len) = (states.rows(), states.cols());
    let rows = k_len.div_ceil(period);
    let mut grid = vec![0.0; rows * period * n_len];
    grid[..k_len * n_len].copy_from_slice(states.data());
    let cell = |r: usize, c: usize, n: usize| (r * period + c) * n_len + n;
    let mut out = vec![0.0; rows * period * n_len];
    for r in 0..rows {
        for c in 0..period {
            for n in 0..n_len {
                let mut acc = weights[0] * grid[cell(r, c, n)];
                for (&f, &w) in factors.iter().zip(&weights[1..]) {
                    if r >= f {
                        acc += w * grid[cell(r - f, c, n)];
                    }
                }
                out[cell(r, c, n)] = acc;
            }
        }
    }
    out.truncate(k_len * n_len);
    DenseArray::matrix(k_len, n_len, out)
}

/// Checks that `h` is a permutation matrix and returns the scan order
/// `order[k]` = index of the input row placed at position `k`, i.e.
/// `(H x)_k = x_{order[k]}`.
pub fn permutation_order(h: &DenseArray) -> Result<Vec<usize>> {
    let c = h.rows();
    if h.shape() != [c, c] {
        return Err(Error::NotPermutation(format!("shape {:?}", h.shape())));
    }
    let mut order = Vec::with_capacity(c);
    let mut seen = vec![false; c];
    for k in 0..c {
        let row = h.row(k);
        if row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NotPermutation(format!(
                "row {k} has non-binary entries"
            )));
        }
        let ones: Vec<usize> = (0..c).filter(|&j| row[j] == 1.0).collect();
        if ones.len() != 1 || seen[ones[0]] {
            return Err(Error::NotPermutation(format!(
                "row {k} must select exactly one unused column"
            )));
        }
        seen[ones[0]] = true;
        order.push(ones[0]);
    }
    Ok(order)
}

/// Channel permutation scan: `y = H^{-1} scan(H x)`. `params` are indexed
/// by scan position, i.e. already evaluated on the reordered tokens.
pub fn permutation_scan(params: &SsmParams, h: &DenseArray, x: &DenseArray) -> Result<DenseArray> {
    let order = permutation_order(h)?;
    if x.rows() != order.len() {
        return Err(Error::DimensionMismatch(format!(
            "permutation of size {} applied to {} tokens",
            order.len(),
            x.rows()
        )));
    }
    let permuted = DenseArray::from_fn2(x.rows(), x.cols(), |k, j| x.at(order[k], j));
    let y = selective_scan(params, &permuted)?;
    let mut out = DenseArray::zeros(y.shape());
    for (k, &src) in order.iter().enumerate() {
        for j in 0..y.cols() {
            out.set(src, j, y.at(k, j));
        }
    }
    Ok(out)
}

/// `prod_{j = i+1..=k} Abar_j` for channel `h`, state entry `n`.
fn transition_product(abar: &[Vec<Vec<f64>>], i: usize, k: usize, h: usize, n: usize) -> f64 {
    ((i + 1)..=k).map(|j| abar[j][h][n]).product()
}

/// Per position, channel and state entry.
type Table = Vec<Vec<Vec<f64>>>;

fn discretized_tables(params: &SsmParams) -> (Table, Table) {
    let (k_len, h_len) = (params.seq_len(), params.channels());
    let mut abar = Vec::with_capacity(k_len);
    let mut bbar = Vec::with_capacity(k_len);
    for k in 0..k_len {
        let (a_row, b_row): (Vec<_>, Vec<_>) = (0..h_len).map(|h| params.discretized(k, h)).unzip();
        abar.push(a_row);
        bbar.push(b_row);
    }
    (abar, bbar)
}

/// Per-channel `[K x K]` matrices with
/// `M_{ki} = C_k . (prod_{j=i+1..k} Abar_j) Bbar_i` for `i <= k`, zero above.
pub fn materialize_m(params: &SsmParams) -> Vec<DenseArray> {
    let lags = LagSpec::current_only();
    materialize_mf(params, &lags)
}

/// Per-channel lag-fusion matrices
/// `M^F_{ki} = sum_p eta_p C_k . (prod_{j=i+1..l_p(k)} Abar_j) Bbar_i` over
/// `i <= l_p(k) = k - o_p`.
pub fn materialize_mf(params: &SsmParams, lags: &LagSpec) -> Vec<DenseArray> {
    let (k_len, h_len, n_len) = (params.seq_len(), params.channels(), params.state_dim());
    let (abar, bbar) = discretized_tables(params);
    (0..h_len)
        .map(|h| {
            DenseArray::from_fn2(k_len, k_len, |k, i| {
                let mut total = 0.0;
                for (&o, &eta) in lags.offsets().iter().zip(lags.weights()) {
                    if o > k || i > k - o {
                        continue;
                    }
                    let l = k - o;
                    let entry: f64 = (0..n_len)
                        .map(|n| {
                            params.c.at(k, n)
                                * transition_product(&abar, i, l, h, n)
                                * bbar[i][h][n]
                        })
                        .sum();
                    total += eta * entry;
                }
                total
            })
        })
        .collect()
}

/// Per-channel `M^C = H^{-1} M H` for a permutation scan, built entrywise
/// through the permutation indices: `M^C_{ab} = M_{pos(a), pos(b)}`.
pub fn materialize_mc(params: &SsmParams, h: &DenseArray) -> Result<Vec<DenseArray>> {
    let order = permutation_order(h)?;
    let c = order.len();
    if params.seq_len() != c {
        return Err(Error::DimensionMismatch(format!(
            "permutation of size {c} for {} scan positions",
            params.seq_len()
        )));
    }
    let mut pos = vec![0; c];
    for (k, &src) in order.iter().enumerate() {
        pos[src] = k;
    }
    Ok(materialize_m(params)
        .into_iter()
        .map(|m| DenseArray::from_fn2(c, c, |a, b| m.at(pos[a], pos[b])))
        .collect())
}

/// Backward rule for the scan node.
struct ScanBackward {
    trace: Trace,
    offsets: Option<Vec<usize>>,
}

impl Backward for ScanBackward {
    fn backward(
        &self,
        gy: &DenseArray,
        inputs: &[&DenseArray],
        _output: &DenseArray,
    ) -> Result<Vec<DenseArray>> {
        let tr = &self.trace;
        let (x, delta, a, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let eta = inputs.get(5).map(|e| e.data());
        let lags = self.offsets.as_deref().zip(eta);

        let mut gx = DenseArray::zeros(x.shape());
        let mut gdelta = DenseArray::zeros(delta.shape());
        let mut ga = DenseArray::zeros(a.shape());
        let mut gb = DenseArray::zeros(b.shape());
        let mut gc = DenseArray::zeros(c.shape());
        let mut geta = eta.map(|e| vec![0.0; e.len()]);

        let mut gu = vec![0.0; tr.k];
        let mut gh = vec![0.0; tr.k];
        for h in 0..tr.h {
            for n in 0..tr.n {
                for k in 0..tr.k {
                    let g = gy.at(k, h);
                    gu[k] = g * c.at(k, n);
                    let u = fused(tr, lags, k, h, n);
                    gc.data_mut()[k * tr.n + n] += g * u;
                }
                match lags {
                    None => gh.copy_from_slice(&gu),
                    Some((offsets, weights)) => {
                        gh.iter_mut().for_each(|v| *v = 0.0);
                        let geta = geta.as_mut().expect("eta present");
                        for (p, (&o, &w)) in offsets.iter().zip(weights).enumerate() {
                            for k in o..tr.k {
                                gh[k - o] += w * gu[k];
                                geta[p] += gu[k] * tr.states[tr.at(k - o, h, n)];
                            }
                        }
                    }
                }
                let an = a.at(h, n);
                let mut carry = 0.0;
                for k in (0..tr.k).rev() {
                    let i = tr.at(k, h, n);
                    let total = gh[k] + carry;
                    let abar = tr.abar[i];
                    let phi = tr.phi[i];
                    let bk = b.at(k, n);
                    let xk = x.at(k, h);
                    let dt = delta.at(k, h);
                    gx.data_mut()[k * tr.h + h] += total * phi * bk;
                    let gbbar = total * xk;
                    let prev = if k == 0 {
                        0.0
                    } else {
                        tr.states[tr.at(k - 1, h, n)]
                    };
                    let gabar = total * prev;
                    let gphi = gbbar * bk;
                    gb.data_mut()[k * tr.n + n] += gbbar * phi;
                    gdelta.data_mut()[k * tr.h + h] += gabar * abar * an + gphi * abar;
                    let dphi_da = (dt * an * abar - (dt * an).exp_m1()) / (an * an);
                    ga.data_mut()[h * tr.n + n] += gabar * abar * dt + gphi * dphi_da;
                    carry = abar * total;
                }
            }
        }
        let mut out = vec![gx, gdelta, ga, gb, gc];
        if let Some(ge) = geta {
            out.push(DenseArray::vector(ge));
        }
        Ok(out)
    }
}

/// Differentiable scan node. Inputs: `x [K x H]`, `delta [K x H]` (positive),
/// `a [H x N]` (negative), `b [K x N]`, `c [K x N]`, and optionally the lag
/// offsets with a weight vector node `eta [P]`.
pub fn scan_node(
    g: &mut Graph,
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    lags: Option<(&[usize], Var)>,
) -> Result<Var> {
    let (xv, dv, av, bv, cv) = (
        g.value(x),
        g.value(delta),
        g.value(a),
        g.value(b),
        g.value(c),
    );
    let (k, h, n) = (xv.rows(), xv.cols(), av.cols());
    check_input(xv, k, h)?;
    if dv.shape() != [k, h] || av.rows() != h || bv.shape() != [k, n] || cv.shape() != [k, n] {
        return Err(Error::DimensionMismatch(format!(
            "scan x {:?} delta {:?} A {:?} B {:?} C {:?}",
            xv.shape(),
            dv.shape(),
            av.shape(),
            bv.shape(),
            cv.shape()
        )));
    }
    if let Some((index, &value)) = av.data().iter().enumerate().find(|(_, &v)| !(v < 0.0)) {
        return Err(Error::Unstable { index, value });
    }
    let trace = run_states(av, dv, bv, xv);
    let mut inputs = vec![x, delta, a, b, c];
    let (value, offsets) = match lags {
        None => (readout(&trace, cv, None), None),
        Some((offsets, eta)) => {
            let ev = g.value(eta);
            if ev.len() != offsets.len() || !offsets.contains(&0) {
                return Err(Error::DimensionMismatch(format!(
                    "{} lag offsets, {} weights",
                    offsets.len(),
                    ev.len()
                )));
            }
            inputs.push(eta);
            (
                readout(&trace, cv, Some((offsets, ev.data()))),
                Some(offsets.to_vec()),
            )
        }
    };
    Ok(g.custom(&inputs, value, Box::new(ScanBackward { trace, offsets })))
}
