//! Gaussian-kernel machinery: L^1 norms of heat-kernel derivatives, iterated
//! simplex integrals of drift-derivative products along Brownian marginals,
//! their signed expansion into allowed kernel strings, and rate fits against
//! the Gamma-function bound.

use crate::numerics::{adaptive_simpson, fit_line, gauss_hermite, gauss_legendre, mean_se};
use crate::rng::{standard_normal, uniform};
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("iterated integrals are implemented for n <= 3, got {0}")]
    TooManyFactors(usize),
    #[error("field and multi-index lists must have equal nonzero length")]
    MismatchedLists,
    #[error("nested quadrature is implemented for d = 1 only")]
    QuadratureNeedsOneDim,
    #[error("need t > t0 >= 0")]
    BadWindow,
    #[error("rate fit needs >= 5 points above the noise floor spanning 1.5 decades")]
    DegenerateFit,
}

// ---------------------------------------------------------------------------
// Heat kernel
// ---------------------------------------------------------------------------

/// P(t, z) = (2 pi t)^{-d/2} exp(-|z|^2 / 2t) with its first two spatial
/// derivatives.
#[derive(Debug, Clone, Copy)]
pub struct HeatKernel {
    pub d: usize,
}

impl HeatKernel {
    pub fn eval(&self, t: f64, z: &[f64]) -> f64 {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        (2.0 * PI * t).powf(-(self.d as f64) / 2.0) * (-r2 / (2.0 * t)).exp()
    }

    pub fn grad(&self, t: f64, z: &[f64], i: usize) -> f64 {
        -z[i] / t * self.eval(t, z)
    }

    pub fn hess(&self, t: f64, z: &[f64], i: usize, j: usize) -> f64 {
        let delta = if i == j { 1.0 } else { 0.0 };
        (z[i] * z[j] / (t * t) - delta / t) * self.eval(t, z)
    }

    /// Total mass by tensor Gauss-Hermite quadrature.
    pub fn mass_quadrature(&self, t: f64, order: usize) -> f64 {
        let (x, w) = gauss_hermite(order);
        // z = sqrt(2t) u per axis turns the kernel into the GH weight
        let one_axis: f64 = w.iter().sum::<f64>() / PI.sqrt();
        let _ = (x, t);
        one_axis.powi(self.d as i32)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DerivOrder {
    First(usize),
    Second(usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct KernelL1 {
    pub value: f64,
    /// t-exponent of the scaling law the value obeys
    pub scaling_exponent: f64,
}

/// int |D^a P(t, z)| dz: the first order is returned analytically
/// (sqrt(2/(pi t))), the second order by adaptive quadrature of the 1-d
/// reductions.
pub fn kernel_l1_derivative(t: f64, order: DerivOrder) -> Result<KernelL1, KernelError> {
    if t <= 0.0 {
        return Err(KernelError::NonPositiveTime(t));
    }
    match order {
        DerivOrder::First(_) => Ok(KernelL1 {
            value: (2.0 / (PI * t)).sqrt(),
            scaling_exponent: -0.5,
        }),
        DerivOrder::Second(i, j) => {
            let rho = |v: f64| (2.0 * PI * t).powf(-0.5) * (-v * v / (2.0 * t)).exp();
            let hi = 14.0 * t.sqrt();
            let value = if i != j {
                // |z_i z_j| / t^2 factorises into two absolute-moment integrals
                let m1 = 2.0 * adaptive_simpson(&|v: f64| v * rho(v), 0.0, hi, 1e-12);
                m1 * m1 / (t * t)
            } else {
                // |z^2/t^2 - 1/t| rho(z), kink at |z| = sqrt(t)
                let f = |v: f64| (v * v / (t * t) - 1.0 / t).abs() * rho(v);
                2.0 * (adaptive_simpson(&f, 0.0, t.sqrt(), 1e-13)
                    + adaptive_simpson(&f, t.sqrt(), hi, 1e-13))
            };
            Ok(KernelL1 {
                value,
                scaling_exponent: -1.0,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Smooth scalar fields (the b_i of the iterated integrals)
// ---------------------------------------------------------------------------

type ScalarEval = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type ScalarDeriv = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct SmoothScalarField {
    eval: ScalarEval,
    deriv: ScalarDeriv,
    pub sup: f64,
    pub d: usize,
    pub name: String,
}

impl SmoothScalarField {
    pub fn new(
        name: &str,
        d: usize,
        sup: f64,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(&[f64], usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SmoothScalarField {
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            sup,
            d,
            name: name.to_string(),
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        (self.eval)(z)
    }

    pub fn d_value(&self, z: &[f64], axis: usize) -> f64 {
        (self.deriv)(z, axis)
    }

    pub fn sin_1d() -> Self {
        Self::new("sin", 1, 1.0, |z| z[0].sin(), |z, _| z[0].cos())
    }

    pub fn gaussian_bump_1d(width: f64) -> Self {
        let w2 = width * width;
        Self::new(
            "gaussian_bump",
            1,
            1.0,
            move |z| (-z[0] * z[0] / (2.0 * w2)).exp(),
            move |z, _| -z[0] / w2 * (-z[0] * z[0] / (2.0 * w2)).exp(),
        )
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self::new("constant", d, c.abs(), move |_| c, |_, _| 0.0)
    }
}

// ---------------------------------------------------------------------------
// Signed string expansion of the derivative integral
// ---------------------------------------------------------------------------

/// A letter of the kernel alphabet; indices refer to positions in the
/// multi-index list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Letter {
    Plain,
    First(usize),
    Second(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StringTerm {
    pub sign: i8,
    pub letters: Vec<Letter>,
}

impl StringTerm {
    /// Allowed strings: deleting every first-derivative letter must leave the
    /// alternating plain/second-derivative pattern with consecutive, chained
    /// index pairs, and the first-derivative letters must appear in
    /// increasing index order.
    pub fn is_allowed(&self) -> bool {
        let firsts: Vec<usize> = self
            .letters
            .iter()
            .filter_map(|l| match l {
                Letter::First(i) => Some(*i),
                _ => None,
            })
            .collect();
        if firsts.windows(2).any(|w| w[0] >= w[1]) {
            return false;
        }
        let rest: Vec<Letter> = self
            .letters
            .iter()
            .copied()
            .filter(|l| !matches!(l, Letter::First(_)))
            .collect();
        if rest.is_empty() {
            return true;
        }
        if !rest.len().is_multiple_of(2) {
            return false;
        }
        let mut prev_pair: Option<usize> = None;
        for (pos, chunk) in rest.chunks(2).enumerate() {
            match (chunk[0], chunk[1]) {
                (Letter::Plain, Letter::Second(a, b)) => {
                    if b != a + 1 {
                        return false;
                    }
                    if let Some(prev) = prev_pair {
                        if a != prev + 1 {
                            return false;
                        }
                    }
                    prev_pair = Some(a);
                    let _ = pos;
                }
                _ => return false,
            }
        }
        true
    }
}

/// The signed expansion of the n-fold derivative integral into 2^{n-1}
/// allowed kernel strings, built by the two-branch integration-by-parts
/// recursion: prepending slot k maps each term (e, S) to
/// (-e, D_k P . S) and (e, P . S~) with the head of S upgraded by D_k.
pub fn string_expansion(n: usize, alphas: &[usize]) -> Result<Vec<StringTerm>, KernelError> {
    if n == 0 || n > 3 {
        return Err(KernelError::TooManyFactors(n));
    }
    if alphas.len() != n {
        return Err(KernelError::MismatchedLists);
    }
    let mut terms = vec![StringTerm {
        sign: -1,
        letters: vec![Letter::First(n - 1)],
    }];
    for k in (0..n - 1).rev() {
        let mut next = Vec::with_capacity(terms.len() * 2);
        for term in &terms {
            let mut branch1 = vec![Letter::First(k)];
            branch1.extend_from_slice(&term.letters);
            next.push(StringTerm {
                sign: -term.sign,
                letters: branch1,
            });
            let mut upgraded = term.letters.clone();
            upgraded[0] = match upgraded[0] {
                Letter::Plain => Letter::First(k),
                Letter::First(j) => Letter::Second(k, j),
                Letter::Second(_, _) => unreachable!("heads are plain or first"),
            };
            let mut branch2 = vec![Letter::Plain];
            branch2.extend_from_slice(&upgraded);
            next.push(StringTerm {
                sign: term.sign,
                letters: branch2,
            });
        }
        terms = next;
    }
    Ok(terms)
}

// ---------------------------------------------------------------------------
// Iterated integrals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMethod {
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy)]
pub struct IteratedEstimate {
    pub value: f64,
    pub std_error: f64,
    /// C^n prod ||b_i|| (t - t0)^{n/2} / Gamma(n/2 + 1)
    pub bound: f64,
    pub c_used: f64,
}

pub const DEFAULT_BOUND_C: f64 = 10.0;

fn gamma_half(n: usize) -> f64 {
    // Gamma(n/2 + 1) for n = 1, 2, 3
    match n {
        1 => 0.5 * PI.sqrt(),
        2 => 1.0,
        3 => 0.75 * PI.sqrt(),
        _ => unreachable!(),
    }
}

pub fn iterated_integral_bound(n: usize, sups: &[f64], t0: f64, t: f64, c: f64) -> f64 {
    let prod: f64 = sups.iter().product();
    c.powi(n as i32) * prod * (t - t0).powf(n as f64 / 2.0) / gamma_half(n)
}

const TIME_ORDER: usize = 16;
const SPACE_ORDER: usize = 32;

/// Nested quadrature of either the direct derivative integral (letters =
/// None) or one kernel string (letters = Some), d = 1.
fn nested_quadrature(
    bs: &[SmoothScalarField],
    letters: Option<&[Letter]>,
    t0: f64,
    t: f64,
    x: f64,
) -> f64 {
    let n = bs.len();
    let (ql, wl) = gauss_legendre(TIME_ORDER);
    // map GL nodes to (0, 1)
    let q01: Vec<(f64, f64)> = ql
        .iter()
        .zip(&wl)
        .map(|(q, w)| (0.5 * (q + 1.0), 0.5 * w))
        .collect();
    let (hx, hw) = gauss_hermite(SPACE_ORDER);
    let gh: Vec<(f64, f64)> = hx
        .iter()
        .zip(&hw)
        .map(|(u, w)| (2f64.sqrt() * u, w / PI.sqrt()))
        .collect();
    let span = t - t0;
    let mut total = 0.0;
    let mut qidx = vec![0usize; n];
    let time_nodes = TIME_ORDER.pow(n as u32);
    let space_nodes = SPACE_ORDER.pow(n as u32);
    for tflat in 0..time_nodes {
        let mut rem = tflat;
        for k in (0..n).rev() {
            qidx[k] = rem % TIME_ORDER;
            rem /= TIME_ORDER;
        }
        // ordered map s_i = prod_{j >= i} q_j with jacobian prod_{i >= 2} s_i
        let mut s = vec![0.0; n];
        let mut time_w = 1.0;
        let mut prod = 1.0;
        for i in (0..n).rev() {
            let (q, w) = q01[qidx[i]];
            prod *= q;
            s[i] = prod;
            time_w *= w;
        }
        let mut jac = 1.0;
        for si in s.iter().skip(1) {
            jac *= si;
        }
        let mut deltas = vec![0.0; n];
        let mut prev = 0.0;
        for i in 0..n {
            deltas[i] = span * (s[i] - prev);
            prev = s[i];
        }
        if deltas.iter().any(|d| *d <= 0.0) {
            continue;
        }
        let sqrt_d: Vec<f64> = deltas.iter().map(|d| d.sqrt()).collect();
        let mut vidx = vec![0usize; n];
        let mut space_acc = 0.0;
        for vflat in 0..space_nodes {
            let mut rem = vflat;
            for k in (0..n).rev() {
                vidx[k] = rem % SPACE_ORDER;
                rem /= SPACE_ORDER;
            }
            let mut z = 0.0;
            let mut integrand = 1.0;
            for i in 0..n {
                let (v, w) = gh[vidx[i]];
                z += sqrt_d[i] * v;
                let point = [x + z];
                let factor = match letters {
                    None => bs[i].d_value(&point, 0),
                    Some(ls) => {
                        let letter_factor = match ls[i] {
                            Letter::Plain => 1.0,
                            Letter::First(_) => -v / sqrt_d[i],
                            Letter::Second(_, _) => (v * v - 1.0) / deltas[i],
                        };
                        bs[i].value(&point) * letter_factor
                    }
                };
                integrand *= factor * w;
            }
            space_acc += integrand;
        }
        total += time_w * jac * space_acc;
    }
    total * span.powi(n as i32)
}

/// E[ int_{t0 < t1 < ... < tn < t} prod D^{a_i} b_i(x + B_{t_i}) dt ] by
/// nested Gaussian quadrature or by Monte Carlo over the ordered simplex.
pub fn iterated_integral(
    bs: &[SmoothScalarField],
    alphas: &[usize],
    t0: f64,
    t: f64,
    x: &[f64],
    method: IntegrationMethod,
    budget: usize,
    seed: u64,
) -> Result<IteratedEstimate, KernelError> {
    let n = bs.len();
    if n == 0 || n > 3 {
        return Err(KernelError::TooManyFactors(n));
    }
    if alphas.len() != n {
        return Err(KernelError::MismatchedLists);
    }
    if !(t > t0 && t0 >= 0.0) {
        return Err(KernelError::BadWindow);
    }
    let sups: Vec<f64> = bs.iter().map(|b| b.sup).collect();
    let bound = iterated_integral_bound(n, &sups, t0, t, DEFAULT_BOUND_C);
    match method {
        IntegrationMethod::Quadrature => {
            let d = bs[0].d;
            if d != 1 {
                return Err(KernelError::QuadratureNeedsOneDim);
            }
            let value = nested_quadrature(bs, None, t0, t, x[0]);
            Ok(IteratedEstimate {
                value,
                std_error: 0.0,
                bound,
                c_used: DEFAULT_BOUND_C,
            })
        }
        IntegrationMethod::MonteCarlo => {
            let d = bs[0].d;
            let span = t - t0;
            let volume = span.powi(n as i32)
                / match n {
                    1 => 1.0,
                    2 => 2.0,
                    _ => 6.0,
                };
            let samples: Vec<f64> = (0..budget)
                .into_par_iter()
                .map(|k| {
                    let stream = k as u64;
                    let mut times: Vec<f64> = (0..n)
                        .map(|i| t0 + span * uniform(seed, stream, i as u64))
                        .collect();
                    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let mut z = vec![0.0; d];
                    let mut prev_t = t0;
                    let mut prod = 1.0;
                    for (i, ti) in times.iter().enumerate() {
                        let dt = ti - prev_t;
                        for c in 0..d {
                            z[c] +=
                                dt.sqrt() * standard_normal(seed, stream, (n + i * d + c) as u64);
                        }
                        prev_t = *ti;
                        let point: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
                        prod *= bs[i].d_value(&point, alphas[i]);
                    }
                    prod
                })
                .collect();
            let (mean, se) = mean_se(&samples);
            Ok(IteratedEstimate {
                value: volume * mean,
                std_error: volume * se,
                bound,
                c_used: DEFAULT_BOUND_C,
            })
        }
    }
}

/// Relative discrepancy between the direct integral J_n and its signed
/// string expansion, both by nested quadrature (n <= 2).
pub fn string_expansion_numeric_check(
    bs: &[SmoothScalarField],
    alphas: &[usize],
    t0: f64,
    t: f64,
    x: f64,
) -> Result<f64, KernelError> {
    let n = bs.len();
    if n == 0 || n > 2 {
        return Err(KernelError::TooManyFactors(n));
    }
    if bs.iter().any(|b| b.d != 1) {
        return Err(KernelError::QuadratureNeedsOneDim);
    }
    let direct = nested_quadrature(bs, None, t0, t, x);
    let terms = string_expansion(n, alphas)?;
    let mut expanded = 0.0;
    for term in &terms {
        expanded += term.sign as f64 * nested_quadrature(bs, Some(&term.letters), t0, t, x);
    }
    // floor the scale at a small multiple of the integrals' natural size so
    // identically-vanishing cases read as zero discrepancy
    let sups: Vec<f64> = bs.iter().map(|b| b.sup).collect();
    let natural = iterated_integral_bound(n, &sups, t0, t, 1.0);
    let scale = direct
        .abs()
        .max(expanded.abs())
        .max(1e-9 * natural.max(1e-3));
    Ok((direct - expanded).abs() / scale)
}

// ---------------------------------------------------------------------------
// Rate fits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    pub slope: f64,
    pub se: f64,
}

/// Slope of log |J| against log (t - t0) for values on a geometric t-grid.
pub fn gamma_rate_fit(
    ts: &[f64],
    values: &[f64],
    t0: f64,
    noise_floor: f64,
) -> Result<RateFit, KernelError> {
    assert_eq!(ts.len(), values.len());
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(values)
        .filter(|(t, v)| v.abs() > noise_floor && **t > t0)
        .map(|(t, v)| ((t - t0).ln(), v.abs().ln()))
        .collect();
    if pts.len() < 5 {
        return Err(KernelError::DegenerateFit);
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let span =
        xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
    if span < 1.5 * 10f64.ln() - 1e-9 {
        return Err(KernelError::DegenerateFit);
    }
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = fit_line(&xs, &ys);
    Ok(RateFit {
        slope: fit.slope,
        se: fit.slope_se,
    })
}

/// JSON record for one estimate, per the reporting interface.
pub fn estimate_record(
    n: usize,
    alphas: &[usize],
    t0: f64,
    t: f64,
    est: &IteratedEstimate,
) -> serde_json::Value {
    serde_json::json!({
        "n": n,
        "alpha": alphas,
        "t0": t0,
        "t": t,
        "estimate": est.value,
        "se": est.std_error,
        "bound": est.bound,
        "C_used": est.c_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_kernel_mass_is_one() {
        for d in [1usize, 2] {
            let hk = HeatKernel { d };
            for t in [1e-3, 0.1, 1.0, 10.0] {
                let mass = hk.mass_quadrature(t, 32);
                assert!((mass - 1.0).abs() < 1e-8, "d={d}, t={t}: {mass}");
            }
        }
    }

    #[test]
    fn heat_kernel_derivatives_match_finite_differences() {
        let hk = HeatKernel { d: 2 };
        let t = 0.7;
        let z = [0.3, -0.4];
        let h = 1e-6;
        let g = hk.grad(t, &z, 0);
        let num = (hk.eval(t, &[z[0] + h, z[1]]) - hk.eval(t, &[z[0] - h, z[1]])) / (2.0 * h);
        assert!((g - num).abs() < 1e-8);
        let hxy = hk.hess(t, &z, 0, 1);
        let num2 =
            (hk.grad(t, &[z[0], z[1] + h], 0) - hk.grad(t, &[z[0], z[1] - h], 0)) / (2.0 * h);
        assert!((hxy - num2).abs() < 1e-7);
    }

    #[test]
    fn l1_first_derivative_analytic() {
        let v = kernel_l1_derivative(1.0, DerivOrder::First(0)).unwrap();
        assert!((v.value - (2.0 / PI).sqrt()).abs() < 1e-14);
        // scaling: value(t) sqrt(t) constant over four decades
        let vals: Vec<f64> = [0.01, 0.1, 1.0, 10.0]
            .iter()
            .map(|t| {
                kernel_l1_derivative(*t, DerivOrder::First(0))
                    .unwrap()
                    .value
                    * t.sqrt()
            })
            .collect();
        for v in &vals {
            assert!((v - vals[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn l1_second_derivative_mixed_and_diagonal() {
        let mixed = kernel_l1_derivative(1.0, DerivOrder::Second(0, 1)).unwrap();
        assert!((mixed.value - 2.0 / PI).abs() < 1e-6, "{}", mixed.value);
        // diagonal oracle: E|Z^2 - 1| = 4 phi(1) for standard normal
        let diag = kernel_l1_derivative(1.0, DerivOrder::Second(0, 0)).unwrap();
        let phi1 = (-0.5f64).exp() / (2.0 * PI).sqrt();
        assert!((diag.value - 4.0 * phi1).abs() < 1e-6, "{}", diag.value);
        // scaling: value(t) * t constant to 1e-5
        let vals: Vec<f64> = [0.01, 0.1, 1.0, 10.0]
            .iter()
            .map(|t| {
                kernel_l1_derivative(*t, DerivOrder::Second(0, 1))
                    .unwrap()
                    .value
                    * t
            })
            .collect();
        for v in &vals {
            assert!((v - vals[0]).abs() < 1e-5, "{vals:?}");
        }
    }

    #[test]
    fn l1_rejects_nonpositive_time() {
        assert!(kernel_l1_derivative(0.0, DerivOrder::First(0)).is_err());
    }

    #[test]
    fn string_counts_and_allowedness() {
        for n in 1..=3usize {
            let alphas = vec![0usize; n];
            let terms = string_expansion(n, &alphas).unwrap();
            assert_eq!(terms.len(), 1 << (n - 1));
            for term in &terms {
                assert!(term.is_allowed(), "term {term:?} not allowed");
                assert_eq!(term.letters.len(), n);
            }
        }
    }

    #[test]
    fn base_case_is_single_negative_first_derivative() {
        let terms = string_expansion(1, &[0]).unwrap();
        assert_eq!(terms.len(), 1);
        assert_eq!(terms[0].sign, -1);
        assert_eq!(terms[0].letters, vec![Letter::First(0)]);
    }

    #[test]
    fn three_letter_terms_match_hand_expansion() {
        let terms = string_expansion(3, &[0, 0, 0]).unwrap();
        let expect = [
            (
                -1,
                vec![Letter::First(0), Letter::First(1), Letter::First(2)],
            ),
            (
                1,
                vec![Letter::Plain, Letter::Second(0, 1), Letter::First(2)],
            ),
            (
                1,
                vec![Letter::First(0), Letter::Plain, Letter::Second(1, 2)],
            ),
            (
                -1,
                vec![Letter::Plain, Letter::First(0), Letter::Second(1, 2)],
            ),
        ];
        for (sign, letters) in &expect {
            assert!(
                terms
                    .iter()
                    .any(|t| t.sign == *sign && &t.letters == letters),
                "missing term ({sign}, {letters:?}); got {terms:?}"
            );
        }
    }

    #[test]
    fn disallowed_strings_are_rejected() {
        // first derivatives out of order
        let t = StringTerm {
            sign: 1,
            letters: vec![Letter::First(1), Letter::First(0)],
        };
        assert!(!t.is_allowed());
        // second-derivative pair with non-consecutive indices
        let t = StringTerm {
            sign: 1,
            letters: vec![Letter::Plain, Letter::Second(0, 2)],
        };
        assert!(!t.is_allowed());
        // bare plain letter after deletion (odd pattern)
        let t = StringTerm {
            sign: 1,
            letters: vec![Letter::Plain, Letter::First(0)],
        };
        assert!(!t.is_allowed());
    }

    #[test]
    fn j1_constant_is_zero() {
        let bs = vec![SmoothScalarField::constant(1, 0.8)];
        let est = iterated_integral(
            &bs,
            &[0],
            0.0,
            1.0,
            &[0.0],
            IntegrationMethod::Quadrature,
            0,
            0,
        )
        .unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn j1_sin_matches_characteristic_function_oracle() {
        // J_1 = int_0^t E cos(B_s) ds = int_0^t e^{-s/2} ds = 2(1 - e^{-t/2})
        let bs = vec![SmoothScalarField::sin_1d()];
        for t in [0.25, 1.0, 2.0] {
            let est = iterated_integral(
                &bs,
                &[0],
                0.0,
                t,
                &[0.0],
                IntegrationMethod::Quadrature,
                0,
                0,
            )
            .unwrap();
            let oracle = 2.0 * (1.0 - (-t / 2.0).exp());
            assert!((est.value - oracle).abs() < 1e-6, "t={t}: {}", est.value);
        }
    }

    #[test]
    fn j2_quadrature_against_gaussian_pair_oracle() {
        // E[cos B_s cos B_u] = (e^{-(u-s)/2} + e^{-(3s+u)/2}) / 2 for s < u;
        // integrate over the simplex by adaptive quadrature
        let bs = vec![SmoothScalarField::sin_1d(), SmoothScalarField::sin_1d()];
        let t = 1.0;
        let est = iterated_integral(
            &bs,
            &[0, 0],
            0.0,
            t,
            &[0.0],
            IntegrationMethod::Quadrature,
            0,
            0,
        )
        .unwrap();
        let inner = |s: f64| {
            adaptive_simpson(
                &|u: f64| 0.5 * ((-(u - s) / 2.0).exp() + (-(3.0 * s + u) / 2.0).exp()),
                s,
                t,
                1e-12,
            )
        };
        let oracle = adaptive_simpson(&inner, 0.0, t, 1e-10);
        assert!(
            (est.value - oracle).abs() < 1e-6,
            "{} vs {oracle}",
            est.value
        );
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature_n2() {
        let bs = vec![SmoothScalarField::sin_1d(), SmoothScalarField::sin_1d()];
        let quad = iterated_integral(
            &bs,
            &[0, 0],
            0.0,
            1.0,
            &[0.0],
            IntegrationMethod::Quadrature,
            0,
            0,
        )
        .unwrap();
        let mc = iterated_integral(
            &bs,
            &[0, 0],
            0.0,
            1.0,
            &[0.0],
            IntegrationMethod::MonteCarlo,
            200_000,
            314,
        )
        .unwrap();
        assert!(
            (quad.value - mc.value).abs() < 3.0 * mc.std_error,
            "quad {} vs mc {} +- {}",
            quad.value,
            mc.value,
            mc.std_error
        );
    }

    #[test]
    fn expansion_identity_n1_and_n2() {
        let sin = SmoothScalarField::sin_1d();
        let d1 = string_expansion_numeric_check(&[sin.clone()], &[0], 0.0, 1.0, 0.0).unwrap();
        assert!(d1 < 1e-6, "n=1 discrepancy {d1}");
        let bump = SmoothScalarField::gaussian_bump_1d(1.0);
        let d2 =
            string_expansion_numeric_check(&[bump.clone(), bump], &[0, 0], 0.0, 1.0, 0.3).unwrap();
        assert!(d2 < 1e-4, "n=2 discrepancy {d2}");
    }

    #[test]
    fn expansion_identity_constant_trivially_zero() {
        let c = SmoothScalarField::constant(1, 0.5);
        // both sides vanish; the discrepancy is 0 by the guard scale
        let d = string_expansion_numeric_check(&[c], &[0], 0.0, 1.0, 0.0).unwrap();
        assert!(d < 1e-4, "d = {d}");
    }

    #[test]
    fn estimates_stay_under_gamma_bound() {
        let catalog = [
            SmoothScalarField::sin_1d(),
            SmoothScalarField::gaussian_bump_1d(0.7),
            SmoothScalarField::constant(1, 1.0),
        ];
        for t in [0.125, 0.5, 1.0] {
            for a in &catalog {
                for b in &catalog {
                    let est = iterated_integral(
                        &[a.clone(), b.clone()],
                        &[0, 0],
                        0.0,
                        t,
                        &[0.0],
                        IntegrationMethod::Quadrature,
                        0,
                        0,
                    )
                    .unwrap();
                    assert!(
                        est.value.abs() <= est.bound,
                        "{}x{} at t={t}: {} > {}",
                        a.name,
                        b.name,
                        est.value,
                        est.bound
                    );
                }
            }
        }
    }

    #[test]
    fn rate_fit_recovers_bound_exponent() {
        // fitting the bound curve itself reproduces its own 1/2 exponent
        let ts: Vec<f64> = (0..8).map(|k| 0.001 * 3f64.powi(k)).collect();
        let vals: Vec<f64> = ts.iter().map(|t| 2.0 * t.sqrt()).collect();
        let fit = gamma_rate_fit(&ts, &vals, 0.0, 0.0).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-10);
    }

    #[test]
    fn rate_fit_sin_n1_slope_near_one() {
        let bs = vec![SmoothScalarField::sin_1d()];
        let ts: Vec<f64> = (0..6).map(|k| 2e-4 * 3.2f64.powf(k as f64)).collect();
        let vals: Vec<f64> = ts
            .iter()
            .map(|t| {
                iterated_integral(
                    &bs,
                    &[0],
                    0.0,
                    *t,
                    &[0.0],
                    IntegrationMethod::Quadrature,
                    0,
                    0,
                )
                .unwrap()
                .value
            })
            .collect();
        let fit = gamma_rate_fit(&ts, &vals, 0.0, 1e-12).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.05, "slope = {}", fit.slope);
        assert!(fit.slope >= 0.5 - 0.1);
    }

    #[test]
    fn rate_fit_rejects_degenerate_input() {
        let ts = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let vals = vec![0.0; 5];
        assert!(matches!(
            gamma_rate_fit(&ts, &vals, 0.0, 1e-12),
            Err(KernelError::DegenerateFit)
        ));
    }

    #[test]
    fn record_has_reporting_fields() {
        let est = IteratedEstimate {
            value: 0.5,
            std_error: 0.01,
            bound: 31.0,
            c_used: 10.0,
        };
        let rec = estimate_record(2, &[0, 0], 0.0, 1.0, &est);
        for key in ["n", "alpha", "t0", "t", "estimate", "se", "bound", "C_used"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
    }
}
