//! Drift fields: the catalog of bounded measurable drifts, smooth
//! mollifications of them, and the one-dimensional reduction of
//! multiplicative noise to additive noise.

use crate::numerics::{adaptive_simpson, euclid_norm, gauss_legendre};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("unknown catalog key `{0}`")]
    UnknownKey(String),
    #[error("bad parameters for `{key}`: {reason}")]
    BadParams { key: String, reason: String },
    #[error("field has no jacobian (smooth flag is false)")]
    NotSmooth,
    #[error("mollification quadrature order {0} is below the minimum of 8")]
    QuadratureOrderTooLow(usize),
    #[error("sigma must stay above {min} on the domain, found {found} at y = {at}")]
    SigmaTooSmall { min: f64, found: f64, at: f64 },
    #[error("transform domain is invalid or not invertible: {0}")]
    BadDomain(String),
}

type EvalFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
type JacFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Per-component one-sided bound: `b_i >= m` everywhere when `positive`,
/// `b_i <= -m` everywhere otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneSidedBound {
    pub m: f64,
    pub positive: bool,
}

/// An evaluable drift b(t, x) with its declared structure.
#[derive(Clone)]
pub struct DriftField {
    eval_fn: EvalFn,
    jac_fn: Option<JacFn>,
    pub dim: usize,
    pub sup_bound: f64,
    pub autonomous: bool,
    pub monotone_decreasing: bool,
    pub one_sided: Option<Vec<OneSidedBound>>,
    pub smooth: bool,
    /// Declared discontinuity locations (metadata; 1-d per-axis thresholds).
    pub discontinuities: Vec<f64>,
    pub name: String,
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("sup_bound", &self.sup_bound)
            .field("autonomous", &self.autonomous)
            .field("monotone_decreasing", &self.monotone_decreasing)
            .field("smooth", &self.smooth)
            .finish()
    }
}

impl DriftField {
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.eval_fn)(t, x, out);
    }

    /// Scalar convenience for 1-d fields.
    pub fn eval1(&self, t: f64, x: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let mut out = [0.0];
        (self.eval_fn)(t, &[x], &mut out);
        out[0]
    }

    /// Spatial jacobian, row-major d*d with entry (i, j) = d b_i / d x_j.
    pub fn eval_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let jac = self.jac_fn.as_ref().ok_or(FieldError::NotSmooth)?;
        jac(t, x, out);
        Ok(())
    }

    pub fn eval_jacobian1(&self, t: f64, x: f64) -> Result<f64, FieldError> {
        let mut out = [0.0];
        self.eval_jacobian(t, &[x], &mut out)?;
        Ok(out[0])
    }

    pub fn from_parts(
        name: &str,
        dim: usize,
        sup_bound: f64,
        eval_fn: EvalFn,
        jac_fn: Option<JacFn>,
    ) -> Self {
        let smooth = jac_fn.is_some();
        DriftField {
            eval_fn,
            jac_fn,
            dim,
            sup_bound,
            autonomous: true,
            monotone_decreasing: false,
            one_sided: None,
            smooth,
            discontinuities: Vec::new(),
            name: name.to_string(),
        }
    }
}

/// Catalog keys accepted by [`make_standard_field`], with parameter layouts.
pub const CATALOG: &[(&str, &str)] = &[
    ("zero", "params: [d]"),
    ("constant", "params: [c_1, ..., c_d]"),
    ("linear_ou", "params: [rate, clip]; b(y) = -rate*clamp(y, -clip, clip)"),
    ("sign", "params: [a]; b(y) = a for y < 0, -a for y >= 0"),
    (
        "step_monotone",
        "params: [left, right, threshold] with left > right; b(y) = left for y < threshold else right",
    ),
    (
        "componentwise_step",
        "params: [left_1, right_1, thr_1, ..., left_d, right_d, thr_d]; b_i depends on x_i only",
    ),
];

fn step_one_sided(left: f64, right: f64) -> Option<OneSidedBound> {
    if left > 0.0 && right > 0.0 {
        Some(OneSidedBound {
            m: left.min(right),
            positive: true,
        })
    } else if left < 0.0 && right < 0.0 {
        Some(OneSidedBound {
            m: left.abs().min(right.abs()),
            positive: false,
        })
    } else {
        None
    }
}

/// Build a drift from the catalog. `sup_bound` is the analytic sup of the
/// field, the structural flags are set from the construction.
pub fn make_standard_field(key: &str, params: &[f64]) -> Result<DriftField, FieldError> {
    let bad = |reason: &str| FieldError::BadParams {
        key: key.to_string(),
        reason: reason.to_string(),
    };
    match key {
        "zero" => {
            if params.len() != 1 || params[0] < 1.0 || params[0].fract() != 0.0 {
                return Err(bad("expected [d] with d a positive integer"));
            }
            let d = params[0] as usize;
            let mut f = DriftField::from_parts(
                "zero",
                d,
                0.0,
                Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0)),
                Some(Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0))),
            );
            f.monotone_decreasing = d == 1;
            Ok(f)
        }
        "constant" => {
            if params.is_empty() {
                return Err(bad("expected [c_1, ..., c_d]"));
            }
            let c: Vec<f64> = params.to_vec();
            let d = c.len();
            let sup = euclid_norm(&c);
            let cc = c.clone();
            let mut f = DriftField::from_parts(
                "constant",
                d,
                sup,
                Arc::new(move |_t, _x, out: &mut [f64]| out.copy_from_slice(&cc)),
                Some(Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0))),
            );
            f.monotone_decreasing = d == 1;
            f.one_sided = Some(
                c.iter()
                    .map(|ci| {
                        step_one_sided(*ci, *ci).unwrap_or(OneSidedBound {
                            m: 0.0,
                            positive: true,
                        })
                    })
                    .collect(),
            );
            if c.contains(&0.0) {
                f.one_sided = None;
            }
            Ok(f)
        }
        "linear_ou" => {
            if params.len() != 2 {
                return Err(bad("expected [rate, clip]"));
            }
            let (rate, clip) = (params[0], params[1]);
            if rate <= 0.0 || clip <= 0.0 {
                return Err(bad("rate and clip must be positive"));
            }
            let mut f = DriftField::from_parts(
                "linear_ou",
                1,
                rate * clip,
                Arc::new(move |_t, x, out: &mut [f64]| {
                    out[0] = -rate * x[0].clamp(-clip, clip);
                }),
                Some(Arc::new(move |_t, x, out: &mut [f64]| {
                    out[0] = if x[0].abs() <= clip { -rate } else { 0.0 };
                })),
            );
            f.monotone_decreasing = true;
            Ok(f)
        }
        "sign" => {
            if params.len() != 1 || params[0] <= 0.0 {
                return Err(bad("expected [a] with a > 0"));
            }
            let a = params[0];
            let mut f = DriftField::from_parts(
                "sign",
                1,
                a,
                Arc::new(move |_t, x, out: &mut [f64]| {
                    out[0] = if x[0] < 0.0 { a } else { -a };
                }),
                None,
            );
            f.monotone_decreasing = true;
            f.discontinuities = vec![0.0];
            Ok(f)
        }
        "step_monotone" => {
            if params.len() != 3 {
                return Err(bad("expected [left, right, threshold]"));
            }
            let (left, right, thr) = (params[0], params[1], params[2]);
            if left <= right {
                return Err(bad("levels must decrease: left > right"));
            }
            let mut f = DriftField::from_parts(
                "step_monotone",
                1,
                left.abs().max(right.abs()),
                Arc::new(move |_t, x, out: &mut [f64]| {
                    out[0] = if x[0] < thr { left } else { right };
                }),
                None,
            );
            f.monotone_decreasing = true;
            f.one_sided = step_one_sided(left, right).map(|b| vec![b]);
            f.discontinuities = vec![thr];
            Ok(f)
        }
        "componentwise_step" => {
            if params.is_empty() || !params.len().is_multiple_of(3) {
                return Err(bad("expected triples [left_i, right_i, thr_i]"));
            }
            let d = params.len() / 3;
            let mut lefts = Vec::new();
            let mut rights = Vec::new();
            let mut thrs = Vec::new();
            let mut bounds = Vec::new();
            for i in 0..d {
                let (l, r, thr) = (params[3 * i], params[3 * i + 1], params[3 * i + 2]);
                if l <= r {
                    return Err(bad(&format!("component {i}: levels must decrease")));
                }
                let b = step_one_sided(l, r)
                    .ok_or_else(|| bad(&format!("component {i}: levels must share a sign")))?;
                lefts.push(l);
                rights.push(r);
                thrs.push(thr);
                bounds.push(b);
            }
            let sup = euclid_norm(
                &lefts
                    .iter()
                    .zip(&rights)
                    .map(|(l, r)| l.abs().max(r.abs()))
                    .collect::<Vec<_>>(),
            );
            let thrs2 = thrs.clone();
            let mut f = DriftField::from_parts(
                "componentwise_step",
                d,
                sup,
                Arc::new(move |_t, x, out: &mut [f64]| {
                    for i in 0..x.len() {
                        out[i] = if x[i] < thrs2[i] { lefts[i] } else { rights[i] };
                    }
                }),
                None,
            );
            f.one_sided = Some(bounds);
            f.discontinuities = thrs;
            Ok(f)
        }
        other => Err(FieldError::UnknownKey(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Mollification
// ---------------------------------------------------------------------------

/// The standard bump exp(-1/(1-|u|^2)) on |u| < 1, unnormalised.
fn bump(u2: f64) -> f64 {
    if u2 < 1.0 {
        (-1.0 / (1.0 - u2)).exp()
    } else {
        0.0
    }
}

/// d bump / d u_j at u, unnormalised.
fn bump_grad(u: &[f64], j: usize) -> f64 {
    let u2: f64 = u.iter().map(|v| v * v).sum();
    if u2 < 1.0 {
        let g = 1.0 - u2;
        bump(u2) * (-2.0 * u[j] / (g * g))
    } else {
        0.0
    }
}

/// Tensor quadrature nodes over [-1,1]^d with weights.
fn tensor_nodes(d: usize, order: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (x, w) = gauss_legendre(order);
    let mut nodes = vec![Vec::new()];
    let mut weights = vec![1.0];
    for _ in 0..d {
        let mut nn = Vec::with_capacity(nodes.len() * order);
        let mut ww = Vec::with_capacity(nodes.len() * order);
        for (node, wt) in nodes.iter().zip(&weights) {
            for (xi, wi) in x.iter().zip(&w) {
                let mut n2 = node.clone();
                n2.push(*xi);
                nn.push(n2);
                ww.push(wt * wi);
            }
        }
        nodes = nn;
        weights = ww;
    }
    (nodes, weights)
}

pub const DEFAULT_MOLLIFY_ORDER: usize = 64;
const MIN_MOLLIFY_ORDER: usize = 8;

/// Smooth approximation of `base` by convolution with a compactly supported
/// bump of width 1/n, evaluated by fixed-order Gauss-Legendre quadrature.
/// The jacobian comes from convolution with the bump's gradient.
pub fn mollify(base: &DriftField, n: u32) -> DriftField {
    mollify_with_order(base, n, DEFAULT_MOLLIFY_ORDER).expect("default order is valid")
}

pub fn mollify_with_order(
    base: &DriftField,
    n: u32,
    order: usize,
) -> Result<DriftField, FieldError> {
    assert!(n >= 1, "mollification level must be at least 1");
    if order < MIN_MOLLIFY_ORDER {
        return Err(FieldError::QuadratureOrderTooLow(order));
    }
    if base.dim == 1 && !base.discontinuities.is_empty() {
        return Ok(mollify_split_1d(base, n, order));
    }
    let d = base.dim;
    let (nodes, weights) = tensor_nodes(d, if d == 1 { order } else { order.min(32) });
    let z: f64 = nodes
        .iter()
        .zip(&weights)
        .map(|(u, w)| w * bump(u.iter().map(|v| v * v).sum()))
        .sum();
    let inv_n = 1.0 / n as f64;
    let nf = n as f64;
    // precompute per-node offsets and coefficients once; eval is then a
    // weighted sum of base evaluations
    struct Node {
        offset: Vec<f64>,
        coeff: f64,
        grad_coeff: Vec<f64>,
    }
    let prepared: Vec<Node> = nodes
        .iter()
        .zip(&weights)
        .filter_map(|(u, w)| {
            let u2: f64 = u.iter().map(|v| v * v).sum();
            let b = bump(u2);
            if b == 0.0 {
                return None;
            }
            Some(Node {
                offset: u.iter().map(|v| v * inv_n).collect(),
                coeff: w * b / z,
                grad_coeff: (0..d).map(|j| w * nf * bump_grad(u, j) / z).collect(),
            })
        })
        .collect();
    let prepared = Arc::new(prepared);
    let base_eval = base.clone();
    let prepared_eval = prepared.clone();
    let eval_fn: EvalFn = Arc::new(move |t, x, out: &mut [f64]| {
        let d = x.len();
        let mut shifted = vec![0.0; d];
        let mut val = vec![0.0; d];
        out.fill(0.0);
        for node in prepared_eval.iter() {
            for k in 0..d {
                shifted[k] = x[k] - node.offset[k];
            }
            base_eval.eval(t, &shifted, &mut val);
            for k in 0..d {
                out[k] += node.coeff * val[k];
            }
        }
    });
    let base_jac = base.clone();
    let jac_fn: JacFn = Arc::new(move |t, x, out: &mut [f64]| {
        let d = x.len();
        let mut shifted = vec![0.0; d];
        let mut val = vec![0.0; d];
        out.fill(0.0);
        for node in prepared.iter() {
            for k in 0..d {
                shifted[k] = x[k] - node.offset[k];
            }
            base_jac.eval(t, &shifted, &mut val);
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] += node.grad_coeff[j] * val[i];
                }
            }
        }
    });
    let mut f = DriftField::from_parts(
        &format!("{}~mollified(n={n})", base.name),
        d,
        base.sup_bound,
        eval_fn,
        Some(jac_fn),
    );
    f.autonomous = base.autonomous;
    f.monotone_decreasing = base.monotone_decreasing;
    f.one_sided = base.one_sided.clone();
    Ok(f)
}

/// Mollification of a 1-d base with declared jump points. The quadrature
/// panels are split at the (x-dependent) images of the jumps, so the
/// convolution is evaluated as a genuinely smooth function of x whose
/// derivative agrees with the bump-gradient convolution. Fixed nodes would
/// turn the eval into a staircase near the jumps.
fn mollify_split_1d(base: &DriftField, n: u32, order: usize) -> DriftField {
    let per_panel = (order / 4).clamp(8, 32);
    let (gl_x, gl_w) = gauss_legendre(per_panel);
    let gl: Vec<(f64, f64)> = gl_x.into_iter().zip(gl_w).collect();
    let base_panels = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let discs = base.discontinuities.clone();
    let nf = n as f64;
    let inv_n = 1.0 / nf;
    let panels_for = move |x: f64, discs: &[f64]| -> Vec<f64> {
        let mut cuts: Vec<f64> = base_panels.to_vec();
        for tau in discs {
            let u = nf * (x - tau);
            if u > -1.0 && u < 1.0 {
                cuts.push(u);
            }
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        cuts
    };
    let base_eval = base.clone();
    let discs_eval = discs.clone();
    let gl_eval = gl.clone();
    // self-normalising weighted average: the same rule integrates the bump
    // mass, so the eval never leaves the convex hull of the base values
    let eval_fn: EvalFn = Arc::new(move |t, x, out: &mut [f64]| {
        let cuts = panels_for(x[0], &discs_eval);
        let mut acc = 0.0;
        let mut mass = 0.0;
        let mut val = [0.0];
        for w in cuts.windows(2) {
            let half = 0.5 * (w[1] - w[0]);
            let mid = 0.5 * (w[0] + w[1]);
            for (xi, wi) in &gl_eval {
                let u = mid + half * xi;
                let coeff = wi * half * bump(u * u);
                base_eval.eval(t, &[x[0] - u * inv_n], &mut val);
                acc += coeff * val[0];
                mass += coeff;
            }
        }
        out[0] = acc / mass;
    });
    let base_jac = base.clone();
    let gl_jac = gl.clone();
    let jac_fn: JacFn = Arc::new(move |t, x, out: &mut [f64]| {
        let cuts = panels_for(x[0], &discs);
        let mut acc = 0.0;
        let mut mass = 0.0;
        let mut val = [0.0];
        for w in cuts.windows(2) {
            let half = 0.5 * (w[1] - w[0]);
            let mid = 0.5 * (w[0] + w[1]);
            for (xi, wi) in &gl_jac {
                let u = mid + half * xi;
                base_jac.eval(t, &[x[0] - u * inv_n], &mut val);
                acc += wi * half * nf * bump_grad(&[u], 0) * val[0];
                mass += wi * half * bump(u * u);
            }
        }
        out[0] = acc / mass;
    });
    let mut f = DriftField::from_parts(
        &format!("{}~mollified(n={n})", base.name),
        1,
        base.sup_bound,
        eval_fn,
        Some(jac_fn),
    );
    f.autonomous = base.autonomous;
    f.monotone_decreasing = base.monotone_decreasing;
    f.one_sided = base.one_sided.clone();
    f
}

// ---------------------------------------------------------------------------
// Lamperti reduction of multiplicative noise (1-d)
// ---------------------------------------------------------------------------

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar function with its derivative, used for diffusion coefficients.
#[derive(Clone)]
pub struct Scalar1d {
    f: ScalarFn,
    df: ScalarFn,
}

impl Scalar1d {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Scalar1d {
            f: Arc::new(f),
            df: Arc::new(df),
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        (self.f)(y)
    }

    pub fn deriv(&self, y: f64) -> f64 {
        (self.df)(y)
    }
}

/// The space transform z = Lambda(x) = int_0^x dy / sigma(y) together with
/// its inverse by bisection.
#[derive(Clone)]
pub struct LampertiMap {
    sigma: Scalar1d,
    pub domain: (f64, f64),
    z_lo: f64,
    z_hi: f64,
}

const LAMBDA_QUAD_TOL: f64 = 1e-13;
const INVERSE_TOL: f64 = 1e-12;

impl LampertiMap {
    pub fn forward(&self, x: f64) -> f64 {
        let f = |y: f64| 1.0 / self.sigma.value(y);
        if x >= 0.0 {
            adaptive_simpson(&f, 0.0, x, LAMBDA_QUAD_TOL)
        } else {
            -adaptive_simpson(&f, x, 0.0, LAMBDA_QUAD_TOL)
        }
    }

    /// Inverse by bisection; Lambda is strictly increasing since sigma > 0.
    pub fn inverse(&self, zv: f64) -> f64 {
        let (mut lo, mut hi) = self.domain;
        let mut flo = self.forward(lo) - zv;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let fm = self.forward(mid) - zv;
            if fm == 0.0 || hi - lo < INVERSE_TOL {
                return mid;
            }
            if (fm > 0.0) == (flo > 0.0) {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.z_lo, self.z_hi)
    }
}

pub struct LampertiTransform {
    pub drift: DriftField,
    pub map: LampertiMap,
}

/// Reduce dX = b(X) dt + sigma(X) dB on a bounded 1-d domain to additive
/// noise: the transformed drift is b(L^-1 z)/sigma(L^-1 z) - sigma'(L^-1 z)/2.
pub fn lamperti_transform(
    b: &DriftField,
    sigma: &Scalar1d,
    domain: (f64, f64),
    sigma_min: f64,
) -> Result<LampertiTransform, FieldError> {
    if b.dim != 1 {
        return Err(FieldError::BadDomain("transform is one-dimensional".into()));
    }
    if !(domain.0 < domain.1) {
        return Err(FieldError::BadDomain(format!(
            "empty domain [{}, {}]",
            domain.0, domain.1
        )));
    }
    if sigma_min <= 0.0 {
        return Err(FieldError::BadDomain("sigma_min must be positive".into()));
    }
    // dense sampling guard: sigma must stay above sigma_min, which also
    // guarantees a strictly increasing Lambda
    let samples = 4096;
    let mut sig_sup_deriv: f64 = 0.0;
    for i in 0..=samples {
        let y = domain.0 + (domain.1 - domain.0) * i as f64 / samples as f64;
        let s = sigma.value(y);
        if !(s >= sigma_min) {
            return Err(FieldError::SigmaTooSmall {
                min: sigma_min,
                found: s,
                at: y,
            });
        }
        sig_sup_deriv = sig_sup_deriv.max(sigma.deriv(y).abs());
    }
    let mut map = LampertiMap {
        sigma: sigma.clone(),
        domain,
        z_lo: 0.0,
        z_hi: 0.0,
    };
    map.z_lo = map.forward(domain.0);
    map.z_hi = map.forward(domain.1);
    if !(map.z_lo < map.z_hi) {
        return Err(FieldError::BadDomain(
            "Lambda is not increasing on the domain".into(),
        ));
    }
    let sup = b.sup_bound / sigma_min + sig_sup_deriv / 2.0;
    let map_for_eval = map.clone();
    let b_inner = b.clone();
    let sigma_inner = sigma.clone();
    let eval_fn: EvalFn = Arc::new(move |t, zx, out: &mut [f64]| {
        let y = map_for_eval.inverse(zx[0]);
        let by = b_inner.eval1(t, y);
        out[0] = by / sigma_inner.value(y) - sigma_inner.deriv(y) / 2.0;
    });
    let mut drift = DriftField::from_parts(&format!("lamperti({})", b.name), 1, sup, eval_fn, None);
    drift.autonomous = b.autonomous;
    Ok(LampertiTransform { drift, map })
}
