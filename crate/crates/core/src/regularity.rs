//! Weighted Sobolev norms of flow maps, Muckenhoupt A_p diagnostics for power
//! weights, and the variational / finite-difference jacobian pipelines with
//! the uniform-in-mollification derivative-moment study.

use crate::fields::DriftField;
use crate::flow::{euler_states, Direction, FlowError, FlowField};
use crate::lattice::Lattice;
use crate::numerics::mean_se;
use crate::paths::{steps_for, BrownianPath};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegularityError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("drift has no jacobian; mollify it first")]
    DriftNotSmooth,
    #[error("finite differences need at least two points per axis")]
    DegenerateLattice,
    #[error("weight is nonpositive at a quadrature node ({0})")]
    NonpositiveWeight(f64),
    #[error("power weight |x|^g with g <= -d is not locally integrable")]
    NotLocallyIntegrable,
    #[error("ball radii must span at least 3 decades with at least 3 balls")]
    BadBallFamily,
    #[error("ensemble too small: {0}")]
    EnsembleTooSmall(usize),
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum WeightFamily {
    Constant {
        c: f64,
    },
    /// |x|^gamma
    Power {
        gamma: f64,
    },
    /// exp(-|x|^2 / (2 sigma^2)); satisfies the p-moment condition
    Gaussian {
        sigma: f64,
    },
}

#[derive(Debug, Clone)]
pub struct WeightFunction {
    pub family: WeightFamily,
    pub p: f64,
    pub d: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MomentCertificate {
    /// int_{[-R,R]^d} (1 + |x|^p) w(x) dx
    pub truncated: f64,
    /// estimated mass outside the truncation cube; None when the tail is not
    /// integrable (constant and power families)
    pub tail: Option<f64>,
}

impl WeightFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match self.family {
            WeightFamily::Constant { c } => c,
            WeightFamily::Power { gamma } => r2.sqrt().powf(gamma),
            WeightFamily::Gaussian { sigma } => (-r2 / (2.0 * sigma * sigma)).exp(),
        }
    }

    /// Certificate for the weight-moment integral over [-R, R]^d by midpoint
    /// quadrature, with the Gaussian tail estimated on an enlarged cube.
    pub fn moment_certificate(&self, r_trunc: f64) -> MomentCertificate {
        let integrand = |x: &[f64]| {
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            (1.0 + norm.powf(self.p)) * self.eval(x)
        };
        let truncated = cube_midpoint(self.d, r_trunc, 400, &integrand);
        let tail = match self.family {
            WeightFamily::Gaussian { sigma } => {
                let r_big = r_trunc + 12.0 * sigma;
                let big = cube_midpoint(self.d, r_big, 600, &integrand);
                Some((big - truncated).max(0.0))
            }
            _ => None,
        };
        MomentCertificate { truncated, tail }
    }
}

fn cube_midpoint(d: usize, r: f64, n_per_axis: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let h = 2.0 * r / n_per_axis as f64;
    let mut x = vec![0.0; d];
    let mut idx = vec![0usize; d];
    let total = n_per_axis.pow(d as u32);
    let mut acc = 0.0;
    for flat in 0..total {
        let mut rem = flat;
        for k in (0..d).rev() {
            idx[k] = rem % n_per_axis;
            rem /= n_per_axis;
        }
        for k in 0..d {
            x[k] = -r + (idx[k] as f64 + 0.5) * h;
        }
        acc += f(&x);
    }
    acc * h.powi(d as i32)
}

// ---------------------------------------------------------------------------
// Jacobian fields
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMethod {
    Variational,
    FiniteDifference,
}

/// Spatial jacobians of a flow, indexed like the flow field.
#[derive(Debug, Clone)]
pub struct JacobianField {
    pub times: Vec<f64>,
    pub lattice: Lattice,
    pub d: usize,
    pub method: JacobianMethod,
    mats: Vec<f64>, // [time][point][d*d]
}

impl JacobianField {
    pub fn mat(&self, k: usize, i: usize) -> &[f64] {
        let dd = self.d * self.d;
        let off = (k * self.lattice.len() + i) * dd;
        &self.mats[off..off + dd]
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// CSV export with the method tag carried on every row.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let tag = match self.method {
            JacobianMethod::Variational => "variational",
            JacobianMethod::FiniteDifference => "finite_difference",
        };
        write!(w, "time,x_index,method")?;
        for i in 0..self.d {
            for j in 0..self.d {
                write!(w, ",j_{i}{j}")?;
            }
        }
        writeln!(w)?;
        for (k, t) in self.times.iter().enumerate() {
            for i in 0..self.lattice.len() {
                write!(w, "{t},{i},{tag}")?;
                for v in self.mat(k, i) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Forward Euler on the linearized matrix equation dJ = b'(t, X_t) J dt,
/// J(s) = I, along each trajectory of the flow.
pub fn variational_jacobian(
    drift: &DriftField,
    ff: &FlowField,
) -> Result<JacobianField, RegularityError> {
    if !drift.smooth {
        return Err(RegularityError::DriftNotSmooth);
    }
    let d = ff.dim();
    let dd = d * d;
    let n_pts = ff.n_points();
    let n_times = ff.n_times();
    let mut mats = vec![0.0; n_times * n_pts * dd];
    let signed_dt = match ff.direction {
        Direction::Forward => ff.dt,
        Direction::Backward => -ff.dt,
    };
    let cols: Vec<Vec<f64>> = (0..n_pts)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![0.0; n_times * dd];
            let mut jac = vec![0.0; dd];
            let mut bprime = vec![0.0; dd];
            for a in 0..d {
                jac[a * d + a] = 1.0;
            }
            col[..dd].copy_from_slice(&jac);
            for k in 0..n_times - 1 {
                let x = ff.state(k, i);
                drift
                    .eval_jacobian(ff.times[k], x, &mut bprime)
                    .expect("smooth checked above");
                let mut next = vec![0.0; dd];
                for a in 0..d {
                    for b in 0..d {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += bprime[a * d + c] * jac[c * d + b];
                        }
                        next[a * d + b] = jac[a * d + b] + acc * signed_dt;
                    }
                }
                jac = next;
                col[(k + 1) * dd..(k + 2) * dd].copy_from_slice(&jac);
            }
            col
        })
        .collect();
    for (i, col) in cols.iter().enumerate() {
        for k in 0..n_times {
            let off = (k * n_pts + i) * dd;
            mats[off..off + dd].copy_from_slice(&col[k * dd..(k + 1) * dd]);
        }
    }
    Ok(JacobianField {
        times: ff.times.clone(),
        lattice: ff.lattice.clone(),
        d,
        method: JacobianMethod::Variational,
        mats,
    })
}

/// Lattice finite differences of the flow map: central in the interior,
/// one-sided on the boundary.
pub fn fd_jacobian(ff: &FlowField) -> Result<JacobianField, RegularityError> {
    let d = ff.dim();
    if ff.lattice.axes.iter().any(|a| a.n < 2) {
        return Err(RegularityError::DegenerateLattice);
    }
    let dd = d * d;
    let n_pts = ff.n_points();
    let n_times = ff.n_times();
    let mut mats = vec![0.0; n_times * n_pts * dd];
    for k in 0..n_times {
        for flat in 0..n_pts {
            let idx = ff.lattice.multi_index(flat);
            for j in 0..d {
                let axis = &ff.lattice.axes[j];
                let h = axis.spacing();
                let (lo, hi, denom) = if idx[j] == 0 {
                    (flat, neighbor(&ff.lattice, &idx, j, 1), h)
                } else if idx[j] == axis.n - 1 {
                    (neighbor(&ff.lattice, &idx, j, -1), flat, h)
                } else {
                    (
                        neighbor(&ff.lattice, &idx, j, -1),
                        neighbor(&ff.lattice, &idx, j, 1),
                        2.0 * h,
                    )
                };
                let s_hi = ff.state(k, hi);
                let s_lo = ff.state(k, lo);
                for i in 0..d {
                    mats[(k * n_pts + flat) * dd + i * d + j] = (s_hi[i] - s_lo[i]) / denom;
                }
            }
        }
    }
    Ok(JacobianField {
        times: ff.times.clone(),
        lattice: ff.lattice.clone(),
        d,
        method: JacobianMethod::FiniteDifference,
        mats,
    })
}

fn neighbor(lat: &Lattice, idx: &[usize], axis: usize, step: isize) -> usize {
    let mut idx2 = idx.to_vec();
    idx2[axis] = (idx2[axis] as isize + step) as usize;
    lat.flat_index(&idx2)
}

// ---------------------------------------------------------------------------
// Derivative moments (uniformity across mollification levels)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LevelMoment {
    pub level: u32,
    /// sup over probes of E |dX_t^x/dx|^p
    pub sup_moment: f64,
    pub se_at_sup: f64,
    pub per_probe: Vec<(f64, f64)>,
    /// sampled sup of |b_n'|, to document that it grows with the level
    pub grad_sup: f64,
}

/// Monte-Carlo estimates of sup_x E |dX_t^x/dx|^p for each smooth field in
/// the family, sharing Brownian streams across levels.
pub fn derivative_moment(
    family: &[(u32, DriftField)],
    p: f64,
    t: f64,
    probes: &[Vec<f64>],
    ensemble: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<LevelMoment>, RegularityError> {
    if ensemble < 100 {
        return Err(RegularityError::EnsembleTooSmall(ensemble));
    }
    let n_steps = steps_for(t, dt).map_err(FlowError::from)?;
    let mut out = Vec::new();
    for (level, drift) in family {
        if !drift.smooth {
            return Err(RegularityError::DriftNotSmooth);
        }
        let d = drift.dim;
        let dd = d * d;
        let init: Vec<f64> = probes.iter().flat_map(|x| x.iter().copied()).collect();
        let per_path: Vec<Vec<f64>> = (0..ensemble)
            .into_par_iter()
            .map(|m| {
                let path = BrownianPath::sample(seed, m as u64, d, t, dt).expect("grid checked");
                let states =
                    euler_states(drift, &path, 0.0, n_steps, Direction::Forward, 1.0, &init)
                        .expect("grid checked");
                let width = probes.len() * d;
                let mut vals = Vec::with_capacity(probes.len());
                let mut jac = vec![0.0; dd];
                let mut bprime = vec![0.0; dd];
                for (pi, _) in probes.iter().enumerate() {
                    jac.fill(0.0);
                    for a in 0..d {
                        jac[a * d + a] = 1.0;
                    }
                    for k in 0..n_steps {
                        let x = &states[k * width + pi * d..k * width + (pi + 1) * d];
                        drift
                            .eval_jacobian(k as f64 * dt, x, &mut bprime)
                            .expect("smooth");
                        let mut next = vec![0.0; dd];
                        for a in 0..d {
                            for b in 0..d {
                                let mut acc = 0.0;
                                for c in 0..d {
                                    acc += bprime[a * d + c] * jac[c * d + b];
                                }
                                next[a * d + b] = jac[a * d + b] + acc * dt;
                            }
                        }
                        jac = next;
                    }
                    let sumsq: f64 = jac.iter().map(|v| v * v).sum();
                    // p = 2 stays exact: no sqrt/square round trip
                    vals.push(if p == 2.0 { sumsq } else { sumsq.powf(p / 2.0) });
                }
                vals
            })
            .collect();
        let mut sup = f64::MIN;
        let mut se_at_sup = 0.0;
        let mut per_probe = Vec::new();
        for pi in 0..probes.len() {
            let col: Vec<f64> = per_path.iter().map(|v| v[pi]).collect();
            let (mean, se) = mean_se(&col);
            per_probe.push((mean, se));
            if mean > sup {
                sup = mean;
                se_at_sup = se;
            }
        }
        // dense 1-d sample of |b'| around the probes for the growth record
        let mut grad_sup: f64 = 0.0;
        if d == 1 {
            let mut g = [0.0];
            for i in 0..=800 {
                let x = -2.0 + 4.0 * i as f64 / 800.0;
                drift.eval_jacobian(0.0, &[x], &mut g).expect("smooth");
                grad_sup = grad_sup.max(g[0].abs());
            }
        }
        out.push(LevelMoment {
            level: *level,
            sup_moment: sup,
            se_at_sup,
            per_probe,
            grad_sup,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Weighted Sobolev norm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SobolevNorm {
    pub total: f64,
    pub lp_term: f64,
    /// sum over (i, j) of ||D_j u_i||_{L^p(w)}
    pub deriv_term: f64,
    pub tail_bound: Option<f64>,
}

/// ||u||_{L^p(w)} + sum_{i,j} ||D_j u_i||_{L^p(w)} by midpoint quadrature on
/// the lattice, `values` flat n*d and `jacobians` flat n*d*d.
pub fn weighted_sobolev_norm(
    lattice: &Lattice,
    values: &[f64],
    jacobians: &[f64],
    w: &WeightFunction,
) -> Result<SobolevNorm, RegularityError> {
    let d = lattice.dim();
    let n = lattice.len();
    assert_eq!(values.len(), n * d);
    assert_eq!(jacobians.len(), n * d * d);
    let vol: f64 = lattice
        .axes
        .iter()
        .map(|a| if a.n > 1 { a.spacing() } else { 1.0 })
        .product();
    let p = w.p;
    let mut point = vec![0.0; d];
    let mut lp_acc = 0.0;
    let mut deriv_acc = vec![0.0; d * d];
    for i in 0..n {
        lattice.point_into(i, &mut point);
        let wv = w.eval(&point);
        if !(wv > 0.0) {
            return Err(RegularityError::NonpositiveWeight(wv));
        }
        let u = &values[i * d..(i + 1) * d];
        lp_acc += crate::numerics::euclid_norm(u).powf(p) * wv * vol;
        let jac = &jacobians[i * d * d..(i + 1) * d * d];
        for (c, j) in jac.iter().enumerate() {
            deriv_acc[c] += j.abs().powf(p) * wv * vol;
        }
    }
    let lp_term = lp_acc.powf(1.0 / p);
    let deriv_term: f64 = deriv_acc.iter().map(|a| a.powf(1.0 / p)).sum();
    let r_trunc = lattice
        .axes
        .iter()
        .map(|a| a.min.abs().max(a.max.abs()))
        .fold(0.0, f64::max);
    let tail_bound = w.moment_certificate(r_trunc).tail;
    Ok(SobolevNorm {
        total: lp_term + deriv_term,
        lp_term,
        deriv_term,
        tail_bound,
    })
}

/// Norm of the flow map at one stored time.
pub fn sobolev_norm_of_flow(
    ff: &FlowField,
    jf: &JacobianField,
    t: f64,
    w: &WeightFunction,
) -> Result<SobolevNorm, RegularityError> {
    let k = ff.time_index(t)?;
    let n = ff.n_points();
    let d = ff.dim();
    let values = ff.level(k).to_vec();
    let mut jacobians = vec![0.0; n * d * d];
    for i in 0..n {
        jacobians[i * d * d..(i + 1) * d * d].copy_from_slice(jf.mat(k, i));
    }
    weighted_sobolev_norm(&ff.lattice, &values, &jacobians, w)
}

// ---------------------------------------------------------------------------
// Muckenhoupt A_p diagnostic for power weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ApVerdict {
    Finite { constant: f64 },
    Diverging,
}

#[derive(Debug, Clone)]
pub struct ApDiagnostic {
    pub radii: Vec<f64>,
    pub products: Vec<f64>,
    pub verdict: ApVerdict,
}

/// Per-ball A_p products of |x|^gamma on origin-centered balls, in closed
/// form. Exponents at or past the conjugate integrability boundary are
/// regularised by a small core cutoff, which turns the divergence into a
/// visible growth trend over the radius family.
pub fn ap_diagnostic(
    gamma: f64,
    p: f64,
    d: usize,
    radii: &[f64],
) -> Result<ApDiagnostic, RegularityError> {
    let df = d as f64;
    if gamma <= -df {
        return Err(RegularityError::NotLocallyIntegrable);
    }
    if radii.len() < 3 {
        return Err(RegularityError::BadBallFamily);
    }
    let r_max = radii.iter().cloned().fold(f64::MIN, f64::max);
    let r_min = radii.iter().cloned().fold(f64::MAX, f64::min);
    if r_max / r_min < 1e3 {
        return Err(RegularityError::BadBallFamily);
    }
    let gamma_c = gamma / (1.0 - p);
    let eps = r_min / 1e3;
    // (1/|B_r|) int_{B_r} |x|^a dx = d r^a / (a + d) for a > -d
    let avg_power = |a: f64, r: f64| -> f64 {
        if a + df > 1e-12 {
            df * r.powf(a) / (a + df)
        } else if (a + df).abs() <= 1e-12 {
            // boundary: int_eps^r rho^{-1} d rho = ln(r/eps)
            df * (r / eps).ln() / r.powf(df)
        } else {
            // past the boundary the core cutoff dominates
            df * (eps.powf(a + df) / (-(a + df))) / r.powf(df)
        }
    };
    let products: Vec<f64> = radii
        .iter()
        .map(|r| avg_power(gamma, *r) * avg_power(gamma_c, *r).powf(p - 1.0))
        .collect();
    let finite = products.iter().all(|v| v.is_finite());
    let grows = products.windows(2).all(|w| w[1] >= w[0])
        && products.last().unwrap() / products.first().unwrap() > 1.5;
    let verdict = if finite && !grows {
        let constant = products.iter().cloned().fold(f64::MIN, f64::max);
        ApVerdict::Finite { constant }
    } else {
        ApVerdict::Diverging
    };
    Ok(ApDiagnostic {
        radii: radii.to_vec(),
        products,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_standard_field, mollify};
    use crate::flow::simulate_flow;
    use crate::lattice::Axis;
    use crate::numerics::adaptive_simpson;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn path(seed: u64, t: f64, dt: f64, d: usize) -> Arc<BrownianPath> {
        Arc::new(BrownianPath::sample(seed, 0, d, t, dt).unwrap())
    }

    #[test]
    fn variational_identity_for_zero_drift() {
        let b = make_standard_field("zero", &[2.0]).unwrap();
        let p = path(1, 0.5, 0.015625, 2);
        let lat = Lattice::new(vec![
            Axis {
                min: -1.0,
                max: 1.0,
                n: 3,
            },
            Axis {
                min: -1.0,
                max: 1.0,
                n: 3,
            },
        ]);
        let ff = simulate_flow(&b, &p, 0.0, 0.5, Direction::Forward, &lat, p.dt).unwrap();
        let jf = variational_jacobian(&b, &ff).unwrap();
        for k in 0..jf.n_times() {
            for i in 0..lat.len() {
                assert_eq!(jf.mat(k, i), &[1.0, 0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn variational_ou_matches_product_formula() {
        let b = make_standard_field("linear_ou", &[1.0, 10.0]).unwrap();
        let dt = 1.0 / 512.0;
        let p = path(3, 1.0, dt, 1);
        let lat = Lattice::line(-1.0, 1.0, 3);
        let ff = simulate_flow(&b, &p, 0.0, 1.0, Direction::Forward, &lat, dt).unwrap();
        let jf = variational_jacobian(&b, &ff).unwrap();
        let k = jf.n_times() - 1;
        let expect = (1.0 - dt).powi(512);
        for i in 0..lat.len() {
            assert!((jf.mat(k, i)[0] - expect).abs() < 1e-12);
        }
        assert!((expect - (-1.0f64).exp()).abs() < 2.0 * dt);
    }

    #[test]
    fn variational_monotone_drift_stays_in_unit_interval() {
        let base = make_standard_field("step_monotone", &[2.0, 1.0, 0.0]).unwrap();
        let b = mollify(&base, 16);
        let dt = 1.0 / 512.0;
        let p = path(5, 1.0, dt, 1);
        let lat = Lattice::line(-0.5, 0.5, 9);
        let ff = simulate_flow(&b, &p, 0.0, 1.0, Direction::Forward, &lat, dt).unwrap();
        let jf = variational_jacobian(&b, &ff).unwrap();
        for k in 0..jf.n_times() {
            for i in 0..lat.len() {
                let j = jf.mat(k, i)[0];
                assert!(j > 0.0 && j <= 1.0 + 5.0 * dt, "j = {j} at k = {k}");
            }
        }
    }

    #[test]
    fn fd_identity_for_zero_and_constant() {
        let p = path(7, 0.5, 0.0625, 1);
        let lat = Lattice::line(-1.0, 1.0, 9);
        for params in [("zero", vec![1.0]), ("constant", vec![0.7])] {
            let b = make_standard_field(params.0, &params.1).unwrap();
            let ff = simulate_flow(&b, &p, 0.0, 0.5, Direction::Forward, &lat, p.dt).unwrap();
            let jf = fd_jacobian(&ff).unwrap();
            for k in 0..jf.n_times() {
                for i in 0..lat.len() {
                    assert!(
                        (jf.mat(k, i)[0] - 1.0).abs() < 1e-12,
                        "{} at k={k}",
                        jf.mat(k, i)[0]
                    );
                }
            }
        }
    }

    #[test]
    fn fd_zero_drift_identity_bitwise_on_dyadic_lattice() {
        let b = make_standard_field("zero", &[1.0]).unwrap();
        let p = path(19, 0.5, 0.0625, 1);
        let lat = Lattice::line(-2.0, 2.0, 17); // spacing 0.25, dyadic
        let ff = simulate_flow(&b, &p, 0.0, 0.5, Direction::Forward, &lat, p.dt).unwrap();
        let jf = fd_jacobian(&ff).unwrap();
        for k in 0..jf.n_times() {
            for i in 0..lat.len() {
                assert_eq!(jf.mat(k, i)[0], 1.0);
            }
        }
    }

    #[test]
    fn fd_rejects_single_point_axis() {
        let b = make_standard_field("zero", &[1.0]).unwrap();
        let p = path(7, 0.5, 0.25, 1);
        let lat = Lattice::line(0.0, 0.0, 1);
        let ff = simulate_flow(&b, &p, 0.0, 0.5, Direction::Forward, &lat, p.dt).unwrap();
        assert!(matches!(
            fd_jacobian(&ff),
            Err(RegularityError::DegenerateLattice)
        ));
    }

    #[test]
    fn fd_converges_to_variational_in_h() {
        let base = make_standard_field("step_monotone", &[1.0, -1.0, 0.0]).unwrap();
        let b = mollify(&base, 4);
        let dt = 1.0 / 256.0;
        let p = path(11, 0.5, dt, 1);
        let mut errs = Vec::new();
        for n in [65usize, 129] {
            let lat = Lattice::line(-0.8, 0.8, n);
            let ff = simulate_flow(&b, &p, 0.0, 0.5, Direction::Forward, &lat, dt).unwrap();
            let var = variational_jacobian(&b, &ff).unwrap();
            let fd = fd_jacobian(&ff).unwrap();
            let k = ff.n_times() - 1;
            let mut max_err: f64 = 0.0;
            for i in 1..lat.len() - 1 {
                max_err = max_err.max((var.mat(k, i)[0] - fd.mat(k, i)[0]).abs());
            }
            errs.push(max_err);
        }
        let ratio = errs[0] / errs[1];
        // central differences are second order in the spacing
        assert!(ratio > 2.5, "ratio = {ratio}, errs = {errs:?}");
    }

    #[test]
    fn derivative_moment_zero_drift_exact() {
        let b = make_standard_field("zero", &[2.0]).unwrap();
        let fam = vec![(1u32, mollify(&b, 1))];
        let levels =
            derivative_moment(&fam, 2.0, 0.25, &[vec![0.0, 0.0]], 128, 0.0625, 99).unwrap();
        // |I_2|_F^2 = 2 exactly
        assert_eq!(levels[0].sup_moment, 2.0);
        assert_eq!(levels[0].se_at_sup, 0.0);
    }

    #[test]
    fn derivative_moment_ou_matches_exponential() {
        let b = make_standard_field("linear_ou", &[1.0, 10.0]).unwrap();
        let dt = 1.0 / 256.0;
        let fam = vec![(1u32, b)];
        let levels = derivative_moment(&fam, 2.0, 1.0, &[vec![0.0]], 200, dt, 7).unwrap();
        let expect = (-2.0f64).exp();
        assert!(
            (levels[0].sup_moment - expect).abs() < 4.0 * dt,
            "got {}",
            levels[0].sup_moment
        );
    }

    #[test]
    fn derivative_moment_uniform_across_levels() {
        let base = make_standard_field("step_monotone", &[2.0, 1.0, 0.0]).unwrap();
        let fam: Vec<(u32, DriftField)> = [4u32, 16, 64]
            .iter()
            .map(|n| (*n, mollify(&base, *n)))
            .collect();
        let probes = vec![vec![-0.5], vec![0.0], vec![0.5]];
        let levels = derivative_moment(&fam, 2.0, 1.0, &probes, 2000, 1.0 / 128.0, 2024).unwrap();
        let sups: Vec<f64> = levels.iter().map(|l| l.sup_moment).collect();
        let max = sups.iter().cloned().fold(f64::MIN, f64::max);
        let min = sups.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min <= 1.5, "sups = {sups:?}");
        // while the derivative bound grows with n
        assert!(levels[2].grad_sup > 4.0 * levels[0].grad_sup);
    }

    #[test]
    fn girsanov_route_agrees_with_direct_moment() {
        // E|dX_t^x|^2 under the drifted SDE equals the weighted driftless
        // expectation E[|J~_t|^2 E(int b dB)] by the change of measure
        let base = make_standard_field("sign", &[1.0]).unwrap();
        let b = mollify(&base, 4);
        let t = 0.5;
        let dt = 1.0 / 128.0;
        let n_steps = steps_for(t, dt).unwrap();
        let m = 20_000;
        let direct: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|s| {
                let p = BrownianPath::sample(31, s as u64, 1, t, dt).unwrap();
                let states =
                    euler_states(&b, &p, 0.0, n_steps, Direction::Forward, 1.0, &[0.0]).unwrap();
                let mut j = 1.0;
                for k in 0..n_steps {
                    let x = states[k];
                    j += b.eval_jacobian1(k as f64 * dt, x).unwrap() * j * dt;
                }
                j * j
            })
            .collect();
        let weighted: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|s| {
                let p = BrownianPath::sample(77, s as u64, 1, t, dt).unwrap();
                let mut j = 1.0;
                for k in 0..n_steps {
                    let x = p.value(k)[0];
                    j += b.eval_jacobian1(k as f64 * dt, x).unwrap() * j * dt;
                }
                let w = crate::paths::girsanov_weight(&p, &b, &[0.0], t).unwrap();
                j * j * w
            })
            .collect();
        let (m1, s1) = mean_se(&direct);
        let (m2, s2) = mean_se(&weighted);
        let tol = 3.0 * (s1 * s1 + s2 * s2).sqrt() + 3.0 * dt;
        assert!((m1 - m2).abs() < tol, "direct {m1} vs weighted {m2}");
    }

    #[test]
    fn sobolev_norm_identity_map_matches_quadrature_oracle() {
        let lat = Lattice::line(-8.0, 8.0, 8193);
        let n = lat.len();
        let values = lat.points_flat();
        let jacobians = vec![1.0; n];
        let w = WeightFunction {
            family: WeightFamily::Gaussian { sigma: 1.0 },
            p: 2.0,
            d: 1,
        };
        let norm = weighted_sobolev_norm(&lat, &values, &jacobians, &w).unwrap();
        let lp_oracle =
            adaptive_simpson(&|x: f64| x * x * (-x * x / 2.0).exp(), -8.0, 8.0, 1e-12).sqrt();
        let dp_oracle = adaptive_simpson(&|x: f64| (-x * x / 2.0).exp(), -8.0, 8.0, 1e-12).sqrt();
        assert!((norm.lp_term - lp_oracle).abs() < 1e-6, "{}", norm.lp_term);
        assert!((norm.deriv_term - dp_oracle).abs() < 1e-6);
        assert!(norm.tail_bound.unwrap() < 1e-10);
    }

    #[test]
    fn sobolev_norm_weight_scaling_homogeneity() {
        let lat = Lattice::line(-4.0, 4.0, 257);
        let values = lat.points_flat();
        let jacobians = vec![1.0; lat.len()];
        let w1 = WeightFunction {
            family: WeightFamily::Constant { c: 1.0 },
            p: 2.0,
            d: 1,
        };
        let w2 = WeightFunction {
            family: WeightFamily::Constant { c: 2.0 },
            p: 2.0,
            d: 1,
        };
        let n1 = weighted_sobolev_norm(&lat, &values, &jacobians, &w1).unwrap();
        let n2 = weighted_sobolev_norm(&lat, &values, &jacobians, &w2).unwrap();
        let scale = 2.0f64.powf(0.5);
        assert!((n2.lp_term - scale * n1.lp_term).abs() < 1e-12 * n1.lp_term);
        assert!((n2.deriv_term - scale * n1.deriv_term).abs() < 1e-12 * n1.deriv_term);
        // pointwise monotone weights give monotone norms
        let wg = WeightFunction {
            family: WeightFamily::Gaussian { sigma: 1.0 },
            p: 2.0,
            d: 1,
        };
        let ng = weighted_sobolev_norm(&lat, &values, &jacobians, &wg).unwrap();
        assert!(ng.total <= n1.total);
    }

    #[test]
    fn sobolev_norm_translation_via_flow() {
        // zero drift: the flow is x + B_t, so the L^p piece is the norm of
        // the identity shifted by a constant
        let b = make_standard_field("zero", &[1.0]).unwrap();
        let p = path(13, 0.25, 0.0078125, 1);
        let lat = Lattice::line(-6.0, 6.0, 4097);
        let ff = simulate_flow(&b, &p, 0.0, 0.25, Direction::Forward, &lat, p.dt).unwrap();
        let jf = variational_jacobian(&mollify(&b, 1), &ff).unwrap();
        let w = WeightFunction {
            family: WeightFamily::Gaussian { sigma: 1.0 },
            p: 2.0,
            d: 1,
        };
        let norm = sobolev_norm_of_flow(&ff, &jf, 0.25, &w).unwrap();
        let shift = p.value(p.index_of(0.25).unwrap())[0];
        let lp_oracle = adaptive_simpson(
            &|x: f64| (x + shift) * (x + shift) * (-x * x / 2.0).exp(),
            -6.0,
            6.0,
            1e-12,
        )
        .sqrt();
        assert!(
            (norm.lp_term - lp_oracle).abs() < 1e-5,
            "{} vs {}",
            norm.lp_term,
            lp_oracle
        );
    }

    #[test]
    fn sobolev_norm_rejects_nonpositive_weight() {
        let lat = Lattice::line(-1.0, 1.0, 5);
        let values = lat.points_flat();
        let jacobians = vec![1.0; lat.len()];
        let w = WeightFunction {
            family: WeightFamily::Constant { c: 0.0 },
            p: 2.0,
            d: 1,
        };
        assert!(matches!(
            weighted_sobolev_norm(&lat, &values, &jacobians, &w),
            Err(RegularityError::NonpositiveWeight(_))
        ));
    }

    #[test]
    fn ap_constant_weight_is_unit() {
        let radii: Vec<f64> = (0..7).map(|k| 10f64.powi(k - 3)).collect();
        let diag = ap_diagnostic(0.0, 2.0, 1, &radii).unwrap();
        for p in &diag.products {
            assert!((p - 1.0).abs() < 1e-12);
        }
        assert_eq!(diag.verdict, ApVerdict::Finite { constant: 1.0 });
    }

    #[test]
    fn ap_inside_range_is_finite() {
        let radii: Vec<f64> = (0..7).map(|k| 10f64.powi(k - 3)).collect();
        let diag = ap_diagnostic(0.5, 2.0, 1, &radii).unwrap();
        match diag.verdict {
            ApVerdict::Finite { constant } => {
                // closed form: 1 / (1.5 * 0.5) = 4/3 on every ball
                assert!((constant - 4.0 / 3.0).abs() < 1e-10, "c = {constant}");
            }
            _ => panic!("should be finite"),
        }
    }

    #[test]
    fn ap_boundary_exponent_diverges() {
        let radii: Vec<f64> = (0..7).map(|k| 10f64.powi(k - 3)).collect();
        let diag = ap_diagnostic(1.0, 2.0, 1, &radii).unwrap();
        assert_eq!(diag.verdict, ApVerdict::Diverging);
        // log growth over the family
        assert!(diag.products.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn ap_rejects_non_integrable() {
        let radii: Vec<f64> = (0..7).map(|k| 10f64.powi(k - 3)).collect();
        assert!(matches!(
            ap_diagnostic(-1.0, 2.0, 1, &radii),
            Err(RegularityError::NotLocallyIntegrable)
        ));
    }

    #[test]
    fn gaussian_moment_certificate_matches_analytic() {
        let w = WeightFunction {
            family: WeightFamily::Gaussian { sigma: 1.0 },
            p: 2.0,
            d: 1,
        };
        let cert = w.moment_certificate(10.0);
        // int (1 + x^2) e^{-x^2/2} dx = 2 sqrt(2 pi)
        let expect = 2.0 * (2.0 * PI).sqrt();
        assert!((cert.truncated - expect).abs() < 1e-4, "{}", cert.truncated);
    }
}
