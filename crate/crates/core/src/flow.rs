//! Two-parameter flow simulation over grids of initial points driven by one
//! shared Brownian path, with composition / inverse / cocycle checks and
//! Hölder moment-exponent estimation.

use crate::fields::DriftField;
use crate::lattice::Lattice;
use crate::numerics::{euclid_norm, fit_line, mean_se};
use crate::paths::{steps_for, BrownianPath, PathError};
use rayon::prelude::*;
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("flow dt {flow_dt} must equal the path dt {path_dt} (no sub-stepping)")]
    DtMismatch { flow_dt: f64, path_dt: f64 },
    #[error("initial lattice is empty")]
    EmptyLattice,
    #[error("time {0} is not on the flow grid")]
    NotOnFlowGrid(f64),
    #[error("cocycle check requires an autonomous drift")]
    NotAutonomous,
    #[error("drift dimension {drift} does not match path dimension {path}")]
    DimensionMismatch { drift: usize, path: usize },
    #[error("need at least {need} probe points per axis, got {got}")]
    TooFewProbes { need: usize, got: usize },
    #[error("probe gaps must span at least 1.5 decades")]
    ProbeSpanTooSmall,
    #[error("q must be 2 or 4, got {0}")]
    BadMomentOrder(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Euler-Maruyama with shared Brownian increments:
/// X_{k+1} = X_k + b(t_k, X_k) (+-dt) + scale * (B_{t_{k+-1}} - B_{t_k}).
///
/// Returns all levels, (n_steps + 1) * n_points * d flat.
pub fn euler_states(
    drift: &DriftField,
    path: &BrownianPath,
    start: f64,
    n_steps: usize,
    direction: Direction,
    noise_scale: f64,
    init: &[f64],
) -> Result<Vec<f64>, FlowError> {
    let d = drift.dim;
    if d != path.d {
        return Err(FlowError::DimensionMismatch {
            drift: d,
            path: path.d,
        });
    }
    let k0 = path.index_of(start)?;
    match direction {
        Direction::Forward => {
            path.index_of(start + n_steps as f64 * path.dt)?;
        }
        Direction::Backward => {
            if k0 < n_steps {
                return Err(PathError::HorizonTooShort {
                    have: start,
                    need: n_steps as f64 * path.dt,
                }
                .into());
            }
        }
    }
    let n_points = init.len() / d;
    let mut states = vec![0.0; (n_steps + 1) * n_points * d];
    states[..init.len()].copy_from_slice(init);
    let dt = path.dt;
    let signed_dt = match direction {
        Direction::Forward => dt,
        Direction::Backward => -dt,
    };
    let mut bval = vec![0.0; d];
    for k in 0..n_steps {
        let t_k = start + k as f64 * signed_dt;
        let idx = match direction {
            Direction::Forward => k0 + k,
            Direction::Backward => k0 - k,
        };
        let idx_next = match direction {
            Direction::Forward => idx + 1,
            Direction::Backward => idx - 1,
        };
        let (done, rest) = states.split_at_mut((k + 1) * n_points * d);
        let cur = &done[k * n_points * d..];
        let next = &mut rest[..n_points * d];
        let b_cur = path.value(idx);
        let b_next = path.value(idx_next);
        for i in 0..n_points {
            let xs = &cur[i * d..(i + 1) * d];
            drift.eval(t_k, xs, &mut bval);
            for j in 0..d {
                next[i * d + j] =
                    xs[j] + bval[j] * signed_dt + noise_scale * (b_next[j] - b_cur[j]);
            }
        }
    }
    Ok(states)
}

/// Discrete two-parameter flow phi_{s, .} on a lattice of initial points.
#[derive(Clone)]
pub struct FlowField {
    pub drift: DriftField,
    pub path: Arc<BrownianPath>,
    pub s: f64,
    pub dt: f64,
    pub direction: Direction,
    pub times: Vec<f64>,
    pub lattice: Lattice,
    states: Vec<f64>,
}

impl FlowField {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_points(&self) -> usize {
        self.lattice.len()
    }

    pub fn dim(&self) -> usize {
        self.drift.dim
    }

    /// State of initial point `i` at time level `k`.
    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        let d = self.dim();
        let off = (k * self.n_points() + i) * d;
        &self.states[off..off + d]
    }

    /// All states at one time level, flat n_points * d.
    pub fn level(&self, k: usize) -> &[f64] {
        let w = self.n_points() * self.dim();
        &self.states[k * w..(k + 1) * w]
    }

    pub fn time_index(&self, t: f64) -> Result<usize, FlowError> {
        let step = match self.direction {
            Direction::Forward => self.dt,
            Direction::Backward => -self.dt,
        };
        let raw = (t - self.s) / step;
        let k = raw.round();
        if (raw - k).abs() > 1e-9 * (1.0 + raw.abs()) || k < 0.0 || k as usize >= self.n_times() {
            return Err(FlowError::NotOnFlowGrid(t));
        }
        Ok(k as usize)
    }

    /// CSV export: time, x_index, initial coordinates, state coordinates.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), FlowError> {
        let d = self.dim();
        write!(w, "time,x_index")?;
        for j in 0..d {
            write!(w, ",x0_{j}")?;
        }
        for j in 0..d {
            write!(w, ",state_{j}")?;
        }
        writeln!(w)?;
        let mut p = vec![0.0; d];
        for (k, t) in self.times.iter().enumerate() {
            for i in 0..self.n_points() {
                self.lattice.point_into(i, &mut p);
                write!(w, "{t},{i}")?;
                for v in &p {
                    write!(w, ",{v}")?;
                }
                for v in self.state(k, i) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

pub fn simulate_flow(
    drift: &DriftField,
    path: &Arc<BrownianPath>,
    s: f64,
    horizon: f64,
    direction: Direction,
    lattice: &Lattice,
    dt: f64,
) -> Result<FlowField, FlowError> {
    if lattice.is_empty() {
        return Err(FlowError::EmptyLattice);
    }
    if (dt - path.dt).abs() > 1e-12 * dt.max(path.dt) {
        return Err(FlowError::DtMismatch {
            flow_dt: dt,
            path_dt: path.dt,
        });
    }
    let n_steps = steps_for(horizon, dt)?;
    let init = lattice.points_flat();
    let states = euler_states(drift, path, s, n_steps, direction, 1.0, &init)?;
    let times = (0..=n_steps)
        .map(|k| match direction {
            Direction::Forward => s + k as f64 * dt,
            Direction::Backward => s - k as f64 * dt,
        })
        .collect();
    Ok(FlowField {
        drift: drift.clone(),
        path: path.clone(),
        s,
        dt,
        direction,
        times,
        lattice: lattice.clone(),
        states,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DeviationReport {
    pub max_deviation: f64,
    /// points excluded because an intermediate state left the interpolation hull
    pub excluded: usize,
}

/// Deviation of phi_{u,t}(phi_{s,u}(x)) from phi_{s,t}(x) over the lattice,
/// with phi_{u,t} evaluated off-lattice by multilinear interpolation.
pub fn compose_check(ff: &FlowField, s: f64, u: f64, t: f64) -> Result<DeviationReport, FlowError> {
    assert_eq!(
        ff.direction,
        Direction::Forward,
        "compose needs a forward flow"
    );
    if (s - ff.s).abs() > 1e-12 * (1.0 + s.abs()) {
        return Err(FlowError::NotOnFlowGrid(s));
    }
    let ku = ff.time_index(u)?;
    let kt = ff.time_index(t)?;
    let mid = simulate_flow(
        &ff.drift,
        &ff.path,
        u,
        t - u,
        Direction::Forward,
        &ff.lattice,
        ff.dt,
    )?;
    let mid_terminal = mid.level(mid.n_times() - 1);
    let d = ff.dim();
    let mut composed = vec![0.0; d];
    let mut max_dev: f64 = 0.0;
    let mut excluded = 0;
    for i in 0..ff.n_points() {
        let z = ff.state(ku, i);
        if ff
            .lattice
            .interp_displacement(mid_terminal, z, &mut composed)
            .is_none()
        {
            excluded += 1;
            continue;
        }
        let direct = ff.state(kt, i);
        let dev = composed
            .iter()
            .zip(direct)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        max_dev = max_dev.max(dev);
    }
    Ok(DeviationReport {
        max_deviation: max_dev,
        excluded,
    })
}

/// Deviation of phi_{t,s}(phi_{s,t}(x)) from x: the backward leg starts at the
/// forward terminal states and reuses the stored increments with reversed dt.
pub fn inverse_flow_check(
    drift: &DriftField,
    path: &Arc<BrownianPath>,
    s: f64,
    t: f64,
    lattice: &Lattice,
    dt: f64,
) -> Result<DeviationReport, FlowError> {
    let n_steps = steps_for(t - s, dt)?;
    let init = lattice.points_flat();
    let fwd = euler_states(drift, path, s, n_steps, Direction::Forward, 1.0, &init)?;
    let d = drift.dim;
    let w = init.len();
    let terminal = &fwd[n_steps * w..];
    let bwd = euler_states(drift, path, t, n_steps, Direction::Backward, 1.0, terminal)?;
    let back = &bwd[n_steps * w..];
    let mut max_dev: f64 = 0.0;
    for i in 0..lattice.len() {
        let dev = (0..d)
            .map(|j| {
                let e = back[i * d + j] - init[i * d + j];
                e * e
            })
            .sum::<f64>()
            .sqrt();
        max_dev = max_dev.max(dev);
    }
    Ok(DeviationReport {
        max_deviation: max_dev,
        excluded: 0,
    })
}

/// Deviation of phi_{0,t2}(phi_{0,t1}(x, w), theta(t1, w)) from
/// phi_{0,t1+t2}(x, w) for an autonomous drift. The shifted leg is simulated
/// directly from the intermediate states, so no interpolation enters.
pub fn cocycle_check(
    drift: &DriftField,
    path: &Arc<BrownianPath>,
    t1: f64,
    t2: f64,
    lattice: &Lattice,
    dt: f64,
) -> Result<DeviationReport, FlowError> {
    if !drift.autonomous {
        return Err(FlowError::NotAutonomous);
    }
    let k1 = steps_for(t1, dt)?;
    let k2 = steps_for(t2, dt)?;
    let init = lattice.points_flat();
    let d = drift.dim;
    let w = init.len();
    let leg1 = euler_states(drift, path, 0.0, k1, Direction::Forward, 1.0, &init)?;
    let z = &leg1[k1 * w..];
    let shifted = path.wiener_shift(t1)?;
    let leg2 = euler_states(drift, &shifted, 0.0, k2, Direction::Forward, 1.0, z)?;
    let via_shift = &leg2[k2 * w..];
    let full = euler_states(drift, path, 0.0, k1 + k2, Direction::Forward, 1.0, &init)?;
    let direct = &full[(k1 + k2) * w..];
    let mut max_dev: f64 = 0.0;
    for i in 0..lattice.len() {
        let dev = (0..d)
            .map(|j| {
                let e = via_shift[i * d + j] - direct[i * d + j];
                e * e
            })
            .sum::<f64>()
            .sqrt();
        max_dev = max_dev.max(dev);
    }
    Ok(DeviationReport {
        max_deviation: max_dev,
        excluded: 0,
    })
}

// ---------------------------------------------------------------------------
// Hölder moment exponents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HolderSpec {
    pub ensemble: usize,
    pub seed: u64,
    pub dt: f64,
    /// common initial point
    pub x0: Vec<f64>,
    /// moments are taken at this base time
    pub t_base: f64,
}

#[derive(Debug, Clone)]
pub struct HolderProbes {
    pub time_gaps: Vec<f64>,
    pub space_gaps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HolderFit {
    pub beta_time: f64,
    pub se_time: f64,
    pub beta_space: f64,
    pub se_space: f64,
    pub time_moments: Vec<f64>,
    pub space_moments: Vec<f64>,
}

fn check_probes(gaps: &[f64]) -> Result<(), FlowError> {
    if gaps.len() < 3 {
        return Err(FlowError::TooFewProbes {
            need: 3,
            got: gaps.len(),
        });
    }
    let max = gaps.iter().cloned().fold(f64::MIN, f64::max);
    let min = gaps.iter().cloned().fold(f64::MAX, f64::min);
    if max / min < 10f64.powf(1.5) - 1e-9 {
        return Err(FlowError::ProbeSpanTooSmall);
    }
    Ok(())
}

/// Monte-Carlo estimates of E|X_{t1}^{x1} - X_{t2}^{x2}|^q varying one gap at
/// a time, with least-squares slopes of log moment against log gap.
pub fn holder_exponents(
    drift: &DriftField,
    spec: &HolderSpec,
    q: u32,
    probes: &HolderProbes,
) -> Result<HolderFit, FlowError> {
    if q != 2 && q != 4 {
        return Err(FlowError::BadMomentOrder(q));
    }
    check_probes(&probes.time_gaps)?;
    check_probes(&probes.space_gaps)?;
    let d = drift.dim;
    let dt = spec.dt;
    let max_gap = probes.time_gaps.iter().cloned().fold(0.0, f64::max);
    let horizon = spec.t_base + max_gap;
    let k_base = steps_for(spec.t_base, dt)?;
    let k_max = steps_for(max_gap, dt)?;
    let gap_steps: Vec<usize> = probes
        .time_gaps
        .iter()
        .map(|g| steps_for(*g, dt))
        .collect::<Result<_, _>>()?;
    let n_space = probes.space_gaps.len();
    let qf = q as f64;

    // space probes run from x0 + g e_1 alongside the base point
    let mut init = spec.x0.clone();
    for g in &probes.space_gaps {
        let mut shifted = spec.x0.clone();
        shifted[0] += g;
        init.extend_from_slice(&shifted);
    }

    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.ensemble)
        .into_par_iter()
        .map(|m| {
            let path =
                BrownianPath::sample(spec.seed, m as u64, d, horizon, dt).expect("validated grid");
            let states = euler_states(
                drift,
                &path,
                0.0,
                k_base + k_max,
                Direction::Forward,
                1.0,
                &init,
            )
            .expect("validated horizon");
            let width = (1 + n_space) * d;
            let base_row = &states[k_base * width..k_base * width + d];
            let time_vals: Vec<f64> = gap_steps
                .iter()
                .map(|gs| {
                    let row = &states[(k_base + gs) * width..(k_base + gs) * width + d];
                    let diff: Vec<f64> = row.iter().zip(base_row).map(|(a, b)| a - b).collect();
                    euclid_norm(&diff).powf(qf)
                })
                .collect();
            let space_vals: Vec<f64> = (0..n_space)
                .map(|i| {
                    let row = &states[k_base * width + (i + 1) * d..k_base * width + (i + 2) * d];
                    let diff: Vec<f64> = row.iter().zip(base_row).map(|(a, b)| a - b).collect();
                    euclid_norm(&diff).powf(qf)
                })
                .collect();
            (time_vals, space_vals)
        })
        .collect();

    let column_mean = |time_axis: bool, idx: usize| {
        let vals: Vec<f64> = per_path
            .iter()
            .map(|p| if time_axis { p.0[idx] } else { p.1[idx] })
            .collect();
        mean_se(&vals).0
    };
    let time_moments: Vec<f64> = (0..gap_steps.len()).map(|i| column_mean(true, i)).collect();
    let space_moments: Vec<f64> = (0..n_space).map(|i| column_mean(false, i)).collect();

    let log_fit = |gaps: &[f64], moments: &[f64]| {
        let xs: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
        let ys: Vec<f64> = moments.iter().map(|m| m.ln()).collect();
        fit_line(&xs, &ys)
    };
    let tf = log_fit(&probes.time_gaps, &time_moments);
    let sf = log_fit(&probes.space_gaps, &space_moments);
    Ok(HolderFit {
        beta_time: tf.slope,
        se_time: tf.slope_se,
        beta_space: sf.slope,
        se_space: sf.slope_se,
        time_moments,
        space_moments,
    })
}
