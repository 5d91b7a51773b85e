//! Brownian paths with reproducible counter-based seeding, the Wiener shift,
//! Girsanov weights and 1-d local time estimation on a time-space grid.

use crate::fields::DriftField;
use crate::rng::standard_normal_q32;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("horizon {t} is not a multiple of dt = {dt}")]
    OffGridHorizon { t: f64, dt: f64 },
    #[error("time {t} is not on the path grid (dt = {dt})")]
    OffGridTime { t: f64, dt: f64 },
    #[error("path horizon {have} too short, need {need}")]
    HorizonTooShort { have: f64, need: f64 },
    #[error("step count overflow: {0} steps requested")]
    TooManySteps(f64),
    #[error("local time grid edges must be increasing and nonempty")]
    BadBins,
}

const GRID_TOL: f64 = 1e-9;
const MAX_STEPS: f64 = 1e9;

pub(crate) fn steps_for(t: f64, dt: f64) -> Result<usize, PathError> {
    if dt <= 0.0 {
        return Err(PathError::NonPositiveDt(dt));
    }
    let raw = t / dt;
    if raw > MAX_STEPS {
        return Err(PathError::TooManySteps(raw));
    }
    let k = raw.round();
    if (raw - k).abs() > GRID_TOL * (1.0 + raw.abs()) {
        return Err(PathError::OffGridHorizon { t, dt });
    }
    Ok(k as usize)
}

/// One d-dimensional Wiener trajectory on a uniform grid, anchored at 0.
///
/// Increments are quantised normals keyed by `(seed, stream, step * d + coord)`,
/// so the whole path is a pure function of its key and the grid.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    pub d: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub stream: u64,
    values: Vec<f64>, // (n_steps + 1) * d
}

impl BrownianPath {
    pub fn sample(seed: u64, stream: u64, d: usize, t: f64, dt: f64) -> Result<Self, PathError> {
        assert!(d >= 1);
        let n_steps = steps_for(t, dt)?;
        let sqrt_dt = dt.sqrt();
        let mut values = vec![0.0; (n_steps + 1) * d];
        for k in 0..n_steps {
            for j in 0..d {
                let inc = sqrt_dt * standard_normal_q32(seed, stream, (k * d + j) as u64);
                // quantise the scaled increment so path values stay on the
                // 2^-32 grid whatever dt is
                let inc = (inc * 4_294_967_296.0).round() / 4_294_967_296.0;
                values[(k + 1) * d + j] = values[k * d + j] + inc;
            }
        }
        Ok(BrownianPath {
            d,
            dt,
            n_steps,
            seed,
            stream,
            values,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    /// Grid index of a time, erroring off-grid or out of horizon.
    pub fn index_of(&self, t: f64) -> Result<usize, PathError> {
        if t < -GRID_TOL {
            return Err(PathError::OffGridTime { t, dt: self.dt });
        }
        let raw = t / self.dt;
        let k = raw.round();
        if (raw - k).abs() > GRID_TOL * (1.0 + raw.abs()) {
            return Err(PathError::OffGridTime { t, dt: self.dt });
        }
        let k = k as usize;
        if k > self.n_steps {
            return Err(PathError::HorizonTooShort {
                have: self.horizon(),
                need: t,
            });
        }
        Ok(k)
    }

    /// theta(t1, omega): the path s -> B(t1 + s) - B(t1) on the remaining
    /// horizon. Differences of stored values are exact, so the helix identity
    /// holds bitwise on the grid.
    pub fn wiener_shift(&self, t1: f64) -> Result<BrownianPath, PathError> {
        let k1 = self.index_of(t1)?;
        let n = self.n_steps - k1;
        let mut values = vec![0.0; (n + 1) * self.d];
        let anchor = self.value(k1).to_vec();
        for k in 0..=n {
            for j in 0..self.d {
                values[k * self.d + j] = self.values[(k1 + k) * self.d + j] - anchor[j];
            }
        }
        Ok(BrownianPath {
            d: self.d,
            dt: self.dt,
            n_steps: n,
            seed: self.seed,
            stream: self.stream,
            values,
        })
    }

    /// Keep every `factor`-th grid point; the result is the same Brownian
    /// path observed on the coarser grid.
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath, PathError> {
        assert!(factor >= 1);
        if !self.n_steps.is_multiple_of(factor) {
            return Err(PathError::OffGridHorizon {
                t: self.horizon(),
                dt: self.dt * factor as f64,
            });
        }
        let n = self.n_steps / factor;
        let mut values = vec![0.0; (n + 1) * self.d];
        for k in 0..=n {
            values[k * self.d..(k + 1) * self.d].copy_from_slice(self.value(k * factor));
        }
        Ok(BrownianPath {
            d: self.d,
            dt: self.dt * factor as f64,
            n_steps: n,
            seed: self.seed,
            stream: self.stream,
            values,
        })
    }
}

/// Discrete Doleans-Dade exponential
/// exp(sum b(t_k, x + B_k) . dB_k - 1/2 sum |b(t_k, x + B_k)|^2 dt).
pub fn girsanov_weight(
    path: &BrownianPath,
    drift: &DriftField,
    x: &[f64],
    t_end: f64,
) -> Result<f64, PathError> {
    assert_eq!(drift.dim, path.d);
    let k_end = path.index_of(t_end)?;
    let d = path.d;
    let mut shifted = vec![0.0; d];
    let mut bval = vec![0.0; d];
    let mut log_w = 0.0;
    for k in 0..k_end {
        let bk = path.value(k);
        for j in 0..d {
            shifted[j] = x[j] + bk[j];
        }
        drift.eval(k as f64 * path.dt, &shifted, &mut bval);
        let bk1 = &path.values[(k + 1) * d..(k + 2) * d];
        let mut dot = 0.0;
        let mut sq = 0.0;
        for j in 0..d {
            dot += bval[j] * (bk1[j] - bk[j]);
            sq += bval[j] * bval[j];
        }
        log_w += dot - 0.5 * sq * path.dt;
    }
    Ok(log_w.exp())
}

/// Occupation measure of a 1-d trajectory on a time x space mesh.
///
/// `mass[i][j]` is the time spent in space bin j during time bin i, so the
/// total mass approximates the elapsed time and
/// `sum f(cell) * mass ~ int_0^T f(s, X_s) ds`.
#[derive(Debug, Clone)]
pub struct LocalTimeGrid {
    pub time_edges: Vec<f64>,
    pub space_edges: Vec<f64>,
    mass: Vec<f64>, // time-major
    pub truncated_fraction: f64,
}

impl LocalTimeGrid {
    pub fn n_time_bins(&self) -> usize {
        self.time_edges.len() - 1
    }

    pub fn n_space_bins(&self) -> usize {
        self.space_edges.len() - 1
    }

    pub fn mass(&self, i_time: usize, j_space: usize) -> f64 {
        self.mass[i_time * self.n_space_bins() + j_space]
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn time_center(&self, i: usize) -> f64 {
        0.5 * (self.time_edges[i] + self.time_edges[i + 1])
    }

    pub fn space_center(&self, j: usize) -> f64 {
        0.5 * (self.space_edges[j] + self.space_edges[j + 1])
    }

    pub fn space_width(&self) -> f64 {
        self.space_edges[1] - self.space_edges[0]
    }

    /// Column sums: time spent per space bin over the whole window.
    pub fn space_marginal(&self) -> Vec<f64> {
        let nj = self.n_space_bins();
        let mut out = vec![0.0; nj];
        for i in 0..self.n_time_bins() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.mass(i, j);
            }
        }
        out
    }
}

/// Uniform bin edges.
pub fn uniform_edges(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    (0..=n_bins)
        .map(|i| lo + (hi - lo) * i as f64 / n_bins as f64)
        .collect()
}

/// Estimate the occupation measure of a trajectory given at uniform times.
/// Each step's dt is split across the space bins the linear segment
/// [X_k, X_{k+1}] crosses; time outside the space window is reported as a
/// truncated fraction.
pub fn local_time_grid(
    trajectory: &[f64],
    dt: f64,
    time_edges: &[f64],
    space_edges: &[f64],
) -> Result<LocalTimeGrid, PathError> {
    if time_edges.len() < 2
        || space_edges.len() < 2
        || time_edges.windows(2).any(|w| w[1] <= w[0])
        || space_edges.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(PathError::BadBins);
    }
    let ni = time_edges.len() - 1;
    let nj = space_edges.len() - 1;
    let y_lo = space_edges[0];
    let y_hi = space_edges[nj];
    let width = (y_hi - y_lo) / nj as f64;
    let mut mass = vec![0.0; ni * nj];
    let mut truncated = 0.0;
    let mut total = 0.0;
    for k in 0..trajectory.len() - 1 {
        let t = k as f64 * dt;
        if t < time_edges[0] - 1e-12 || t >= time_edges[ni] - 1e-12 {
            continue;
        }
        let i = (((t - time_edges[0]) / (time_edges[ni] - time_edges[0]) * ni as f64).floor()
            as usize)
            .min(ni - 1);
        total += dt;
        let (a, b) = (trajectory[k], trajectory[k + 1]);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if hi <= y_lo || lo >= y_hi {
            truncated += dt;
            continue;
        }
        if hi - lo < 1e-300 {
            // stationary segment: whole dt to one bin
            let j = (((lo - y_lo) / width).floor() as isize).clamp(0, nj as isize - 1) as usize;
            mass[i * nj + j] += dt;
            continue;
        }
        // clip to the window, distribute dt proportionally to overlap
        let clo = lo.max(y_lo);
        let chi = hi.min(y_hi);
        truncated += dt * (1.0 - (chi - clo) / (hi - lo));
        let j_start = (((clo - y_lo) / width).floor() as isize).clamp(0, nj as isize - 1) as usize;
        let j_end = (((chi - y_lo) / width).ceil() as isize).clamp(1, nj as isize) as usize;
        for j in j_start..j_end {
            let b_lo = space_edges[j].max(clo);
            let b_hi = space_edges[j + 1].min(chi);
            if b_hi > b_lo {
                mass[i * nj + j] += dt * (b_hi - b_lo) / (hi - lo);
            }
        }
    }
    Ok(LocalTimeGrid {
        time_edges: time_edges.to_vec(),
        space_edges: space_edges.to_vec(),
        mass,
        truncated_fraction: if total > 0.0 { truncated / total } else { 0.0 },
    })
}

/// Integral of a bounded f(s, y) against the occupation measure.
pub fn local_time_space_integral(ltg: &LocalTimeGrid, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..ltg.n_time_bins() {
        let s = ltg.time_center(i);
        for j in 0..ltg.n_space_bins() {
            let m = ltg.mass(i, j);
            if m != 0.0 {
                acc += f(s, ltg.space_center(j)) * m;
            }
        }
    }
    acc
}
