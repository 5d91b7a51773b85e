//! Regular lattices of initial points and multilinear interpolation.

use serde::{Deserialize, Serialize};

/// One lattice axis: `n` equally spaced points from `min` to `max` inclusive
/// (a single point when `n == 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        if self.n <= 1 {
            0.0
        } else {
            (self.max - self.min) / (self.n - 1) as f64
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        if self.n <= 1 {
            self.min
        } else {
            self.min + self.spacing() * i as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub axes: Vec<Axis>,
}

impl Lattice {
    pub fn new(axes: Vec<Axis>) -> Self {
        assert!(!axes.is_empty(), "lattice needs at least one axis");
        Lattice { axes }
    }

    /// Uniform 1-d lattice.
    pub fn line(min: f64, max: f64, n: usize) -> Self {
        Lattice::new(vec![Axis { min, max, n }])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-index of the flat index, row-major with the last axis fastest.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let d = self.dim();
        let mut idx = vec![0usize; d];
        for k in (0..d).rev() {
            idx[k] = flat % self.axes[k].n;
            flat /= self.axes[k].n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (k, i) in idx.iter().enumerate() {
            flat = flat * self.axes[k].n + i;
        }
        flat
    }

    pub fn point_into(&self, flat: usize, out: &mut [f64]) {
        let idx = self.multi_index(flat);
        for (k, i) in idx.iter().enumerate() {
            out[k] = self.axes[k].coord(*i);
        }
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(flat, &mut p);
        p
    }

    /// All points flattened to a d * len vector.
    pub fn points_flat(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * self.len()];
        for i in 0..self.len() {
            let s = i * d;
            self.point_into(i, &mut out[s..s + d]);
        }
        out
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter()
            .zip(&self.axes)
            .all(|(v, a)| *v >= a.min && *v <= a.max)
    }

    /// Multilinear interpolation of a vector field given on the lattice,
    /// written in displacement form: the field minus the identity is
    /// interpolated and the query point added back. This reproduces
    /// translation fields exactly.
    ///
    /// `values` is len * d flat, returns `None` when `z` leaves the hull.
    pub fn interp_displacement(&self, values: &[f64], z: &[f64], out: &mut [f64]) -> Option<()> {
        let d = self.dim();
        debug_assert_eq!(values.len(), self.len() * d);
        if !self.contains(z) {
            return None;
        }
        // cell lower corner and weights per axis
        let mut base = vec![0usize; d];
        let mut w = vec![0.0; d];
        for k in 0..d {
            let a = &self.axes[k];
            if a.n == 1 {
                base[k] = 0;
                w[k] = 0.0;
                continue;
            }
            let u = (z[k] - a.min) / a.spacing();
            let mut i = u.floor() as isize;
            if i < 0 {
                i = 0;
            }
            if i as usize > a.n - 2 {
                i = (a.n - 2) as isize;
            }
            base[k] = i as usize;
            w[k] = (z[k] - a.coord(base[k])) / a.spacing();
        }
        for o in out.iter_mut().take(d) {
            *o = 0.0;
        }
        let corners = 1usize << d;
        let mut idx = vec![0usize; d];
        let mut corner_pt = vec![0.0; d];
        for c in 0..corners {
            let mut weight = 1.0;
            for k in 0..d {
                let hi = (c >> k) & 1 == 1;
                if hi && self.axes[k].n == 1 {
                    weight = 0.0;
                    break;
                }
                idx[k] = base[k] + if hi { 1 } else { 0 };
                weight *= if hi { w[k] } else { 1.0 - w[k] };
            }
            if weight == 0.0 {
                continue;
            }
            let flat = self.flat_index(&idx);
            for (k, cp) in corner_pt.iter_mut().enumerate() {
                *cp = self.axes[k].coord(idx[k]);
            }
            for k in 0..d {
                out[k] += weight * (values[flat * d + k] - corner_pt[k]);
            }
        }
        for k in 0..d {
            out[k] += z[k];
        }
        Some(())
    }

    /// Plain multilinear interpolation of a scalar field on the lattice.
    pub fn interp_scalar(&self, values: &[f64], z: &[f64]) -> Option<f64> {
        let d = self.dim();
        debug_assert_eq!(values.len(), self.len());
        if !self.contains(z) {
            return None;
        }
        let mut base = vec![0usize; d];
        let mut w = vec![0.0; d];
        for k in 0..d {
            let a = &self.axes[k];
            if a.n == 1 {
                base[k] = 0;
                w[k] = 0.0;
                continue;
            }
            let u = (z[k] - a.min) / a.spacing();
            let mut i = u.floor() as isize;
            i = i.clamp(0, (a.n - 2) as isize);
            base[k] = i as usize;
            w[k] = (z[k] - a.coord(base[k])) / a.spacing();
        }
        let corners = 1usize << d;
        let mut idx = vec![0usize; d];
        let mut acc = 0.0;
        for c in 0..corners {
            let mut weight = 1.0;
            for k in 0..d {
                let hi = (c >> k) & 1 == 1;
                if hi && self.axes[k].n == 1 {
                    weight = 0.0;
                    break;
                }
                idx[k] = base[k] + if hi { 1 } else { 0 };
                weight *= if hi { w[k] } else { 1.0 - w[k] };
            }
            if weight == 0.0 {
                continue;
            }
            acc += weight * values[self.flat_index(&idx)];
        }
        Some(acc)
    }
}
