//! Evaluation of the trigonometric polynomial `S(eta) = sum_j u_j e^{-i eta.x_j}`
//! of a grid field at arbitrary frequencies, and its adjoint.
//!
//! The exact path contracts one axis at a time. The fast path is Gaussian
//! gridding: deconvolve, zero-pad by [`OVERSAMPLING`], FFT, then gather with
//! a truncated periodic Gaussian. Its adjoint is the exact conjugate
//! transpose of those steps, so adjoint identities hold to rounding.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{dft_centered, Grid};

pub const OVERSAMPLING: usize = 2;
/// Half the number of fine-grid points per axis touched by one target.
pub const SPREAD: usize = 12;
/// `Auto` uses the exact path when `targets * N^n` is at most this.
pub const EXACT_COST_LIMIT: f64 = (1u64 << 24) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPath {
    Exact,
    Fast,
    #[default]
    Auto,
}

#[derive(Debug, Clone)]
struct FastPlan {
    fine: usize,
    scale: f64,
    /// Per target and axis: first fine index and `2 * SPREAD` weights.
    start: Vec<i64>,
    weights: Vec<f64>,
    deconv: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OffGridEvaluator {
    grid: Grid,
    targets: Vec<f64>,
    fast: Option<FastPlan>,
}

impl OffGridEvaluator {
    /// `targets` holds `count * dim` coordinates, one frequency after another.
    pub fn new(grid: Grid, targets: Vec<f64>, path: EvalPath) -> Result<Self> {
        let n = grid.dim();
        if targets.len() % n != 0 {
            return Err(Error::DimensionMismatch { expected: n, got: targets.len() % n });
        }
        if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite { what: "target frequency", index: i / n });
        }
        let count = targets.len() / n;
        let exact_cost = count as f64 * grid.len() as f64;
        let fast_cost = count as f64 * ((2 * SPREAD) as f64).powi(n as i32)
            + ((OVERSAMPLING * grid.points_per_axis()) as f64).powi(n as i32) * 8.0;
        let use_fast = match path {
            EvalPath::Exact => false,
            EvalPath::Fast => true,
            EvalPath::Auto => exact_cost > EXACT_COST_LIMIT && fast_cost < exact_cost,
        };
        let fast = use_fast.then(|| FastPlan::new(&grid, &targets));
        Ok(Self { grid, targets, fast })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn target_count(&self) -> usize {
        self.targets.len() / self.grid.dim()
    }

    pub fn target(&self, t: usize) -> &[f64] {
        let n = self.grid.dim();
        &self.targets[t * n..(t + 1) * n]
    }

    pub fn uses_fast_path(&self) -> bool {
        self.fast.is_some()
    }

    /// `S(eta_t) = sum_j u_j e^{-i eta_t.x_j}` for every target.
    pub fn evaluate(&self, u: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(u.len(), self.grid.len());
        match &self.fast {
            Some(plan) => plan.evaluate(&self.grid, u),
            None => self.exact_evaluate(u),
        }
    }

    /// `sum_t v_t e^{i eta_t.x_j}` for every grid point.
    pub fn adjoint(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.target_count());
        match &self.fast {
            Some(plan) => plan.adjoint(&self.grid, v),
            None => self.exact_adjoint(v),
        }
    }

    fn phases(&self, t: usize, sign: f64) -> Vec<Vec<Complex64>> {
        let xs = self.grid.axis_coordinates();
        self.target(t)
            .iter()
            .map(|eta| xs.iter().map(|x| Complex64::from_polar(1.0, sign * eta * x)).collect())
            .collect()
    }

    fn exact_evaluate(&self, u: &[Complex64]) -> Vec<Complex64> {
        let n = self.grid.dim();
        let np = self.grid.points_per_axis();
        (0..self.target_count())
            .into_par_iter()
            .map(|t| {
                let phases = self.phases(t, -1.0);
                let mut buf = u.to_vec();
                for axis in (0..n).rev() {
                    let e = &phases[axis];
                    buf = buf.chunks_exact(np).map(|row| row.iter().zip(e).map(|(a, b)| a * b).sum()).collect();
                }
                buf[0]
            })
            .collect()
    }

    fn exact_adjoint(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.grid.dim();
        let np = self.grid.points_per_axis();
        let slab = self.grid.len() / np;
        let all: Vec<Vec<Vec<Complex64>>> = (0..self.target_count()).map(|t| self.phases(t, 1.0)).collect();
        let slabs: Vec<Vec<Complex64>> = (0..np)
            .into_par_iter()
            .map(|j0| {
                let mut out = vec![Complex64::new(0.0, 0.0); slab];
                let mut idx = vec![0usize; n];
                for (t, ph) in all.iter().enumerate() {
                    let lead = v[t] * ph[0][j0];
                    if lead == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    for (r, slot) in out.iter_mut().enumerate() {
                        // Decompose r over axes 1..n.
                        let mut rem = r;
                        for a in (1..n).rev() {
                            idx[a] = rem % np;
                            rem /= np;
                        }
                        let mut w = lead;
                        for a in 1..n {
                            w *= ph[a][idx[a]];
                        }
                        *slot += w;
                    }
                }
                out
            })
            .collect();
        slabs.concat()
    }
}

impl FastPlan {
    fn new(grid: &Grid, targets: &[f64]) -> Self {
        let n = grid.dim();
        let np = grid.points_per_axis();
        let fine = OVERSAMPLING * np;
        let r = OVERSAMPLING as f64;
        let tau = PI * SPREAD as f64 / ((np * np) as f64 * r * (r - 0.5));
        let h = 2.0 * PI / fine as f64;
        let dx = grid.dx();
        let width = 2 * SPREAD;
        let count = targets.len() / n;
        let mut start = Vec::with_capacity(count * n);
        let mut weights = Vec::with_capacity(count * n * width);
        for theta in targets.iter().map(|eta| eta * dx) {
            let base = (theta / h).floor() as i64 - SPREAD as i64 + 1;
            start.push(base);
            for l in 0..width as i64 {
                let d = theta - (base + l) as f64 * h;
                weights.push((-d * d / (4.0 * tau)).exp());
            }
        }
        let scale = ((PI / tau).sqrt() / fine as f64).powi(n as i32);
        let deconv = (0..np)
            .map(|i| {
                let k = grid.signed_index(i) as f64;
                (k * k * tau).exp()
            })
            .collect();
        Self { fine, scale, start, weights, deconv }
    }

    fn fine_offset(&self, coarse: &[usize], np: usize) -> usize {
        let shift = (self.fine - np) / 2;
        coarse.iter().fold(0, |acc, &i| acc * self.fine + i + shift)
    }

    fn deconvolved(&self, grid: &Grid, u: &[Complex64]) -> Vec<Complex64> {
        let n = grid.dim();
        let np = grid.points_per_axis();
        let mut out = vec![Complex64::new(0.0, 0.0); self.fine.pow(n as u32)];
        let mut idx = vec![0; n];
        for (j, v) in u.iter().enumerate() {
            grid.multi_index(j, &mut idx);
            let w: f64 = idx.iter().map(|&i| self.deconv[i]).product();
            out[self.fine_offset(&idx, np)] = v * w;
        }
        out
    }

    fn for_each_neighbor(&self, n: usize, t: usize, mut f: impl FnMut(usize, f64)) {
        let width = 2 * SPREAD;
        let half = (self.fine / 2) as i64;
        let m = self.fine as i64;
        let total = width.pow(n as u32);
        let mut idx = vec![0usize; n];
        for flat in 0..total {
            let mut rem = flat;
            for slot in idx.iter_mut().rev() {
                *slot = rem % width;
                rem /= width;
            }
            let mut w = 1.0;
            let mut offset = 0usize;
            for (a, &l) in idx.iter().enumerate() {
                w *= self.weights[(t * n + a) * width + l];
                let signed = self.start[t * n + a] + l as i64;
                let storage = (signed + half).rem_euclid(m) as usize;
                offset = offset * self.fine + storage;
            }
            f(offset, w);
        }
    }

    fn evaluate(&self, grid: &Grid, u: &[Complex64]) -> Vec<Complex64> {
        let n = grid.dim();
        let mut fine = self.deconvolved(grid, u);
        dft_centered(&mut fine, n, self.fine, false);
        let count = self.start.len() / n;
        (0..count)
            .into_par_iter()
            .map(|t| {
                let mut acc = Complex64::new(0.0, 0.0);
                self.for_each_neighbor(n, t, |o, w| acc += fine[o] * w);
                acc * self.scale
            })
            .collect()
    }

    fn adjoint(&self, grid: &Grid, v: &[Complex64]) -> Vec<Complex64> {
        let n = grid.dim();
        let np = grid.points_per_axis();
        let mut fine = vec![Complex64::new(0.0, 0.0); self.fine.pow(n as u32)];
        for (t, vt) in v.iter().enumerate() {
            let s = vt * self.scale;
            self.for_each_neighbor(n, t, |o, w| fine[o] += s * w);
        }
        dft_centered(&mut fine, n, self.fine, true);
        let mut idx = vec![0; n];
        (0..grid.len())
            .map(|j| {
                grid.multi_index(j, &mut idx);
                let w: f64 = idx.iter().map(|&i| self.deconv[i]).product();
                fine[self.fine_offset(&idx, np)] * w
            })
            .collect()
    }
}
