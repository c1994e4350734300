//! Periodic grids, spatial and spectral fields, the continuum-normalized
//! Fourier transform and weighted `L^2_m` norms.
//!
//! A [`Grid`] samples the box `[-L, L)^n` with `N` points per axis. Both the
//! spatial and the frequency samples are stored in *centered* row-major order:
//! flat index `i` along an axis corresponds to the signed index `i - N/2`, so
//! the spatial point is `(i - N/2) dx` and the frequency is `(i - N/2) dxi`.
//!
//! The transform follows the continuum convention
//! `u_hat(xi) = sum_j u(x_j) exp(-i xi . x_j) dx^n`, whose inverse is
//! `u(x) = sum_k u_hat(xi_k) exp(i xi_k . x) (dxi / 2pi)^n`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Largest number of grid points accepted by [`Grid::new`].
pub const MAX_POINTS: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    half_width: f64,
    points: usize,
}

impl Grid {
    pub fn new(dim: usize, half_width: f64, points: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be at least 1".into()));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidGrid(format!("half-width must be positive, got {half_width}")));
        }
        if points % 2 != 0 {
            return Err(Error::InvalidGrid(format!("points per axis must be even, got {points}")));
        }
        if points < 4 {
            return Err(Error::InvalidGrid(format!("points per axis must be at least 4, got {points}")));
        }
        match u32::try_from(dim).ok().and_then(|d| points.checked_pow(d)) {
            Some(total) if total <= MAX_POINTS => {}
            _ => {
                return Err(Error::InvalidGrid(format!(
                    "{points}^{dim} points exceed the limit of {MAX_POINTS}"
                )))
            }
        }
        Ok(Self { dim, half_width, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    /// Total number of samples `N^n`.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spatial spacing `2L / N`.
    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    /// Frequency spacing `pi / L`.
    pub fn dxi(&self) -> f64 {
        PI / self.half_width
    }

    /// Spatial cell volume `dx^n`.
    pub fn cell_volume(&self) -> f64 {
        self.dx().powi(self.dim as i32)
    }

    /// Spectral measure per frequency sample, `(dxi / 2pi)^n = (2L)^{-n}`.
    pub fn spectral_cell_volume(&self) -> f64 {
        (self.dxi() / (2.0 * PI)).powi(self.dim as i32)
    }

    /// Largest representable frequency magnitude per axis, `pi / dx`.
    pub fn band_edge(&self) -> f64 {
        PI / self.dx()
    }

    /// Signed index `i - N/2` of an axis position.
    pub fn signed_index(&self, i: usize) -> i64 {
        i as i64 - (self.points / 2) as i64
    }

    pub fn axis_coordinates(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.points).map(|i| self.signed_index(i) as f64 * dx).collect()
    }

    pub fn axis_frequencies(&self) -> Vec<f64> {
        let dxi = self.dxi();
        (0..self.points).map(|i| self.signed_index(i) as f64 * dxi).collect()
    }

    /// Decomposes a flat index into per-axis positions (first axis slowest).
    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = flat % self.points;
            flat /= self.points;
        }
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim];
        self.multi_index(flat, &mut idx);
        idx.iter().map(|&i| self.signed_index(i) as f64 * self.dx()).collect()
    }

    pub fn frequency(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim];
        self.multi_index(flat, &mut idx);
        idx.iter().map(|&i| self.signed_index(i) as f64 * self.dxi()).collect()
    }

    /// All spatial points in storage order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|j| self.point(j)).collect()
    }

    /// All frequencies in storage order.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.frequency(k)).collect()
    }

    /// True when any axis of the frequency sample sits on the unpaired
    /// Nyquist index `-N/2`.
    pub fn is_nyquist(&self, flat: usize) -> bool {
        let mut idx = vec![0; self.dim];
        self.multi_index(flat, &mut idx);
        idx.iter().any(|&i| i == 0)
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Japanese bracket `<x> = (1 + |x|^2)^{1/2}`.
pub fn japanese(x: &[f64]) -> f64 {
    (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// Pointwise weight `<x_j>^m` over the spatial grid.
pub fn weight_values(grid: &Grid, m: f64) -> Vec<f64> {
    (0..grid.len()).map(|j| japanese(&grid.point(j)).powf(m)).collect()
}

fn check_values(grid: &Grid, values: &[Complex64], what: &'static str) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), got: values.len() });
    }
    if let Some(index) = values.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::NonFinite { what, index });
    }
    Ok(())
}

/// Complex samples over the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<Complex64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<Complex64>) -> Result<Self> {
        check_values(&grid, &values, "field value")?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![Complex64::new(0.0, 0.0); grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> Complex64) -> Result<Self> {
        let values = (0..grid.len()).map(|j| f(&grid.point(j))).collect();
        Self::new(grid, values)
    }

    pub fn from_real_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        Self::from_fn(grid, |x| Complex64::new(f(x), 0.0))
    }

    /// Builds a field without the finiteness scan; for outputs of operations
    /// on already validated data.
    pub(crate) fn from_parts(grid: Grid, values: Vec<Complex64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    /// Discrete inner product `sum_j u_j conj(v_j) dx^n`.
    pub fn inner(&self, other: &Field) -> Complex64 {
        let s: Complex64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b.conj()).sum();
        s * self.grid.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn scaled(&self, c: Complex64) -> Field {
        Field::from_parts(self.grid, self.values.iter().map(|v| v * c).collect())
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        Ok(Field::from_parts(
            self.grid,
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        Ok(Field::from_parts(
            self.grid,
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Pointwise product with real weights.
    pub fn weighted(&self, weights: &[f64]) -> Field {
        Field::from_parts(self.grid, self.values.iter().zip(weights).map(|(v, w)| v * *w).collect())
    }

    pub fn conj(&self) -> Field {
        Field::from_parts(self.grid, self.values.iter().map(|v| v.conj()).collect())
    }

    /// Largest pointwise distance to `other`.
    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// Complex samples over the frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    values: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(grid: Grid, values: Vec<Complex64>) -> Result<Self> {
        check_values(&grid, &values, "spectral value")?;
        Ok(Self { grid, values })
    }

    pub(crate) fn from_parts(grid: Grid, values: Vec<Complex64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    /// `(sum_k |u_hat_k|^2 (dxi / 2pi)^n)^{1/2}`, equal to the spatial norm by
    /// Plancherel.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.spectral_cell_volume())
            .sqrt()
    }

    /// Fraction of spectral energy carried by frequencies whose largest
    /// component lies in the outer 10% of the band.
    pub fn outer_shell_fraction(&self) -> f64 {
        let half = (self.grid.points_per_axis() / 2) as f64;
        let threshold = 0.9 * half;
        let mut idx = vec![0; self.grid.dim()];
        let (mut outer, mut total) = (0.0, 0.0);
        for (k, v) in self.values.iter().enumerate() {
            self.grid.multi_index(k, &mut idx);
            let e = v.norm_sqr();
            total += e;
            if idx.iter().any(|&i| (self.grid.signed_index(i) as f64).abs() >= threshold) {
                outer += e;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            outer / total
        }
    }
}

type PlanPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, PlanPair>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plans(len: usize) -> PlanPair {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry(len)
            .or_insert_with(|| (planner.plan_fft_forward(len), planner.plan_fft_inverse(len)))
            .clone()
    })
}

/// Unnormalized n-dimensional DFT over centered storage:
/// `out_m = sum_k in_k exp(-+ 2 pi i m.k / N)` with signed indices on both
/// sides. `inverse` selects the `+` sign.
pub(crate) fn dft_centered(values: &mut [Complex64], dim: usize, points: usize, inverse: bool) {
    let (fwd, inv) = plans(points);
    let plan = if inverse { inv } else { fwd };
    let half = points / 2;
    let total = values.len();
    let mut line = vec![Complex64::new(0.0, 0.0); points];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    for axis in 0..dim {
        let stride = points.pow((dim - 1 - axis) as u32);
        let block = stride * points;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                // Rolling by N/2 maps signed index s to storage slot s mod N.
                for (i, slot) in line.iter_mut().enumerate() {
                    *slot = values[base + ((i + half) % points) * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    values[base + ((i + half) % points) * stride] = *v;
                }
            }
        }
    }
}

/// Continuum-normalized forward transform.
pub fn forward_transform(f: &Field) -> SpectralField {
    let grid = *f.grid();
    let mut values = f.values().to_vec();
    dft_centered(&mut values, grid.dim(), grid.points_per_axis(), false);
    let scale = grid.cell_volume();
    values.iter_mut().for_each(|v| *v *= scale);
    SpectralField::from_parts(grid, values)
}

/// Continuum-normalized inverse transform.
pub fn inverse_transform(g: &SpectralField) -> Field {
    let grid = *g.grid();
    let mut values = g.values().to_vec();
    dft_centered(&mut values, grid.dim(), grid.points_per_axis(), true);
    let scale = grid.spectral_cell_volume();
    values.iter_mut().for_each(|v| *v *= scale);
    Field::from_parts(grid, values)
}

/// `(sum_j |<x_j>^m f(x_j)|^2 dx^n)^{1/2}`.
pub fn weighted_norm(f: &Field, m: f64) -> f64 {
    let grid = f.grid();
    let s: f64 = f
        .values()
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let w = japanese(&grid.point(j)).powf(m);
            (w * v.norm()).powi(2)
        })
        .sum();
    (s * grid.cell_volume()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Grid, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        Field::new(grid, values).unwrap()
    }

    #[test]
    fn grid_spacings() {
        let g = Grid::new(1, PI, 8).unwrap();
        assert!((g.dx() - PI / 4.0).abs() < 1e-15);
        assert!((g.dxi() - 1.0).abs() < 1e-15);
        let g = Grid::new(2, 10.0, 64).unwrap();
        assert!((g.dx() - 0.3125).abs() < 1e-15);
        assert!((g.dxi() - PI / 10.0).abs() < 1e-15);
        assert_eq!(g.len(), 4096);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(Grid::new(1, 1.0, 7), Err(Error::InvalidGrid(_))));
        assert!(Grid::new(1, 0.0, 8).is_err());
        assert!(Grid::new(1, -1.0, 8).is_err());
        assert!(Grid::new(0, 1.0, 8).is_err());
        assert!(Grid::new(1, 1.0, 2).is_err());
        assert!(Grid::new(8, 1.0, 1024).is_err());
    }

    #[test]
    fn frequency_range_is_symmetric_with_one_nyquist() {
        let g = Grid::new(1, 2.0, 8).unwrap();
        let f = g.axis_frequencies();
        assert!((f[0] + 4.0 * g.dxi()).abs() < 1e-14);
        assert!((f[7] - 3.0 * g.dxi()).abs() < 1e-14);
        assert!(g.is_nyquist(0));
        assert!(!g.is_nyquist(1));
    }

    #[test]
    fn constant_field_is_a_dc_spike() {
        let g = Grid::new(2, 1.5, 8).unwrap();
        let f = Field::from_real_fn(g, |_| 1.0).unwrap();
        let s = forward_transform(&f);
        let dc = g.len() / 2 + g.points_per_axis() / 2;
        assert!(g.frequency(dc).iter().all(|v| *v == 0.0));
        for (k, v) in s.values().iter().enumerate() {
            let expected = if k == dc { 9.0 } else { 0.0 };
            assert!((v - expected).norm() < 1e-12, "k={k} v={v}");
        }
    }

    #[test]
    fn single_mode_is_a_delta() {
        let g = Grid::new(1, 3.0, 16).unwrap();
        let k = 3.0 * g.dxi();
        let f = Field::from_fn(g, |x| Complex64::from_polar(1.0, k * x[0])).unwrap();
        let s = forward_transform(&f);
        for (i, v) in s.values().iter().enumerate() {
            let expected = if i == 8 + 3 { 6.0 } else { 0.0 };
            assert!((v - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_plancherel() {
        for (dim, n) in [(1, 16), (2, 8), (3, 4)] {
            let g = Grid::new(dim, 2.5, n).unwrap();
            let f = random_field(g, 7);
            let s = forward_transform(&f);
            let back = inverse_transform(&s);
            let err = back.sub(&f).unwrap().norm() / f.norm();
            assert!(err < 1e-12, "round trip {err}");
            assert!((s.norm() - f.norm()).abs() / f.norm() < 1e-12);
        }
    }

    #[test]
    fn weighted_norm_m0_is_plain_norm() {
        let g = Grid::new(2, 4.0, 8).unwrap();
        let f = random_field(g, 3);
        assert!((weighted_norm(&f, 0.0) - f.norm()).abs() < 1e-13);
    }

    #[test]
    fn weighted_norm_of_origin_delta() {
        let g = Grid::new(2, 4.0, 8).unwrap();
        let origin = 4 * 8 + 4;
        assert!(g.point(origin).iter().all(|v| *v == 0.0));
        let mut values = vec![Complex64::new(0.0, 0.0); g.len()];
        values[origin] = Complex64::new(1.0, 0.0);
        let f = Field::new(g, values).unwrap();
        for m in [-2.0, 0.5, 3.0] {
            assert!((weighted_norm(&f, m) - g.dx()).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_norm_of_gaussian_matches_quadrature() {
        // Adaptive Simpson on int <x>^2 exp(-x^2) over [-10, 10] (tails are 1e-44).
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64, whole: f64, depth: u32) -> f64 {
            let c = 0.5 * (a + b);
            let left = (c - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + c)) + f(c));
            let right = (b - c) / 6.0 * (f(c) + 4.0 * f(0.5 * (c + b)) + f(b));
            if depth == 0 || (left + right - whole).abs() < 15.0 * eps {
                left + right + (left + right - whole) / 15.0
            } else {
                simpson(f, a, c, eps / 2.0, left, depth - 1) + simpson(f, c, b, eps / 2.0, right, depth - 1)
            }
        }
        let integrand = |x: f64| (1.0 + x * x) * (-x * x).exp();
        let whole = 20.0 / 6.0 * (integrand(-10.0) + 4.0 * integrand(0.0) + integrand(10.0));
        let oracle = simpson(&integrand, -10.0, 10.0, 1e-14, whole, 50).sqrt();
        let g = Grid::new(1, 10.0, 256).unwrap();
        let f = Field::from_real_fn(g, |x| (-x[0] * x[0] / 2.0).exp()).unwrap();
        let got = weighted_norm(&f, 1.0);
        assert!((got - oracle).abs() / oracle < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn weights_are_pointwise_monotone_in_m() {
        let g = Grid::new(2, 3.0, 8).unwrap();
        let lo = weight_values(&g, -0.5);
        let hi = weight_values(&g, 1.5);
        assert!(lo.iter().zip(&hi).all(|(a, b)| b >= a));
    }

    #[test]
    fn field_rejects_nan() {
        let g = Grid::new(1, 1.0, 4).unwrap();
        let mut v = vec![Complex64::new(0.0, 0.0); 4];
        v[2] = Complex64::new(f64::NAN, 0.0);
        assert_eq!(Field::new(g, v), Err(Error::NonFinite { what: "field value", index: 2 }));
    }
}
