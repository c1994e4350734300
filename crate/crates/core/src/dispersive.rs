//! The generalized Schrodinger flow `i u_t + p(D)^2 u = 0`, its local
//! smoothing functional and constant, the Egorov residual of the Gauss-map
//! transform, and the multiplier `M = <D>^{1/2} (1 + p(D)^2)^{-1/4}`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fio::{CanonicalTransform, Direction, Multiplier, Operator, TAIL_THRESHOLD};
use crate::lattice::{forward_transform, inverse_transform, japanese, weight_values, Field, Grid, SpectralField};
use crate::offgrid::EvalPath;
use crate::symbol::{gauss_phase, HomogeneousSymbol};

/// Uniform nodes `t_j = j T / (N_t - 1)` with trapezoidal weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeWindow {
    horizon: f64,
    nodes: usize,
}

impl TimeWindow {
    pub fn new(horizon: f64, nodes: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter { name: "T", reason: format!("must be positive, got {horizon}") });
        }
        if nodes < 2 {
            return Err(Error::InvalidParameter { name: "N_t", reason: format!("need at least 2 nodes, got {nodes}") });
        }
        Ok(Self { horizon, nodes })
    }

    /// `rate` intervals per unit time, rounded to the nearest whole count.
    pub fn with_rate(horizon: f64, rate: f64) -> Result<Self> {
        let intervals = (horizon * rate).round().max(1.0) as usize;
        Self::new(horizon, intervals + 1)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn step(&self) -> f64 {
        self.horizon / (self.nodes - 1) as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes).map(|j| j as f64 * self.step()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.nodes).map(|j| if j == 0 || j + 1 == self.nodes { 0.5 * h } else { h }).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SpaceTimeField {
    pub window: TimeWindow,
    pub slices: Vec<Field>,
}

fn symbol_squared(p: &HomogeneousSymbol, grid: &Grid) -> Result<Vec<f64>> {
    if p.dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: grid.dim(), got: p.dim() });
    }
    (0..grid.len())
        .map(|k| {
            let v = p.eval(&grid.frequency(k)).powi(2);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteMultiplier { frequency: grid.frequency(k) })
            }
        })
        .collect()
}

fn evolve(g: &SpectralField, p2: &[f64], t: f64) -> SpectralField {
    let values = g.values().iter().zip(p2).map(|(v, q)| v * Complex64::from_polar(1.0, t * q)).collect();
    SpectralField::from_parts(*g.grid(), values)
}

/// `u(t_j) = F^{-1}[e^{i t_j p(xi)^2} f_hat]`.
pub fn propagate(p: &HomogeneousSymbol, f: &Field, window: TimeWindow) -> Result<SpaceTimeField> {
    let p2 = symbol_squared(p, f.grid())?;
    let fh = forward_transform(f);
    let slices = window.times().par_iter().map(|&t| inverse_transform(&evolve(&fh, &p2, t))).collect();
    Ok(SpaceTimeField { window, slices })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivativeKind {
    /// `<D>^{1/2}`
    Inhomogeneous,
    /// `|D|^{1/2}`, zero at the zero frequency.
    Homogeneous,
}

impl DerivativeKind {
    fn eval(self, xi: &[f64]) -> f64 {
        match self {
            Self::Inhomogeneous => japanese(xi).sqrt(),
            Self::Homogeneous => xi.iter().map(|v| v * v).sum::<f64>().sqrt().sqrt(),
        }
    }

    fn values(self, grid: &Grid) -> Vec<f64> {
        (0..grid.len()).map(|k| self.eval(&grid.frequency(k))).collect()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !delta.is_finite() {
        return Err(Error::InvalidParameter { name: "delta", reason: "must be finite".into() });
    }
    Ok(())
}

/// `(sum_j w_j |<x>^{-delta} D^{1/2} u(t_j)|^2)^{1/2}` with the weight applied
/// after the derivative.
pub fn smoothing_functional(
    p: &HomogeneousSymbol,
    f: &Field,
    window: TimeWindow,
    delta: f64,
    kind: DerivativeKind,
) -> Result<f64> {
    check_delta(delta)?;
    let grid = *f.grid();
    let p2 = symbol_squared(p, &grid)?;
    let d = kind.values(&grid);
    let w = weight_values(&grid, -delta);
    let mut g = forward_transform(f);
    g.values_mut().iter_mut().zip(&d).for_each(|(v, s)| *v *= s);
    let times = window.times();
    // Collected before summing so the result does not depend on scheduling.
    let terms: Vec<f64> = times
        .par_iter()
        .zip(window.weights())
        .map(|(&t, wt)| wt * inverse_transform(&evolve(&g, &p2, t)).weighted(&w).norm().powi(2))
        .collect();
    Ok(terms.iter().sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothingConstant {
    pub constant: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Phases are advanced by one-step multiplication and resynchronized with
/// exact values this often.
const PHASE_RESYNC: usize = 128;

/// Sum over time nodes of `w_j e^{-i t_j L} D W^2 D e^{i t_j L}` applied to a
/// spectral vector.
struct NormalOperator {
    grid: Grid,
    p2: Vec<f64>,
    d: Vec<f64>,
    w2: Vec<f64>,
    window: TimeWindow,
}

impl NormalOperator {
    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let times = self.window.times();
        let weights = self.window.weights();
        let step: Vec<Complex64> = self.p2.iter().map(|q| Complex64::from_polar(1.0, self.window.step() * q)).collect();
        let dx: Vec<Complex64> = x.iter().zip(&self.d).map(|(v, s)| v * s).collect();
        let mut phase: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); x.len()];
        let mut acc = vec![Complex64::new(0.0, 0.0); x.len()];
        for (j, (&t, &wt)) in times.iter().zip(&weights).enumerate() {
            if j % PHASE_RESYNC == 0 {
                phase.iter_mut().zip(&self.p2).for_each(|(ph, q)| *ph = Complex64::from_polar(1.0, t * q));
            }
            let spec = dx.iter().zip(&phase).map(|(a, b)| a * b).collect();
            let mut u = inverse_transform(&SpectralField::from_parts(self.grid, spec)).into_values();
            u.iter_mut().zip(&self.w2).for_each(|(v, w)| *v *= w);
            let back = forward_transform(&Field::from_parts(self.grid, u));
            for ((a, b), ph) in acc.iter_mut().zip(back.values()).zip(&phase) {
                *a += b * ph.conj() * wt;
            }
            phase.iter_mut().zip(&step).for_each(|(ph, s)| *ph *= s);
        }
        acc.iter_mut().zip(&self.d).for_each(|(v, s)| *v *= s);
        acc
    }
}

/// Operator norm of `f -> (t -> <x>^{-delta} D^{1/2} e^{itL} f)` from `L^2`
/// into the discrete space-time `L^2` of `window`.
pub fn smoothing_constant(
    p: &HomogeneousSymbol,
    grid: Grid,
    window: TimeWindow,
    delta: f64,
    kind: DerivativeKind,
    seed: u64,
    options: PowerOptions,
) -> Result<SmoothingConstant> {
    check_delta(delta)?;
    let op = NormalOperator {
        grid,
        p2: symbol_squared(p, &grid)?,
        d: kind.values(&grid),
        w2: weight_values(&grid, -2.0 * delta),
        window,
    };
    // The spectral and spatial norms differ by a fixed factor, so the
    // eigenvalue of the normal operator is the same in either picture.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Complex64> = (0..grid.len())
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
        .collect();
    let norm = |v: &[Complex64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let n0 = norm(&x);
    x.iter_mut().for_each(|v| *v /= n0);
    let mut prev = f64::NAN;
    for it in 1..=options.max_iters {
        let z = op.apply(&x);
        let zn = norm(&z);
        if zn == 0.0 {
            return Ok(SmoothingConstant { constant: 0.0, iterations: it, converged: true });
        }
        let est = zn.sqrt();
        if (est - prev).abs() <= options.tol * est {
            return Ok(SmoothingConstant { constant: est, iterations: it, converged: true });
        }
        prev = est;
        x = z.into_iter().map(|v| v / zn).collect();
    }
    Ok(SmoothingConstant { constant: prev, iterations: options.max_iters, converged: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonRow {
    pub horizon: f64,
    pub nodes: usize,
    pub constant: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Smoothing constants for several horizons at a fixed node rate.
#[allow(clippy::too_many_arguments)]
pub fn horizon_sweep(
    p: &HomogeneousSymbol,
    grid: Grid,
    horizons: &[f64],
    rate: f64,
    delta: f64,
    kind: DerivativeKind,
    seed: u64,
    options: PowerOptions,
) -> Result<Vec<HorizonRow>> {
    horizons
        .iter()
        .map(|&t| {
            let window = TimeWindow::with_rate(t, rate)?;
            let c = smoothing_constant(p, grid, window, delta, kind, seed, options)?;
            Ok(HorizonRow {
                horizon: t,
                nodes: window.nodes(),
                constant: c.constant,
                iterations: c.iterations,
                converged: c.converged,
            })
        })
        .collect()
}

/// `max_{i,j} |C_i - C_j| / min(C_i, C_j)`.
pub fn max_pairwise_deviation(values: &[f64]) -> f64 {
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        0.0
    } else {
        (hi - lo) / lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EgorovReport {
    pub residual: f64,
    pub tail_fraction: f64,
    pub warning: Option<String>,
    pub fast_path: bool,
}

/// `|(T_psi (-Laplacian) T_psi^{-1} - p(D)^2) u| / |u|` for `psi = gauss_phase(p)`.
pub fn egorov_residual(p: &HomogeneousSymbol, u: &Field, path: EvalPath) -> Result<EgorovReport> {
    let grid = *u.grid();
    let psi = gauss_phase(p)?;
    let forward = CanonicalTransform::new(grid, &psi, Direction::Forward, path)?;
    let inverse = CanonicalTransform::new(grid, &psi, Direction::Inverse, path)?;
    let laplacian = Multiplier::real(grid, |xi| xi.iter().map(|v| v * v).sum(), "|xi|^2")?;
    let lp = Multiplier::real(grid, |xi| p.eval(xi).powi(2), "p^2")?;
    let lhs = forward.apply(&laplacian.apply(&inverse.apply(u)?)?)?;
    let rhs = lp.apply(u)?;
    let tail_fraction = forward_transform(u).outer_shell_fraction();
    Ok(EgorovReport {
        residual: lhs.sub(&rhs)?.norm() / u.norm(),
        tail_fraction,
        warning: (tail_fraction > TAIL_THRESHOLD)
            .then(|| format!("spectral tail fraction {tail_fraction:.3e} exceeds {TAIL_THRESHOLD:e}")),
        fast_path: forward.uses_fast_path() || inverse.uses_fast_path(),
    })
}

pub fn m_multiplier(p: &HomogeneousSymbol, grid: Grid) -> Result<Multiplier> {
    Multiplier::real(grid, |xi| japanese(xi).sqrt() * (1.0 + p.eval(xi).powi(2)).powf(-0.25), "M")
}

/// `M u` with `M = <D>^{1/2} (1 + p(D)^2)^{-1/4}`.
pub fn apply_m(p: &HomogeneousSymbol, u: &Field) -> Result<Field> {
    m_multiplier(p, *u.grid())?.apply(u)
}

/// The inhomogeneous smoothing functional of `e^{itL_p} f`, evaluated through
/// the transform: `g = T_psi^{-1} f`, `v(t) = e^{-it Laplacian} g`, and
/// `<x>^{-delta} <D>^{1/2} u = <x>^{-delta} M T_psi <x>^{delta} (<x>^{-delta} <D>^{1/2} v)`.
pub fn smoothing_functional_via_transform(
    p: &HomogeneousSymbol,
    f: &Field,
    window: TimeWindow,
    delta: f64,
    path: EvalPath,
) -> Result<f64> {
    check_delta(delta)?;
    let grid = *f.grid();
    let psi = gauss_phase(p)?;
    let forward = CanonicalTransform::new(grid, &psi, Direction::Forward, path)?;
    let inverse = CanonicalTransform::new(grid, &psi, Direction::Inverse, path)?;
    let m = m_multiplier(p, grid)?;
    let classical = HomogeneousSymbol::euclidean(grid.dim());
    let q2 = symbol_squared(&classical, &grid)?;
    let d = DerivativeKind::Inhomogeneous.values(&grid);
    let down = weight_values(&grid, -delta);
    let up = weight_values(&grid, delta);
    let gh = forward_transform(&inverse.apply(f)?);
    let times = window.times();
    let terms: Vec<f64> = times
        .par_iter()
        .map(|&t| -> Result<f64> {
            let mut vh = evolve(&gh, &q2, t);
            vh.values_mut().iter_mut().zip(&d).for_each(|(v, s)| *v *= s);
            let sigma_v = inverse_transform(&vh).weighted(&down);
            let lifted = sigma_v.weighted(&up);
            let out = m.apply(&forward.apply(&lifted)?)?.weighted(&down);
            Ok(out.norm().powi(2))
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().zip(window.weights()).map(|(a, w)| a * w).sum::<f64>().sqrt())
}
