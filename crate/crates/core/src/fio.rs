//! Linear operators on grid fields: Fourier multipliers, pointwise weights,
//! canonical transforms `T_psi u = F^{-1}[u_hat(psi(xi))]`, pseudo-differential
//! operators, oscillatory integrals and Fourier integral operators.
//!
//! Every operator maps a grid to itself and its adjoint is taken with respect
//! to the `dx^n`-weighted inner product. Because both sides carry the same
//! weight, the adjoint is the conjugate transpose of the discrete map.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{dft_centered, forward_transform, inverse_transform, japanese, Field, Grid, SpectralField};
use crate::offgrid::{EvalPath, OffGridEvaluator};
use crate::symbol::CanonicalMap;

/// Spectral energy fraction in the outer 10% shell above which a transform
/// result carries a warning.
pub const TAIL_THRESHOLD: f64 = 1e-6;
/// Largest dense kernel (in entries) any operator will build.
pub const DENSE_LIMIT: usize = 1 << 22;
/// Largest grid for the full-arity FIO triple sum (one dimension only).
pub const FULL_ARITY_MAX_POINTS: usize = 128;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub trait Operator: Send + Sync {
    fn grid(&self) -> Grid;
    fn apply(&self, u: &Field) -> Result<Field>;
    fn apply_adjoint(&self, v: &Field) -> Result<Field>;
    fn label(&self) -> String;
}

pub type OperatorHandle = Arc<dyn Operator>;

fn check_grid(op: &Grid, u: &Field) -> Result<()> {
    op.check_same(u.grid())
}

/// Dense row-major matrix acting on raw value vectors.
#[derive(Debug, Clone)]
struct Kernel {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl Kernel {
    fn build(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Complex64 + Sync) -> Result<Self> {
        guard_dense(rows, cols)?;
        let data = (0..rows)
            .into_par_iter()
            .flat_map_iter(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Ok(Self { rows, cols, data })
    }

    fn mul(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.data.par_chunks(self.cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn mul_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        (0..self.cols)
            .into_par_iter()
            .map(|j| (0..self.rows).map(|i| self.data[i * self.cols + j].conj() * y[i]).sum())
            .collect()
    }
}

fn guard_dense(rows: usize, cols: usize) -> Result<()> {
    let entries = rows as f64 * cols as f64;
    if entries > DENSE_LIMIT as f64 {
        return Err(Error::TooExpensive {
            cost: entries,
            limit: DENSE_LIMIT as f64,
            reason: "dense kernel entries".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct Identity {
    grid: Grid,
}

impl Identity {
    pub fn new(grid: Grid) -> Self {
        Self { grid }
    }
}

impl Operator for Identity {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        check_grid(&self.grid, u)?;
        Ok(u.clone())
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        self.apply(v)
    }
    fn label(&self) -> String {
        "identity".into()
    }
}

/// `a(D) = F^{-1} a(xi) F`.
#[derive(Debug, Clone)]
pub struct Multiplier {
    grid: Grid,
    values: Vec<Complex64>,
    label: String,
}

impl Multiplier {
    /// Samples `a` at every grid frequency; homogeneous symbols must return
    /// their chosen value at `xi = 0` themselves.
    pub fn new(grid: Grid, a: impl Fn(&[f64]) -> Complex64, label: impl Into<String>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for k in 0..grid.len() {
            let xi = grid.frequency(k);
            let v = a(&xi);
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::NonFiniteMultiplier { frequency: xi });
            }
            values.push(v);
        }
        Ok(Self { grid, values, label: label.into() })
    }

    pub fn real(grid: Grid, a: impl Fn(&[f64]) -> f64, label: impl Into<String>) -> Result<Self> {
        Self::new(grid, |xi| Complex64::new(a(xi), 0.0), label)
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn apply_spectral(&self, g: &mut SpectralField) {
        g.values_mut().iter_mut().zip(&self.values).for_each(|(v, a)| *v *= a);
    }

    fn run(&self, u: &Field, conj: bool) -> Result<Field> {
        check_grid(&self.grid, u)?;
        let mut g = forward_transform(u);
        g.values_mut()
            .iter_mut()
            .zip(&self.values)
            .for_each(|(v, a)| *v *= if conj { a.conj() } else { *a });
        Ok(inverse_transform(&g))
    }
}

impl Operator for Multiplier {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        self.run(u, false)
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        self.run(v, true)
    }
    fn label(&self) -> String {
        format!("multiplier({})", self.label)
    }
}

pub fn apply_multiplier(a: impl Fn(&[f64]) -> Complex64, u: &Field) -> Result<Field> {
    Multiplier::new(*u.grid(), a, "")?.apply(u)
}

/// Multiplication by a function of `x`.
#[derive(Debug, Clone)]
pub struct PointwiseWeight {
    grid: Grid,
    values: Vec<Complex64>,
    label: String,
}

impl PointwiseWeight {
    pub fn new(grid: Grid, b: impl Fn(&[f64]) -> Complex64, label: impl Into<String>) -> Result<Self> {
        let values = Field::from_fn(grid, b)?.into_values();
        Ok(Self { grid, values, label: label.into() })
    }

    pub fn real(grid: Grid, b: impl Fn(&[f64]) -> f64, label: impl Into<String>) -> Result<Self> {
        Self::new(grid, |x| Complex64::new(b(x), 0.0), label)
    }

    pub fn from_values(grid: Grid, values: Vec<Complex64>, label: impl Into<String>) -> Result<Self> {
        let values = Field::new(grid, values)?.into_values();
        Ok(Self { grid, values, label: label.into() })
    }

    /// `<x>^m`.
    pub fn japanese(grid: Grid, m: f64) -> Self {
        Self::real(grid, |x| japanese(x).powf(m), format!("<x>^{m}")).expect("weights are finite")
    }

    /// Indicator of the half-open cube `[-h, h)^n`.
    pub fn cube_indicator(grid: Grid, h: f64) -> Self {
        let eps = 1e-9 * grid.dx();
        Self::real(
            grid,
            |x| if x.iter().all(|v| *v >= -h - eps && *v < h - eps) { 1.0 } else { 0.0 },
            format!("1[-{h},{h})"),
        )
        .expect("indicator is finite")
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
}

impl Operator for PointwiseWeight {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        check_grid(&self.grid, u)?;
        let v = u.values().iter().zip(&self.values).map(|(a, b)| a * b).collect();
        Ok(Field::from_parts(self.grid, v))
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        check_grid(&self.grid, v)?;
        let w = v.values().iter().zip(&self.values).map(|(a, b)| a * b.conj()).collect();
        Ok(Field::from_parts(self.grid, w))
    }
    fn label(&self) -> String {
        format!("weight({})", self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

/// Result of a canonical transform together with the input's spectral tail.
#[derive(Debug, Clone)]
pub struct TransformOutput {
    pub field: Field,
    pub tail_fraction: f64,
    pub warning: Option<String>,
}

fn tail_warning(fraction: f64) -> Option<String> {
    (fraction > TAIL_THRESHOLD).then(|| {
        format!("spectral tail fraction {fraction:.3e} exceeds {TAIL_THRESHOLD:e}; off-grid evaluation may be inaccurate")
    })
}

/// `T_psi u = F^{-1}[u_hat(psi(xi_k))]` (or `psi^{-1}` for the inverse).
///
/// `u_hat` at off-grid points is the exact trigonometric interpolant of the
/// samples. Output frequencies whose target leaves the open band
/// `|eta_a| < pi/dx`, and the unpaired Nyquist frequencies, are set to zero.
#[derive(Debug, Clone)]
pub struct CanonicalTransform {
    grid: Grid,
    direction: Direction,
    label: String,
    rows: Vec<usize>,
    evaluator: OffGridEvaluator,
}

impl CanonicalTransform {
    pub fn new(grid: Grid, map: &CanonicalMap, direction: Direction, path: EvalPath) -> Result<Self> {
        if map.dim() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), got: map.dim() });
        }
        let edge = grid.band_edge();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for k in 0..grid.len() {
            if grid.is_nyquist(k) {
                continue;
            }
            let xi = grid.frequency(k);
            let eta = match direction {
                Direction::Forward => map.forward(&xi),
                Direction::Inverse => map.inverse(&xi)?,
            };
            if eta.iter().all(|e| e.abs() < edge) {
                rows.push(k);
                targets.extend(eta);
            }
        }
        let evaluator = OffGridEvaluator::new(grid, targets, path)?;
        let label = match direction {
            Direction::Forward => format!("T[{}]", map.label()),
            Direction::Inverse => format!("T^-1[{}]", map.label()),
        };
        Ok(Self { grid, direction, label, rows, evaluator })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn uses_fast_path(&self) -> bool {
        self.evaluator.uses_fast_path()
    }

    /// Number of output frequencies that were zeroed.
    pub fn dropped_frequencies(&self) -> usize {
        self.grid.len() - self.rows.len()
    }

    pub fn apply_with_report(&self, u: &Field) -> Result<TransformOutput> {
        let tail_fraction = forward_transform(u).outer_shell_fraction();
        let field = self.apply(u)?;
        Ok(TransformOutput { field, tail_fraction, warning: tail_warning(tail_fraction) })
    }
}

impl Operator for CanonicalTransform {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn apply(&self, u: &Field) -> Result<Field> {
        check_grid(&self.grid, u)?;
        let s = self.evaluator.evaluate(u.values());
        let scale = self.grid.cell_volume();
        let mut spec = vec![ZERO; self.grid.len()];
        for (&k, v) in self.rows.iter().zip(s) {
            spec[k] = v * scale;
        }
        Ok(inverse_transform(&SpectralField::from_parts(self.grid, spec)))
    }

    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        check_grid(&self.grid, v)?;
        let vh = forward_transform(v);
        let picked: Vec<Complex64> = self.rows.iter().map(|&k| vh.values()[k]).collect();
        let scale = self.grid.spectral_cell_volume();
        let out = self.evaluator.adjoint(&picked).into_iter().map(|z| z * scale).collect();
        Ok(Field::from_parts(self.grid, out))
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

pub fn apply_canonical_transform(map: &CanonicalMap, u: &Field, direction: Direction) -> Result<TransformOutput> {
    CanonicalTransform::new(*u.grid(), map, direction, EvalPath::Auto)?.apply_with_report(u)
}

pub type SpaceFrequencyFn = Arc<dyn Fn(&[f64], &[f64]) -> Complex64 + Send + Sync>;
pub type SpaceFn = Arc<dyn Fn(&[f64]) -> Complex64 + Send + Sync>;
pub type FullAmplitudeFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Complex64 + Send + Sync>;
/// Real phase `phi(y, xi)` (or `phi(x, y)` for oscillatory integrals).
pub type PhaseFunction = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// `a(X,D)u(x) = (2 pi)^{-n} sum_k e^{i x.xi_k} a(x, xi_k) u_hat(xi_k) dxi^n`.
#[derive(Debug, Clone)]
pub struct Pseudo {
    grid: Grid,
    kernel: Kernel,
    label: String,
}

impl Pseudo {
    pub fn new(grid: Grid, a: impl Fn(&[f64], &[f64]) -> Complex64 + Sync, label: impl Into<String>) -> Result<Self> {
        let xs = grid.points();
        let xis = grid.frequencies();
        let s = grid.spectral_cell_volume();
        let kernel = Kernel::build(grid.len(), grid.len(), |j, k| {
            let phase: f64 = xs[j].iter().zip(&xis[k]).map(|(x, xi)| x * xi).sum();
            Complex64::from_polar(s, phase) * a(&xs[j], &xis[k])
        })?;
        finite_kernel(&kernel, "pseudo-differential kernel")?;
        Ok(Self { grid, kernel, label: label.into() })
    }
}

fn finite_kernel(k: &Kernel, what: &'static str) -> Result<()> {
    match k.data.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

impl Operator for Pseudo {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        check_grid(&self.grid, u)?;
        let uh = forward_transform(u);
        Ok(Field::from_parts(self.grid, self.kernel.mul(uh.values())))
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        check_grid(&self.grid, v)?;
        let mut g = self.kernel.mul_adjoint(v.values());
        dft_centered(&mut g, self.grid.dim(), self.grid.points_per_axis(), true);
        let scale = self.grid.cell_volume();
        Ok(Field::from_parts(self.grid, g.into_iter().map(|z| z * scale).collect()))
    }
    fn label(&self) -> String {
        format!("pseudo({})", self.label)
    }
}

pub fn apply_pseudo(a: impl Fn(&[f64], &[f64]) -> Complex64 + Sync, u: &Field) -> Result<Field> {
    Pseudo::new(*u.grid(), a, "")?.apply(u)
}

/// `I u(x_j) = sum_l e^{i phi(x_j, y_l)} a(x_j, y_l) u(y_l) dy^n`.
#[derive(Debug, Clone)]
pub struct Oscillatory {
    grid: Grid,
    kernel: Kernel,
    label: String,
}

impl Oscillatory {
    pub fn new(
        grid: Grid,
        phi: impl Fn(&[f64], &[f64]) -> f64 + Sync,
        a: impl Fn(&[f64], &[f64]) -> Complex64 + Sync,
        label: impl Into<String>,
    ) -> Result<Self> {
        let xs = grid.points();
        let w = grid.cell_volume();
        let kernel = Kernel::build(grid.len(), grid.len(), |j, l| {
            Complex64::from_polar(w, phi(&xs[j], &xs[l])) * a(&xs[j], &xs[l])
        })?;
        finite_kernel(&kernel, "oscillatory kernel")?;
        Ok(Self { grid, kernel, label: label.into() })
    }
}

impl Operator for Oscillatory {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        check_grid(&self.grid, u)?;
        Ok(Field::from_parts(self.grid, self.kernel.mul(u.values())))
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        check_grid(&self.grid, v)?;
        Ok(Field::from_parts(self.grid, self.kernel.mul_adjoint(v.values())))
    }
    fn label(&self) -> String {
        format!("oscillatory({})", self.label)
    }
}

pub fn apply_oscillatory(
    phi: impl Fn(&[f64], &[f64]) -> f64 + Sync,
    a: impl Fn(&[f64], &[f64]) -> Complex64 + Sync,
    u: &Field,
) -> Result<Field> {
    Oscillatory::new(*u.grid(), phi, a, "")?.apply(u)
}

/// Amplitude of `Tu(x) = int int e^{i(x.xi + phi(y,xi))} a u(y) dy dxi`, tagged by
/// the variables it depends on.
#[derive(Clone)]
pub enum Amplitude {
    /// `a(x, xi)`
    SpaceFrequency(SpaceFrequencyFn),
    /// `a(y, xi)`
    SourceFrequency(SpaceFrequencyFn),
    /// `a(x, y, xi)`; one dimension only.
    Full(FullAmplitudeFn),
    /// `a1(x, xi) a2(y)`
    ProductSource(SpaceFrequencyFn, SpaceFn),
    /// `a2(x) a1(y, xi)`
    ProductTarget(SpaceFn, SpaceFrequencyFn),
}

impl Amplitude {
    fn tag(&self) -> &'static str {
        match self {
            Self::SpaceFrequency(_) => "a(x,xi)",
            Self::SourceFrequency(_) => "a(y,xi)",
            Self::Full(_) => "a(x,y,xi)",
            Self::ProductSource(..) => "a1(x,xi)a2(y)",
            Self::ProductTarget(..) => "a2(x)a1(y,xi)",
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Dense(Kernel),
    Diagonal(Vec<Complex64>),
    /// `w -> (2L)^{-n} sum_k w_k e^{i xi_k.x_j}` on raw vectors.
    InverseFourier,
}

impl Stage {
    fn apply(&self, grid: &Grid, x: Vec<Complex64>) -> Vec<Complex64> {
        match self {
            Stage::Dense(k) => k.mul(&x),
            Stage::Diagonal(d) => x.iter().zip(d).map(|(a, b)| a * b).collect(),
            Stage::InverseFourier => fourier(grid, x, true),
        }
    }

    fn adjoint(&self, grid: &Grid, x: Vec<Complex64>) -> Vec<Complex64> {
        match self {
            Stage::Dense(k) => k.mul_adjoint(&x),
            Stage::Diagonal(d) => x.iter().zip(d).map(|(a, b)| a * b.conj()).collect(),
            Stage::InverseFourier => fourier(grid, x, false),
        }
    }
}

fn fourier(grid: &Grid, mut x: Vec<Complex64>, inverse: bool) -> Vec<Complex64> {
    dft_centered(&mut x, grid.dim(), grid.points_per_axis(), inverse);
    let s = grid.spectral_cell_volume();
    x.iter_mut().for_each(|v| *v *= s);
    x
}

/// A Fourier integral operator evaluated through the factorizations
/// `T = (2 pi)^n a(X,D) F^{-1} I` (amplitude in `x, xi`) and
/// `T = (2 pi)^n F^{-1} I` (amplitude in `y, xi`), where `I` is the
/// oscillatory map from `y` to `xi`. The full amplitude uses the triple sum.
#[derive(Debug, Clone)]
pub struct Fio {
    grid: Grid,
    stages: Vec<Stage>,
    scale: f64,
    label: String,
}

impl Fio {
    pub fn new(grid: Grid, phi: PhaseFunction, amplitude: Amplitude) -> Result<Self> {
        let n = grid.dim();
        let xs = grid.points();
        let xis = grid.frequencies();
        let dy = grid.cell_volume();
        let s = grid.spectral_cell_volume();
        let two_pi_n = (2.0 * PI).powi(n as i32);
        let source = |a: Option<&SpaceFrequencyFn>| {
            Kernel::build(grid.len(), grid.len(), |k, l| {
                let amp = a.map_or(Complex64::new(1.0, 0.0), |f| f(&xs[l], &xis[k]));
                Complex64::from_polar(dy, phi(&xs[l], &xis[k])) * amp
            })
        };
        let symbol = |a: &SpaceFrequencyFn| {
            Kernel::build(grid.len(), grid.len(), |j, k| {
                let phase: f64 = xs[j].iter().zip(&xis[k]).map(|(x, xi)| x * xi).sum();
                Complex64::from_polar(s, phase) * a(&xs[j], &xis[k])
            })
        };
        let diagonal = |b: &SpaceFn| xs.iter().map(|x| b(x)).collect::<Vec<_>>();
        let (stages, scale) = match &amplitude {
            Amplitude::SpaceFrequency(a) => (vec![Stage::Dense(source(None)?), Stage::Dense(symbol(a)?)], two_pi_n),
            Amplitude::SourceFrequency(a) => (vec![Stage::Dense(source(Some(a))?), Stage::InverseFourier], two_pi_n),
            Amplitude::ProductSource(a1, a2) => (
                vec![Stage::Diagonal(diagonal(a2)), Stage::Dense(source(None)?), Stage::Dense(symbol(a1)?)],
                two_pi_n,
            ),
            Amplitude::ProductTarget(a2, a1) => (
                vec![Stage::Dense(source(Some(a1))?), Stage::InverseFourier, Stage::Diagonal(diagonal(a2))],
                two_pi_n,
            ),
            Amplitude::Full(a) => {
                let np = grid.points_per_axis();
                if n != 1 || np > FULL_ARITY_MAX_POINTS {
                    let limit = (FULL_ARITY_MAX_POINTS as f64).powi(3);
                    return Err(Error::TooExpensive {
                        cost: (grid.len() as f64).powi(3),
                        limit,
                        reason: "full-arity amplitude needs n = 1 and N <= 128".into(),
                    });
                }
                let dxi = grid.dxi();
                let k = Kernel::build(grid.len(), grid.len(), |j, l| {
                    xis.iter()
                        .map(|xi| {
                            let phase = xs[j][0] * xi[0] + phi(&xs[l], xi);
                            Complex64::from_polar(dy * dxi, phase) * a(&xs[j], &xs[l], xi)
                        })
                        .sum()
                })?;
                (vec![Stage::Dense(k)], 1.0)
            }
        };
        for st in &stages {
            match st {
                Stage::Dense(k) => finite_kernel(k, "FIO kernel")?,
                Stage::Diagonal(d) => {
                    if let Some(index) = d.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
                        return Err(Error::NonFinite { what: "FIO amplitude", index });
                    }
                }
                Stage::InverseFourier => {}
            }
        }
        Ok(Self { grid, stages, scale, label: format!("fio({})", amplitude.tag()) })
    }
}

impl Operator for Fio {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        check_grid(&self.grid, u)?;
        let mut x = u.values().to_vec();
        for st in &self.stages {
            x = st.apply(&self.grid, x);
        }
        Ok(Field::from_parts(self.grid, x.into_iter().map(|z| z * self.scale).collect()))
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        check_grid(&self.grid, v)?;
        let mut x = v.values().to_vec();
        for st in self.stages.iter().rev() {
            x = st.adjoint(&self.grid, x);
        }
        Ok(Field::from_parts(self.grid, x.into_iter().map(|z| z * self.scale).collect()))
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

pub fn apply_fio(phi: PhaseFunction, a: Amplitude, u: &Field) -> Result<Field> {
    Fio::new(*u.grid(), phi, a)?.apply(u)
}

/// An explicit matrix on grid values.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    grid: Grid,
    kernel: Kernel,
    label: String,
}

impl DenseOperator {
    /// `matrix` is row-major with `grid.len()` rows and columns.
    pub fn new(grid: Grid, matrix: Vec<Complex64>, label: impl Into<String>) -> Result<Self> {
        let n = grid.len();
        if matrix.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: matrix.len() });
        }
        guard_dense(n, n)?;
        let kernel = Kernel { rows: n, cols: n, data: matrix };
        finite_kernel(&kernel, "matrix entry")?;
        Ok(Self { grid, kernel, label: label.into() })
    }

    pub fn matrix(&self) -> &[Complex64] {
        &self.kernel.data
    }
}

impl Operator for DenseOperator {
    fn grid(&self) -> Grid {
        self.grid
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        check_grid(&self.grid, u)?;
        Ok(Field::from_parts(self.grid, self.kernel.mul(u.values())))
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        check_grid(&self.grid, v)?;
        Ok(Field::from_parts(self.grid, self.kernel.mul_adjoint(v.values())))
    }
    fn label(&self) -> String {
        format!("dense({})", self.label)
    }
}

/// `ops[0] o ops[1] o ... o ops[last]`.
#[derive(Clone)]
pub struct Compose {
    ops: Vec<OperatorHandle>,
}

impl Compose {
    pub fn new(ops: Vec<OperatorHandle>) -> Result<Self> {
        check_family(&ops)?;
        Ok(Self { ops })
    }
}

fn check_family(ops: &[OperatorHandle]) -> Result<()> {
    let first = ops.first().ok_or(Error::InvalidParameter { name: "ops", reason: "empty".into() })?;
    for op in &ops[1..] {
        first.grid().check_same(&op.grid())?;
    }
    Ok(())
}

impl Operator for Compose {
    fn grid(&self) -> Grid {
        self.ops[0].grid()
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        let mut x = u.clone();
        for op in self.ops.iter().rev() {
            x = op.apply(&x)?;
        }
        Ok(x)
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        let mut x = v.clone();
        for op in &self.ops {
            x = op.apply_adjoint(&x)?;
        }
        Ok(x)
    }
    fn label(&self) -> String {
        self.ops.iter().map(|o| o.label()).collect::<Vec<_>>().join(" . ")
    }
}

#[derive(Clone)]
pub struct Sum {
    ops: Vec<OperatorHandle>,
}

impl Sum {
    pub fn new(ops: Vec<OperatorHandle>) -> Result<Self> {
        check_family(&ops)?;
        Ok(Self { ops })
    }
}

fn sum_fields(fields: Vec<Field>) -> Result<Field> {
    let mut it = fields.into_iter();
    let first = it.next().expect("nonempty");
    it.try_fold(first, |acc, f| acc.add(&f))
}

impl Operator for Sum {
    fn grid(&self) -> Grid {
        self.ops[0].grid()
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        sum_fields(self.ops.iter().map(|o| o.apply(u)).collect::<Result<_>>()?)
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        sum_fields(self.ops.iter().map(|o| o.apply_adjoint(v)).collect::<Result<_>>()?)
    }
    fn label(&self) -> String {
        self.ops.iter().map(|o| o.label()).collect::<Vec<_>>().join(" + ")
    }
}

#[derive(Clone)]
pub struct Scaled {
    factor: Complex64,
    op: OperatorHandle,
}

impl Scaled {
    pub fn new(factor: Complex64, op: OperatorHandle) -> Self {
        Self { factor, op }
    }
}

impl Operator for Scaled {
    fn grid(&self) -> Grid {
        self.op.grid()
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        Ok(self.op.apply(u)?.scaled(self.factor))
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        Ok(self.op.apply_adjoint(v)?.scaled(self.factor.conj()))
    }
    fn label(&self) -> String {
        format!("({}) * {}", self.factor, self.op.label())
    }
}

/// The adjoint of another operator.
#[derive(Clone)]
pub struct Adjoint {
    op: OperatorHandle,
}

impl Adjoint {
    pub fn new(op: OperatorHandle) -> Self {
        Self { op }
    }
}

impl Operator for Adjoint {
    fn grid(&self) -> Grid {
        self.op.grid()
    }
    fn apply(&self, u: &Field) -> Result<Field> {
        self.op.apply_adjoint(u)
    }
    fn apply_adjoint(&self, v: &Field) -> Result<Field> {
        self.op.apply(v)
    }
    fn label(&self) -> String {
        format!("({})*", self.op.label())
    }
}

/// Complex Gaussian samples with unit variance per point.
pub fn random_field(grid: Grid, rng: &mut ChaCha8Rng) -> Field {
    let values = (0..grid.len())
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im)
        })
        .collect();
    Field::from_parts(grid, values)
}

/// Largest relative defect of `A(au + bv) = aAu + bAv` over random probes.
pub fn linearity_defect(op: &dyn Operator, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = random_field(op.grid(), &mut rng);
        let v = random_field(op.grid(), &mut rng);
        let a = Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        let b = Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        let lhs = op.apply(&u.scaled(a).add(&v.scaled(b))?)?;
        let (au, av) = (op.apply(&u)?, op.apply(&v)?);
        let rhs = au.scaled(a).add(&av.scaled(b))?;
        let scale = a.norm() * au.norm() + b.norm() * av.norm();
        if scale > 0.0 {
            worst = worst.max(lhs.sub(&rhs)?.norm() / scale);
        } else {
            worst = worst.max(lhs.norm());
        }
    }
    Ok(worst)
}

/// Largest `|<Au, v> - <u, A*v>| / (|Au||v| + |u||A*v|)` over random probes.
pub fn adjoint_defect(op: &dyn Operator, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = random_field(op.grid(), &mut rng);
        let v = random_field(op.grid(), &mut rng);
        let au = op.apply(&u)?;
        let atv = op.apply_adjoint(&v)?;
        let gap = (au.inner(&v) - u.inner(&atv)).norm();
        let scale = au.norm() * v.norm() + u.norm() * atv.norm();
        worst = worst.max(if scale > 0.0 { gap / scale } else { gap });
    }
    Ok(worst)
}

/// `|(T_psi a(D) T_psi^{-1} - (a o psi)(D)) u| / |u|`.
pub fn conjugation_residual(
    map: &CanonicalMap,
    a: impl Fn(&[f64]) -> Complex64,
    u: &Field,
    path: EvalPath,
) -> Result<f64> {
    let grid = *u.grid();
    let forward = CanonicalTransform::new(grid, map, Direction::Forward, path)?;
    let inverse = CanonicalTransform::new(grid, map, Direction::Inverse, path)?;
    let mult = Multiplier::new(grid, &a, "a")?;
    let pulled = Multiplier::new(grid, |xi| a(&map.forward(xi)), "a o psi")?;
    let lhs = forward.apply(&mult.apply(&inverse.apply(u)?)?)?;
    let rhs = pulled.apply(u)?;
    Ok(lhs.sub(&rhs)?.norm() / u.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::{gauss_phase, HomogeneousSymbol};
    use nalgebra::DMatrix;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn gaussian(grid: Grid, center: &[f64], width: f64) -> Field {
        let center = center.to_vec();
        Field::from_real_fn(grid, move |x| {
            let r2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
            (-r2 / (2.0 * width * width)).exp()
        })
        .unwrap()
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
    }

    #[test]
    fn unit_multiplier_is_identity() {
        let grid = Grid::new(2, 4.0, 16).unwrap();
        let u = random_field(grid, &mut ChaCha8Rng::seed_from_u64(1));
        let out = apply_multiplier(|_| c(1.0), &u).unwrap();
        assert!(out.max_abs_diff(&u) < 1e-13);
    }

    #[test]
    fn laplacian_multiplier_on_a_grid_mode() {
        let grid = Grid::new(2, 3.0, 16).unwrap();
        let k = [3.0 * grid.dxi(), -2.0 * grid.dxi()];
        let u = Field::from_fn(grid, |x| Complex64::from_polar(1.0, k[0] * x[0] + k[1] * x[1])).unwrap();
        let out = apply_multiplier(|xi| c(xi[0] * xi[0] + xi[1] * xi[1]), &u).unwrap();
        let k2 = k[0] * k[0] + k[1] * k[1];
        assert!(out.max_abs_diff(&u.scaled(c(k2))) < 1e-12 * k2);
    }

    #[test]
    fn bracket_half_multiplier_matches_quadrature() {
        let grid = Grid::new(1, 12.0, 512).unwrap();
        let u = gaussian(grid, &[0.0], 1.0);
        let out = apply_multiplier(|xi| c(japanese(xi).sqrt()), &u).unwrap();
        let at_zero = out.values()[256];
        // u_hat(xi) = sqrt(2 pi) exp(-xi^2/2).
        let integrand = |xi: f64| (1.0 + xi * xi).powf(0.25) * (2.0 * PI).sqrt() * (-xi * xi / 2.0).exp() / (2.0 * PI);
        let oracle = simpson(&integrand, -40.0, 40.0, 1e-14);
        assert!((at_zero.re - oracle).abs() < 1e-6 * oracle, "{at_zero} vs {oracle}");
        assert!(at_zero.im.abs() < 1e-12);
    }

    #[test]
    fn nan_multiplier_names_the_frequency() {
        let grid = Grid::new(1, 1.0, 8).unwrap();
        let err = Multiplier::real(grid, |xi| 1.0 / xi[0].abs(), "1/|xi|").unwrap_err();
        assert_eq!(err, Error::NonFiniteMultiplier { frequency: vec![0.0] });
    }

    #[test]
    fn identity_map_gives_identity_transform() {
        let grid = Grid::new(2, 8.0, 64).unwrap();
        let u = gaussian(grid, &[0.5, -1.0], 1.0);
        let map = CanonicalMap::identity(2);
        for dir in [Direction::Forward, Direction::Inverse] {
            let out = apply_canonical_transform(&map, &u, dir).unwrap();
            assert!(out.field.sub(&u).unwrap().norm() < 1e-12 * u.norm());
            assert!(out.warning.is_none());
        }
    }

    #[test]
    fn dilation_matches_analytic_rescaling() {
        let grid = Grid::new(1, 20.0, 256).unwrap();
        let u = gaussian(grid, &[0.0], 1.0);
        let map = CanonicalMap::scaling(1, 2.0).unwrap();
        let out = apply_canonical_transform(&map, &u, Direction::Forward).unwrap().field;
        // Oracle: 2^{-1} u(x/2) at every grid point, using the closed form of u.
        let worst = (0..grid.len())
            .map(|j| {
                let x = grid.point(j)[0];
                (out.values()[j] - c(0.5 * (-(x / 2.0).powi(2) / 2.0).exp())).norm()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");

        let g2 = Grid::new(2, 16.0, 128).unwrap();
        let u2 = gaussian(g2, &[0.0, 0.0], 1.0);
        let out2 = apply_canonical_transform(&CanonicalMap::scaling(2, 2.0).unwrap(), &u2, Direction::Forward)
            .unwrap()
            .field;
        let mut idx = [0usize; 2];
        let mut worst2: f64 = 0.0;
        for j in 0..g2.len() {
            g2.multi_index(j, &mut idx);
            if idx.iter().all(|i| (i + 64) % 2 == 0) {
                // x/2 is itself a grid point here.
                let x = g2.point(j);
                let half = [(idx[0] + 64) / 2, (idx[1] + 64) / 2];
                let src = half[0] * 128 + half[1];
                assert!((g2.point(src)[0] - x[0] / 2.0).abs() < 1e-12);
                worst2 = worst2.max((out2.values()[j] - u2.values()[src] * 0.25).norm());
            }
        }
        assert!(worst2 < 1e-8, "{worst2}");
    }

    #[test]
    fn grid_rotation_is_composition() {
        let grid = Grid::new(2, 10.0, 64).unwrap();
        let f = |x: &[f64]| (-((x[0] - 1.0).powi(2) + 2.0 * (x[1] + 0.5).powi(2)) / 2.0).exp();
        let u = Field::from_real_fn(grid, f).unwrap();
        let map = CanonicalMap::rotation(PI / 2.0);
        let out = apply_canonical_transform(&map, &u, Direction::Forward).unwrap().field;
        let rotated = Field::from_real_fn(grid, |x| f(&[-x[1], x[0]])).unwrap();
        assert!(out.max_abs_diff(&rotated) < 1e-10);
    }

    #[test]
    fn broad_spectrum_raises_tail_warning() {
        let grid = Grid::new(1, 4.0, 32).unwrap();
        let u = random_field(grid, &mut ChaCha8Rng::seed_from_u64(4));
        let out = apply_canonical_transform(&CanonicalMap::identity(1), &u, Direction::Forward).unwrap();
        assert!(out.tail_fraction > TAIL_THRESHOLD);
        assert!(out.warning.is_some());
    }

    #[test]
    fn canonical_transform_round_trip_on_ellipse() {
        let grid = Grid::new(2, 10.0, 64).unwrap();
        let u = gaussian(grid, &[0.0, 0.0], 1.0);
        let map = gauss_phase(&HomogeneousSymbol::diagonal(&[1.0, 4.0]).unwrap()).unwrap();
        let t = CanonicalTransform::new(grid, &map, Direction::Forward, EvalPath::Auto).unwrap();
        let ti = CanonicalTransform::new(grid, &map, Direction::Inverse, EvalPath::Auto).unwrap();
        let back = t.apply(&ti.apply(&u).unwrap()).unwrap();
        assert!(back.sub(&u).unwrap().norm() < 1e-2 * u.norm());
    }

    #[test]
    fn fast_transform_agrees_with_exact() {
        let grid = Grid::new(2, 10.0, 32).unwrap();
        let u = gaussian(grid, &[1.0, 0.0], 1.0);
        let map = gauss_phase(&HomogeneousSymbol::diagonal(&[1.0, 4.0]).unwrap()).unwrap();
        for dir in [Direction::Forward, Direction::Inverse] {
            let exact = CanonicalTransform::new(grid, &map, dir, EvalPath::Exact).unwrap();
            let fast = CanonicalTransform::new(grid, &map, dir, EvalPath::Fast).unwrap();
            let (a, b) = (exact.apply(&u).unwrap(), fast.apply(&u).unwrap());
            assert!(a.sub(&b).unwrap().norm() < 1e-8 * a.norm());
            let (a, b) = (exact.apply_adjoint(&u).unwrap(), fast.apply_adjoint(&u).unwrap());
            assert!(a.sub(&b).unwrap().norm() < 1e-8 * a.norm());
        }
    }

    #[test]
    fn pseudo_reduces_to_its_factors() {
        let grid = Grid::new(1, 6.0, 64).unwrap();
        let u = gaussian(grid, &[0.3], 0.8);
        let b = |x: &[f64]| 1.0 / (1.0 + x[0] * x[0]);
        let cm = |xi: &[f64]| (1.0 + xi[0] * xi[0]).powf(0.25);
        let only_xi = apply_pseudo(|_, xi| c(cm(xi)), &u).unwrap();
        assert!(only_xi.max_abs_diff(&apply_multiplier(|xi| c(cm(xi)), &u).unwrap()) < 1e-12);
        let only_x = apply_pseudo(|x, _| c(b(x)), &u).unwrap();
        let bu = PointwiseWeight::real(grid, b, "b").unwrap().apply(&u).unwrap();
        assert!(only_x.max_abs_diff(&bu) < 1e-12);
        let both = apply_pseudo(|x, xi| c(b(x) * cm(xi)), &u).unwrap();
        let expected = PointwiseWeight::real(grid, b, "b")
            .unwrap()
            .apply(&apply_multiplier(|xi| c(cm(xi)), &u).unwrap())
            .unwrap();
        assert!(both.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn oscillatory_with_null_amplitude_vanishes() {
        let grid = Grid::new(1, 3.0, 16).unwrap();
        let u = random_field(grid, &mut ChaCha8Rng::seed_from_u64(2));
        let out = apply_oscillatory(|x, y| x[0] * y[0], |_, _| c(0.0), &u).unwrap();
        assert_eq!(out.norm(), 0.0);
    }

    #[test]
    fn oscillatory_fourier_kernel_is_the_transform() {
        // dx = dxi makes x_j = xi_j for every index.
        let np = 16;
        let l = (PI * np as f64 / 2.0).sqrt();
        let grid = Grid::new(1, l, np).unwrap();
        assert!((grid.dx() - grid.dxi()).abs() < 1e-14);
        let u = random_field(grid, &mut ChaCha8Rng::seed_from_u64(3));
        let out = apply_oscillatory(|x, y| -x[0] * y[0], |_, _| c(1.0), &u).unwrap();
        let uh = forward_transform(&u);
        let worst = out.values().iter().zip(uh.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-10);
    }

    #[test]
    fn fio_with_fourier_phase_is_scaled_pseudo() {
        let grid = Grid::new(1, 5.0, 32).unwrap();
        let u = gaussian(grid, &[0.0], 1.0);
        let a: SpaceFrequencyFn = Arc::new(|x: &[f64], xi: &[f64]| Complex64::new((x[0]).cos(), 0.3 * xi[0]) / (1.0 + xi[0] * xi[0]));
        let phi: PhaseFunction = Arc::new(|y: &[f64], xi: &[f64]| -y[0] * xi[0]);
        let out = apply_fio(phi, Amplitude::SpaceFrequency(a.clone()), &u).unwrap();
        let a2 = a.clone();
        let expected = apply_pseudo(move |x, xi| a2(x, xi), &u).unwrap().scaled(c(2.0 * PI));
        assert!(out.max_abs_diff(&expected) < 1e-10 * expected.norm().max(1.0));
    }

    #[test]
    fn fio_factorization_matches_direct_triple_sum() {
        let grid = Grid::new(1, 4.0, 32).unwrap();
        let u = gaussian(grid, &[0.5], 0.7);
        let phi: PhaseFunction = Arc::new(|y: &[f64], xi: &[f64]| -y[0] * xi[0] + 0.1 * xi[0] * xi[0].abs().sqrt());
        let a: SpaceFrequencyFn = Arc::new(|x: &[f64], xi: &[f64]| c(1.0 / (1.0 + x[0] * x[0] + xi[0] * xi[0])));
        let fact = apply_fio(phi.clone(), Amplitude::SpaceFrequency(a.clone()), &u).unwrap();
        let a3 = a.clone();
        let full = apply_fio(phi.clone(), Amplitude::Full(Arc::new(move |x: &[f64], _y: &[f64], xi: &[f64]| a3(x, xi))), &u).unwrap();
        assert!(fact.sub(&full).unwrap().norm() < 1e-8 * full.norm());

        // (2 pi)^n a(X,D) F^{-1} I with I evaluated by a hand-written sum.
        let xs = grid.points();
        let xis = grid.frequencies();
        let g: Vec<Complex64> = xis
            .iter()
            .map(|xi| {
                xs.iter()
                    .zip(u.values())
                    .map(|(y, v)| v * Complex64::from_polar(grid.dx(), phi(y, xi)))
                    .sum()
            })
            .collect();
        let w = inverse_transform(&SpectralField::new(grid, g).unwrap());
        let a4 = a.clone();
        let chain = apply_pseudo(move |x, xi| a4(x, xi), &w).unwrap().scaled(c(2.0 * PI));
        assert!(fact.sub(&chain).unwrap().norm() < 1e-8 * chain.norm());
    }

    #[test]
    fn fio_with_gauss_phase_is_scaled_transform() {
        let grid = Grid::new(2, 6.0, 40).unwrap();
        let u = gaussian(grid, &[0.0, 0.0], 0.9);
        let map = gauss_phase(&HomogeneousSymbol::diagonal(&[1.0, 0.6]).unwrap()).unwrap();
        let m2 = map.clone();
        let phi: PhaseFunction = Arc::new(move |y: &[f64], xi: &[f64]| {
            let p = m2.forward(xi);
            -(y[0] * p[0] + y[1] * p[1])
        });
        let out = apply_fio(phi, Amplitude::SourceFrequency(Arc::new(|_: &[f64], _: &[f64]| c(1.0))), &u).unwrap();
        let t = apply_canonical_transform(&map, &u, Direction::Forward).unwrap().field.scaled(c(4.0 * PI * PI));
        let r = out.sub(&t).unwrap().norm() / t.norm();
        assert!(r < 1e-8, "{r}");
    }

    #[test]
    fn full_arity_is_guarded() {
        let grid = Grid::new(2, 4.0, 8).unwrap();
        let phi: PhaseFunction = Arc::new(|_: &[f64], _: &[f64]| 0.0);
        let full = Amplitude::Full(Arc::new(|_: &[f64], _: &[f64], _: &[f64]| c(1.0)));
        assert!(matches!(Fio::new(grid, phi.clone(), full.clone()), Err(Error::TooExpensive { .. })));
        let big = Grid::new(1, 4.0, 256).unwrap();
        assert!(matches!(Fio::new(big, phi, full), Err(Error::TooExpensive { .. })));
    }

    #[test]
    fn every_operator_passes_probes() {
        let grid = Grid::new(2, 6.0, 12).unwrap();
        let g1 = Grid::new(1, 4.0, 16).unwrap();
        let ellipse = gauss_phase(&HomogeneousSymbol::diagonal(&[1.0, 4.0]).unwrap()).unwrap();
        let sf: SpaceFrequencyFn = Arc::new(|x: &[f64], xi: &[f64]| Complex64::new(x[0].sin(), xi[0].cos()));
        let sp: SpaceFn = Arc::new(|x: &[f64]| Complex64::new(1.0, x[0]));
        let phi2: PhaseFunction = Arc::new(|y: &[f64], xi: &[f64]| -(y[0] * xi[0] + y[1] * xi[1]) + 0.2 * y[0] * y[1]);
        let phi1: PhaseFunction = Arc::new(|y: &[f64], xi: &[f64]| -y[0] * xi[0] + 0.1 * y[0] * y[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dense: Vec<Complex64> = (0..grid.len() * grid.len())
            .map(|_| Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let ops: Vec<OperatorHandle> = vec![
            Arc::new(Identity::new(grid)),
            Arc::new(Multiplier::new(grid, |xi| Complex64::new(xi[0], 1.0), "m").unwrap()),
            Arc::new(PointwiseWeight::japanese(grid, -1.0)),
            Arc::new(CanonicalTransform::new(grid, &ellipse, Direction::Forward, EvalPath::Exact).unwrap()),
            Arc::new(CanonicalTransform::new(grid, &ellipse, Direction::Inverse, EvalPath::Fast).unwrap()),
            Arc::new(Pseudo::new(grid, |x, xi| Complex64::new(x[1].cos(), xi[1].sin()), "p").unwrap()),
            Arc::new(Oscillatory::new(grid, |x, y| x[0] * y[1], |x, _| c(x[0].cos()), "o").unwrap()),
            Arc::new(Fio::new(grid, phi2.clone(), Amplitude::SpaceFrequency(sf.clone())).unwrap()),
            Arc::new(Fio::new(grid, phi2.clone(), Amplitude::SourceFrequency(sf.clone())).unwrap()),
            Arc::new(Fio::new(grid, phi2.clone(), Amplitude::ProductSource(sf.clone(), sp.clone())).unwrap()),
            Arc::new(Fio::new(grid, phi2, Amplitude::ProductTarget(sp, sf)).unwrap()),
            Arc::new(DenseOperator::new(grid, dense, "random").unwrap()),
        ];
        let full = Fio::new(
            g1,
            phi1,
            Amplitude::Full(Arc::new(|x: &[f64], y: &[f64], xi: &[f64]| Complex64::new(1.0, x[0] * y[0]) / (1.0 + xi[0] * xi[0]))),
        )
        .unwrap();
        for op in ops.iter().map(|o| o.as_ref()).chain([&full as &dyn Operator]) {
            assert!(linearity_defect(op, 10, 1).unwrap() < 1e-10, "{}", op.label());
            assert!(adjoint_defect(op, 10, 2).unwrap() < 1e-8, "{}", op.label());
        }
        let composite: Vec<OperatorHandle> = vec![
            Arc::new(Compose::new(vec![ops[1].clone(), ops[3].clone(), ops[5].clone()]).unwrap()),
            Arc::new(Sum::new(vec![ops[2].clone(), ops[4].clone()]).unwrap()),
            Arc::new(Scaled::new(Complex64::new(0.0, 2.0), ops[6].clone())),
            Arc::new(Adjoint::new(ops[7].clone())),
        ];
        for op in &composite {
            assert!(linearity_defect(op.as_ref(), 10, 3).unwrap() < 1e-10, "{}", op.label());
            assert!(adjoint_defect(op.as_ref(), 10, 4).unwrap() < 1e-8, "{}", op.label());
        }
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = Grid::new(1, 1.0, 8).unwrap();
        let b = Grid::new(1, 2.0, 8).unwrap();
        assert!(Identity::new(a).apply(&Field::zeros(b)).is_err());
        assert!(Compose::new(vec![Arc::new(Identity::new(a)), Arc::new(Identity::new(b))]).is_err());
    }

    #[test]
    fn conjugation_is_exact_for_linear_maps() {
        let grid = Grid::new(2, 10.0, 64).unwrap();
        let u = gaussian(grid, &[0.0, 0.0], 1.0);
        let rot = CanonicalMap::rotation(PI / 2.0);
        let r = conjugation_residual(&rot, |xi| c(xi[0] * xi[0] + 3.0 * xi[1]), &u, EvalPath::Exact).unwrap();
        assert!(r < 1e-10, "{r}");
        let m = CanonicalMap::linear(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let r = conjugation_residual(&m, |xi| c(japanese(xi).sqrt()), &u, EvalPath::Exact).unwrap();
        assert!(r < 1e-12);
    }
}
