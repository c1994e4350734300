//! Positively homogeneous symbols `p(xi)`, the Gauss-map canonical phase
//! `psi = p grad p / |grad p|`, its Newton inverse, and numerical checks of
//! the hypotheses the transforms rely on: Jacobian bounds, curvature of the
//! level set `{p = 1}` and symbol-class derivative bounds.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lattice::japanese;

/// Below this gradient magnitude a sample direction is reported as degenerate.
pub const GRADIENT_FLOOR: f64 = 1e-8;
/// Curvature minima below this value are flagged.
pub const CURVATURE_FLAG: f64 = 1e-3;
/// Default residual tolerance of [`invert_map`] on the unit sphere.
pub const INVERSION_TOL: f64 = 1e-13;
const NEWTON_MAX_ITERS: usize = 100;

pub type SymbolFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A positive function on `R^n \ 0` with `p(lambda xi) = lambda p(xi)`.
#[derive(Clone)]
pub enum HomogeneousSymbol {
    /// `|xi|`
    Euclidean { dim: usize },
    /// `sqrt(xi . A xi)` for symmetric positive definite `A`.
    QuadraticForm { matrix: DMatrix<f64> },
    /// `base(xi) + amplitude (d . xi)^2 / |xi|` with unit direction `d`.
    ///
    /// On the Euclidean base the level set has curvature `1 - amplitude` in
    /// the direction `d`, so `amplitude = 1` produces a flat point there.
    Perturbed { base: Box<HomogeneousSymbol>, amplitude: f64, direction: DVector<f64> },
    /// User supplied; derivatives come from central finite differences.
    Custom { dim: usize, label: String, eval: SymbolFn },
}

impl fmt::Debug for HomogeneousSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl HomogeneousSymbol {
    pub fn euclidean(dim: usize) -> Self {
        Self::Euclidean { dim }
    }

    /// `c |xi|`, realized as the quadratic form `c^2 I`.
    pub fn scaled_euclidean(dim: usize, c: f64) -> Result<Self> {
        Self::quadratic_form(DMatrix::identity(dim, dim) * (c * c))
    }

    pub fn quadratic_form(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::InvalidParameter { name: "matrix", reason: "must be square".into() });
        }
        if (&matrix - matrix.transpose()).amax() > 1e-12 * matrix.amax() {
            return Err(Error::InvalidParameter { name: "matrix", reason: "must be symmetric".into() });
        }
        if matrix.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter {
                name: "matrix",
                reason: "must be positive definite".into(),
            });
        }
        Ok(Self::QuadraticForm { matrix })
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        Self::quadratic_form(DMatrix::from_diagonal(&DVector::from_column_slice(entries)))
    }

    pub fn perturbed(base: HomogeneousSymbol, amplitude: f64, direction: &[f64]) -> Result<Self> {
        if direction.len() != base.dim() {
            return Err(Error::DimensionMismatch { expected: base.dim(), got: direction.len() });
        }
        let len = norm(direction);
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "bump_direction",
                reason: "must be a nonzero finite vector".into(),
            });
        }
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "bump_amplitude",
                reason: format!("must be finite and nonnegative, got {amplitude}"),
            });
        }
        let direction = DVector::from_iterator(direction.len(), direction.iter().map(|v| v / len));
        Ok(Self::Perturbed { base: Box::new(base), amplitude, direction })
    }

    pub fn custom(dim: usize, label: impl Into<String>, eval: SymbolFn) -> Self {
        Self::Custom { dim, label: label.into(), eval }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Euclidean { dim } | Self::Custom { dim, .. } => *dim,
            Self::QuadraticForm { matrix } => matrix.nrows(),
            Self::Perturbed { base, .. } => base.dim(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Euclidean { dim } => format!("euclidean(n={dim})"),
            Self::QuadraticForm { matrix } => {
                let rows: Vec<String> = matrix
                    .row_iter()
                    .map(|r| format!("[{}]", r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")))
                    .collect();
                format!("quadratic_form([{}])", rows.join(", "))
            }
            Self::Perturbed { base, amplitude, direction } => format!(
                "perturbed({}, amplitude={amplitude}, direction={:?})",
                base.label(),
                direction.as_slice()
            ),
            Self::Custom { label, .. } => format!("custom({label})"),
        }
    }

    /// True when derivatives are approximated by finite differences.
    pub fn uses_finite_differences(&self) -> bool {
        match self {
            Self::Custom { .. } => true,
            Self::Perturbed { base, .. } => base.uses_finite_differences(),
            _ => false,
        }
    }

    /// `p(xi)`, with `p(0) = 0`.
    pub fn eval(&self, xi: &[f64]) -> f64 {
        if xi.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        match self {
            Self::Euclidean { .. } => norm(xi),
            Self::QuadraticForm { matrix } => {
                let v = DVector::from_column_slice(xi);
                v.dot(&(matrix * &v)).sqrt()
            }
            Self::Perturbed { base, amplitude, direction } => {
                let d = dot(direction.as_slice(), xi);
                base.eval(xi) + amplitude * d * d / norm(xi)
            }
            Self::Custom { eval, .. } => eval(xi),
        }
    }

    pub fn grad(&self, xi: &[f64]) -> DVector<f64> {
        let n = xi.len();
        let x = DVector::from_column_slice(xi);
        match self {
            Self::Euclidean { .. } => {
                let r = x.norm();
                x / r
            }
            Self::QuadraticForm { matrix } => {
                let ax = matrix * &x;
                let p = x.dot(&ax).sqrt();
                ax / p
            }
            Self::Perturbed { base, amplitude, direction } => {
                let r = x.norm();
                let d = direction.dot(&x);
                let gq = direction * (2.0 * d / r) - &x * (d * d / r.powi(3));
                base.grad(xi) + gq * *amplitude
            }
            Self::Custom { eval, .. } => {
                let h = 1e-5 * norm(xi);
                let mut g = DVector::zeros(n);
                let mut probe = xi.to_vec();
                for i in 0..n {
                    probe[i] = xi[i] + h;
                    let fp = eval(&probe);
                    probe[i] = xi[i] - h;
                    let fm = eval(&probe);
                    probe[i] = xi[i];
                    g[i] = (fp - fm) / (2.0 * h);
                }
                g
            }
        }
    }

    pub fn hess(&self, xi: &[f64]) -> DMatrix<f64> {
        let n = xi.len();
        let x = DVector::from_column_slice(xi);
        match self {
            Self::Euclidean { .. } => {
                let r = x.norm();
                let u = &x / r;
                (DMatrix::identity(n, n) - &u * u.transpose()) / r
            }
            Self::QuadraticForm { matrix } => {
                let ax = matrix * &x;
                let p = x.dot(&ax).sqrt();
                matrix / p - (&ax * ax.transpose()) / p.powi(3)
            }
            Self::Perturbed { base, amplitude, direction } => {
                let r = x.norm();
                let d = direction.dot(&x);
                let dd = direction * direction.transpose();
                let dx = direction * x.transpose();
                let hq = dd * (2.0 / r) - (&dx + dx.transpose()) * (2.0 * d / r.powi(3))
                    - DMatrix::identity(n, n) * (d * d / r.powi(3))
                    + (&x * x.transpose()) * (3.0 * d * d / r.powi(5));
                base.hess(xi) + hq * *amplitude
            }
            Self::Custom { .. } => {
                let h = 1e-5 * norm(xi);
                let mut hm = DMatrix::zeros(n, n);
                let mut probe = xi.to_vec();
                for j in 0..n {
                    probe[j] = xi[j] + h;
                    let gp = self.grad(&probe);
                    probe[j] = xi[j] - h;
                    let gm = self.grad(&probe);
                    probe[j] = xi[j];
                    hm.set_column(j, &((gp - gm) / (2.0 * h)));
                }
                (&hm + hm.transpose()) * 0.5
            }
        }
    }
}

#[derive(Clone)]
enum MapKind {
    Linear { matrix: DMatrix<f64>, inverse: DMatrix<f64> },
    Gauss { symbol: HomogeneousSymbol },
}

/// A degree-one homogeneous frequency diffeomorphism with its inverse and
/// Jacobian. `psi(0) = 0`.
#[derive(Clone)]
pub struct CanonicalMap {
    kind: MapKind,
}

impl fmt::Debug for CanonicalMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl CanonicalMap {
    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidParameter { name: "matrix", reason: "must be square".into() });
        }
        let inverse = matrix.clone().try_inverse().ok_or(Error::InvalidParameter {
            name: "matrix",
            reason: "must be invertible".into(),
        })?;
        Ok(Self { kind: MapKind::Linear { matrix, inverse } })
    }

    pub fn identity(dim: usize) -> Self {
        Self::linear(DMatrix::identity(dim, dim)).expect("identity is invertible")
    }

    pub fn scaling(dim: usize, c: f64) -> Result<Self> {
        Self::linear(DMatrix::identity(dim, dim) * c)
    }

    /// Planar rotation by `angle`.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::linear(DMatrix::from_row_slice(2, 2, &[c, -s, s, c])).expect("rotations are invertible")
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            MapKind::Linear { matrix, .. } => matrix.nrows(),
            MapKind::Gauss { symbol } => symbol.dim(),
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            MapKind::Linear { matrix, .. } => format!("linear({:?})", matrix.as_slice()),
            MapKind::Gauss { symbol } => format!("gauss_phase({})", symbol.label()),
        }
    }

    pub fn symbol(&self) -> Option<&HomogeneousSymbol> {
        match &self.kind {
            MapKind::Gauss { symbol } => Some(symbol),
            MapKind::Linear { .. } => None,
        }
    }

    pub fn forward(&self, xi: &[f64]) -> Vec<f64> {
        if xi.iter().all(|v| *v == 0.0) {
            return vec![0.0; xi.len()];
        }
        match &self.kind {
            MapKind::Linear { matrix, .. } => {
                (matrix * DVector::from_column_slice(xi)).as_slice().to_vec()
            }
            MapKind::Gauss { symbol } => {
                let g = symbol.grad(xi);
                let scale = symbol.eval(xi) / g.norm();
                g.iter().map(|v| v * scale).collect()
            }
        }
    }

    /// `d psi / d xi`; `psi = p g / |g|` with `g = grad p`, `H = hess p` gives
    /// `J = g g^T / |g| + p (I - g g^T / |g|^2) H / |g|`.
    pub fn jacobian(&self, xi: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            MapKind::Linear { matrix, .. } => matrix.clone(),
            MapKind::Gauss { symbol } => {
                let n = xi.len();
                let g = symbol.grad(xi);
                let h = symbol.hess(xi);
                let p = symbol.eval(xi);
                let gn = g.norm();
                let u = &g / gn;
                let proj = DMatrix::identity(n, n) - &u * u.transpose();
                &g * u.transpose() + proj * h * (p / gn)
            }
        }
    }

    /// `psi^{-1}(eta)` to the default tolerance.
    pub fn inverse(&self, eta: &[f64]) -> Result<Vec<f64>> {
        invert_map(self, eta, INVERSION_TOL)
    }
}

/// Builds `psi(xi) = p(xi) grad p(xi) / |grad p(xi)|`.
pub fn gauss_phase(p: &HomogeneousSymbol) -> Result<CanonicalMap> {
    let samples = sphere_samples(p.dim(), default_sample_count(p.dim()));
    for omega in &samples {
        let g = p.grad(omega).norm();
        if !(g >= GRADIENT_FLOOR) {
            return Err(Error::DegenerateGradient { direction: omega.clone(), norm: g });
        }
    }
    Ok(CanonicalMap { kind: MapKind::Gauss { symbol: p.clone() } })
}

/// Solves `psi(xi) = eta` using homogeneity: Newton on `psi(xi) = eta/|eta|`
/// seeded at `omega / p(omega)`, then rescaled by `|eta|`.
pub fn invert_map(map: &CanonicalMap, eta: &[f64], tol: f64) -> Result<Vec<f64>> {
    let r = norm(eta);
    if r == 0.0 {
        return Ok(vec![0.0; eta.len()]);
    }
    match &map.kind {
        MapKind::Linear { inverse, .. } => {
            Ok((inverse * DVector::from_column_slice(eta)).as_slice().to_vec())
        }
        MapKind::Gauss { symbol } => {
            let omega = DVector::from_iterator(eta.len(), eta.iter().map(|v| v / r));
            let mut xi = &omega / symbol.eval(omega.as_slice());
            let residual_of = |x: &DVector<f64>| {
                DVector::from_vec(map.forward(x.as_slice())) - &omega
            };
            let mut res = residual_of(&xi);
            let mut res_norm = res.norm();
            let mut iterations = 0;
            while res_norm > tol {
                if iterations == NEWTON_MAX_ITERS {
                    return Err(Error::InversionFailed {
                        direction: omega.as_slice().to_vec(),
                        iterations,
                        residual: res_norm,
                    });
                }
                iterations += 1;
                let step = match map.jacobian(xi.as_slice()).lu().solve(&res) {
                    Some(s) => s,
                    None => {
                        return Err(Error::InversionFailed {
                            direction: omega.as_slice().to_vec(),
                            iterations,
                            residual: res_norm,
                        })
                    }
                };
                let mut lambda = 1.0;
                loop {
                    let trial = &xi - &step * lambda;
                    let trial_res = residual_of(&trial);
                    let trial_norm = trial_res.norm();
                    if trial_norm < res_norm || lambda < 1e-6 {
                        xi = trial;
                        res = trial_res;
                        res_norm = trial_norm;
                        break;
                    }
                    lambda *= 0.5;
                }
            }
            Ok(xi.iter().map(|v| v * r).collect())
        }
    }
}

fn default_sample_count(dim: usize) -> usize {
    match dim {
        1 => 2,
        2 => 256,
        _ => 512,
    }
}

/// Deterministic quasi-uniform directions on the unit sphere: both signs for
/// `n = 1`, equally spaced angles for `n = 2`, a Fibonacci lattice for
/// `n = 3` and seeded Gaussian directions above that.
pub fn sphere_samples(dim: usize, count: usize) -> Vec<Vec<f64>> {
    let count = count.max(1);
    match dim {
        0 => Vec::new(),
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
                    let rho = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    vec![rho * t.cos(), rho * t.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            (0..count)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let r = norm(&v);
                    v.into_iter().map(|x| x / r).collect()
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct JacobianReport {
    pub min_abs_det: f64,
    pub direction: Vec<f64>,
    pub samples: usize,
}

/// Minimum of `|det d psi|` over sphere samples; the determinant is degree-0
/// homogeneous, so the sphere covers all of `R^n \ 0`.
pub fn check_jacobian_bound(map: &CanonicalMap, directions: usize) -> JacobianReport {
    let samples = sphere_samples(map.dim(), directions);
    let mut best = JacobianReport { min_abs_det: f64::INFINITY, direction: Vec::new(), samples: samples.len() };
    for omega in samples {
        let det = map.jacobian(&omega).determinant().abs();
        if det < best.min_abs_det {
            best.min_abs_det = det;
            best.direction = omega;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CurvatureReport {
    pub min_abs_curvature: f64,
    pub direction: Vec<f64>,
    pub samples: usize,
    /// Minimum below [`CURVATURE_FLAG`].
    pub flagged: bool,
    pub finite_difference: bool,
}

/// Gaussian curvature of `{p = 1}` at `omega / p(omega)`: the determinant of
/// the shape operator `P hess(p) P / |grad p|` restricted to the tangent space.
pub fn gaussian_curvature(p: &HomogeneousSymbol, point: &[f64]) -> Result<f64> {
    let n = point.len();
    if n < 2 {
        return Err(Error::InvalidParameter {
            name: "dim",
            reason: "level-set curvature needs n >= 2".into(),
        });
    }
    let g = p.grad(point);
    let gn = g.norm();
    if !(gn >= GRADIENT_FLOOR) {
        return Err(Error::DegenerateGradient { direction: point.to_vec(), norm: gn });
    }
    let normal = &g / gn;
    // Tangent basis: orthonormalize coordinate vectors against the normal.
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n - 1);
    let mut candidates: Vec<usize> = (0..n).collect();
    candidates.sort_by(|&a, &b| normal[a].abs().partial_cmp(&normal[b].abs()).unwrap());
    for &axis in &candidates {
        if basis.len() == n - 1 {
            break;
        }
        let mut v = DVector::zeros(n);
        v[axis] = 1.0;
        v -= &normal * normal.dot(&v);
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let len = v.norm();
        if len > 1e-8 {
            basis.push(v / len);
        }
    }
    let b = DMatrix::from_columns(&basis);
    let shape = b.transpose() * p.hess(point) * &b / gn;
    Ok(shape.determinant())
}

pub fn check_curvature(p: &HomogeneousSymbol, directions: usize) -> Result<CurvatureReport> {
    let samples = sphere_samples(p.dim(), directions);
    let degenerate: Vec<Vec<f64>> = samples
        .iter()
        .filter(|w| !(p.grad(w).norm() >= GRADIENT_FLOOR))
        .cloned()
        .collect();
    if let Some(first) = degenerate.first() {
        return Err(Error::DegenerateGradient { direction: first.clone(), norm: p.grad(first).norm() });
    }
    let mut min = f64::INFINITY;
    let mut arg = Vec::new();
    for omega in &samples {
        let scale = p.eval(omega);
        let point: Vec<f64> = omega.iter().map(|v| v / scale).collect();
        let k = gaussian_curvature(p, &point)?.abs();
        if k < min {
            min = k;
            arg = omega.clone();
        }
    }
    Ok(CurvatureReport {
        min_abs_curvature: min,
        direction: arg,
        samples: samples.len(),
        flagged: min < CURVATURE_FLAG,
        finite_difference: p.uses_finite_differences(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymbolClass {
    /// All derivatives bounded.
    S00,
    /// `|d_y^b d_xi^g a| <= C <y>^{m1-|b|} <xi>^{m2-|g|}`.
    Sg { m1: f64, m2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolClassSpec {
    pub class: SymbolClass,
    pub max_order: usize,
    pub bound_tolerance: f64,
}

impl SymbolClassSpec {
    pub fn new(class: SymbolClass, max_order: usize, bound_tolerance: f64) -> Result<Self> {
        if max_order < 1 {
            return Err(Error::InvalidParameter { name: "max_order", reason: "must be at least 1".into() });
        }
        if !(bound_tolerance > 0.0) {
            return Err(Error::InvalidParameter {
                name: "bound_tolerance",
                reason: "must be positive".into(),
            });
        }
        Ok(Self { class, max_order, bound_tolerance })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleAxis {
    pub start: f64,
    pub spacing: f64,
    pub count: usize,
}

impl SampleAxis {
    /// `count` equally spaced samples covering `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64, count: usize) -> Self {
        Self { start: -half_width, spacing: 2.0 * half_width / (count.max(2) - 1) as f64, count }
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        self.start + i as f64 * self.spacing
    }
}

/// An amplitude sampled on a tensor grid over `(y, xi)`: the space axes come
/// first, then the frequency axes, row-major.
#[derive(Debug, Clone)]
pub struct SampledAmplitude {
    space_axes: Vec<SampleAxis>,
    freq_axes: Vec<SampleAxis>,
    values: Vec<Complex64>,
}

impl SampledAmplitude {
    pub fn from_fn(
        space_axes: Vec<SampleAxis>,
        freq_axes: Vec<SampleAxis>,
        f: impl Fn(&[f64], &[f64]) -> Complex64,
    ) -> Self {
        let shape: Vec<usize> = space_axes.iter().chain(&freq_axes).map(|a| a.count).collect();
        let total: usize = shape.iter().product();
        let ns = space_axes.len();
        let mut idx = vec![0; shape.len()];
        let mut y = vec![0.0; ns];
        let mut xi = vec![0.0; freq_axes.len()];
        let mut values = Vec::with_capacity(total);
        for flat in 0..total {
            unravel(flat, &shape, &mut idx);
            for (a, slot) in y.iter_mut().enumerate() {
                *slot = space_axes[a].coordinate(idx[a]);
            }
            for (a, slot) in xi.iter_mut().enumerate() {
                *slot = freq_axes[a].coordinate(idx[ns + a]);
            }
            values.push(f(&y, &xi));
        }
        Self { space_axes, freq_axes, values }
    }

    fn axes(&self) -> impl Iterator<Item = &SampleAxis> {
        self.space_axes.iter().chain(&self.freq_axes)
    }
}

fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for (slot, &s) in out.iter_mut().zip(shape).rev() {
        *slot = flat % s;
        flat /= s;
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SymbolClassReport {
    pub passes: bool,
    pub worst_constant: f64,
    /// Derivative orders per axis (space axes first).
    pub worst_multi_index: Vec<usize>,
    pub worst_point: Vec<f64>,
    pub max_order: usize,
    pub spacing: Vec<f64>,
}

/// Samples restricted to a box; `offset[a]` is the first original index kept.
struct Block {
    shape: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<Complex64>,
}

impl Block {
    /// Applies a centered stencil along `axis`; the result shrinks by the
    /// stencil half-width on both sides.
    fn stencil(&self, axis: usize, coeffs: &[f64]) -> Block {
        let hw = coeffs.len() / 2;
        let mut shape = self.shape.clone();
        shape[axis] -= 2 * hw;
        let mut offset = self.offset.clone();
        offset[axis] += hw;
        let stride: usize = self.shape[axis + 1..].iter().product();
        let total: usize = shape.iter().product();
        let mut idx = vec![0; shape.len()];
        let mut data = Vec::with_capacity(total);
        for flat in 0..total {
            unravel(flat, &shape, &mut idx);
            let mut src = 0;
            for (a, &i) in idx.iter().enumerate() {
                src = src * self.shape[a] + i;
            }
            // idx[axis] in the new block equals idx[axis] + hw - hw in the old one.
            let acc: Complex64 = coeffs.iter().enumerate().map(|(c, w)| self.data[src + c * stride] * *w).sum();
            data.push(acc);
        }
        Block { shape, offset, data }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Stencils composing to a centered difference of the given order: an even
/// central difference, followed by a first central difference when the
/// order is odd.
fn difference_stencils(order: usize, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let even = order - order % 2;
    if even > 0 {
        let scale = h.powi(even as i32);
        out.push((0..=even).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * binomial(even, i) / scale).collect());
    }
    if order % 2 == 1 {
        out.push(vec![-0.5 / h, 0.0, 0.5 / h]);
    }
    out
}

fn multi_indices(axes: usize, max_total: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0; axes];
    fn rec(pos: usize, left: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == current.len() {
            out.push(current.clone());
            return;
        }
        for k in 0..=left {
            current[pos] = k;
            rec(pos + 1, left - k, current, out);
        }
        current[pos] = 0;
    }
    rec(0, max_total, &mut current, &mut out);
    out
}

/// Estimates every mixed derivative up to `spec.max_order` by centered finite
/// differences, divides by the class weight and reports the supremum.
///
/// Each derivative is evaluated on all samples where its own stencil fits, so
/// raising `max_order` only adds (multi-index, point) pairs.
pub fn check_symbol_class(a: &SampledAmplitude, spec: &SymbolClassSpec) -> Result<SymbolClassReport> {
    let axes: Vec<SampleAxis> = a.axes().copied().collect();
    let required = 2 * spec.max_order.div_ceil(2) + 1;
    for (axis, ax) in axes.iter().enumerate() {
        if ax.count < required {
            return Err(Error::GridTooCoarse { axis, points: ax.count, required });
        }
    }
    let ns = a.space_axes.len();
    let full = Block {
        shape: axes.iter().map(|ax| ax.count).collect(),
        offset: vec![0; axes.len()],
        data: a.values.clone(),
    };
    let mut worst = (-1.0, Vec::new(), Vec::new());
    for alpha in multi_indices(axes.len(), spec.max_order) {
        let mut block = None::<Block>;
        for (axis, &order) in alpha.iter().enumerate() {
            for st in difference_stencils(order, axes[axis].spacing) {
                let next = block.as_ref().unwrap_or(&full).stencil(axis, &st);
                block = Some(next);
            }
        }
        let block = block.unwrap_or(Block { shape: full.shape.clone(), offset: full.offset.clone(), data: full.data.clone() });
        let space_order: usize = alpha[..ns].iter().sum();
        let freq_order: usize = alpha[ns..].iter().sum();
        let mut idx = vec![0; axes.len()];
        let mut coords = vec![0.0; axes.len()];
        for (flat, v) in block.data.iter().enumerate() {
            unravel(flat, &block.shape, &mut idx);
            for (a_i, slot) in coords.iter_mut().enumerate() {
                *slot = axes[a_i].coordinate(idx[a_i] + block.offset[a_i]);
            }
            let weight = match spec.class {
                SymbolClass::S00 => 1.0,
                SymbolClass::Sg { m1, m2 } => {
                    japanese(&coords[..ns]).powf(m1 - space_order as f64)
                        * japanese(&coords[ns..]).powf(m2 - freq_order as f64)
                }
            };
            let ratio = v.norm() / weight;
            if ratio > worst.0 {
                worst = (ratio, alpha.clone(), coords.clone());
            }
        }
    }
    Ok(SymbolClassReport {
        passes: worst.0 <= spec.bound_tolerance,
        worst_constant: worst.0,
        worst_multi_index: worst.1,
        worst_point: worst.2,
        max_order: spec.max_order,
        spacing: axes.iter().map(|ax| ax.spacing).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse() -> HomogeneousSymbol {
        HomogeneousSymbol::diagonal(&[1.0, 4.0]).unwrap()
    }

    /// Closed-form inverse of the Gauss map of `sqrt(xi . A xi)` with diagonal `A`.
    fn ellipse_inverse(a: &[f64], eta: &[f64]) -> Vec<f64> {
        let r = norm(eta);
        let b: Vec<f64> = eta.iter().zip(a).map(|(e, ai)| e / r / ai).collect();
        let s = dot(&b, &eta.iter().map(|e| e / r).collect::<Vec<_>>()).sqrt();
        b.iter().map(|v| r * v / s).collect()
    }

    fn samples3() -> Vec<Vec<f64>> {
        vec![vec![0.3, -1.2, 0.7], vec![2.0, 0.1, -0.4], vec![-0.5, -0.5, 3.0], vec![1.0, 0.0, 0.0]]
    }

    #[test]
    fn families_are_homogeneous_and_satisfy_euler() {
        let families = vec![
            HomogeneousSymbol::euclidean(3),
            HomogeneousSymbol::diagonal(&[1.0, 1.0, 4.0]).unwrap(),
            HomogeneousSymbol::perturbed(HomogeneousSymbol::euclidean(3), 0.3, &[0.0, 1.0, 1.0]).unwrap(),
            HomogeneousSymbol::custom(3, "l2", Arc::new(|x: &[f64]| norm(x))),
        ];
        for p in families {
            for xi in samples3() {
                let v = p.eval(&xi);
                assert!(v > 0.0);
                for lambda in [0.5, 2.0, 10.0] {
                    let scaled: Vec<f64> = xi.iter().map(|x| x * lambda).collect();
                    assert!((p.eval(&scaled) - lambda * v).abs() <= 1e-10 * lambda * v);
                }
                let euler = DVector::from_column_slice(&xi).dot(&p.grad(&xi));
                assert!((euler - v).abs() <= 1e-8 * v, "{} euler {euler} vs {v}", p.label());
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let p = HomogeneousSymbol::perturbed(
            HomogeneousSymbol::diagonal(&[1.0, 2.0, 4.0]).unwrap(),
            0.7,
            &[1.0, -1.0, 0.5],
        )
        .unwrap();
        let fd = {
            let q = p.clone();
            HomogeneousSymbol::custom(3, "fd", Arc::new(move |x: &[f64]| q.eval(x)))
        };
        for xi in samples3() {
            assert!((p.grad(&xi) - fd.grad(&xi)).amax() < 1e-8);
            assert!((p.hess(&xi) - fd.hess(&xi)).amax() < 1e-4);
        }
        assert!(fd.uses_finite_differences());
        assert!(!p.uses_finite_differences());
    }

    #[test]
    fn euclidean_phase_is_identity() {
        let psi = gauss_phase(&HomogeneousSymbol::euclidean(2)).unwrap();
        for omega in sphere_samples(2, 37) {
            for r in [0.1, 1.0, 7.0] {
                let xi: Vec<f64> = omega.iter().map(|v| v * r).collect();
                let out = psi.forward(&xi);
                assert!(out.iter().zip(&xi).all(|(a, b)| (a - b).abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn scaled_euclidean_phase_is_dilation() {
        let c = 2.5;
        let psi = gauss_phase(&HomogeneousSymbol::scaled_euclidean(3, c).unwrap()).unwrap();
        for xi in samples3() {
            let out = psi.forward(&xi);
            assert!(out.iter().zip(&xi).all(|(a, b)| (a - c * b).abs() <= 1e-12));
        }
    }

    #[test]
    fn ellipse_phase_at_vertical_axis() {
        let psi = gauss_phase(&ellipse()).unwrap();
        let out = psi.forward(&[0.0, 1.0]);
        assert!(out[0].abs() < 1e-15 && (out[1] - 2.0).abs() < 1e-14);
        assert_eq!(psi.forward(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn phase_has_modulus_p() {
        let p = HomogeneousSymbol::diagonal(&[1.0, 3.0, 0.5]).unwrap();
        let psi = gauss_phase(&p).unwrap();
        for xi in samples3() {
            let m = norm(&psi.forward(&xi));
            assert!((m - p.eval(&xi)).abs() <= 1e-10 * m);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let psi = gauss_phase(&ellipse()).unwrap();
        let h = 1e-6;
        for omega in sphere_samples(2, 24) {
            let analytic = psi.jacobian(&omega);
            let mut fd = DMatrix::zeros(2, 2);
            for j in 0..2 {
                let mut a = omega.clone();
                let mut b = omega.clone();
                a[j] += h;
                b[j] -= h;
                let (fa, fb) = (psi.forward(&a), psi.forward(&b));
                for i in 0..2 {
                    fd[(i, j)] = (fa[i] - fb[i]) / (2.0 * h);
                }
            }
            assert!((analytic.determinant() - fd.determinant()).abs() < 1e-6);
        }
        let report = check_jacobian_bound(&psi, 256);
        assert!(report.min_abs_det > 0.0);
    }

    #[test]
    fn jacobian_determinant_is_degree_zero() {
        let psi = gauss_phase(&HomogeneousSymbol::diagonal(&[1.0, 1.0, 4.0]).unwrap()).unwrap();
        for xi in samples3() {
            let d = psi.jacobian(&xi).determinant();
            for lambda in [0.5, 2.0, 10.0] {
                let scaled: Vec<f64> = xi.iter().map(|x| x * lambda).collect();
                assert!((psi.jacobian(&scaled).determinant() - d).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn jacobian_bound_of_linear_maps() {
        assert!((check_jacobian_bound(&CanonicalMap::identity(3), 50).min_abs_det - 1.0).abs() < 1e-14);
        let s = CanonicalMap::scaling(3, 1.5).unwrap();
        assert!((check_jacobian_bound(&s, 50).min_abs_det - 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn inverting_linear_maps() {
        let id = CanonicalMap::identity(2);
        assert_eq!(invert_map(&id, &[3.0, -1.0], 1e-12).unwrap(), vec![3.0, -1.0]);
        let s = CanonicalMap::scaling(2, 2.0).unwrap();
        let out = invert_map(&s, &[4.0, 0.0], 1e-12).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15 && out[1].abs() < 1e-15);
    }

    #[test]
    fn inverting_ellipse_phase() {
        use rand::Rng;
        let psi = gauss_phase(&ellipse()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let xi0 = vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let back = invert_map(&psi, &psi.forward(&xi0), 1e-13).unwrap();
            assert!(back.iter().zip(&xi0).all(|(a, b)| (a - b).abs() < 1e-8), "{back:?} {xi0:?}");
            let eta = xi0.clone();
            let pre = invert_map(&psi, &eta, 1e-13).unwrap();
            let closed = ellipse_inverse(&[1.0, 4.0], &eta);
            assert!(pre.iter().zip(&closed).all(|(a, b)| (a - b).abs() < 1e-10));
            let fwd = psi.forward(&pre);
            assert!(fwd.iter().zip(&eta).all(|(a, b)| (a - b).abs() < 1e-10 * norm(&eta)));
        }
    }

    #[test]
    fn sphere_curvature_is_one() {
        for n in [2, 3] {
            let r = check_curvature(&HomogeneousSymbol::euclidean(n), 64).unwrap();
            assert!((r.min_abs_curvature - 1.0).abs() < 1e-12);
            assert!(!r.flagged);
        }
    }

    #[test]
    fn ellipse_curvature_at_major_vertex() {
        // x = cos t, y = sin(t)/2: |x'y'' - y'x''| / (x'^2 + y'^2)^{3/2} at t = 0.
        let (xp, yp, xpp, ypp) = (0.0f64, 0.5f64, -1.0f64, 0.0f64);
        let oracle = (xp * ypp - yp * xpp).abs() / (xp * xp + yp * yp).powf(1.5);
        let k = gaussian_curvature(&ellipse(), &[1.0, 0.0]).unwrap();
        assert!((k - oracle).abs() < 1e-12, "{k} vs {oracle}");
        assert!((oracle - 4.0).abs() < 1e-12);
    }

    #[test]
    fn flat_point_is_flagged() {
        // On the Euclidean base the bump direction has curvature 1 - amplitude.
        let p = HomogeneousSymbol::perturbed(HomogeneousSymbol::euclidean(2), 1.0, &[1.0, 0.0]).unwrap();
        let at_direction = gaussian_curvature(&p, &[0.5, 0.0]).unwrap();
        assert!(at_direction.abs() < 1e-12);
        let r = check_curvature(&p, 256).unwrap();
        assert!(r.min_abs_curvature < 1e-3);
        assert!(r.flagged);
        let mild = HomogeneousSymbol::perturbed(HomogeneousSymbol::euclidean(3), 0.5, &[0.0, 0.0, 1.0]).unwrap();
        let k = gaussian_curvature(&mild, &[0.0, 0.0, 1.0 / 1.5]).unwrap();
        assert!((k - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_gradient_is_reported() {
        let flat = HomogeneousSymbol::custom(2, "bad", Arc::new(|x: &[f64]| if x[0] > 0.9 { 0.0 } else { norm(x) }));
        assert!(matches!(gauss_phase(&flat), Err(Error::DegenerateGradient { .. })));
        assert!(matches!(check_curvature(&flat, 256), Err(Error::DegenerateGradient { .. })));
    }

    fn grid_1d(l: f64, nx: usize, nxi: usize) -> (Vec<SampleAxis>, Vec<SampleAxis>) {
        (vec![SampleAxis::symmetric(l, nx)], vec![SampleAxis::symmetric(2.0, nxi)])
    }

    #[test]
    fn inverse_quadratic_is_s00() {
        let (sx, sxi) = grid_1d(5.0, 201, 81);
        let a = SampledAmplitude::from_fn(sx, sxi, |x, xi| {
            Complex64::new(1.0 / (1.0 + x[0] * x[0] + xi[0] * xi[0]), 0.0)
        });
        let spec = SymbolClassSpec::new(SymbolClass::S00, 2, 4.0).unwrap();
        let r = check_symbol_class(&a, &spec).unwrap();
        assert!(r.passes);
        // Symbolic second derivatives of 1/(1 + x^2 + xi^2) at the reported point.
        let (x, xi) = (r.worst_point[0], r.worst_point[1]);
        let q = 1.0 + x * x + xi * xi;
        let exact = match r.worst_multi_index.as_slice() {
            [2, 0] => (6.0 * x * x - 2.0 * (1.0 + xi * xi)) / q.powi(3),
            [0, 2] => (6.0 * xi * xi - 2.0 * (1.0 + x * x)) / q.powi(3),
            [1, 1] => 8.0 * x * xi / q.powi(3),
            [1, 0] => -2.0 * x / q.powi(2),
            [0, 1] => -2.0 * xi / q.powi(2),
            _ => 1.0 / q,
        };
        assert!((r.worst_constant - exact.abs()).abs() < 1e-2, "{r:?} exact {exact}");
        assert!((r.worst_constant - 2.0).abs() < 1e-2);
    }

    #[test]
    fn constant_symbol_has_unit_constant() {
        let (sx, sxi) = grid_1d(3.0, 21, 21);
        let a = SampledAmplitude::from_fn(sx, sxi, |_, _| Complex64::new(1.0, 0.0));
        for class in [SymbolClass::S00, SymbolClass::Sg { m1: 0.0, m2: 1.0 }] {
            let r = check_symbol_class(&a, &SymbolClassSpec::new(class, 3, 1.0 + 1e-12).unwrap()).unwrap();
            assert!(r.passes);
            assert!((r.worst_constant - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oscillating_phase_is_not_s00() {
        let l = 5.0;
        let (sx, sxi) = grid_1d(l, 10_001, 5);
        let a = SampledAmplitude::from_fn(sx, sxi, |x, _| Complex64::new((x[0] * x[0]).sin(), 0.0));
        let r = check_symbol_class(&a, &SymbolClassSpec::new(SymbolClass::S00, 1, 4.0).unwrap()).unwrap();
        assert!(!r.passes);
        assert_eq!(r.worst_multi_index, vec![1, 0]);
        let x = r.worst_point[0];
        let exact = (2.0 * x * (x * x).cos()).abs();
        assert!((r.worst_constant - exact).abs() < 1e-3 * exact);
        assert!(x.abs() > 0.9 * l);
    }

    #[test]
    fn sg_weights_discount_decay() {
        // <x>^{-1}: order-0 bound 1 in SG^{-1,0}; its x-derivative decays like <x>^{-2}.
        let sx = vec![SampleAxis::symmetric(20.0, 401)];
        let sxi = vec![SampleAxis::symmetric(1.0, 5)];
        let a = SampledAmplitude::from_fn(sx, sxi, |x, _| Complex64::new(1.0 / japanese(x), 0.0));
        let r = check_symbol_class(&a, &SymbolClassSpec::new(SymbolClass::Sg { m1: -1.0, m2: 0.0 }, 2, 3.0).unwrap()).unwrap();
        assert!(r.passes, "{r:?}");
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let (sx, sxi) = grid_1d(1.0, 4, 4);
        let a = SampledAmplitude::from_fn(sx, sxi, |_, _| Complex64::new(1.0, 0.0));
        let spec = SymbolClassSpec::new(SymbolClass::S00, 4, 1.0).unwrap();
        assert_eq!(
            check_symbol_class(&a, &spec).unwrap_err(),
            Error::GridTooCoarse { axis: 0, points: 4, required: 5 }
        );
        assert!(SymbolClassSpec::new(SymbolClass::S00, 0, 1.0).is_err());
    }

    #[test]
    fn class_check_is_monotone_in_order() {
        let (sx, sxi) = grid_1d(3.0, 61, 31);
        let a = SampledAmplitude::from_fn(sx, sxi, |x, xi| Complex64::new((x[0] * xi[0]).sin(), (x[0] * x[0]).cos()));
        let mut last = 0.0;
        for order in 1..=4 {
            let r = check_symbol_class(&a, &SymbolClassSpec::new(SymbolClass::S00, order, 5.0).unwrap()).unwrap();
            assert!(r.worst_constant >= last);
            last = r.worst_constant;
        }
    }
}
