//! Operator norms on weighted spaces by power iteration, the Schur row/column
//! bound, the Cotlar-Stein bound of a finite family, and lattice partitions of
//! unity used to build such families.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fio::{random_field, Adjoint, Compose, Operator, OperatorHandle, PointwiseWeight, Sum};
use crate::lattice::Grid;

pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-10;
/// Allowed deviation of a partition-of-unity sum from one.
pub const PARTITION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormEstimate {
    pub estimate: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value of `op` by power iteration on `op* op` from a seeded
/// complex Gaussian start. Stops when successive estimates differ by less than
/// `tol` relatively; otherwise reports `converged = false`.
pub fn power_iteration(op: &dyn Operator, max_iters: usize, tol: f64, seed: u64) -> Result<NormEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = random_field(op.grid(), &mut rng);
    let mut x = start.scaled(Complex64::new(1.0 / start.norm(), 0.0));
    let mut prev = f64::NAN;
    for it in 1..=max_iters {
        let z = op.apply_adjoint(&op.apply(&x)?)?;
        let zn = z.norm();
        if !zn.is_finite() {
            return Err(Error::NonFinite { what: "power iteration iterate", index: it });
        }
        let est = zn.sqrt();
        if zn == 0.0 {
            return Ok(NormEstimate { estimate: 0.0, iterations: it, converged: true });
        }
        if (est - prev).abs() <= tol * est {
            return Ok(NormEstimate { estimate: est, iterations: it, converged: true });
        }
        prev = est;
        x = z.scaled(Complex64::new(1.0 / zn, 0.0));
    }
    Ok(NormEstimate { estimate: prev, iterations: max_iters, converged: false })
}

/// `W_out T W_in^{-1}` measured on `L^2`, i.e. the norm of `T: L^2_{m_in} -> L^2_{m_out}`.
#[derive(Clone)]
pub struct WeightedNormTask {
    pub op: OperatorHandle,
    pub m_in: f64,
    pub m_out: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl WeightedNormTask {
    pub fn new(op: OperatorHandle) -> Self {
        Self { op, m_in: 0.0, m_out: 0.0, max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL, seed: 0 }
    }

    pub fn weights(mut self, m_in: f64, m_out: f64) -> Self {
        self.m_in = m_in;
        self.m_out = m_out;
        self
    }

    pub fn iterations(mut self, max_iters: usize, tol: f64) -> Self {
        self.max_iters = max_iters;
        self.tol = tol;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter { name: "tol", reason: format!("must be positive, got {}", self.tol) });
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter { name: "max_iters", reason: "must be at least 1".into() });
        }
        if !(self.m_in.is_finite() && self.m_out.is_finite()) {
            return Err(Error::InvalidParameter { name: "m", reason: "weight exponents must be finite".into() });
        }
        Ok(())
    }
}

pub fn operator_norm(task: &WeightedNormTask) -> Result<NormEstimate> {
    task.validate()?;
    let grid = task.op.grid();
    let mut chain: Vec<OperatorHandle> = Vec::new();
    if task.m_out != 0.0 {
        chain.push(Arc::new(PointwiseWeight::japanese(grid, task.m_out)));
    }
    chain.push(task.op.clone());
    if task.m_in != 0.0 {
        chain.push(Arc::new(PointwiseWeight::japanese(grid, -task.m_in)));
    }
    let weighted = Compose::new(chain)?;
    power_iteration(&weighted, task.max_iters, task.tol, task.seed)
}

/// `sqrt(R C)` with `R = max_j sum_l |s_jl| dy` and `C = max_l sum_j |s_jl| dx`,
/// where `(Su)(x_j) = sum_l s_jl u(y_l) dy`.
pub fn schur_bound(kernel: &DMatrix<Complex64>, dx: f64, dy: f64) -> f64 {
    let row = kernel.row_iter().map(|r| r.iter().map(|v| v.norm()).sum::<f64>() * dy).fold(0.0, f64::max);
    let col = kernel.column_iter().map(|c| c.iter().map(|v| v.norm()).sum::<f64>() * dx).fold(0.0, f64::max);
    (row * col).sqrt()
}

/// The operator `(Su)(x_j) = sum_l s_jl u(y_l) dy^n` on `grid`.
pub fn kernel_operator(grid: Grid, kernel: &DMatrix<Complex64>) -> Result<crate::fio::DenseOperator> {
    let dy = grid.cell_volume();
    let n = grid.len();
    if kernel.nrows() != n || kernel.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: kernel.nrows() });
    }
    let mut data = Vec::with_capacity(n * n);
    for r in kernel.row_iter() {
        data.extend(r.iter().map(|v| v * dy));
    }
    crate::fio::DenseOperator::new(grid, data, "kernel")
}

/// Operators indexed by distinct points of `Z^r`.
#[derive(Clone)]
pub struct OperatorFamily {
    indices: Vec<Vec<i64>>,
    members: Vec<OperatorHandle>,
}

impl OperatorFamily {
    pub fn new(indices: Vec<Vec<i64>>, members: Vec<OperatorHandle>) -> Result<Self> {
        if indices.is_empty() || indices.len() != members.len() {
            return Err(Error::InvalidParameter {
                name: "family",
                reason: format!("{} indices for {} members", indices.len(), members.len()),
            });
        }
        let r = indices[0].len();
        let mut seen = std::collections::BTreeSet::new();
        for idx in &indices {
            if idx.len() != r {
                return Err(Error::DimensionMismatch { expected: r, got: idx.len() });
            }
            if !seen.insert(idx.clone()) {
                return Err(Error::InvalidParameter { name: "family", reason: format!("duplicate index {idx:?}") });
            }
        }
        let grid = members[0].grid();
        for m in &members[1..] {
            grid.check_same(&m.grid())?;
        }
        Ok(Self { indices, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn indices(&self) -> &[Vec<i64>] {
        &self.indices
    }

    pub fn members(&self) -> &[OperatorHandle] {
        &self.members
    }

    pub fn sum(&self) -> Result<Sum> {
        Sum::new(self.members.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaEntry {
    pub offset: Vec<i64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CotlarReport {
    pub bound: f64,
    /// Sorted by offset.
    pub gamma: Vec<GammaEntry>,
    pub sum_norm: NormEstimate,
    /// Some pairwise power iteration failed to converge.
    pub lower_confidence: bool,
}

/// `M = sum_k gamma(k)`, `gamma(k) = max_{i-j=k} max(|T_i* T_j|, |T_i T_j*|)^{1/2}`,
/// over the index differences realized by the family.
pub fn cotlar_bound(family: &OperatorFamily, max_iters: usize, tol: f64, seed: u64) -> Result<CotlarReport> {
    let n = family.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let results: Vec<(Vec<i64>, f64, bool)> = pairs
        .par_iter()
        .enumerate()
        .map(|(p, &(i, j))| -> Result<_> {
            let ti = &family.members[i];
            let tj = &family.members[j];
            let a = Compose::new(vec![Arc::new(Adjoint::new(ti.clone())), tj.clone()])?;
            let b = Compose::new(vec![ti.clone(), Arc::new(Adjoint::new(tj.clone()))])?;
            let s = seed.wrapping_add(2 * p as u64 + 1);
            let na = power_iteration(&a, max_iters, tol, s)?;
            let nb = power_iteration(&b, max_iters, tol, s.wrapping_add(1))?;
            let offset: Vec<i64> = family.indices[i].iter().zip(&family.indices[j]).map(|(x, y)| x - y).collect();
            Ok((offset, na.estimate.max(nb.estimate).sqrt(), na.converged && nb.converged))
        })
        .collect::<Result<_>>()?;
    let mut gamma: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    let mut all_converged = true;
    for (offset, g, ok) in results {
        all_converged &= ok;
        let slot = gamma.entry(offset).or_insert(0.0);
        *slot = slot.max(g);
    }
    let bound = gamma.values().sum();
    let sum_norm = power_iteration(&family.sum()?, max_iters, tol, seed)?;
    Ok(CotlarReport {
        bound,
        gamma: gamma.into_iter().map(|(offset, value)| GammaEntry { offset, value }).collect(),
        sum_norm,
        lower_confidence: !all_converged || !sum_norm.converged,
    })
}

/// One-dimensional bump profiles; the `n`-dimensional bump is their tensor power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BumpProfile {
    /// `max(0, 1 - |t|)`
    Hat,
    /// Centered quadratic B-spline, support `[-3/2, 3/2]`.
    QuadraticBSpline,
    /// `exp(-t^2 / (2 sigma^2))` cut off at `|t| > cutoff`.
    TruncatedGaussian { sigma: f64, cutoff: f64 },
}

impl BumpProfile {
    pub fn eval(&self, t: f64) -> f64 {
        let a = t.abs();
        match *self {
            Self::Hat => (1.0 - a).max(0.0),
            Self::QuadraticBSpline => {
                if a <= 0.5 {
                    0.75 - a * a
                } else if a <= 1.5 {
                    0.5 * (1.5 - a).powi(2)
                } else {
                    0.0
                }
            }
            Self::TruncatedGaussian { sigma, cutoff } => {
                if a <= cutoff {
                    (-t * t / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn support_radius(&self) -> f64 {
        match *self {
            Self::Hat => 1.0,
            Self::QuadraticBSpline => 1.5,
            Self::TruncatedGaussian { cutoff, .. } => cutoff,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    grid: Grid,
    pub indices: Vec<Vec<i64>>,
    /// `g_k` at every grid point, one vector per index.
    pub pieces: Vec<Vec<f64>>,
    pub max_defect: f64,
}

impl PartitionOfUnity {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Multiplication operators by each `g_k`.
    pub fn weight_family(&self) -> Result<OperatorFamily> {
        let members: Vec<OperatorHandle> = self
            .pieces
            .iter()
            .zip(&self.indices)
            .map(|(w, k)| -> Result<OperatorHandle> {
                let values = w.iter().map(|v| Complex64::new(*v, 0.0)).collect();
                Ok(Arc::new(PointwiseWeight::from_values(self.grid, values, format!("g{k:?}"))?))
            })
            .collect::<Result<_>>()?;
        OperatorFamily::new(self.indices.clone(), members)
    }
}

/// Integer translates `g(x - k)` of a tensor bump, wrapped periodically onto
/// the box. Requires `2L` to be an integer so the lattice is periodic.
pub fn decompose_unity(profile: BumpProfile, grid: Grid) -> Result<PartitionOfUnity> {
    let l = grid.half_width();
    let period = (2.0 * l).round();
    if (period - 2.0 * l).abs() > 1e-12 || period < 1.0 {
        return Err(Error::InvalidParameter {
            name: "half_width",
            reason: format!("2L must be a positive integer for a periodic unit lattice, got {}", 2.0 * l),
        });
    }
    let count = period as i64;
    let first = (-l).ceil() as i64;
    let images = (profile.support_radius() / period).ceil() as i64 + 1;
    let xs = grid.axis_coordinates();
    let np = grid.points_per_axis();
    // Per-axis values of every translate.
    let axis: Vec<Vec<f64>> = (0..count)
        .map(|t| {
            let k = (first + t) as f64;
            xs.iter()
                .map(|x| (-images..=images).map(|m| profile.eval(x - k - m as f64 * period)).sum())
                .collect()
        })
        .collect();
    let n = grid.dim();
    let total = (count as usize).pow(n as u32);
    let mut indices = Vec::with_capacity(total);
    let mut pieces = Vec::with_capacity(total);
    let mut t_idx = vec![0usize; n];
    let mut g_idx = vec![0usize; n];
    for flat in 0..total {
        let mut rem = flat;
        for slot in t_idx.iter_mut().rev() {
            *slot = rem % count as usize;
            rem /= count as usize;
        }
        let w: Vec<f64> = (0..grid.len())
            .map(|j| {
                let mut rem = j;
                for slot in g_idx.iter_mut().rev() {
                    *slot = rem % np;
                    rem /= np;
                }
                t_idx.iter().zip(&g_idx).map(|(&t, &g)| axis[t][g]).product()
            })
            .collect();
        indices.push(t_idx.iter().map(|&t| first + t as i64).collect());
        pieces.push(w);
    }
    let mut worst = (0.0f64, 0usize, 1.0f64);
    for j in 0..grid.len() {
        let s: f64 = pieces.iter().map(|p| p[j]).sum();
        let d = (s - 1.0).abs();
        if d > worst.0 {
            worst = (d, j, s);
        }
    }
    if worst.0 > PARTITION_TOL {
        return Err(Error::PartitionOfUnity { point: grid.point(worst.1), sum: worst.2 });
    }
    Ok(PartitionOfUnity { grid, indices, pieces, max_defect: worst.0 })
}
