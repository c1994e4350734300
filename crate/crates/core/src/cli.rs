//! Config-driven experiment runner.
//!
//! A TOML config names the symbol, grid and estimator parameters; a run
//! writes `report.json`, `table.csv` for sweeps, and `timing.json`.
//!
//! ```toml
//! experiment = "smoothing"
//! seed = 0
//!
//! [symbol]
//! name = "quadratic_form"
//! matrix = [[1, 0, 0], [0, 1, 0], [0, 0, 4]]
//!
//! [grid]
//! n = 3
//! L = 12.0
//! N = 32
//!
//! [window]
//! T = 4.0
//! N_t = 257
//! sweep = [4.0, 8.0, 16.0]
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dispersive::{
    egorov_residual, max_pairwise_deviation, smoothing_constant, DerivativeKind, PowerOptions, TimeWindow,
};
use crate::error::Error;
use crate::fio::{
    conjugation_residual, CanonicalTransform, Compose, Direction, Identity, OperatorHandle, PointwiseWeight,
};
use crate::lattice::{forward_transform, japanese, Field, Grid};
use crate::normest::{
    cotlar_bound, decompose_unity, operator_norm, BumpProfile, OperatorFamily, WeightedNormTask, DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
};
use crate::offgrid::EvalPath;
use crate::symbol::{
    check_curvature, check_jacobian_bound, check_symbol_class, gauss_phase, CanonicalMap, HomogeneousSymbol,
    SampleAxis, SampledAmplitude, SymbolClass, SymbolClassSpec,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const SMOOTHING_DIMENSION_WARNING: &str = "outside the smoothing estimate hypotheses (n >= 3)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Egorov,
    Smoothing,
    Norm,
    SymbolCheck,
    Cotlar,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Egorov => "egorov",
            Self::Smoothing => "smoothing",
            Self::Norm => "norm",
            Self::SymbolCheck => "symbol-check",
            Self::Cotlar => "cotlar",
        };
        f.write_str(s)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum SymbolSpec {
    Euclidean {
        #[serde(default = "one")]
        scale: f64,
    },
    QuadraticForm {
        matrix: Vec<Vec<f64>>,
    },
    Perturbed {
        base: Box<SymbolSpec>,
        bump_amplitude: f64,
        bump_direction: Vec<f64>,
    },
}

impl SymbolSpec {
    pub fn build(&self, dim: usize) -> crate::error::Result<HomogeneousSymbol> {
        match self {
            Self::Euclidean { scale } if *scale == 1.0 => Ok(HomogeneousSymbol::euclidean(dim)),
            Self::Euclidean { scale } => HomogeneousSymbol::scaled_euclidean(dim, *scale),
            Self::QuadraticForm { matrix } => {
                if matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) {
                    return Err(Error::DimensionMismatch { expected: dim, got: matrix.len() });
                }
                HomogeneousSymbol::quadratic_form(DMatrix::from_fn(dim, dim, |i, j| matrix[i][j]))
            }
            Self::Perturbed { base, bump_amplitude, bump_direction } => {
                if bump_direction.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: bump_direction.len() });
                }
                HomogeneousSymbol::perturbed(base.build(dim)?, *bump_amplitude, bump_direction)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    #[serde(rename = "L")]
    pub half_width: f64,
    #[serde(rename = "N")]
    pub points: usize,
}

impl GridSpec {
    fn build(&self) -> crate::error::Result<Grid> {
        Grid::new(self.n, self.half_width, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Number of time nodes, endpoints included.
    #[serde(rename = "N_t")]
    pub nodes: usize,
    /// Extra horizons, run at the node rate of `(T, N_t)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<f64>,
}

impl WindowSpec {
    fn rate(&self) -> f64 {
        (self.nodes as f64 - 1.0) / self.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSpec {
    pub m_in: f64,
    pub m_out: f64,
    pub delta: f64,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self { m_in: 0.0, m_out: 0.0, delta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConjugatedMultiplier {
    /// `|xi|^2`, conjugated to `p(xi)^2`.
    #[default]
    Laplacian,
    /// `<xi>^{1/2}`.
    JapaneseSqrt,
}

fn default_width() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgorovSpec {
    /// Width of the centered Gaussian test datum.
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default)]
    pub path: EvalPath,
    #[serde(default)]
    pub multiplier: ConjugatedMultiplier,
    /// Points per axis to sweep; defaults to `grid.N` alone.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resolutions: Vec<usize>,
}

impl Default for EgorovSpec {
    fn default() -> Self {
        Self { width: 1.0, path: EvalPath::Auto, multiplier: ConjugatedMultiplier::Laplacian, resolutions: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    /// `T_psi` for the Gauss map of the configured symbol.
    Transform {
        #[serde(default = "forward")]
        direction: Direction,
        #[serde(default)]
        path: EvalPath,
        /// Precompose with the indicator of `[-h, h)^n`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        restrict: Option<f64>,
    },
    /// `T_psi` for `psi(xi) = factor * xi`.
    Dilation {
        factor: f64,
        #[serde(default = "forward")]
        direction: Direction,
        #[serde(default)]
        path: EvalPath,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        restrict: Option<f64>,
    },
}

fn forward() -> Direction {
    Direction::Forward
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedAmplitude {
    /// `1 / (1 + |x|^2 + |xi|^2)`
    InverseQuadratic,
    /// `sin(|x|^2)`
    SinSquare,
}

impl NamedAmplitude {
    fn eval(self, y: &[f64], xi: &[f64]) -> f64 {
        let y2: f64 = y.iter().map(|v| v * v).sum();
        match self {
            Self::InverseQuadratic => 1.0 / (1.0 + y2 + xi.iter().map(|v| v * v).sum::<f64>()),
            Self::SinSquare => y2.sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassSpec {
    S00,
    Sg { m1: f64, m2: f64 },
}

impl From<ClassSpec> for SymbolClass {
    fn from(c: ClassSpec) -> Self {
        match c {
            ClassSpec::S00 => SymbolClass::S00,
            ClassSpec::Sg { m1, m2 } => SymbolClass::Sg { m1, m2 },
        }
    }
}

fn default_class() -> ClassSpec {
    ClassSpec::S00
}
fn default_freq_box() -> f64 {
    5.0
}
fn default_samples() -> usize {
    81
}
fn default_order() -> usize {
    2
}
fn default_bound() -> f64 {
    10.0
}
fn default_directions() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplitudeSpec {
    pub name: NamedAmplitude,
    #[serde(default = "default_class")]
    pub class: ClassSpec,
    /// Space half-widths to sample, one table row each.
    pub boxes: Vec<f64>,
    #[serde(default = "default_freq_box")]
    pub freq_box: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_order")]
    pub max_order: usize,
    #[serde(default = "default_bound")]
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolCheckSpec {
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<AmplitudeSpec>,
}

impl Default for SymbolCheckSpec {
    fn default() -> Self {
        Self { directions: default_directions(), amplitude: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotlarSpec {
    pub profile: BumpProfile,
    /// Members are `T g_k` when present, else the multiplications `g_k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol: Option<SymbolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default = "default_derivative")]
    pub derivative: DerivativeKind,
    #[serde(default)]
    pub egorov: EgorovSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorSpec>,
    #[serde(default)]
    pub symbol_check: SymbolCheckSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cotlar: Option<CotlarSpec>,
}

fn default_derivative() -> DerivativeKind {
    DerivativeKind::Inhomogeneous
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
    pub actual: String,
    pub severity: Severity,
}

impl Violation {
    fn error(field: &str, constraint: impl Into<String>, actual: impl fmt::Display) -> Self {
        Self { field: field.into(), constraint: constraint.into(), actual: actual.to_string(), severity: Severity::Error }
    }

    fn warning(field: &str, constraint: impl Into<String>, actual: impl fmt::Display) -> Self {
        Self {
            field: field.into(),
            constraint: constraint.into(),
            actual: actual.to_string(),
            severity: Severity::Warning,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}: {} (got {})", self.field, self.constraint, self.actual)
    }
}

fn check_grid(spec: &GridSpec, out: &mut Vec<Violation>) -> bool {
    let before = out.len();
    if spec.n < 1 {
        out.push(Violation::error("grid.n", "at least 1", spec.n));
    }
    if !(spec.half_width > 0.0 && spec.half_width.is_finite()) {
        out.push(Violation::error("grid.L", "positive and finite", spec.half_width));
    }
    if spec.points < 4 || spec.points % 2 != 0 {
        out.push(Violation::error("grid.N", "even and at least 4", spec.points));
    }
    if out.len() == before {
        if let Err(e) = spec.build() {
            out.push(Violation::error("grid", "valid grid", e));
        }
    }
    out.len() == before
}

fn check_window(spec: &WindowSpec, out: &mut Vec<Violation>) {
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        out.push(Violation::error("window.T", "positive and finite", spec.horizon));
    }
    if spec.nodes < 2 {
        out.push(Violation::error("window.N_t", "at least 2 nodes", spec.nodes));
    }
    for (i, t) in spec.sweep.iter().enumerate() {
        if !(*t > 0.0 && t.is_finite()) {
            out.push(Violation::error(&format!("window.sweep[{i}]"), "positive and finite", t));
        }
    }
}

fn check_solver(spec: &SolverSpec, out: &mut Vec<Violation>) {
    if spec.max_iters < 1 {
        out.push(Violation::error("solver.max_iters", "at least 1", spec.max_iters));
    }
    if !(spec.tol > 0.0 && spec.tol.is_finite()) {
        out.push(Violation::error("solver.tol", "positive and finite", spec.tol));
    }
}

fn check_operator(op: &OperatorSpec, field: &str, has_symbol: bool, out: &mut Vec<Violation>) {
    match *op {
        OperatorSpec::Identity => {}
        OperatorSpec::Transform { restrict, .. } => {
            if !has_symbol {
                out.push(Violation::error("symbol", "required by a transform operator", "missing"));
            }
            if let Some(h) = restrict {
                if !(h > 0.0) {
                    out.push(Violation::error(&format!("{field}.restrict"), "positive", h));
                }
            }
        }
        OperatorSpec::Dilation { factor, restrict, .. } => {
            if !(factor > 0.0 && factor.is_finite()) {
                out.push(Violation::error(&format!("{field}.factor"), "positive and finite", factor));
            }
            if let Some(h) = restrict {
                if !(h > 0.0) {
                    out.push(Violation::error(&format!("{field}.restrict"), "positive", h));
                }
            }
        }
    }
}

/// Every problem that would stop `kind` from running, plus warnings for runs
/// outside the hypotheses of the underlying estimates.
pub fn validate_config(config: &ExperimentConfig, kind: ExperimentKind) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Some(declared) = config.experiment {
        if declared != kind {
            out.push(Violation::error("experiment", format!("must match the subcommand `{kind}`"), declared));
        }
    }
    let grid_ok = match &config.grid {
        Some(g) => check_grid(g, &mut out),
        None => {
            out.push(Violation::error("grid", "required", "missing"));
            false
        }
    };
    let needs_symbol = match kind {
        ExperimentKind::Egorov | ExperimentKind::Smoothing | ExperimentKind::SymbolCheck => true,
        ExperimentKind::Norm => matches!(config.operator, Some(OperatorSpec::Transform { .. })),
        ExperimentKind::Cotlar => {
            matches!(config.cotlar.as_ref().and_then(|c| c.operator), Some(OperatorSpec::Transform { .. }))
        }
    };
    match (&config.symbol, &config.grid) {
        (Some(s), Some(g)) if grid_ok && needs_symbol => match s.build(g.n) {
            Ok(p) => {
                if p.uses_finite_differences() {
                    out.push(Violation::warning("symbol", "analytic derivatives", "finite differences"));
                }
                if kind != ExperimentKind::Norm && kind != ExperimentKind::Cotlar && g.n >= 2 {
                    if let Err(e) = gauss_phase(&p) {
                        out.push(Violation::error("symbol", "Gauss map must exist", e));
                    }
                }
            }
            Err(e) => out.push(Violation::error("symbol", "valid symbol for grid.n", e)),
        },
        (None, _) if needs_symbol => out.push(Violation::error("symbol", "required", "missing")),
        _ => {}
    }
    match kind {
        ExperimentKind::Egorov => {
            let e = &config.egorov;
            if !(e.width > 0.0 && e.width.is_finite()) {
                out.push(Violation::error("egorov.width", "positive and finite", e.width));
            }
            for (i, &np) in e.resolutions.iter().enumerate() {
                if np < 4 || np % 2 != 0 {
                    out.push(Violation::error(&format!("egorov.resolutions[{i}]"), "even and at least 4", np));
                }
            }
        }
        ExperimentKind::Smoothing => {
            match &config.window {
                Some(w) => check_window(w, &mut out),
                None => out.push(Violation::error("window", "required for smoothing", "missing")),
            }
            if !config.weights.delta.is_finite() {
                out.push(Violation::error("weights.delta", "finite", config.weights.delta));
            }
            check_solver(&config.solver, &mut out);
            if let Some(g) = &config.grid {
                if g.n < 3 {
                    out.push(Violation::warning("grid.n", SMOOTHING_DIMENSION_WARNING, g.n));
                }
            }
        }
        ExperimentKind::Norm => {
            check_solver(&config.solver, &mut out);
            let w = &config.weights;
            for (name, v) in [("weights.m_in", w.m_in), ("weights.m_out", w.m_out)] {
                if !v.is_finite() {
                    out.push(Violation::error(name, "finite", v));
                }
            }
            match &config.operator {
                Some(op) => check_operator(op, "operator", config.symbol.is_some(), &mut out),
                None => out.push(Violation::error("operator", "required for norm", "missing")),
            }
            if let Some(g) = &config.grid {
                let limit = g.n as f64 / 2.0;
                for (name, v) in [("weights.m_in", w.m_in), ("weights.m_out", w.m_out)] {
                    if v.abs() >= limit && !matches!(config.operator, Some(OperatorSpec::Identity)) {
                        out.push(Violation::warning(name, format!("|m| < n/2 = {limit}"), v));
                    }
                }
            }
        }
        ExperimentKind::SymbolCheck => {
            let s = &config.symbol_check;
            if s.directions < 1 {
                out.push(Violation::error("symbol_check.directions", "at least 1", s.directions));
            }
            if let Some(a) = &s.amplitude {
                if a.boxes.is_empty() {
                    out.push(Violation::error("symbol_check.amplitude.boxes", "non-empty", "[]"));
                }
                for (i, b) in a.boxes.iter().enumerate() {
                    if !(*b > 0.0 && b.is_finite()) {
                        out.push(Violation::error(&format!("symbol_check.amplitude.boxes[{i}]"), "positive", b));
                    }
                }
                if !(a.freq_box > 0.0 && a.freq_box.is_finite()) {
                    out.push(Violation::error("symbol_check.amplitude.freq_box", "positive", a.freq_box));
                }
                if a.samples < 2 * a.max_order.div_ceil(2) + 1 {
                    out.push(Violation::error(
                        "symbol_check.amplitude.samples",
                        format!("at least {} for max_order {}", 2 * a.max_order.div_ceil(2) + 1, a.max_order),
                        a.samples,
                    ));
                }
                if a.max_order < 1 {
                    out.push(Violation::error("symbol_check.amplitude.max_order", "at least 1", a.max_order));
                }
                if !(a.bound > 0.0) {
                    out.push(Violation::error("symbol_check.amplitude.bound", "positive", a.bound));
                }
            }
        }
        ExperimentKind::Cotlar => {
            check_solver(&config.solver, &mut out);
            match &config.cotlar {
                Some(c) => {
                    if let Some(g) = &config.grid {
                        let period = 2.0 * g.half_width;
                        if (period - period.round()).abs() > 1e-12 {
                            out.push(Violation::error("grid.L", "2L must be an integer for the unit lattice", g.half_width));
                        }
                    }
                    if let BumpProfile::TruncatedGaussian { sigma, cutoff } = c.profile {
                        if !(sigma > 0.0 && cutoff > 0.0) {
                            out.push(Violation::error("cotlar.profile", "positive sigma and cutoff", format!("{sigma}, {cutoff}")));
                        }
                    }
                    if let Some(op) = &c.operator {
                        check_operator(op, "cotlar.operator", config.symbol.is_some(), &mut out);
                    }
                }
                None => out.push(Violation::error("cotlar", "required for cotlar", "missing")),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EgorovRow {
    #[serde(rename = "N")]
    pub points: usize,
    pub residual: Option<f64>,
    pub tail_fraction: Option<f64>,
    pub fast_path: bool,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EgorovResults {
    pub symbol: String,
    pub multiplier: ConjugatedMultiplier,
    pub rows: Vec<EgorovRow>,
    /// First residual over last residual when the sweep has several rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingRow {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N_t")]
    pub nodes: usize,
    pub constant: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingResults {
    pub symbol: String,
    pub delta: f64,
    pub derivative: DerivativeKind,
    pub rows: Vec<SmoothingRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pairwise_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormResults {
    pub label: String,
    pub m_in: f64,
    pub m_out: f64,
    #[serde(rename = "N")]
    pub points: usize,
    #[serde(rename = "L")]
    pub half_width: f64,
    pub estimate: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmplitudeRow {
    #[serde(rename = "box")]
    pub half_width: f64,
    pub passes: Option<bool>,
    pub worst_constant: Option<f64>,
    pub worst_multi_index: Vec<usize>,
    pub worst_point: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolCheckResults {
    pub symbol: String,
    pub finite_difference: bool,
    pub curvature: Option<crate::symbol::CurvatureReport>,
    pub jacobian: Option<crate::symbol::JacobianReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub amplitude: Vec<AmplitudeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CotlarResults {
    pub members: usize,
    pub partition_defect: f64,
    pub bound: f64,
    pub sum_norm: f64,
    pub sum_iterations: usize,
    pub sum_converged: bool,
    pub lower_confidence: bool,
    pub gamma: Vec<crate::normest::GammaEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Results {
    Egorov(EgorovResults),
    Smoothing(SmoothingResults),
    Norm(NormResults),
    SymbolCheck(SymbolCheckResults),
    Cotlar(CotlarResults),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRecord {
    pub toolkit_version: String,
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub results: Results,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

fn cell<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: ReportRecord,
    pub table: Option<Table>,
    /// Sub-runs that ended in a numerical error.
    pub failures: usize,
}

#[derive(Debug)]
pub enum RunError {
    Invalid(Vec<Violation>),
    Numerical(Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Invalid(v) => {
                let lines: Vec<String> = v.iter().filter(|x| x.is_error()).map(|x| x.to_string()).collect();
                write!(f, "invalid config:\n{}", lines.join("\n"))
            }
            Self::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        Self::Numerical(e)
    }
}

fn gaussian(grid: Grid, width: f64) -> crate::error::Result<Field> {
    Field::from_real_fn(grid, |x| (-x.iter().map(|v| v * v).sum::<f64>() / (2.0 * width * width)).exp())
}

fn build_operator(op: &OperatorSpec, grid: Grid, symbol: Option<&HomogeneousSymbol>) -> crate::error::Result<OperatorHandle> {
    let (map, direction, path, restrict) = match *op {
        OperatorSpec::Identity => return Ok(Arc::new(Identity::new(grid))),
        OperatorSpec::Transform { direction, path, restrict } => {
            let p = symbol.ok_or(Error::InvalidParameter { name: "symbol", reason: "required".into() })?;
            (gauss_phase(p)?, direction, path, restrict)
        }
        OperatorSpec::Dilation { factor, direction, path, restrict } => {
            (CanonicalMap::scaling(grid.dim(), factor)?, direction, path, restrict)
        }
    };
    let t: OperatorHandle = Arc::new(CanonicalTransform::new(grid, &map, direction, path)?);
    Ok(match restrict {
        Some(h) => Arc::new(Compose::new(vec![t, Arc::new(PointwiseWeight::cube_indicator(grid, h))])?),
        None => t,
    })
}

fn run_egorov(config: &ExperimentConfig, grid: GridSpec, p: &HomogeneousSymbol) -> (EgorovResults, Table, usize) {
    let spec = &config.egorov;
    let resolutions = if spec.resolutions.is_empty() { vec![grid.points] } else { spec.resolutions.clone() };
    let mut failures = 0;
    let rows: Vec<EgorovRow> = resolutions
        .iter()
        .map(|&np| {
            let attempt = || -> crate::error::Result<(f64, f64, bool)> {
                let g = Grid::new(grid.n, grid.half_width, np)?;
                let u = gaussian(g, spec.width)?;
                match spec.multiplier {
                    ConjugatedMultiplier::Laplacian => {
                        let r = egorov_residual(p, &u, spec.path)?;
                        Ok((r.residual, r.tail_fraction, r.fast_path))
                    }
                    ConjugatedMultiplier::JapaneseSqrt => {
                        let psi = gauss_phase(p)?;
                        let r = conjugation_residual(&psi, |xi| Complex64::new(japanese(xi).sqrt(), 0.0), &u, spec.path)?;
                        let fast = CanonicalTransform::new(g, &psi, Direction::Forward, spec.path)?.uses_fast_path();
                        Ok((r, forward_transform(&u).outer_shell_fraction(), fast))
                    }
                }
            };
            match attempt() {
                Ok((residual, tail, fast)) => EgorovRow {
                    points: np,
                    residual: Some(residual),
                    tail_fraction: Some(tail),
                    fast_path: fast,
                    converged: true,
                    error: None,
                },
                Err(e) => {
                    failures += 1;
                    EgorovRow {
                        points: np,
                        residual: None,
                        tail_fraction: None,
                        fast_path: false,
                        converged: false,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let reduction_factor = match (rows.first().and_then(|r| r.residual), rows.last().and_then(|r| r.residual)) {
        (Some(a), Some(b)) if rows.len() > 1 && b > 0.0 => Some(a / b),
        _ => None,
    };
    let table = Table {
        header: vec!["N", "residual", "tail_fraction", "fast_path", "converged", "error"],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.points.to_string(),
                    cell(r.residual),
                    cell(r.tail_fraction),
                    r.fast_path.to_string(),
                    r.converged.to_string(),
                    r.error.as_deref().map(quoted).unwrap_or_default(),
                ]
            })
            .collect(),
    };
    (EgorovResults { symbol: p.label(), multiplier: spec.multiplier, rows, reduction_factor }, table, failures)
}

fn run_smoothing(
    config: &ExperimentConfig,
    grid: Grid,
    p: &HomogeneousSymbol,
    window: &WindowSpec,
) -> (SmoothingResults, Table, usize) {
    let options = PowerOptions { max_iters: config.solver.max_iters, tol: config.solver.tol };
    let delta = config.weights.delta;
    let windows: Vec<crate::error::Result<TimeWindow>> = if window.sweep.is_empty() {
        vec![TimeWindow::new(window.horizon, window.nodes)]
    } else {
        window.sweep.iter().map(|&t| TimeWindow::with_rate(t, window.rate())).collect()
    };
    let horizons: Vec<f64> = if window.sweep.is_empty() { vec![window.horizon] } else { window.sweep.clone() };
    let mut failures = 0;
    let rows: Vec<SmoothingRow> = windows
        .into_iter()
        .zip(&horizons)
        .map(|(w, &t)| {
            let run = w.and_then(|w| {
                smoothing_constant(p, grid, w, delta, config.derivative, config.seed, options).map(|c| (w, c))
            });
            match run {
                Ok((w, c)) => SmoothingRow {
                    horizon: t,
                    nodes: w.nodes(),
                    constant: Some(c.constant),
                    iterations: c.iterations,
                    converged: c.converged,
                    error: None,
                },
                Err(e) => {
                    failures += 1;
                    SmoothingRow { horizon: t, nodes: 0, constant: None, iterations: 0, converged: false, error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    let constants: Vec<f64> = rows.iter().filter_map(|r| r.constant).collect();
    let max_pairwise = (rows.len() > 1 && constants.len() == rows.len()).then(|| max_pairwise_deviation(&constants));
    let table = Table {
        header: vec!["T", "N_t", "constant", "iterations", "converged", "error"],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.horizon.to_string(),
                    r.nodes.to_string(),
                    cell(r.constant),
                    r.iterations.to_string(),
                    r.converged.to_string(),
                    r.error.as_deref().map(quoted).unwrap_or_default(),
                ]
            })
            .collect(),
    };
    let results = SmoothingResults {
        symbol: p.label(),
        delta,
        derivative: config.derivative,
        rows,
        max_pairwise_deviation: max_pairwise,
    };
    (results, table, failures)
}

fn run_symbol_check(config: &ExperimentConfig, dim: usize, p: &HomogeneousSymbol) -> (SymbolCheckResults, Option<Table>, usize) {
    let spec = &config.symbol_check;
    let mut failures = 0;
    let (curvature, jacobian) = if dim >= 2 {
        let curvature = check_curvature(p, spec.directions).map_err(|_| failures += 1).ok();
        let jacobian = gauss_phase(p).map(|psi| check_jacobian_bound(&psi, spec.directions)).map_err(|_| failures += 1).ok();
        (curvature, jacobian)
    } else {
        (None, None)
    };
    let mut rows = Vec::new();
    if let Some(a) = &spec.amplitude {
        for &b in &a.boxes {
            let run = SymbolClassSpec::new(a.class.into(), a.max_order, a.bound).and_then(|cls| {
                let sampled = SampledAmplitude::from_fn(
                    vec![SampleAxis::symmetric(b, a.samples); dim],
                    vec![SampleAxis::symmetric(a.freq_box, a.samples); dim],
                    |y, xi| Complex64::new(a.name.eval(y, xi), 0.0),
                );
                check_symbol_class(&sampled, &cls)
            });
            rows.push(match run {
                Ok(r) => AmplitudeRow {
                    half_width: b,
                    passes: Some(r.passes),
                    worst_constant: Some(r.worst_constant),
                    worst_multi_index: r.worst_multi_index,
                    worst_point: r.worst_point,
                    error: None,
                },
                Err(e) => {
                    failures += 1;
                    AmplitudeRow {
                        half_width: b,
                        passes: None,
                        worst_constant: None,
                        worst_multi_index: Vec::new(),
                        worst_point: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    let table = (!rows.is_empty()).then(|| Table {
        header: vec!["box", "passes", "worst_constant", "error"],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.half_width.to_string(),
                    cell(r.passes),
                    cell(r.worst_constant),
                    r.error.as_deref().map(quoted).unwrap_or_default(),
                ]
            })
            .collect(),
    });
    let results = SymbolCheckResults {
        symbol: p.label(),
        finite_difference: p.uses_finite_differences(),
        curvature,
        jacobian,
        amplitude: rows,
    };
    (results, table, failures)
}

fn run_cotlar(config: &ExperimentConfig, grid: Grid, spec: &CotlarSpec, p: Option<&HomogeneousSymbol>) -> Result<(CotlarResults, Table), RunError> {
    let partition = decompose_unity(spec.profile, grid)?;
    let weights = partition.weight_family()?;
    let family = match &spec.operator {
        Some(op) => {
            let t = build_operator(op, grid, p)?;
            let members = weights
                .members()
                .iter()
                .map(|g| Compose::new(vec![t.clone(), g.clone()]).map(|c| Arc::new(c) as OperatorHandle))
                .collect::<crate::error::Result<Vec<_>>>()?;
            OperatorFamily::new(weights.indices().to_vec(), members)?
        }
        None => weights,
    };
    let report = cotlar_bound(&family, config.solver.max_iters, config.solver.tol, config.seed)?;
    let table = Table {
        header: vec!["offset", "gamma"],
        rows: report
            .gamma
            .iter()
            .map(|g| {
                let offset: Vec<String> = g.offset.iter().map(|v| v.to_string()).collect();
                vec![quoted(&offset.join(" ")), g.value.to_string()]
            })
            .collect(),
    };
    let results = CotlarResults {
        members: family.len(),
        partition_defect: partition.max_defect,
        bound: report.bound,
        sum_norm: report.sum_norm.estimate,
        sum_iterations: report.sum_norm.iterations,
        sum_converged: report.sum_norm.converged,
        lower_confidence: report.lower_confidence,
        gamma: report.gamma,
    };
    Ok((results, table))
}

/// Validates, runs, and assembles the report. Nothing is written to disk.
pub fn run_experiment(config: &ExperimentConfig, kind: ExperimentKind) -> Result<Outcome, RunError> {
    let violations = validate_config(config, kind);
    if violations.iter().any(Violation::is_error) {
        return Err(RunError::Invalid(violations));
    }
    let mut warnings: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
    let grid_spec = config.grid.expect("validated");
    let grid = grid_spec.build()?;
    let symbol = match &config.symbol {
        Some(s) => Some(s.build(grid_spec.n)?),
        None => None,
    };
    let (results, table, failures) = match kind {
        ExperimentKind::Egorov => {
            let p = symbol.as_ref().expect("validated");
            let (r, t, f) = run_egorov(config, grid_spec, p);
            for row in &r.rows {
                if let Some(tail) = row.tail_fraction {
                    if tail > crate::fio::TAIL_THRESHOLD {
                        warnings.push(format!("N={}: spectral tail fraction {tail:.3e} exceeds {:e}", row.points, crate::fio::TAIL_THRESHOLD));
                    }
                }
            }
            let sweep = r.rows.len() > 1;
            (Results::Egorov(r), sweep.then_some(t), f)
        }
        ExperimentKind::Smoothing => {
            let p = symbol.as_ref().expect("validated");
            let window = config.window.as_ref().expect("validated");
            let (r, t, f) = run_smoothing(config, grid, p, window);
            let sweep = !window.sweep.is_empty();
            (Results::Smoothing(r), sweep.then_some(t), f)
        }
        ExperimentKind::Norm => {
            let op = build_operator(config.operator.as_ref().expect("validated"), grid, symbol.as_ref())?;
            let task = WeightedNormTask::new(op.clone())
                .weights(config.weights.m_in, config.weights.m_out)
                .iterations(config.solver.max_iters, config.solver.tol)
                .seed(config.seed);
            let est = operator_norm(&task)?;
            let r = NormResults {
                label: op.label(),
                m_in: config.weights.m_in,
                m_out: config.weights.m_out,
                points: grid.points_per_axis(),
                half_width: grid.half_width(),
                estimate: est.estimate,
                iterations: est.iterations,
                converged: est.converged,
            };
            (Results::Norm(r), None, 0)
        }
        ExperimentKind::SymbolCheck => {
            let p = symbol.as_ref().expect("validated");
            let (r, t, f) = run_symbol_check(config, grid.dim(), p);
            if r.curvature.as_ref().is_some_and(|c| c.flagged) {
                warnings.push("curvature of the level set is near zero".into());
            }
            (Results::SymbolCheck(r), t, f)
        }
        ExperimentKind::Cotlar => {
            let spec = config.cotlar.as_ref().expect("validated");
            let (r, t) = run_cotlar(config, grid, spec, symbol.as_ref())?;
            if r.lower_confidence {
                warnings.push("some pairwise power iterations did not converge".into());
            }
            (Results::Cotlar(r), Some(t), 0)
        }
    };
    let report = ReportRecord {
        toolkit_version: VERSION.to_string(),
        experiment: kind,
        seed: config.seed,
        config: config.clone(),
        warnings,
        results,
    };
    Ok(Outcome { report, table, failures })
}

pub fn report_json(report: &ReportRecord) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Timing {
    wall_clock_seconds: f64,
}

/// Writes `report.json`, `table.csv` when there is a table, and
/// `timing.json`. Timing is kept out of the report so reports compare
/// byte for byte.
pub fn write_outputs(dir: &Path, outcome: &Outcome, seconds: f64) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report_json(&outcome.report))?;
    if let Some(t) = &outcome.table {
        fs::write(dir.join("table.csv"), t.to_csv())?;
    }
    let timing = serde_json::to_string_pretty(&Timing { wall_clock_seconds: seconds }).expect("timing serializes");
    fs::write(dir.join("timing.json"), timing + "\n")
}

#[derive(Debug, Parser)]
#[command(name = "fiokit", version, about = "Canonical transforms and dispersive smoothing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    Egorov,
    Smoothing,
    Norm,
    SymbolCheck,
    Cotlar,
    /// Check a config without running it.
    Validate,
}

impl Command {
    fn kind(self) -> Option<ExperimentKind> {
        match self {
            Self::Egorov => Some(ExperimentKind::Egorov),
            Self::Smoothing => Some(ExperimentKind::Smoothing),
            Self::Norm => Some(ExperimentKind::Norm),
            Self::SymbolCheck => Some(ExperimentKind::SymbolCheck),
            Self::Cotlar => Some(ExperimentKind::Cotlar),
            Self::Validate => None,
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Runs the command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_INVALID;
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let Some(path) = cli.config.as_deref() else {
        eprintln!("error: --config <path> is required");
        return EXIT_INVALID;
    };
    let mut config = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let kind = match cli.command.kind() {
        Some(k) => k,
        None => {
            let Some(k) = config.experiment else {
                eprintln!("error: experiment: required for validate (got missing)");
                return EXIT_INVALID;
            };
            let violations = validate_config(&config, k);
            for v in &violations {
                println!("{v}");
            }
            if violations.iter().any(Violation::is_error) {
                return EXIT_INVALID;
            }
            println!("ok");
            return EXIT_OK;
        }
    };
    let dir = cli.out.clone().or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("fiokit-out"));
    let start = Instant::now();
    let outcome = match run_experiment(&config, kind) {
        Ok(o) => o,
        Err(RunError::Invalid(v)) => {
            for x in &v {
                eprintln!("{x}");
            }
            return EXIT_INVALID;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NUMERICAL;
        }
    };
    for w in &outcome.report.warnings {
        eprintln!("{w}");
    }
    if let Err(e) = write_outputs(&dir, &outcome, start.elapsed().as_secs_f64()) {
        eprintln!("error: writing {}: {e}", dir.display());
        return EXIT_NUMERICAL;
    }
    println!("{}", dir.join("report.json").display());
    if outcome.failures > 0 {
        eprintln!("{} sub-run(s) failed; see the report", outcome.failures);
        return EXIT_NUMERICAL;
    }
    EXIT_OK
}
