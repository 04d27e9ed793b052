//! Benchmark harness: configuration, hyperparameter schedules,
//! cross-validation, error metrics, Casimir correction, convergence
//! studies, and heatmap export.
//!
//! Every experiment is a pure function of its configuration and seed.
//! Randomness flows through tagged streams derived from the seed, grid
//! and convergence units are assembled in index order, and floats are
//! rendered with shortest round-trip formatting, so repeated runs
//! produce byte-identical CSV output. Reports embed the configuration
//! hash and the seed.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{self, DistanceMetric, Trajectory};
use crate::error::{Error, Result};
use crate::estimator::{fit, ConditioningReport, Estimator, TrainingSet};
use crate::geometry::PhasePoint;
use crate::kernels::{self, Gaussian, Kernel};
use crate::sampling::{self, SampleKind, SampleSpec};
use crate::systems::{self, SystemModel, VehicleParams};
use crate::tol;

/// Which benchmark system to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SystemSpec {
    RigidBody { inertia: [f64; 3] },
    UnderwaterVehicle {
        #[serde(default)]
        params: VehicleParams,
    },
    GaussianSection { eta: f64 },
    TwoVortex { strengths: [f64; 2] },
    SphericalNorm3,
}

impl SystemSpec {
    pub fn build(&self) -> Result<SystemModel> {
        match self {
            SystemSpec::RigidBody { inertia } => systems::rigid_body(*inertia),
            SystemSpec::UnderwaterVehicle { params } => {
                systems::underwater_vehicle(params.clone())
            }
            SystemSpec::GaussianSection { eta } => systems::gaussian_section(*eta),
            SystemSpec::TwoVortex { strengths } => {
                systems::two_vortex(strengths[0], strengths[1])
            }
            SystemSpec::SphericalNorm3 => Ok(systems::spherical_norm3()),
        }
    }
}

/// Kernel family; the bandwidth comes from the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Gaussian on the state space, restricted to the chart embedding
    /// for sphere systems.
    Gaussian,
    /// Gaussian composed with the rotation orbit map
    /// `(x1, x2, x3) -> (x1^2 + x2^2, x3)`; estimates are invariant
    /// under rotation about the third axis. Three-dimensional Euclidean
    /// systems only.
    RotationInvariant,
}

/// Builds the kernel for one grid cell.
pub fn build_kernel(
    family: KernelFamily,
    system: &SystemModel,
    eta: f64,
) -> Result<Arc<dyn Kernel>> {
    match family {
        KernelFamily::Gaussian => match system.chart() {
            Some(chart) => {
                let base = Arc::new(Gaussian::new(chart.ambient_dim(), eta)?);
                Ok(Arc::new(kernels::chart_restricted(base, chart)?))
            }
            None => Ok(Arc::new(Gaussian::new(system.dim(), eta)?)),
        },
        KernelFamily::RotationInvariant => {
            if system.dim() != 3 || system.chart().is_some() {
                return Err(Error::InvalidParameter(
                    "rotation-invariant kernel needs a 3-dimensional Euclidean state".into(),
                ));
            }
            let base = Arc::new(Gaussian::new(2, eta)?);
            Ok(Arc::new(kernels::invariant(
                base,
                3,
                |x: &DVector<f64>| {
                    DVector::from_vec(vec![x[0] * x[0] + x[1] * x[1], x[2]])
                },
                |x: &DVector<f64>| {
                    DMatrix::from_row_slice(2, 3, &[2.0 * x[0], 2.0 * x[1], 0.0, 0.0, 0.0, 1.0])
                },
            )?))
        }
    }
}

/// Two-axis slice through the state space for grid evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    /// State indices of the two free axes (axis1, axis2).
    pub axes: [usize; 2],
    /// Values of the remaining coordinates; entries under `axes` are
    /// ignored.
    pub base: Vec<f64>,
    /// Per-axis (lower, upper) ranges.
    pub ranges: [(f64, f64); 2],
    /// Cells per axis.
    pub resolution: usize,
}

impl HeatmapSpec {
    pub fn validate(&self) -> Result<()> {
        let dim = self.base.len();
        if self.axes[0] >= dim || self.axes[1] >= dim || self.axes[0] == self.axes[1] {
            return Err(Error::InvalidParameter(format!(
                "slice axes {:?} invalid for dimension {dim}",
                self.axes
            )));
        }
        if self.resolution < 2 {
            return Err(Error::InvalidParameter(
                "slice resolution must be at least 2".into(),
            ));
        }
        for &(lo, hi) in &self.ranges {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "invalid slice range ({lo}, {hi})"
                )));
            }
        }
        if self.base.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(0));
        }
        Ok(())
    }
}

/// Initial condition and step plan for flow comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub initial: Vec<f64>,
    pub dt: f64,
    pub t_final: f64,
}

fn default_alpha() -> f64 {
    0.4
}

fn default_folds() -> usize {
    5
}

fn default_test_count() -> usize {
    1000
}

fn default_kernel() -> KernelFamily {
    KernelFamily::Gaussian
}

fn default_resolution() -> usize {
    50
}

/// Complete description of one experiment; the JSON config files mirror
/// this struct field for field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub sample_count: usize,
    /// Cube bounds for Euclidean systems; `None` means `[-1, 1]^d`.
    /// Ignored for sphere systems.
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Noise level on observed fields.
    #[serde(default)]
    pub sigma: f64,
    pub seed: u64,
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    /// Bandwidth grid; single-entry grids fix the bandwidth.
    pub eta_grid: Vec<f64>,
    /// Grid for the ridge scale `c` in `lambda = c * N^(-alpha)`.
    pub c_grid: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    /// Evaluation slice; `None` picks the system default.
    #[serde(default)]
    pub heatmap: Option<HeatmapSpec>,
    /// Flow-comparison plan; `None` picks the system default.
    #[serde(default)]
    pub flow: Option<FlowSpec>,
    /// Training-set sizes for convergence studies.
    #[serde(default)]
    pub convergence_ns: Vec<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::InvalidParameter("sample_count must be at least 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.eta_grid.is_empty() || self.c_grid.is_empty() {
            return Err(Error::InvalidParameter("parameter grids must be nonempty".into()));
        }
        for &eta in &self.eta_grid {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(Error::InvalidParameter(format!("invalid bandwidth {eta}")));
            }
        }
        for &c in &self.c_grid {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParameter(format!("invalid ridge scale {c}")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.folds < 2 {
            return Err(Error::InvalidParameter("cross-validation needs at least 2 folds".into()));
        }
        if self.test_count == 0 {
            return Err(Error::InvalidParameter("test_count must be at least 1".into()));
        }
        if let Some(h) = &self.heatmap {
            h.validate()?;
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON rendering, as lowercase hex.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Ridge schedule `lambda = c * N^(-alpha)`.
pub fn lambda_schedule(c: f64, n: usize, alpha: f64) -> Result<f64> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParameter(format!("ridge scale must be positive, got {c}")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ridge exponent must be positive, got {alpha}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    Ok(c * (n as f64).powf(-alpha))
}

/// Squared length of `v` in the system metric at `z`.
fn metric_norm_sq(system: &SystemModel, z: &PhasePoint, v: &DVector<f64>) -> Result<f64> {
    if system.structure().is_euclidean() {
        Ok(v.norm_squared())
    } else {
        let g = system.structure().metric_matrix(z)?;
        Ok(v.dot(&(g * v)))
    }
}

/// Fits and attaches the system chart so evaluation validates inputs.
pub fn fit_for_system(
    ts: &TrainingSet,
    system: &SystemModel,
    kernel: Arc<dyn Kernel>,
    lambda: f64,
) -> Result<Estimator> {
    let est = fit(ts, kernel, system.structure(), lambda)?;
    Ok(match system.chart() {
        Some(chart) => est.with_chart(chart.clone()),
        None => est,
    })
}

/// Test points from the system's natural domain. Two-vortex test sets
/// additionally stay out of the singular band where the field error is
/// unbounded.
pub fn sample_test_points(
    cfg: &ExperimentConfig,
    system: &SystemModel,
    count: usize,
    tag: &str,
) -> Result<Vec<PhasePoint>> {
    match system.chart() {
        Some(chart) => {
            let spec = SampleSpec {
                kind: SampleKind::SphereProduct {
                    factors: chart.dim() / 2,
                },
                count,
                seed: cfg.seed,
            };
            let tagged = format!("{tag}:points");
            if matches!(cfg.system, SystemSpec::TwoVortex { .. }) {
                let c = chart.clone();
                let accept = move |z: &PhasePoint| {
                    1.0 - systems::vortex_alignment(&c, z) >= tol::VORTEX_GRID_BAND
                };
                sampling::sample_sphere_product(&spec, &tagged, Some(&accept))
            } else {
                let accept = system
                    .sample_predicate()
                    .map(|p| p.as_ref() as &dyn Fn(&PhasePoint) -> bool);
                sampling::sample_sphere_product(&spec, &tagged, accept)
            }
        }
        None => {
            let bounds = cfg
                .bounds
                .clone()
                .unwrap_or_else(|| vec![(-1.0, 1.0); system.dim()]);
            let spec = SampleSpec {
                kind: SampleKind::Cube { bounds },
                count,
                seed: cfg.seed,
            };
            sampling::sample_cube(&spec, &format!("{tag}:points"))
        }
    }
}

/// Mean squared vector-field error in the system metric.
pub fn vf_mse(est: &Estimator, system: &SystemModel, points: &[PhasePoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("test points".into()));
    }
    let mut sum = 0.0;
    for z in points {
        let diff = est.evaluate_field(z)? - system.vector_field(z)?;
        sum += metric_norm_sq(system, z, &diff)?;
    }
    Ok(sum / points.len() as f64)
}

/// Vector-field RMSE relative to the RMS norm of the true field.
pub fn vf_relative_rmse(
    est: &Estimator,
    system: &SystemModel,
    points: &[PhasePoint],
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("test points".into()));
    }
    let mut err = 0.0;
    let mut scale = 0.0;
    for z in points {
        let truth = system.vector_field(z)?;
        let diff = est.evaluate_field(z)? - &truth;
        err += metric_norm_sq(system, z, &diff)?;
        scale += metric_norm_sq(system, z, &truth)?;
    }
    if scale == 0.0 {
        return Err(Error::InvalidParameter(
            "true field vanishes on the test set; relative error undefined".into(),
        ));
    }
    Ok((err / scale).sqrt())
}

/// Hamiltonian error statistics after the optimal constant shift.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HErrorReport {
    /// `max |h_hat + shift - H|`.
    pub max_abs: f64,
    /// Root mean square of the shifted residual.
    pub rms: f64,
    /// The applied shift `mean(H - h_hat)`.
    pub shift: f64,
    /// `max H - min H` over the evaluation points.
    pub h_range: f64,
    /// `max |H|` over the evaluation points.
    pub h_max_abs: f64,
}

/// Shift-invariant error between two scalar samples: the estimate is
/// first shifted by the mean discrepancy, which is the best constant in
/// least squares.
pub fn shifted_error_stats(h_true: &[f64], h_hat: &[f64]) -> Result<HErrorReport> {
    if h_true.is_empty() || h_true.len() != h_hat.len() {
        return Err(Error::InvalidParameter(
            "shifted error needs matching nonempty samples".into(),
        ));
    }
    let n = h_true.len() as f64;
    let shift = h_true
        .iter()
        .zip(h_hat)
        .map(|(t, e)| t - e)
        .sum::<f64>()
        / n;
    let mut max_abs = 0.0f64;
    let mut sq = 0.0f64;
    for (t, e) in h_true.iter().zip(h_hat) {
        let r = (e + shift - t).abs();
        max_abs = max_abs.max(r);
        sq += r * r;
    }
    let h_max = h_true.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let h_min = h_true.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let h_max_abs = h_true.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    Ok(HErrorReport {
        max_abs,
        rms: (sq / n).sqrt(),
        shift,
        h_range: h_max - h_min,
        h_max_abs,
    })
}

/// Worst absolute Hamiltonian error over `points` after the optimal
/// constant shift.
pub fn h_error(
    est: &Estimator,
    system: &SystemModel,
    points: &[PhasePoint],
) -> Result<HErrorReport> {
    let mut h_true = Vec::with_capacity(points.len());
    let mut h_hat = Vec::with_capacity(points.len());
    for z in points {
        h_true.push(system.hamiltonian(z)?);
        h_hat.push(est.evaluate_h(z)?);
    }
    shifted_error_stats(&h_true, &h_hat)
}

/// Result of regressing the Hamiltonian residual on `{1, C_1, ..., C_m}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CasimirCorrection {
    /// Fitted constant offset.
    pub constant: f64,
    /// Fitted Casimir coefficients, one per listed Casimir.
    pub coefficients: Vec<f64>,
    /// `max |h_hat + constant + sum_i a_i C_i - H|` over the points.
    pub max_abs: f64,
    /// Root mean square of the corrected residual.
    pub rms: f64,
    /// Set when the regression matrix is rank deficient; the solution is
    /// then the minimal-norm least-squares solution.
    pub rank_deficient: bool,
}

/// Least-squares fit of `residuals ~ constant + columns * a`. Returns the
/// stacked solution `(constant, a)` and a rank-deficiency flag.
pub fn casimir_regression(
    residuals: &[f64],
    casimir_columns: &DMatrix<f64>,
) -> Result<(DVector<f64>, bool)> {
    let rows = residuals.len();
    if rows == 0 {
        return Err(Error::Empty("regression points".into()));
    }
    if casimir_columns.nrows() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: casimir_columns.nrows(),
        });
    }
    let cols = 1 + casimir_columns.ncols();
    let mut a = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        a[(i, 0)] = 1.0;
        for j in 0..casimir_columns.ncols() {
            a[(i, 1 + j)] = casimir_columns[(i, j)];
        }
    }
    let b = DVector::from_column_slice(residuals);
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let eps = 1e-12 * s_max.max(1.0);
    let rank = svd.rank(eps);
    let solution = svd
        .solve(&b, eps)
        .map_err(|e| Error::LinearSolve(e.to_string()))?;
    Ok((solution, rank < cols))
}

/// Fits a Casimir-plus-constant correction to the learned Hamiltonian
/// over `points` and reports the corrected error. With no Casimirs this
/// degenerates to the constant shift of `h_error`.
pub fn casimir_correct(
    est: &Estimator,
    system: &SystemModel,
    points: &[PhasePoint],
) -> Result<CasimirCorrection> {
    if points.is_empty() {
        return Err(Error::Empty("correction points".into()));
    }
    let m = system.casimirs().len();
    let mut residuals = Vec::with_capacity(points.len());
    let mut columns = DMatrix::zeros(points.len(), m);
    for (i, z) in points.iter().enumerate() {
        residuals.push(system.hamiltonian(z)? - est.evaluate_h(z)?);
        for (j, c) in system.casimirs().iter().enumerate() {
            columns[(i, j)] = c.value(z);
        }
    }
    let (solution, rank_deficient) = casimir_regression(&residuals, &columns)?;
    let mut max_abs = 0.0f64;
    let mut sq = 0.0f64;
    for (i, r) in residuals.iter().enumerate() {
        let mut fitted = solution[0];
        for j in 0..m {
            fitted += solution[1 + j] * columns[(i, j)];
        }
        let e = (fitted - r).abs();
        max_abs = max_abs.max(e);
        sq += e * e;
    }
    Ok(CasimirCorrection {
        constant: solution[0],
        coefficients: solution.as_slice()[1..].to_vec(),
        max_abs,
        rms: (sq / points.len() as f64).sqrt(),
        rank_deficient,
    })
}

/// Seeded k-fold partition: disjoint, covering, sizes within one of each
/// other.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidParameter("cross-validation needs at least 2 folds".into()));
    }
    if n < k {
        return Err(Error::InvalidParameter(format!(
            "cannot split {n} points into {k} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sampling::stream(seed, "cv:folds"));
    let base = n / k;
    let rem = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < rem);
        folds.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}

/// One grid cell of the cross-validation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvEntry {
    pub eta: f64,
    pub c: f64,
    /// Schedule value at the full training size.
    pub lambda: f64,
    /// Held-out mean squared vector-field error.
    pub score: f64,
}

/// Full cross-validation table plus the selected cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvTable {
    pub entries: Vec<CvEntry>,
    pub best_eta: f64,
    pub best_c: f64,
    pub best_score: f64,
}

impl CvTable {
    /// CSV rendering in grid order (bandwidth outer, ridge scale inner).
    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut out = format!("# config_hash={config_hash}, seed={seed}\n");
        out.push_str("eta,c,lambda,score\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.eta, e.c, e.lambda, e.score));
        }
        out
    }
}

/// Grid search over `(eta, c)` scored by k-fold cross-validation on the
/// held-out vector-field error against the observed fields. Ties prefer
/// the smaller bandwidth, then the smaller ridge scale. Grid cells run
/// in parallel; fold splits are shared across cells.
pub fn cross_validate(cfg: &ExperimentConfig, ts: &TrainingSet) -> Result<CvTable> {
    cfg.validate()?;
    let system = cfg.system.build()?;
    let folds = fold_indices(ts.len(), cfg.folds, cfg.seed)?;
    let splits: Result<Vec<(TrainingSet, Vec<usize>)>> = folds
        .iter()
        .map(|held| {
            let mask: std::collections::HashSet<usize> = held.iter().copied().collect();
            let train: Vec<usize> = (0..ts.len()).filter(|i| !mask.contains(i)).collect();
            Ok((ts.subset(&train)?, held.clone()))
        })
        .collect();
    let splits = splits?;

    let mut cells = Vec::new();
    for &eta in &cfg.eta_grid {
        for &c in &cfg.c_grid {
            cells.push((eta, c));
        }
    }
    let scores: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(eta, c)| {
            let kernel = build_kernel(cfg.kernel, &system, eta)?;
            let mut err = 0.0;
            let mut count = 0usize;
            for (train, held) in &splits {
                let lambda = lambda_schedule(c, train.len(), cfg.alpha)?;
                let est = fit(train, kernel.clone(), system.structure(), lambda)?;
                for &i in held {
                    let z = &ts.points()[i];
                    let diff = est.evaluate_field(z)? - &ts.fields()[i];
                    err += metric_norm_sq(&system, z, &diff)?;
                    count += 1;
                }
            }
            Ok(err / count as f64)
        })
        .collect();

    let mut entries = Vec::with_capacity(cells.len());
    for ((eta, c), score) in cells.into_iter().zip(scores) {
        entries.push(CvEntry {
            eta,
            c,
            lambda: lambda_schedule(c, ts.len(), cfg.alpha)?,
            score: score?,
        });
    }
    let mut best = 0usize;
    for (k, e) in entries.iter().enumerate().skip(1) {
        let b = &entries[best];
        let better = e.score < b.score
            || (e.score == b.score && (e.eta < b.eta || (e.eta == b.eta && e.c < b.c)));
        if better {
            best = k;
        }
    }
    Ok(CvTable {
        best_eta: entries[best].eta,
        best_c: entries[best].c,
        best_score: entries[best].score,
        entries,
    })
}

/// One row of a convergence study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub lambda: f64,
    pub vf_mse: f64,
    pub h_abs_err: f64,
}

/// Convergence study table with the fitted log-log slope of the
/// vector-field error against the training size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub slope: f64,
}

impl ConvergenceTable {
    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut out = format!("# config_hash={config_hash}, seed={seed}\n");
        out.push_str("n,lambda,vf_mse,h_abs_err\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.n, r.lambda, r.vf_mse, r.h_abs_err));
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x` over the pairs with
/// positive entries; NaN when fewer than two remain.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(&x, &y)| x > 0.0 && y > 0.0)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in pts {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    cov / var
}

/// Runs the full pipeline at each training size with the scheduled
/// ridge, a fixed test set, and per-size sample streams. Sizes run in
/// parallel; rows are assembled in input order. Uses the first grid
/// entries as the (bandwidth, scale) pair.
pub fn convergence_study(cfg: &ExperimentConfig, ns: &[usize]) -> Result<ConvergenceTable> {
    cfg.validate()?;
    if ns.is_empty() {
        return Err(Error::Empty("convergence sizes".into()));
    }
    if ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "convergence sizes must increase strictly".into(),
        ));
    }
    let system = cfg.system.build()?;
    let eta = cfg.eta_grid[0];
    let c = cfg.c_grid[0];
    let test = sample_test_points(cfg, &system, cfg.test_count, "convergence:test")?;
    let rows: Vec<Result<ConvergenceRow>> = ns
        .par_iter()
        .map(|&n| {
            let ts = TrainingSet::from_system(
                &system,
                n,
                cfg.bounds.as_deref(),
                cfg.sigma,
                cfg.seed,
                &format!("convergence:{n}"),
            )?;
            let lambda = lambda_schedule(c, n, cfg.alpha)?;
            let kernel = build_kernel(cfg.kernel, &system, eta)?;
            let est = fit_for_system(&ts, &system, kernel, lambda)?;
            Ok(ConvergenceRow {
                n,
                lambda,
                vf_mse: vf_mse(&est, &system, &test)?,
                h_abs_err: h_error(&est, &system, &test)?.max_abs,
            })
        })
        .collect();
    let rows: Result<Vec<ConvergenceRow>> = rows.into_iter().collect();
    let rows = rows?;
    let slope = log_log_slope(
        &rows.iter().map(|r| r.n as f64).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.vf_mse).collect::<Vec<_>>(),
    );
    Ok(ConvergenceTable { rows, slope })
}

/// Default evaluation slice: first two state axes free, remaining
/// coordinates zero for Euclidean systems; for sphere systems the first
/// factor's chart square with any further factor pinned on its equator,
/// just inside the chart margin.
pub fn default_heatmap(cfg: &ExperimentConfig, system: &SystemModel) -> HeatmapSpec {
    match system.chart() {
        Some(chart) => {
            let m = tol::SPHERE_CHART_MARGIN;
            let mut base = vec![0.0; chart.dim()];
            let mut k = 2;
            while k + 1 < chart.dim() {
                base[k] = std::f64::consts::FRAC_PI_2;
                base[k + 1] = 2.0 * m;
                k += 2;
            }
            HeatmapSpec {
                axes: [0, 1],
                base,
                ranges: [
                    (m, std::f64::consts::PI - m),
                    (m, std::f64::consts::TAU - m),
                ],
                resolution: default_resolution(),
            }
        }
        None => {
            let bounds = cfg
                .bounds
                .clone()
                .unwrap_or_else(|| vec![(-1.0, 1.0); system.dim()]);
            HeatmapSpec {
                axes: [0, 1],
                base: vec![0.0; system.dim()],
                ranges: [bounds[0], bounds[1]],
                resolution: default_resolution(),
            }
        }
    }
}

/// The configured slice, or the system default.
pub fn resolve_heatmap(cfg: &ExperimentConfig, system: &SystemModel) -> Result<HeatmapSpec> {
    let spec = match &cfg.heatmap {
        Some(h) => h.clone(),
        None => default_heatmap(cfg, system),
    };
    spec.validate()?;
    if spec.base.len() != system.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            got: spec.base.len(),
        });
    }
    Ok(spec)
}

/// Cell-center coordinates of the slice, row-major with axis2 outer.
fn cell_centers(spec: &HeatmapSpec) -> Vec<(f64, f64)> {
    let r = spec.resolution;
    let center = |range: (f64, f64), i: usize| {
        range.0 + (i as f64 + 0.5) * (range.1 - range.0) / r as f64
    };
    let mut out = Vec::with_capacity(r * r);
    for j in 0..r {
        let y = center(spec.ranges[1], j);
        for i in 0..r {
            out.push((center(spec.ranges[0], i), y));
        }
    }
    out
}

/// All cell-center states of the slice, row-major with axis2 outer.
pub fn slice_points(spec: &HeatmapSpec) -> Result<Vec<PhasePoint>> {
    spec.validate()?;
    cell_centers(spec)
        .into_iter()
        .map(|(x, y)| {
            let mut coords = spec.base.clone();
            coords[spec.axes[0]] = x;
            coords[spec.axes[1]] = y;
            PhasePoint::from_slice(&coords)
        })
        .collect()
}

/// Renders `f` over the slice as CSV (`axis1,axis2,value`); cells where
/// `f` fails or returns a non-finite value print `nan`.
pub fn export_heatmap<F>(
    f: F,
    spec: &HeatmapSpec,
    config_hash: &str,
    seed: u64,
) -> Result<String>
where
    F: Fn(&PhasePoint) -> Result<f64>,
{
    let points = slice_points(spec)?;
    let mut out = format!("# config_hash={config_hash}, seed={seed}\n");
    out.push_str("axis1,axis2,value\n");
    for ((x, y), z) in cell_centers(spec).into_iter().zip(&points) {
        match f(z) {
            Ok(v) if v.is_finite() => out.push_str(&format!("{x},{y},{v}\n")),
            _ => out.push_str(&format!("{x},{y},nan\n")),
        }
    }
    Ok(out)
}

/// The four standard heatmaps of one experiment.
#[derive(Clone, Debug)]
pub struct HeatmapSet {
    /// True Hamiltonian over the slice.
    pub h_true: String,
    /// Learned Hamiltonian over the slice.
    pub h_learned: String,
    /// `|h_hat + shift - H|` with the optimal constant shift.
    pub h_error: String,
    /// Squared vector-field error in the system metric.
    pub vf_error: String,
}

/// Exports the heatmap suite over the slice. Two-vortex slices blank the
/// singular band where the field error is dominated by the divergence.
pub fn heatmap_suite(
    cfg: &ExperimentConfig,
    system: &SystemModel,
    est: &Estimator,
    spec: &HeatmapSpec,
    hash: &str,
) -> Result<HeatmapSet> {
    let banded = matches!(cfg.system, SystemSpec::TwoVortex { .. });
    let guard = |z: &PhasePoint| -> Result<()> {
        if banded {
            let chart = system.chart().expect("vortex system has a chart");
            if 1.0 - systems::vortex_alignment(chart, z) < tol::VORTEX_GRID_BAND {
                return Err(Error::Singularity("inside the excluded band".into()));
            }
        }
        Ok(())
    };

    let h_true_at = |z: &PhasePoint| {
        guard(z)?;
        system.hamiltonian(z)
    };
    let h_hat_at = |z: &PhasePoint| {
        guard(z)?;
        est.evaluate_h(z)
    };

    // Optimal constant shift over cells where both functions evaluate.
    let mut num = 0.0;
    let mut count = 0usize;
    for z in slice_points(spec)? {
        if let (Ok(h), Ok(e)) = (h_true_at(&z), h_hat_at(&z)) {
            num += h - e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("no valid heatmap cells".into()));
    }
    let shift = num / count as f64;

    Ok(HeatmapSet {
        h_true: export_heatmap(h_true_at, spec, hash, cfg.seed)?,
        h_learned: export_heatmap(h_hat_at, spec, hash, cfg.seed)?,
        h_error: export_heatmap(
            |z| Ok((h_hat_at(z)? + shift - h_true_at(z)?).abs()),
            spec,
            hash,
            cfg.seed,
        )?,
        vf_error: export_heatmap(
            |z| {
                guard(z)?;
                let diff = est.evaluate_field(z)? - system.vector_field(z)?;
                metric_norm_sq(system, z, &diff)
            },
            spec,
            hash,
            cfg.seed,
        )?,
    })
}

/// Serializable model file: everything needed to rebuild the estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub config_hash: String,
    pub seed: u64,
    pub system: SystemSpec,
    pub kernel: KernelFamily,
    pub eta: f64,
    pub c: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub points: Vec<Vec<f64>>,
    /// Stacked representer coefficients, length `dim * points`.
    pub coeffs: Vec<f64>,
    pub rkhs_norm_sq: f64,
    pub residual_rel: f64,
    pub conditioning: ConditioningReport,
}

/// Snapshots a fitted estimator into its model file.
pub fn save_model(cfg: &ExperimentConfig, est: &Estimator, eta: f64, c: f64) -> Result<SavedModel> {
    Ok(SavedModel {
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
        system: cfg.system.clone(),
        kernel: cfg.kernel,
        eta,
        c,
        lambda: est.lambda(),
        sigma: cfg.sigma,
        points: est.points().iter().map(|z| z.coords().as_slice().to_vec()).collect(),
        coeffs: est.coeffs().as_slice().to_vec(),
        rkhs_norm_sq: est.rkhs_norm_sq(),
        residual_rel: est.residual_rel(),
        conditioning: est.conditioning().clone(),
    })
}

/// Rebuilds the system and estimator from a model file.
pub fn restore_model(model: &SavedModel) -> Result<(SystemModel, Estimator)> {
    let system = model.system.build()?;
    let kernel = build_kernel(model.kernel, &system, model.eta)?;
    let points: Result<Vec<PhasePoint>> = model
        .points
        .iter()
        .map(|c| PhasePoint::from_slice(c))
        .collect();
    let est = Estimator::from_parts(
        points?,
        kernel,
        system.structure().clone(),
        system.chart().cloned(),
        model.lambda,
        DVector::from_column_slice(&model.coeffs),
        model.rkhs_norm_sq,
        model.residual_rel,
        model.conditioning.clone(),
    )?;
    Ok((system, est))
}

/// A fitted pipeline: the inputs and the estimator.
pub struct FitOutcome {
    pub system: SystemModel,
    pub training: TrainingSet,
    pub estimator: Estimator,
    pub eta: f64,
    pub c: f64,
    pub lambda: f64,
}

/// Samples training data and fits with the first grid entries as the
/// hyperparameters (run `cross_validate` first to shrink the grids).
pub fn run_fit(cfg: &ExperimentConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let system = cfg.system.build()?;
    let training = TrainingSet::from_system(
        &system,
        cfg.sample_count,
        cfg.bounds.as_deref(),
        cfg.sigma,
        cfg.seed,
        "train",
    )?;
    let eta = cfg.eta_grid[0];
    let c = cfg.c_grid[0];
    let lambda = lambda_schedule(c, training.len(), cfg.alpha)?;
    let kernel = build_kernel(cfg.kernel, &system, eta)?;
    let estimator = fit_for_system(&training, &system, kernel, lambda)?;
    Ok(FitOutcome {
        system,
        training,
        estimator,
        eta,
        c,
        lambda,
    })
}

/// Evaluation summary of a fitted estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub config_hash: String,
    pub seed: u64,
    /// Mean squared vector-field error on fresh test points.
    pub vf_mse: f64,
    /// Vector-field RMSE relative to the true field RMS.
    pub vf_rel_rmse: f64,
    /// Max absolute Hamiltonian error on the slice after constant shift.
    pub h_abs_err: f64,
    /// Range of the true Hamiltonian over the slice.
    pub h_range: f64,
    /// Max absolute value of the true Hamiltonian over the slice.
    pub h_max_abs: f64,
    /// Casimir-corrected constant, coefficients, and max error.
    pub casimir_constant: f64,
    pub casimir_coefficients: Vec<f64>,
    pub casimir_max_abs: f64,
    pub casimir_rank_deficient: bool,
    pub conditioning: ConditioningReport,
    /// Wall-clock seconds, reported for orientation only; not part of
    /// the deterministic output surface.
    pub runtime_seconds: f64,
}

/// Scores a fitted estimator: vector-field error on fresh test points,
/// Hamiltonian error on the evaluation slice, Casimir correction on the
/// same slice.
pub fn evaluate(
    cfg: &ExperimentConfig,
    system: &SystemModel,
    est: &Estimator,
    runtime_seconds: f64,
) -> Result<ErrorReport> {
    let test = sample_test_points(cfg, system, cfg.test_count, "test")?;
    let spec = resolve_heatmap(cfg, system)?;
    let slice: Vec<PhasePoint> = slice_points(&spec)?
        .into_iter()
        .filter(|z| system.validate(z).is_ok() && grid_admissible(cfg, system, z))
        .collect();
    if slice.is_empty() {
        return Err(Error::Empty("evaluation slice".into()));
    }
    let herr = h_error(est, system, &slice)?;
    let correction = casimir_correct(est, system, &slice)?;
    Ok(ErrorReport {
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
        vf_mse: vf_mse(est, system, &test)?,
        vf_rel_rmse: vf_relative_rmse(est, system, &test)?,
        h_abs_err: herr.max_abs,
        h_range: herr.h_range,
        h_max_abs: herr.h_max_abs,
        casimir_constant: correction.constant,
        casimir_coefficients: correction.coefficients,
        casimir_max_abs: correction.max_abs,
        casimir_rank_deficient: correction.rank_deficient,
        conditioning: est.conditioning().clone(),
        runtime_seconds,
    })
}

/// Whether a slice cell participates in scalar error metrics; excludes
/// the two-vortex singular band.
fn grid_admissible(cfg: &ExperimentConfig, system: &SystemModel, z: &PhasePoint) -> bool {
    if matches!(cfg.system, SystemSpec::TwoVortex { .. }) {
        if let Some(chart) = system.chart() {
            return 1.0 - systems::vortex_alignment(chart, z) >= tol::VORTEX_GRID_BAND;
        }
    }
    true
}

/// Default flow-comparison plan per system.
pub fn default_flow(cfg: &ExperimentConfig, system: &SystemModel) -> FlowSpec {
    let initial = match (&cfg.system, system.dim()) {
        (SystemSpec::TwoVortex { .. }, _) => {
            vec![std::f64::consts::FRAC_PI_2, 1.0, std::f64::consts::FRAC_PI_2, 2.0]
        }
        (SystemSpec::SphericalNorm3, _) => vec![1.2, 2.0, 0.9, 4.0],
        (_, 9) => vec![0.5, 0.3, -0.2, 0.4, -0.1, 0.2, 0.3, 0.1, -0.5],
        (_, d) => {
            let mut v = vec![0.8, 0.5, -0.4];
            v.truncate(d);
            v
        }
    };
    FlowSpec {
        initial,
        dt: 1e-3,
        t_final: 1.0,
    }
}

/// Flow comparison summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowReport {
    pub config_hash: String,
    pub seed: u64,
    pub initial: Vec<f64>,
    pub dt: f64,
    pub t_final: f64,
    /// Max distance between the true and learned flows over shared
    /// times.
    pub flow_distance: f64,
    pub true_truncated: bool,
    pub learned_truncated: bool,
    /// Drift of the true Hamiltonian along each flow.
    pub h_drift_true: f64,
    pub h_drift_learned: f64,
    /// Per-Casimir drift along each flow, in listed order.
    pub casimir_drift_true: Vec<f64>,
    pub casimir_drift_learned: Vec<f64>,
}

/// Integrates the true and learned fields from the same start and
/// compares them: flow distance, energy drift, Casimir drift.
pub fn flow_compare(
    cfg: &ExperimentConfig,
    system: &SystemModel,
    est: &Estimator,
    spec: &FlowSpec,
) -> Result<(Trajectory, Trajectory, FlowReport)> {
    let z0 = PhasePoint::from_slice(&spec.initial)?;
    system.validate(&z0)?;
    let truth = dynamics::integrate(
        |z| system.vector_field(z),
        &z0,
        spec.dt,
        spec.t_final,
        "true",
    )?;
    let learned = dynamics::integrate(
        |z| est.evaluate_field(z),
        &z0,
        spec.dt,
        spec.t_final,
        "learned",
    )?;
    let metric = match system.chart() {
        Some(chart) => DistanceMetric::SphereProduct {
            factors: chart.dim() / 2,
        },
        None => DistanceMetric::Euclidean,
    };
    let drifts = |traj: &Trajectory| -> Result<(f64, Vec<f64>)> {
        let h = dynamics::conservation_drift(traj, |z| system.hamiltonian(z))?;
        let cs: Result<Vec<f64>> = system
            .casimirs()
            .iter()
            .map(|c| dynamics::conservation_drift(traj, |z| Ok(c.value(z))))
            .collect();
        Ok((h, cs?))
    };
    let (h_drift_true, casimir_drift_true) = drifts(&truth)?;
    let (h_drift_learned, casimir_drift_learned) = drifts(&learned)?;
    let report = FlowReport {
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
        initial: spec.initial.clone(),
        dt: spec.dt,
        t_final: spec.t_final,
        flow_distance: dynamics::flow_distance(&truth, &learned, &metric)?,
        true_truncated: truth.truncated,
        learned_truncated: learned.truncated,
        h_drift_true,
        h_drift_learned,
        casimir_drift_true,
        casimir_drift_learned,
    };
    Ok((truth, learned, report))
}

/// Named benchmark configurations with the reference hyperparameters.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "rigid_body" => ExperimentConfig {
            system: SystemSpec::RigidBody {
                inertia: [1.0, 10.0, 0.1],
            },
            sample_count: 500,
            bounds: None,
            sigma: 0.0,
            seed: 7,
            kernel: KernelFamily::Gaussian,
            eta_grid: vec![2.5],
            c_grid: vec![2.5e-5],
            alpha: 0.4,
            folds: 5,
            test_count: 1000,
            heatmap: None,
            flow: None,
            convergence_ns: vec![100, 250, 500],
        },
        "gaussian_section" => ExperimentConfig {
            system: SystemSpec::GaussianSection { eta: 2.0 },
            sample_count: 500,
            bounds: None,
            sigma: 0.0,
            seed: 7,
            kernel: KernelFamily::Gaussian,
            eta_grid: vec![2.0],
            c_grid: vec![7.5e-6],
            alpha: 0.4,
            folds: 5,
            test_count: 1000,
            heatmap: None,
            flow: None,
            convergence_ns: vec![100, 200, 400, 800],
        },
        "underwater_vehicle" => ExperimentConfig {
            system: SystemSpec::UnderwaterVehicle {
                params: VehicleParams::default(),
            },
            sample_count: 400,
            bounds: None,
            sigma: 0.0,
            seed: 7,
            kernel: KernelFamily::Gaussian,
            eta_grid: vec![5.0],
            c_grid: vec![7.5e-6],
            alpha: 0.4,
            folds: 5,
            test_count: 1000,
            heatmap: None,
            flow: None,
            convergence_ns: vec![100, 200, 400],
        },
        "two_vortex" => ExperimentConfig {
            system: SystemSpec::TwoVortex {
                strengths: [1.0, 1.0],
            },
            sample_count: 1200,
            bounds: None,
            sigma: 0.0,
            seed: 7,
            kernel: KernelFamily::Gaussian,
            eta_grid: vec![0.7],
            c_grid: vec![0.01],
            alpha: 0.4,
            folds: 5,
            test_count: 1000,
            heatmap: None,
            flow: None,
            convergence_ns: vec![300, 600, 1200],
        },
        "spherical_norm3" => ExperimentConfig {
            system: SystemSpec::SphericalNorm3,
            sample_count: 1200,
            bounds: None,
            sigma: 0.0,
            seed: 7,
            kernel: KernelFamily::Gaussian,
            eta_grid: vec![0.9],
            c_grid: vec![1e-4],
            alpha: 0.4,
            folds: 5,
            test_count: 1000,
            heatmap: None,
            flow: None,
            convergence_ns: vec![300, 600, 1200],
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; available: rigid_body, gaussian_section, \
                 underwater_vehicle, two_vortex, spherical_norm3"
            )))
        }
    };
    Ok(cfg)
}

pub const PRESET_NAMES: [&str; 5] = [
    "rigid_body",
    "gaussian_section",
    "underwater_vehicle",
    "two_vortex",
    "spherical_norm3",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rigid_config() -> ExperimentConfig {
        ExperimentConfig {
            system: SystemSpec::RigidBody {
                inertia: [1.0, 10.0, 0.1],
            },
            sample_count: 40,
            bounds: None,
            sigma: 0.0,
            seed: 11,
            kernel: KernelFamily::Gaussian,
            eta_grid: vec![2.5],
            c_grid: vec![2.5e-5],
            alpha: 0.4,
            folds: 4,
            test_count: 50,
            heatmap: None,
            flow: None,
            convergence_ns: vec![],
        }
    }

    #[test]
    fn lambda_schedule_matches_frozen_values() {
        assert_eq!(lambda_schedule(1.0, 1, 0.7).unwrap(), 1.0);
        let l = lambda_schedule(2.5e-5, 500, 0.4).unwrap();
        assert!((l - 2.0814e-6).abs() < 1e-4 * 2.0814e-6, "{l:e}");
        assert!(lambda_schedule(0.01, 1200, 0.4).unwrap() > 0.0);
        assert!(lambda_schedule(0.0, 10, 0.4).is_err());
        assert!(lambda_schedule(1.0, 0, 0.4).is_err());
        assert!(lambda_schedule(1.0, 10, -0.1).is_err());
    }

    #[test]
    fn fold_partition_is_disjoint_covering_and_balanced() {
        for &(n, k) in &[(23usize, 5usize), (40, 4), (10, 10), (101, 7)] {
            let folds = fold_indices(n, k, 3).unwrap();
            assert_eq!(folds.len(), k);
            let mut seen = vec![false; n];
            let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
            for f in &folds {
                for &i in f {
                    assert!(!seen[i], "index {i} in two folds");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1);
        }
        assert!(fold_indices(3, 5, 0).is_err());
        assert!(fold_indices(10, 1, 0).is_err());
        assert_eq!(fold_indices(20, 5, 9).unwrap(), fold_indices(20, 5, 9).unwrap());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = small_rigid_config();
        let a = config_hash(&cfg).unwrap();
        let b = config_hash(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(a, config_hash(&other).unwrap());
    }

    #[test]
    fn config_json_round_trips() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let json = serde_json::to_string_pretty(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(config_hash(&cfg).unwrap(), config_hash(&back).unwrap());
            back.system.build().unwrap();
        }
        assert!(preset("unknown").is_err());
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let good = small_rigid_config();
        let mut c = good.clone();
        c.eta_grid.clear();
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.c_grid = vec![-1.0];
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.folds = 1;
        assert!(c.validate().is_err());
        let mut c = good;
        c.sigma = -0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_coefficients_give_mean_field_power() {
        let cfg = small_rigid_config();
        let out = run_fit(&cfg).unwrap();
        let zero = Estimator::from_parts(
            out.estimator.points().to_vec(),
            out.estimator.kernel().clone(),
            out.estimator.structure().clone(),
            None,
            out.lambda,
            DVector::zeros(out.estimator.coeffs().len()),
            0.0,
            0.0,
            out.estimator.conditioning().clone(),
        )
        .unwrap();
        let test = sample_test_points(&cfg, &out.system, 30, "test").unwrap();
        let mse = vf_mse(&zero, &out.system, &test).unwrap();
        let direct: f64 = test
            .iter()
            .map(|z| out.system.vector_field(z).unwrap().norm_squared())
            .sum::<f64>()
            / test.len() as f64;
        assert!((mse - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn shifted_error_ignores_constant_offsets() {
        let h: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = h.iter().map(|v| v + 7.0).collect();
        let r = shifted_error_stats(&h, &shifted).unwrap();
        assert!(r.max_abs < 1e-12, "max_abs {}", r.max_abs);
        assert!((r.shift + 7.0).abs() < 1e-12);

        let constant = vec![3.5; 20];
        let zeros = vec![0.0; 20];
        let r = shifted_error_stats(&constant, &zeros).unwrap();
        assert!(r.max_abs < 1e-12);
        assert_eq!(r.h_range, 0.0);

        let r1 = shifted_error_stats(&h, &zeros).unwrap();
        let plus: Vec<f64> = zeros.iter().map(|v| v + 123.0).collect();
        let r2 = shifted_error_stats(&h, &plus).unwrap();
        assert!((r1.max_abs - r2.max_abs).abs() < 1e-12);
    }

    #[test]
    fn casimir_regression_recovers_exact_linear_models() {
        let c: Vec<f64> = (0..30).map(|i| 0.1 * i as f64).collect();
        let residuals: Vec<f64> = c.iter().map(|v| 3.0 * v + 0.5).collect();
        let columns = DMatrix::from_column_slice(30, 1, &c);
        let (sol, deficient) = casimir_regression(&residuals, &columns).unwrap();
        assert!(!deficient);
        assert!((sol[0] - 0.5).abs() < 1e-10, "constant {}", sol[0]);
        assert!((sol[1] - 3.0).abs() < 1e-10, "coefficient {}", sol[1]);

        // Duplicated regressor: rank deficient, minimal-norm solution
        // still reproduces the data.
        let mut dup = DMatrix::zeros(30, 2);
        for i in 0..30 {
            dup[(i, 0)] = c[i];
            dup[(i, 1)] = c[i];
        }
        let (sol, deficient) = casimir_regression(&residuals, &dup).unwrap();
        assert!(deficient);
        for i in 0..30 {
            let fitted = sol[0] + sol[1] * c[i] + sol[2] * c[i];
            assert!((fitted - residuals[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_casimir_basis_reduces_to_constant_shift() {
        let residuals: Vec<f64> = (0..25).map(|i| (i as f64 * 0.3).cos()).collect();
        let columns = DMatrix::zeros(25, 0);
        let (sol, deficient) = casimir_regression(&residuals, &columns).unwrap();
        assert!(!deficient);
        let mean = residuals.iter().sum::<f64>() / 25.0;
        assert!((sol[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn casimir_correction_never_beats_plain_shift_in_rms() {
        let cfg = small_rigid_config();
        let out = run_fit(&cfg).unwrap();
        let spec = resolve_heatmap(&cfg, &out.system).unwrap();
        let pts = slice_points(&spec).unwrap();
        let plain = h_error(&out.estimator, &out.system, &pts).unwrap();
        let corrected = casimir_correct(&out.estimator, &out.system, &pts).unwrap();
        assert!(
            corrected.rms <= plain.rms + 1e-12,
            "corrected {} vs plain {}",
            corrected.rms,
            plain.rms
        );
    }

    #[test]
    fn cross_validation_is_deterministic_and_picks_the_minimum() {
        let mut cfg = small_rigid_config();
        cfg.eta_grid = vec![1.5, 2.5];
        cfg.c_grid = vec![2.5e-5, 1e-2];
        let system = cfg.system.build().unwrap();
        let ts = TrainingSet::from_system(&system, cfg.sample_count, None, 0.0, cfg.seed, "train")
            .unwrap();
        let a = cross_validate(&cfg, &ts).unwrap();
        let b = cross_validate(&cfg, &ts).unwrap();
        assert_eq!(a.entries.len(), 4);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.score, y.score);
        }
        for e in &a.entries {
            assert!(a.best_score <= e.score);
        }
        assert!(a
            .entries
            .iter()
            .any(|e| e.eta == a.best_eta && e.c == a.best_c && e.score == a.best_score));
    }

    #[test]
    fn single_cell_grid_selects_that_cell() {
        let cfg = small_rigid_config();
        let system = cfg.system.build().unwrap();
        let ts = TrainingSet::from_system(&system, cfg.sample_count, None, 0.0, cfg.seed, "train")
            .unwrap();
        let table = cross_validate(&cfg, &ts).unwrap();
        assert_eq!(table.entries.len(), 1);
        assert_eq!(table.best_eta, 2.5);
        assert_eq!(table.best_c, 2.5e-5);
    }

    #[test]
    fn cross_validation_rejects_undersized_training_sets() {
        let mut cfg = small_rigid_config();
        cfg.folds = 5;
        let system = cfg.system.build().unwrap();
        let ts = TrainingSet::from_system(&system, 4, None, 0.0, 3, "train").unwrap();
        assert!(cross_validate(&cfg, &ts).is_err());
    }

    #[test]
    fn zero_field_data_stays_zero_across_convergence_sizes() {
        // Isotropic rigid body: the true field vanishes identically, so
        // every fit sees zero data and returns the zero estimator.
        let mut cfg = small_rigid_config();
        cfg.system = SystemSpec::RigidBody {
            inertia: [1.0, 1.0, 1.0],
        };
        cfg.test_count = 40;
        let table = convergence_study(&cfg, &[20, 40]).unwrap();
        for row in &table.rows {
            assert!(row.vf_mse <= 1e-12, "N={} mse={:e}", row.n, row.vf_mse);
        }
    }

    #[test]
    fn convergence_study_is_deterministic_and_validates_sizes() {
        let mut cfg = small_rigid_config();
        cfg.test_count = 30;
        let a = convergence_study(&cfg, &[15, 30]).unwrap();
        let b = convergence_study(&cfg, &[15, 30]).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.vf_mse, y.vf_mse);
            assert_eq!(x.h_abs_err, y.h_abs_err);
        }
        assert!(convergence_study(&cfg, &[30, 15]).is_err());
        assert!(convergence_study(&cfg, &[]).is_err());
    }

    #[test]
    fn convergence_error_decreases_on_a_smooth_target() {
        let mut cfg = small_rigid_config();
        cfg.system = SystemSpec::GaussianSection { eta: 2.0 };
        cfg.eta_grid = vec![2.0];
        cfg.c_grid = vec![7.5e-6];
        cfg.test_count = 200;
        let table = convergence_study(&cfg, &[40, 80, 160]).unwrap();
        assert!(
            table.slope < 0.0,
            "slope {} rows {:?}",
            table.slope,
            table.rows
        );
    }

    #[test]
    fn log_log_slope_handles_degenerate_inputs() {
        let s = log_log_slope(&[10.0, 100.0], &[1.0, 0.01]);
        assert!((s + 2.0).abs() < 1e-12);
        assert!(log_log_slope(&[10.0], &[1.0]).is_nan());
        assert!(log_log_slope(&[10.0, 100.0], &[0.0, 0.0]).is_nan());
    }

    #[test]
    fn heatmap_frozen_two_by_two_grid() {
        let spec = HeatmapSpec {
            axes: [0, 1],
            base: vec![0.0, 0.0],
            ranges: [(0.0, 1.0), (0.0, 1.0)],
            resolution: 2,
        };
        let csv = export_heatmap(|z| Ok(z[0]), &spec, "h", 1).unwrap();
        let values: Vec<&str> = csv
            .lines()
            .skip(2)
            .map(|l| l.rsplit(',').next().unwrap())
            .collect();
        assert_eq!(values, vec!["0.25", "0.75", "0.25", "0.75"]);

        let zeros = export_heatmap(|_| Ok(0.0), &spec, "h", 1).unwrap();
        assert!(zeros.lines().skip(2).all(|l| l.ends_with(",0")));
    }

    #[test]
    fn heatmap_marks_failed_cells_as_nan() {
        let spec = HeatmapSpec {
            axes: [0, 1],
            base: vec![0.0, 0.0],
            ranges: [(0.0, 1.0), (0.0, 1.0)],
            resolution: 4,
        };
        let csv = export_heatmap(
            |z| {
                if z[0] > 0.5 {
                    Err(Error::Singularity("right half".into()))
                } else {
                    Ok(1.0)
                }
            },
            &spec,
            "h",
            1,
        )
        .unwrap();
        let nans = csv.lines().filter(|l| l.ends_with(",nan")).count();
        assert_eq!(nans, 8);
    }

    #[test]
    fn heatmap_spec_validation_rejects_bad_slices() {
        let good = HeatmapSpec {
            axes: [0, 1],
            base: vec![0.0; 3],
            ranges: [(-1.0, 1.0), (-1.0, 1.0)],
            resolution: 3,
        };
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.axes = [0, 0];
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.axes = [0, 9];
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.resolution = 1;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.ranges[0] = (1.0, -1.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rigid_body_heatmap_matches_direct_evaluation() {
        let cfg = small_rigid_config();
        let system = cfg.system.build().unwrap();
        let spec = resolve_heatmap(&cfg, &system).unwrap();
        let csv = export_heatmap(|z| system.hamiltonian(z), &spec, "h", cfg.seed).unwrap();
        let lines: Vec<&str> = csv.lines().skip(2).collect();
        assert_eq!(lines.len(), 2500);
        for &idx in &[0usize, 49, 1275, 2400, 2499] {
            let mut parts = lines[idx].split(',');
            let x: f64 = parts.next().unwrap().parse().unwrap();
            let y: f64 = parts.next().unwrap().parse().unwrap();
            let v: f64 = parts.next().unwrap().parse().unwrap();
            let z = PhasePoint::from_slice(&[x, y, 0.0]).unwrap();
            let direct = system.hamiltonian(&z).unwrap();
            assert!((v - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn default_slices_are_chart_valid_for_every_preset() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            let system = cfg.system.build().unwrap();
            let spec = resolve_heatmap(&cfg, &system).unwrap();
            let pts = slice_points(&spec).unwrap();
            assert_eq!(pts.len(), 2500);
            if let Some(chart) = system.chart() {
                for z in &pts {
                    chart.validate(z).unwrap();
                }
            }
        }
    }

    #[test]
    fn vortex_heatmaps_blank_the_singular_band() {
        let mut cfg = preset("two_vortex").unwrap();
        cfg.sample_count = 25;
        cfg.test_count = 20;
        let out = run_fit(&cfg).unwrap();
        let m = tol::SPHERE_CHART_MARGIN;
        // Slice tightly around the second vortex position so some cells
        // fall inside the excluded band.
        let spec = HeatmapSpec {
            axes: [0, 1],
            base: vec![0.0, 0.0, std::f64::consts::FRAC_PI_2, 2.0 * m],
            ranges: [
                (std::f64::consts::FRAC_PI_2 - 0.05, std::f64::consts::FRAC_PI_2 + 0.05),
                (m, 0.1),
            ],
            resolution: 10,
        };
        let hash = config_hash(&cfg).unwrap();
        let set = heatmap_suite(&cfg, &out.system, &out.estimator, &spec, &hash).unwrap();
        let nans = set.h_true.lines().filter(|l| l.ends_with(",nan")).count();
        assert!(nans > 0, "no cells excluded near the singularity");
        let total = set.h_true.lines().count();
        assert!(nans + 2 < total, "every cell excluded");
        for csv in [&set.h_true, &set.h_learned, &set.h_error, &set.vf_error] {
            assert!(csv.starts_with(&format!("# config_hash={hash}, seed={}\n", cfg.seed)));
        }
    }

    #[test]
    fn saved_models_restore_to_identical_estimators() {
        let cfg = small_rigid_config();
        let out = run_fit(&cfg).unwrap();
        let model = save_model(&cfg, &out.estimator, out.eta, out.c).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let parsed: SavedModel = serde_json::from_str(&json).unwrap();
        let (system, restored) = restore_model(&parsed).unwrap();
        let test = sample_test_points(&cfg, &system, 10, "roundtrip").unwrap();
        for z in &test {
            assert_eq!(
                out.estimator.evaluate_h(z).unwrap(),
                restored.evaluate_h(z).unwrap()
            );
            assert_eq!(
                out.estimator.evaluate_field(z).unwrap(),
                restored.evaluate_field(z).unwrap()
            );
        }
    }

    #[test]
    fn evaluate_produces_nonnegative_errors() {
        let cfg = small_rigid_config();
        let out = run_fit(&cfg).unwrap();
        let report = evaluate(&cfg, &out.system, &out.estimator, 0.0).unwrap();
        assert!(report.vf_mse >= 0.0);
        assert!(report.vf_rel_rmse >= 0.0);
        assert!(report.h_abs_err >= 0.0);
        assert!(report.h_range >= 0.0);
        assert!(report.casimir_max_abs >= 0.0);
        assert_eq!(report.seed, cfg.seed);
        assert_eq!(report.config_hash, config_hash(&cfg).unwrap());
        assert_eq!(report.casimir_coefficients.len(), 1);
    }

    #[test]
    fn flow_compare_reports_close_flows_on_an_easy_fit() {
        let mut cfg = small_rigid_config();
        cfg.sample_count = 60;
        let out = run_fit(&cfg).unwrap();
        let spec = FlowSpec {
            initial: vec![0.8, 0.5, -0.4],
            dt: 1e-2,
            t_final: 0.5,
        };
        let (truth, learned, report) =
            flow_compare(&cfg, &out.system, &out.estimator, &spec).unwrap();
        assert_eq!(truth.times, learned.times);
        assert!(!report.true_truncated);
        assert!(!report.learned_truncated);
        assert!(report.flow_distance.is_finite());
        assert!(report.flow_distance >= 0.0);
        assert_eq!(report.casimir_drift_true.len(), 1);
        // The learned field preserves the Casimir structurally.
        assert!(report.casimir_drift_learned[0] <= 1e-6);
    }

    #[test]
    fn csv_rendering_embeds_provenance_and_is_deterministic() {
        let mut cfg = small_rigid_config();
        cfg.eta_grid = vec![2.0, 2.5];
        let system = cfg.system.build().unwrap();
        let ts = TrainingSet::from_system(&system, cfg.sample_count, None, 0.0, cfg.seed, "train")
            .unwrap();
        let table = cross_validate(&cfg, &ts).unwrap();
        let hash = config_hash(&cfg).unwrap();
        let a = table.to_csv(&hash, cfg.seed);
        let b = cross_validate(&cfg, &ts).unwrap().to_csv(&hash, cfg.seed);
        assert_eq!(a, b);
        assert!(a.starts_with(&format!("# config_hash={hash}, seed={}\n", cfg.seed)));
        assert!(a.contains("eta,c,lambda,score\n"));
        assert_eq!(a.lines().count(), 4);

        let conv = convergence_study(&cfg, &[15, 30]).unwrap();
        let c1 = conv.to_csv(&hash, cfg.seed);
        assert!(c1.contains("n,lambda,vf_mse,h_abs_err\n"));
        assert_eq!(c1.lines().count(), 4);
    }
}
