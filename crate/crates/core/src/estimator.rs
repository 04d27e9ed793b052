//! Structure-preserving kernel ridge regression for Hamiltonian functions.
//!
//! Given observations `X^i` of a Hamiltonian vector field at points `z^i`,
//! the estimator minimizes the empirical field misfit, measured in the
//! structure's metric, plus an RKHS penalty. The minimizer is a linear
//! combination of differential kernel sections and its coefficient vector
//! solves the dense ridge system
//!
//! `(G_N + lambda N I) c = X`,
//!
//! where `G_N` has blocks
//! `G^{ij} = B(z^i) d1d2K(z^i, z^j) B(z^j)^T g(z^j)`.
//!
//! `G_N` is self-adjoint and positive semidefinite with respect to the
//! block metric `g_N`, not as a raw matrix. Writing `G_N = W S` with
//! `W^{ij} = B_i d1d2K B_j^T` (raw-symmetric PSD) and
//! `S = blockdiag(g_j)`, the ridge system is equivalent to
//!
//! `(W + lambda N S^{-1}) y = X`, `c = S^{-1} y`,
//!
//! whose matrix is symmetric positive definite, so a Cholesky
//! factorization applies for every metric; in the Euclidean case `S = I`
//! and this is the plain system. An LU fallback covers numerically
//! borderline cases, and every fit carries a conditioning report.
//!
//! The fitted Hamiltonian and its field are evaluated as
//! `h(y) = sum_i w_i . d1K(z^i, y)` and
//! `X_h(y) = B(y) sum_i d1d2K(y, z^i) w_i` with `w_i = B_i^T g_i c^i`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Chart, PhasePoint, StructureField};
use crate::kernels::Kernel;
use crate::sampling::{self, SampleKind, SampleSpec};
use crate::systems::SystemModel;
use crate::tol;

/// Observed field samples at validated phase-space points.
#[derive(Clone)]
pub struct TrainingSet {
    points: Vec<PhasePoint>,
    fields: Vec<DVector<f64>>,
    sigma: f64,
    seed: u64,
}

impl TrainingSet {
    pub fn new(
        points: Vec<PhasePoint>,
        fields: Vec<DVector<f64>>,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if points.len() != fields.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: fields.len(),
            });
        }
        let dim = points[0].dim();
        for (i, (p, f)) in points.iter().zip(&fields).enumerate() {
            if p.dim() != dim || f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: if p.dim() != dim { p.dim() } else { f.len() },
                });
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(TrainingSet {
            points,
            fields,
            sigma,
            seed,
        })
    }

    /// Samples `count` points from the system's natural domain (its chart
    /// for sphere systems, a cube otherwise), evaluates the true field,
    /// and perturbs it with coordinate-wise noise of level `sigma`. The
    /// point and noise streams are derived from `(seed, tag)` and never
    /// overlap.
    pub fn from_system(
        system: &SystemModel,
        count: usize,
        bounds: Option<&[(f64, f64)]>,
        sigma: f64,
        seed: u64,
        tag: &str,
    ) -> Result<Self> {
        let points = match system.chart() {
            Some(chart) => {
                let spec = SampleSpec {
                    kind: SampleKind::SphereProduct {
                        factors: chart.dim() / 2,
                    },
                    count,
                    seed,
                };
                let accept = system
                    .sample_predicate()
                    .map(|p| p.as_ref() as &dyn Fn(&PhasePoint) -> bool);
                sampling::sample_sphere_product(&spec, &format!("{tag}:points"), accept)?
            }
            None => {
                let default_bounds = vec![(-1.0, 1.0); system.dim()];
                let spec = SampleSpec {
                    kind: SampleKind::Cube {
                        bounds: bounds.map(|b| b.to_vec()).unwrap_or(default_bounds),
                    },
                    count,
                    seed,
                };
                sampling::sample_cube(&spec, &format!("{tag}:points"))?
            }
        };
        let clean: Result<Vec<_>> = points.iter().map(|z| system.vector_field(z)).collect();
        let fields = sampling::add_tangent_noise(&clean?, sigma, seed, &format!("{tag}:noise"))?;
        TrainingSet::new(points, fields, sigma, seed)
    }

    pub fn points(&self) -> &[PhasePoint] {
        &self.points
    }

    pub fn fields(&self) -> &[DVector<f64>] {
        &self.fields
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    /// Borrow a contiguous index range as a new training set (used by
    /// cross-validation).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i].clone()).collect();
        let fields = indices.iter().map(|&i| self.fields[i].clone()).collect();
        TrainingSet::new(points, fields, self.sigma, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Cholesky,
    Lu,
}

/// Diagnostics of the ridge solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub factorization: FactorKind,
    /// Crude two-norm condition estimate from the factor diagonal.
    pub cond_estimate: f64,
    pub min_diag: f64,
    pub max_diag: f64,
}

/// Fitted structure-preserving estimator. Immutable after construction.
pub struct Estimator {
    points: Vec<PhasePoint>,
    kernel: Arc<dyn Kernel>,
    structure: StructureField,
    chart: Option<Chart>,
    lambda: f64,
    coeffs: DVector<f64>,
    eval_weights: Vec<DVector<f64>>,
    rkhs_norm_sq: f64,
    residual_rel: f64,
    conditioning: ConditioningReport,
}

fn check_compatible(points: &[PhasePoint], kernel: &dyn Kernel, sf: &StructureField) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Empty("point set".into()));
    }
    let d = sf.dim();
    if kernel.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: kernel.dim(),
        });
    }
    for p in points {
        if p.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.dim(),
            });
        }
    }
    Ok(())
}

/// Raw-symmetric core `W` (blocks `B_i d1d2K(z^i, z^j) B_j^T`) together
/// with the per-point Poisson and metric matrices. Only the upper block
/// triangle is computed; the mirror `W^{ji} = (W^{ij})^T` fills the rest.
fn assemble_core(
    points: &[PhasePoint],
    kernel: &dyn Kernel,
    sf: &StructureField,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let n = points.len();
    let d = sf.dim();
    let bs: Result<Vec<_>> = points.iter().map(|z| sf.poisson_matrix(z)).collect();
    let bs = bs?;
    let gs: Result<Vec<_>> = points.iter().map(|z| sf.metric_matrix(z)).collect();
    let gs = gs?;

    let strips: Vec<Vec<DMatrix<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = points[i].coords();
            (i..n)
                .map(|j| {
                    let h = kernel.hess12(zi, points[j].coords());
                    &bs[i] * h * bs[j].transpose()
                })
                .collect()
        })
        .collect();

    let mut w = DMatrix::zeros(n * d, n * d);
    for (i, strip) in strips.iter().enumerate() {
        for (off, block) in strip.iter().enumerate() {
            let j = i + off;
            w.view_mut((i * d, j * d), (d, d)).copy_from(block);
            if j > i {
                w.view_mut((j * d, i * d), (d, d)).copy_from(&block.transpose());
            }
        }
    }
    Ok((w, bs, gs))
}

/// Generalized differential Gram matrix with blocks
/// `B(z^i) d1d2K(z^i, z^j) B(z^j)^T g(z^j)`.
pub fn assemble_gram(
    points: &[PhasePoint],
    kernel: &dyn Kernel,
    sf: &StructureField,
) -> Result<DMatrix<f64>> {
    check_compatible(points, kernel, sf)?;
    let (mut w, _, gs) = assemble_core(points, kernel, sf)?;
    if !sf.is_euclidean() {
        let d = sf.dim();
        let dn = w.nrows();
        for (j, gj) in gs.iter().enumerate() {
            let scaled = w.view((0, j * d), (dn, d)) * gj;
            w.view_mut((0, j * d), (dn, d)).copy_from(&scaled);
        }
    }
    Ok(w)
}

/// Solves the ridge system for the given training set and returns the
/// fitted estimator.
pub fn fit(
    ts: &TrainingSet,
    kernel: Arc<dyn Kernel>,
    sf: &StructureField,
    lambda: f64,
) -> Result<Estimator> {
    if !lambda.is_finite() || lambda < tol::MIN_LAMBDA {
        return Err(Error::InvalidParameter(format!(
            "regularization must be at least {:e}, got {lambda:e}",
            tol::MIN_LAMBDA
        )));
    }
    check_compatible(ts.points(), kernel.as_ref(), sf)?;
    let n = ts.len();
    let d = sf.dim();
    let dn = n * d;
    let ln = lambda * n as f64;

    let (w, bs, gs) = assemble_core(ts.points(), kernel.as_ref(), sf)?;

    let mut x = DVector::zeros(dn);
    for (i, f) in ts.fields().iter().enumerate() {
        x.rows_mut(i * d, d).copy_from(f);
    }

    // Inverse metric blocks; `None` marks the Euclidean identity.
    let g_inv = if sf.is_euclidean() {
        None
    } else {
        let inv: Result<Vec<_>> = gs
            .iter()
            .map(|g| {
                Cholesky::new(g.clone())
                    .map(|ch| ch.inverse())
                    .ok_or(Error::MetricDegeneracy)
            })
            .collect();
        Some(inv?)
    };

    let build_system = |w: &DMatrix<f64>| {
        let mut a = w.clone();
        match &g_inv {
            None => {
                for k in 0..dn {
                    a[(k, k)] += ln;
                }
            }
            Some(blocks) => {
                for (i, gi) in blocks.iter().enumerate() {
                    for r in 0..d {
                        for c in 0..d {
                            a[(i * d + r, i * d + c)] += ln * gi[(r, c)];
                        }
                    }
                }
            }
        }
        a
    };

    let a = build_system(&w);
    let (mut min_diag, mut max_diag) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..dn {
        min_diag = min_diag.min(a[(k, k)]);
        max_diag = max_diag.max(a[(k, k)]);
    }

    let (y, factorization, cond_estimate) = match Cholesky::new(a) {
        Some(ch) => {
            let y = ch.solve(&x);
            let ldiag = ch.l_dirty().diagonal();
            let ratio = ldiag.max() / ldiag.min();
            (y, FactorKind::Cholesky, ratio * ratio)
        }
        None => {
            let lu = build_system(&w).lu();
            let udiag = lu.u().diagonal().map(f64::abs);
            let cond = udiag.max() / udiag.min();
            let y = lu.solve(&x).ok_or_else(|| {
                Error::LinearSolve(format!(
                    "ridge system is singular (condition estimate {cond:e})"
                ))
            })?;
            (y, FactorKind::Lu, cond)
        }
    };

    let coeffs = match &g_inv {
        None => y.clone(),
        Some(blocks) => {
            let mut c = DVector::zeros(dn);
            for (i, gi) in blocks.iter().enumerate() {
                let ci = gi * y.rows(i * d, d);
                c.rows_mut(i * d, d).copy_from(&ci);
            }
            c
        }
    };

    // G c = W S c = W y, so the original-system residual is computable
    // from the untouched core.
    let gc = &w * &y;
    let residual = (&gc + &coeffs * ln - &x).norm();
    let x_norm = x.norm();
    let residual_rel = if x_norm > 0.0 { residual / x_norm } else { residual };
    if residual_rel > tol::RIDGE_RESIDUAL_REL {
        return Err(Error::LinearSolve(format!(
            "ridge residual {residual_rel:e} exceeds {:e} (condition estimate {cond_estimate:e})",
            tol::RIDGE_RESIDUAL_REL
        )));
    }

    // RKHS norm of the fitted section: g_N(c, G c).
    let mut rkhs_norm_sq = 0.0;
    for i in 0..n {
        let ci = coeffs.rows(i * d, d);
        let gci = gc.rows(i * d, d);
        rkhs_norm_sq += match &g_inv {
            None => ci.dot(&gci),
            Some(_) => (&gs[i] * gci).dot(&ci.into_owned()),
        };
    }

    let eval_weights = (0..n)
        .map(|i| {
            let ci = coeffs.rows(i * d, d).into_owned();
            match &g_inv {
                None => bs[i].transpose() * ci,
                Some(_) => bs[i].transpose() * (&gs[i] * ci),
            }
        })
        .collect();

    Ok(Estimator {
        points: ts.points().to_vec(),
        kernel,
        structure: sf.clone(),
        chart: None,
        lambda,
        coeffs,
        eval_weights,
        rkhs_norm_sq,
        residual_rel,
        conditioning: ConditioningReport {
            factorization,
            cond_estimate,
            min_diag,
            max_diag,
        },
    })
}

impl Estimator {
    /// Reconstructs an estimator from stored parts (model files). The
    /// stored diagnostics are carried over verbatim.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        points: Vec<PhasePoint>,
        kernel: Arc<dyn Kernel>,
        structure: StructureField,
        chart: Option<Chart>,
        lambda: f64,
        coeffs: DVector<f64>,
        rkhs_norm_sq: f64,
        residual_rel: f64,
        conditioning: ConditioningReport,
    ) -> Result<Self> {
        check_compatible(&points, kernel.as_ref(), &structure)?;
        let d = structure.dim();
        if coeffs.len() != points.len() * d {
            return Err(Error::DimensionMismatch {
                expected: points.len() * d,
                got: coeffs.len(),
            });
        }
        let eval_weights: Result<Vec<_>> = points
            .iter()
            .zip(coeffs.as_slice().chunks(d))
            .map(|(z, ci)| {
                let b = structure.poisson_matrix(z)?;
                let g = structure.metric_matrix(z)?;
                Ok(b.transpose() * (g * DVector::from_column_slice(ci)))
            })
            .collect();
        Ok(Estimator {
            points,
            kernel,
            structure,
            chart,
            lambda,
            coeffs,
            eval_weights: eval_weights?,
            rkhs_norm_sq,
            residual_rel,
            conditioning,
        })
    }

    /// Attach a chart so evaluation rejects out-of-domain points.
    pub fn with_chart(mut self, chart: Chart) -> Self {
        self.chart = Some(chart);
        self
    }

    fn check_point(&self, z: &PhasePoint) -> Result<()> {
        if z.dim() != self.structure.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.structure.dim(),
                got: z.dim(),
            });
        }
        if let Some(chart) = &self.chart {
            chart.validate(z)?;
        }
        Ok(())
    }

    /// Learned Hamiltonian `h(z) = sum_i w_i . d1K(z^i, z)`.
    pub fn evaluate_h(&self, z: &PhasePoint) -> Result<f64> {
        self.check_point(z)?;
        let y = z.coords();
        Ok(self
            .points
            .iter()
            .zip(&self.eval_weights)
            .map(|(zi, wi)| self.kernel.grad1(zi.coords(), y).dot(wi))
            .sum())
    }

    /// Coordinate gradient of the learned Hamiltonian.
    pub fn evaluate_grad_h(&self, z: &PhasePoint) -> Result<DVector<f64>> {
        self.check_point(z)?;
        let y = z.coords();
        let mut grad = DVector::zeros(y.len());
        for (zi, wi) in self.points.iter().zip(&self.eval_weights) {
            grad += self.kernel.hess12(y, zi.coords()) * wi;
        }
        Ok(grad)
    }

    /// Learned Hamiltonian vector field `B(z) grad h(z)`.
    pub fn evaluate_field(&self, z: &PhasePoint) -> Result<DVector<f64>> {
        let grad = self.evaluate_grad_h(z)?;
        let b = self.structure.poisson_matrix(z)?;
        Ok(b * grad)
    }

    pub fn points(&self) -> &[PhasePoint] {
        &self.points
    }

    pub fn kernel(&self) -> &Arc<dyn Kernel> {
        &self.kernel
    }

    pub fn structure(&self) -> &StructureField {
        &self.structure
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    /// RKHS norm squared of the fitted section, `g_N(c, G_N c)`.
    pub fn rkhs_norm_sq(&self) -> f64 {
        self.rkhs_norm_sq
    }

    /// Relative residual of the ridge system after the solve.
    pub fn residual_rel(&self) -> f64 {
        self.residual_rel
    }

    pub fn conditioning(&self) -> &ConditioningReport {
        &self.conditioning
    }
}
