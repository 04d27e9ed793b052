//! Poisson geometry in chart coordinates.
//!
//! Conventions used across the crate, fixed once here:
//!
//! * A state is a column of chart coordinates `z` (type [`PhasePoint`]).
//! * The Poisson matrix is `B(z)^{ab} = {z^a, z^b}`, antisymmetric, and a
//!   Hamiltonian `h` generates the field `X_h(z) = B(z) dh(z)` where `dh`
//!   is the column of coordinate partial derivatives.
//! * A Riemannian metric `g(z)` (identity unless stated) turns `dh` into
//!   the gradient `grad h = g^{-1} dh`, and the compatible structure is
//!   the bundle map `J(z) = B(z) g(z)`, so that `X_h = J grad h`.
//!
//! With this convention the rigid body on so(3)* has `B(P) = hat(P)`,
//! `J = hat(P)` under the Euclidean metric, and `X_H = P x (I^-1 P)`,
//! which is the Euler vector field. The sign and scaling are locked by
//! tests against explicitly integrable fields.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tol;

/// A point of the phase space in chart coordinates. Coordinates are
/// guaranteed finite; membership in a particular chart domain is the
/// owning system's concern.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint(DVector<f64>);

impl PhasePoint {
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(PhasePoint(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(DVector::from_row_slice(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for PhasePoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// The so(3) hat map: `hat(v) w = v x w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v[2], v[1], //
        v[2], 0.0, -v[0], //
        -v[1], v[0], 0.0,
    )
}

pub type MatrixField = Arc<dyn Fn(&PhasePoint) -> DMatrix<f64> + Send + Sync>;

/// Pointwise Riemannian metric. The Euclidean case is kept symbolic so
/// that consumers can take identity fast paths.
#[derive(Clone)]
pub enum Metric {
    Euclidean,
    Pointwise(MatrixField),
}

/// A Poisson matrix field together with a Riemannian metric on the same
/// chart. This pair is what the estimator needs from a system: it never
/// sees Hamiltonians, only `B` and `g`.
#[derive(Clone)]
pub struct StructureField {
    dim: usize,
    poisson: MatrixField,
    metric: Metric,
}

impl StructureField {
    /// Structure with the Euclidean metric.
    pub fn euclidean<F>(dim: usize, poisson: F) -> Self
    where
        F: Fn(&PhasePoint) -> DMatrix<f64> + Send + Sync + 'static,
    {
        StructureField {
            dim,
            poisson: Arc::new(poisson),
            metric: Metric::Euclidean,
        }
    }

    /// Structure with a pointwise metric.
    pub fn with_metric<F, G>(dim: usize, poisson: F, metric: G) -> Self
    where
        F: Fn(&PhasePoint) -> DMatrix<f64> + Send + Sync + 'static,
        G: Fn(&PhasePoint) -> DMatrix<f64> + Send + Sync + 'static,
    {
        StructureField {
            dim,
            poisson: Arc::new(poisson),
            metric: Metric::Pointwise(Arc::new(metric)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self.metric, Metric::Euclidean)
    }

    fn check_dim(&self, z: &PhasePoint) -> Result<()> {
        if z.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.dim(),
            });
        }
        Ok(())
    }

    /// The Poisson matrix `B(z)`.
    pub fn poisson_matrix(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        self.check_dim(z)?;
        let b = (self.poisson)(z);
        debug_assert!(
            (&b + b.transpose()).amax() <= tol::POISSON_ANTISYMMETRY * (1.0 + b.amax()),
            "Poisson matrix must be antisymmetric"
        );
        Ok(b)
    }

    /// The metric matrix `g(z)` (identity in the Euclidean case).
    pub fn metric_matrix(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        self.check_dim(z)?;
        Ok(match &self.metric {
            Metric::Euclidean => DMatrix::identity(self.dim, self.dim),
            Metric::Pointwise(g) => g(z),
        })
    }

    /// Cholesky factor check of `g(z)`; errors when the metric fails to be
    /// symmetric positive definite at `z`.
    pub fn metric_spd(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        let g = self.metric_matrix(z)?;
        if g.clone().cholesky().is_none() {
            return Err(Error::MetricDegeneracy);
        }
        Ok(g)
    }
}

/// The compatible structure `J(z) = B(z) g(z)`, the matrix that sends
/// Riemannian gradients to Hamiltonian vector fields: `X_h = J grad h`.
/// Under the Euclidean metric this is the Poisson matrix itself.
pub fn compatible_structure(sf: &StructureField, z: &PhasePoint) -> Result<DMatrix<f64>> {
    let b = sf.poisson_matrix(z)?;
    match &sf.metric {
        Metric::Euclidean => Ok(b),
        Metric::Pointwise(_) => {
            let g = sf.metric_spd(z)?;
            Ok(b * g)
        }
    }
}

/// Applies the compatible structure to a Riemannian gradient:
/// `X(z) = J(z) grad_h`.
pub fn hamiltonian_field(
    sf: &StructureField,
    z: &PhasePoint,
    riemannian_grad: &DVector<f64>,
) -> Result<DVector<f64>> {
    if riemannian_grad.len() != sf.dim() {
        return Err(Error::DimensionMismatch {
            expected: sf.dim(),
            got: riemannian_grad.len(),
        });
    }
    Ok(compatible_structure(sf, z)? * riemannian_grad)
}

type EmbedMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacobianMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type DomainCheck = Arc<dyn Fn(&PhasePoint) -> Result<()> + Send + Sync>;

/// A coordinate chart given by an embedding `iota` of the chart box into
/// an ambient Euclidean space, its Jacobian, and a domain predicate.
#[derive(Clone)]
pub struct Chart {
    dim: usize,
    ambient_dim: usize,
    embed: EmbedMap,
    jacobian: JacobianMap,
    domain: DomainCheck,
}

impl Chart {
    pub fn new<E, J, D>(dim: usize, ambient_dim: usize, embed: E, jacobian: J, domain: D) -> Self
    where
        E: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        D: Fn(&PhasePoint) -> Result<()> + Send + Sync + 'static,
    {
        Chart {
            dim,
            ambient_dim,
            embed: Arc::new(embed),
            jacobian: Arc::new(jacobian),
            domain: Arc::new(domain),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Embeds chart coordinates into the ambient space.
    pub fn embed(&self, coords: &DVector<f64>) -> DVector<f64> {
        (self.embed)(coords)
    }

    /// Jacobian of the embedding, `ambient_dim x dim`.
    pub fn jacobian(&self, coords: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(coords)
    }

    /// Domain membership, including any safety margin.
    pub fn validate(&self, z: &PhasePoint) -> Result<()> {
        if z.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.dim(),
            });
        }
        (self.domain)(z)
    }

    /// The metric induced by the embedding, `Diota^T Diota`.
    pub fn induced_metric(&self, coords: &DVector<f64>) -> DMatrix<f64> {
        let j = self.jacobian(coords);
        j.transpose() * j
    }

    /// Pulls an ambient velocity back to chart coordinates through the
    /// induced metric: solves `Diota zdot = v` in the least-squares sense,
    /// `zdot = (Diota^T Diota)^{-1} Diota^T v`. For velocities tangent to
    /// the embedded manifold this is the exact chart representation.
    pub fn pullback_velocity(&self, coords: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.ambient_dim {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim,
                got: v.len(),
            });
        }
        let j = self.jacobian(coords);
        let rhs = j.transpose() * v;
        self.induced_metric(coords)
            .cholesky()
            .ok_or(Error::MetricDegeneracy)
            .map(|ch| ch.solve(&rhs))
    }

    /// Product of `factors` copies of the spherical chart
    /// `(theta, phi) in (0, pi) x (0, 2 pi)` with embedding
    /// `(sin theta cos phi, sin theta sin phi, cos theta)` per factor.
    /// The domain check keeps [`tol::SPHERE_CHART_MARGIN`] away from the
    /// chart boundary, where the parametrization degenerates.
    pub fn sphere_product(factors: usize) -> Chart {
        let dim = 2 * factors;
        let ambient = 3 * factors;
        let margin = tol::SPHERE_CHART_MARGIN;
        Chart::new(
            dim,
            ambient,
            move |z| {
                let mut out = DVector::zeros(3 * factors);
                for k in 0..factors {
                    let (t, p) = (z[2 * k], z[2 * k + 1]);
                    out[3 * k] = t.sin() * p.cos();
                    out[3 * k + 1] = t.sin() * p.sin();
                    out[3 * k + 2] = t.cos();
                }
                out
            },
            move |z| {
                let mut j = DMatrix::zeros(3 * factors, 2 * factors);
                for k in 0..factors {
                    let (t, p) = (z[2 * k], z[2 * k + 1]);
                    let (st, ct, sp, cp) = (t.sin(), t.cos(), p.sin(), p.cos());
                    j[(3 * k, 2 * k)] = ct * cp;
                    j[(3 * k, 2 * k + 1)] = -st * sp;
                    j[(3 * k + 1, 2 * k)] = ct * sp;
                    j[(3 * k + 1, 2 * k + 1)] = st * cp;
                    j[(3 * k + 2, 2 * k)] = -st;
                }
                j
            },
            move |z: &PhasePoint| {
                use std::f64::consts::PI;
                for k in 0..factors {
                    let (t, p) = (z[2 * k], z[2 * k + 1]);
                    if !(t > margin && t < PI - margin) {
                        return Err(Error::ChartDomain(format!(
                            "theta_{} = {t} outside ({margin}, pi - {margin})",
                            k + 1
                        )));
                    }
                    if !(p > margin && p < 2.0 * PI - margin) {
                        return Err(Error::ChartDomain(format!(
                            "phi_{} = {p} outside ({margin}, 2 pi - {margin})",
                            k + 1
                        )));
                    }
                }
                Ok(())
            },
        )
    }
}

/// Great-circle distance between two points of S^2 given in ambient
/// coordinates, computed with atan2 for accuracy near 0 and pi.
pub fn sphere_geodesic(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}
