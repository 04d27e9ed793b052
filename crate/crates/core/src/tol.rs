//! Centralized numerical tolerances and guard thresholds.
//!
//! Every tolerance that a contract or an invariant check depends on lives
//! here, with the reasoning that fixed its magnitude. Tests reference these
//! constants instead of repeating literals.

/// Antisymmetry defect allowed in a Poisson matrix, `max|B + B^T|`.
/// Poisson matrices here are assembled from closed-form entries, so the
/// defect is pure floating-point noise.
pub const POISSON_ANTISYMMETRY: f64 = 1e-12;

/// Casimir annihilation: `||B(z) dC(z)||` must not exceed
/// `CASIMIR_ANNIHILATION * (1 + ||dC(z)||)`.
pub const CASIMIR_ANNIHILATION: f64 = 1e-10;

/// Adjoint relation of the compatible structure, `g(Ju, v) = g(u, -Jv)`,
/// checked entrywise against this bound.
pub const ADJOINT_RELATION: f64 = 1e-10;

/// Relative residual allowed after the ridge solve:
/// `||(G + lambda N I) c - X|| <= RIDGE_RESIDUAL_REL * ||X||`.
pub const RIDGE_RESIDUAL_REL: f64 = 1e-8;

/// Smallest admissible ridge parameter. Below this the normal equations
/// are numerically indistinguishable from the unregularized problem.
pub const MIN_LAMBDA: f64 = 1e-14;

/// Gram positive semidefiniteness: the smallest eigenvalue of the
/// metric-symmetrized Gram matrix must be `>= -GRAM_PSD_REL * trace`.
pub const GRAM_PSD_REL: f64 = 1e-10;

/// Central-difference step for first-derivative checks, scaled per
/// coordinate by `(1 + |x_i|)`. Truncation error O(h^2) ~ 1e-10 and
/// roundoff O(eps/h) ~ 1e-11 are both below the 1e-5 gate.
pub const FD_STEP_GRAD: f64 = 1e-5;

/// Step for the four-point second difference used to check mixed
/// derivatives. Roundoff grows like eps/h^2, so this step keeps it near
/// 1e-8 while truncation stays near 1e-8 as well.
pub const FD_STEP_HESS: f64 = 1e-4;

/// Agreement required between analytic derivatives and finite differences,
/// relative to `1 + max|reference entry|`.
pub const FD_AGREEMENT: f64 = 1e-5;

/// Margin kept from the boundary of the spherical chart
/// `(0, pi) x (0, 2 pi)`; samples and grids stay inside the shrunken box.
pub const SPHERE_CHART_MARGIN: f64 = 1e-3;

/// Two-vortex training and test points must satisfy
/// `1 - x1 . x2 >= VORTEX_SAMPLE_GUARD`; the vector field diverges like
/// `1/(1 - x1 . x2)` on the diagonal.
pub const VORTEX_SAMPLE_GUARD: f64 = 1e-6;

/// Two-vortex evaluation grids exclude the wider band
/// `1 - x1 . x2 < VORTEX_GRID_BAND` where the field error is dominated by
/// the singularity.
pub const VORTEX_GRID_BAND: f64 = 1e-3;

/// Hamiltonian evaluation of the two-vortex system fails with a
/// singularity error once `x1 . x2 >= 1 - VORTEX_EVAL_GUARD`.
pub const VORTEX_EVAL_GUARD: f64 = 1e-9;
