//! Learning Hamiltonian functions on Poisson manifolds from noisy
//! observations of Hamiltonian vector fields.
//!
//! The estimator is a closed-form kernel ridge regression in a reproducing
//! kernel Hilbert space on the phase space: given states `z^1..z^N` and
//! observed fields `X^1..X^N`, it minimizes
//!
//! ```text
//! (1/N) sum_n || X_h(z^n) - X^n ||_g^2  +  lambda ||h||_K^2
//! ```
//!
//! over the RKHS of the kernel `K`, where `X_h = B dh` is the Hamiltonian
//! field of the candidate `h` under the Poisson matrix `B` and the norm is
//! taken in the Riemannian metric `g`. The unique minimizer is linear in
//! the data and is computed by one dense symmetric factorization.
//!
//! Module map:
//!
//! * [`geometry`]: phase points, Poisson structure fields, charts.
//! * [`kernels`]: kernels with first and mixed second derivatives.
//! * [`fd`]: finite-difference oracles that gate every derivative formula.
//! * [`systems`]: benchmark systems (rigid body, underwater vehicle,
//!   Gaussian section, two-vortex, spherical 3-norm).
//! * [`sampling`]: deterministic seeded sampling and observation noise.
//! * [`estimator`]: Gram assembly, the ridge solve, and evaluation of the
//!   learned Hamiltonian and its field.
//! * [`dynamics`]: fixed-step integration, flow distance, conservation.
//! * [`experiments`]: configs, cross-validation, error reports, heatmaps,
//!   convergence studies.

pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod fd;
pub mod geometry;
pub mod kernels;
pub mod sampling;
pub mod systems;
pub mod tol;

pub use error::{Error, Result};
pub use estimator::{assemble_gram, fit, Estimator, TrainingSet};
pub use geometry::{compatible_structure, hamiltonian_field, hat, Chart, PhasePoint, StructureField};
pub use kernels::Kernel;
pub use systems::SystemModel;
