//! Kernels with the derivative data the estimator consumes.
//!
//! A kernel here is a symmetric positive-definite function `K(x, y)` on
//! chart coordinates together with two derivative evaluators:
//!
//! * `grad1`: the gradient in the first argument, `d/dx K(x, y)`;
//! * `hess12`: the mixed second-derivative block
//!   `M[a, b] = d^2 K / (dx_a dy_b)`, the object whose contractions with
//!   Poisson matrices build the differential Gram matrix.
//!
//! By symmetry of `K` the second-argument gradient is `grad1` with the
//! arguments swapped, and `hess12(x, y) = hess12(y, x)^T`; both identities
//! are relied upon downstream and covered by tests.
//!
//! New kernels on restricted or reduced coordinates are built by mapping:
//! for a smooth map `f` into the base kernel's space,
//! `K'(x, y) = K(f(x), f(y))` has
//! `grad1 K' = Df(x)^T grad1 K` and
//! `hess12 K' = Df(x)^T hess12 K Df(y)`.
//! Chart restriction (through an embedding) and argumentwise-invariant
//! kernels (through an invariant map) are the two instances used here.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::Chart;

/// Symmetric kernel on chart coordinates with first and mixed second
/// derivatives.
pub trait Kernel: Send + Sync {
    /// Dimension of the points the kernel accepts.
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;

    /// Gradient in the first argument.
    fn grad1(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;

    /// Mixed block `d^2 K / (dx_a dy_b)`, first-argument derivatives
    /// along rows.
    fn hess12(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;

    /// Gradient in the second argument; follows from symmetry of `K`.
    fn grad2(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.grad1(y, x)
    }
}

/// Gaussian kernel `exp(-||x - y||^2 / eta^2)`.
pub struct Gaussian {
    dim: usize,
    eta: f64,
}

impl Gaussian {
    pub fn new(dim: usize, eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gaussian bandwidth must be positive, got {eta}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("kernel dimension 0".into()));
        }
        Ok(Gaussian { dim, eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

impl Kernel for Gaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let d = x - y;
        (-d.norm_squared() / (self.eta * self.eta)).exp()
    }

    fn grad1(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let d = x - y;
        let k = (-d.norm_squared() / (self.eta * self.eta)).exp();
        d * (-2.0 / (self.eta * self.eta) * k)
    }

    fn hess12(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        // d^2/dx_a dy_b exp(-||x-y||^2/eta^2)
        //   = (2/eta^2 delta_ab - 4/eta^4 (x-y)_a (x-y)_b) K(x, y).
        let d = x - y;
        let e2 = self.eta * self.eta;
        let k = (-d.norm_squared() / e2).exp();
        let mut m = DMatrix::identity(self.dim, self.dim) * (2.0 / e2);
        m.ger(-4.0 / (e2 * e2), &d, &d, 1.0);
        m * k
    }
}

type VecMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Kernel obtained by feeding both arguments through a smooth map before
/// a base kernel, with chain-rule derivatives.
pub struct MappedKernel {
    base: Arc<dyn Kernel>,
    dim: usize,
    map: VecMap,
    jac: JacMap,
}

impl MappedKernel {
    /// `K'(x, y) = base(map(x), map(y))`. The Jacobian must be the
    /// derivative of `map` (checked against finite differences in tests,
    /// a caller obligation at runtime).
    pub fn new<M, J>(base: Arc<dyn Kernel>, dim: usize, map: M, jac: J) -> Result<Self>
    where
        M: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(Error::InvalidParameter("kernel dimension 0".into()));
        }
        Ok(MappedKernel {
            base,
            dim,
            map: Arc::new(map),
            jac: Arc::new(jac),
        })
    }
}

impl Kernel for MappedKernel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.base.eval(&(self.map)(x), &(self.map)(y))
    }

    fn grad1(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let jx = (self.jac)(x);
        jx.transpose() * self.base.grad1(&(self.map)(x), &(self.map)(y))
    }

    fn hess12(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let (jx, jy) = ((self.jac)(x), (self.jac)(y));
        jx.transpose() * self.base.hess12(&(self.map)(x), &(self.map)(y)) * jy
    }
}

/// Restriction of an ambient kernel to a chart: arguments are chart
/// coordinates, the base kernel acts on their embeddings. Positive
/// definiteness is inherited from the ambient kernel.
pub fn chart_restricted(base: Arc<dyn Kernel>, chart: &Chart) -> Result<MappedKernel> {
    if base.dim() != chart.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: chart.ambient_dim(),
            got: base.dim(),
        });
    }
    let (c1, c2) = (chart.clone(), chart.clone());
    MappedKernel::new(
        base,
        chart.dim(),
        move |z| c1.embed(z),
        move |z| c2.jacobian(z),
    )
}

/// Argumentwise-invariant kernel: for a map `f` constant on the orbits of
/// a symmetry group, `K'(x, y) = base(f(x), f(y))` is invariant in each
/// argument, and so is every function in its RKHS.
pub fn invariant<M, J>(base: Arc<dyn Kernel>, dim: usize, map: M, jac: J) -> Result<MappedKernel>
where
    M: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
{
    MappedKernel::new(base, dim, map, jac)
}

/// Plain kernel matrix `[K(z_i, z_j)]`, used for Mercer spot checks.
pub fn scalar_gram(k: &dyn Kernel, points: &[DVector<f64>]) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| k.eval(&points[i], &points[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{fd, tol};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(0x6b65726e)
    }

    fn random_vec(rng: &mut ChaCha12Rng, d: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn gaussian_normalizes_on_the_diagonal() {
        let k = Gaussian::new(3, 2.5).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 4.0]);
        assert_eq!(k.eval(&x, &x), 1.0);
    }

    #[test]
    fn gaussian_rejects_bad_bandwidth() {
        assert!(Gaussian::new(3, 0.0).is_err());
        assert!(Gaussian::new(3, -1.0).is_err());
        assert!(Gaussian::new(3, f64::NAN).is_err());
        assert!(Gaussian::new(0, 1.0).is_err());
    }

    #[test]
    fn gaussian_hess12_on_diagonal_is_two_over_eta_sq() {
        // eta = 1, x = y: the mixed block is exactly (2/eta^2) I = 2 I;
        // the four-point second difference agrees to 1e-6.
        let k = Gaussian::new(3, 1.0).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let h = k.hess12(&x, &x);
        assert!((h - DMatrix::identity(3, 3) * 2.0).amax() < 1e-14);
        let h_fd = fd::mixed_second(|a, b| k.eval(a, b), &x, &x, 1e-5);
        assert!((k.hess12(&x, &x) - h_fd).amax() < 1e-6);
    }

    fn check_derivatives(k: &dyn Kernel, pairs: usize, scale: f64, seed_salt: u64) {
        let mut r = ChaCha12Rng::seed_from_u64(0x64657276 ^ seed_salt);
        for _ in 0..pairs {
            let x = random_vec(&mut r, k.dim(), scale);
            let y = random_vec(&mut r, k.dim(), scale);
            let g = k.grad1(&x, &y);
            let g_fd = fd::gradient(|a| k.eval(a, &y), &x, tol::FD_STEP_GRAD);
            let g_tol = tol::FD_AGREEMENT * (1.0 + g_fd.amax());
            assert!((g - g_fd).amax() < g_tol, "grad1 disagrees with FD");

            let h = k.hess12(&x, &y);
            let h_fd = fd::mixed_second(|a, b| k.eval(a, b), &x, &y, tol::FD_STEP_HESS);
            let h_tol = tol::FD_AGREEMENT * (1.0 + h_fd.amax());
            assert!((h - h_fd).amax() < h_tol, "hess12 disagrees with FD");
        }
    }

    #[test]
    fn gaussian_derivatives_match_finite_differences() {
        let k = Gaussian::new(3, 2.5).unwrap();
        check_derivatives(&k, 50, 1.5, 1);
        let k9 = Gaussian::new(9, 5.0).unwrap();
        check_derivatives(&k9, 20, 1.5, 2);
    }

    fn sphere_kernel(eta: f64) -> MappedKernel {
        let chart = Chart::sphere_product(2);
        chart_restricted(Arc::new(Gaussian::new(6, eta).unwrap()), &chart).unwrap()
    }

    #[test]
    fn chart_restricted_derivatives_match_finite_differences() {
        let k = sphere_kernel(0.7);
        let mut r = rng();
        for _ in 0..30 {
            let x = DVector::from_fn(4, |i, _| {
                if i % 2 == 0 {
                    r.random_range(0.2..std::f64::consts::PI - 0.2)
                } else {
                    r.random_range(0.2..2.0 * std::f64::consts::PI - 0.2)
                }
            });
            let y = DVector::from_fn(4, |i, _| {
                if i % 2 == 0 {
                    r.random_range(0.2..std::f64::consts::PI - 0.2)
                } else {
                    r.random_range(0.2..2.0 * std::f64::consts::PI - 0.2)
                }
            });
            let g = k.grad1(&x, &y);
            let g_fd = fd::gradient(|a| k.eval(a, &y), &x, tol::FD_STEP_GRAD);
            assert!((g - &g_fd).amax() < tol::FD_AGREEMENT * (1.0 + g_fd.amax()));
            let h = k.hess12(&x, &y);
            let h_fd = fd::mixed_second(|a, b| k.eval(a, b), &x, &y, tol::FD_STEP_HESS);
            assert!((h - &h_fd).amax() < tol::FD_AGREEMENT * (1.0 + h_fd.amax()));
        }
    }

    fn rotation_invariant_kernel() -> MappedKernel {
        // f(P) = (P1^2 + P2^2, P3) is constant on orbits of rotation about
        // the third axis.
        invariant(
            Arc::new(Gaussian::new(2, 2.0).unwrap()),
            3,
            |z: &DVector<f64>| DVector::from_vec(vec![z[0] * z[0] + z[1] * z[1], z[2]]),
            |z: &DVector<f64>| DMatrix::from_row_slice(2, 3, &[2.0 * z[0], 2.0 * z[1], 0.0, 0.0, 0.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn invariant_kernel_is_argumentwise_rotation_invariant() {
        let k = rotation_invariant_kernel();
        let mut r = rng();
        for _ in 0..20 {
            let x = random_vec(&mut r, 3, 1.0);
            let y = random_vec(&mut r, 3, 1.0);
            let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let rx = DVector::from_vec(vec![
                a.cos() * x[0] - a.sin() * x[1],
                a.sin() * x[0] + a.cos() * x[1],
                x[2],
            ]);
            assert!((k.eval(&rx, &y) - k.eval(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_kernel_derivatives_match_finite_differences() {
        let k = rotation_invariant_kernel();
        check_derivatives(&k, 30, 1.0, 3);
    }

    #[test]
    fn hess12_argument_swap_is_transpose() {
        let k = sphere_kernel(0.9);
        let x = DVector::from_vec(vec![0.8, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![1.4, 5.1, 0.6, 2.2]);
        let a = k.hess12(&x, &y);
        let b = k.hess12(&y, &x);
        assert!((a - b.transpose()).amax() < 1e-13);
    }

    #[test]
    fn grad2_is_grad1_swapped_and_matches_fd() {
        let k = Gaussian::new(3, 1.7).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.5, -0.4]);
        let y = DVector::from_vec(vec![-0.9, 0.2, 0.8]);
        let g2 = k.grad2(&x, &y);
        let g2_fd = fd::gradient(|b| k.eval(&x, b), &y, tol::FD_STEP_GRAD);
        assert!((g2 - g2_fd).amax() < tol::FD_AGREEMENT);
    }

    #[test]
    fn scalar_gram_is_positive_semidefinite() {
        let mut r = rng();
        let k3 = Gaussian::new(3, 1.0).unwrap();
        let pts: Vec<_> = (0..50).map(|_| random_vec(&mut r, 3, 1.0)).collect();
        let gram = scalar_gram(&k3, &pts);
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let trace = gram.trace();
        assert!(eig.min() >= -tol::GRAM_PSD_REL * trace);

        let ks = sphere_kernel(0.7);
        let pts: Vec<_> = (0..40)
            .map(|_| {
                DVector::from_fn(4, |i, _| {
                    if i % 2 == 0 {
                        r.random_range(0.1..3.0)
                    } else {
                        r.random_range(0.1..6.1)
                    }
                })
            })
            .collect();
        let gram = scalar_gram(&ks, &pts);
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() >= -tol::GRAM_PSD_REL * gram.trace());
    }

    #[test]
    fn differential_reproducing_property_holds_numerically() {
        // For f = sum_j a_j K(z_j, .), the directional derivative of f at y
        // along v equals sum_j a_j v . grad1 K(y, z_j), because the
        // gradient of K(z_j, .) at y is grad1 K(y, z_j) by symmetry.
        let k = Gaussian::new(3, 1.3).unwrap();
        let mut r = rng();
        let zs: Vec<_> = (0..6).map(|_| random_vec(&mut r, 3, 1.0)).collect();
        let a: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |y: &DVector<f64>| -> f64 {
            zs.iter().zip(&a).map(|(z, ai)| ai * k.eval(z, y)).sum()
        };
        for _ in 0..10 {
            let y = random_vec(&mut r, 3, 1.0);
            let v = random_vec(&mut r, 3, 1.0).normalize();
            let analytic: f64 = zs
                .iter()
                .zip(&a)
                .map(|(z, ai)| ai * v.dot(&k.grad1(&y, z)))
                .sum();
            let numeric = fd::directional(f, &y, &v, tol::FD_STEP_GRAD);
            assert!((analytic - numeric).abs() < tol::FD_AGREEMENT * (1.0 + numeric.abs()));
        }
    }
}
