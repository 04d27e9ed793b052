//! Benchmark systems: Hamiltonians with their Poisson structures, Casimirs,
//! and charts.
//!
//! Five models are provided.
//!
//! * `rigid_body`: angular momentum on R^3 with `B(P) = hat(P)`,
//!   `H = 1/2 P . I^-1 P`, Casimir `||P||^2`.
//! * `underwater_vehicle`: 9-dimensional state `(P, Q, G)` with the
//!   hat-block Poisson matrix and a quadratic-plus-gravity Hamiltonian.
//!   Exactly three of the six classical candidate invariants annihilate
//!   the bracket; see `underwater_vehicle_invariant_candidates`.
//! * `gaussian_section`: `H = x1^2 x2^3 exp(-||x||^2/eta^2)` with the
//!   rigid-body structure; its Hamiltonian lies in the Gaussian RKHS, so
//!   the estimator can recover it up to a constant.
//! * `two_vortex`: point vortices on a product of two spheres in the
//!   spherical chart, `H = -l1 l2 log(1 - x1 . x2)`, singular where the
//!   vortices collide.
//! * `spherical_norm3`: same chart and unit-strength structure with
//!   `H = cbrt(sum of signed cubes of the embedded coordinates)`.
//!
//! Chart systems carry the per-factor structure matrix
//! `(1 / (l_k sin(theta_k))) [[0, 1], [-1, 0]]` and the induced metric
//! `diag(1, sin^2 theta_k)`; the resulting field reproduces the ambient
//! vortex equations `dx_j/dt = sum_{i != j} l_i (x_i x x_j)/(1 - x_i . x_j)`
//! pulled back through the chart (covered by tests against
//! `two_vortex_ambient_field`).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{hat, Chart, PhasePoint, StructureField};
use crate::tol;

type ScalarFn = Arc<dyn Fn(&PhasePoint) -> Result<f64> + Send + Sync>;
type VectorFn = Arc<dyn Fn(&PhasePoint) -> Result<DVector<f64>> + Send + Sync>;
type GuardFn = Arc<dyn Fn(&PhasePoint) -> Result<()> + Send + Sync>;
type PredicateFn = Arc<dyn Fn(&PhasePoint) -> bool + Send + Sync>;

/// Conserved function with an analytic gradient, used for annihilation
/// checks, drift diagnostics, and Casimir correction of learned
/// Hamiltonians.
#[derive(Clone)]
pub struct Casimir {
    name: String,
    value: Arc<dyn Fn(&PhasePoint) -> f64 + Send + Sync>,
    gradient: Arc<dyn Fn(&PhasePoint) -> DVector<f64> + Send + Sync>,
}

impl Casimir {
    pub fn new<V, G>(name: &str, value: V, gradient: G) -> Self
    where
        V: Fn(&PhasePoint) -> f64 + Send + Sync + 'static,
        G: Fn(&PhasePoint) -> DVector<f64> + Send + Sync + 'static,
    {
        Casimir {
            name: name.to_string(),
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, z: &PhasePoint) -> f64 {
        (self.value)(z)
    }

    pub fn gradient(&self, z: &PhasePoint) -> DVector<f64> {
        (self.gradient)(z)
    }
}

/// A Hamiltonian system: energy function, its coordinate gradient, the
/// Poisson structure it flows under, Casimirs of that structure, and an
/// optional chart with domain guards.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    structure: StructureField,
    h: ScalarFn,
    dh: VectorFn,
    casimirs: Vec<Casimir>,
    chart: Option<Chart>,
    guard: Option<GuardFn>,
    sample_predicate: Option<PredicateFn>,
}

impl SystemModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    pub fn structure(&self) -> &StructureField {
        &self.structure
    }

    pub fn chart(&self) -> Option<&Chart> {
        self.chart.as_ref()
    }

    pub fn casimirs(&self) -> &[Casimir] {
        &self.casimirs
    }

    /// Stricter-than-evaluation acceptance test for training and test
    /// points, where the system needs one (vortex collision guard).
    pub fn sample_predicate(&self) -> Option<&PredicateFn> {
        self.sample_predicate.as_ref()
    }

    /// Checks dimension, chart domain, and any singularity guard.
    pub fn validate(&self, z: &PhasePoint) -> Result<()> {
        if z.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.dim(),
            });
        }
        if let Some(chart) = &self.chart {
            chart.validate(z)?;
        }
        if let Some(guard) = &self.guard {
            guard(z)?;
        }
        Ok(())
    }

    pub fn hamiltonian(&self, z: &PhasePoint) -> Result<f64> {
        self.validate(z)?;
        (self.h)(z)
    }

    /// Coordinate partials of the Hamiltonian in the system's chart.
    pub fn grad_hamiltonian(&self, z: &PhasePoint) -> Result<DVector<f64>> {
        self.validate(z)?;
        (self.dh)(z)
    }

    /// Hamiltonian vector field `B(z) dH(z)`.
    pub fn vector_field(&self, z: &PhasePoint) -> Result<DVector<f64>> {
        self.validate(z)?;
        let b = self.structure.poisson_matrix(z)?;
        Ok(b * (self.dh)(z)?)
    }
}

fn dhat(v: Vector3<f64>) -> DMatrix<f64> {
    let m = hat(&v);
    DMatrix::from_fn(3, 3, |i, j| m[(i, j)])
}

fn check_positive(values: &[f64], what: &str) -> Result<()> {
    for &v in values {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{what} entries must be positive, got {v}"
            )));
        }
    }
    Ok(())
}

/// Free rigid body: `H = 1/2 P . I^-1 P`, `B(P) = hat(P)`, so the field is
/// the Euler equation `dP/dt = P x I^-1 P`.
pub fn rigid_body(inertia: [f64; 3]) -> Result<SystemModel> {
    check_positive(&inertia, "inertia")?;
    let a = [1.0 / inertia[0], 1.0 / inertia[1], 1.0 / inertia[2]];
    Ok(SystemModel {
        name: "rigid_body".into(),
        structure: StructureField::euclidean(3, |z: &PhasePoint| {
            dhat(z.coords().fixed_rows::<3>(0).into_owned())
        }),
        h: Arc::new(move |z| {
            let c = z.coords();
            Ok(0.5 * (a[0] * c[0] * c[0] + a[1] * c[1] * c[1] + a[2] * c[2] * c[2]))
        }),
        dh: Arc::new(move |z| {
            let c = z.coords();
            Ok(DVector::from_vec(vec![a[0] * c[0], a[1] * c[1], a[2] * c[2]]))
        }),
        casimirs: vec![Casimir::new(
            "norm_sq",
            |z| z.coords().norm_squared(),
            |z| z.coords() * 2.0,
        )],
        chart: None,
        guard: None,
        sample_predicate: None,
    })
}

/// Parameters of the underwater vehicle model. Defaults match the
/// benchmark configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Diagonal of the body inertia matrix.
    pub inertia: [f64; 3],
    /// Diagonal of the mass matrix.
    pub mass_matrix: [f64; 3],
    /// Scalar mass in the gravity term.
    pub mass: f64,
    /// Gravitational acceleration.
    pub gravity: f64,
    /// Vector from the center of buoyancy to the center of gravity.
    pub gravity_center: [f64; 3],
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            inertia: [1.0, 2.0, 3.0],
            mass_matrix: [3.0, 2.0, 1.0],
            mass: 1.0,
            gravity: 9.8,
            gravity_center: [1.0, 1.0, 1.0],
        }
    }
}

fn place_block(m: &mut DMatrix<f64>, bi: usize, bj: usize, block: &DMatrix<f64>) {
    m.view_mut((3 * bi, 3 * bj), (3, 3)).copy_from(block);
}

/// Underwater vehicle on the 9-dimensional state `(P, Q, G)`:
/// `H = 1/2 (P . A P + Q . C Q) - m g0 (G . r)` with `A`, `C` the inverse
/// inertia and mass diagonals, and the hat-block Poisson matrix
/// `[[hat P, hat Q, hat G], [hat Q, 0, 0], [hat G, 0, 0]]`.
pub fn underwater_vehicle(params: VehicleParams) -> Result<SystemModel> {
    check_positive(&params.inertia, "inertia")?;
    check_positive(&params.mass_matrix, "mass matrix")?;
    if !(params.mass.is_finite() && params.gravity.is_finite()) {
        return Err(Error::InvalidParameter("mass and gravity must be finite".into()));
    }
    let a = [
        1.0 / params.inertia[0],
        1.0 / params.inertia[1],
        1.0 / params.inertia[2],
    ];
    let c = [
        1.0 / params.mass_matrix[0],
        1.0 / params.mass_matrix[1],
        1.0 / params.mass_matrix[2],
    ];
    let mg = params.mass * params.gravity;
    let r = Vector3::from_row_slice(&params.gravity_center);

    Ok(SystemModel {
        name: "underwater_vehicle".into(),
        structure: StructureField::euclidean(9, |z: &PhasePoint| {
            let v = z.coords();
            let (p, q, g) = (
                v.fixed_rows::<3>(0).into_owned(),
                v.fixed_rows::<3>(3).into_owned(),
                v.fixed_rows::<3>(6).into_owned(),
            );
            let mut m = DMatrix::zeros(9, 9);
            place_block(&mut m, 0, 0, &dhat(p));
            place_block(&mut m, 0, 1, &dhat(q));
            place_block(&mut m, 0, 2, &dhat(g));
            place_block(&mut m, 1, 0, &dhat(q));
            place_block(&mut m, 2, 0, &dhat(g));
            m
        }),
        h: Arc::new(move |z| {
            let v = z.coords();
            let kinetic: f64 = (0..3)
                .map(|i| a[i] * v[i] * v[i] + c[i] * v[3 + i] * v[3 + i])
                .sum();
            let potential = mg * (v[6] * r[0] + v[7] * r[1] + v[8] * r[2]);
            Ok(0.5 * kinetic - potential)
        }),
        dh: Arc::new(move |z| {
            let v = z.coords();
            let mut g = DVector::zeros(9);
            for i in 0..3 {
                g[i] = a[i] * v[i];
                g[3 + i] = c[i] * v[3 + i];
                g[6 + i] = -mg * r[i];
            }
            Ok(g)
        }),
        casimirs: underwater_vehicle_invariant_candidates()
            .into_iter()
            .take(3)
            .collect(),
        chart: None,
        guard: None,
        sample_predicate: None,
    })
}

/// The six classical candidate invariants of the vehicle bracket. Only the
/// first three (`q_dot_gamma`, `q_norm_sq`, `gamma_norm_sq`) annihilate the
/// Poisson matrix; the bracket has rank 6 away from degenerate states, so
/// it admits no further independent Casimirs, and the last three fail the
/// annihilation check (see tests). All six are exposed for diagnostics.
pub fn underwater_vehicle_invariant_candidates() -> Vec<Casimir> {
    fn split(z: &PhasePoint) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let v = z.coords();
        (
            v.rows(0, 3).into_owned(),
            v.rows(3, 3).into_owned(),
            v.rows(6, 3).into_owned(),
        )
    }
    fn stack(a: DVector<f64>, b: DVector<f64>, c: DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(9);
        out.rows_mut(0, 3).copy_from(&a);
        out.rows_mut(3, 3).copy_from(&b);
        out.rows_mut(6, 3).copy_from(&c);
        out
    }
    fn zero() -> DVector<f64> {
        DVector::zeros(3)
    }
    vec![
        Casimir::new(
            "q_dot_gamma",
            |z| {
                let (_, q, g) = split(z);
                q.dot(&g)
            },
            |z| {
                let (_, q, g) = split(z);
                stack(zero(), g, q)
            },
        ),
        Casimir::new(
            "q_norm_sq",
            |z| split(z).1.norm_squared(),
            |z| {
                let (_, q, _) = split(z);
                stack(zero(), q * 2.0, zero())
            },
        ),
        Casimir::new(
            "gamma_norm_sq",
            |z| split(z).2.norm_squared(),
            |z| {
                let (_, _, g) = split(z);
                stack(zero(), zero(), g * 2.0)
            },
        ),
        Casimir::new(
            "pi_dot_q",
            |z| {
                let (p, q, _) = split(z);
                p.dot(&q)
            },
            |z| {
                let (p, q, _) = split(z);
                stack(q, p, zero())
            },
        ),
        Casimir::new(
            "pi_dot_gamma",
            |z| {
                let (p, _, g) = split(z);
                p.dot(&g)
            },
            |z| {
                let (p, _, g) = split(z);
                stack(g, zero(), p)
            },
        ),
        Casimir::new(
            "pi_norm_sq",
            |z| split(z).0.norm_squared(),
            |z| {
                let (p, _, _) = split(z);
                stack(p * 2.0, zero(), zero())
            },
        ),
    ]
}

/// `H = x1^2 x2^3 exp(-||x||^2/eta^2)` with the rigid-body structure.
/// The Hamiltonian is an element of the Gaussian RKHS with bandwidth
/// `eta`, so structure-preserving regression can recover it exactly up
/// to a constant.
pub fn gaussian_section(eta: f64) -> Result<SystemModel> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bandwidth must be positive, got {eta}"
        )));
    }
    let e2 = eta * eta;
    Ok(SystemModel {
        name: "gaussian_section".into(),
        structure: StructureField::euclidean(3, |z: &PhasePoint| {
            dhat(z.coords().fixed_rows::<3>(0).into_owned())
        }),
        h: Arc::new(move |z| {
            let c = z.coords();
            Ok(c[0] * c[0] * c[1] * c[1] * c[1] * (-c.norm_squared() / e2).exp())
        }),
        dh: Arc::new(move |z| {
            let c = z.coords();
            let p = c[0] * c[0] * c[1] * c[1] * c[1];
            let e = (-c.norm_squared() / e2).exp();
            Ok(DVector::from_vec(vec![
                (2.0 * c[0] * c[1] * c[1] * c[1] - p * 2.0 * c[0] / e2) * e,
                (3.0 * c[0] * c[0] * c[1] * c[1] - p * 2.0 * c[1] / e2) * e,
                -p * 2.0 * c[2] / e2 * e,
            ]))
        }),
        casimirs: vec![Casimir::new(
            "norm_sq",
            |z| z.coords().norm_squared(),
            |z| z.coords() * 2.0,
        )],
        chart: None,
        guard: None,
        sample_predicate: None,
    })
}

/// Structure matrix and induced metric shared by the sphere-product
/// systems: per factor `(1/(l_k sin theta_k)) [[0, 1], [-1, 0]]` and
/// `diag(1, sin^2 theta_k)`.
fn sphere_product_structure(strengths: [f64; 2]) -> StructureField {
    StructureField::with_metric(
        4,
        move |z: &PhasePoint| {
            let c = z.coords();
            let mut b = DMatrix::zeros(4, 4);
            for k in 0..2 {
                let w = 1.0 / (strengths[k] * c[2 * k].sin());
                b[(2 * k, 2 * k + 1)] = w;
                b[(2 * k + 1, 2 * k)] = -w;
            }
            b
        },
        |z: &PhasePoint| {
            let c = z.coords();
            DMatrix::from_diagonal(&DVector::from_vec(vec![
                1.0,
                c[0].sin().powi(2),
                1.0,
                c[2].sin().powi(2),
            ]))
        },
    )
}

/// Inner product `x1 . x2` of the two embedded vortex positions; the
/// system is singular as this approaches 1.
pub fn vortex_alignment(chart: &Chart, z: &PhasePoint) -> f64 {
    let x = chart.embed(z.coords());
    x.rows(0, 3).dot(&x.rows(3, 3))
}

/// Two point vortices of strengths `l1`, `l2` on a product of two spheres:
/// `H = -l1 l2 log(1 - x1 . x2)` in the spherical chart, with a
/// singularity guard where the vortices collide.
pub fn two_vortex(l1: f64, l2: f64) -> Result<SystemModel> {
    if !(l1.is_finite() && l2.is_finite()) || l1 == 0.0 || l2 == 0.0 {
        return Err(Error::InvalidParameter(format!(
            "vortex strengths must be nonzero, got {l1}, {l2}"
        )));
    }
    let chart = Chart::sphere_product(2);
    let guard_chart = chart.clone();
    let h_chart = chart.clone();
    let dh_chart = chart.clone();
    let pred_chart = chart.clone();
    Ok(SystemModel {
        name: "two_vortex".into(),
        structure: sphere_product_structure([l1, l2]),
        h: Arc::new(move |z| {
            let u = vortex_alignment(&h_chart, z);
            Ok(-l1 * l2 * (1.0 - u).ln())
        }),
        dh: Arc::new(move |z| {
            let c = z.coords();
            let x = dh_chart.embed(c);
            let u = x.rows(0, 3).dot(&x.rows(3, 3));
            let scale = l1 * l2 / (1.0 - u);
            let mut ambient = DVector::zeros(6);
            ambient.rows_mut(0, 3).copy_from(&(x.rows(3, 3) * scale));
            ambient.rows_mut(3, 3).copy_from(&(x.rows(0, 3) * scale));
            Ok(dh_chart.jacobian(c).transpose() * ambient)
        }),
        casimirs: vec![],
        chart: Some(chart),
        guard: Some(Arc::new(move |z| {
            let u = vortex_alignment(&guard_chart, z);
            if u >= 1.0 - tol::VORTEX_EVAL_GUARD {
                return Err(Error::Singularity(format!(
                    "vortex positions coincide: 1 - x1.x2 = {:e}",
                    1.0 - u
                )));
            }
            Ok(())
        })),
        sample_predicate: Some(Arc::new(move |z| {
            1.0 - vortex_alignment(&pred_chart, z) >= tol::VORTEX_SAMPLE_GUARD
        })),
    })
}

/// Exact vortex equations on the embedded spheres:
/// `dx1/dt = l2 (x2 x x1)/(1 - x1 . x2)` and symmetrically for `x2`.
/// Serves as the independent oracle the chart-coordinate field is checked
/// against.
pub fn two_vortex_ambient_field(
    l1: f64,
    l2: f64,
    x1: &Vector3<f64>,
    x2: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let u = x1.dot(x2);
    if u >= 1.0 - tol::VORTEX_EVAL_GUARD {
        return Err(Error::Singularity(format!(
            "vortex positions coincide: 1 - x1.x2 = {:e}",
            1.0 - u
        )));
    }
    let denom = 1.0 - u;
    Ok((x2.cross(x1) * (l2 / denom), x1.cross(x2) * (l1 / denom)))
}

/// `H = cbrt(sum of cubes of all embedded coordinates)` on the same chart
/// and unit-strength structure as the two-vortex system. The cube root is
/// the real signed one, so the function is defined on the whole product
/// of spheres.
pub fn spherical_norm3() -> SystemModel {
    let chart = Chart::sphere_product(2);
    let h_chart = chart.clone();
    let dh_chart = chart.clone();
    SystemModel {
        name: "spherical_norm3".into(),
        structure: sphere_product_structure([1.0, 1.0]),
        h: Arc::new(move |z| {
            let x = h_chart.embed(z.coords());
            Ok(x.iter().map(|v| v * v * v).sum::<f64>().cbrt())
        }),
        dh: Arc::new(move |z| {
            let c = z.coords();
            let x = dh_chart.embed(c);
            let s: f64 = x.iter().map(|v| v * v * v).sum();
            let r = s.cbrt();
            if r == 0.0 {
                return Err(Error::Singularity(
                    "cube-sum gradient undefined where the cubic sum vanishes".into(),
                ));
            }
            // d/dx_k (sum x^3)^(1/3) = x_k^2 * s^(-2/3): the cube-rule
            // factor 3 cancels the outer 1/3.
            let ambient = x.map(|v| v * v / (r * r));
            Ok(dh_chart.jacobian(c).transpose() * ambient)
        }),
        casimirs: vec![],
        chart: Some(chart),
        guard: None,
        sample_predicate: None,
    }
}
