//! Seeded data generation: uniform samples on cubes and products of
//! spheres, and coordinate-wise observation noise.
//!
//! Every operation derives its own counter-based generator from the pair
//! (seed, stream tag), so point draws and noise draws never share a
//! stream: adding noise cannot perturb the point sample under a fixed
//! seed, and distinct tags ("train", "test", ...) give independent sets.
//!
//! Sphere factors are drawn by inverse CDF, `theta = arccos(2 u1 - 1)`,
//! `phi = 2 pi u2`, which is uniform with respect to the sphere's area
//! measure. A draw that violates the chart margin or a caller-supplied
//! acceptance predicate discards the whole point and redraws it, keeping
//! the output independent and identically distributed on the accepted
//! region.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::PhasePoint;
use crate::tol;

/// Attempts per requested point before rejection sampling gives up.
const MAX_REDRAWS: usize = 10_000;

/// What to sample and how much.
#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub kind: SampleKind,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum SampleKind {
    /// Uniform on a product of intervals, one `(lower, upper)` pair per
    /// coordinate. Degenerate intervals with `lower == upper` pin that
    /// coordinate.
    Cube { bounds: Vec<(f64, f64)> },
    /// Uniform on a product of unit spheres in spherical-chart
    /// coordinates `(theta_1, phi_1, ..., theta_k, phi_k)`.
    SphereProduct { factors: usize },
}

/// Deterministic generator for the given seed and stream tag.
pub fn stream(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha12Rng::from_seed(key)
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    Ok(())
}

/// IID uniform points on the spec's cube.
pub fn sample_cube(spec: &SampleSpec, tag: &str) -> Result<Vec<PhasePoint>> {
    check_count(spec.count)?;
    let bounds = match &spec.kind {
        SampleKind::Cube { bounds } => bounds,
        SampleKind::SphereProduct { .. } => {
            return Err(Error::InvalidParameter("expected a cube sample spec".into()))
        }
    };
    if bounds.is_empty() {
        return Err(Error::InvalidParameter("cube bounds are empty".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidParameter(format!(
                "invalid cube bounds ({lo}, {hi})"
            )));
        }
    }
    let mut rng = stream(spec.seed, tag);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let coords = DVector::from_iterator(
            bounds.len(),
            bounds.iter().map(|&(lo, hi)| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }),
        );
        out.push(PhasePoint::new(coords)?);
    }
    Ok(out)
}

fn sphere_coords(u1: f64, u2: f64) -> (f64, f64) {
    ((2.0 * u1 - 1.0).acos(), std::f64::consts::TAU * u2)
}

fn in_margin(theta: f64, phi: f64) -> bool {
    let m = tol::SPHERE_CHART_MARGIN;
    theta > m
        && theta < std::f64::consts::PI - m
        && phi > m
        && phi < std::f64::consts::TAU - m
}

/// IID area-uniform points on the spec's product of spheres, in chart
/// coordinates. Points violating the chart margin or failing `accept`
/// are discarded whole and redrawn.
pub fn sample_sphere_product(
    spec: &SampleSpec,
    tag: &str,
    accept: Option<&dyn Fn(&PhasePoint) -> bool>,
) -> Result<Vec<PhasePoint>> {
    check_count(spec.count)?;
    let factors = match spec.kind {
        SampleKind::SphereProduct { factors } => factors,
        SampleKind::Cube { .. } => {
            return Err(Error::InvalidParameter(
                "expected a sphere-product sample spec".into(),
            ))
        }
    };
    if factors == 0 {
        return Err(Error::InvalidParameter("sphere product needs at least one factor".into()));
    }
    let mut rng = stream(spec.seed, tag);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let mut coords = DVector::zeros(2 * factors);
            let mut ok = true;
            for k in 0..factors {
                let (theta, phi) = sphere_coords(rng.random::<f64>(), rng.random::<f64>());
                coords[2 * k] = theta;
                coords[2 * k + 1] = phi;
                ok &= in_margin(theta, phi);
            }
            if !ok {
                continue;
            }
            let z = PhasePoint::new(coords)?;
            if accept.map_or(true, |f| f(&z)) {
                accepted = Some(z);
                break;
            }
        }
        match accepted {
            Some(z) => out.push(z),
            None => {
                return Err(Error::InvalidParameter(format!(
                    "rejection sampling exhausted {MAX_REDRAWS} attempts per point"
                )))
            }
        }
    }
    Ok(out)
}

/// Adds IID Gaussian noise with standard deviation `sigma` to every
/// coordinate of every field vector. `sigma = 0` returns the input
/// unchanged without consuming randomness.
pub fn add_tangent_noise(
    fields: &[DVector<f64>],
    sigma: f64,
    seed: u64,
    tag: &str,
) -> Result<Vec<DVector<f64>>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise level must be nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(fields.to_vec());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidParameter(format!("noise distribution: {e}")))?;
    let mut rng = stream(seed, tag);
    Ok(fields
        .iter()
        .map(|f| f.map(|v| v + normal.sample(&mut rng)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Chart;
    use crate::systems;
    use std::f64::consts::PI;

    fn cube_spec(count: usize, seed: u64) -> SampleSpec {
        SampleSpec {
            kind: SampleKind::Cube {
                bounds: vec![(-1.0, 1.0); 3],
            },
            count,
            seed,
        }
    }

    fn sphere_spec(count: usize, factors: usize, seed: u64) -> SampleSpec {
        SampleSpec {
            kind: SampleKind::SphereProduct { factors },
            count,
            seed,
        }
    }

    #[test]
    fn degenerate_cube_produces_the_pinned_point() {
        let spec = SampleSpec {
            kind: SampleKind::Cube {
                bounds: vec![(0.0, 0.0); 3],
            },
            count: 1,
            seed: 7,
        };
        let pts = sample_cube(&spec, "train").unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].coords().amax(), 0.0);
    }

    #[test]
    fn cube_sample_mean_is_centered() {
        let pts = sample_cube(&cube_spec(10_000, 42), "train").unwrap();
        for coord in 0..3 {
            let mean: f64 = pts.iter().map(|p| p[coord]).sum::<f64>() / pts.len() as f64;
            assert!(mean.abs() <= 0.05, "coordinate {coord} mean {mean}");
        }
    }

    #[test]
    fn identical_seed_and_tag_reproduce_samples_exactly() {
        let a = sample_cube(&cube_spec(50, 9), "train").unwrap();
        let b = sample_cube(&cube_spec(50, 9), "train").unwrap();
        assert_eq!(a, b);
        let s = sample_sphere_product(&sphere_spec(50, 2, 9), "train", None).unwrap();
        let t = sample_sphere_product(&sphere_spec(50, 2, 9), "train", None).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn distinct_tags_and_seeds_give_distinct_streams() {
        let a = sample_cube(&cube_spec(10, 9), "train").unwrap();
        let b = sample_cube(&cube_spec(10, 9), "test").unwrap();
        let c = sample_cube(&cube_spec(10, 10), "train").unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn inverse_cdf_hits_reference_values() {
        let (theta, phi) = sphere_coords(0.5, 0.5);
        assert!((theta - PI / 2.0).abs() < 1e-15);
        assert!((phi - PI).abs() < 1e-15);
        let (theta, _) = sphere_coords(1.0 - 1e-12, 0.0);
        assert!(theta < 2e-6, "north pole limit, got theta = {theta}");
    }

    #[test]
    fn sphere_samples_are_uniform_in_cos_theta() {
        let pts = sample_sphere_product(&sphere_spec(10_000, 1, 42), "train", None).unwrap();
        let mean: f64 = pts.iter().map(|p| p[0].cos()).sum::<f64>() / pts.len() as f64;
        assert!(mean.abs() <= 0.04, "mean cos theta = {mean}");
    }

    #[test]
    fn sphere_samples_respect_chart_margins() {
        let chart = Chart::sphere_product(2);
        let pts = sample_sphere_product(&sphere_spec(2_000, 2, 3), "train", None).unwrap();
        for p in &pts {
            chart.validate(p).unwrap();
        }
    }

    #[test]
    fn vortex_acceptance_predicate_is_honored() {
        let sys = systems::two_vortex(1.0, 1.0).unwrap();
        let pred = sys.sample_predicate().unwrap();
        let pts =
            sample_sphere_product(&sphere_spec(500, 2, 11), "train", Some(&|z: &PhasePoint| pred(z)))
                .unwrap();
        let chart = sys.chart().unwrap();
        for p in &pts {
            let x = chart.embed(p.coords());
            let u = x.rows(0, 3).dot(&x.rows(3, 3));
            assert!(1.0 - u >= crate::tol::VORTEX_SAMPLE_GUARD);
        }
    }

    #[test]
    fn impossible_predicate_exhausts_redraws() {
        let res = sample_sphere_product(&sphere_spec(1, 1, 0), "train", Some(&|_: &PhasePoint| false));
        assert!(res.is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let fields = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])];
        let out = add_tangent_noise(&fields, 0.0, 5, "noise").unwrap();
        assert_eq!(out, fields);
    }

    #[test]
    fn negative_noise_is_rejected() {
        assert!(add_tangent_noise(&[], -0.1, 0, "noise").is_err());
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let n = 10_000;
        let fields = vec![DVector::zeros(3); n];
        let noisy = add_tangent_noise(&fields, 1.0, 42, "noise").unwrap();
        for coord in 0..3 {
            let mean: f64 = noisy.iter().map(|f| f[coord]).sum::<f64>() / n as f64;
            let var: f64 =
                noisy.iter().map(|f| (f[coord] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((0.94..=1.06).contains(&var), "coordinate {coord} variance {var}");
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed_and_tag() {
        let fields = vec![DVector::from_vec(vec![0.5, -0.5]); 4];
        let a = add_tangent_noise(&fields, 0.3, 8, "noise").unwrap();
        let b = add_tangent_noise(&fields, 0.3, 8, "noise").unwrap();
        let c = add_tangent_noise(&fields, 0.3, 8, "noise2").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
