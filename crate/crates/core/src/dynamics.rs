//! Flow integration and flow-level diagnostics.
//!
//! Trajectories are produced by classical fixed-step RK4. When a field
//! evaluation fails mid-trajectory (chart exit, singularity guard) the
//! integration truncates at the last valid state and records the reason;
//! it never extrapolates silently.
//!
//! `flow_distance` compares two trajectories over their shared time grid
//! and returns the maximum pointwise distance, Euclidean or product
//! geodesic depending on the underlying space. `conservation_drift`
//! reports the worst deviation of a scalar function from its initial
//! value along a trajectory, the diagnostic used for energy and Casimir
//! conservation.

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{sphere_geodesic, PhasePoint};

/// Time-ordered states produced by one field.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    /// Which field produced the trajectory (free-form label).
    pub field_tag: String,
    pub truncated: bool,
    pub truncation_reason: Option<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// CSV rendering: provenance comments, a header `time,z0,...`, one
    /// row per state. Floats use shortest round-trip formatting, so the
    /// output is byte-deterministic.
    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let dim = self.states.first().map_or(0, |z| z.dim());
        let mut out = String::new();
        out.push_str(&format!("# config_hash={config_hash}, seed={seed}\n"));
        out.push_str(&format!("# field={}\n", self.field_tag));
        if self.truncated {
            let reason = self.truncation_reason.as_deref().unwrap_or("unknown");
            out.push_str(&format!("# truncated={reason}\n"));
        }
        out.push_str("time");
        for k in 0..dim {
            out.push_str(&format!(",z{k}"));
        }
        out.push('\n');
        for (t, z) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{t}"));
            for v in z.coords().iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Classical RK4 with fixed step `dt` up to horizon `t_final` (the step
/// count is `round(t_final / dt)`). Field failures truncate the
/// trajectory and set the flag.
pub fn integrate<F>(
    field: F,
    z0: &PhasePoint,
    dt: f64,
    t_final: f64,
    tag: &str,
) -> Result<Trajectory>
where
    F: Fn(&PhasePoint) -> Result<DVector<f64>>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!("step must positive, got {dt}")));
    }
    if !(t_final.is_finite() && t_final >= dt) {
        return Err(Error::InvalidParameter(format!(
            "horizon must be at least one step, got {t_final}"
        )));
    }
    let steps = (t_final / dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(z0.clone());

    let mut truncated = false;
    let mut truncation_reason = None;
    let mut z = z0.clone();
    'outer: for step in 0..steps {
        let stage = |p: &DVector<f64>| -> Result<DVector<f64>> {
            field(&PhasePoint::new(p.clone())?)
        };
        let half = dt / 2.0;
        let result = (|| -> Result<PhasePoint> {
            let c = z.coords();
            let k1 = stage(c)?;
            let k2 = stage(&(c + &k1 * half))?;
            let k3 = stage(&(c + &k2 * half))?;
            let k4 = stage(&(c + &k3 * dt))?;
            PhasePoint::new(c + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
        })();
        match result {
            Ok(next) => {
                z = next;
                times.push((step + 1) as f64 * dt);
                states.push(z.clone());
            }
            Err(e) => {
                truncated = true;
                truncation_reason = Some(e.to_string());
                break 'outer;
            }
        }
    }

    Ok(Trajectory {
        times,
        states,
        field_tag: tag.to_string(),
        truncated,
        truncation_reason,
    })
}

/// Pointwise distance used by `flow_distance`.
#[derive(Clone, Copy, Debug)]
pub enum DistanceMetric {
    Euclidean,
    /// Product of unit spheres in chart coordinates; the distance is the
    /// root sum of squares of per-factor great-circle distances.
    SphereProduct { factors: usize },
}

fn embed_factor(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

fn state_distance(a: &PhasePoint, b: &PhasePoint, metric: &DistanceMetric) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    match metric {
        DistanceMetric::Euclidean => Ok((a.coords() - b.coords()).norm()),
        DistanceMetric::SphereProduct { factors } => {
            if a.dim() != 2 * factors {
                return Err(Error::DimensionMismatch {
                    expected: 2 * factors,
                    got: a.dim(),
                });
            }
            let mut sum = 0.0;
            for k in 0..*factors {
                let pa = embed_factor(a[2 * k], a[2 * k + 1]);
                let pb = embed_factor(b[2 * k], b[2 * k + 1]);
                let d = sphere_geodesic(&pa, &pb);
                sum += d * d;
            }
            Ok(sum.sqrt())
        }
    }
}

/// Maximum pointwise distance over the shared prefix of two time grids.
/// The grids must agree where they overlap; differing step sizes are
/// rejected.
pub fn flow_distance(a: &Trajectory, b: &Trajectory, metric: &DistanceMetric) -> Result<f64> {
    let shared = a.len().min(b.len());
    if shared == 0 {
        return Err(Error::Empty("trajectory".into()));
    }
    for k in 0..shared {
        if (a.times[k] - b.times[k]).abs() > 1e-12 {
            return Err(Error::GridMismatch(format!(
                "time grids diverge at index {k}: {} vs {}",
                a.times[k], b.times[k]
            )));
        }
    }
    let mut worst = 0.0f64;
    for k in 0..shared {
        worst = worst.max(state_distance(&a.states[k], &b.states[k], metric)?);
    }
    Ok(worst)
}

/// Worst absolute deviation of `f` from its initial value along the
/// trajectory.
pub fn conservation_drift<F>(traj: &Trajectory, f: F) -> Result<f64>
where
    F: Fn(&PhasePoint) -> Result<f64>,
{
    let first = match traj.states.first() {
        Some(z) => f(z)?,
        None => return Err(Error::Empty("trajectory".into())),
    };
    let mut worst = 0.0f64;
    for z in &traj.states[1..] {
        worst = worst.max((f(z)? - first).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit, TrainingSet};
    use crate::kernels::Gaussian;
    use crate::systems;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn point(coords: &[f64]) -> PhasePoint {
        PhasePoint::from_slice(coords).unwrap()
    }

    #[test]
    fn zero_field_gives_constant_trajectory() {
        let z0 = point(&[0.3, -0.7, 1.1]);
        let traj = integrate(
            |z: &PhasePoint| Ok(DVector::zeros(z.dim())),
            &z0,
            0.1,
            1.0,
            "zero",
        )
        .unwrap();
        assert_eq!(traj.len(), 11);
        assert!(!traj.truncated);
        for z in &traj.states {
            assert_eq!(z, &z0);
        }
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn isotropic_rigid_body_does_not_move() {
        let sys = systems::rigid_body([1.0, 1.0, 1.0]).unwrap();
        let z0 = point(&[0.4, 0.2, -0.9]);
        let traj = integrate(|z| sys.vector_field(z), &z0, 1e-2, 0.5, "true").unwrap();
        for z in &traj.states {
            assert!((z.coords() - z0.coords()).amax() < 1e-14);
        }
    }

    #[test]
    fn rigid_body_conserves_energy_and_casimir() {
        let sys = systems::rigid_body([1.0, 10.0, 0.1]).unwrap();
        let z0 = point(&[1.0, 1.0, 1.0]);
        let traj = integrate(|z| sys.vector_field(z), &z0, 1e-3, 1.0, "true").unwrap();
        assert_eq!(traj.len(), 1001);
        assert!(!traj.truncated);

        let casimir = &sys.casimirs()[0];
        let c_drift = conservation_drift(&traj, |z| Ok(casimir.value(z))).unwrap();
        let c0 = casimir.value(&z0);
        assert!(c_drift <= 1e-7 * c0, "Casimir drift {c_drift:e}");

        let h_drift = conservation_drift(&traj, |z| sys.hamiltonian(z)).unwrap();
        let h0 = sys.hamiltonian(&z0).unwrap();
        assert!(h_drift <= 1e-7 * h0.abs(), "energy drift {h_drift:e}");
    }

    #[test]
    fn halving_the_step_cuts_energy_drift_fourth_order() {
        let sys = systems::rigid_body([1.0, 10.0, 0.1]).unwrap();
        let z0 = point(&[1.0, 1.0, 1.0]);
        let drift_at = |dt: f64| {
            let traj = integrate(|z| sys.vector_field(z), &z0, dt, 1.0, "true").unwrap();
            conservation_drift(&traj, |z| sys.hamiltonian(z)).unwrap()
        };
        let coarse = drift_at(0.02);
        let fine = drift_at(0.01);
        assert!(
            coarse >= 8.0 * fine,
            "drift ratio {} below fourth-order expectation",
            coarse / fine
        );
    }

    #[test]
    fn failing_field_truncates_with_reason() {
        let z0 = point(&[1.0, 0.0]);
        let traj = integrate(
            |z: &PhasePoint| {
                if z[0] < 0.5 {
                    Err(Error::ChartDomain("left the test region".into()))
                } else {
                    Ok(DVector::from_vec(vec![-1.0, 0.0]))
                }
            },
            &z0,
            0.1,
            2.0,
            "runaway",
        )
        .unwrap();
        assert!(traj.truncated);
        assert!(traj.truncation_reason.as_ref().unwrap().contains("test region"));
        assert!(traj.len() < 21);
        assert!(traj.len() > 1);
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn flow_distance_of_identical_trajectories_is_zero() {
        let sys = systems::rigid_body([1.0, 10.0, 0.1]).unwrap();
        let z0 = point(&[1.0, 0.5, -0.5]);
        let a = integrate(|z| sys.vector_field(z), &z0, 1e-2, 1.0, "true").unwrap();
        let b = a.clone();
        assert_eq!(flow_distance(&a, &b, &DistanceMetric::Euclidean).unwrap(), 0.0);
    }

    fn constant_trajectory(z: PhasePoint, steps: usize, dt: f64) -> Trajectory {
        Trajectory {
            times: (0..=steps).map(|k| k as f64 * dt).collect(),
            states: vec![z; steps + 1],
            field_tag: "const".into(),
            truncated: false,
            truncation_reason: None,
        }
    }

    #[test]
    fn euclidean_distance_of_shifted_constants() {
        let eps = 1e-3;
        let a = constant_trajectory(point(&[1.0, 2.0, 3.0]), 5, 0.1);
        let b = constant_trajectory(point(&[1.0 + eps, 2.0, 3.0]), 5, 0.1);
        let d = flow_distance(&a, &b, &DistanceMetric::Euclidean).unwrap();
        assert!((d - eps).abs() < 1e-15);
    }

    #[test]
    fn sphere_distance_of_antipodal_factor_is_pi() {
        let a = constant_trajectory(point(&[PI / 2.0, 0.5, PI / 2.0, 0.5]), 3, 0.1);
        let b = constant_trajectory(point(&[PI / 2.0, 0.5 + PI, PI / 2.0, 0.5]), 3, 0.1);
        let d = flow_distance(&a, &b, &DistanceMetric::SphereProduct { factors: 2 }).unwrap();
        assert!((d - PI).abs() < 1e-12);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = constant_trajectory(point(&[0.0, 0.0, 0.0]), 5, 0.1);
        let b = constant_trajectory(point(&[0.0, 0.0, 0.0]), 5, 0.2);
        assert!(matches!(
            flow_distance(&a, &b, &DistanceMetric::Euclidean),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn truncated_trajectories_compare_over_shared_prefix() {
        let a = constant_trajectory(point(&[0.0, 0.0, 0.0]), 10, 0.1);
        let b = constant_trajectory(point(&[0.0, 0.0, 0.0]), 4, 0.1);
        assert_eq!(flow_distance(&a, &b, &DistanceMetric::Euclidean).unwrap(), 0.0);
    }

    #[test]
    fn drift_of_constant_trajectory_is_zero() {
        let traj = constant_trajectory(point(&[1.0, 2.0, 3.0]), 5, 0.1);
        let d = conservation_drift(&traj, |z| Ok(z.coords().norm_squared())).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn learned_field_conserves_the_casimir_structurally() {
        // The learned field is B(z) grad h(z) by construction, so it
        // annihilates Casimirs exactly; any drift is integrator error.
        let sys = systems::rigid_body([1.0, 10.0, 0.1]).unwrap();
        let ts = TrainingSet::from_system(&sys, 20, None, 0.0, 33, "train").unwrap();
        let est = fit(
            &ts,
            Arc::new(Gaussian::new(3, 2.5).unwrap()),
            sys.structure(),
            1e-5,
        )
        .unwrap();
        let casimir = &sys.casimirs()[0];
        for (i, z0) in ts.points().iter().take(3).enumerate() {
            let traj = integrate(|z| est.evaluate_field(z), z0, 1e-3, 1.0, "learned").unwrap();
            let drift = conservation_drift(&traj, |z| Ok(casimir.value(z))).unwrap();
            assert!(drift <= 1e-6, "start {i}: Casimir drift {drift:e}");
        }
    }

    #[test]
    fn csv_export_is_deterministic_and_annotated() {
        let traj = constant_trajectory(point(&[0.25, -1.5]), 2, 0.5);
        let a = traj.to_csv("deadbeef", 42);
        let b = traj.to_csv("deadbeef", 42);
        assert_eq!(a, b);
        assert!(a.starts_with("# config_hash=deadbeef, seed=42\n"));
        assert!(a.contains("time,z0,z1\n"));
        assert!(a.contains("0.5,0.25,-1.5"));
    }
}
