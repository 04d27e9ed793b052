//! Central finite-difference oracles.
//!
//! Every analytic derivative in this crate (kernel gradients, mixed kernel
//! Hessians, Hamiltonian gradients, chart Jacobians) is gated by agreement
//! with these estimators, which touch only function evaluations and are
//! therefore independent of the formulas they check.
//!
//! Steps are scaled per coordinate by `(1 + |x_i|)` so that the same
//! nominal step works across coordinate magnitudes.

use nalgebra::{DMatrix, DVector};

fn scaled(step: f64, xi: f64) -> f64 {
    step * (1.0 + xi.abs())
}

/// Central-difference gradient of a scalar function.
pub fn gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, step: f64) -> DVector<f64> {
    let d = x.len();
    DVector::from_fn(d, |i, _| {
        let h = scaled(step, x[i]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Central-difference Jacobian of a vector function, laid out with one row
/// per output component and one column per input coordinate.
pub fn jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let d = x.len();
    let m = f(x).len();
    let mut out = DMatrix::zeros(m, d);
    for i in 0..d {
        let h = scaled(step, x[i]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        out.set_column(i, &col);
    }
    out
}

/// Central-difference directional derivative of a scalar function along `v`.
pub fn directional<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    v: &DVector<f64>,
    step: f64,
) -> f64 {
    let h = step * (1.0 + x.amax());
    let xp = x + v * h;
    let xm = x - v * h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Four-point second difference of a two-argument scalar function,
/// estimating the mixed block `M[a, b] = d^2 f / (dx_a dy_b)`.
pub fn mixed_second<F: Fn(&DVector<f64>, &DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    y: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let (dx, dy) = (x.len(), y.len());
    let mut out = DMatrix::zeros(dx, dy);
    for a in 0..dx {
        let ha = scaled(step, x[a]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[a] += ha;
        xm[a] -= ha;
        for b in 0..dy {
            let hb = scaled(step, y[b]);
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[b] += hb;
            ym[b] -= hb;
            out[(a, b)] =
                (f(&xp, &yp) - f(&xp, &ym) - f(&xm, &yp) + f(&xm, &ym)) / (4.0 * ha * hb);
        }
    }
    out
}

/// Agreement gate shared by the derivative checks: `max|a - b|` must not
/// exceed `tol * (1 + max|b|)`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
