//! Monotone cubic interpolation primitives shared by the grid solver and
//! the PDE reference.

/// Nodal slopes for a cubic Hermite interpolant on a uniform grid: central
/// differences limited to the Fritsch-Carlson monotonicity region (zero at
/// sign changes, magnitude at most three times either adjacent secant).
/// Exact on quadratic data away from extrema.
pub(crate) fn pchip_slopes(u: &[f64], dx: f64) -> Vec<f64> {
    let n = u.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    let s = |i: usize| (u[i + 1] - u[i]) / dx;
    if n == 2 {
        d[0] = s(0);
        d[1] = s(0);
        return d;
    }
    for i in 1..n - 1 {
        let (a, b) = (s(i - 1), s(i));
        d[i] = if a * b <= 0.0 {
            0.0
        } else {
            let central = 0.5 * (a + b);
            central.abs().min(3.0 * a.abs().min(b.abs())) * central.signum()
        };
    }
    let edge = |s0: f64, s1: f64| {
        let mut e = 1.5 * s0 - 0.5 * s1;
        if e * s0 <= 0.0 {
            e = 0.0;
        } else if s0 * s1 <= 0.0 && e.abs() > 3.0 * s0.abs() {
            e = 3.0 * s0;
        }
        e
    };
    d[0] = edge(s(0), s(1));
    d[n - 1] = edge(s(n - 2), s(n - 3));
    d
}

/// Cubic Hermite value on one cell; `t` in [0, 1], slopes pre-scaled by the
/// cell width.
#[inline]
pub(crate) fn hermite(u0: f64, u1: f64, d0: f64, d1: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * u0
        + (t3 - 2.0 * t2 + t) * d0
        + (-2.0 * t3 + 3.0 * t2) * u1
        + (t3 - t2) * d1
}

/// Interpolate tabulated values on the uniform grid `[x_min, x_min + (n-1)
/// dx]` with the given nodal slopes, extrapolating linearly outside.
pub(crate) fn eval_uniform(
    u: &[f64],
    d: &[f64],
    x_min: f64,
    dx: f64,
    x: f64,
) -> (f64, bool) {
    let n = u.len();
    let x_max = x_min + (n - 1) as f64 * dx;
    if x < x_min {
        return (u[0] + d[0] * (x - x_min), true);
    }
    if x > x_max {
        return (u[n - 1] + d[n - 1] * (x - x_max), true);
    }
    let pos = (x - x_min) / dx;
    let cell = (pos.floor() as usize).min(n - 2);
    let t = (x - (x_min + cell as f64 * dx)) / dx;
    (hermite(u[cell], u[cell + 1], d[cell] * dx, d[cell + 1] * dx, t), false)
}
