//! The scaled Rademacher walk and its discretized Malliavin calculus.
//!
//! With `h = T/n`, the walk is `B^n_t = sqrt(h) sum_{i <= floor(t/h)} eps_i`
//! and the forward state follows
//!
//! ```text
//! X^n_{t_j} = X^n_{t_{j-1}} + h b(t_j, X^n_{t_{j-1}})
//!                           + sqrt(h) sigma(t_j, X^n_{t_{j-1}}) eps_j.
//! ```
//!
//! On functionals `F(eps_1, ..., eps_n)` the sign-flip operators `T_{m,+/-}`
//! freeze the m-th coordinate, and the discretized Malliavin derivative is
//! `D^n_m F = (T_{m,+} F - T_{m,-} F) / (2 sqrt(h))`. The module also carries
//! the two first-variation recursions (the variational walk started at one,
//! and the Malliavin walk started at `sigma`), whose coefficients use the
//! theta-averaged derivatives that turn the chain rule into an identity, and
//! the discrete Malliavin weight built from them.

use crate::problems::ProblemSpec;
use crate::rng::{self, Domain};
use crate::{Error, Result};
use std::sync::Arc;

/// Uniform time grid with `n` steps on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkGrid {
    n: usize,
    horizon: f64,
    h: f64,
    sqrt_h: f64,
}

impl WalkGrid {
    pub fn new(n: usize, horizon: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        let h = horizon / n as f64;
        Ok(Self { n, horizon, h, sqrt_h: h.sqrt() })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }
    #[inline]
    pub fn sqrt_h(&self) -> f64 {
        self.sqrt_h
    }

    /// `t_k = (k/n) T`; exact at `k = n`.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        (k as f64 / self.n as f64) * self.horizon
    }
}

/// One forward step `t_m -> t_{m+1}` of the walk recursion. The coefficient
/// time argument is `t_{m+1}`; `sign` selects the branch. Every forward
/// evaluation in the crate funnels through this function so that replayed
/// paths and tree nodes agree bit for bit.
#[inline]
pub fn step(p: &ProblemSpec, grid: &WalkGrid, m: usize, x: f64, sign: i8) -> f64 {
    let t_next = grid.time(m + 1);
    let move_up = grid.sqrt_h * p.sigma(t_next, x);
    if sign > 0 {
        x + grid.h * p.b(t_next, x) + move_up
    } else {
        x + grid.h * p.b(t_next, x) - move_up
    }
}

/// Rademacher signs `eps_1..eps_n` for one sample, keyed by
/// `(seed, sample, step)` so draws are order-independent.
pub fn rademacher_path(grid: &WalkGrid, seed: u64, sample: u64) -> Vec<i8> {
    (0..grid.n).map(|i| rng::sign(seed, Domain::WalkSign, sample, i as u64)).collect()
}

/// Walk values `B^n_{t_0..t_n}` induced by a sign vector.
pub fn bn_path(grid: &WalkGrid, eps: &[i8]) -> Vec<f64> {
    assert_eq!(eps.len(), grid.n);
    let mut b = Vec::with_capacity(grid.n + 1);
    let mut acc = 0.0;
    b.push(0.0);
    for &e in eps {
        acc += grid.sqrt_h * e as f64;
        b.push(acc);
    }
    b
}

/// A realized walk path: signs plus the induced forward states from a start
/// `(k0, x)`. States are stored for indices `k0..=n`.
#[derive(Debug, Clone)]
pub struct WalkPath {
    pub grid: WalkGrid,
    /// `eps[j-1]` is `eps_j`; entries below the start index are unused.
    pub eps: Vec<i8>,
    start_index: usize,
    values: Vec<f64>,
}

impl WalkPath {
    #[inline]
    pub fn start_index(&self) -> usize {
        self.start_index
    }

    /// State `X^n_{t_j}` for `k0 <= j <= n`.
    #[inline]
    pub fn x_at(&self, j: usize) -> f64 {
        self.values[j - self.start_index]
    }

    /// Sign `eps_j`, `1 <= j <= n`.
    #[inline]
    pub fn eps_at(&self, j: usize) -> i8 {
        self.eps[j - 1]
    }

    /// Debug export, one row `k, eps_k, x_k` per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,eps,x\n");
        for j in self.start_index..=self.grid.n() {
            let e = if j == self.start_index { 0 } else { self.eps_at(j) as i64 };
            out.push_str(&format!("{j},{e},{}\n", self.x_at(j)));
        }
        out
    }
}

/// Run the forward recursion from `(k0, x)` along the given signs.
pub fn forward_walk(
    p: &ProblemSpec,
    grid: &WalkGrid,
    eps: &[i8],
    start: (usize, f64),
) -> Result<WalkPath> {
    let (k0, x0) = start;
    if eps.len() != grid.n {
        return Err(Error::Config(format!(
            "sign vector has {} entries, grid needs {}",
            eps.len(),
            grid.n
        )));
    }
    if k0 > grid.n {
        return Err(Error::Domain(format!("start index {k0} beyond grid size {}", grid.n)));
    }
    let mut values = Vec::with_capacity(grid.n - k0 + 1);
    values.push(x0);
    let mut x = x0;
    for j in k0 + 1..=grid.n {
        x = step(p, grid, j - 1, x, eps[j - 1]);
        if !x.is_finite() {
            return Err(Error::Numeric(format!("forward walk produced {x} at step {j}")));
        }
        values.push(x);
    }
    Ok(WalkPath { grid: *grid, eps: eps.to_vec(), start_index: k0, values })
}

/// A function of the full sign vector, with the set of coordinates it may
/// depend on tracked as a bitmask (coordinate `m` is bit `m-1`).
#[derive(Clone)]
pub struct PathFunctional {
    n: usize,
    support: u64,
    eval: Arc<dyn Fn(&[i8]) -> f64 + Send + Sync>,
}

impl PathFunctional {
    /// Wrap a closure depending on all coordinates.
    pub fn new<F>(n: usize, eval: F) -> Self
    where
        F: Fn(&[i8]) -> f64 + Send + Sync + 'static,
    {
        assert!(n <= 64, "sign-vector functionals support n <= 64");
        let support = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        Self { n, support, eval: Arc::new(eval) }
    }

    /// Wrap a closure with an explicit dependence set (1-based coordinates).
    pub fn with_support<F>(n: usize, coords: impl IntoIterator<Item = usize>, eval: F) -> Self
    where
        F: Fn(&[i8]) -> f64 + Send + Sync + 'static,
    {
        let mut support = 0u64;
        for m in coords {
            assert!((1..=n).contains(&m));
            support |= 1 << (m - 1);
        }
        Self { n, support, eval: Arc::new(eval) }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depends_on(&self, m: usize) -> bool {
        m >= 1 && m <= self.n && self.support & (1 << (m - 1)) != 0
    }

    pub fn eval(&self, eps: &[i8]) -> f64 {
        assert_eq!(eps.len(), self.n);
        (self.eval)(eps)
    }

    /// `a F + b G` as a functional.
    pub fn linear_combination(a: f64, fa: &PathFunctional, b: f64, fb: &PathFunctional) -> Self {
        assert_eq!(fa.n, fb.n);
        let (fa2, fb2) = (fa.clone(), fb.clone());
        Self {
            n: fa.n,
            support: fa.support | fb.support,
            eval: Arc::new(move |eps| a * fa2.eval(eps) + b * fb2.eval(eps)),
        }
    }
}

fn check_coord(f: &PathFunctional, m: usize) -> Result<()> {
    if m < 1 || m > f.n {
        return Err(Error::Domain(format!("coordinate {m} outside 1..={}", f.n)));
    }
    Ok(())
}

/// `T_{m,sign} F`: coordinate `m` frozen to `sign`.
pub fn shift(f: &PathFunctional, m: usize, sign: i8) -> Result<PathFunctional> {
    check_coord(f, m)?;
    debug_assert!(sign == 1 || sign == -1);
    let inner = f.clone();
    Ok(PathFunctional {
        n: f.n,
        support: f.support & !(1 << (m - 1)),
        eval: Arc::new(move |eps| {
            let mut buf = eps.to_vec();
            buf[m - 1] = sign;
            inner.eval(&buf)
        }),
    })
}

/// `D^n_m F = (T_{m,+} F - T_{m,-} F) / (2 sqrt(h))`.
pub fn discrete_malliavin(f: &PathFunctional, m: usize, grid: &WalkGrid) -> Result<PathFunctional> {
    check_coord(f, m)?;
    let plus = shift(f, m, 1)?;
    let minus = shift(f, m, -1)?;
    let scale = 1.0 / (2.0 * grid.sqrt_h);
    Ok(PathFunctional {
        n: f.n,
        support: f.support & !(1 << (m - 1)),
        eval: Arc::new(move |eps| (plus.eval(eps) - minus.eval(eps)) * scale),
    })
}

/// The state at `t_m` as a functional of the signs, for a walk started at
/// `(0, x0)`. Convenience for oracle tests.
pub fn state_functional(p: &ProblemSpec, grid: &WalkGrid, x0: f64, m: usize) -> PathFunctional {
    let p = p.clone();
    let grid = *grid;
    PathFunctional::with_support(grid.n(), 1..=m, move |eps| {
        let mut x = x0;
        for j in 1..=m {
            x = step(&p, &grid, j - 1, x, eps[j - 1]);
        }
        x
    })
}

/// Visit all `2^n` sign vectors; bit `j` of the counter set means
/// `eps_{j+1} = +1`.
pub fn for_each_sign_vector(n: usize, mut visit: impl FnMut(&[i8])) {
    assert!(n < 31, "exhaustive enumeration is meant for small n");
    let mut eps = vec![0i8; n];
    for code in 0u32..(1u32 << n) {
        for (j, e) in eps.iter_mut().enumerate() {
            *e = if code >> j & 1 == 1 { 1 } else { -1 };
        }
        visit(&eps);
    }
}

/// The variational walk `grad X^{n,t_k,x}` along given signs: starts at one
/// and multiplies up the linearized one-step factors. Returned vector covers
/// indices `k..=n` (entry 0 is the start).
pub fn variational_walk(
    p: &ProblemSpec,
    grid: &WalkGrid,
    eps: &[i8],
    k: usize,
    x: f64,
) -> Result<Vec<f64>> {
    if k > grid.n() {
        return Err(Error::Domain(format!("start index {k} beyond grid size {}", grid.n())));
    }
    let mut out = Vec::with_capacity(grid.n() - k + 1);
    let mut grad = 1.0;
    out.push(grad);
    let mut xc = x;
    for m in k + 1..=grid.n() {
        let t = grid.time(m);
        grad *= 1.0 + grid.h() * p.b_x(t, xc)? + grid.sqrt_h() * p.sigma_x(t, xc)? * eps[m - 1] as f64;
        out.push(grad);
        xc = step(p, grid, m - 1, xc, eps[m - 1]);
    }
    Ok(out)
}

// 8-point Gauss-Legendre on [0, 1].
const GL8_NODES: [f64; 8] = [
    0.019855071751231884,
    0.10166676129318664,
    0.2372337950418355,
    0.40828267875217505,
    0.591717321248225,
    0.7627662049581645,
    0.8983332387068134,
    0.9801449282487681,
];
const GL8_WEIGHTS: [f64; 8] = [
    0.05061426814518813,
    0.11119051722668723,
    0.15685332293894372,
    0.18134189168918097,
    0.18134189168918097,
    0.15685332293894372,
    0.11119051722668723,
    0.05061426814518813,
];

fn theta_average(cb: &crate::problems::Coeff, t: f64, a: f64, b: f64) -> f64 {
    let mut acc = 0.0;
    for (node, w) in GL8_NODES.iter().zip(GL8_WEIGHTS.iter()) {
        acc += w * cb(t, node * a + (1.0 - node) * b);
    }
    acc
}

/// The Malliavin walk `D^n_k X^n_{t_m}` for `m = k-1..=n` along a realized
/// path (entry 0, at `t_{k-1}`, is zero; entry 1 is
/// `sigma(t_k, X^n_{t_{k-1}})`). Recursion coefficients are the
/// theta-averaged derivatives between the two coordinate-frozen paths,
/// evaluated by fixed Gauss-Legendre quadrature, which makes the result agree
/// with [`discrete_malliavin`] applied to the state functional up to
/// quadrature error.
pub fn malliavin_walk(p: &ProblemSpec, path: &WalkPath, k: usize) -> Result<Vec<f64>> {
    let grid = &path.grid;
    let n = grid.n();
    if k < 1 || k > n {
        return Err(Error::Domain(format!("coordinate {k} outside 1..={n}")));
    }
    if path.start_index() >= k {
        return Err(Error::Domain(format!(
            "path starts at index {} but D^n_{k} needs the state at t_{}",
            path.start_index(),
            k - 1
        )));
    }
    let bx = p.drift_dx.clone().ok_or_else(|| Error::Capability(format!("{}: b_x", p.name)))?;
    let sx = p.diffusion_dx.clone().ok_or_else(|| Error::Capability(format!("{}: sigma_x", p.name)))?;

    // Coordinate-frozen states T_{k,+}X and T_{k,-}X from t_k onward.
    let base = path.x_at(k - 1);
    let mut xp = step(p, grid, k - 1, base, 1);
    let mut xm = step(p, grid, k - 1, base, -1);

    let mut out = Vec::with_capacity(n - k + 2);
    out.push(0.0);
    let mut d = p.sigma(grid.time(k), base);
    out.push(d);
    for m in k + 1..=n {
        let t = grid.time(m);
        let bx_avg = theta_average(&bx, t, xp, xm);
        let sx_avg = theta_average(&sx, t, xp, xm);
        d *= 1.0 + grid.h() * bx_avg + grid.sqrt_h() * sx_avg * path.eps_at(m) as f64;
        out.push(d);
        xp = step(p, grid, m - 1, xp, path.eps_at(m));
        xm = step(p, grid, m - 1, xm, path.eps_at(m));
    }
    Ok(out)
}

/// The discrete Malliavin weight
/// `N^{n,t_k}_{t_l} = sqrt(h)/(t_l - t_k) sum_{m=k+1}^{l}
///  grad X^{n,t_k,X_k}_{t_{m-1}} / sigma(t_m, X^n_{t_{m-1}}) eps_m`.
pub fn discrete_weight(p: &ProblemSpec, path: &WalkPath, k: usize, l: usize) -> Result<f64> {
    let grid = &path.grid;
    if k >= l || l > grid.n() {
        return Err(Error::Domain(format!(
            "weight needs start < end <= n, got ({k}, {l}) with n = {}",
            grid.n()
        )));
    }
    if path.start_index() > k {
        return Err(Error::Domain(format!(
            "path starts at index {} but the weight is anchored at t_{k}",
            path.start_index()
        )));
    }
    let grad = variational_walk(p, grid, &path.eps, k, path.x_at(k))?;
    let mut acc = 0.0;
    for m in k + 1..=l {
        let t = grid.time(m);
        let x_prev = path.x_at(m - 1);
        let s = p.sigma(t, x_prev);
        if s < p.delta {
            return Err(Error::Ellipticity { t, x: x_prev, sigma: s, delta: p.delta });
        }
        acc += grad[m - 1 - k] / s * path.eps_at(m) as f64;
    }
    Ok(grid.sqrt_h() * acc / (grid.time(l) - grid.time(k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::builtin_problem;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn problem(name: &str) -> ProblemSpec {
        builtin_problem(name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn grid_times_hit_endpoints() {
        let g = WalkGrid::new(7, 2.5).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(7), 2.5);
        assert_relative_eq!(g.h(), 2.5 / 7.0);
    }

    #[test]
    fn all_up_walk_values() {
        let g = WalkGrid::new(4, 1.0).unwrap();
        let b = bn_path(&g, &[1, 1, 1, 1]);
        assert_eq!(b, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn antithetic_signs_negate_walk() {
        let g = WalkGrid::new(16, 1.0).unwrap();
        let eps = rademacher_path(&g, 99, 3);
        let neg: Vec<i8> = eps.iter().map(|e| -e).collect();
        let b = bn_path(&g, &eps);
        let bneg = bn_path(&g, &neg);
        for (a, c) in b.iter().zip(bneg.iter()) {
            assert_eq!(*a, -*c);
        }
    }

    #[test]
    fn exhaustive_second_moment_is_horizon() {
        // E (B^n_T)^2 = h E (sum eps)^2 = h n = T; the enumeration sum is
        // integer so the only float step is the final scaling.
        for n in [1, 4, 8, 12] {
            let g = WalkGrid::new(n, 1.0).unwrap();
            let mut sum_sq: i64 = 0;
            let mut sum: i64 = 0;
            for_each_sign_vector(n, |eps| {
                let s: i64 = eps.iter().map(|&e| e as i64).sum();
                sum_sq += s * s;
                sum += s;
            });
            assert_eq!(sum, 0);
            let mean_sq = g.h() * sum_sq as f64 / (1u64 << n) as f64;
            assert!((mean_sq - 1.0).abs() < 1e-12, "n = {n}: {mean_sq}");
        }
    }

    #[test]
    fn forward_walk_reduces_to_bn() {
        let p = problem("brownian-identity");
        let g = WalkGrid::new(8, 1.0).unwrap();
        let eps = rademacher_path(&g, 5, 0);
        let w = forward_walk(&p, &g, &eps, (0, 0.0)).unwrap();
        let b = bn_path(&g, &eps);
        for j in 0..=8 {
            assert_eq!(w.x_at(j), b[j]);
        }
    }

    #[test]
    fn forward_walk_pure_drift() {
        let mut p = problem("brownian-identity");
        p.drift = Arc::new(|_, _| 1.0);
        p.diffusion = Arc::new(|_, _| 0.0);
        p.delta = 0.0;
        let g = WalkGrid::new(4, 1.0).unwrap();
        let w = forward_walk(&p, &g, &[1, -1, 1, -1], (0, 0.0)).unwrap();
        for j in 0..=4 {
            assert_relative_eq!(w.x_at(j), 0.25 * j as f64, max_relative = 1e-15);
        }
    }

    #[test]
    fn forward_walk_sine_coeffs_hand_evaluated() {
        let p = problem("sine-coeffs");
        let g = WalkGrid::new(2, 1.0).unwrap();
        let w = forward_walk(&p, &g, &[1, -1], (0, 0.0)).unwrap();
        let h = 0.5f64;
        let sq = h.sqrt();
        let x1 = 0.0 + h * p.b(0.5, 0.0) + sq * p.sigma(0.5, 0.0);
        let x2 = x1 + h * p.b(1.0, x1) - sq * p.sigma(1.0, x1);
        assert_eq!(w.x_at(1), x1);
        assert_eq!(w.x_at(2), x2);
    }

    #[test]
    fn shift_freezes_coordinate() {
        let g = WalkGrid::new(4, 1.0).unwrap();
        let f = PathFunctional::with_support(4, [2], |eps| eps[1] as f64);
        let plus = shift(&f, 2, 1).unwrap();
        let minus = shift(&f, 2, -1).unwrap();
        for_each_sign_vector(4, |eps| {
            assert_eq!(plus.eval(eps), 1.0);
            assert_eq!(minus.eval(eps), -1.0);
        });
        assert!(!plus.depends_on(2));
        let _ = g;
    }

    #[test]
    fn shift_of_independent_functional_is_identity() {
        let f = PathFunctional::with_support(4, [1, 3], |eps| (eps[0] + eps[2]) as f64);
        let shifted = shift(&f, 2, 1).unwrap();
        for_each_sign_vector(4, |eps| assert_eq!(f.eval(eps), shifted.eval(eps)));
    }

    #[test]
    fn shift_difference_on_walk_terminal() {
        let g = WalkGrid::new(4, 1.0).unwrap();
        let bt = PathFunctional::new(4, move |eps| {
            0.5 * eps.iter().map(|&e| e as f64).sum::<f64>()
        });
        let plus = shift(&bt, 2, 1).unwrap();
        let minus = shift(&bt, 2, -1).unwrap();
        for_each_sign_vector(4, |eps| {
            assert_relative_eq!(plus.eval(eps) - minus.eval(eps), 2.0 * g.sqrt_h());
        });
    }

    #[test]
    fn malliavin_of_linear_functional_is_one() {
        let g = WalkGrid::new(6, 1.0).unwrap();
        let sq = g.sqrt_h();
        let bt = PathFunctional::new(6, move |eps| {
            sq * eps.iter().map(|&e| e as f64).sum::<f64>()
        });
        for m in 1..=6 {
            let d = discrete_malliavin(&bt, m, &g).unwrap();
            for_each_sign_vector(6, |eps| {
                assert_relative_eq!(d.eval(eps), 1.0, max_relative = 1e-14)
            });
        }
    }

    #[test]
    fn malliavin_of_sign_product() {
        let g = WalkGrid::new(2, 1.0).unwrap();
        let f = PathFunctional::new(2, |eps| (eps[0] * eps[1]) as f64);
        let d = discrete_malliavin(&f, 1, &g).unwrap();
        for_each_sign_vector(2, |eps| {
            assert_relative_eq!(d.eval(eps), eps[1] as f64 / g.sqrt_h());
        });
    }

    #[test]
    fn malliavin_vanishes_off_support() {
        let g = WalkGrid::new(5, 1.0).unwrap();
        let f = PathFunctional::with_support(5, [1, 2], |eps| (eps[0] + eps[1]) as f64);
        let d = discrete_malliavin(&f, 4, &g).unwrap();
        for_each_sign_vector(5, |eps| assert_eq!(d.eval(eps), 0.0));
    }

    #[test]
    fn malliavin_out_of_range_rejected() {
        let g = WalkGrid::new(3, 1.0).unwrap();
        let f = PathFunctional::new(3, |_| 0.0);
        assert!(discrete_malliavin(&f, 0, &g).is_err());
        assert!(discrete_malliavin(&f, 4, &g).is_err());
    }

    #[test]
    fn variational_walk_constant_coefficients() {
        let p = problem("brownian-square");
        let g = WalkGrid::new(6, 1.0).unwrap();
        let eps = rademacher_path(&g, 1, 0);
        let grad = variational_walk(&p, &g, &eps, 2, 0.7).unwrap();
        assert!(grad.iter().all(|&v| v == 1.0));
        assert_eq!(grad.len(), 5);
    }

    #[test]
    fn variational_walk_multiplicative_sigma() {
        // sigma = s0 x has sigma_x = s0, b = 0: the product formula is exact.
        let s0 = 0.3;
        let mut p = problem("brownian-identity");
        p.diffusion = Arc::new(move |_, x| s0 * x);
        p.diffusion_dx = Some(Arc::new(move |_, _| s0));
        p.delta = 0.0;
        p.reference = None;
        let g = WalkGrid::new(8, 1.0).unwrap();
        let eps = rademacher_path(&g, 17, 0);
        let k = 1;
        let grad = variational_walk(&p, &g, &eps, k, 2.0).unwrap();
        let mut expect = 1.0;
        for (i, m) in (k + 1..=8).enumerate() {
            expect *= 1.0 + s0 * g.sqrt_h() * eps[m - 1] as f64;
            assert_relative_eq!(grad[i + 1], expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn variational_walk_matches_central_difference() {
        let p = problem("sine-coeffs");
        let g = WalkGrid::new(10, 1.0).unwrap();
        let eps = rademacher_path(&g, 23, 0);
        let k = 3;
        let x = 0.4;
        let grad = variational_walk(&p, &g, &eps, k, x).unwrap();
        let delta = 1e-4;
        let up = forward_walk(&p, &g, &eps, (k, x + delta)).unwrap();
        let dn = forward_walk(&p, &g, &eps, (k, x - delta)).unwrap();
        for m in k..=10 {
            let fd = (up.x_at(m) - dn.x_at(m)) / (2.0 * delta);
            assert!(
                (fd - grad[m - k]).abs() < 1e-6,
                "m = {m}: fd = {fd}, grad = {}",
                grad[m - k]
            );
        }
    }

    #[test]
    fn malliavin_walk_constant_sigma() {
        let p = problem("brownian-square");
        let g = WalkGrid::new(6, 1.0).unwrap();
        let eps = rademacher_path(&g, 2, 0);
        let path = forward_walk(&p, &g, &eps, (0, 0.0)).unwrap();
        let k = 3;
        let d = malliavin_walk(&p, &path, k).unwrap();
        assert_eq!(d[0], 0.0);
        for v in &d[1..] {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn malliavin_walk_first_entry_is_sigma() {
        let p = problem("sine-coeffs");
        let g = WalkGrid::new(2, 1.0).unwrap();
        let path = forward_walk(&p, &g, &[1, -1], (0, 0.0)).unwrap();
        let d = malliavin_walk(&p, &path, 1).unwrap();
        assert_eq!(d[1], p.sigma(g.time(1), 0.0));
    }

    #[test]
    fn malliavin_walk_is_flip_quotient_on_all_paths() {
        // The theta-averaged recursion equals the sign-flip difference
        // quotient exactly (up to quadrature error) on every path.
        let p = problem("sine-coeffs");
        for n in [2, 4, 6] {
            let g = WalkGrid::new(n, 1.0).unwrap();
            for_each_sign_vector(n, |eps| {
                let path = forward_walk(&p, &g, eps, (0, 0.3)).unwrap();
                for k in 1..=n {
                    let d = malliavin_walk(&p, &path, k).unwrap();
                    for m in k - 1..=n {
                        let func = state_functional(&p, &g, 0.3, m);
                        let dm = discrete_malliavin(&func, k, &g).unwrap();
                        let want = dm.eval(eps);
                        assert!(
                            (d[m + 1 - k] - want).abs() < 1e-12,
                            "n={n} k={k} m={m}: {} vs {want}",
                            d[m + 1 - k]
                        );
                    }
                }
            });
        }
    }

    #[test]
    fn weight_reduces_to_scaled_increment_for_constant_sigma() {
        let p = problem("brownian-square");
        let g = WalkGrid::new(8, 1.0).unwrap();
        let eps = rademacher_path(&g, 4, 0);
        let path = forward_walk(&p, &g, &eps, (0, 0.0)).unwrap();
        let b = bn_path(&g, &eps);
        for (k, l) in [(0, 3), (2, 8), (5, 6)] {
            let w = discrete_weight(&p, &path, k, l).unwrap();
            let expect = (b[l] - b[k]) / (g.time(l) - g.time(k));
            assert_relative_eq!(w, expect, max_relative = 1e-13);
        }
    }

    #[test]
    fn weight_rejects_bad_indices() {
        let p = problem("brownian-square");
        let g = WalkGrid::new(4, 1.0).unwrap();
        let eps = rademacher_path(&g, 4, 0);
        let path = forward_walk(&p, &g, &eps, (0, 0.0)).unwrap();
        assert!(discrete_weight(&p, &path, 2, 2).is_err());
        assert!(discrete_weight(&p, &path, 3, 2).is_err());
        assert!(discrete_weight(&p, &path, 0, 5).is_err());
    }

    #[test]
    fn weight_conditional_mean_vanishes_exhaustively() {
        let p = problem("sine-coeffs");
        for n in [4, 6] {
            let g = WalkGrid::new(n, 1.0).unwrap();
            let k = 1;
            let l = n;
            // Group paths by the prefix eps_1..eps_k and average the weight.
            let mut sums = std::collections::BTreeMap::<u32, f64>::new();
            for_each_sign_vector(n, |eps| {
                let path = forward_walk(&p, &g, eps, (0, 0.2)).unwrap();
                let w = discrete_weight(&p, &path, k, l).unwrap();
                let mut prefix = 0u32;
                for j in 0..k {
                    prefix = prefix << 1 | (eps[j] == 1) as u32;
                }
                *sums.entry(prefix).or_insert(0.0) += w;
            });
            for (prefix, s) in sums {
                assert!(s.abs() < 1e-12, "n = {n}, prefix {prefix}: sum = {s}");
            }
        }
    }

    proptest! {
        #[test]
        fn malliavin_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, m in 1usize..=5) {
            let g = WalkGrid::new(5, 1.0).unwrap();
            let fa = PathFunctional::new(5, |eps| {
                eps.iter().enumerate().map(|(i, &e)| (i as f64 + 1.0) * e as f64).sum()
            });
            let fb = PathFunctional::new(5, |eps| {
                (eps[0] * eps[2]) as f64 + eps[4] as f64
            });
            let comb = PathFunctional::linear_combination(a, &fa, b, &fb);
            let d_comb = discrete_malliavin(&comb, m, &g).unwrap();
            let da = discrete_malliavin(&fa, m, &g).unwrap();
            let db = discrete_malliavin(&fb, m, &g).unwrap();
            let mut max_err = 0.0f64;
            for_each_sign_vector(5, |eps| {
                let lhs = d_comb.eval(eps);
                let rhs = a * da.eval(eps) + b * db.eval(eps);
                max_err = max_err.max((lhs - rhs).abs());
            });
            prop_assert!(max_err < 1e-12, "max deviation {max_err}");
        }

        #[test]
        fn shift_is_idempotent(m in 1usize..=5, sign in prop::sample::select(vec![1i8, -1i8])) {
            let g = WalkGrid::new(5, 1.0).unwrap();
            let f = state_functional(
                &problem("sine-coeffs"), &g, 0.1, 5,
            );
            let once = shift(&f, m, sign).unwrap();
            let twice = shift(&once, m, sign).unwrap();
            let mut equal = true;
            for_each_sign_vector(5, |eps| {
                equal &= once.eval(eps) == twice.eval(eps);
            });
            prop_assert!(equal);
        }
    }
}
