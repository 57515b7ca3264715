//! Backward solver for the finite difference equation associated with the
//! walk-driven system.
//!
//! The field `u^n` satisfies, at every level `m` and state `x`,
//!
//! ```text
//! u^n(t_m, x) - h f(t_{m+1}, x, u^n(t_m, x), zbar)
//!     = 1/2 [u^n(t_{m+1}, x_up) + u^n(t_{m+1}, x_down)],
//! zbar = (u^n(t_{m+1}, x_up) - u^n(t_{m+1}, x_down)) / (2 sqrt(h)),
//! ```
//!
//! with `x_{up/down} = x + h b(t_{m+1}, x) +- sqrt(h) sigma(t_{m+1}, x)` and
//! terminal condition `u^n(t_n, .) = g`. The solved field represents the
//! backward pair through `Y^n_{t_k} = u^n(t_k, X^n_{t_k})` and
//! `Z^n_{t_k} = (u^n(t_{k+1}, x_up) - u^n(t_{k+1}, x_down)) / (2 sqrt(h))`.
//!
//! Two backends: an exact non-recombining path tree (capacity-bounded, the
//! ground truth) and a uniform spatial grid with monotone cubic interpolation
//! (the scalable backend). [`brute_force_solution`] solves the same system by
//! exhaustive path enumeration and conditional-expectation averaging without
//! touching the tree code, and is the oracle the tree is checked against.

use crate::problems::ProblemSpec;
use crate::rng::{self, Domain};
use crate::walk::{self, WalkGrid};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Largest tree depth `solve_tree` accepts (up to `2^n` states at the leaf
/// level; 22 keeps the solve within a few hundred MB).
pub const TREE_CAP: usize = 22;
/// Largest `n` the brute-force oracle accepts.
pub const BRUTE_CAP: usize = 12;
/// Fixed-point stopping tolerance of the implicit step.
pub const FP_TOL: f64 = 1e-12;
/// Iteration cap of the implicit step.
pub const MAX_ITER: usize = 100;

/// Children states of `(t_m, x)`: both coefficient evaluations at
/// `(t_{m+1}, x)`, signs up and down.
#[inline]
pub fn one_step_states(p: &ProblemSpec, grid: &WalkGrid, m: usize, x: f64) -> (f64, f64) {
    (walk::step(p, grid, m, x, 1), walk::step(p, grid, m, x, -1))
}

/// Solve the implicit relation at one state given the two continuation
/// values. The `z` argument of the driver is fixed from the continuation
/// before iterating, so the map `y -> h f(t_{m+1}, x, y, zbar) + mean` is a
/// contraction whenever `h lf < 1`.
pub fn implicit_step(
    p: &ProblemSpec,
    grid: &WalkGrid,
    m: usize,
    x: f64,
    continuation: (f64, f64),
) -> Result<f64> {
    let (u_up, u_down) = continuation;
    if !u_up.is_finite() || !u_down.is_finite() {
        return Err(Error::Numeric(format!(
            "continuation values ({u_up}, {u_down}) at level {m}, x = {x}"
        )));
    }
    if grid.h() * p.lf >= 1.0 {
        return Err(Error::Config(format!(
            "h lf = {} >= 1: the implicit step is not a contraction",
            grid.h() * p.lf
        )));
    }
    let mean = 0.5 * (u_up + u_down);
    let zbar = (u_up - u_down) / (2.0 * grid.sqrt_h());
    let t_next = grid.time(m + 1);
    let mut y = mean;
    for _ in 0..MAX_ITER {
        let y_next = grid.h() * p.f(t_next, x, y, zbar) + mean;
        if (y_next - y).abs() < FP_TOL {
            return Ok(y_next);
        }
        y = y_next;
    }
    Err(Error::Convergence(format!(
        "implicit step at level {m}, x = {x}: residual {} after {MAX_ITER} iterations",
        (grid.h() * p.f(t_next, x, y, zbar) + mean - y).abs()
    )))
}

/// Which storage realizes the solved field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Backend {
    PathTree,
    SpatialGrid,
}

/// Uniform spatial grid specification for [`solve_grid`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct XGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

#[derive(Debug, Clone)]
struct TreeLevel {
    /// State values in prefix order: the state with sign prefix bits `p`
    /// (most significant bit is `eps_1`, `1` meaning up) sits at index `p`.
    x: Vec<f64>,
    u: Vec<f64>,
    /// Node indices sorted by state value, for by-value lookup.
    order: Vec<u32>,
}

#[derive(Debug, Clone)]
struct GridLevel {
    u: Vec<f64>,
    /// Monotone cubic nodal derivatives.
    d: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Storage {
    Tree { levels: Vec<TreeLevel> },
    Grid { spec: XGrid, dx: f64, levels: Vec<GridLevel> },
}

/// Post-solve diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct SolveDiagnostics {
    pub backend: Backend,
    pub states: usize,
    /// Largest defining-relation residual, re-evaluated after the solve.
    pub max_residual: f64,
    /// States whose children fell outside the spatial grid (zero for trees).
    pub truncated_children: usize,
}

/// The solved field `u^n` with query access to `Y^n`, `Z^n` and `Zhat^n`.
#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    problem: ProblemSpec,
    grid: WalkGrid,
    storage: Storage,
    diagnostics: SolveDiagnostics,
}

fn sorted_order(xs: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..xs.len() as u32).collect();
    order.sort_by(|&a, &b| xs[a as usize].total_cmp(&xs[b as usize]));
    order
}

/// Sign prefix bits of `eps_1..eps_k` (up = 1), the tree node key.
pub fn prefix_from_eps(eps: &[i8], k: usize) -> u64 {
    assert!(k <= eps.len() && k <= 63);
    let mut p = 0u64;
    for &e in &eps[..k] {
        p = p << 1 | (e > 0) as u64;
    }
    p
}

/// Solve on the exact non-recombining path tree rooted at `(0, x0)`.
pub fn solve_tree(p: &ProblemSpec, grid: &WalkGrid, x0: f64) -> Result<DiscreteSolution> {
    let n = grid.n();
    if n > TREE_CAP {
        return Err(Error::Capacity(format!(
            "tree depth {n} exceeds cap {TREE_CAP}; use solve_grid for large n"
        )));
    }
    if grid.h() * p.lf >= 1.0 {
        return Err(Error::Config(format!(
            "h lf = {} >= 1: the implicit step is not a contraction",
            grid.h() * p.lf
        )));
    }

    // Forward pass: reachable states per level, children of node i at
    // indices 2i (down) and 2i+1 (up).
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    xs.push(vec![x0]);
    for m in 0..n {
        let cur = &xs[m];
        let next: Vec<f64> = cur
            .par_iter()
            .flat_map_iter(|&x| {
                let (up, down) = one_step_states(p, grid, m, x);
                [down, up]
            })
            .collect();
        if let Some(bad) = next.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state {bad} at level {}", m + 1)));
        }
        xs.push(next);
    }

    // Backward sweep.
    let mut levels: Vec<TreeLevel> = Vec::with_capacity(n + 1);
    let terminal: Vec<f64> = xs[n].par_iter().map(|&x| p.g(x)).collect();
    let order = sorted_order(&xs[n]);
    levels.push(TreeLevel { x: xs.pop().unwrap(), u: terminal, order });
    for m in (0..n).rev() {
        let x_level = xs.pop().unwrap();
        let above = &levels.last().unwrap().u;
        let u: Vec<f64> = x_level
            .par_iter()
            .enumerate()
            .map(|(i, &x)| implicit_step(p, grid, m, x, (above[2 * i + 1], above[2 * i])))
            .collect::<Result<Vec<f64>>>()?;
        let order = sorted_order(&x_level);
        levels.push(TreeLevel { x: x_level, u, order });
    }
    levels.reverse();

    let states = levels.iter().map(|l| l.x.len()).sum();
    let mut sol = DiscreteSolution {
        problem: p.clone(),
        grid: *grid,
        storage: Storage::Tree { levels },
        diagnostics: SolveDiagnostics {
            backend: Backend::PathTree,
            states,
            max_residual: 0.0,
            truncated_children: 0,
        },
    };
    sol.diagnostics.max_residual = sol.max_residual();
    Ok(sol)
}

fn eval_grid_level(level: &GridLevel, spec: &XGrid, dx: f64, x: f64) -> (f64, bool) {
    crate::interp::eval_uniform(&level.u, &level.d, spec.x_min, dx, x)
}

impl Storage {
    /// Evaluate a stored level at `x`; grids interpolate, trees require an
    /// exact state match. The bool reports grid extrapolation.
    fn eval(&self, level: usize, x: f64) -> Result<(f64, bool)> {
        match self {
            Storage::Tree { levels } => {
                let lv = &levels[level];
                let i = lv
                    .order
                    .binary_search_by(|&j| lv.x[j as usize].total_cmp(&x))
                    .map_err(|_| {
                        Error::StateLookup(format!("x = {x} is not a tree state at level {level}"))
                    })?;
                Ok((lv.u[lv.order[i] as usize], false))
            }
            Storage::Grid { spec, dx, levels } => Ok(eval_grid_level(&levels[level], spec, *dx, x)),
        }
    }
}

/// Solve on a uniform spatial grid. Children values are read by monotone
/// cubic interpolation; children beyond the grid edge use linear
/// extrapolation and are counted as truncated. The solve aborts when
/// extrapolation would dominate a level.
pub fn solve_grid(p: &ProblemSpec, grid: &WalkGrid, xgrid: XGrid) -> Result<DiscreteSolution> {
    if xgrid.points < 3 {
        return Err(Error::Config(format!("spatial grid needs >= 3 points, got {}", xgrid.points)));
    }
    if !(xgrid.x_max > xgrid.x_min) {
        return Err(Error::Config("spatial grid needs x_max > x_min".into()));
    }
    if grid.h() * p.lf >= 1.0 {
        return Err(Error::Config(format!(
            "h lf = {} >= 1: the implicit step is not a contraction",
            grid.h() * p.lf
        )));
    }
    let n = grid.n();
    let npts = xgrid.points;
    let dx = (xgrid.x_max - xgrid.x_min) / (npts - 1) as f64;
    let node = |i: usize| xgrid.x_min + i as f64 * dx;

    let mut levels = vec![GridLevel { u: Vec::new(), d: Vec::new() }; n + 1];
    let terminal: Vec<f64> = (0..npts).into_par_iter().map(|i| p.g(node(i))).collect();
    levels[n].d = crate::interp::pchip_slopes(&terminal, dx);
    levels[n].u = terminal;

    let mut truncated_total = 0usize;
    for m in (0..n).rev() {
        let (lower, upper) = levels.split_at_mut(m + 1);
        let above = &upper[0];
        let results: Vec<(f64, bool)> = (0..npts)
            .into_par_iter()
            .map(|i| -> Result<(f64, bool)> {
                let x = node(i);
                let (x_up, x_down) = one_step_states(p, grid, m, x);
                let (u_up, t1) = eval_grid_level(above, &xgrid, dx, x_up);
                let (u_down, t2) = eval_grid_level(above, &xgrid, dx, x_down);
                let y = implicit_step(p, grid, m, x, (u_up, u_down))?;
                Ok((y, t1 || t2))
            })
            .collect::<Result<Vec<_>>>()?;
        let truncated = results.iter().filter(|r| r.1).count();
        if truncated * 5 > npts {
            return Err(Error::Domain(format!(
                "spatial grid too narrow: {truncated} of {npts} states at level {m} \
                 step outside [{}, {}]",
                xgrid.x_min, xgrid.x_max
            )));
        }
        truncated_total += truncated;
        let u: Vec<f64> = results.into_iter().map(|r| r.0).collect();
        lower[m].d = crate::interp::pchip_slopes(&u, dx);
        lower[m].u = u;
    }

    let mut sol = DiscreteSolution {
        problem: p.clone(),
        grid: *grid,
        storage: Storage::Grid { spec: xgrid, dx, levels },
        diagnostics: SolveDiagnostics {
            backend: Backend::SpatialGrid,
            states: npts * (n + 1),
            max_residual: 0.0,
            truncated_children: truncated_total,
        },
    };
    sol.diagnostics.max_residual = sol.max_residual();
    Ok(sol)
}

/// Estimator mode for [`DiscreteSolution::zhat_at`].
#[derive(Debug, Clone, Copy)]
pub enum ZhatMode {
    /// Exhaustive average over all sign suffixes.
    Exact,
    /// Monte Carlo over sign suffixes, keyed by `(seed, stream)`.
    Mc { samples: usize, seed: u64, stream: u64 },
}

/// A conditional-expectation estimate with its Monte Carlo standard error
/// (zero in exact mode).
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl DiscreteSolution {
    pub fn grid(&self) -> &WalkGrid {
        &self.grid
    }
    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }
    pub fn backend(&self) -> Backend {
        self.diagnostics.backend
    }
    pub fn diagnostics(&self) -> &SolveDiagnostics {
        &self.diagnostics
    }

    /// `u^n(t_k, x)`. Tree states must match exactly; grids interpolate and
    /// extrapolate linearly up to one cell beyond the edge.
    pub fn y_at(&self, k: usize, x: f64) -> Result<f64> {
        if k > self.grid.n() {
            return Err(Error::Domain(format!("level {k} beyond n = {}", self.grid.n())));
        }
        self.check_reach(x)?;
        Ok(self.storage.eval(k, x)?.0)
    }

    /// `Z^n` at `(t_k, x)`: the sign-flip difference quotient of the next
    /// level across the two children of `x`.
    pub fn z_at(&self, k: usize, x: f64) -> Result<f64> {
        if k >= self.grid.n() {
            return Err(Error::Domain(format!(
                "z is defined for levels below n = {}, got {k}",
                self.grid.n()
            )));
        }
        match &self.storage {
            Storage::Tree { .. } => {
                let i = self.tree_index(k, x)?;
                self.z_at_prefix(k, i as u64)
            }
            Storage::Grid { .. } => {
                self.check_reach(x)?;
                let (x_up, x_down) = one_step_states(&self.problem, &self.grid, k, x);
                let u_up = self.storage.eval(k + 1, x_up)?.0;
                let u_down = self.storage.eval(k + 1, x_down)?.0;
                Ok((u_up - u_down) / (2.0 * self.grid.sqrt_h()))
            }
        }
    }

    /// Tree-backend query keyed by the sign prefix `eps_1..eps_k`.
    pub fn y_at_prefix(&self, k: usize, prefix: u64) -> Result<f64> {
        match &self.storage {
            Storage::Tree { levels } => levels
                .get(k)
                .and_then(|lv| lv.u.get(prefix as usize))
                .copied()
                .ok_or_else(|| Error::StateLookup(format!("prefix {prefix} at level {k}"))),
            Storage::Grid { .. } => {
                Err(Error::StateLookup("prefix queries need the path-tree backend".into()))
            }
        }
    }

    /// Tree-backend `Z^n` keyed by the sign prefix.
    pub fn z_at_prefix(&self, k: usize, prefix: u64) -> Result<f64> {
        match &self.storage {
            Storage::Tree { levels } => {
                if k >= self.grid.n() {
                    return Err(Error::Domain(format!("z undefined at the terminal level {k}")));
                }
                let above = &levels[k + 1];
                let down = above
                    .u
                    .get(2 * prefix as usize)
                    .ok_or_else(|| Error::StateLookup(format!("prefix {prefix} at level {k}")))?;
                let up = above.u[2 * prefix as usize + 1];
                Ok((up - down) / (2.0 * self.grid.sqrt_h()))
            }
            Storage::Grid { .. } => {
                Err(Error::StateLookup("prefix queries need the path-tree backend".into()))
            }
        }
    }

    /// State value of a tree node.
    pub fn x_at_prefix(&self, k: usize, prefix: u64) -> Result<f64> {
        match &self.storage {
            Storage::Tree { levels } => levels
                .get(k)
                .and_then(|lv| lv.x.get(prefix as usize))
                .copied()
                .ok_or_else(|| Error::StateLookup(format!("prefix {prefix} at level {k}"))),
            Storage::Grid { .. } => {
                Err(Error::StateLookup("prefix queries need the path-tree backend".into()))
            }
        }
    }

    fn tree_index(&self, k: usize, x: f64) -> Result<usize> {
        match &self.storage {
            Storage::Tree { levels } => {
                let lv = &levels[k];
                lv.order
                    .binary_search_by(|&j| lv.x[j as usize].total_cmp(&x))
                    .map(|i| lv.order[i] as usize)
                    .map_err(|_| {
                        Error::StateLookup(format!("x = {x} is not a tree state at level {k}"))
                    })
            }
            Storage::Grid { .. } => unreachable!(),
        }
    }

    /// Reject grid queries more than one cell beyond the edge.
    fn check_reach(&self, x: f64) -> Result<()> {
        if let Storage::Grid { spec, dx, .. } = &self.storage {
            if x < spec.x_min - dx || x > spec.x_max + dx {
                return Err(Error::Domain(format!(
                    "query x = {x} more than one cell outside [{}, {}]",
                    spec.x_min, spec.x_max
                )));
            }
        }
        Ok(())
    }

    /// Largest defining-relation residual over all stored states,
    /// re-evaluated from the stored field rather than trusted from the
    /// iteration.
    pub fn max_residual(&self) -> f64 {
        let p = &self.problem;
        let grid = &self.grid;
        let n = grid.n();
        let residual_at = |m: usize, x: f64, u: f64| -> f64 {
            let (x_up, x_down) = one_step_states(p, grid, m, x);
            let u_up = self.storage.eval(m + 1, x_up).map(|v| v.0).unwrap_or(f64::NAN);
            let u_down = self.storage.eval(m + 1, x_down).map(|v| v.0).unwrap_or(f64::NAN);
            let zbar = (u_up - u_down) / (2.0 * grid.sqrt_h());
            (u - grid.h() * p.f(grid.time(m + 1), x, u, zbar) - 0.5 * (u_up + u_down)).abs()
        };
        match &self.storage {
            Storage::Tree { levels } => (0..n)
                .flat_map(|m| {
                    levels[m].x.iter().zip(levels[m].u.iter()).map(move |(&x, &u)| (m, x, u))
                })
                .map(|(m, x, u)| residual_at(m, x, u))
                .fold(0.0, f64::max),
            Storage::Grid { spec, dx, levels } => {
                let mut worst: f64 = 0.0;
                for m in 0..n {
                    for (i, &u) in levels[m].u.iter().enumerate() {
                        let x = spec.x_min + i as f64 * dx;
                        // Skip states whose children leave the grid; there the
                        // relation holds against extrapolated values only.
                        let (x_up, x_down) = one_step_states(p, grid, m, x);
                        if x_up > spec.x_max || x_down < spec.x_min {
                            continue;
                        }
                        worst = worst.max(residual_at(m, x, u));
                    }
                }
                worst
            }
        }
    }

    /// The weight-based representation `Zhat^n` at `(t_k, x)`: the
    /// conditional mean of the terminal sign-flip quotient plus the weighted
    /// driver sum scaled by `sigma(t_{k+1}, x)`, with `Y^n`, `Z^n` read from
    /// the solved field.
    pub fn zhat_at(&self, k: usize, x: f64, mode: ZhatMode) -> Result<Estimate> {
        let grid = &self.grid;
        let p = &self.problem;
        let n = grid.n();
        if k + 1 >= n {
            return Err(Error::Domain(format!("zhat needs k < n - 1, got k = {k}, n = {n}")));
        }
        let bx = p.drift_dx.clone().ok_or_else(|| Error::Capability(format!("{}: b_x", p.name)))?;
        let sx = p
            .diffusion_dx
            .clone()
            .ok_or_else(|| Error::Capability(format!("{}: sigma_x", p.name)))?;

        // One suffix evaluation: signs eps_{k+1..n} supplied by `sig`.
        let run = |sig: &dyn Fn(usize) -> i8| -> Result<(f64, f64)> {
            // Both coordinate-(k+1)-frozen paths for the terminal quotient.
            let mut xp = walk::step(p, grid, k, x, 1);
            let mut xm = walk::step(p, grid, k, x, -1);
            // Actual path, variational walk and running weight sum.
            let mut xc = x;
            let mut gradv = 1.0;
            let mut wsum = 0.0;
            let mut fsum = 0.0;
            for m in k + 1..=n {
                let e = sig(m);
                let t = grid.time(m);
                let x_prev = xc;
                let s_prev = p.sigma(t, x_prev);
                if s_prev < p.delta {
                    return Err(Error::Ellipticity { t, x: x_prev, sigma: s_prev, delta: p.delta });
                }
                wsum += gradv / s_prev * e as f64;
                xc = walk::step(p, grid, m - 1, xc, e);
                gradv *= 1.0 + grid.h() * bx(t, x_prev) + grid.sqrt_h() * sx(t, x_prev) * e as f64;
                if m > k + 1 {
                    xp = walk::step(p, grid, m - 1, xp, e);
                    xm = walk::step(p, grid, m - 1, xm, e);
                }
                // Driver terms run over levels k+1..n-1.
                if m < n {
                    let weight = grid.sqrt_h() * wsum / (t - grid.time(k));
                    let y_m = self.y_at(m, xc)?;
                    let z_m = self.z_at(m, xc)?;
                    fsum += p.f(grid.time(m + 1), xc, y_m, z_m) * weight;
                }
            }
            let term1 = (p.g(xp) - p.g(xm)) / (2.0 * grid.sqrt_h());
            Ok((term1, grid.h() * fsum))
        };

        let sigma_scale = p.sigma(grid.time(k + 1), x);
        match mode {
            ZhatMode::Exact => {
                if n > TREE_CAP {
                    return Err(Error::Capacity(format!(
                        "exact zhat enumerates 2^{} suffixes; n = {n} exceeds cap {TREE_CAP}",
                        n - k
                    )));
                }
                let total = 1u64 << (n - k);
                let mut acc1 = 0.0;
                let mut acc2 = 0.0;
                for code in 0..total {
                    let sig = move |m: usize| -> i8 {
                        if code >> (m - k - 1) & 1 == 1 {
                            1
                        } else {
                            -1
                        }
                    };
                    let (t1, t2) = run(&sig)?;
                    acc1 += t1;
                    acc2 += t2;
                }
                Ok(Estimate {
                    value: acc1 / total as f64 + acc2 / total as f64 * sigma_scale,
                    std_error: 0.0,
                })
            }
            ZhatMode::Mc { samples, seed, stream } => {
                if samples < 2 {
                    return Err(Error::Config("zhat Monte Carlo needs >= 2 samples".into()));
                }
                let vals: Vec<f64> = (0..samples as u64)
                    .into_par_iter()
                    .map(|s| -> Result<f64> {
                        let sig = move |m: usize| -> i8 {
                            rng::sign(
                                seed,
                                Domain::Estimator,
                                stream.wrapping_add(s.wrapping_mul(0x9E37_79B9)),
                                m as u64,
                            )
                        };
                        let (t1, t2) = run(&sig)?;
                        Ok(t1 + t2 * sigma_scale)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let (mean, se) = crate::stats::mean_se(&vals);
                Ok(Estimate { value: mean, std_error: se })
            }
        }
    }

    /// CSV export: one row per stored state with its `u` value and, below
    /// the terminal level, the `z` slice.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,state,u,z\n");
        let n = self.grid.n();
        match &self.storage {
            Storage::Tree { levels } => {
                for (m, lv) in levels.iter().enumerate() {
                    for (i, (&x, &u)) in lv.x.iter().zip(lv.u.iter()).enumerate() {
                        let z = if m < n {
                            format!("{}", self.z_at_prefix(m, i as u64).unwrap())
                        } else {
                            String::new()
                        };
                        out.push_str(&format!("{m},{x},{u},{z}\n"));
                    }
                }
            }
            Storage::Grid { spec, dx, levels } => {
                for (m, lv) in levels.iter().enumerate() {
                    for (i, &u) in lv.u.iter().enumerate() {
                        let x = spec.x_min + i as f64 * dx;
                        let z = if m < n {
                            match self.z_at(m, x) {
                                Ok(z) => format!("{z}"),
                                Err(_) => String::new(),
                            }
                        } else {
                            String::new()
                        };
                        out.push_str(&format!("{m},{x},{u},{z}\n"));
                    }
                }
            }
        }
        out
    }
}

/// Per-prefix tables of the backward pair from exhaustive enumeration.
///
/// Independent of the tree solver: forward states, conditional expectations
/// and the implicit fixed point are written out directly from the summed
/// backward equation, so these tables are the oracle the tree solver is
/// verified against.
#[derive(Debug, Clone)]
pub struct BruteForceSolution {
    grid: WalkGrid,
    /// `y[k][prefix]`, levels `0..=n`.
    pub y: Vec<Vec<f64>>,
    /// `z[k][prefix]`, levels `0..n`.
    pub z: Vec<Vec<f64>>,
    /// Forward states `x[k][prefix]`.
    pub x: Vec<Vec<f64>>,
}

pub fn brute_force_solution(
    p: &ProblemSpec,
    grid: &WalkGrid,
    x0: f64,
) -> Result<BruteForceSolution> {
    let n = grid.n();
    if n > BRUTE_CAP {
        return Err(Error::Capacity(format!(
            "brute force enumerates 2^{n} paths; cap is {BRUTE_CAP}"
        )));
    }
    let h = grid.h();
    let sq = grid.sqrt_h();

    // Forward states, written straight from the summed recursion.
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    x.push(vec![x0]);
    for m in 0..n {
        let t = grid.time(m + 1);
        let mut next = Vec::with_capacity(2 << m);
        for &xv in &x[m] {
            let base = xv + h * p.b(t, xv);
            let mv = sq * p.sigma(t, xv);
            next.push(base - mv);
            next.push(base + mv);
        }
        x.push(next);
    }

    let mut y: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; 1 << k]).collect();
    let mut z: Vec<Vec<f64>> = (0..n).map(|k| vec![0.0; 1 << k]).collect();
    for (prefix, yv) in y[n].iter_mut().enumerate() {
        *yv = p.g(x[n][prefix]);
    }

    for k in (0..n).rev() {
        let suffixes = 1usize << (n - k);
        for prefix in 0..1usize << k {
            // Conditional averages over all paths sharing this prefix: the
            // next-sign-weighted average gives z, the plain average the
            // continuation for the implicit y.
            let mut z_acc = 0.0;
            let mut c_acc = 0.0;
            for suffix in 0..suffixes {
                let leaf = prefix << (n - k) | suffix;
                let eps_next = if leaf >> (n - k - 1) & 1 == 1 { 1.0 } else { -1.0 };
                let g_term = p.g(x[n][leaf]);
                let mut f_sum = 0.0;
                for m in k + 1..n {
                    let pm = leaf >> (n - m);
                    f_sum += p.f(grid.time(m + 1), x[m][pm], y[m][pm], z[m][pm]);
                }
                z_acc += g_term * eps_next / sq + sq * f_sum * eps_next;
                c_acc += g_term + h * f_sum;
            }
            let z_val = z_acc / suffixes as f64;
            let c = c_acc / suffixes as f64;
            let xv = x[k][prefix];
            let t_next = grid.time(k + 1);
            let mut yv = c;
            let mut converged = false;
            for _ in 0..MAX_ITER {
                let next = c + h * p.f(t_next, xv, yv, z_val);
                if (next - yv).abs() < FP_TOL {
                    yv = next;
                    converged = true;
                    break;
                }
                yv = next;
            }
            if !converged {
                return Err(Error::Convergence(format!(
                    "brute-force fixed point at level {k}, prefix {prefix}"
                )));
            }
            z[k][prefix] = z_val;
            y[k][prefix] = yv;
        }
    }

    Ok(BruteForceSolution { grid: *grid, y, z, x })
}

impl BruteForceSolution {
    pub fn grid(&self) -> &WalkGrid {
        &self.grid
    }
    pub fn y0(&self) -> f64 {
        self.y[0][0]
    }
}
