//! Benchmark problem definitions.
//!
//! A [`ProblemSpec`] bundles the coefficients of the forward-backward system
//! (`b`, `sigma`, `f`, `g`), optional derivative callbacks, regularity
//! metadata (Holder order `alpha`, growth exponent `p0`, ellipticity floor
//! `delta`, Lipschitz bound `lf`), and an optional reference solution.
//!
//! The registry covers the regimes the experiments need: driver-free problems
//! with closed forms (`brownian-identity`, `brownian-square`, `exp-diffusion`,
//! `lipschitz-call`), a linear driver with a closed form (`discounted-bond`),
//! and a state-dependent smooth problem with a PDE-numeric reference
//! (`sine-coeffs`).

use crate::rng::{self, Domain};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub type Coeff = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Driver = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type Terminal = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type RefField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// How a reference solution was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    ExactAnalytic,
    Quadrature,
    PdeNumeric,
}

/// Reference pair `(y(t,x), z(t,x))` for benchmarking.
#[derive(Clone)]
pub struct ClosedFormReference {
    pub kind: ReferenceKind,
    pub y: RefField,
    pub z: RefField,
}

impl ClosedFormReference {
    pub fn exact(y: RefField, z: RefField) -> Self {
        Self { kind: ReferenceKind::ExactAnalytic, y, z }
    }

    /// Gauss-Hermite reference for a driver-free problem with constant
    /// coefficients: `y(t,x) = E g(x + b0 (T-t) + sigma0 B_{T-t})` and
    /// `z = sigma0 d/dx y`, both evaluated with `nodes`-point quadrature
    /// (the derivative by a central difference of the quadrature value).
    pub fn quadrature(g: Terminal, b0: f64, sigma0: f64, horizon: f64, nodes: usize) -> Self {
        let (xs, ws) = gauss_hermite(nodes);
        let norm = 1.0 / std::f64::consts::PI.sqrt();
        let eval = {
            let g = g.clone();
            let xs = xs.clone();
            let ws = ws.clone();
            move |t: f64, x: f64| -> f64 {
                let s = horizon - t;
                if s <= 0.0 {
                    return g(x);
                }
                let scale = sigma0 * (2.0 * s).sqrt();
                let mean = x + b0 * s;
                let mut acc = 0.0;
                for (xi, wi) in xs.iter().zip(ws.iter()) {
                    acc += wi * g(mean + scale * xi);
                }
                norm * acc
            }
        };
        let y: RefField = {
            let eval = eval.clone();
            Arc::new(move |t, x| eval(t, x))
        };
        let z: RefField = Arc::new(move |t, x| {
            let dx = 1e-6 * (1.0 + x.abs());
            sigma0 * (eval(t, x + dx) - eval(t, x - dx)) / (2.0 * dx)
        });
        Self { kind: ReferenceKind::Quadrature, y, z }
    }
}

impl fmt::Debug for ClosedFormReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosedFormReference").field("kind", &self.kind).finish()
    }
}

/// A forward-backward problem instance. Immutable after construction; all
/// callbacks must be pure.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    /// Terminal time `T`.
    pub horizon: f64,
    pub drift: Coeff,
    pub diffusion: Coeff,
    pub generator: Driver,
    pub terminal: Terminal,
    pub drift_dx: Option<Coeff>,
    pub diffusion_dx: Option<Coeff>,
    pub terminal_d1: Option<Terminal>,
    pub terminal_d2: Option<Terminal>,
    pub generator_dx: Option<Driver>,
    pub generator_dy: Option<Driver>,
    pub generator_dz: Option<Driver>,
    /// Holder order of the least-smooth datum, in (0, 1].
    pub alpha: f64,
    /// Polynomial growth exponent of `g`.
    pub p0: u32,
    /// Ellipticity floor: `sigma >= delta > 0` everywhere.
    pub delta: f64,
    /// Lipschitz bound of the driver in `(x, y, z)` and `sqrt(t)`.
    pub lf: f64,
    /// Growth constant of `g` (metadata, validation only).
    pub cg: f64,
    /// `sup_t |f(t,0,0,0)|` (metadata, validation only).
    pub kf: f64,
    /// Start point the experiments are expected to use; sizes the probe box.
    pub start_hint: f64,
    pub reference: Option<ClosedFormReference>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("alpha", &self.alpha)
            .field("p0", &self.p0)
            .field("delta", &self.delta)
            .field("lf", &self.lf)
            .field("reference", &self.reference.as_ref().map(|r| r.kind))
            .finish()
    }
}

impl ProblemSpec {
    #[inline]
    pub fn b(&self, t: f64, x: f64) -> f64 {
        (self.drift)(t, x)
    }
    #[inline]
    pub fn sigma(&self, t: f64, x: f64) -> f64 {
        (self.diffusion)(t, x)
    }
    #[inline]
    pub fn f(&self, t: f64, x: f64, y: f64, z: f64) -> f64 {
        (self.generator)(t, x, y, z)
    }
    #[inline]
    pub fn g(&self, x: f64) -> f64 {
        (self.terminal)(x)
    }

    pub fn b_x(&self, t: f64, x: f64) -> Result<f64> {
        match &self.drift_dx {
            Some(cb) => Ok(cb(t, x)),
            None => Err(Error::Capability(format!("{}: drift derivative b_x", self.name))),
        }
    }

    pub fn sigma_x(&self, t: f64, x: f64) -> Result<f64> {
        match &self.diffusion_dx {
            Some(cb) => Ok(cb(t, x)),
            None => Err(Error::Capability(format!("{}: diffusion derivative sigma_x", self.name))),
        }
    }

    /// Probe box half-width: six standard deviations around the start point.
    pub fn probe_halfwidth(&self) -> f64 {
        6.0 * (1.0 + self.start_hint.abs())
    }

    /// Replace the reference solution (used to attach a PDE-numeric field).
    pub fn with_reference(mut self, reference: ClosedFormReference) -> Self {
        self.reference = Some(reference);
        self
    }
}

/// Names accepted by [`builtin_problem`].
pub const REGISTRY: [&str; 6] = [
    "brownian-identity",
    "brownian-square",
    "exp-diffusion",
    "discounted-bond",
    "lipschitz-call",
    "sine-coeffs",
];

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn check_params(name: &str, params: &BTreeMap<String, f64>, known: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !known.contains(&k.as_str()) {
            return Err(Error::Config(format!(
                "problem '{name}' does not accept parameter '{k}' (known: {})",
                known.join(", ")
            )));
        }
    }
    Ok(())
}

const SQRT_2PI: f64 = 2.506628274631000502415765284811;

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Instantiate a registered problem.
///
/// Recognized parameters (all optional): `T` everywhere; `x0` (start hint)
/// everywhere; `r` for `discounted-bond`; `kappa` for `exp-diffusion`;
/// `strike` for `lipschitz-call`; `b-amp`, `sigma-amp` for `sine-coeffs`.
pub fn builtin_problem(name: &str, params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let horizon = param(params, "T", 1.0);
    if !(horizon > 0.0) {
        return Err(Error::Config(format!("T must be positive, got {horizon}")));
    }
    let start_hint = param(params, "x0", 0.0);

    let zero2: Coeff = Arc::new(|_, _| 0.0);
    let one2: Coeff = Arc::new(|_, _| 1.0);
    let zero4: Driver = Arc::new(|_, _, _, _| 0.0);

    match name {
        "brownian-identity" => {
            check_params(name, params, &["T", "x0"])?;
            Ok(ProblemSpec {
                name: name.into(),
                horizon,
                drift: zero2.clone(),
                diffusion: one2,
                generator: zero4.clone(),
                terminal: Arc::new(|x| x),
                drift_dx: Some(zero2.clone()),
                diffusion_dx: Some(zero2),
                terminal_d1: Some(Arc::new(|_| 1.0)),
                terminal_d2: Some(Arc::new(|_| 0.0)),
                generator_dx: Some(zero4.clone()),
                generator_dy: Some(zero4.clone()),
                generator_dz: Some(zero4),
                alpha: 1.0,
                p0: 0,
                delta: 1.0,
                lf: 0.0,
                cg: 1.0,
                kf: 0.0,
                start_hint,
                reference: Some(ClosedFormReference::exact(
                    Arc::new(|_, x| x),
                    Arc::new(|_, _| 1.0),
                )),
            })
        }
        "brownian-square" => {
            check_params(name, params, &["T", "x0"])?;
            Ok(ProblemSpec {
                name: name.into(),
                horizon,
                drift: zero2.clone(),
                diffusion: one2,
                generator: zero4.clone(),
                terminal: Arc::new(|x| x * x),
                drift_dx: Some(zero2.clone()),
                diffusion_dx: Some(zero2),
                terminal_d1: Some(Arc::new(|x| 2.0 * x)),
                terminal_d2: Some(Arc::new(|_| 2.0)),
                generator_dx: Some(zero4.clone()),
                generator_dy: Some(zero4.clone()),
                generator_dz: Some(zero4),
                alpha: 1.0,
                p0: 1,
                delta: 1.0,
                lf: 0.0,
                cg: 2.0,
                kf: 0.0,
                start_hint,
                reference: Some(ClosedFormReference::exact(
                    Arc::new(move |t, x| x * x + (horizon - t)),
                    Arc::new(|_, x| 2.0 * x),
                )),
            })
        }
        "exp-diffusion" => {
            // Exponentially reverting drift b = -kappa x with unit diffusion
            // and linear payoff: y(t,x) = x e^{-kappa (T-t)}.
            check_params(name, params, &["T", "x0", "kappa"])?;
            let kappa = param(params, "kappa", 0.5);
            Ok(ProblemSpec {
                name: name.into(),
                horizon,
                drift: Arc::new(move |_, x| -kappa * x),
                diffusion: one2,
                generator: zero4.clone(),
                terminal: Arc::new(|x| x),
                drift_dx: Some(Arc::new(move |_, _| -kappa)),
                diffusion_dx: Some(zero2),
                terminal_d1: Some(Arc::new(|_| 1.0)),
                terminal_d2: Some(Arc::new(|_| 0.0)),
                generator_dx: Some(zero4.clone()),
                generator_dy: Some(zero4.clone()),
                generator_dz: Some(zero4),
                alpha: 1.0,
                p0: 0,
                delta: 1.0,
                lf: 0.0,
                cg: 1.0,
                kf: 0.0,
                start_hint,
                reference: Some(ClosedFormReference::exact(
                    Arc::new(move |t, x| x * (-kappa * (horizon - t)).exp()),
                    Arc::new(move |t, _| (-kappa * (horizon - t)).exp()),
                )),
            })
        }
        "discounted-bond" => {
            check_params(name, params, &["T", "x0", "r"])?;
            let r = param(params, "r", 0.05);
            Ok(ProblemSpec {
                name: name.into(),
                horizon,
                drift: zero2.clone(),
                diffusion: one2,
                generator: Arc::new(move |_, _, y, _| -r * y),
                terminal: Arc::new(|_| 1.0),
                drift_dx: Some(zero2.clone()),
                diffusion_dx: Some(zero2),
                terminal_d1: Some(Arc::new(|_| 0.0)),
                terminal_d2: Some(Arc::new(|_| 0.0)),
                generator_dx: Some(zero4.clone()),
                generator_dy: Some(Arc::new(move |_, _, _, _| -r)),
                generator_dz: Some(zero4),
                alpha: 1.0,
                p0: 0,
                delta: 1.0,
                lf: r.abs(),
                cg: 1.0,
                kf: 0.0,
                start_hint,
                reference: Some(ClosedFormReference::exact(
                    Arc::new(move |t, _| (-r * (horizon - t)).exp()),
                    Arc::new(|_, _| 0.0),
                )),
            })
        }
        "lipschitz-call" => {
            // Bachelier call on x + B: the payoff kink keeps g outside C^1.
            check_params(name, params, &["T", "x0", "strike"])?;
            let strike = param(params, "strike", 0.0);
            Ok(ProblemSpec {
                name: name.into(),
                horizon,
                drift: zero2.clone(),
                diffusion: one2,
                generator: zero4.clone(),
                terminal: Arc::new(move |x| (x - strike).max(0.0)),
                drift_dx: Some(zero2.clone()),
                diffusion_dx: Some(zero2),
                terminal_d1: Some(Arc::new(move |x| if x > strike { 1.0 } else { 0.0 })),
                terminal_d2: None,
                generator_dx: Some(zero4.clone()),
                generator_dy: Some(zero4.clone()),
                generator_dz: Some(zero4),
                alpha: 1.0,
                p0: 0,
                delta: 1.0,
                lf: 0.0,
                cg: 1.0,
                kf: 0.0,
                start_hint,
                reference: Some(ClosedFormReference::exact(
                    Arc::new(move |t, x| {
                        let s = (horizon - t).sqrt();
                        if s == 0.0 {
                            return (x - strike).max(0.0);
                        }
                        let d = (x - strike) / s;
                        (x - strike) * normal_cdf(d) + s * normal_pdf(d)
                    }),
                    Arc::new(move |t, x| {
                        let s = (horizon - t).sqrt();
                        if s == 0.0 {
                            return if x > strike { 1.0 } else { 0.0 };
                        }
                        normal_cdf((x - strike) / s)
                    }),
                )),
            })
        }
        "sine-coeffs" => {
            check_params(name, params, &["T", "x0", "b-amp", "sigma-amp"])?;
            let ba = param(params, "b-amp", 0.1);
            let sa = param(params, "sigma-amp", 0.25);
            let delta = 0.5;
            if 1.0 - sa.abs() < delta {
                return Err(Error::Validation(format!(
                    "sine-coeffs: sigma-amp = {sa} lets sigma fall below delta = {delta}"
                )));
            }
            Ok(ProblemSpec {
                name: name.into(),
                horizon,
                drift: Arc::new(move |_, x| ba * x.sin()),
                diffusion: Arc::new(move |_, x| 1.0 + sa * x.cos()),
                generator: Arc::new(|_, _, y, z| -0.2 * y + 0.1 * z),
                terminal: Arc::new(|x| x.sin()),
                drift_dx: Some(Arc::new(move |_, x| ba * x.cos())),
                diffusion_dx: Some(Arc::new(move |_, x| -sa * x.sin())),
                terminal_d1: Some(Arc::new(|x| x.cos())),
                terminal_d2: Some(Arc::new(|x| -x.sin())),
                generator_dx: Some(zero4),
                generator_dy: Some(Arc::new(|_, _, _, _| -0.2)),
                generator_dz: Some(Arc::new(|_, _, _, _| 0.1)),
                alpha: 1.0,
                p0: 0,
                delta,
                lf: 0.3,
                cg: 1.0,
                kf: 0.0,
                start_hint,
                // PDE-numeric reference; the harness attaches it on a domain
                // sized to the experiment via continuum::pde_reference_solver.
                reference: None,
            })
        }
        _ => Err(Error::UnknownProblem { name: name.into(), known: REGISTRY.join(", ") }),
    }
}

/// Evaluate the reference solution `(y(t,x), z(t,x))`.
///
/// At `t = T` the pair is `(g(x), sigma(T,x) g'(x))` when `g'` is available,
/// which avoids the degenerate limit of quadrature references.
pub fn reference_solution(p: &ProblemSpec, t: f64, x: f64) -> Result<(f64, f64)> {
    if t < 0.0 || t > p.horizon {
        return Err(Error::Domain(format!(
            "reference query at t = {t} outside [0, {}]",
            p.horizon
        )));
    }
    if t == p.horizon {
        if let Some(g1) = &p.terminal_d1 {
            return Ok((p.g(x), p.sigma(t, x) * g1(x)));
        }
    }
    let r = p.reference.as_ref().ok_or_else(|| Error::NoReference(p.name.clone()))?;
    Ok(((r.y)(t, x), (r.z)(t, x)))
}

/// One check failure found by [`validate_problem`].
#[derive(Debug, Clone)]
pub struct Violation {
    pub check: String,
    pub t: f64,
    pub x: f64,
    pub detail: String,
}

/// Outcome of the spot checks on a problem instance.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub pass: bool,
    pub probes: usize,
    pub violations: Vec<Violation>,
}

const DERIV_STEP: f64 = 1e-5;
const DERIV_RTOL: f64 = 1e-5;

fn deriv_mismatch(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() > DERIV_RTOL * scale
}

/// Spot-check a problem on random probe points: ellipticity, derivative
/// callbacks against central differences, driver Lipschitz quotients against
/// the declared bound, and reference consistency. Failures are collected in
/// the report rather than returned as errors.
pub fn validate_problem(p: &ProblemSpec, probes: usize, seed: u64) -> ValidationReport {
    let mut violations = Vec::new();
    let hw = p.probe_halfwidth();
    let x_lo = p.start_hint - hw;
    let x_hi = p.start_hint + hw;
    let mut idx = 0u64;
    let mut draw = |scale_lo: f64, scale_hi: f64| {
        let u = rng::uniform(seed, Domain::Probe, 0, idx);
        idx += 1;
        scale_lo + (scale_hi - scale_lo) * u
    };

    for _ in 0..probes {
        let t = draw(0.0, p.horizon);
        let x = draw(x_lo, x_hi);
        let y = draw(-hw, hw);
        let z = draw(-hw, hw);

        let s = p.sigma(t, x);
        if !(s >= p.delta) {
            violations.push(Violation {
                check: "ellipticity".into(),
                t,
                x,
                detail: format!("sigma = {s} below delta = {}", p.delta),
            });
        }

        if let Some(cb) = &p.drift_dx {
            let fd = (p.b(t, x + DERIV_STEP) - p.b(t, x - DERIV_STEP)) / (2.0 * DERIV_STEP);
            if deriv_mismatch(cb(t, x), fd) {
                violations.push(Violation {
                    check: "drift-derivative".into(),
                    t,
                    x,
                    detail: format!("b_x = {} vs central difference {fd}", cb(t, x)),
                });
            }
        }
        if let Some(cb) = &p.diffusion_dx {
            let fd = (p.sigma(t, x + DERIV_STEP) - p.sigma(t, x - DERIV_STEP)) / (2.0 * DERIV_STEP);
            if deriv_mismatch(cb(t, x), fd) {
                violations.push(Violation {
                    check: "diffusion-derivative".into(),
                    t,
                    x,
                    detail: format!("sigma_x = {} vs central difference {fd}", cb(t, x)),
                });
            }
        }
        if let Some(cb) = &p.terminal_d1 {
            let fd = (p.g(x + DERIV_STEP) - p.g(x - DERIV_STEP)) / (2.0 * DERIV_STEP);
            if deriv_mismatch(cb(x), fd) {
                violations.push(Violation {
                    check: "terminal-derivative".into(),
                    t,
                    x,
                    detail: format!("g' = {} vs central difference {fd}", cb(x)),
                });
            }
            if let Some(cb2) = &p.terminal_d2 {
                let fd2 = (cb(x + DERIV_STEP) - cb(x - DERIV_STEP)) / (2.0 * DERIV_STEP);
                if deriv_mismatch(cb2(x), fd2) {
                    violations.push(Violation {
                        check: "terminal-second-derivative".into(),
                        t,
                        x,
                        detail: format!("g'' = {} vs central difference {fd2}", cb2(x)),
                    });
                }
            }
        }
        for (label, cb) in [
            ("driver-dx", &p.generator_dx),
            ("driver-dy", &p.generator_dy),
            ("driver-dz", &p.generator_dz),
        ] {
            if let Some(cb) = cb {
                let e = DERIV_STEP;
                let fd = match label {
                    "driver-dx" => (p.f(t, x + e, y, z) - p.f(t, x - e, y, z)) / (2.0 * e),
                    "driver-dy" => (p.f(t, x, y + e, z) - p.f(t, x, y - e, z)) / (2.0 * e),
                    _ => (p.f(t, x, y, z + e) - p.f(t, x, y, z - e)) / (2.0 * e),
                };
                if deriv_mismatch(cb(t, x, y, z), fd) {
                    violations.push(Violation {
                        check: label.into(),
                        t,
                        x,
                        detail: format!("callback {} vs central difference {fd}", cb(t, x, y, z)),
                    });
                }
            }
        }

        // Lipschitz quotient of the driver against declared lf.
        let t2 = draw(0.0, p.horizon);
        let x2 = draw(x_lo, x_hi);
        let y2 = draw(-hw, hw);
        let z2 = draw(-hw, hw);
        let num = (p.f(t, x, y, z) - p.f(t2, x2, y2, z2)).abs();
        let den = (t - t2).abs().sqrt() + (x - x2).abs() + (y - y2).abs() + (z - z2).abs();
        if den > 1e-12 && num / den > p.lf * 1.02 + 1e-12 {
            violations.push(Violation {
                check: "driver-lipschitz".into(),
                t,
                x,
                detail: format!("quotient {} exceeds lf = {}", num / den, p.lf),
            });
        }

        if let Some(r) = &p.reference {
            let gy = (r.y)(p.horizon, x);
            if (gy - p.g(x)).abs() > 1e-10 * (1.0 + p.g(x).abs()) {
                violations.push(Violation {
                    check: "reference-terminal".into(),
                    t: p.horizon,
                    x,
                    detail: format!("y(T,x) = {gy} vs g(x) = {}", p.g(x)),
                });
            }
            if r.kind == ReferenceKind::ExactAnalytic {
                let dx = 1e-5 * (1.0 + x.abs());
                let uy = ((r.y)(t, x + dx) - (r.y)(t, x - dx)) / (2.0 * dx);
                let zfd = p.sigma(t, x) * uy;
                let zref = (r.z)(t, x);
                let scale = zref.abs().max(zfd.abs()).max(1.0);
                if (zref - zfd).abs() > 1e-5 * scale {
                    violations.push(Violation {
                        check: "reference-z-consistency".into(),
                        t,
                        x,
                        detail: format!("z = {zref} vs sigma d_x y = {zfd}"),
                    });
                }
            }
        }
    }

    ValidationReport { pass: violations.is_empty(), probes, violations }
}

/// Gauss-Hermite nodes and weights for `int e^{-x^2} f(x) dx`.
///
/// Newton iteration on the recurrence-evaluated polynomial, largest root
/// first, with the usual asymptotic initial guesses.
pub fn gauss_hermite(n: usize) -> (Arc<Vec<f64>>, Arc<Vec<f64>>) {
    assert!(n >= 2);
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let pim4 = 0.751125544464942_f64; // pi^{-1/4}
    let m = (n + 1) / 2;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * xs[0],
            3 => 1.91 * z - 0.91 * xs[1],
            _ => 2.0 * z - xs[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        xs[i] = z;
        xs[n - 1 - i] = -z;
        ws[i] = 2.0 / (pp * pp);
        ws[n - 1 - i] = ws[i];
    }
    (Arc::new(xs), Arc::new(ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn build(name: &str) -> ProblemSpec {
        builtin_problem(name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn registry_instantiates() {
        for name in REGISTRY {
            build(name);
        }
    }

    #[test]
    fn unknown_name_lists_registry() {
        let err = builtin_problem("nope", &BTreeMap::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("brownian-square") && msg.contains("sine-coeffs"));
    }

    #[test]
    fn unknown_param_rejected() {
        let mut params = BTreeMap::new();
        params.insert("volatility".to_string(), 2.0);
        assert!(builtin_problem("brownian-square", &params).is_err());
    }

    #[test]
    fn sine_coeffs_ellipticity_guard() {
        let mut params = BTreeMap::new();
        params.insert("sigma-amp".to_string(), 0.9);
        assert!(matches!(
            builtin_problem("sine-coeffs", &params),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn brownian_square_reference_values() {
        let p = build("brownian-square");
        let (y, z) = reference_solution(&p, 0.0, 2.0).unwrap();
        assert_relative_eq!(y, 5.0, max_relative = 1e-14);
        assert_relative_eq!(z, 4.0, max_relative = 1e-14);
    }

    #[test]
    fn discounted_bond_reference_values() {
        let mut params = BTreeMap::new();
        params.insert("r".to_string(), 0.05);
        let p = builtin_problem("discounted-bond", &params).unwrap();
        let (y, z) = reference_solution(&p, 0.0, 3.7).unwrap();
        assert_relative_eq!(y, (-0.05f64).exp(), max_relative = 1e-14);
        assert_eq!(z, 0.0);
    }

    #[test]
    fn terminal_time_reference_uses_g() {
        for name in REGISTRY {
            let p = build(name);
            if p.reference.is_none() && p.terminal_d1.is_none() {
                continue;
            }
            for x in [-1.3, 0.0, 0.8] {
                let (y, z) = reference_solution(&p, p.horizon, x).unwrap();
                assert_eq!(y, p.g(x));
                if let Some(g1) = &p.terminal_d1 {
                    assert_eq!(z, p.sigma(p.horizon, x) * g1(x));
                }
            }
        }
    }

    #[test]
    fn reference_terminal_identity_at_random_points() {
        for name in ["brownian-identity", "brownian-square", "exp-diffusion", "discounted-bond"] {
            let p = build(name);
            let r = p.reference.as_ref().unwrap();
            for i in 0..100 {
                let x = -6.0 + 12.0 * rng::uniform(5, Domain::Probe, 9, i);
                assert_eq!((r.y)(p.horizon, x), p.g(x), "{name} at x = {x}");
            }
        }
    }

    #[test]
    fn missing_reference_is_an_error() {
        let p = build("sine-coeffs");
        assert!(matches!(reference_solution(&p, 0.3, 0.0), Err(Error::NoReference(_))));
    }

    #[test]
    fn out_of_range_time_is_an_error() {
        let p = build("brownian-square");
        assert!(matches!(reference_solution(&p, 1.5, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn reference_is_deterministic() {
        let p = build("lipschitz-call");
        let a = reference_solution(&p, 0.37, 0.21).unwrap();
        let b = reference_solution(&p, 0.37, 0.21).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn validation_passes_on_registry() {
        for name in REGISTRY {
            let report = validate_problem(&build(name), 1000, 31);
            assert!(
                report.pass,
                "{name}: {:?}",
                report.violations.first()
            );
        }
    }

    #[test]
    fn validation_catches_degenerate_sigma() {
        let mut p = build("brownian-identity");
        p.diffusion = Arc::new(|_, x| x);
        p.diffusion_dx = Some(Arc::new(|_, _| 1.0));
        p.delta = 0.1;
        p.reference = None;
        let report = validate_problem(&p, 1000, 7);
        assert!(!report.pass);
        assert!(report.violations.iter().any(|v| v.check == "ellipticity"));
    }

    #[test]
    fn quadrature_matches_brownian_square() {
        let p = build("brownian-square");
        let q = ClosedFormReference::quadrature(p.terminal.clone(), 0.0, 1.0, p.horizon, 64);
        for (t, x) in [(0.0, 2.0), (0.25, -1.0), (0.9, 0.5)] {
            let (ye, ze) = reference_solution(&p, t, x).unwrap();
            assert_relative_eq!((q.y)(t, x), ye, max_relative = 1e-10);
            assert_relative_eq!((q.z)(t, x), ze, max_relative = 1e-6);
        }
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (xs, ws) = gauss_hermite(64);
        let total: f64 = ws.iter().sum();
        assert_relative_eq!(total, std::f64::consts::PI.sqrt(), max_relative = 1e-12);
        // second moment of e^{-x^2}: sqrt(pi)/2
        let m2: f64 = xs.iter().zip(ws.iter()).map(|(x, w)| w * x * x).sum();
        assert_relative_eq!(m2, std::f64::consts::PI.sqrt() / 2.0, max_relative = 1e-12);
    }
}
