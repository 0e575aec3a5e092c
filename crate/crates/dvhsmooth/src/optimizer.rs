//! Newton and BFGS drivers with full iterate traces.
//!
//! `newton1d_step` is the bare map `phi(s) = s - F'(s)/F''(s)`. The runner
//! `newton1d_run` applies it whenever the curvature is positive and the step
//! passes a sufficient-decrease check, and otherwise falls back to a
//! backtracked descent step; that keeps the closed-form reproduction runs on
//! the bare map while still making progress through concave stretches.
//! `bfgs_run` is a dense BFGS with a strong-Wolfe line search.

use std::io::Write;

use thiserror::Error;

use crate::objective::Scalar1d;
use crate::Side;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("second derivative {d2:.3e} at sigma = {sigma} is below the division guard")]
    IllConditionedStep { sigma: f64, d2: f64 },
    #[error("non-finite objective or gradient at {point:?}")]
    NumericalDomain { point: Vec<f64> },
    #[error("trace too short to classify (needs at least {needed} usable iterates, got {got})")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("start point {0} is outside the objective domain")]
    OutOfDomain(f64),
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIter,
    Stalled,
    SpuriousFixedPoint,
    SeamCrossed,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIter => "max-iter",
            Termination::Stalled => "stalled",
            Termination::SpuriousFixedPoint => "spurious-fixed-point",
            Termination::SeamCrossed => "seam-crossed",
        }
    }
}

/// Full iterate history of a run.
///
/// `values` and `derivative_norms` align with `iterates`; `step_sizes[k]` is
/// the distance from iterate `k` to `k + 1`, so it is one entry shorter.
#[derive(Debug, Clone)]
pub struct Trace {
    pub iterates: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub derivative_norms: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub termination: Termination,
    /// Set when a step crossed a flagged point or a penalty seam.
    pub seam_crossed: bool,
}

impl Trace {
    fn new(dim: usize) -> Self {
        let _ = dim;
        Self {
            iterates: Vec::new(),
            values: Vec::new(),
            derivative_norms: Vec::new(),
            step_sizes: Vec::new(),
            termination: Termination::MaxIter,
            seam_crossed: false,
        }
    }

    fn push(&mut self, x: &[f64], value: f64, dnorm: f64) {
        if let Some(prev) = self.iterates.last() {
            let step = prev
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            self.step_sizes.push(step);
        }
        self.iterates.push(x.to_vec());
        self.values.push(value);
        self.derivative_norms.push(dnorm);
    }

    pub fn dim(&self) -> usize {
        self.iterates.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn final_iterate(&self) -> &[f64] {
        self.iterates.last().expect("trace is never empty")
    }

    /// Structural invariants: aligned lengths and recomputable step sizes.
    pub fn validate(&self) -> bool {
        self.values.len() == self.iterates.len()
            && self.derivative_norms.len() == self.iterates.len()
            && self.step_sizes.len() + 1 == self.iterates.len()
            && self.step_sizes.iter().enumerate().all(|(k, s)| {
                let d = self.iterates[k]
                    .iter()
                    .zip(&self.iterates[k + 1])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (d - s).abs() <= 1e-12 * (1.0 + s.abs())
            })
    }

    /// CSV rows: iterate components, value, gradient norm, outgoing step
    /// (empty on the last row), and the termination label.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        write!(w, "iter")?;
        for j in 0..self.dim() {
            write!(w, ",sigma_{j}")?;
        }
        writeln!(w, ",value,grad_norm,step,termination")?;
        for (k, x) in self.iterates.iter().enumerate() {
            write!(w, "{k}")?;
            for xi in x {
                write!(w, ",{}", crate::fmt_float(*xi))?;
            }
            write!(
                w,
                ",{},{}",
                crate::fmt_float(self.values[k]),
                crate::fmt_float(self.derivative_norms[k])
            )?;
            match self.step_sizes.get(k) {
                Some(s) => write!(w, ",{}", crate::fmt_float(*s))?,
                None => write!(w, ",")?,
            }
            writeln!(w, ",{}", self.termination.as_str())?;
        }
        Ok(())
    }
}

/// The bare Newton map `phi(s) = s - F'(s) / F''(s)`.
///
/// At a flagged point the one-sided convention decides `F''`; an infinite
/// one-sided curvature therefore yields a zero step, which is exactly the
/// fixed point the diagnostics look for. A curvature below
/// `1e-14 * (1 + |F'|)` in magnitude is an error.
pub fn newton1d_step(
    obj: &dyn Scalar1d,
    sigma: f64,
    convention: Side,
) -> Result<f64, OptimizerError> {
    let d1 = obj.first_derivative(sigma);
    let d2 = obj.second_derivative(sigma, convention);
    if d2.is_nan() || (d2.is_finite() && d2.abs() < division_guard(d1)) {
        return Err(OptimizerError::IllConditionedStep { sigma, d2 });
    }
    Ok(sigma - d1 / d2)
}

#[inline]
fn division_guard(d1: f64) -> f64 {
    1e-14 * (1.0 + d1.abs())
}

/// Options for [`newton1d_run`].
#[derive(Debug, Clone)]
pub struct Newton1dOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// One-sided convention used at flagged points.
    pub convention: Side,
    /// Terminate with [`Termination::SeamCrossed`] when a step crosses a
    /// flagged point, instead of continuing on the other branch.
    pub stop_at_flag_crossing: bool,
}

impl Default for Newton1dOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
            convention: Side::Left,
            stop_at_flag_crossing: false,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const FALLBACK_DELTA: f64 = 1.0;
const MAX_BACKTRACKS: usize = 60;

fn crosses_flag(obj: &dyn Scalar1d, from: f64, to: f64) -> bool {
    obj.flagged_points()
        .iter()
        .any(|&f| (from - f) * (to - f) < 0.0)
}

/// Newton descent on a scalar objective with iterate tracing.
///
/// Positive, well-conditioned curvature takes the bare Newton step; zero or
/// negative curvature falls back to a unit descent step. Every step is
/// backtracked until it satisfies a sufficient decrease, stays inside the
/// domain, and is finite. Termination is labeled `spurious-fixed-point` when
/// the iteration pins a flagged point whose gradient is still large.
pub fn newton1d_run(
    obj: &dyn Scalar1d,
    sigma0: f64,
    opts: &Newton1dOptions,
) -> Result<Trace, OptimizerError> {
    let (dom_lo, dom_hi) = obj.domain();
    if !sigma0.is_finite() || sigma0 <= dom_lo || sigma0 >= dom_hi {
        return Err(OptimizerError::OutOfDomain(sigma0));
    }
    let mut trace = Trace::new(1);
    let mut sigma = sigma0;
    let mut value = obj.value(sigma);
    let mut d1 = obj.first_derivative(sigma);
    if !value.is_finite() || !d1.is_finite() {
        return Err(OptimizerError::NumericalDomain { point: vec![sigma] });
    }
    trace.push(&[sigma], value, d1.abs());

    loop {
        if d1.abs() < opts.tol {
            trace.termination = Termination::Converged;
            return Ok(trace);
        }
        if trace.len() > opts.max_iter {
            trace.termination = Termination::MaxIter;
            return Ok(trace);
        }

        let d2 = obj.second_derivative(sigma, opts.convention);
        let near_flag = obj
            .flagged_points()
            .iter()
            .any(|&f| (sigma - f).abs() <= 1e-9 * (1.0 + f.abs()));
        let direction = if d2 == f64::INFINITY {
            // Infinite one-sided curvature: the bare map does not move.
            trace.termination = if near_flag {
                Termination::SpuriousFixedPoint
            } else {
                Termination::Stalled
            };
            return Ok(trace);
        } else if d2 > division_guard(d1) {
            -d1 / d2
        } else {
            -d1.signum() * FALLBACK_DELTA
        };

        // Backtracking acceptance: finite, in-domain, sufficient decrease.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = sigma + t * direction;
            if trial > dom_lo && trial < dom_hi {
                let f_trial = obj.value(trial);
                if f_trial.is_finite() && f_trial <= value + ARMIJO_C * t * d1 * direction {
                    accepted = Some((trial, f_trial));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, f_next)) = accepted else {
            trace.termination = Termination::Stalled;
            return Ok(trace);
        };

        let crossed = crosses_flag(obj, sigma, next);
        if crossed {
            trace.seam_crossed = true;
        }
        let step = (next - sigma).abs();
        let d1_next = obj.first_derivative(next);
        if !d1_next.is_finite() || !f_next.is_finite() {
            return Err(OptimizerError::NumericalDomain { point: vec![next] });
        }
        trace.push(&[next], f_next, d1_next.abs());
        sigma = next;
        value = f_next;
        d1 = d1_next;

        if crossed && opts.stop_at_flag_crossing {
            trace.termination = Termination::SeamCrossed;
            return Ok(trace);
        }
        if step <= 1e-15 * (1.0 + sigma.abs()) && d1.abs() >= opts.tol {
            let near = obj
                .flagged_points()
                .iter()
                .any(|&f| (sigma - f).abs() <= 1e-9 * (1.0 + f.abs()));
            trace.termination = if near {
                Termination::SpuriousFixedPoint
            } else {
                Termination::Stalled
            };
            return Ok(trace);
        }
    }
}

/// Options for [`bfgs_run`].
#[derive(Debug, Clone)]
pub struct QuasiNewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Relative step for callers that build finite-difference gradients.
    pub fd_step: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// The inverse-Hessian update is skipped when `y.s <= tol * |y| |s|`.
    pub curvature_skip_tol: f64,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 200,
            fd_step: 1e-3,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            curvature_skip_tol: 1e-10,
        }
    }
}

impl QuasiNewtonOptions {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.grad_tol > 0.0) {
            return Err(OptimizerError::InvalidOptions("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(OptimizerError::InvalidOptions("max_iter must be at least 1".into()));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(OptimizerError::InvalidOptions(
                "need 0 < c1 < c2 < 1 for the Wolfe constants".into(),
            ));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct LineSearchResult {
    t: f64,
    f: f64,
    g: Vec<f64>,
}

/// Strong Wolfe line search (bracket and zoom with quadratic interpolation).
/// Non-finite trial values are treated as "too far" and shrink the bracket.
fn strong_wolfe<F, G>(
    f: &F,
    grad: &G,
    x: &[f64],
    d: &[f64],
    f0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
) -> Option<LineSearchResult>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let eval = |t: f64| -> (f64, Vec<f64>, f64) {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        let ft = f(&xt);
        let gt = grad(&xt);
        let dphit = dot(&gt, d);
        (ft, gt, dphit)
    };

    let zoom = |mut lo: f64, mut f_lo: f64, mut dphi_lo: f64, mut hi: f64, mut f_hi: f64| {
        for _ in 0..40 {
            // Quadratic interpolation through (lo, f_lo, dphi_lo) and (lo, f_hi),
            // safeguarded toward bisection.
            let dt = hi - lo;
            let denom = 2.0 * (f_hi - f_lo - dphi_lo * dt);
            let mut t = if denom.abs() > 1e-300 && f_hi.is_finite() {
                lo - dphi_lo * dt * dt / denom
            } else {
                lo + 0.5 * dt
            };
            let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
            let margin = 0.1 * (b - a);
            if !(t > a + margin && t < b - margin) {
                t = lo + 0.5 * dt;
            }
            let (ft, gt, dphit) = eval(t);
            if !ft.is_finite() || ft > f0 + c1 * t * dphi0 || ft >= f_lo {
                hi = t;
                f_hi = ft;
            } else {
                if dphit.abs() <= -c2 * dphi0 {
                    return Some(LineSearchResult { t, f: ft, g: gt });
                }
                if dphit * (hi - lo) >= 0.0 {
                    hi = lo;
                    f_hi = f_lo;
                }
                lo = t;
                f_lo = ft;
                dphi_lo = dphit;
            }
            if (hi - lo).abs() < 1e-16 * (1.0 + lo.abs()) {
                break;
            }
        }
        if f_lo < f0 {
            let (ft, gt, _) = eval(lo);
            return Some(LineSearchResult { t: lo, f: ft, g: gt });
        }
        None
    };

    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut dphi_prev = dphi0;
    let mut t = 1.0;
    for i in 0..30 {
        let (ft, gt, dphit) = eval(t);
        if !ft.is_finite() {
            // Walked out of the numerical domain; search inside [t_prev, t].
            return zoom(t_prev, f_prev, dphi_prev, t, ft);
        }
        if ft > f0 + c1 * t * dphi0 || (i > 0 && ft >= f_prev) {
            return zoom(t_prev, f_prev, dphi_prev, t, ft);
        }
        if dphit.abs() <= -c2 * dphi0 {
            return Some(LineSearchResult { t, f: ft, g: gt });
        }
        if dphit >= 0.0 {
            return zoom(t, ft, dphit, t_prev, f_prev);
        }
        // Next trial: secant step toward phi' = 0 when the slope is
        // recovering (exact for quadratics), otherwise doubling.
        let t_next = if dphit > dphi0 {
            let secant = t * dphi0 / (dphi0 - dphit);
            if secant.is_finite() && secant > 1.5 * t && secant < 100.0 * t {
                secant
            } else {
                2.0 * t
            }
        } else {
            2.0 * t
        };
        t_prev = t;
        f_prev = ft;
        dphi_prev = dphit;
        t = t_next;
    }
    None
}

/// Dense BFGS with a strong-Wolfe line search.
///
/// The inverse Hessian starts as the identity scaled by the first gradient
/// norm and is updated only when the curvature condition holds. Terminates
/// on the gradient norm, the iteration cap, or line-search failure
/// (`stalled`); objective values along the trace are strictly decreasing.
pub fn bfgs_run<F, G>(
    f: F,
    grad: G,
    sigma0: &[f64],
    opts: &QuasiNewtonOptions,
) -> Result<Trace, OptimizerError>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    opts.validate()?;
    let m = sigma0.len();
    let mut x = sigma0.to_vec();
    let mut fx = f(&x);
    let mut gx = grad(&x);
    if !fx.is_finite() || gx.iter().any(|v| !v.is_finite()) || gx.len() != m {
        return Err(OptimizerError::NumericalDomain { point: x });
    }

    let mut trace = Trace::new(m);
    trace.push(&x, fx, norm(&gx));

    // Inverse Hessian approximation, dense row-major.
    let g0_norm = norm(&gx).max(1e-12);
    let mut h: Vec<f64> = (0..m * m)
        .map(|i| if i % (m + 1) == 0 { 1.0 / g0_norm } else { 0.0 })
        .collect();

    for _ in 0..opts.max_iter {
        if norm(&gx) < opts.grad_tol {
            trace.termination = Termination::Converged;
            return Ok(trace);
        }

        let mut d: Vec<f64> = (0..m)
            .map(|i| -(0..m).map(|j| h[i * m + j] * gx[j]).sum::<f64>())
            .collect();
        let mut dphi0 = dot(&d, &gx);
        if dphi0 >= 0.0 {
            // Lost positive definiteness; restart from the scaled identity.
            let scale = 1.0 / norm(&gx).max(1e-12);
            h = (0..m * m)
                .map(|i| if i % (m + 1) == 0 { scale } else { 0.0 })
                .collect();
            d = gx.iter().map(|v| -v * scale).collect();
            dphi0 = dot(&d, &gx);
            if dphi0 >= 0.0 {
                trace.termination = Termination::Stalled;
                return Ok(trace);
            }
        }

        let Some(ls) = strong_wolfe(&f, &grad, &x, &d, fx, dphi0, opts.wolfe_c1, opts.wolfe_c2)
        else {
            trace.termination = Termination::Stalled;
            return Ok(trace);
        };
        if ls.g.iter().any(|v| !v.is_finite()) || !ls.f.is_finite() {
            return Err(OptimizerError::NumericalDomain {
                point: x.iter().zip(&d).map(|(xi, di)| xi + ls.t * di).collect(),
            });
        }

        let s: Vec<f64> = d.iter().map(|di| ls.t * di).collect();
        let x_new: Vec<f64> = x.iter().zip(&s).map(|(xi, si)| xi + si).collect();
        let y: Vec<f64> = ls.g.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);

        trace.push(&x_new, ls.f, norm(&ls.g));

        if ys > opts.curvature_skip_tol * norm(&y) * norm(&s) {
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / ys;
            let hy: Vec<f64> = (0..m)
                .map(|i| (0..m).map(|j| h[i * m + j] * y[j]).sum::<f64>())
                .collect();
            let yhy = dot(&y, &hy);
            for i in 0..m {
                for j in 0..m {
                    h[i * m + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + rho * rho * yhy * s[i] * s[j]
                        + rho * s[i] * s[j];
                }
            }
        }

        x = x_new;
        fx = ls.f;
        gx = ls.g;
    }
    trace.termination = Termination::MaxIter;
    Ok(trace)
}

/// Convergence-rate label fitted from an iterate trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceClass {
    Quadratic,
    Superlinear,
    Linear,
    Sublinear,
    Stalled,
}

impl ConvergenceClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConvergenceClass::Quadratic => "quadratic",
            ConvergenceClass::Superlinear => "superlinear",
            ConvergenceClass::Linear => "linear",
            ConvergenceClass::Sublinear => "sublinear",
            ConvergenceClass::Stalled => "stalled",
        }
    }
}

/// Classifies the tail behaviour of the error sequence `e_k = |x_k - limit|`.
///
/// Without an explicit limit the final iterate stands in for it (and is
/// excluded from the sequence). Deterministic thresholds:
/// the per-triple order estimate `p = ln(e_{k+2}/e_{k+1}) / ln(e_{k+1}/e_k)`
/// is pooled by median over the last four triples; `p >= 1.8` is quadratic,
/// `p >= 1.2` superlinear; otherwise the median tail ratio decides between
/// sublinear (`> 0.95`) and linear. Non-decreasing errors are stalled.
pub fn convergence_classify(
    trace: &Trace,
    limit: Option<&[f64]>,
) -> Result<ConvergenceClass, OptimizerError> {
    if trace.len() < 5 {
        return Err(OptimizerError::InsufficientData {
            needed: 5,
            got: trace.len(),
        });
    }
    let (limit, usable): (Vec<f64>, &[Vec<f64>]) = match limit {
        Some(l) => (l.to_vec(), &trace.iterates[..]),
        None => (
            trace.final_iterate().to_vec(),
            &trace.iterates[..trace.len() - 1],
        ),
    };
    let floor = 1e-13 * (1.0 + norm(&limit));
    let mut errors = Vec::with_capacity(usable.len());
    for x in usable {
        let e = x
            .iter()
            .zip(&limit)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if e <= floor {
            break;
        }
        errors.push(e);
    }
    if errors.len() < 4 {
        return Err(OptimizerError::InsufficientData {
            needed: 4,
            got: errors.len(),
        });
    }

    let ratios: Vec<f64> = errors.windows(2).map(|w| w[1] / w[0]).collect();
    let tail_ratio = median(&ratios[ratios.len().saturating_sub(5)..]);
    if tail_ratio >= 1.0 {
        return Ok(ConvergenceClass::Stalled);
    }
    let mut orders = Vec::new();
    for w in errors.windows(3) {
        if w[1] < w[0] && w[2] < w[1] {
            orders.push((w[2] / w[1]).ln() / (w[1] / w[0]).ln());
        }
    }
    if orders.is_empty() {
        return Ok(ConvergenceClass::Stalled);
    }
    let p = median(&orders[orders.len().saturating_sub(4)..]);
    if p >= 1.8 {
        Ok(ConvergenceClass::Quadratic)
    } else if p >= 1.2 {
        Ok(ConvergenceClass::Superlinear)
    } else if tail_ratio > 0.95 {
        Ok(ConvergenceClass::Sublinear)
    } else {
        Ok(ConvergenceClass::Linear)
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
