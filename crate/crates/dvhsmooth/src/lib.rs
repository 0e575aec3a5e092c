//! Dose-volume objectives over analytic dose fields, with smoothness
//! diagnostics for quasi-Newton optimization.
//!
//! The crate models a plan-optimization objective as a weighted sum of
//! one-sided quadratic penalties on dose-volume and equivalent-uniform-dose
//! constraints, evaluated on smooth parametric dose fields (sums of
//! inverse-quadratic peaks). On top of that it provides:
//!
//! - [`dose_model`]: field evaluation with exact spatial/parameter
//!   derivatives, critical-point search and classification, and
//!   continuation of critical values along parameter paths;
//! - [`histogram`]: volume functions / DVH curves by deterministic
//!   quadrature, plus the local volume functions of the quadratic
//!   standard forms;
//! - [`eud`]: the generalized power-mean dose and its analytic parameter
//!   gradient;
//! - [`objective`]: penalty assembly and the closed-form one-parameter
//!   objectives `F1` (smooth) and `F2` (continuously differentiable but
//!   with an unbounded one-sided second derivative at 0);
//! - [`optimizer`]: a 1-D Newton driver and a BFGS minimizer, both with
//!   full iterate traces and a convergence-rate classifier;
//! - [`smoothness`]: locating parameter values where a constraint dose
//!   equals a critical value of the field, and measuring one-sided
//!   differentiability and Newton step-scaling exponents there;
//! - [`experiment`]: a config-driven experiment runner backing the
//!   `dvhsmooth` binary (`run` / `validate` subcommands).
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod dose_model;
pub mod eud;
pub mod experiment;
pub mod histogram;
pub mod objective;
pub mod optimizer;
pub mod smoothness;

use std::sync::Once;

/// Side of a one-sided limit or derivative convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

static THREAD_POOL_INIT: Once = Once::new();

/// Honors the `DVHSMOOTH_THREADS` cap on internal parallelism.
///
/// Called lazily before the first parallel quadrature. All parallel
/// reductions in this crate use fixed summation orders, so results do not
/// depend on the thread count; the cap only limits CPU usage.
pub(crate) fn init_parallelism() {
    THREAD_POOL_INIT.call_once(|| {
        if let Ok(raw) = std::env::var("DVHSMOOTH_THREADS") {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

/// Formats a float with 17 significant digits, lowercase scientific.
///
/// This is the fixed wire format of every CSV and JSON number the
/// experiment runner emits; it round-trips `f64` exactly.
pub fn fmt_float(x: f64) -> String {
    // Normalize -0.0 so byte-identical output does not depend on sign of zero.
    let x = x + 0.0;
    format!("{:.16e}", x)
}
