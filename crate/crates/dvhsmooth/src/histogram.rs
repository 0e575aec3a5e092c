//! Volume functions and dose-volume histograms by deterministic quadrature.
//!
//! The reference quadrature is an indicator count over a midpoint grid:
//! cells whose midpoint satisfies `f >= h` are counted. That makes the
//! volume function monotone in `h` by construction and exactly reproducible,
//! at the price of an O(1/resolution) boundary error; tolerances elsewhere
//! are sized for that. Monte-Carlo sampling with a fixed seed is provided as
//! a cross-check.
//!
//! Also here: the local volume functions of the quadratic standard forms
//! `g(x) = sum_{i<=p} x_i^2 - sum_{i<=q} x_{p+i}^2`, whose one-sided
//! `|k|^(3/2)` behaviour at the critical value 0 is the kernel of every
//! smoothness diagnostic in this crate.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::dose_model::{DoseModelError, PeakFamily, PreparedField};

#[derive(Debug, Error)]
pub enum HistogramError {
    #[error(transparent)]
    DoseModel(#[from] DoseModelError),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("invalid quadrature: {0}")]
    InvalidQuadrature(String),
    #[error("dose grid must be strictly ascending")]
    UnsortedGrid,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("exponent fit failed: residual too large (r^2 = {r_squared})")]
    FitFailed { r_squared: f64 },
}

/// Integration / search domain with an exact volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    Box { lo: [f64; 3], hi: [f64; 3] },
    Ball { center: [f64; 3], radius: f64 },
}

impl Region {
    pub fn new_box(lo: [f64; 3], hi: [f64; 3]) -> Result<Self, HistogramError> {
        let r = Region::Box { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn new_ball(center: [f64; 3], radius: f64) -> Result<Self, HistogramError> {
        let r = Region::Ball { center, radius };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), HistogramError> {
        match self {
            Region::Box { lo, hi } => {
                for i in 0..3 {
                    if !(hi[i] > lo[i]) {
                        return Err(HistogramError::InvalidRegion(format!(
                            "box needs hi > lo on every axis (axis {i}: {} vs {})",
                            lo[i], hi[i]
                        )));
                    }
                }
                Ok(())
            }
            Region::Ball { radius, .. } => {
                if !(radius > &0.0) {
                    return Err(HistogramError::InvalidRegion(format!(
                        "ball radius must be positive, got {radius}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Analytic volume of the region.
    pub fn exact_volume(&self) -> f64 {
        match self {
            Region::Box { lo, hi } => (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]),
            Region::Ball { radius, .. } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
        }
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Region::Box { lo, hi } => (*lo, *hi),
            Region::Ball { center, radius } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
        }
    }

    #[inline]
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Region::Box { lo, hi } => {
                (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
            }
            Region::Ball { center, radius } => {
                (p - Vector3::from(*center)).norm_squared() <= radius * radius
            }
        }
    }
}

/// Quadrature choice. The midpoint grid is the deterministic reference;
/// Monte-Carlo (fixed seed) is a statistical cross-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QuadratureSpec {
    MidpointGrid { resolution: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl QuadratureSpec {
    pub fn grid(resolution: usize) -> Self {
        QuadratureSpec::MidpointGrid { resolution }
    }

    pub fn validate(&self) -> Result<(), HistogramError> {
        match self {
            QuadratureSpec::MidpointGrid { resolution } => {
                if *resolution < 8 {
                    return Err(HistogramError::InvalidQuadrature(format!(
                        "grid resolution must be at least 8, got {resolution}"
                    )));
                }
            }
            QuadratureSpec::MonteCarlo { samples, .. } => {
                if *samples < 1000 {
                    return Err(HistogramError::InvalidQuadrature(format!(
                        "monte-carlo needs at least 1000 samples, got {samples}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sampled volume function: `volumes[i]` is the relative volume at dose
/// `doses[i]`, monotone non-increasing, in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DvhCurve {
    pub doses: Vec<f64>,
    pub volumes: Vec<f64>,
}

impl DvhCurve {
    pub fn validate(&self) -> Result<(), HistogramError> {
        if self.doses.len() != self.volumes.len() {
            return Err(HistogramError::InvalidArgument(
                "doses and volumes must have equal length".into(),
            ));
        }
        if self.doses.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HistogramError::UnsortedGrid);
        }
        if self
            .volumes
            .windows(2)
            .any(|w| w[1] > w[0])
            || self.volumes.iter().any(|v| *v < 0.0 || *v > 1.0)
        {
            return Err(HistogramError::InvalidArgument(
                "volumes must be non-increasing and in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Writes `dose,volume` CSV rows in the fixed 17-digit format.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "dose,volume")?;
        for (d, v) in self.doses.iter().zip(&self.volumes) {
            writeln!(w, "{},{}", crate::fmt_float(*d), crate::fmt_float(*v))?;
        }
        Ok(())
    }
}

/// Quadrature nodes inside the region, in a fixed deterministic order.
///
/// Grid nodes are bounding-box cell midpoints filtered to the region,
/// enumerated z-slab by z-slab; Monte-Carlo draws from a ChaCha stream and
/// keeps exactly `samples` points inside the region.
pub(crate) fn sample_points(
    region: &Region,
    quad: &QuadratureSpec,
) -> Result<Vec<Vector3<f64>>, HistogramError> {
    region.validate()?;
    quad.validate()?;
    crate::init_parallelism();
    let (lo, hi) = region.bounding_box();
    match *quad {
        QuadratureSpec::MidpointGrid { resolution: n } => {
            let step = [
                (hi[0] - lo[0]) / n as f64,
                (hi[1] - lo[1]) / n as f64,
                (hi[2] - lo[2]) / n as f64,
            ];
            let slabs: Vec<Vec<Vector3<f64>>> = (0..n)
                .into_par_iter()
                .map(|iz| {
                    let z = lo[2] + (iz as f64 + 0.5) * step[2];
                    let mut pts = Vec::new();
                    for iy in 0..n {
                        let y = lo[1] + (iy as f64 + 0.5) * step[1];
                        for ix in 0..n {
                            let p = Vector3::new(lo[0] + (ix as f64 + 0.5) * step[0], y, z);
                            if region.contains(&p) {
                                pts.push(p);
                            }
                        }
                    }
                    pts
                })
                .collect();
            Ok(slabs.into_iter().flatten().collect())
        }
        QuadratureSpec::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Vec::with_capacity(samples);
            let mut draws = 0usize;
            let max_draws = samples.saturating_mul(1000);
            while pts.len() < samples {
                draws += 1;
                if draws > max_draws {
                    return Err(HistogramError::InvalidQuadrature(
                        "monte-carlo rejection sampling made no progress".into(),
                    ));
                }
                let p = Vector3::new(
                    rng.gen_range(lo[0]..hi[0]),
                    rng.gen_range(lo[1]..hi[1]),
                    rng.gen_range(lo[2]..hi[2]),
                );
                if region.contains(&p) {
                    pts.push(p);
                }
            }
            Ok(pts)
        }
    }
}

/// Streaming fold over the quadrature nodes, one accumulator per z-slab.
///
/// Grid slabs run in parallel but the returned accumulators are in slab
/// order, so any order-sensitive merge stays independent of the thread
/// count. Monte-Carlo folds its sequential sample stream into a single
/// accumulator. Nodes are identical to [`sample_points`].
pub(crate) fn fold_points<A, F>(
    region: &Region,
    quad: &QuadratureSpec,
    seed: A,
    fold: F,
) -> Result<Vec<A>, HistogramError>
where
    A: Clone + Send + Sync,
    F: Fn(&mut A, Vector3<f64>) + Sync,
{
    region.validate()?;
    quad.validate()?;
    crate::init_parallelism();
    let (lo, hi) = region.bounding_box();
    match *quad {
        QuadratureSpec::MidpointGrid { resolution: n } => {
            let step = [
                (hi[0] - lo[0]) / n as f64,
                (hi[1] - lo[1]) / n as f64,
                (hi[2] - lo[2]) / n as f64,
            ];
            Ok((0..n)
                .into_par_iter()
                .map(|iz| {
                    let z = lo[2] + (iz as f64 + 0.5) * step[2];
                    let mut acc = seed.clone();
                    for iy in 0..n {
                        let y = lo[1] + (iy as f64 + 0.5) * step[1];
                        for ix in 0..n {
                            let p = Vector3::new(lo[0] + (ix as f64 + 0.5) * step[0], y, z);
                            if region.contains(&p) {
                                fold(&mut acc, p);
                            }
                        }
                    }
                    acc
                })
                .collect())
        }
        QuadratureSpec::MonteCarlo { samples, seed: rng_seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut acc = seed;
            let mut kept = 0usize;
            let mut draws = 0usize;
            let max_draws = samples.saturating_mul(1000);
            while kept < samples {
                draws += 1;
                if draws > max_draws {
                    return Err(HistogramError::InvalidQuadrature(
                        "monte-carlo rejection sampling made no progress".into(),
                    ));
                }
                let p = Vector3::new(
                    rng.gen_range(lo[0]..hi[0]),
                    rng.gen_range(lo[1]..hi[1]),
                    rng.gen_range(lo[2]..hi[2]),
                );
                if region.contains(&p) {
                    fold(&mut acc, p);
                    kept += 1;
                }
            }
            Ok(vec![acc])
        }
    }
}

/// Relative volume of the region receiving dose at least `h`.
pub fn volume_above(
    family: &PeakFamily,
    sigma: &[f64],
    region: &Region,
    h: f64,
    quad: &QuadratureSpec,
) -> Result<f64, HistogramError> {
    if !(h >= 0.0) {
        return Err(HistogramError::InvalidArgument(format!(
            "dose level must be nonnegative, got {h}"
        )));
    }
    let field = PreparedField::new(family, sigma)?;
    let counts = fold_points(region, quad, (0u64, 0u64), |acc, p| {
        acc.0 += 1;
        if field.value(&p) >= h {
            acc.1 += 1;
        }
    })?;
    let (inside, above) = counts
        .iter()
        .fold((0u64, 0u64), |t, c| (t.0 + c.0, t.1 + c.1));
    Ok(above as f64 / inside as f64)
}

/// Volume function sampled on an ascending dose grid.
///
/// One field pass serves all dose levels; each entry equals the pointwise
/// [`volume_above`] for the same quadrature.
pub fn dvh_curve(
    family: &PeakFamily,
    sigma: &[f64],
    region: &Region,
    h_grid: &[f64],
    quad: &QuadratureSpec,
) -> Result<DvhCurve, HistogramError> {
    if h_grid.is_empty() {
        return Err(HistogramError::InvalidArgument("empty dose grid".into()));
    }
    if h_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HistogramError::UnsortedGrid);
    }
    if h_grid[0] < 0.0 {
        return Err(HistogramError::InvalidArgument(
            "dose levels must be nonnegative".into(),
        ));
    }
    let field = PreparedField::new(family, sigma)?;
    // bins[k] = number of points whose dose is >= h_grid[k-1] but < h_grid[k];
    // counting by suffix sums reproduces the per-level indicator exactly.
    let slab_bins = fold_points(region, quad, vec![0u64; h_grid.len() + 1], |bins, p| {
        let v = field.value(&p);
        let k = h_grid.partition_point(|h| *h <= v);
        bins[k] += 1;
    })?;
    let mut bins = vec![0u64; h_grid.len() + 1];
    for slab in &slab_bins {
        for (b, s) in bins.iter_mut().zip(slab) {
            *b += s;
        }
    }
    let n: u64 = bins.iter().sum();
    let mut volumes = vec![0.0; h_grid.len()];
    let mut suffix = 0u64;
    for i in (0..h_grid.len()).rev() {
        suffix += bins[i + 1];
        volumes[i] = suffix as f64 / n as f64;
    }
    let curve = DvhCurve {
        doses: h_grid.to_vec(),
        volumes,
    };
    curve.validate()?;
    Ok(curve)
}

/// Quadratic standard form with `p` plus-signs and `q` minus-signs.
#[inline]
fn standard_form_ok(p: usize, q: usize) -> Result<(), HistogramError> {
    if p + q != 3 {
        return Err(HistogramError::InvalidArgument(format!(
            "signature must satisfy p + q = 3, got ({p}, {q})"
        )));
    }
    Ok(())
}

/// Adaptive Simpson on [a, b].
fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, m: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        m: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let left = simpson(f, a, lm, m);
        let right = simpson(f, m, rm, b);
        if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, lm, m, left, 0.5 * tol, depth - 1)
                + recurse(f, m, rm, b, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    recurse(f, a, m, b, simpson(f, a, m, b), tol, 48)
}

/// Volume of `{x in ball(0, radius) : g(x) >= k}` for the standard form
/// with signature `(p, q)`.
///
/// Extremum signatures have closed forms; the saddle signatures reduce to
/// one-dimensional integrals of piecewise-quadratic profiles, evaluated by
/// adaptive quadrature.
pub fn local_volume_standard(
    p: usize,
    q: usize,
    k: f64,
    radius: f64,
) -> Result<f64, HistogramError> {
    standard_form_ok(p, q)?;
    if !(radius > 0.0) {
        return Err(HistogramError::InvalidArgument(format!(
            "radius must be positive, got {radius}"
        )));
    }
    let ball = 4.0 / 3.0 * std::f64::consts::PI;
    let r2 = radius * radius;
    match (p, q) {
        // g = -|x|^2: the superlevel set is a ball of radius sqrt(-k).
        (0, 3) => {
            if k > 0.0 {
                Ok(0.0)
            } else {
                let r = (-k).sqrt().min(radius);
                Ok(ball * r.powi(3))
            }
        }
        // g = |x|^2: complement of the previous case.
        (3, 0) => {
            if k <= 0.0 {
                Ok(ball * radius.powi(3))
            } else {
                let r = k.sqrt().min(radius);
                Ok(ball * (radius.powi(3) - r.powi(3)))
            }
        }
        // g = t^2 - rho^2 (t axial, rho transverse):
        // area at axial coordinate t is pi * max(0, min(t^2 - k, r^2 - t^2)).
        (1, 2) => {
            let profile = |t: f64| {
                let cap = (t * t - k).min(r2 - t * t);
                std::f64::consts::PI * cap.max(0.0)
            };
            Ok(adaptive_simpson(&profile, -radius, radius, 1e-13))
        }
        // g = rho^2 - t^2: annulus rho^2 in [max(t^2 + k, 0), r^2 - t^2].
        (2, 1) => {
            let profile = |t: f64| {
                let inner = (t * t + k).max(0.0);
                let outer = r2 - t * t;
                std::f64::consts::PI * (outer - inner).max(0.0)
            };
            Ok(adaptive_simpson(&profile, -radius, radius, 1e-13))
        }
        _ => unreachable!(),
    }
}

/// Result of a one-sided local-volume exponent probe.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalExponent {
    /// Leading non-smooth term behaves like `c * |k|^exponent`.
    PowerLaw { exponent: f64, coefficient: f64 },
    /// No non-smooth component detected on this side.
    Flat,
}

/// Ordinary least squares of y on x; returns (slope, intercept, r^2).
pub(crate) fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let pred = slope * a + intercept;
            (b - pred) * (b - pred)
        })
        .sum();
    // A constant series is fit perfectly by a flat line; report r^2 = 1
    // rather than the 0/0 of the usual formula.
    let r2 = if syy < 1e-20 { 1.0 } else { 1.0 - ss_res / syy };
    (slope, intercept, r2)
}

/// Least-squares cubic fit, evaluated as a closure.
fn cubic_fit(xs: &[f64], ys: &[f64]) -> impl Fn(f64) -> f64 {
    // Normal equations on the monomial basis; the probe ranges used here are
    // narrow enough that this stays well conditioned.
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        let row = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    // Gaussian elimination with partial pivoting.
    let mut a = ata;
    let mut b = atb;
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let factor = a[row][col] / a[col][col];
            for j in col..4 {
                a[row][j] -= factor * a[col][j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut coef = [0.0f64; 4];
    for i in (0..4).rev() {
        let mut s = b[i];
        for j in i + 1..4 {
            s -= a[i][j] * coef[j];
        }
        coef[i] = s / a[i][i];
    }
    move |x: f64| coef[0] + x * (coef[1] + x * (coef[2] + x * coef[3]))
}

const EXPONENT_PROBE_MAGNITUDES: usize = 13;
const EXPONENT_PROBE_MAX: f64 = 1e-2;

fn probe_magnitudes() -> Vec<f64> {
    // 1e-2 down to 1e-5, ratio 10^(-1/4).
    (0..EXPONENT_PROBE_MAGNITUDES)
        .map(|i| EXPONENT_PROBE_MAX * 10f64.powf(-(i as f64) / 4.0))
        .collect()
}

/// Fits the exponent of the leading non-smooth term of the standard-form
/// local volume on one side of the critical value 0.
///
/// Extremum signatures regress `|V(k) - V(0)|` directly. For saddles the
/// smooth background (a cubic fitted to the opposite, smooth side and
/// extrapolated across 0) is subtracted first; probing the smooth side
/// itself reports [`LocalExponent::Flat`].
pub fn local_volume_exponent(
    p: usize,
    q: usize,
    side: crate::Side,
    radius: f64,
) -> Result<LocalExponent, HistogramError> {
    standard_form_ok(p, q)?;
    let sign = match side {
        crate::Side::Left => -1.0,
        crate::Side::Right => 1.0,
    };
    let mags = probe_magnitudes();
    let v0 = local_volume_standard(p, q, 0.0, radius)?;
    let scale = local_volume_standard(p, q, -radius * radius, radius)?.max(1.0);

    let deviations: Vec<f64> = if p == 0 || q == 0 {
        mags.iter()
            .map(|&m| local_volume_standard(p, q, sign * m, radius).map(|v| v - v0))
            .collect::<Result<_, _>>()?
    } else {
        // Saddle: curvature blows up on the side where the second difference
        // grows under step reduction; the other side is analytic.
        let fd2 = |s: f64, delta: f64| -> Result<f64, HistogramError> {
            Ok((local_volume_standard(p, q, 2.0 * s * delta, radius)?
                - 2.0 * local_volume_standard(p, q, s * delta, radius)?
                + v0)
                / (delta * delta))
        };
        let growth = |s: f64| -> Result<f64, HistogramError> {
            Ok(fd2(s, 1e-4)?.abs() / fd2(s, 1e-2)?.abs().max(1e-300))
        };
        let kink_sign = if growth(1.0)? > growth(-1.0)? { 1.0 } else { -1.0 };
        if sign != kink_sign {
            return Ok(LocalExponent::Flat);
        }
        let smooth_k: Vec<f64> = mags.iter().map(|&m| -kink_sign * m).collect();
        let smooth_v: Vec<f64> = smooth_k
            .iter()
            .map(|&k| local_volume_standard(p, q, k, radius))
            .collect::<Result<_, _>>()?;
        let background = cubic_fit(&smooth_k, &smooth_v);
        mags.iter()
            .map(|&m| {
                local_volume_standard(p, q, kink_sign * m, radius)
                    .map(|v| v - background(kink_sign * m))
            })
            .collect::<Result<_, _>>()?
    };

    if deviations.iter().all(|d| d.abs() < 1e-13 * scale) {
        return Ok(LocalExponent::Flat);
    }
    let xs: Vec<f64> = mags.iter().map(|m| m.ln()).collect();
    let ys: Vec<f64> = deviations.iter().map(|d| d.abs().max(1e-300).ln()).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    if r2 < 0.98 {
        return Err(HistogramError::FitFailed { r_squared: r2 });
    }
    Ok(LocalExponent::PowerLaw {
        exponent: slope,
        coefficient: intercept.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Side;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_peak() -> PeakFamily {
        PeakFamily::single_peak()
    }

    fn ball8() -> Region {
        Region::new_ball([0.0; 3], 8.0).unwrap()
    }

    #[test]
    fn volume_at_zero_dose_is_exactly_one() {
        let v = volume_above(
            &single_peak(),
            &[1.0],
            &ball8(),
            0.0,
            &QuadratureSpec::grid(16),
        )
        .unwrap();
        assert_eq!(v, 1.0);
        let v_mc = volume_above(
            &single_peak(),
            &[1.0],
            &ball8(),
            0.0,
            &QuadratureSpec::MonteCarlo {
                samples: 2000,
                seed: 7,
            },
        )
        .unwrap();
        assert_eq!(v_mc, 1.0);
    }

    #[test]
    fn volume_above_global_max_is_zero() {
        let v = volume_above(
            &single_peak(),
            &[1.0],
            &ball8(),
            1.01,
            &QuadratureSpec::grid(32),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sublevel_ball_matches_radial_inversion() {
        // 1/(1+r^2) >= 1/2 exactly on the unit ball, so V = 1/512 on ball(0,8).
        let v = volume_above(
            &single_peak(),
            &[1.0],
            &ball8(),
            0.5,
            &QuadratureSpec::grid(96),
        )
        .unwrap();
        assert!((v - 1.0 / 512.0).abs() < 1e-3);
        // Tolerances on volume values are absolute on the [0,1] scale; the
        // actual error here is a few 1e-5.
        assert!((v - 1.0 / 512.0).abs() < 1e-4);
    }

    #[test]
    fn dvh_matches_radial_inversion_law() {
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let curve = dvh_curve(
            &single_peak(),
            &[1.0],
            &ball8(),
            &grid,
            &QuadratureSpec::grid(96),
        )
        .unwrap();
        curve.validate().unwrap();
        for (h, v) in curve.doses.iter().zip(&curve.volumes) {
            let r = (1.0 / h - 1.0).sqrt().min(8.0);
            let exact = (r / 8.0).powi(3);
            assert!(
                (v - exact).abs() < 1e-3,
                "h = {h}: grid {v} vs exact {exact}"
            );
        }
    }

    #[test]
    fn dvh_single_level_zero() {
        let curve = dvh_curve(
            &single_peak(),
            &[1.0],
            &ball8(),
            &[0.0],
            &QuadratureSpec::grid(16),
        )
        .unwrap();
        assert_eq!(curve.volumes, vec![1.0]);
    }

    #[test]
    fn dvh_rejects_unsorted_grid() {
        let err = dvh_curve(
            &single_peak(),
            &[1.0],
            &ball8(),
            &[0.5, 0.2],
            &QuadratureSpec::grid(16),
        )
        .unwrap_err();
        assert!(matches!(err, HistogramError::UnsortedGrid));
    }

    #[test]
    fn dvh_equals_pointwise_volume_above() {
        let fam = PeakFamily::two_peak();
        let region = Region::new_box([-8.0; 3], [8.0; 3]).unwrap();
        let grid = [0.1, 0.3, 0.5, 0.7];
        for quad in [
            QuadratureSpec::grid(24),
            QuadratureSpec::MonteCarlo {
                samples: 5000,
                seed: 99,
            },
        ] {
            let curve = dvh_curve(&fam, &[1.0, 1.0], &region, &grid, &quad).unwrap();
            for (h, v) in grid.iter().zip(&curve.volumes) {
                let single = volume_above(&fam, &[1.0, 1.0], &region, *h, &quad).unwrap();
                assert_eq!(*v, single);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn dvh_is_monotone_nonincreasing(
            w1 in 0.2f64..2.0,
            w2 in 0.2f64..2.0,
            h0 in 0.01f64..0.2,
            span in 0.2f64..1.0,
        ) {
            let fam = PeakFamily::two_peak();
            let grid: Vec<f64> = (0..12).map(|i| h0 + span * i as f64 / 11.0).collect();
            let region = Region::new_box([-6.0; 3], [7.0; 3]).unwrap();
            let curve = dvh_curve(&fam, &[w1, w2], &region, &grid, &QuadratureSpec::grid(12))
                .unwrap_or_else(|_| DvhCurve { doses: vec![0.0], volumes: vec![1.0] });
            prop_assert!(curve.volumes.windows(2).all(|p| p[1] <= p[0]));
            prop_assert!(curve.volumes[0] <= 1.0);
        }
    }

    #[test]
    fn refinement_improves_and_richardson_hits_oracle() {
        let exact = {
            let r: f64 = 1.0; // radius of the h = 0.5 sublevel ball
            (r / 8.0).powi(3)
        };
        let v = |res: usize| {
            volume_above(
                &single_peak(),
                &[1.0],
                &ball8(),
                0.5,
                &QuadratureSpec::grid(res),
            )
            .unwrap()
        };
        let coarse = v(24);
        let mid = v(96);
        let fine = v(192);
        assert!((fine - exact).abs() <= (coarse - exact).abs());
        let richardson = 2.0 * fine - mid;
        assert!((richardson - exact).abs() < 1e-3);
    }

    #[test]
    fn monte_carlo_agrees_with_grid_within_four_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..20u64 {
            let two = rng.gen_bool(0.5);
            let (fam, w): (PeakFamily, Vec<f64>) = if two {
                (
                    PeakFamily::two_peak(),
                    vec![rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
                )
            } else {
                (PeakFamily::single_peak(), vec![rng.gen_range(0.5..1.5)])
            };
            let region = if rng.gen_bool(0.5) {
                Region::new_box([-6.0; 3], [6.0; 3]).unwrap()
            } else {
                Region::new_ball([0.0; 3], 6.0).unwrap()
            };
            let h = rng.gen_range(0.05..0.5);
            let grid_v = volume_above(&fam, &w, &region, h, &QuadratureSpec::grid(64)).unwrap();
            let samples = 20_000;
            let mc_v = volume_above(
                &fam,
                &w,
                &region,
                h,
                &QuadratureSpec::MonteCarlo {
                    samples,
                    seed: 1000 + case,
                },
            )
            .unwrap();
            let se = (grid_v * (1.0 - grid_v) / samples as f64).sqrt();
            assert!(
                (mc_v - grid_v).abs() <= 4.0 * se + 2e-3,
                "case {case}: grid {grid_v} mc {mc_v} se {se}"
            );
        }
    }

    #[test]
    fn monte_carlo_is_deterministic_given_seed() {
        let quad = QuadratureSpec::MonteCarlo {
            samples: 5000,
            seed: 4242,
        };
        let a = volume_above(&single_peak(), &[1.0], &ball8(), 0.4, &quad).unwrap();
        let b = volume_above(&single_peak(), &[1.0], &ball8(), 0.4, &quad).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_volume_maximum_closed_form() {
        let ball = 4.0 / 3.0 * std::f64::consts::PI;
        let v = local_volume_standard(0, 3, -0.25, 1.0).unwrap();
        assert_relative_eq!(v, ball * 0.125, max_relative = 1e-12);
        assert_eq!(local_volume_standard(0, 3, 0.1, 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            local_volume_standard(3, 0, 0.0, 1.0).unwrap(),
            ball,
            max_relative = 1e-12
        );
        // Full ball below -radius^2.
        assert_relative_eq!(
            local_volume_standard(0, 3, -2.0, 1.0).unwrap(),
            ball,
            max_relative = 1e-12
        );
    }

    #[test]
    fn local_volume_signature_validation() {
        assert!(local_volume_standard(2, 2, 0.0, 1.0).is_err());
        assert!(local_volume_standard(0, 3, 0.0, -1.0).is_err());
    }

    /// Monte-Carlo oracle for the saddle volumes.
    fn mc_standard_volume(p: usize, k: f64, radius: f64, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 400_000;
        let mut inside = 0u64;
        let mut kept = 0u64;
        while kept < n {
            let x = [
                rng.gen_range(-radius..radius),
                rng.gen_range(-radius..radius),
                rng.gen_range(-radius..radius),
            ];
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            if r2 > radius * radius {
                continue;
            }
            kept += 1;
            let mut g = 0.0;
            for (i, xi) in x.iter().enumerate() {
                g += if i < p { xi * xi } else { -xi * xi };
            }
            if g >= k {
                inside += 1;
            }
        }
        let frac = inside as f64 / n as f64;
        let ball = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
        let se = (frac * (1.0 - frac) / n as f64).sqrt() * ball;
        (frac * ball, se)
    }

    #[test]
    fn saddle_volumes_match_monte_carlo() {
        for (p, q) in [(1usize, 2usize), (2, 1)] {
            for k in [-0.1, 0.0, 0.1] {
                let v = local_volume_standard(p, q, k, 1.0).unwrap();
                let (mc, se) = mc_standard_volume(p, k, 1.0, 31337 + p as u64);
                assert!(
                    (v - mc).abs() < 4.0 * se + 1e-4,
                    "({p},{q}) k={k}: quad {v} mc {mc} se {se}"
                );
            }
        }
    }

    #[test]
    fn maximum_exponent_is_three_halves_on_the_left() {
        match local_volume_exponent(0, 3, Side::Left, 1.0).unwrap() {
            LocalExponent::PowerLaw { exponent, .. } => {
                assert!((exponent - 1.5).abs() < 0.05, "exponent {exponent}");
            }
            LocalExponent::Flat => panic!("expected a power law"),
        }
    }

    #[test]
    fn maximum_right_side_is_flat() {
        assert_eq!(
            local_volume_exponent(0, 3, Side::Right, 1.0).unwrap(),
            LocalExponent::Flat
        );
    }

    #[test]
    fn minimum_exponent_is_three_halves_on_the_right() {
        match local_volume_exponent(3, 0, Side::Right, 1.0).unwrap() {
            LocalExponent::PowerLaw { exponent, .. } => {
                assert!((exponent - 1.5).abs() < 0.05, "exponent {exponent}");
            }
            LocalExponent::Flat => panic!("expected a power law"),
        }
    }

    #[test]
    fn saddle_nonsmooth_exponent_is_three_halves() {
        // (1,2): the kink sits on the right side; (2,1): on the left.
        match local_volume_exponent(1, 2, Side::Right, 1.0).unwrap() {
            LocalExponent::PowerLaw { exponent, .. } => {
                assert!((exponent - 1.5).abs() < 0.1, "exponent {exponent}");
            }
            LocalExponent::Flat => panic!("expected a power law"),
        }
        match local_volume_exponent(2, 1, Side::Left, 1.0).unwrap() {
            LocalExponent::PowerLaw { exponent, .. } => {
                assert!((exponent - 1.5).abs() < 0.1, "exponent {exponent}");
            }
            LocalExponent::Flat => panic!("expected a power law"),
        }
        // The opposite sides are smooth.
        assert_eq!(
            local_volume_exponent(1, 2, Side::Left, 1.0).unwrap(),
            LocalExponent::Flat
        );
        assert_eq!(
            local_volume_exponent(2, 1, Side::Right, 1.0).unwrap(),
            LocalExponent::Flat
        );
    }

    #[test]
    fn region_exact_volumes() {
        let b = Region::new_box([0.0, 0.0, 0.0], [2.0, 3.0, 4.0]).unwrap();
        assert_eq!(b.exact_volume(), 24.0);
        let s = Region::new_ball([1.0, 2.0, 3.0], 2.0).unwrap();
        assert_relative_eq!(
            s.exact_volume(),
            4.0 / 3.0 * std::f64::consts::PI * 8.0,
            max_relative = 1e-15
        );
        assert!(Region::new_box([0.0; 3], [0.0, 1.0, 1.0]).is_err());
        assert!(Region::new_ball([0.0; 3], 0.0).is_err());
    }

    #[test]
    fn quadrature_validation() {
        assert!(QuadratureSpec::grid(4).validate().is_err());
        assert!(QuadratureSpec::MonteCarlo {
            samples: 10,
            seed: 0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_export_format() {
        let curve = DvhCurve {
            doses: vec![0.0, 0.5],
            volumes: vec![1.0, 0.25],
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf, Some("config_hash = abc")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "# config_hash = abc\ndose,volume\n0.0000000000000000e0,1.0000000000000000e0\n5.0000000000000000e-1,2.5000000000000000e-1\n"
        );
    }
}
