//! Analytic dose fields built from inverse-quadratic peaks.
//!
//! A field is `f(x) = sum_i w_i / (c_i + |x - a_i|^2)` with fixed peak
//! centers `a_i` and offsets `c_i`; the weights `w` are the treatment
//! parameters. The field is smooth in `x`, linear in `w`, strictly positive
//! for valid weights, and vanishes at infinity, so all derivatives here are
//! exact closed forms.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::Region;

/// Gradient-norm threshold for accepting a Newton root of the spatial gradient.
pub const GRAD_TOL: f64 = 1e-10;
/// Degeneracy floor: a critical point is rejected when
/// `|det H| <= DEGENERACY_TOL * |tr H / 3|^3`.
pub const DEGENERACY_TOL: f64 = 1e-8;
/// Converged Newton roots closer than this are merged.
pub const DEDUP_RADIUS: f64 = 1e-6;
/// A continuation step that moves the tracked point farther than this is
/// treated as having lost the point.
pub const TRACKING_JUMP_RADIUS: f64 = 1.0;

const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum DoseModelError {
    #[error("parameter vector has {got} entries but the family has {expected} peaks")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("peak offset must be positive, got {0}")]
    InvalidOffset(f64),
    #[error("a peak family needs at least one peak")]
    EmptyFamily,
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error(
        "degenerate critical point at ({:.6}, {:.6}, {:.6}): |det H| = {det:.3e} <= {threshold:.3e}",
        location[0], location[1], location[2]
    )]
    DegenerateCriticalPoint {
        location: [f64; 3],
        det: f64,
        threshold: f64,
    },
    #[error("Newton refinement did not converge from the given start")]
    NewtonDidNotConverge,
    #[error("critical-point continuation lost the tracked point at t = {t}")]
    TrackingLost { t: f64 },
    #[error("no critical point with index {which}; only {found} found")]
    NoSuchCriticalPoint { which: usize, found: usize },
}

/// One inverse-quadratic peak `1 / (offset + |x - center|^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center: [f64; 3],
    pub offset: f64,
}

impl Peak {
    pub fn new(center: [f64; 3], offset: f64) -> Result<Self, DoseModelError> {
        if !(offset > 0.0) {
            return Err(DoseModelError::InvalidOffset(offset));
        }
        Ok(Self { center, offset })
    }
}

/// An ordered list of peaks; the parameter dimension equals the peak count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakFamily {
    pub peaks: Vec<Peak>,
}

impl PeakFamily {
    pub fn new(peaks: Vec<Peak>) -> Result<Self, DoseModelError> {
        let family = Self { peaks };
        family.validate()?;
        Ok(family)
    }

    /// Number of peaks, i.e. the parameter-space dimension.
    pub fn dimension(&self) -> usize {
        self.peaks.len()
    }

    /// Re-checks the construction invariants (useful after deserialization).
    pub fn validate(&self) -> Result<(), DoseModelError> {
        if self.peaks.is_empty() {
            return Err(DoseModelError::EmptyFamily);
        }
        for p in &self.peaks {
            if !(p.offset > 0.0) {
                return Err(DoseModelError::InvalidOffset(p.offset));
            }
            if !p.center.iter().all(|c| c.is_finite()) {
                return Err(DoseModelError::InvalidParameters(
                    "peak center must be finite".into(),
                ));
            }
        }
        Ok(())
    }

    /// The single centered peak `1 / (1 + |x|^2)`.
    pub fn single_peak() -> Self {
        Self {
            peaks: vec![Peak {
                center: [0.0; 3],
                offset: 1.0,
            }],
        }
    }

    /// Two peaks, `1 / (1 + |x|^2) + 1 / (2 + |x - (4,0,0)|^2)` at unit weights.
    pub fn two_peak() -> Self {
        Self {
            peaks: vec![
                Peak {
                    center: [0.0; 3],
                    offset: 1.0,
                },
                Peak {
                    center: [4.0, 0.0, 0.0],
                    offset: 2.0,
                },
            ],
        }
    }
}

/// Validated nonnegative weights for a peak family.
///
/// Serializes as a bare JSON array of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamPoint {
    pub weights: Vec<f64>,
}

impl ParamPoint {
    pub fn new(weights: Vec<f64>) -> Result<Self, DoseModelError> {
        let p = Self { weights };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DoseModelError> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DoseModelError::InvalidParameters(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(DoseModelError::InvalidParameters(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// A non-degenerate critical point of the field at fixed parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalPoint {
    pub location: [f64; 3],
    pub value: f64,
    /// `(p, q)`: counts of positive and negative Hessian eigenvalues, p+q = 3.
    pub morse_signature: (usize, usize),
    pub hessian_det: f64,
}

fn check_dim(family: &PeakFamily, sigma: &[f64]) -> Result<(), DoseModelError> {
    if family.dimension() != sigma.len() {
        return Err(DoseModelError::DimensionMismatch {
            expected: family.dimension(),
            got: sigma.len(),
        });
    }
    Ok(())
}

/// Field with centers pre-converted, for hot evaluation loops.
#[derive(Clone)]
pub(crate) struct PreparedField {
    terms: Vec<(Vector3<f64>, f64, f64)>, // center, offset, weight
}

impl PreparedField {
    pub(crate) fn new(family: &PeakFamily, sigma: &[f64]) -> Result<Self, DoseModelError> {
        check_dim(family, sigma)?;
        Ok(Self {
            terms: family
                .peaks
                .iter()
                .zip(sigma)
                .map(|(p, &w)| (Vector3::from(p.center), p.offset, w))
                .collect(),
        })
    }

    #[inline]
    pub(crate) fn value(&self, p: &Vector3<f64>) -> f64 {
        self.terms
            .iter()
            .map(|(c, off, w)| w / (off + (p - c).norm_squared()))
            .sum()
    }

    #[inline]
    pub(crate) fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for (c, off, w) in &self.terms {
            let r = p - c;
            let d = off + r.norm_squared();
            g += r * (-2.0 * w / (d * d));
        }
        g
    }

    #[inline]
    pub(crate) fn hessian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        let mut h = Matrix3::zeros();
        for (c, off, w) in &self.terms {
            let r = p - c;
            let d = off + r.norm_squared();
            let d2 = d * d;
            let d3 = d2 * d;
            h += Matrix3::identity() * (-2.0 * w / d2) + (r * r.transpose()) * (8.0 * w / d3);
        }
        h
    }

    /// Value of each basis peak at `p`; equals `df/dw_i` by linearity.
    #[inline]
    pub(crate) fn basis_values(&self, p: &Vector3<f64>, out: &mut [f64]) {
        for ((c, off, _), slot) in self.terms.iter().zip(out.iter_mut()) {
            *slot = 1.0 / (off + (p - c).norm_squared());
        }
    }
}

/// Evaluates the field at `x`.
pub fn eval(family: &PeakFamily, sigma: &[f64], x: &[f64; 3]) -> Result<f64, DoseModelError> {
    let f = PreparedField::new(family, sigma)?;
    Ok(f.value(&Vector3::from(*x)))
}

/// Exact spatial gradient of the field at `x`.
pub fn gradient_x(
    family: &PeakFamily,
    sigma: &[f64],
    x: &[f64; 3],
) -> Result<[f64; 3], DoseModelError> {
    let f = PreparedField::new(family, sigma)?;
    Ok(f.gradient(&Vector3::from(*x)).into())
}

/// Exact spatial Hessian of the field at `x` (symmetric 3x3, row-major).
pub fn hessian_x(
    family: &PeakFamily,
    sigma: &[f64],
    x: &[f64; 3],
) -> Result<[[f64; 3]; 3], DoseModelError> {
    let f = PreparedField::new(family, sigma)?;
    let h = f.hessian(&Vector3::from(*x));
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = h[(i, j)];
        }
    }
    Ok(out)
}

/// Gradient of the field with respect to the weights; component `i` is the
/// value of basis peak `i` at `x`, so every component is positive.
pub fn grad_sigma(
    family: &PeakFamily,
    sigma: &[f64],
    x: &[f64; 3],
) -> Result<Vec<f64>, DoseModelError> {
    let f = PreparedField::new(family, sigma)?;
    let mut out = vec![0.0; family.dimension()];
    f.basis_values(&Vector3::from(*x), &mut out);
    Ok(out)
}

/// Newton iteration on the spatial gradient from a single start.
fn newton_root(field: &PreparedField, start: Vector3<f64>, escape_radius: f64) -> Option<Vector3<f64>> {
    let mut x = start;
    for _ in 0..NEWTON_MAX_ITER {
        let g = field.gradient(&x);
        if !g.iter().all(|v| v.is_finite()) {
            return None;
        }
        if g.norm() < GRAD_TOL {
            return Some(x);
        }
        let h = field.hessian(&x);
        let delta = h.lu().solve(&g)?;
        x -= delta;
        if !x.iter().all(|v| v.is_finite()) || x.norm() > escape_radius {
            return None;
        }
    }
    None
}

fn classify(field: &PreparedField, x: Vector3<f64>) -> Result<CriticalPoint, DoseModelError> {
    let h = field.hessian(&x);
    let det = h.determinant();
    let trace = h.trace();
    let threshold = DEGENERACY_TOL * (trace.abs() / 3.0).powi(3);
    if det.abs() <= threshold {
        return Err(DoseModelError::DegenerateCriticalPoint {
            location: x.into(),
            det,
            threshold,
        });
    }
    let eigen = h.symmetric_eigen();
    let p = eigen.eigenvalues.iter().filter(|&&l| l > 0.0).count();
    let q = eigen.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    if p + q != 3 {
        return Err(DoseModelError::DegenerateCriticalPoint {
            location: x.into(),
            det,
            threshold,
        });
    }
    Ok(CriticalPoint {
        location: x.into(),
        value: field.value(&x),
        morse_signature: (p, q),
        hessian_det: det,
    })
}

/// Finds and classifies all critical points of the field inside `search_box`.
///
/// Newton on the gradient is started from a `seed_resolution`^3 midpoint
/// lattice over the region's bounding box; non-converged seeds are
/// discarded, converged roots are merged within [`DEDUP_RADIUS`], classified,
/// and returned sorted by descending value. A degenerate critical point
/// (near-zero Hessian determinant) is an error, not a result.
pub fn find_critical_points(
    family: &PeakFamily,
    sigma: &[f64],
    search_box: &Region,
    seed_resolution: usize,
) -> Result<Vec<CriticalPoint>, DoseModelError> {
    if seed_resolution < 4 {
        return Err(DoseModelError::InvalidParameters(format!(
            "seed_resolution must be at least 4, got {seed_resolution}"
        )));
    }
    let field = PreparedField::new(family, sigma)?;
    let (lo, hi) = search_box.bounding_box();
    let span = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let diag = (span[0] * span[0] + span[1] * span[1] + span[2] * span[2]).sqrt();
    let escape_radius = Vector3::from(hi).norm().max(Vector3::from(lo).norm()) + 4.0 * diag;

    let n = seed_resolution;
    let mut seeds: Vec<Vector3<f64>> = Vec::with_capacity(n * n * n + 4 * family.dimension());
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                seeds.push(Vector3::new(
                    lo[0] + (ix as f64 + 0.5) * span[0] / n as f64,
                    lo[1] + (iy as f64 + 0.5) * span[1] / n as f64,
                    lo[2] + (iz as f64 + 0.5) * span[2] / n as f64,
                ));
            }
        }
    }
    // The lattice alone can miss the narrow Newton basins of sharp peaks:
    // extrema sit near peak centers and saddles near the segments between
    // them, so seed those directly.
    for (i, p) in family.peaks.iter().enumerate() {
        let c = Vector3::from(p.center);
        seeds.push(c);
        for q in family.peaks.iter().skip(i + 1) {
            let d = Vector3::from(q.center) - c;
            for frac in [0.25, 0.5, 0.75] {
                seeds.push(c + d * frac);
            }
        }
    }

    let mut roots: Vec<(Vector3<f64>, f64)> = Vec::new();
    for seed in seeds {
        let Some(x) = newton_root(&field, seed, escape_radius) else {
            continue;
        };
        if !search_box.contains(&x) {
            continue;
        }
        let gnorm = field.gradient(&x).norm();
        match roots
            .iter_mut()
            .find(|(r, _)| (r - x).norm() < DEDUP_RADIUS)
        {
            Some(entry) => {
                if gnorm < entry.1 {
                    *entry = (x, gnorm);
                }
            }
            None => roots.push((x, gnorm)),
        }
    }

    let mut points = roots
        .into_iter()
        .map(|(x, _)| classify(&field, x))
        .collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(points)
}

/// Re-converges a critical point from a warm start and classifies it.
pub fn refine_critical_point(
    family: &PeakFamily,
    sigma: &[f64],
    start: &[f64; 3],
) -> Result<CriticalPoint, DoseModelError> {
    let field = PreparedField::new(family, sigma)?;
    let start = Vector3::from(*start);
    let escape_radius = start.norm() + 16.0 * (1.0 + TRACKING_JUMP_RADIUS);
    let x = newton_root(&field, start, escape_radius).ok_or(DoseModelError::NewtonDidNotConverge)?;
    classify(&field, x)
}

/// Follows one critical value along a parameter path.
///
/// The tracked point is selected by `which` (index into the
/// value-descending critical points at the first grid node, located inside
/// `search_box`); every subsequent node warm-starts Newton from the previous
/// location. Loss of non-degeneracy or a continuation jump larger than
/// [`TRACKING_JUMP_RADIUS`] is an error.
pub fn track_critical_value<P>(
    family: &PeakFamily,
    path: P,
    which: usize,
    t_grid: &[f64],
    search_box: &Region,
) -> Result<Vec<(f64, f64)>, DoseModelError>
where
    P: Fn(f64) -> Vec<f64>,
{
    let Some(&t0) = t_grid.first() else {
        return Ok(Vec::new());
    };
    let sigma0 = path(t0);
    let points = find_critical_points(family, &sigma0, search_box, 8)?;
    let start = points
        .get(which)
        .ok_or(DoseModelError::NoSuchCriticalPoint {
            which,
            found: points.len(),
        })?
        .clone();

    let mut location = start.location;
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let sigma = path(t);
        let cp = refine_critical_point(family, &sigma, &location)
            .map_err(|e| match e {
                DoseModelError::NewtonDidNotConverge => DoseModelError::TrackingLost { t },
                other => other,
            })?;
        let jump = Vector3::from(cp.location) - Vector3::from(location);
        if jump.norm() > TRACKING_JUMP_RADIUS {
            return Err(DoseModelError::TrackingLost { t });
        }
        location = cp.location;
        out.push((t, cp.value));
    }
    Ok(out)
}
