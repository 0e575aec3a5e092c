//! Penalty objectives over dose-volume and EUD constraints, plus the two
//! closed-form one-parameter objectives used by the Newton experiments.
//!
//! The penalty `G(x) = x^2 for x >= 0, else 0` is continuously
//! differentiable but not twice so at its seam. Each constraint contributes
//! `weight * G(signed deviation)`, with the deviation oriented so that a
//! violated constraint is positive:
//!
//! - dv-min:  `v_min - V(d_min)`        - dv-max:  `V(d_max) - v_max`
//! - eud-min: `d_min - E_alpha`         - eud-max: `E_alpha - d_max`

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dose_model::{DoseModelError, PeakFamily};
use crate::eud::{eud, eud_grad_sigma, EudError, EudSpec};
use crate::histogram::{volume_above, HistogramError, QuadratureSpec, Region};
use crate::Side;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    DoseModel(#[from] DoseModelError),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error(transparent)]
    Eud(#[from] EudError),
    #[error("constraint list must not be empty")]
    EmptyConstraints,
    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),
    #[error("sigma = {0} is outside the objective domain")]
    OutOfDomain(f64),
    #[error("objective contains dose-volume terms; no analytic gradient is available")]
    NotSmooth,
}

/// One-sided quadratic penalty: 0 for negative arguments, `x^2` otherwise.
#[inline]
pub fn penalty(x: f64) -> f64 {
    if x >= 0.0 {
        x * x
    } else {
        0.0
    }
}

/// First derivative of [`penalty`]; continuous everywhere.
#[inline]
pub fn penalty_derivative(x: f64) -> f64 {
    if x >= 0.0 {
        2.0 * x
    } else {
        0.0
    }
}

/// One-sided second derivative of [`penalty`]: jumps from 0 to 2 at the seam.
#[inline]
pub fn penalty_second_derivative(x: f64, side: Side) -> f64 {
    if x > 0.0 || (x == 0.0 && side == Side::Right) {
        2.0
    } else {
        0.0
    }
}

/// A single soft constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintKind {
    DvMin {
        dose_level: f64,
        volume_fraction: f64,
    },
    DvMax {
        dose_level: f64,
        volume_fraction: f64,
    },
    EudMin {
        dose_level: f64,
        alpha: f64,
    },
    EudMax {
        dose_level: f64,
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(flatten)]
    pub kind: ConstraintKind,
    pub weight: f64,
}

impl Constraint {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.weight > 0.0) {
            return Err(ObjectiveError::InvalidConstraint(format!(
                "weight must be positive, got {}",
                self.weight
            )));
        }
        match &self.kind {
            ConstraintKind::DvMin {
                volume_fraction, ..
            }
            | ConstraintKind::DvMax {
                volume_fraction, ..
            } => {
                if !(0.0..=1.0).contains(volume_fraction) {
                    return Err(ObjectiveError::InvalidConstraint(format!(
                        "volume fraction must be in [0, 1], got {volume_fraction}"
                    )));
                }
            }
            ConstraintKind::EudMin { alpha, .. } | ConstraintKind::EudMax { alpha, .. } => {
                if *alpha == 0.0 || !alpha.is_finite() {
                    return Err(ObjectiveError::InvalidConstraint(
                        "EUD alpha must be nonzero".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn is_dose_volume(&self) -> bool {
        matches!(
            self.kind,
            ConstraintKind::DvMin { .. } | ConstraintKind::DvMax { .. }
        )
    }
}

/// A weighted sum of per-region constraint penalties over one peak family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub family: PeakFamily,
    pub terms: Vec<(Region, Constraint)>,
    pub quad: QuadratureSpec,
}

impl ObjectiveSpec {
    pub fn new(
        family: PeakFamily,
        terms: Vec<(Region, Constraint)>,
        quad: QuadratureSpec,
    ) -> Result<Self, ObjectiveError> {
        let spec = Self {
            family,
            terms,
            quad,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.family.validate()?;
        if self.terms.is_empty() {
            return Err(ObjectiveError::EmptyConstraints);
        }
        for (region, constraint) in &self.terms {
            region.validate()?;
            constraint.validate()?;
        }
        self.quad.validate()?;
        Ok(())
    }

    pub fn is_eud_only(&self) -> bool {
        self.terms.iter().all(|(_, c)| !c.is_dose_volume())
    }
}

/// Signed deviation fed to the penalty for one constraint (positive means
/// violated).
pub fn constraint_argument(
    spec: &ObjectiveSpec,
    region: &Region,
    constraint: &Constraint,
    sigma: &[f64],
) -> Result<f64, ObjectiveError> {
    Ok(match &constraint.kind {
        ConstraintKind::DvMin {
            dose_level,
            volume_fraction,
        } => volume_fraction - volume_above(&spec.family, sigma, region, *dose_level, &spec.quad)?,
        ConstraintKind::DvMax {
            dose_level,
            volume_fraction,
        } => volume_above(&spec.family, sigma, region, *dose_level, &spec.quad)? - volume_fraction,
        ConstraintKind::EudMin { dose_level, alpha } => {
            dose_level
                - eud(
                    &spec.family,
                    sigma,
                    &EudSpec {
                        alpha: *alpha,
                        region: region.clone(),
                        quad: spec.quad.clone(),
                    },
                )?
        }
        ConstraintKind::EudMax { dose_level, alpha } => {
            eud(
                &spec.family,
                sigma,
                &EudSpec {
                    alpha: *alpha,
                    region: region.clone(),
                    quad: spec.quad.clone(),
                },
            )? - dose_level
        }
    })
}

/// Penalty arguments of every term, in order.
pub fn constraint_arguments(
    spec: &ObjectiveSpec,
    sigma: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    spec.terms
        .iter()
        .map(|(region, constraint)| constraint_argument(spec, region, constraint, sigma))
        .collect()
}

/// Total objective value, `sum_i w_i G(deviation_i)`; nonnegative, zero iff
/// every constraint is satisfied.
pub fn objective_value(spec: &ObjectiveSpec, sigma: &[f64]) -> Result<f64, ObjectiveError> {
    spec.validate()?;
    let mut total = 0.0;
    for (region, constraint) in &spec.terms {
        let arg = constraint_argument(spec, region, constraint, sigma)?;
        total += constraint.weight * penalty(arg);
    }
    Ok(total)
}

/// Central-difference gradient of the objective, component by component.
///
/// This is the honest interface for dose-volume terms, whose volume function
/// has no closed-form weight derivative; for EUD-only specs it reproduces
/// the analytic chain rule.
pub fn objective_grad_fd(
    spec: &ObjectiveSpec,
    sigma: &[f64],
    step: f64,
) -> Result<Vec<f64>, ObjectiveError> {
    if !(step > 0.0) {
        return Err(ObjectiveError::InvalidConstraint(format!(
            "fd step must be positive, got {step}"
        )));
    }
    let mut grad = vec![0.0; sigma.len()];
    let mut work = sigma.to_vec();
    for j in 0..sigma.len() {
        work[j] = sigma[j] + step;
        let plus = objective_value(spec, &work)?;
        work[j] = sigma[j] - step;
        let minus = objective_value(spec, &work)?;
        work[j] = sigma[j];
        grad[j] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Analytic gradient via the EUD chain rule; errors when the spec contains
/// any dose-volume term.
pub fn objective_grad_analytic(
    spec: &ObjectiveSpec,
    sigma: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    if !spec.is_eud_only() {
        return Err(ObjectiveError::NotSmooth);
    }
    let mut grad = vec![0.0; sigma.len()];
    for (region, constraint) in &spec.terms {
        let (dose_level, alpha, orientation) = match &constraint.kind {
            ConstraintKind::EudMin { dose_level, alpha } => (*dose_level, *alpha, -1.0),
            ConstraintKind::EudMax { dose_level, alpha } => (*dose_level, *alpha, 1.0),
            _ => unreachable!(),
        };
        let espec = EudSpec {
            alpha,
            region: region.clone(),
            quad: spec.quad.clone(),
        };
        let e = eud(&spec.family, sigma, &espec)?;
        let arg = orientation * (e - dose_level);
        let gp = penalty_derivative(arg);
        if gp != 0.0 {
            let eg = eud_grad_sigma(&spec.family, sigma, &espec)?;
            for (gj, ej) in grad.iter_mut().zip(&eg) {
                *gj += constraint.weight * gp * orientation * ej;
            }
        }
    }
    Ok(grad)
}

/// A scalar objective with exact derivatives and declared one-sided points.
pub trait Scalar1d {
    fn value(&self, sigma: f64) -> f64;
    fn first_derivative(&self, sigma: f64) -> f64;
    /// Second derivative using the given convention at flagged points;
    /// away from them both sides agree.
    fn second_derivative(&self, sigma: f64, side: Side) -> f64;
    /// Points where the second derivative is one-sided or unbounded.
    fn flagged_points(&self) -> &[f64] {
        &[]
    }
    /// Open domain of definition.
    fn domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// The decreasing reference volume profile `U(s) = 15 / (10 + s)`.
#[inline]
fn u(sigma: f64) -> f64 {
    15.0 / (10.0 + sigma)
}

#[inline]
fn u1(sigma: f64) -> f64 {
    let t = 10.0 + sigma;
    -15.0 / (t * t)
}

#[inline]
fn u2(sigma: f64) -> f64 {
    let t = 10.0 + sigma;
    30.0 / (t * t * t)
}

/// Smooth one-parameter objective `F1(s) = (U(s) - 1)^2` on `s > -10`.
#[derive(Debug, Clone, Copy)]
pub struct F1;

/// Builds [`F1`].
pub fn make_f1() -> F1 {
    F1
}

impl Scalar1d for F1 {
    fn value(&self, sigma: f64) -> f64 {
        let d = u(sigma) - 1.0;
        d * d
    }

    fn first_derivative(&self, sigma: f64) -> f64 {
        2.0 * (u(sigma) - 1.0) * u1(sigma)
    }

    fn second_derivative(&self, sigma: f64, _side: Side) -> f64 {
        let du = u1(sigma);
        2.0 * du * du + 2.0 * (u(sigma) - 1.0) * u2(sigma)
    }

    fn domain(&self) -> (f64, f64) {
        (-10.0, f64::INFINITY)
    }
}

/// Objective with a one-sided volume kink at 0:
/// `F2(s) = (V(s) - 1)^2` with `V(s) = U(s) + alpha_loc * (-s)^(3/2)` for
/// `s < 0` and `V = U` for `s >= 0`.
///
/// `F2` is continuously differentiable; the left limit of its second
/// derivative at 0 is unbounded (it carries the term
/// `2 (V - 1) * (3/4) alpha_loc (-s)^(-1/2)`), so 0 is flagged.
#[derive(Debug, Clone, Copy)]
pub struct F2 {
    alpha_loc: f64,
    flags: [f64; 1],
}

/// Default local-volume coefficient: the maximum's `4 pi / 3` normalized by
/// the unit-ball reference volume.
pub const DEFAULT_ALPHA_LOC: f64 = 1.0;

/// Builds [`F2`] with the given positive local coefficient.
pub fn make_f2(alpha_loc: f64) -> Result<F2, ObjectiveError> {
    if !(alpha_loc > 0.0) {
        return Err(ObjectiveError::InvalidConstraint(format!(
            "alpha_loc must be positive, got {alpha_loc}"
        )));
    }
    Ok(F2 {
        alpha_loc,
        flags: [0.0],
    })
}

impl F2 {
    fn v(&self, sigma: f64) -> f64 {
        if sigma < 0.0 {
            u(sigma) + self.alpha_loc * (-sigma).powf(1.5)
        } else {
            u(sigma)
        }
    }

    fn v1(&self, sigma: f64) -> f64 {
        if sigma < 0.0 {
            u1(sigma) - 1.5 * self.alpha_loc * (-sigma).sqrt()
        } else {
            u1(sigma)
        }
    }

    /// Second derivative of V; unbounded as sigma -> 0 from the left.
    fn v2(&self, sigma: f64, side: Side) -> f64 {
        if sigma < 0.0 || (sigma == 0.0 && side == Side::Left) {
            let e = (-sigma).max(0.0);
            if e == 0.0 {
                f64::INFINITY
            } else {
                u2(sigma) + 0.75 * self.alpha_loc / e.sqrt()
            }
        } else {
            u2(sigma)
        }
    }
}

impl Scalar1d for F2 {
    fn value(&self, sigma: f64) -> f64 {
        let d = self.v(sigma) - 1.0;
        d * d
    }

    fn first_derivative(&self, sigma: f64) -> f64 {
        2.0 * (self.v(sigma) - 1.0) * self.v1(sigma)
    }

    fn second_derivative(&self, sigma: f64, side: Side) -> f64 {
        let d1 = self.v1(sigma);
        2.0 * d1 * d1 + 2.0 * (self.v(sigma) - 1.0) * self.v2(sigma, side)
    }

    fn flagged_points(&self) -> &[f64] {
        &self.flags
    }

    fn domain(&self) -> (f64, f64) {
        (-10.0, f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn penalty_branch_values() {
        assert_eq!(penalty(-1.0), 0.0);
        assert_eq!(penalty(2.0), 4.0);
        assert_eq!(penalty(0.0), 0.0);
        assert_eq!(penalty_derivative(0.0), 0.0);
        assert_eq!(penalty_derivative(-1e-12), 0.0);
        assert_eq!(penalty_derivative(3.0), 6.0);
    }

    #[test]
    fn penalty_is_c1_but_not_c2_at_the_seam() {
        // First derivative continuous, one-sided second derivatives 0 and 2.
        let eps = 1e-9;
        assert!((penalty_derivative(eps) - penalty_derivative(-eps)).abs() < 3e-9);
        assert_eq!(penalty_second_derivative(0.0, Side::Left), 0.0);
        assert_eq!(penalty_second_derivative(0.0, Side::Right), 2.0);
    }

    fn ball8() -> Region {
        Region::new_ball([0.0; 3], 8.0).unwrap()
    }

    fn dv_max(dose: f64, volume: f64, weight: f64) -> Constraint {
        Constraint {
            kind: ConstraintKind::DvMax {
                dose_level: dose,
                volume_fraction: volume,
            },
            weight,
        }
    }

    #[test]
    fn satisfied_constraints_give_zero() {
        let spec = ObjectiveSpec::new(
            PeakFamily::single_peak(),
            vec![(ball8(), dv_max(0.5, 0.9, 2.0))],
            QuadratureSpec::grid(16),
        )
        .unwrap();
        assert_eq!(objective_value(&spec, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_dv_max_term_arithmetic() {
        // Build v_max so the violation is exactly 0.2 for this quadrature.
        let quad = QuadratureSpec::grid(24);
        let fam = PeakFamily::single_peak();
        let v = volume_above(&fam, &[1.0], &ball8(), 0.04, &quad).unwrap();
        assert!(v > 0.2, "need headroom for the arithmetic check, got {v}");
        let spec = ObjectiveSpec::new(
            fam,
            vec![(ball8(), dv_max(0.04, v - 0.2, 3.0))],
            quad,
        )
        .unwrap();
        let value = objective_value(&spec, &[1.0]).unwrap();
        assert_relative_eq!(value, 3.0 * 0.04, max_relative = 1e-12);
    }

    #[test]
    fn dv_max_with_sublevel_oracle() {
        // V(0.5) = 1/512 on ball(0, 8); with v_max = 1/1024 the penalty
        // argument is about 1/1024.
        let quad = QuadratureSpec::grid(96);
        let fam = PeakFamily::single_peak();
        let spec = ObjectiveSpec::new(
            fam.clone(),
            vec![(ball8(), dv_max(0.5, 1.0 / 1024.0, 1.0))],
            quad.clone(),
        )
        .unwrap();
        let value = objective_value(&spec, &[1.0]).unwrap();
        assert!(value > 0.0);
        let v = volume_above(&fam, &[1.0], &ball8(), 0.5, &quad).unwrap();
        assert!((v - 1.0 / 512.0).abs() < 1e-4);
        assert_relative_eq!(value, penalty(v - 1.0 / 1024.0), max_relative = 1e-12);
    }

    #[test]
    fn objective_is_nonnegative_and_zero_only_when_satisfied() {
        let quad = QuadratureSpec::grid(12);
        let fam = PeakFamily::two_peak();
        for (dose, vmax) in [(0.2, 0.01), (0.4, 0.2), (0.05, 0.9)] {
            let spec = ObjectiveSpec::new(
                fam.clone(),
                vec![(ball8(), dv_max(dose, vmax, 1.5))],
                quad.clone(),
            )
            .unwrap();
            let value = objective_value(&spec, &[1.0, 1.0]).unwrap();
            assert!(value >= 0.0);
            let arg = constraint_arguments(&spec, &[1.0, 1.0]).unwrap()[0];
            assert_eq!(value == 0.0, arg <= 0.0);
        }
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution() {
        let quad = QuadratureSpec::grid(12);
        let fam = PeakFamily::single_peak();
        let mk = |weight: f64| {
            ObjectiveSpec::new(
                fam.clone(),
                vec![(ball8(), dv_max(0.4, 0.001, weight))],
                quad.clone(),
            )
            .unwrap()
        };
        let v1 = objective_value(&mk(1.0), &[1.0]).unwrap();
        let v2 = objective_value(&mk(2.0), &[1.0]).unwrap();
        assert!(v1 > 0.0);
        assert_relative_eq!(v2, 2.0 * v1, max_relative = 1e-12);
    }

    #[test]
    fn grad_fd_is_zero_with_slack() {
        let spec = ObjectiveSpec::new(
            PeakFamily::single_peak(),
            vec![(ball8(), dv_max(0.5, 0.9, 1.0))],
            QuadratureSpec::grid(16),
        )
        .unwrap();
        let g = objective_grad_fd(&spec, &[1.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn eud_only_fd_matches_analytic_chain_rule() {
        let spec = ObjectiveSpec::new(
            PeakFamily::two_peak(),
            vec![(
                Region::new_box([-8.0; 3], [8.0; 3]).unwrap(),
                Constraint {
                    kind: ConstraintKind::EudMax {
                        dose_level: 0.005,
                        alpha: 2.0,
                    },
                    weight: 1.0,
                },
            )],
            QuadratureSpec::grid(16),
        )
        .unwrap();
        let sigma = [1.0, 1.2];
        let analytic = objective_grad_analytic(&spec, &sigma).unwrap();
        let fd = objective_grad_fd(&spec, &sigma, 1e-5).unwrap();
        for (a, f) in analytic.iter().zip(&fd) {
            assert_relative_eq!(a, f, max_relative = 1e-4);
        }
    }

    #[test]
    fn dv_spec_has_no_analytic_gradient() {
        let spec = ObjectiveSpec::new(
            PeakFamily::single_peak(),
            vec![(ball8(), dv_max(0.5, 0.001, 1.0))],
            QuadratureSpec::grid(16),
        )
        .unwrap();
        assert!(matches!(
            objective_grad_analytic(&spec, &[1.0]),
            Err(ObjectiveError::NotSmooth)
        ));
    }

    #[test]
    fn f1_values_and_minimum() {
        let f1 = make_f1();
        assert_eq!(f1.value(5.0), 0.0);
        assert_relative_eq!(f1.value(0.0), 0.25, max_relative = 1e-15);
        assert_eq!(f1.first_derivative(5.0), 0.0);
        assert!(f1.flagged_points().is_empty());
    }

    #[test]
    fn f2_equals_f1_on_the_right_branch() {
        let f1 = make_f1();
        let f2 = make_f2(DEFAULT_ALPHA_LOC).unwrap();
        for s in [0.0, 0.3, 1.0, 5.0, 17.2] {
            assert_eq!(f2.value(s), f1.value(s));
            assert_eq!(f2.first_derivative(s), f1.first_derivative(s));
            assert_eq!(
                f2.second_derivative(s, Side::Right),
                f1.second_derivative(s, Side::Right)
            );
        }
    }

    #[test]
    fn f2_first_derivative_is_continuous_at_zero() {
        let f2 = make_f2(1.0).unwrap();
        let expect = 2.0 * (u(0.0) - 1.0) * u1(0.0); // -0.15
        assert_relative_eq!(f2.first_derivative(0.0), expect, max_relative = 1e-15);
        assert_relative_eq!(f2.first_derivative(-1e-12), expect, epsilon = 1e-5);
        assert_relative_eq!(f2.first_derivative(1e-12), expect, epsilon = 1e-5);
    }

    #[test]
    fn f2_left_second_derivative_blows_up_like_inverse_sqrt() {
        let f2 = make_f2(1.0).unwrap();
        for eps in [1e-3, 1e-4, 1e-5] {
            let ratio = f2.second_derivative(-eps, Side::Left)
                / f2.second_derivative(-4.0 * eps, Side::Left);
            assert!(
                (ratio - 2.0).abs() < 0.1,
                "eps {eps}: ratio {ratio}"
            );
        }
        assert_eq!(
            f2.second_derivative(0.0, Side::Left),
            f64::INFINITY
        );
        assert!(f2.second_derivative(0.0, Side::Right).is_finite());
    }

    #[test]
    fn f2_matches_finite_differences_away_from_zero() {
        let f2 = make_f2(1.0).unwrap();
        let step = 1e-6;
        for s in [-2.0, -0.3, 0.4, 3.0, 8.0] {
            let fd = (f2.value(s + step) - f2.value(s - step)) / (2.0 * step);
            assert_relative_eq!(f2.first_derivative(s), fd, max_relative = 1e-6);
        }
        // One-sided difference approaching the flagged point from the left.
        let s = -1e-3;
        let fd = (f2.value(s) - f2.value(s - step)) / step;
        assert_relative_eq!(f2.first_derivative(s), fd, max_relative = 1e-3);
    }

    #[test]
    fn make_f2_rejects_nonpositive_coefficient() {
        assert!(make_f2(0.0).is_err());
        assert!(make_f2(-1.0).is_err());
    }

    #[test]
    fn constraint_serde_schema() {
        let c: Constraint = serde_json::from_str(
            r#"{"kind":"dv-max","dose_level":0.5,"volume_fraction":0.25,"weight":1.5}"#,
        )
        .unwrap();
        assert_eq!(
            c,
            Constraint {
                kind: ConstraintKind::DvMax {
                    dose_level: 0.5,
                    volume_fraction: 0.25
                },
                weight: 1.5
            }
        );
        let e: Constraint = serde_json::from_str(
            r#"{"kind":"eud-max","dose_level":0.3,"alpha":2.0,"weight":1.0}"#,
        )
        .unwrap();
        assert!(matches!(e.kind, ConstraintKind::EudMax { .. }));
        assert!(e.validate().is_ok());
        let bad = Constraint {
            kind: ConstraintKind::DvMin {
                dose_level: 0.5,
                volume_fraction: 1.5,
            },
            weight: 1.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_constraint_list_is_rejected() {
        let err = ObjectiveSpec::new(
            PeakFamily::single_peak(),
            vec![],
            QuadratureSpec::grid(16),
        )
        .unwrap_err();
        assert!(matches!(err, ObjectiveError::EmptyConstraints));
    }
}
