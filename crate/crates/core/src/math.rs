//! Scalar and vector primitives shared by the loss heads, plus the
//! central-difference gradient oracle used throughout the test suites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp margin applied before `acos`.
pub const ACOS_EPS: f64 = 1e-7;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Slope `a` and center `b` of the shifted logistic `1 / (1 + exp(-a (x - b)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub a: f64,
    pub b: f64,
}

impl SigmoidParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let p = SigmoidParams { a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::invalid(format!(
                "sigmoid slope must be positive and finite, got {}",
                self.a
            )));
        }
        if !self.b.is_finite() {
            return Err(Error::invalid(format!(
                "sigmoid center must be finite, got {}",
                self.b
            )));
        }
        Ok(())
    }
}

/// `1 / (1 + exp(-t))` without overflow for any finite `t`.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Parameterized sigmoid `1 / (1 + exp(-A (x - B)))`.
pub fn param_sigmoid(x: f64, p: SigmoidParams) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("sigmoid input must be finite, got {x}")));
    }
    p.validate()?;
    Ok(logistic(p.a * (x - p.b)))
}

/// `log(sum(exp(v)))`, shifted by the maximum.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty vector"));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("log_sum_exp input must be finite, got {bad}")));
    }
    Ok(log_sum_exp_unchecked(v))
}

pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Clamps `c` into `[-1 + ACOS_EPS, 1 - ACOS_EPS]`.
#[inline]
pub fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
}

/// `acos` of the clamped cosine; the result always lies strictly inside `(0, pi)`.
#[inline]
pub fn safe_acos(c: f64) -> f64 {
    clamp_cos(c).acos()
}

/// Central differences `(f(theta + h e_k) - f(theta - h e_k)) / 2h` for every coordinate `k`.
///
/// `f` may fail; a failed or non-finite evaluation aborts the whole gradient.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut eval = |probe: &[f64], k: usize| -> Result<f64> {
        let v = f(probe)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!(
                "non-finite value {v} while perturbing coordinate {k}"
            )))
        }
    };
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = eval(&probe, k)?;
        probe[k] = orig - h;
        let down = eval(&probe, k)?;
        probe[k] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Block-relative error: `max |a - b| / max(max |a|, max |b|)`, or the raw absolute
/// error when both blocks are essentially zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient blocks differ in length");
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp(a: f64, b: f64) -> SigmoidParams {
        SigmoidParams::new(a, b).unwrap()
    }

    #[test]
    fn sigmoid_at_center_is_half() {
        assert_eq!(param_sigmoid(0.75, sp(35.0, 0.75)).unwrap(), 0.5);
    }

    #[test]
    fn sigmoid_at_ln2_offset_is_two_thirds() {
        for a in [0.3, 1.0, 35.0, 80.0] {
            let x = 0.75 + std::f64::consts::LN_2 / a;
            let v = param_sigmoid(x, sp(a, 0.75)).unwrap();
            assert!((v - 2.0 / 3.0).abs() < 1e-12, "a = {a}: {v}");
        }
    }

    #[test]
    fn sigmoid_matches_high_precision_value() {
        // mpmath, 40 digits: 0.60734604097564285686...
        let v = param_sigmoid(0.762462, sp(35.0, 0.75)).unwrap();
        assert!((v - 0.607_346_040_975_642_9).abs() < 1e-6, "{v}");
    }

    #[test]
    fn sigmoid_rejects_bad_input() {
        assert!(param_sigmoid(f64::NAN, sp(1.0, 0.0)).is_err());
        assert!(param_sigmoid(f64::INFINITY, sp(1.0, 0.0)).is_err());
        assert!(SigmoidParams::new(0.0, 0.0).is_err());
        assert!(SigmoidParams::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn sigmoid_does_not_overflow() {
        let p = sp(100.0, 0.0);
        assert_eq!(param_sigmoid(-1e6, p).unwrap(), 0.0);
        assert_eq!(param_sigmoid(1e6, p).unwrap(), 1.0);
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        // mpmath: 3.40760596444438030448...
        let v = log_sum_exp(&[1.0, 2.0, 3.0]).unwrap();
        assert!((v - 3.407_605_964_444_380_3).abs() < 1e-9);
    }

    #[test]
    fn lse_rejects_empty_and_non_finite() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::InvalidArgument(_))));
        assert!(log_sum_exp(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn safe_acos_examples() {
        assert!((safe_acos(0.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(safe_acos(1.0000001), (1.0 - ACOS_EPS).acos());
        assert_eq!(safe_acos(-3.0), (-1.0 + ACOS_EPS).acos());
        assert!((safe_acos(0.5) - 1.047_197_551_196_597_7).abs() < 1e-6);
    }

    #[test]
    fn fd_examples() {
        let g = finite_diff_grad(|t| Ok(t.iter().map(|v| v * v).sum()), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6, "{g:?}");
        let g = finite_diff_grad(|_| Ok(3.5), &[1.0, -2.0, 0.5], 1e-6).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_propagates_evaluation_failures() {
        let r = finite_diff_grad(|t| Ok(if t[0] > 1.0 { f64::NAN } else { 0.0 }), &[1.0], 1e-6);
        assert!(matches!(r, Err(Error::Evaluation(_))));
        let r = finite_diff_grad(|_| Err(Error::degenerate("boom")), &[1.0], 1e-6);
        assert!(matches!(r, Err(Error::DegenerateInput(_))));
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_of_zero_blocks() {
        assert_eq!(max_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sigmoid_is_monotone(
            a in 1e-3f64..=100.0,
            b in -5.0f64..=5.0,
            u in -1.0f64..1.0,
            gap in 1e-3f64..1.0,
        ) {
            let p = sp(a, b);
            // Stay inside the region where the logistic is not saturated to 0 or 1.
            let x1 = b + u * 20.0 / a;
            let x2 = x1 + gap * 10.0 / a;
            let (s1, s2) = (param_sigmoid(x1, p).unwrap(), param_sigmoid(x2, p).unwrap());
            prop_assert!(s1 < s2, "sigma({x1}) = {s1} !< sigma({x2}) = {s2}");
            prop_assert!(s1 > 0.0 && s2 < 1.0);
        }

        #[test]
        fn sigmoid_is_half_at_center(a in 1e-3f64..=100.0, b in -5.0f64..=5.0) {
            prop_assert_eq!(param_sigmoid(b, sp(a, b)).unwrap(), 0.5);
        }

        #[test]
        fn lse_is_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -1e6f64..1e6,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&v).unwrap() + c;
            // Adding |c| up to 1e6 rounds each entry at the 1e-10 level; compare
            // relative to the magnitude of the result.
            let tol = 1e-12 * (1.0 + c.abs()) * 4.0;
            prop_assert!((lhs - rhs).abs() <= tol, "{lhs} vs {rhs}");
        }

        #[test]
        fn lse_is_permutation_invariant(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let mut rev = v.clone();
            rev.reverse();
            let (a, b) = (log_sum_exp(&v).unwrap(), log_sum_exp(&rev).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn safe_acos_stays_in_range(c in -10.0f64..10.0) {
            let t = safe_acos(c);
            prop_assert!(t >= (1.0 - ACOS_EPS).acos() && t <= (-1.0 + ACOS_EPS).acos());
        }
    }
}
