//! The hard-mining wrapper `L -> alpha * L * sigma(beta * L)` with the shifted
//! logistic `sigma(x) = 1 / (1 + exp(-A (x - B)))`.
//!
//! Below the crossing point `L*` the wrapper shrinks a loss towards zero, above
//! it the loss is amplified towards `alpha * L`. Applied per sample, this
//! silences easy samples and lets the hard ones dominate the batch gradient.
//!
//! ```
//! use hardmine::hard_mining::{crossing_point, hard_mine, HardMiningParams};
//!
//! let p = HardMiningParams::default();
//! let l_star = crossing_point(&p).unwrap();
//! assert!((l_star - 0.699822).abs() < 1e-6);
//! assert!(hard_mine(0.2, &p).unwrap() < 0.2);
//! assert!(hard_mine(2.0, &p).unwrap() > 2.0);
//! ```

use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{mean, LossOutput};
use crate::math::{logistic, SigmoidParams};

/// Whether the wrapper sees each sample's loss or only the batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardMiningMode {
    PerSample,
    BatchMean,
}

impl FromStr for HardMiningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" | "per-sample" => Ok(HardMiningMode::PerSample),
            "batch_mean" | "batch-mean" => Ok(HardMiningMode::BatchMean),
            other => Err(Error::invalid(format!(
                "unknown hard-mining mode {other:?} (expected per-sample or batch-mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardMiningParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigmoid: SigmoidParams,
    pub mode: HardMiningMode,
}

impl Default for HardMiningParams {
    fn default() -> Self {
        HardMiningParams {
            alpha: 1.5,
            beta: 1.1,
            sigmoid: SigmoidParams { a: 35.0, b: 0.75 },
            mode: HardMiningMode::PerSample,
        }
    }
}

impl HardMiningParams {
    pub fn new(alpha: f64, beta: f64, a: f64, b: f64, mode: HardMiningMode) -> Result<Self> {
        let p = HardMiningParams {
            alpha,
            beta,
            sigmoid: SigmoidParams { a, b },
            mode,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        self.sigmoid.validate()
    }

    /// `sigma(beta * L)`.
    fn gate(&self, loss: f64) -> f64 {
        logistic(self.sigmoid.a * (self.beta * loss - self.sigmoid.b))
    }
}

fn check_loss(loss: f64, p: &HardMiningParams) -> Result<()> {
    p.validate()?;
    if !loss.is_finite() {
        return Err(Error::invalid(format!("base loss must be finite, got {loss}")));
    }
    if loss < 0.0 {
        return Err(Error::invalid(format!("base loss must be non-negative, got {loss}")));
    }
    Ok(())
}

/// `alpha * L * sigma(beta * L)`.
pub fn hard_mine(loss: f64, p: &HardMiningParams) -> Result<f64> {
    check_loss(loss, p)?;
    Ok(p.alpha * loss * p.gate(loss))
}

/// `d/dL [alpha * L * sigma(beta * L)] = alpha * (g + L * beta * A * g * (1 - g))`.
pub fn hard_mine_derivative(loss: f64, p: &HardMiningParams) -> Result<f64> {
    check_loss(loss, p)?;
    let g = p.gate(loss);
    Ok(p.alpha * (g + loss * p.beta * p.sigmoid.a * g * (1.0 - g)))
}

/// The literal step-by-step form: `x = beta * L`, `z = sigma(x)`, return
/// `alpha * x * z`. It carries an extra factor `beta` relative to [`hard_mine`]
/// and is kept only as a reference; training uses [`hard_mine`].
pub fn hard_mine_alg1(loss: f64, p: &HardMiningParams) -> Result<f64> {
    check_loss(loss, p)?;
    let x = p.beta * loss;
    let y = p.sigmoid.a * (x - p.sigmoid.b);
    let z = logistic(y);
    Ok(p.alpha * x * z)
}

/// The unique `L* > 0` with `hard_mine(L*) = L*`.
///
/// Solving `alpha * sigma(beta L) = 1` gives `L* = (B - ln(alpha - 1) / A) / beta`.
pub fn crossing_point(p: &HardMiningParams) -> Result<f64> {
    p.validate()?;
    if p.alpha <= 1.0 {
        return Err(Error::NoCrossing { alpha: p.alpha });
    }
    let l = (p.sigmoid.b - (p.alpha - 1.0).ln() / p.sigmoid.a) / p.beta;
    if l <= 0.0 {
        // Every positive loss is already amplified.
        return Err(Error::NoCrossing { alpha: p.alpha });
    }
    Ok(l)
}

/// One point of the loss-versus-likelihood curve: the cross-entropy loss
/// `-ln p` of a correct-class probability `p` and its hard-mined value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub base: f64,
    pub hm: f64,
}

pub fn curve_point(p: f64, params: &HardMiningParams) -> Result<CurvePoint> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("probability {p} outside (0, 1)")));
    }
    let base = -p.ln();
    Ok(CurvePoint {
        p,
        base,
        hm: hard_mine(base, params)?,
    })
}

/// `p_min, p_min + step, ...` up to `p_max`, every point inside `(0, 1)`.
///
/// Points are `p_min + k * step` rounded to 12 decimals, so a decimal grid
/// prints cleanly.
pub fn probability_grid(p_min: f64, p_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(p_min > 0.0 && p_max < 1.0 && p_min <= p_max) {
        return Err(Error::invalid(format!(
            "probability grid [{p_min}, {p_max}] must lie inside (0, 1)"
        )));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid(format!("grid step must be > 0, got {step}")));
    }
    let n = ((p_max - p_min) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|k| ((p_min + k as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// `dL_HM / dL`: one factor per sample, or one for the whole batch.
#[derive(Debug, Clone, PartialEq)]
pub enum GradScale {
    PerSample(Vec<f64>),
    Broadcast(f64),
}

impl GradScale {
    /// Factor applied to sample `i`.
    pub fn for_sample(&self, i: usize) -> f64 {
        match self {
            GradScale::PerSample(v) => v[i],
            GradScale::Broadcast(s) => *s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WrappedLossOutput {
    pub base: LossOutput,
    /// The objective: mean of `hm_per_sample` in per-sample mode,
    /// `hard_mine(base.mean_loss)` in batch-mean mode.
    pub hm_mean_loss: f64,
    /// `hard_mine` of each base loss. Diagnostic only in batch-mean mode.
    pub hm_per_sample: Vec<f64>,
    pub grad_scale: GradScale,
    pub grad_x: Array2<f64>,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
}

/// Applies the wrapper to a base loss and re-weights its gradients.
pub fn wrap_loss(base: LossOutput, p: &HardMiningParams) -> Result<WrappedLossOutput> {
    p.validate()?;
    let n = base.per_sample.len();
    let hm_per_sample = base
        .per_sample
        .iter()
        .map(|&l| hard_mine(l, p))
        .collect::<Result<Vec<_>>>()?;

    let (hm_mean_loss, grad_scale, weights) = match p.mode {
        HardMiningMode::PerSample => {
            let scale = base
                .per_sample
                .iter()
                .map(|&l| hard_mine_derivative(l, p))
                .collect::<Result<Vec<_>>>()?;
            let weights: Vec<f64> = scale.iter().map(|s| s / n as f64).collect();
            (mean(&hm_per_sample), GradScale::PerSample(scale), weights)
        }
        HardMiningMode::BatchMean => {
            let s = hard_mine_derivative(base.mean_loss, p)?;
            (
                hard_mine(base.mean_loss, p)?,
                GradScale::Broadcast(s),
                vec![s / n as f64; n],
            )
        }
    };
    let g = base.weighted_gradients(&weights)?;
    Ok(WrappedLossOutput {
        base,
        hm_mean_loss,
        hm_per_sample,
        grad_scale,
        grad_x: g.x,
        grad_w: g.w,
        grad_b: g.b,
    })
}
