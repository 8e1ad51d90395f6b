use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    check_shapes, require_mode, softmax_xent, Backprop, ClassifierHead, CosineGeometry,
    EmbeddingBatch, LabelBatch, LossOutput, NormMode,
};
use crate::error::{Error, Result};
use crate::math::{clamp_cos, ACOS_EPS};

/// Feature scale `s` and additive angular margin `m` (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArcMarginParams {
    pub s: f64,
    pub m: f64,
}

impl Default for ArcMarginParams {
    fn default() -> Self {
        ArcMarginParams { s: 64.0, m: 0.5 }
    }
}

impl ArcMarginParams {
    pub fn new(s: f64, m: f64) -> Result<Self> {
        let p = ArcMarginParams { s, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::invalid(format!("arcface scale must be positive, got {}", self.s)));
        }
        if !(0.0..PI).contains(&self.m) {
            return Err(Error::invalid(format!(
                "arcface margin must lie in [0, pi), got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// `cos(theta + m)` for the target class and its derivative with respect to `cos theta`.
///
/// The cosine is clamped to `[-1 + eps, 1 - eps]` first. Past `theta + m > pi`
/// the value switches to `cos theta - m sin m`.
pub fn arcface_target_logit(cos: f64, m: f64) -> (f64, f64) {
    let c = clamp_cos(cos);
    let clamped = cos.abs() >= 1.0 - ACOS_EPS;
    let (sin_m, cos_m) = m.sin_cos();
    if c >= -cos_m {
        let sin_t = (1.0 - c * c).sqrt();
        let value = c * cos_m - sin_t * sin_m;
        let slope = if clamped { 0.0 } else { cos_m + c * sin_m / sin_t };
        (value, slope)
    } else {
        (c - m * sin_m, if clamped { 0.0 } else { 1.0 })
    }
}

/// Additive angular margin loss on unit-normalized embeddings and class
/// columns, scaled by `s`. The head's bias is ignored.
pub fn arcface(
    xb: &EmbeddingBatch,
    yb: &LabelBatch,
    head: &ClassifierHead,
    p: ArcMarginParams,
) -> Result<LossOutput> {
    p.validate()?;
    check_shapes(xb, yb, head)?;
    require_mode(head, NormMode::UnitColumns, "arcface")?;
    let geo = CosineGeometry::new(xb, head)?;

    let n_classes = head.n_classes();
    let mut per_sample = Vec::with_capacity(xb.len());
    let mut dcos = Array2::zeros((xb.len(), n_classes));
    for (i, &y) in yb.labels().iter().enumerate() {
        let cos = geo.cos.row(i);
        let (target, slope) = arcface_target_logit(cos[y], p.m);
        let mut logits = &cos * p.s;
        logits[y] = p.s * target;

        let mut delta = vec![0.0; n_classes];
        per_sample.push(softmax_xent(logits.view(), y, &mut delta));

        let mut row = dcos.row_mut(i);
        for j in 0..n_classes {
            row[j] = delta[j] * p.s;
        }
        row[y] *= slope;
    }

    let dnorm = vec![0.0; xb.len()];
    Ok(LossOutput::assemble(
        per_sample,
        Backprop::Cosine {
            unit_x: geo.unit_x,
            x_norms: geo.x_norms,
            unit_w: geo.unit_w,
            w_norms: geo.w_norms,
            dcos,
            dnorm,
        },
    ))
}
