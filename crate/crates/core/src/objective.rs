//! The six selectable training objectives: the three base losses, each with
//! and without the hard-mining wrapper.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hard_mining::{wrap_loss, HardMiningParams};
use crate::losses::{
    angular_softmax, arcface, cross_entropy, AngularMarginParams, ArcMarginParams, ClassifierHead,
    EmbeddingBatch, LabelBatch, LossOutput, NormMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "hm-ce")]
    HmCrossEntropy,
    #[serde(rename = "as")]
    AngularSoftmax,
    #[serde(rename = "hm-as")]
    HmAngularSoftmax,
    #[serde(rename = "af")]
    ArcFace,
    #[serde(rename = "hm-af")]
    HmArcFace,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::CrossEntropy,
        LossKind::HmCrossEntropy,
        LossKind::AngularSoftmax,
        LossKind::HmAngularSoftmax,
        LossKind::ArcFace,
        LossKind::HmArcFace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::HmCrossEntropy => "hm-ce",
            LossKind::AngularSoftmax => "as",
            LossKind::HmAngularSoftmax => "hm-as",
            LossKind::ArcFace => "af",
            LossKind::HmArcFace => "hm-af",
        }
    }

    pub fn is_hard_mined(self) -> bool {
        matches!(
            self,
            LossKind::HmCrossEntropy | LossKind::HmAngularSoftmax | LossKind::HmArcFace
        )
    }

    /// The head normalization the base loss expects.
    pub fn norm_mode(self) -> NormMode {
        match self {
            LossKind::CrossEntropy | LossKind::HmCrossEntropy => NormMode::None,
            _ => NormMode::UnitColumns,
        }
    }

    /// Whether the base loss reads the head bias.
    pub fn uses_bias(self) -> bool {
        self.norm_mode() == NormMode::None
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown loss {s:?} (expected one of ce, hm-ce, as, hm-as, af, hm-af)"
                ))
            })
    }
}

/// A loss selection together with every hyperparameter it may need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub loss: LossKind,
    pub hard_mining: HardMiningParams,
    pub angular: AngularMarginParams,
    pub arcface: ArcMarginParams,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::new(LossKind::HmCrossEntropy)
    }
}

/// Result of evaluating a [`LossSpec`] on one batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// The value being minimized.
    pub objective: f64,
    pub base_per_sample: Vec<f64>,
    pub base_mean: f64,
    /// Present for the hard-mined objectives.
    pub hm_mean: Option<f64>,
    pub grad_x: Array2<f64>,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
}

impl LossSpec {
    pub fn new(loss: LossKind) -> Self {
        LossSpec {
            loss,
            hard_mining: HardMiningParams::default(),
            angular: AngularMarginParams::default(),
            arcface: ArcMarginParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.loss {
            LossKind::AngularSoftmax | LossKind::HmAngularSoftmax => self.angular.validate()?,
            LossKind::ArcFace | LossKind::HmArcFace => self.arcface.validate()?,
            _ => {}
        }
        if self.loss.is_hard_mined() {
            self.hard_mining.validate()?;
        }
        Ok(())
    }

    pub fn base_loss(
        &self,
        xb: &EmbeddingBatch,
        yb: &LabelBatch,
        head: &ClassifierHead,
    ) -> Result<LossOutput> {
        match self.loss {
            LossKind::CrossEntropy | LossKind::HmCrossEntropy => cross_entropy(xb, yb, head),
            LossKind::AngularSoftmax | LossKind::HmAngularSoftmax => {
                angular_softmax(xb, yb, head, self.angular)
            }
            LossKind::ArcFace | LossKind::HmArcFace => arcface(xb, yb, head, self.arcface),
        }
    }

    pub fn evaluate(
        &self,
        xb: &EmbeddingBatch,
        yb: &LabelBatch,
        head: &ClassifierHead,
    ) -> Result<Evaluation> {
        let base = self.base_loss(xb, yb, head)?;
        if self.loss.is_hard_mined() {
            let w = wrap_loss(base, &self.hard_mining)?;
            Ok(Evaluation {
                objective: w.hm_mean_loss,
                base_mean: w.base.mean_loss,
                hm_mean: Some(w.hm_mean_loss),
                base_per_sample: w.base.per_sample,
                grad_x: w.grad_x,
                grad_w: w.grad_w,
                grad_b: w.grad_b,
            })
        } else {
            Ok(Evaluation {
                objective: base.mean_loss,
                base_mean: base.mean_loss,
                hm_mean: None,
                base_per_sample: base.per_sample,
                grad_x: base.grad_x,
                grad_w: base.grad_w,
                grad_b: base.grad_b,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("softmax".parse::<LossKind>().is_err());
    }

    #[test]
    fn spec_validation_only_checks_relevant_params() {
        let mut s = LossSpec::new(LossKind::CrossEntropy);
        s.angular.m = 0;
        s.hard_mining.alpha = -1.0;
        assert!(s.validate().is_ok());
        s.loss = LossKind::HmCrossEntropy;
        assert!(s.validate().is_err());
        s.loss = LossKind::AngularSoftmax;
        assert!(s.validate().is_err());
    }
}
