use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    check_shapes, require_mode, softmax_xent, Backprop, ClassifierHead, CosineGeometry,
    EmbeddingBatch, LabelBatch, LossOutput, NormMode,
};
use crate::error::{Error, Result};
use crate::math::{clamp_cos, ACOS_EPS};

/// Multiplicative angular margin `m` (SphereFace).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AngularMarginParams {
    pub m: u32,
}

impl Default for AngularMarginParams {
    fn default() -> Self {
        AngularMarginParams { m: 4 }
    }
}

impl AngularMarginParams {
    pub fn new(m: u32) -> Result<Self> {
        let p = AngularMarginParams { m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("angular margin m must be at least 1"));
        }
        Ok(())
    }
}

fn interval(theta: f64, m: u32) -> Result<u32> {
    if m == 0 {
        return Err(Error::invalid("angular margin m must be at least 1"));
    }
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::invalid(format!("angle {theta} outside [0, pi]")));
    }
    Ok(((theta * m as f64 / PI).floor() as u32).min(m - 1))
}

/// Monotone extension of `cos(m theta)` to `[0, pi]`:
/// `(-1)^k cos(m theta) - 2k` on `[k pi / m, (k + 1) pi / m]`.
pub fn psi(theta: f64, m: u32) -> Result<f64> {
    let k = interval(theta, m)?;
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * (m as f64 * theta).cos() - 2.0 * k as f64)
}

/// `d psi / d theta`. At an interval boundary this is the derivative of the
/// interval starting there (right-hand), except at `pi` itself.
pub fn psi_derivative(theta: f64, m: u32) -> Result<f64> {
    let k = interval(theta, m)?;
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    Ok(-sign * m as f64 * (m as f64 * theta).sin())
}

/// Angular-softmax loss. Target logit `|x_i| psi(theta_{y_i,i})`, other logits
/// `|x_i| cos(theta_{j,i})`, against unit-normalized class columns. The head's
/// bias is ignored.
pub fn angular_softmax(
    xb: &EmbeddingBatch,
    yb: &LabelBatch,
    head: &ClassifierHead,
    p: AngularMarginParams,
) -> Result<LossOutput> {
    p.validate()?;
    check_shapes(xb, yb, head)?;
    require_mode(head, NormMode::UnitColumns, "angular softmax")?;
    let geo = CosineGeometry::new(xb, head)?;

    let n_classes = head.n_classes();
    let mut per_sample = Vec::with_capacity(xb.len());
    let mut dcos = Array2::zeros((xb.len(), n_classes));
    let mut dnorm = Vec::with_capacity(xb.len());
    for (i, &y) in yb.labels().iter().enumerate() {
        let r = geo.x_norms[i];
        let cos = geo.cos.row(i);

        let c = clamp_cos(cos[y]);
        let theta = c.acos();
        let psi_t = psi(theta, p.m)?;
        // d theta / d cos vanishes where the clamp is active.
        let dtheta_dc = if cos[y].abs() >= 1.0 - ACOS_EPS {
            0.0
        } else {
            -1.0 / theta.sin()
        };
        let dpsi_dc = psi_derivative(theta, p.m)? * dtheta_dc;

        let mut unit_logits = cos.to_owned();
        unit_logits[y] = psi_t;
        let logits = &unit_logits * r;

        let mut delta = vec![0.0; n_classes];
        per_sample.push(softmax_xent(logits.view(), y, &mut delta));

        let mut row = dcos.row_mut(i);
        for j in 0..n_classes {
            row[j] = delta[j] * r;
        }
        row[y] *= dpsi_dc;
        dnorm.push(delta.iter().zip(unit_logits.iter()).map(|(d, u)| d * u).sum());
    }

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

#[cfg(test)]
mod tests {
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    use super::super::test_support::*;
    use super::super::cosine_matrix;
    use super::*;

    fn unit_head(w: Array2<f64>) -> ClassifierHead {
        let n = w.ncols();
        ClassifierHead::new(w, Array1::zeros(n), NormMode::UnitColumns).unwrap()
    }

    #[test]
    fn psi_examples() {
        for m in 1..=6 {
            assert_eq!(psi(0.0, m).unwrap(), 1.0);
        }
        for t in [0.0, 0.3, 1.0, 2.5, PI] {
            assert!((psi(t, 1).unwrap() - t.cos()).abs() < 1e-15);
        }
        assert!((psi(PI, 4).unwrap() + 7.0).abs() < 1e-12);
    }

    #[test]
    fn psi_rejects_out_of_range() {
        assert!(psi(-1e-9, 2).is_err());
        assert!(psi(PI + 1e-9, 2).is_err());
        assert!(psi(1.0, 0).is_err());
        assert!(AngularMarginParams::new(0).is_err());
    }

    #[test]
    fn psi_is_continuous_at_boundaries() {
        for m in 1..=6u32 {
            for k in 1..m {
                let t = k as f64 * PI / m as f64;
                let left = psi(t - 1e-12, m).unwrap();
                let right = psi(t + 1e-12, m).unwrap();
                assert!((left - right).abs() < 1e-9, "m={m} k={k}: {left} vs {right}");
            }
        }
    }

    #[test]
    fn psi_derivative_is_right_handed_at_boundary() {
        // On [pi/2, pi] for m = 2: psi = -cos(2t) - 2, derivative 2 sin(2t), 0 at pi/2.
        let d = psi_derivative(PI / 2.0, 2).unwrap();
        assert!(d.abs() < 1e-12);
        let d = psi_derivative(PI / 3.0 + 0.1, 3).unwrap();
        let fd = (psi(PI / 3.0 + 0.1 + 1e-7, 3).unwrap() - psi(PI / 3.0 + 0.1 - 1e-7, 3).unwrap()) / 2e-7;
        assert!((d - fd).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_two_class_example() {
        let x = EmbeddingBatch::new(array![[2.0, 0.0]]).unwrap();
        let y = LabelBatch::new(vec![0], 2).unwrap();
        let h = unit_head(array![[1.0, 0.0], [0.0, 1.0]]);
        let out = angular_softmax(&x, &y, &h, AngularMarginParams::new(2).unwrap()).unwrap();
        // theta_y = 0 is clamped to acos(1 - 1e-7), which moves psi by ~4e-7.
        assert!((out.per_sample[0] - 0.126_928_011_042_972_5).abs() < 1e-6);
    }

    #[test]
    fn aligned_sample_gets_maximal_target_logit() {
        // psi(0) = 1 = max psi, so the target logit is |x| itself.
        let h = unit_head(array![[1.0, 0.0, -0.6], [0.0, 1.0, 0.8]]);
        let y = LabelBatch::new(vec![0], 3).unwrap();
        let x = EmbeddingBatch::new(array![[3.0, 0.0]]).unwrap();
        let l = angular_softmax(&x, &y, &h, AngularMarginParams::new(4).unwrap()).unwrap();
        let logits = array![[3.0, 0.0, -1.8]];
        let reference = naive_xent(&logits, &[0])[0];
        // The clamp at cos = 1 shifts psi by ~16 * 1e-7.
        assert!((l.per_sample[0] - reference).abs() < 1e-5);
        assert!(l.per_sample[0] > reference);
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let x = EmbeddingBatch::new(array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let y = LabelBatch::new(vec![0, 1], 2).unwrap();
        let h = unit_head(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            angular_softmax(&x, &y, &h, AngularMarginParams::default()),
            Err(Error::DegenerateInput(_))
        ));
        let bad = ClassifierHead::new(array![[1.0, 0.0], [0.0, 1.0]], Array1::zeros(2), NormMode::None).unwrap();
        assert!(matches!(
            angular_softmax(&x, &y, &bad, AngularMarginParams::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn margin_one_is_modified_softmax() {
        let mut r = rng(17);
        for _ in 0..20 {
            let x = gaussian(&mut r, 4, 6);
            let w = gaussian(&mut r, 6, 5);
            let y = labels(&mut r, 4, 5);
            let xb = EmbeddingBatch::new(x.clone()).unwrap();
            let h = unit_head(w);
            let out = angular_softmax(&xb, &y, &h, AngularMarginParams::new(1).unwrap()).unwrap();
            let cos = cosine_matrix(&xb, &h).unwrap().0;
            let mut logits = cos.clone();
            for (i, mut row) in logits.outer_iter_mut().enumerate() {
                row *= x.row(i).dot(&x.row(i)).sqrt();
            }
            for (a, b) in out.per_sample.iter().zip(naive_xent(&logits, y.labels())) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn psi_non_increasing(m in 1u32..=4, a in 0.0f64..=PI, b in 0.0f64..=PI) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(psi(lo, m).unwrap() >= psi(hi, m).unwrap() - 1e-12);
        }

        #[test]
        fn psi_below_cos(m in 2u32..=6, t in 1e-6f64..=PI) {
            prop_assert!(psi(t, m).unwrap() <= t.cos() + 1e-12);
        }
    }
}
