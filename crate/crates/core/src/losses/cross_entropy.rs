use ndarray::Array2;

use super::{check_shapes, require_mode, softmax_xent, Backprop, ClassifierHead, EmbeddingBatch, LabelBatch, LossOutput, NormMode};
use crate::error::Result;

/// Softmax cross-entropy on the affine logits `x_i . W_j + b_j`.
pub fn cross_entropy(
    xb: &EmbeddingBatch,
    yb: &LabelBatch,
    head: &ClassifierHead,
) -> Result<LossOutput> {
    check_shapes(xb, yb, head)?;
    require_mode(head, NormMode::None, "cross-entropy")?;

    let x = xb.view();
    let logits = x.dot(&head.weights) + &head.bias;
    let mut delta = Array2::zeros(logits.raw_dim());
    let mut per_sample = Vec::with_capacity(xb.len());
    for (i, &y) in yb.labels().iter().enumerate() {
        let mut row = vec![0.0; head.n_classes()];
        per_sample.push(softmax_xent(logits.row(i), y, &mut row));
        delta.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(LossOutput::assemble(
        per_sample,
        Backprop::Affine {
            x: x.clone(),
            w: head.weights.clone(),
            delta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array1};

    use super::super::test_support::*;
    use super::*;
    use crate::math::{finite_diff_grad, max_relative_error};

    fn head(w: Array2<f64>, b: Array1<f64>) -> ClassifierHead {
        ClassifierHead::new(w, b, NormMode::None).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let x = EmbeddingBatch::new(array![[0.3, -1.2, 4.0], [1.0, 1.0, 1.0]]).unwrap();
        let y = LabelBatch::new(vec![3, 9], 10).unwrap();
        let out = cross_entropy(&x, &y, &ClassifierHead::zeros(3, 10, NormMode::None)).unwrap();
        for l in &out.per_sample {
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
        assert!((out.mean_loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_class_example() {
        let x = EmbeddingBatch::new(array![[1.0, 0.0]]).unwrap();
        let y = LabelBatch::new(vec![0], 3).unwrap();
        let h = head(array![[1.0, 0.0, -1.0], [0.0, 1.0, 0.0]], Array1::zeros(3));
        let out = cross_entropy(&x, &y, &h).unwrap();
        // log(e + 1 + 1/e) - 1, via mpmath.
        assert!((out.per_sample[0] - 0.407_605_964_444_380_3).abs() < 1e-9);
    }

    #[test]
    fn large_target_bias_drives_loss_to_zero() {
        let x = EmbeddingBatch::new(array![[0.5, -0.5]]).unwrap();
        let y = LabelBatch::new(vec![1], 3).unwrap();
        let mut prev = f64::INFINITY;
        for bias in [0.0, 5.0, 20.0, 100.0, 800.0] {
            let h = head(array![[1.0, 0.2, 0.0], [0.0, 0.3, 1.0]], array![0.0, bias, 0.0]);
            let l = cross_entropy(&x, &y, &h).unwrap().per_sample[0];
            assert!(l >= 0.0 && l <= prev);
            prev = l;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn bias_shift_invariance() {
        let mut r = rng(5);
        let x = EmbeddingBatch::new(gaussian(&mut r, 4, 3)).unwrap();
        let y = labels(&mut r, 4, 5);
        let w = gaussian(&mut r, 3, 5);
        let b = gaussian(&mut r, 1, 5).row(0).to_owned();
        let a = cross_entropy(&x, &y, &head(w.clone(), b.clone())).unwrap();
        let s = cross_entropy(&x, &y, &head(w, b + 17.25)).unwrap();
        for (p, q) in a.per_sample.iter().zip(&s.per_sample) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_wrong_mode() {
        let x = EmbeddingBatch::new(array![[1.0, 0.0]]).unwrap();
        let y = LabelBatch::new(vec![0], 3).unwrap();
        assert!(cross_entropy(&x, &y, &ClassifierHead::zeros(3, 3, NormMode::None)).is_err());
        assert!(cross_entropy(&x, &y, &ClassifierHead::zeros(2, 4, NormMode::None)).is_err());
        let y2 = LabelBatch::new(vec![0, 1], 3).unwrap();
        assert!(cross_entropy(&x, &y2, &ClassifierHead::zeros(2, 3, NormMode::None)).is_err());
        let h = head(array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]], Array1::zeros(3));
        let h = ClassifierHead {
            norm_mode: NormMode::UnitColumns,
            ..h
        };
        assert!(cross_entropy(&x, &y, &h).is_err());
    }

    #[test]
    fn matches_naive_definition() {
        let mut r = rng(9);
        let x = gaussian(&mut r, 4, 6);
        let w = gaussian(&mut r, 6, 5);
        let b = gaussian(&mut r, 1, 5).row(0).to_owned();
        let y = labels(&mut r, 4, 5);
        let out = cross_entropy(&EmbeddingBatch::new(x.clone()).unwrap(), &y, &head(w.clone(), b.clone()))
            .unwrap();
        let reference = naive_xent(&(x.dot(&w) + &b), y.labels());
        for (a, b) in out.per_sample.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(21);
        let (n, d, c) = (3, 4, 5);
        let x = gaussian(&mut r, n, d);
        let w = gaussian(&mut r, d, c);
        let b = gaussian(&mut r, 1, c).row(0).to_owned();
        let y = labels(&mut r, n, c);
        let out = cross_entropy(&EmbeddingBatch::new(x.clone()).unwrap(), &y, &head(w.clone(), b.clone()))
            .unwrap();

        let gx = finite_diff_grad(
            |t| {
                let xb = EmbeddingBatch::new(Array2::from_shape_vec((n, d), t.to_vec()).unwrap())?;
                Ok(cross_entropy(&xb, &y, &head(w.clone(), b.clone()))?.mean_loss)
            },
            x.as_slice().unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(out.grad_x.as_slice().unwrap(), &gx) < 1e-7);

        let xb = EmbeddingBatch::new(x).unwrap();
        let gw = finite_diff_grad(
            |t| {
                let w = Array2::from_shape_vec((d, c), t.to_vec()).unwrap();
                Ok(cross_entropy(&xb, &y, &head(w, b.clone()))?.mean_loss)
            },
            w.as_slice().unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(out.grad_w.as_slice().unwrap(), &gw) < 1e-7);

        let gb = finite_diff_grad(
            |t| Ok(cross_entropy(&xb, &y, &head(w.clone(), Array1::from(t.to_vec())))?.mean_loss),
            b.as_slice().unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(out.grad_b.as_slice().unwrap(), &gb) < 1e-7);
    }
}
