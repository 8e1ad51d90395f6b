//! Forward and analytic backward passes for the three base losses:
//! softmax cross-entropy, multiplicative angular-margin softmax and additive
//! angular-margin (ArcFace) softmax.
//!
//! Every loss reduces to a softmax cross-entropy over per-sample logits. The
//! backward pass keeps the per-sample logit gradients around so that a caller
//! can re-weight individual samples afterwards ([`LossOutput::weighted_gradients`]);
//! the hard-mining wrapper relies on this.

mod angular;
mod arcface;
mod cross_entropy;

pub use angular::{angular_softmax, psi, psi_derivative, AngularMarginParams};
pub use arcface::{arcface, arcface_target_logit, ArcMarginParams};
pub use cross_entropy::cross_entropy;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_sum_exp_unchecked;

/// Rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Array2<f64>);

impl EmbeddingBatch {
    pub fn new(x: Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid(format!(
                "embedding batch must be non-empty, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding batch contains non-finite entries"));
        }
        Ok(EmbeddingBatch(x))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged embedding rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(x)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("label batch needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(LabelBatch { labels, n_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Columns are used as stored.
    None,
    /// Each column is divided by its Euclidean norm at loss time. Stored
    /// parameters stay raw and gradients flow through the normalization.
    UnitColumns,
}

/// Linear classifier: `weights` is `d x n` (one column per class), `bias` has length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm_mode: NormMode,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, norm_mode: NormMode) -> Result<Self> {
        let head = ClassifierHead {
            weights,
            bias,
            norm_mode,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn zeros(dim: usize, n_classes: usize, norm_mode: NormMode) -> Self {
        ClassifierHead {
            weights: Array2::zeros((dim, n_classes)),
            bias: Array1::zeros(n_classes),
            norm_mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.nrows() == 0 || self.weights.ncols() == 0 {
            return Err(Error::invalid("classifier head must have non-zero shape"));
        }
        if self.bias.len() != self.weights.ncols() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} classes",
                self.bias.len(),
                self.weights.ncols()
            )));
        }
        if self.weights.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("classifier head contains non-finite parameters"));
        }
        Ok(())
    }
}

/// `cos(theta_{j,i})` between sample `i` and class column `j`, clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosSimMatrix(pub Array2<f64>);

/// Gradients of a scalar objective with respect to the embeddings and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub x: Array2<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub mean_loss: f64,
    pub per_sample: Vec<f64>,
    pub grad_x: Array2<f64>,
    pub grad_w: Array2<f64>,
    /// Zero for the cosine-based losses, which do not use a bias.
    pub grad_b: Array1<f64>,
    backprop: Backprop,
}

impl LossOutput {
    fn assemble(per_sample: Vec<f64>, backprop: Backprop) -> Self {
        let n = per_sample.len() as f64;
        let mean_loss = mean(&per_sample);
        let weights = vec![1.0 / n; per_sample.len()];
        let g = backprop.gradients(&weights);
        LossOutput {
            mean_loss,
            per_sample,
            grad_x: g.x,
            grad_w: g.w,
            grad_b: g.b,
            backprop,
        }
    }

    /// Gradient of `sum_i weights[i] * per_sample[i]`.
    ///
    /// With every weight equal to `1/N` this reproduces `grad_x`, `grad_w` and `grad_b`.
    pub fn weighted_gradients(&self, weights: &[f64]) -> Result<Gradients> {
        if weights.len() != self.per_sample.len() {
            return Err(Error::invalid(format!(
                "{} sample weights for a batch of {}",
                weights.len(),
                self.per_sample.len()
            )));
        }
        Ok(self.backprop.gradients(weights))
    }

    pub fn gradients(&self) -> Gradients {
        Gradients {
            x: self.grad_x.clone(),
            w: self.grad_w.clone(),
            b: self.grad_b.clone(),
        }
    }
}

/// Arithmetic mean with a fixed left-to-right summation order.
pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-sample state needed to push logit gradients back to `x` and `W`.
#[derive(Debug, Clone)]
enum Backprop {
    /// `z = x W + b`.
    Affine {
        x: Array2<f64>,
        w: Array2<f64>,
        /// `d loss_i / d z_ij`.
        delta: Array2<f64>,
    },
    /// `z_ij = f_ij(|x_i|, cos_ij)` with `cos_ij = u_i . w_hat_j`.
    Cosine {
        unit_x: Array2<f64>,
        x_norms: Vec<f64>,
        unit_w: Array2<f64>,
        w_norms: Vec<f64>,
        /// `d loss_i / d cos_ij`.
        dcos: Array2<f64>,
        /// `d loss_i / d |x_i|`.
        dnorm: Vec<f64>,
    },
}

impl Backprop {
    fn gradients(&self, weights: &[f64]) -> Gradients {
        match self {
            Backprop::Affine { x, w, delta } => {
                let d = scale_rows(delta, weights);
                Gradients {
                    x: d.dot(&w.t()),
                    w: x.t().dot(&d),
                    b: d.sum_axis(Axis(0)),
                }
            }
            Backprop::Cosine {
                unit_x,
                x_norms,
                unit_w,
                w_norms,
                dcos,
                dnorm,
            } => {
                let g = scale_rows(dcos, weights);
                let du = g.dot(&unit_w.t());
                let dw_hat = unit_x.t().dot(&g);

                let mut gx = Array2::zeros(unit_x.raw_dim());
                for (i, mut row) in gx.outer_iter_mut().enumerate() {
                    let u = unit_x.row(i);
                    let dui = du.row(i);
                    let radial = weights[i] * dnorm[i];
                    let along = u.dot(&dui);
                    for k in 0..row.len() {
                        row[k] = radial * u[k] + (dui[k] - along * u[k]) / x_norms[i];
                    }
                }
                let mut gw = Array2::zeros(unit_w.raw_dim());
                for j in 0..unit_w.ncols() {
                    let wj = unit_w.column(j);
                    let dwj = dw_hat.column(j);
                    let along = wj.dot(&dwj);
                    for k in 0..unit_w.nrows() {
                        gw[[k, j]] = (dwj[k] - along * wj[k]) / w_norms[j];
                    }
                }
                Gradients {
                    x: gx,
                    w: gw,
                    b: Array1::zeros(unit_w.ncols()),
                }
            }
        }
    }
}

fn scale_rows(m: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let mut out = m.clone();
    for (mut row, &w) in out.outer_iter_mut().zip(weights) {
        row *= w;
    }
    out
}

/// Softmax cross-entropy of one logit row: returns the loss and writes
/// `softmax(z) - onehot(y)` into `delta`.
///
/// When the target logit is the largest the loss is `ln(1 + r)` with
/// `r = sum_{j != y} exp(z_j - z_y) <= n - 1`, which keeps full relative
/// precision for tiny losses instead of cancelling `lse - z_y`.
fn softmax_xent(logits: ArrayView1<f64>, target: usize, delta: &mut [f64]) -> f64 {
    let z: Vec<f64> = logits.to_vec();
    let zy = z[target];
    if z.iter().all(|&v| v <= zy) {
        let mut r = 0.0;
        for (j, d) in delta.iter_mut().enumerate() {
            *d = if j == target { 0.0 } else { (z[j] - zy).exp() };
            r += *d;
        }
        for d in delta.iter_mut() {
            *d /= 1.0 + r;
        }
        delta[target] = -r / (1.0 + r);
        return r.ln_1p();
    }
    let lse = log_sum_exp_unchecked(&z);
    for (j, d) in delta.iter_mut().enumerate() {
        *d = (z[j] - lse).exp();
    }
    delta[target] -= 1.0;
    lse - zy
}

fn check_shapes(xb: &EmbeddingBatch, yb: &LabelBatch, head: &ClassifierHead) -> Result<()> {
    head.validate()?;
    if xb.len() != yb.len() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} labels",
            xb.len(),
            yb.len()
        )));
    }
    if xb.dim() != head.dim() {
        return Err(Error::invalid(format!(
            "embedding dim {} does not match head dim {}",
            xb.dim(),
            head.dim()
        )));
    }
    if yb.n_classes() != head.n_classes() {
        return Err(Error::invalid(format!(
            "labels declare {} classes, head has {}",
            yb.n_classes(),
            head.n_classes()
        )));
    }
    Ok(())
}

/// Normalized geometry shared by the cosine-based losses.
struct CosineGeometry {
    unit_x: Array2<f64>,
    x_norms: Vec<f64>,
    unit_w: Array2<f64>,
    w_norms: Vec<f64>,
    cos: Array2<f64>,
}

impl CosineGeometry {
    fn new(xb: &EmbeddingBatch, head: &ClassifierHead) -> Result<Self> {
        let x = xb.view();
        let mut unit_x = x.clone();
        let mut x_norms = Vec::with_capacity(x.nrows());
        for (i, mut row) in unit_x.outer_iter_mut().enumerate() {
            let r = row.dot(&row).sqrt();
            if r == 0.0 {
                return Err(Error::degenerate(format!("embedding {i} has zero norm")));
            }
            row /= r;
            x_norms.push(r);
        }
        let mut unit_w = head.weights.to_owned();
        let mut w_norms = Vec::with_capacity(unit_w.ncols());
        for (j, mut col) in unit_w.axis_iter_mut(Axis(1)).enumerate() {
            let r = col.dot(&col).sqrt();
            if r == 0.0 {
                return Err(Error::degenerate(format!("class column {j} has zero norm")));
            }
            col /= r;
            w_norms.push(r);
        }
        let cos = unit_x.dot(&unit_w).mapv(|c| c.clamp(-1.0, 1.0));
        Ok(CosineGeometry {
            unit_x,
            x_norms,
            unit_w,
            w_norms,
            cos,
        })
    }
}

/// Cosine similarities between every embedding and every normalized class column.
pub fn cosine_matrix(xb: &EmbeddingBatch, head: &ClassifierHead) -> Result<CosSimMatrix> {
    if xb.dim() != head.dim() {
        return Err(Error::invalid(format!(
            "embedding dim {} does not match head dim {}",
            xb.dim(),
            head.dim()
        )));
    }
    Ok(CosSimMatrix(CosineGeometry::new(xb, head)?.cos))
}

fn require_mode(head: &ClassifierHead, mode: NormMode, loss: &str) -> Result<()> {
    if head.norm_mode != mode {
        return Err(Error::invalid(format!(
            "{loss} requires a head with {mode:?} normalization, got {:?}",
            head.norm_mode
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    pub fn labels(rng: &mut ChaCha8Rng, len: usize, n: usize) -> LabelBatch {
        LabelBatch::new((0..len).map(|_| rng.random_range(0..n)).collect(), n).unwrap()
    }

    /// Reference softmax cross-entropy per row, straight from the definition.
    pub fn naive_xent(logits: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
        logits
            .outer_iter()
            .zip(labels)
            .map(|(row, &y)| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|z| (z - m).exp()).sum();
                m + s.ln() - row[y]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn label_batch_validates_range() {
        assert!(LabelBatch::new(vec![0, 3], 3).is_err());
        assert!(LabelBatch::new(vec![], 0).is_err());
        assert!(LabelBatch::new(vec![0, 2], 3).is_ok());
    }

    #[test]
    fn tiny_losses_keep_relative_precision() {
        let mut delta = [0.0; 3];
        let l = softmax_xent(ndarray::aview1(&[40.0, 0.0, -3.0]), 0, &mut delta);
        let want = ((-40f64).exp() + (-43f64).exp()).ln_1p();
        assert!((l - want).abs() <= 1e-15 * want);
        assert!((delta[0] + want).abs() <= 1e-14 * want);
        assert!((delta.iter().sum::<f64>()).abs() < 1e-30);

        let l = softmax_xent(ndarray::aview1(&[0.0, 800.0]), 0, &mut delta[..2]);
        assert_eq!(l, 800.0);
        assert_eq!(delta[..2], [-1.0, 1.0]);
    }

    #[test]
    fn embedding_batch_rejects_empty_and_nan() {
        assert!(EmbeddingBatch::new(Array2::zeros((0, 3))).is_err());
        assert!(EmbeddingBatch::new(Array2::from_elem((1, 2), f64::NAN)).is_err());
        assert!(EmbeddingBatch::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn cosine_matrix_is_clamped_and_scale_free() {
        let mut r = rng(3);
        let x = gaussian(&mut r, 4, 5);
        let w = gaussian(&mut r, 5, 3);
        let head = ClassifierHead::new(w.clone(), Array1::zeros(3), NormMode::UnitColumns).unwrap();
        let c1 = cosine_matrix(&EmbeddingBatch::new(x.clone()).unwrap(), &head).unwrap();
        let c2 = cosine_matrix(&EmbeddingBatch::new(x * 4.0).unwrap(), &head).unwrap();
        for (a, b) in c1.0.iter().zip(c2.0.iter()) {
            assert!((a - b).abs() < 1e-14);
            assert!((-1.0..=1.0).contains(a));
        }
    }

    #[test]
    fn weighted_gradients_with_uniform_weights_reproduce_base() {
        let mut r = rng(11);
        let x = EmbeddingBatch::new(gaussian(&mut r, 3, 4)).unwrap();
        let y = labels(&mut r, 3, 5);
        let head = ClassifierHead::new(gaussian(&mut r, 4, 5), Array1::zeros(5), NormMode::None)
            .unwrap();
        let out = cross_entropy(&x, &y, &head).unwrap();
        let g = out.weighted_gradients(&[1.0 / 3.0; 3]).unwrap();
        assert_eq!(g, out.gradients());
        assert!(out.weighted_gradients(&[1.0; 2]).is_err());
    }
}
