//! Randomized finite-difference check of the analytic loss gradients.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::{cosine_matrix, ClassifierHead, EmbeddingBatch, LabelBatch};
use crate::math::{finite_diff_grad, max_relative_error, safe_acos, DEFAULT_FD_STEP};
use crate::objective::{LossKind, LossSpec};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Distance from a clamp or a kink below which an instance is redrawn.
const DEGENERATE_MARGIN: f64 = 1e-3;

/// Largest instance shape drawn: `N <= 4`, `d <= 8`, `n <= 5`.
const MAX_SAMPLES: usize = 4;
const MAX_DIM: usize = 8;
const MAX_CLASSES: usize = 5;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Negative control: perturbs the analytic head gradient before comparing.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            trials: 100,
            seed: 0,
            step: DEFAULT_FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub block: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub trials: usize,
    /// Draws rejected for sitting on a clamp or a piecewise boundary.
    pub skipped: usize,
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// One random problem: embeddings, labels and a head.
#[derive(Debug, Clone)]
pub struct Instance {
    pub x: Array2<f64>,
    pub labels: LabelBatch,
    pub head: ClassifierHead,
}

pub fn random_instance(spec: &LossSpec, rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=MAX_SAMPLES);
    let d = rng.random_range(2..=MAX_DIM);
    let c = rng.random_range(2..=MAX_CLASSES);
    let mut gauss = |rows, cols| Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
    let x = gauss(n, d);
    let w = gauss(d, c);
    let bias = if spec.loss.uses_bias() {
        gauss(1, c).row(0).to_owned()
    } else {
        Array1::zeros(c)
    };
    let labels = LabelBatch::new((0..n).map(|_| rng.random_range(0..c)).collect(), c)
        .expect("labels drawn in range");
    Instance {
        x,
        labels,
        head: ClassifierHead {
            weights: w,
            bias,
            norm_mode: spec.loss.norm_mode(),
        },
    }
}

/// True when the instance sits near a point where the loss is clamped or
/// only piecewise smooth.
pub fn is_degenerate(spec: &LossSpec, inst: &Instance) -> bool {
    if spec.loss.uses_bias() {
        return false;
    }
    let Ok(xb) = EmbeddingBatch::new(inst.x.clone()) else {
        return true;
    };
    let Ok(cos) = cosine_matrix(&xb, &inst.head) else {
        return true;
    };
    if cos.0.iter().any(|c| c.abs() > 1.0 - DEGENERATE_MARGIN) {
        return true;
    }
    inst.labels.labels().iter().enumerate().any(|(i, &y)| {
        let theta = safe_acos(cos.0[[i, y]]);
        match spec.loss {
            LossKind::AngularSoftmax | LossKind::HmAngularSoftmax => {
                let m = spec.angular.m;
                (1..m).any(|k| (theta - k as f64 * PI / m as f64).abs() < DEGENERATE_MARGIN)
            }
            LossKind::ArcFace | LossKind::HmArcFace => {
                (theta - (PI - spec.arcface.m)).abs() < DEGENERATE_MARGIN
            }
            _ => false,
        }
    })
}

/// Per-block relative errors for one instance.
pub fn check_instance(
    spec: &LossSpec,
    inst: &Instance,
    step: f64,
    corrupt: bool,
) -> Result<Vec<BlockError>> {
    let xb = EmbeddingBatch::new(inst.x.clone())?;
    let eval = spec.evaluate(&xb, &inst.labels, &inst.head)?;
    let mut grad_w = eval.grad_w.clone();
    if corrupt {
        grad_w[[0, 0]] += 1e-2 * grad_w.iter().fold(1e-3_f64, |m, v| m.max(v.abs()));
    }

    let (n, d) = inst.x.dim();
    let gx = finite_diff_grad(
        |t| {
            let xb = EmbeddingBatch::new(Array2::from_shape_vec((n, d), t.to_vec()).expect("shape"))?;
            Ok(spec.evaluate(&xb, &inst.labels, &inst.head)?.objective)
        },
        &flat(&inst.x),
        step,
    )?;
    let shape = inst.head.weights.dim();
    let gw = finite_diff_grad(
        |t| {
            let head = ClassifierHead {
                weights: Array2::from_shape_vec(shape, t.to_vec()).expect("shape"),
                ..inst.head.clone()
            };
            Ok(spec.evaluate(&xb, &inst.labels, &head)?.objective)
        },
        &flat(&inst.head.weights),
        step,
    )?;

    let mut blocks = vec![
        BlockError {
            block: "x",
            max_rel_err: max_relative_error(&flat(&eval.grad_x), &gx),
        },
        BlockError {
            block: "W",
            max_rel_err: max_relative_error(&flat(&grad_w), &gw),
        },
    ];
    if spec.loss.uses_bias() {
        let gb = finite_diff_grad(
            |t| {
                let head = ClassifierHead {
                    bias: Array1::from(t.to_vec()),
                    ..inst.head.clone()
                };
                Ok(spec.evaluate(&xb, &inst.labels, &head)?.objective)
            },
            &inst.head.bias.to_vec(),
            step,
        )?;
        blocks.push(BlockError {
            block: "b",
            max_rel_err: max_relative_error(&eval.grad_b.to_vec(), &gb),
        });
    }
    Ok(blocks)
}

/// Runs `opts.trials` non-degenerate random instances and keeps the worst
/// relative error seen for each parameter block.
pub fn run(spec: &LossSpec, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: Vec<BlockError> = Vec::new();
    let mut skipped = 0;
    let mut done = 0;
    while done < opts.trials {
        let inst = random_instance(spec, &mut rng);
        if is_degenerate(spec, &inst) {
            skipped += 1;
            continue;
        }
        for b in check_instance(spec, &inst, opts.step, opts.corrupt)? {
            match worst.iter_mut().find(|w| w.block == b.block) {
                Some(w) => w.max_rel_err = w.max_rel_err.max(b.max_rel_err),
                None => worst.push(b),
            }
        }
        done += 1;
    }
    Ok(GradcheckReport {
        loss: spec.loss,
        trials: done,
        skipped,
        blocks: worst,
        tolerance: opts.tolerance,
    })
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_a_short_run() {
        for kind in LossKind::ALL {
            let opts = GradcheckOptions {
                trials: 10,
                seed: 7,
                ..GradcheckOptions::default()
            };
            let r = run(&LossSpec::new(kind), &opts).unwrap();
            assert!(r.passed(), "{kind}: {r:?}");
            assert_eq!(r.trials, 10);
            let expected_blocks = if kind.uses_bias() { 3 } else { 2 };
            assert_eq!(r.blocks.len(), expected_blocks);
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradcheckOptions {
            trials: 3,
            corrupt: true,
            ..GradcheckOptions::default()
        };
        let r = run(&LossSpec::new(LossKind::HmCrossEntropy), &opts).unwrap();
        assert!(!r.passed());
        let w = r.blocks.iter().find(|b| b.block == "W").unwrap();
        assert!(w.max_rel_err > 1e-3);
    }

    #[test]
    fn runs_are_reproducible() {
        let opts = GradcheckOptions {
            trials: 5,
            seed: 42,
            ..GradcheckOptions::default()
        };
        let spec = LossSpec::new(LossKind::HmAngularSoftmax);
        assert_eq!(run(&spec, &opts).unwrap(), run(&spec, &opts).unwrap());
    }
}
