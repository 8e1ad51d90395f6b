//! Mini-batch training of an embedding network and classifier head.

mod checkpoint;
mod net;
mod optim;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use net::{xavier_uniform, Activation, DenseLayer, DenseNet, ForwardCache, LayerGradients, NetGradients};
pub use optim::SgdMomentum;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::IdentityDataset;
use crate::error::{Error, Result};
use crate::hard_mining::crossing_point;
use crate::losses::{ClassifierHead, EmbeddingBatch, LabelBatch};
use crate::objective::{Evaluation, LossSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub loss_spec: LossSpec,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// 1-based epochs from which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_spec: LossSpec::default(),
            batch_size: 64,
            initial_lr: 0.01,
            lr_decay_epochs: vec![8, 12, 16],
            lr_decay_factor: 0.1,
            epochs: 20,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            hidden_dims: vec![32],
            embedding_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_spec.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::invalid(format!(
                "lr decay factor must be > 0, got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) || self.lr_decay_epochs.contains(&0) {
            return Err(Error::invalid(format!(
                "lr decay epochs must be strictly increasing and 1-based, got {:?}",
                self.lr_decay_epochs
            )));
        }
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        self.optimizer(self.initial_lr).validate()
    }

    fn optimizer(&self, lr: f64) -> SgdMomentum {
        SgdMomentum {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Network layer sizes for inputs of width `input_dim`.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }
}

/// Learning rate during 1-based `epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(cfg.initial_lr * cfg.lr_decay_factor.powi(decays as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean base loss over the whole training set after the epoch.
    pub mean_base_loss: f64,
    /// Mean hard-mined loss, for the hard-mined objectives.
    pub mean_hm_loss: Option<f64>,
    /// Fraction of samples whose base loss exceeds the crossing point, for
    /// the hard-mined objectives whose parameters have one.
    pub hard_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

struct Velocity {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

impl Velocity {
    fn zeros(net: &DenseNet, head: &ClassifierHead) -> Self {
        Velocity {
            layers: net
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
            head_w: Array2::zeros(head.weights.raw_dim()),
            head_b: Array1::zeros(head.bias.len()),
        }
    }
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Diverged { epoch, batch, loss }
}

/// Loss and gradients of `spec` on `x`, or `Diverged` when the embeddings or
/// the objective are not finite.
fn evaluate_batch(
    spec: &LossSpec,
    emb: Array2<f64>,
    labels: &LabelBatch,
    head: &ClassifierHead,
    epoch: usize,
    batch: usize,
) -> Result<Evaluation> {
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(diverged(epoch, batch, f64::NAN));
    }
    let xb = EmbeddingBatch::new(emb)?;
    let eval = spec.evaluate(&xb, labels, head)?;
    if !eval.objective.is_finite() {
        return Err(diverged(epoch, batch, eval.objective));
    }
    Ok(eval)
}

pub fn train(cfg: &TrainConfig, ds: &IdentityDataset) -> Result<TrainOutcome> {
    train_with_observer(cfg, ds, |_| {})
}

/// Trains from scratch, calling `observe` after each epoch.
///
/// One ChaCha8 stream seeded with `cfg.seed` drives the network
/// initialization, the head initialization and then the per-epoch shuffles.
/// The final partial batch of an epoch is kept.
pub fn train_with_observer<F: FnMut(&EpochMetrics)>(
    cfg: &TrainConfig,
    ds: &IdentityDataset,
    mut observe: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let spec = &cfg.loss_spec;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = DenseNet::xavier(&cfg.layer_dims(ds.dim()), &mut rng)?;
    let mut head = ClassifierHead::new(
        xavier_uniform(cfg.embedding_dim, ds.n_identities(), &mut rng),
        Array1::zeros(ds.n_identities()),
        spec.loss.norm_mode(),
    )?;
    let mut vel = Velocity::zeros(&net, &head);
    let threshold = if spec.loss.is_hard_mined() {
        crossing_point(&spec.hard_mining).ok()
    } else {
        None
    };
    let all_labels = ds.label_batch();

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let opt = cfg.optimizer(lr_at_epoch(cfg, epoch)?);
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = ds.samples().select(Axis(0), idx);
            let labels = LabelBatch::new(idx.iter().map(|&i| ds.labels()[i]).collect(), ds.n_identities())?;
            let (emb, cache) = net.forward(&x)?;
            let eval = evaluate_batch(spec, emb, &labels, &head, epoch, b + 1)?;
            let grads = net.backward(&cache, &eval.grad_x)?;

            for ((layer, g), (vw, vb)) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut vel.layers) {
                opt.step(&mut layer.weights, vw, &g.weights);
                opt.step(&mut layer.bias, vb, &g.bias);
            }
            opt.step(&mut head.weights, &mut vel.head_w, &eval.grad_w);
            if spec.loss.uses_bias() {
                opt.step(&mut head.bias, &mut vel.head_b, &eval.grad_b);
            }
        }

        let emb = net.embed(ds.samples())?;
        let eval = evaluate_batch(spec, emb, &all_labels, &head, epoch, 0)?;
        let metrics = EpochMetrics {
            epoch,
            lr: opt.lr,
            mean_base_loss: eval.base_mean,
            mean_hm_loss: eval.hm_mean,
            hard_fraction: threshold.map(|t| {
                eval.base_per_sample.iter().filter(|&&l| l > t).count() as f64 / ds.len() as f64
            }),
        };
        observe(&metrics);
        log.push(metrics);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            net,
            head,
            config: cfg.clone(),
            epoch: cfg.epochs,
            rng: RngState::capture(cfg.seed, &rng),
        },
        log,
    })
}
