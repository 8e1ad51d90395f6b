//! Checkpoint file: a magic line, one JSON header line, then every parameter
//! as little-endian `f64`. Arrays come in layer order (weights row-major,
//! then bias), followed by the head weights (row-major, `d x n`) and bias.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Activation, DenseLayer, DenseNet};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{ClassifierHead, NormMode};

pub const CHECKPOINT_MAGIC: &str = "hardmine-checkpoint v1";

/// Position of the training RNG when the checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            algorithm: "chacha8".into(),
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.algorithm != "chacha8" {
            return Err(Error::Format(format!("unsupported rng {:?}", self.algorithm)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenseNet,
    pub head: ClassifierHead,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    dim: usize,
    classes: usize,
    norm_mode: NormMode,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layers: Vec<LayerHeader>,
    head: HeadHeader,
    epoch: usize,
    rng: RngState,
    config: TrainConfig,
}

fn take(values: &mut impl Iterator<Item = f64>, n: usize) -> Vec<f64> {
    values.take(n).collect()
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            layers: self
                .net
                .layers()
                .iter()
                .map(|l| LayerHeader {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation,
                })
                .collect(),
            head: HeadHeader {
                dim: self.head.dim(),
                classes: self.head.n_classes(),
                norm_mode: self.head.norm_mode,
            },
            epoch: self.epoch,
            rng: self.rng.clone(),
            config: self.config.clone(),
        };
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        let arrays = self
            .net
            .layers()
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .chain(self.head.weights.iter())
            .chain(self.head.bias.iter());
        for v in arrays {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic line)".into()));
        }
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))?;
        let header: Header =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

        let expected: usize = header.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum::<usize>()
            + header.head.dim * header.head.classes
            + header.head.classes;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(e.to_string()))?;
        if bytes.len() != 8 * expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} bytes of parameters, header implies {}",
                bytes.len(),
                8 * expected
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));

        let mut layers = Vec::with_capacity(header.layers.len());
        for l in &header.layers {
            let weights = Array2::from_shape_vec((l.in_dim, l.out_dim), take(&mut values, l.in_dim * l.out_dim))
                .map_err(|e| Error::Format(e.to_string()))?;
            layers.push(DenseLayer {
                weights,
                bias: Array1::from(take(&mut values, l.out_dim)),
                activation: l.activation,
            });
        }
        let net = DenseNet::new(layers).map_err(|e| Error::Format(e.to_string()))?;
        let h = &header.head;
        let weights = Array2::from_shape_vec((h.dim, h.classes), take(&mut values, h.dim * h.classes))
            .map_err(|e| Error::Format(e.to_string()))?;
        let head = ClassifierHead::new(weights, Array1::from(take(&mut values, h.classes)), h.norm_mode)
            .map_err(|e| Error::Format(e.to_string()))?;
        if head.dim() != net.embedding_dim() {
            return Err(Error::Format(format!(
                "head expects {}-dimensional embeddings, network produces {}",
                head.dim(),
                net.embedding_dim()
            )));
        }
        header.rng.restore()?;
        Ok(Checkpoint {
            net,
            head,
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read(BufReader::new(f))
    }
}
