//! Synthetic identity datasets, verification pairs and their text formats.
//!
//! Dataset file:
//!
//! ```text
//! # dim=<d> n=<N> classes=<n>
//! <label>,<f0>,<f1>,...,<f{d-1}>
//! ```
//!
//! Pair file, one pair per line: `<index_a>,<index_b>,<same>` with `same` in `{0, 1}`.
//! Floats are written in shortest round-trip form, so write-then-read is exact.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::LabelBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    samples: Array2<f64>,
    labels: Vec<usize>,
    n_identities: usize,
}

impl IdentityDataset {
    /// Labels must cover `0..n_identities` with at least two samples each.
    pub fn new(samples: Array2<f64>, labels: Vec<usize>, n_identities: usize) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::invalid("dataset must be non-empty"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        let mut counts = vec![0usize; n_identities];
        for &y in &labels {
            *counts
                .get_mut(y)
                .ok_or_else(|| Error::invalid(format!("label {y} >= {n_identities} identities")))? += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c < 2) {
            return Err(Error::invalid(format!(
                "identity {k} has {} samples, need at least 2",
                counts[k]
            )));
        }
        Ok(IdentityDataset {
            samples,
            labels,
            n_identities,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_identities];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn label_batch(&self) -> LabelBatch {
        LabelBatch::new(self.labels.clone(), self.n_identities).expect("labels validated")
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `n_identities` class means uniform on the unit sphere, then `per_class`
/// samples `normalize(mean + noise)` for each, labels in class order.
///
/// Noise coordinates are `N(0, noise_sigma^2 / input_dim)`, so `noise_sigma`
/// is the RMS length of the noise vector. Same as
/// [`gen_identities_split`] with split 0.
pub fn gen_identities(
    n_identities: usize,
    per_class: usize,
    input_dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<IdentityDataset> {
    gen_identities_split(n_identities, per_class, input_dim, noise_sigma, seed, 0)
}

/// Independent samples of the identities fixed by `seed`.
///
/// Class means come from ChaCha8 stream 0 of `seed` and the samples of
/// `split` from stream `split + 1`, so different splits share identities but
/// not noise draws.
pub fn gen_identities_split(
    n_identities: usize,
    per_class: usize,
    input_dim: usize,
    noise_sigma: f64,
    seed: u64,
    split: u64,
) -> Result<IdentityDataset> {
    if n_identities < 2 {
        return Err(Error::invalid("need at least 2 identities"));
    }
    if per_class < 2 {
        return Err(Error::invalid("need at least 2 samples per identity"));
    }
    if input_dim < 2 {
        return Err(Error::invalid("input dimension must be at least 2"));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_identities)
        .map(|_| unit_gaussian(&mut rng, input_dim))
        .collect();
    rng.set_stream(split.checked_add(1).ok_or_else(|| Error::invalid("split index too large"))?);
    rng.set_word_pos(0);

    let coord_sigma = noise_sigma / (input_dim as f64).sqrt();
    let n = n_identities * per_class;
    let mut samples = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for s in 0..per_class {
            let mut row = samples.row_mut(k * per_class + s);
            if noise_sigma == 0.0 {
                row.assign(&ndarray::ArrayView1::from(mean.as_slice()));
            } else {
                let v: Vec<f64> = mean
                    .iter()
                    .map(|m| m + coord_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (dst, x) in row.iter_mut().zip(&v) {
                    *dst = x / norm;
                }
            }
            labels.push(k);
        }
    }
    IdentityDataset::new(samples, labels, n_identities)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }

    /// Indices in range, distinct within a pair, and `same` agreeing with the labels.
    pub fn validate_against(&self, ds: &IdentityDataset) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.a >= ds.len() || p.b >= ds.len() {
                return Err(Error::Format(format!(
                    "pair {i} references sample {} but the dataset has {}",
                    p.a.max(p.b),
                    ds.len()
                )));
            }
            if p.a == p.b {
                return Err(Error::Format(format!("pair {i} pairs sample {} with itself", p.a)));
            }
            if (ds.labels[p.a] == ds.labels[p.b]) != p.same {
                return Err(Error::Format(format!("pair {i} has a `same` flag that contradicts the labels")));
            }
        }
        Ok(())
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// `n_pairs / 2` same-identity and `n_pairs / 2` different-identity pairs,
/// each drawn uniformly without repetition, then shuffled together.
pub fn make_pairs(ds: &IdentityDataset, n_pairs: usize, seed: u64) -> Result<PairList> {
    if n_pairs == 0 || n_pairs % 2 != 0 {
        return Err(Error::invalid(format!("pair count must be positive and even, got {n_pairs}")));
    }
    let half = n_pairs / 2;
    let counts = ds.class_counts();
    let pos_available: usize = counts.iter().map(|c| c * (c - 1) / 2).sum();
    let neg_available = ds.len() * (ds.len() - 1) / 2 - pos_available;
    if half > pos_available || half > neg_available {
        return Err(Error::invalid(format!(
            "cannot draw {half} same and {half} different pairs: only {pos_available} and {neg_available} exist"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members: Vec<Vec<usize>> = {
        let mut m = vec![Vec::new(); ds.n_identities()];
        for (i, &y) in ds.labels().iter().enumerate() {
            m[y].push(i);
        }
        m
    };

    let positives = if 2 * half <= pos_available {
        let weights: Vec<usize> = counts.iter().map(|c| c * (c - 1) / 2).collect();
        let class_dist = WeightedIndex::new(&weights).expect("positive weights");
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(half);
        while out.len() < half {
            let class = &members[class_dist.sample(&mut rng)];
            let picks = index::sample(&mut rng, class.len(), 2);
            let (a, b) = (class[picks.index(0)], class[picks.index(1)]);
            if seen.insert(key(a, b)) {
                out.push(Pair { a, b, same: true });
            }
        }
        out
    } else {
        let all: Vec<Pair> = members
            .iter()
            .flat_map(|m| {
                (0..m.len()).flat_map(move |i| (i + 1..m.len()).map(move |j| Pair { a: m[i], b: m[j], same: true }))
            })
            .collect();
        index::sample(&mut rng, all.len(), half).into_iter().map(|i| all[i]).collect()
    };

    let labels = ds.labels();
    let negatives = if 2 * half <= neg_available {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(half);
        while out.len() < half {
            let a = rng.random_range(0..ds.len());
            let b = rng.random_range(0..ds.len());
            if labels[a] != labels[b] && seen.insert(key(a, b)) {
                out.push(Pair { a, b, same: false });
            }
        }
        out
    } else {
        let all: Vec<Pair> = (0..ds.len())
            .flat_map(|a| (a + 1..ds.len()).map(move |b| (a, b)))
            .filter(|&(a, b)| labels[a] != labels[b])
            .map(|(a, b)| Pair { a, b, same: false })
            .collect();
        index::sample(&mut rng, all.len(), half).into_iter().map(|i| all[i]).collect()
    };

    let mut pairs = positives;
    pairs.extend(negatives);
    pairs.shuffle(&mut rng);
    Ok(PairList { pairs })
}

pub fn write_dataset<W: Write>(ds: &IdentityDataset, mut w: W) -> std::io::Result<()> {
    writeln!(w, "# dim={} n={} classes={}", ds.dim(), ds.len(), ds.n_identities())?;
    for (row, y) in ds.samples.axis_iter(Axis(0)).zip(&ds.labels) {
        write!(w, "{y}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let bad = |msg: &str| Error::Parse {
        line: 1,
        message: format!("{msg}; expected `# dim=<d> n=<N> classes=<n>`, got {line:?}"),
    };
    let rest = line.strip_prefix('#').ok_or_else(|| bad("missing header"))?;
    let (mut dim, mut n, mut classes) = (None, None, None);
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad("malformed header field"))?;
        let v: usize = v.parse().map_err(|_| bad("header value is not an integer"))?;
        match k {
            "dim" => dim = Some(v),
            "n" => n = Some(v),
            "classes" => classes = Some(v),
            _ => return Err(bad("unknown header field")),
        }
    }
    match (dim, n, classes) {
        (Some(d), Some(n), Some(c)) => Ok((d, n, c)),
        _ => Err(bad("incomplete header")),
    }
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<IdentityDataset> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::Parse { line: 1, message: e.to_string() })?,
        None => return Err(Error::Parse { line: 1, message: "empty dataset file".into() }),
    };
    let (dim, n, classes) = parse_header(header.trim())?;

    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Format(format!(
                "line {lineno}: {} features, header declares dim={dim}",
                fields.len() - 1
            )));
        }
        let label: usize = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid label {:?}", fields[0]),
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid number {f:?}"),
            })?;
            values.push(v);
        }
    }
    if labels.len() != n {
        return Err(Error::Format(format!(
            "header declares n={n} samples, file has {}",
            labels.len()
        )));
    }
    let samples = Array2::from_shape_vec((n, dim), values).map_err(|e| Error::Format(e.to_string()))?;
    IdentityDataset::new(samples, labels, classes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_pairs<W: Write>(pairs: &PairList, mut w: W) -> std::io::Result<()> {
    for p in &pairs.pairs {
        writeln!(w, "{},{},{}", p.a, p.b, u8::from(p.same))?;
    }
    w.flush()
}

/// Blank lines and lines starting with `#` are skipped.
pub fn read_pairs<R: BufRead>(r: R) -> Result<PairList> {
    let mut pairs = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: lineno, message: msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected `index_a,index_b,same`, got {line:?}")));
        }
        let a = fields[0].parse().map_err(|_| bad(format!("invalid index {:?}", fields[0])))?;
        let b = fields[1].parse().map_err(|_| bad(format!("invalid index {:?}", fields[1])))?;
        let same = match fields[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("`same` must be 0 or 1, got {other:?}"))),
        };
        if a == b {
            return Err(bad(format!("pair uses index {a} twice")));
        }
        pairs.push(Pair { a, b, same });
    }
    Ok(PairList { pairs })
}

pub fn save_dataset(ds: &IdentityDataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(ds, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<IdentityDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(f))
}

pub fn save_pairs(pairs: &PairList, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_pairs(pairs, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<PairList> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pairs(BufReader::new(f))
}
