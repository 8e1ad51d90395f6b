//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then a JSON config
//! file (`--config`), then flags. Exit codes: 0 success, 2 invalid
//! arguments, 3 runtime failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, gen_identities, gen_identities_split, make_pairs};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckOptions};
use crate::hard_mining::{crossing_point, curve_point, probability_grid, HardMiningMode};
use crate::objective::{LossKind, LossSpec};
use crate::trainer::{train_with_observer, Checkpoint, EpochMetrics, TrainConfig};
use crate::verify::{evaluate_pairs, DEFAULT_FOLDS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub identities: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            identities: 20,
            per_class: 50,
            input_dim: 16,
            noise: 0.3,
            n_pairs: 600,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub folds: usize,
    pub fold_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: DEFAULT_FOLDS,
            fold_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Training set.
    pub data: PathBuf,
    /// Held-out samples of the same identities; the pairs index into it.
    pub heldout: PathBuf,
    pub pairs: PathBuf,
    pub checkpoint: PathBuf,
    /// Per-epoch CSV metrics.
    pub log: PathBuf,
    pub report: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data.csv".into(),
            heldout: "heldout.csv".into(),
            pairs: "pairs.csv".into(),
            checkpoint: "model.ckpt".into(),
            log: "train_log.csv".into(),
            report: None,
        }
    }
}

/// Everything a run can be configured with. The loss selection and its
/// parameters sit at the top level next to the training settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Keys of `given` that do not appear in `known`, as dotted paths. Only
/// objects are descended into, so optional fields (null by default) accept
/// any value.
fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl RunConfig {
    /// Parses a config document; unknown keys are rejected so typos surface.
    pub fn from_json(text: &str) -> Result<Self> {
        let given: Value =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        let known = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::invalid(format!("config: unknown keys {}", unknown.join(", "))));
        }
        serde_json::from_value(given).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::from_json(&text)
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hardmine", version, about = "Hard-mining losses on a synthetic verification benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a training set, a held-out set and verification pairs.
    GenData(GenDataArgs),
    /// Train a network and classifier head.
    Train(TrainArgs),
    /// Evaluate a checkpoint on verification pairs.
    Eval(EvalArgs),
    /// Emit the hard-mined loss against the correct-class probability.
    Curve(CurveArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct LossFlags {
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigmoid_a: Option<f64>,
    #[arg(long)]
    pub sigmoid_b: Option<f64>,
    /// per-sample or batch-mean
    #[arg(long)]
    pub hm_mode: Option<HardMiningMode>,
    /// Multiplicative angular margin m.
    #[arg(long)]
    pub angular_m: Option<u32>,
    /// Additive-margin scale s.
    #[arg(long)]
    pub arcface_s: Option<f64>,
    /// Additive-margin m, in radians.
    #[arg(long)]
    pub arcface_m: Option<f64>,
}

impl LossFlags {
    fn apply(&self, spec: &mut LossSpec) {
        let hm = &mut spec.hard_mining;
        set(&mut spec.loss, self.loss);
        set(&mut hm.alpha, self.alpha);
        set(&mut hm.beta, self.beta);
        set(&mut hm.sigmoid.a, self.sigmoid_a);
        set(&mut hm.sigmoid.b, self.sigmoid_b);
        set(&mut hm.mode, self.hm_mode);
        set(&mut spec.angular.m, self.angular_m);
        set(&mut spec.arcface.s, self.arcface_s);
        set(&mut spec.arcface.m, self.arcface_m);
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training set output.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out set output.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Pair file output, indexing the held-out set.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Skip the per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Samples the pair indices refer to.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub fold_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
    /// Also write the report here, in the chosen format.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
    #[arg(long, default_value_t = 0.001)]
    pub p_min: f64,
    #[arg(long, default_value_t = 0.999)]
    pub p_max: f64,
    #[arg(long, default_value_t = 0.001)]
    pub p_step: f64,
    /// CSV destination; without it the CSV goes to stdout and the summary to stderr.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::NoCrossing { .. } => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Curve(a) => cmd_curve(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let d = &mut cfg.data;
    set(&mut d.identities, a.identities);
    set(&mut d.per_class, a.per_class);
    set(&mut d.input_dim, a.input_dim);
    set(&mut d.noise, a.noise);
    set(&mut d.n_pairs, a.n_pairs);
    set(&mut d.seed, a.seed);
    let p = &mut cfg.paths;
    set(&mut p.data, a.data.clone());
    set(&mut p.heldout, a.heldout.clone());
    set(&mut p.pairs, a.pairs.clone());

    let d = &cfg.data;
    let train = gen_identities(d.identities, d.per_class, d.input_dim, d.noise, d.seed)?;
    let heldout = gen_identities_split(d.identities, d.per_class, d.input_dim, d.noise, d.seed, 1)?;
    let pairs = make_pairs(&heldout, d.n_pairs, d.seed)?;
    data::save_dataset(&train, &cfg.paths.data)?;
    data::save_dataset(&heldout, &cfg.paths.heldout)?;
    data::save_pairs(&pairs, &cfg.paths.pairs)?;
    println!(
        "wrote {} training samples to {}, {} held-out samples to {}, {} pairs to {}",
        train.len(),
        cfg.paths.data.display(),
        heldout.len(),
        cfg.paths.heldout.display(),
        pairs.len(),
        cfg.paths.pairs.display()
    );
    Ok(EXIT_OK)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_train_log<W: Write>(log: &[EpochMetrics], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,lr,mean_base_loss,mean_hm_loss,hard_fraction")?;
    for m in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.mean_base_loss,
            opt_cell(m.mean_hm_loss),
            opt_cell(m.hard_fraction)
        )?;
    }
    w.flush()
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.train;
    a.loss.apply(&mut t.loss_spec);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.initial_lr, a.initial_lr);
    set(&mut t.lr_decay_epochs, a.lr_decay_epochs.clone());
    set(&mut t.lr_decay_factor, a.lr_decay_factor);
    set(&mut t.epochs, a.epochs);
    set(&mut t.momentum, a.momentum);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.seed, a.seed);
    set(&mut t.hidden_dims, a.hidden_dims.clone());
    set(&mut t.embedding_dim, a.embedding_dim);
    let p = &mut cfg.paths;
    set(&mut p.data, a.data.clone());
    set(&mut p.checkpoint, a.checkpoint.clone());
    set(&mut p.log, a.log.clone());

    cfg.train.validate()?;
    let ds = data::load_dataset(&cfg.paths.data)?;
    let outcome = train_with_observer(&cfg.train, &ds, |m| {
        if !a.quiet {
            let hm = m.mean_hm_loss.map(|v| format!(" hm_loss {v:.6}")).unwrap_or_default();
            let hard = m.hard_fraction.map(|v| format!(" hard_fraction {v:.4}")).unwrap_or_default();
            println!(
                "epoch {:>3}/{} lr {:.1e} base_loss {:.6}{hm}{hard}",
                m.epoch, cfg.train.epochs, m.lr, m.mean_base_loss
            );
        }
    })?;
    outcome.checkpoint.save(&cfg.paths.checkpoint)?;
    let log_path = &cfg.paths.log;
    let f = File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    write_train_log(&outcome.log, BufWriter::new(f)).map_err(|e| Error::io(log_path, e))?;
    println!(
        "trained {} for {} epochs; checkpoint {}, log {}",
        cfg.train.loss_spec.loss,
        cfg.train.epochs,
        cfg.paths.checkpoint.display(),
        log_path.display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    set(&mut cfg.eval.folds, a.folds);
    set(&mut cfg.eval.fold_seed, a.fold_seed);
    let p = &mut cfg.paths;
    set(&mut p.checkpoint, a.checkpoint.clone());
    set(&mut p.heldout, a.heldout.clone());
    set(&mut p.pairs, a.pairs.clone());
    if a.report.is_some() {
        p.report = a.report.clone();
    }

    let ck = Checkpoint::load(&cfg.paths.checkpoint)?;
    let ds = data::load_dataset(&cfg.paths.heldout)?;
    if ds.dim() != ck.net.input_dim() {
        return Err(Error::Format(format!(
            "{} has {}-dimensional samples, checkpoint expects {}",
            cfg.paths.heldout.display(),
            ds.dim(),
            ck.net.input_dim()
        )));
    }
    let pairs = data::load_pairs(&cfg.paths.pairs)?;
    pairs.validate_against(&ds)?;
    let emb = ck.net.embed(ds.samples())?;
    let report = evaluate_pairs(&emb, &pairs, cfg.eval.folds, cfg.eval.fold_seed)?;
    let rendered = match a.format {
        OutputFormat::Text => report.to_string(),
        OutputFormat::Json => report.to_json() + "\n",
    };
    print!("{rendered}");
    if let Some(path) = &cfg.paths.report {
        fs::write(path, &rendered).map_err(|e| Error::io(path, e))?;
    }
    Ok(EXIT_OK)
}

fn cmd_curve(a: &CurveArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.loss.apply(&mut cfg.train.loss_spec);
    let params = cfg.train.loss_spec.hard_mining;
    params.validate()?;
    let grid = probability_grid(a.p_min, a.p_max, a.p_step)?;

    let mut csv = String::from("p,L_base,L_hm\n");
    for p in grid {
        let c = curve_point(p, &params)?;
        csv.push_str(&format!("{},{},{}\n", c.p, c.base, c.hm));
    }
    let summary = match crossing_point(&params) {
        Ok(l) => format!("crossing_point: {l}\ncrossing_probability: {}\n", (-l).exp()),
        Err(_) => "crossing_point: none\ncrossing_probability: none\n".to_string(),
    };
    match &a.out {
        Some(path) => {
            fs::write(path, csv).map_err(|e| Error::io(path, e))?;
            print!("{summary}");
        }
        None => {
            print!("{csv}");
            eprint!("{summary}");
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.loss.apply(&mut cfg.train.loss_spec);
    if a.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let opts = GradcheckOptions {
        trials: a.trials,
        seed: a.seed,
        tolerance: a.tolerance,
        corrupt: a.corrupt_gradient,
        ..GradcheckOptions::default()
    };
    let r = gradcheck::run(&cfg.train.loss_spec, &opts)?;
    println!("loss: {}", r.loss);
    println!("trials: {} (redrawn: {})", r.trials, r.skipped);
    for b in &r.blocks {
        println!("block {}: max_rel_err {:.3e}", b.block, b.max_rel_err);
    }
    println!("max_rel_err: {:.3e}", r.max_rel_err());
    println!("tolerance: {:.1e}", r.tolerance);
    println!("result: {}", if r.passed() { "PASS" } else { "FAIL" });
    Ok(if r.passed() { EXIT_OK } else { EXIT_RUNTIME })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults_and_rejects_typos() {
        let cfg = RunConfig::from_json(
            r#"{"loss": "hm-as", "angular": {"m": 2}, "epochs": 5, "data": {"noise": 0.1}, "paths": {"report": "r.txt"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.loss_spec.loss, LossKind::HmAngularSoftmax);
        assert_eq!(cfg.train.loss_spec.angular.m, 2);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.data.noise, 0.1);
        assert_eq!(cfg.data.identities, 20);
        assert_eq!(cfg.paths.report, Some(PathBuf::from("r.txt")));

        let err = RunConfig::from_json(r#"{"epoch": 5}"#).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        assert!(RunConfig::from_json(r#"{"hard_mining": {"alpah": 2.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": "softmax"}"#).is_err());
        assert!(RunConfig::from_json("not json").is_err());
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "hardmine", "train", "--loss", "af", "--arcface-s", "30", "--epochs", "7", "--lr-decay-epochs", "2,4",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let mut spec = LossSpec::new(LossKind::HmCrossEntropy);
        spec.arcface.m = 0.25;
        a.loss.apply(&mut spec);
        assert_eq!(spec.loss, LossKind::ArcFace);
        assert_eq!(spec.arcface.s, 30.0);
        assert_eq!(spec.arcface.m, 0.25);
        assert_eq!(a.lr_decay_epochs, Some(vec![2, 4]));
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_INVALID);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_RUNTIME);
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, batch: 1, loss: f64::NAN }), EXIT_RUNTIME);
        assert_eq!(run_from_args(["hardmine", "frobnicate"]), EXIT_INVALID);
        assert_eq!(run_from_args(["hardmine", "train", "--loss", "softmax"]), EXIT_INVALID);
    }

    #[test]
    fn log_has_empty_cells_for_plain_losses() {
        let log = vec![EpochMetrics {
            epoch: 1,
            lr: 0.01,
            mean_base_loss: 2.5,
            mean_hm_loss: None,
            hard_fraction: None,
        }];
        let mut buf = Vec::new();
        write_train_log(&log, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,lr,mean_base_loss,mean_hm_loss,hard_fraction\n1,0.01,2.5,,\n"
        );
    }
}
