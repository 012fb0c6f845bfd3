//! Flag definitions and `key=value` config-file expansion.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cierec::model::{Components, PiMode};
use cierec::scoring::Backbone;

#[derive(Debug, Parser)]
#[command(name = "cierec", version, about = "Cold-start recommendation with cross-modal content inference")]
pub struct Cli {
    /// Read default flag values from a `key=value` file; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on the test split.
    Eval(EvalArgs),
    /// Train and evaluate the five-variant component ladder.
    Ablate(AblateArgs),
    /// Export user embeddings and fused item representations.
    Export(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenArgs {
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 300)]
    pub items: usize,
    #[arg(long, default_value_t = 20)]
    pub per_user: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub elements: usize,
    #[arg(long, default_value_t = 3)]
    pub elements_per_item: usize,
    /// Weight of the noise added to the content features, in [0, 1].
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    /// Standard deviation of the item popularity offsets.
    #[arg(long, default_value_t = 1.5)]
    pub popularity_spread: f64,
    /// Mean of the item popularity offsets; negative values sharpen preferences.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub popularity_mean: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoder {
    Precomputed,
    Trainable,
}

/// Hyperparameters shared by `train` and `ablate`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct HyperArgs {
    /// Dataset directory with interactions.tsv and content.tsv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Recommender learning rate (Adagrad).
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Gate classifier learning rate (Adam).
    #[arg(long, default_value_t = 0.001)]
    pub lr_dqn: f64,
    #[arg(long, default_value_t = 0.5)]
    pub decay_rate: f64,
    #[arg(long, default_value_t = 4)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Early-stopping patience in epochs; 0 trains every epoch.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 100)]
    pub valid_n_neg: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_pi_mode, default_value = "pi-full")]
    #[serde(serialize_with = "display")]
    pub pi_mode: PiMode,
    #[arg(long, value_enum, default_value_t = Encoder::Precomputed)]
    pub encoder: Encoder,
    /// Side of the square item images for the trainable encoder.
    #[arg(long, default_value_t = 16)]
    pub image_side: usize,
    /// Weight of the auxiliary branch losses.
    #[arg(long, default_value_t = 0.5)]
    pub branch_weight: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub l2: f64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_parser = parse_backbone, default_value = "mf")]
    #[serde(serialize_with = "display")]
    pub backbone: Backbone,
    /// Comma-separated subset of CI, TA, GR, PI; empty for the plain backbone.
    #[arg(long, value_parser = parse_components, default_value = "CI,TA,GR,PI")]
    #[serde(serialize_with = "display")]
    pub components: Components,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProtocolArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 500)]
    pub n_neg: usize,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated evaluation seeds; defaults to 42, 43, ...
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

impl ProtocolArgs {
    pub fn protocol(&self) -> anyhow::Result<cierec::evaluation::Protocol> {
        let seeds = match (self.runs, self.seeds.is_empty()) {
            (Some(r), false) if r != self.seeds.len() => {
                return Err(cierec::Error::Config(format!("--runs {r} does not match the {} seeds given", self.seeds.len())).into());
            }
            (_, false) => self.seeds.clone(),
            (r, true) => (0..r.unwrap_or(5) as u64).map(|i| 42 + i).collect(),
        };
        Ok(cierec::evaluation::Protocol { k: self.k, n_neg: self.n_neg, seeds })
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub protocol: ProtocolArgs,
    /// Directory for metrics.json and metrics.txt; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub protocol: ProtocolArgs,
    /// Comma-separated backbones; one table each.
    #[arg(long, value_delimiter = ',', value_parser = parse_backbone, default_value = "mf")]
    #[serde(serialize_with = "display_list")]
    pub backbone: Vec<Backbone>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// Number of users drawn at random (seeded) from users with training items.
    #[arg(long, default_value_t = 0)]
    pub users: usize,
    /// Explicit external user ids.
    #[arg(long, value_delimiter = ',')]
    pub user_ids: Vec<i64>,
    /// Explicit external item ids.
    #[arg(long, value_delimiter = ',')]
    pub item_ids: Vec<i64>,
    /// Also export the training items of every selected user.
    #[arg(long)]
    pub with_interacted_items: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output TSV file.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_components(s: &str) -> Result<Components, String> {
    s.parse()
}

fn parse_backbone(s: &str) -> Result<Backbone, String> {
    s.parse()
}

fn parse_pi_mode(s: &str) -> Result<PiMode, String> {
    s.parse()
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn display_list<T: std::fmt::Display, S: serde::Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","))
}

const SUBCOMMANDS: [&str; 5] = ["gen", "train", "eval", "ablate", "export"];

/// Inserts the flags of a `--config` file right after the subcommand so
/// that flags given on the command line, which come later, override them.
pub fn expand_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read config file {path}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{path}: line {}: expected key=value", n + 1);
        };
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => extra.push(flag),
            "false" => {}
            v => {
                extra.push(flag);
                extra.push(v.to_string());
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// `key=value` lines for the flat fields of a serialised argument struct.
pub fn to_kv<T: Serialize>(args: &T) -> anyhow::Result<String> {
    let value = serde_json::to_value(args)?;
    let mut out = String::new();
    for (k, v) in value.as_object().context("arguments serialise to an object")? {
        let text = match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Array(a) if a.is_empty() => continue,
            serde_json::Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            serde_json::Value::Null => continue,
            other => other.to_string(),
        };
        out.push_str(&format!("{k}={text}\n"));
    }
    Ok(out)
}
