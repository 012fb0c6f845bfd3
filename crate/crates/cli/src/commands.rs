//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use rand::seq::index;
use serde::Serialize;

use cierec::checkpoint::{load_checkpoint, save_checkpoint};
use cierec::dataset::{
    chronological_split, generate_synthetic, partition_cold_warm, Dataset, IdMap, SplitDataset, SplitRatios, SyntheticConfig,
    COLD_BOUNDARY,
};
use cierec::evaluation::{evaluate_model, render_table};
use cierec::model::{Components, ModelConfig, Scorer};
use cierec::par::Exec;
use cierec::representations::EncoderMode;
use cierec::rng;
use cierec::scoring::Backbone;
use cierec::training::{fit, run_ablation, TrainConfig};

use crate::args::{to_kv, AblateArgs, Encoder, EvalArgs, ExportArgs, GenArgs, HyperArgs, TrainArgs};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const GATE_LOG: &str = "gates.jsonl";
pub const CONFIG_KV: &str = "config.kv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

/// Written once per output directory; the config snapshot reproduces it.
#[derive(Debug, Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    git_describe: String,
    seed: u64,
    output_dir: &'a Path,
    config: &'a C,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C, started: u64) -> Result<()> {
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        git_describe: git_describe(),
        seed,
        output_dir: dir,
        config,
        started_unix: started,
        finished_unix: unix_now(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        bail!("output directory {} already exists and is not empty (use --force to overwrite)", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

pub fn exec_mode(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let started = unix_now();
    let config = SyntheticConfig {
        n_users: args.users,
        n_items: args.items,
        latent_dim: args.latent_dim,
        n_elements: args.elements,
        elements_per_item: args.elements_per_item,
        interactions_per_user: args.per_user,
        content_noise: args.noise,
        popularity_spread: args.popularity_spread,
        popularity_mean: args.popularity_mean,
    };
    config.validate()?;
    prepare_dir(&args.out, args.force)?;
    let data = generate_synthetic(&config, args.seed)?;
    data.write(&args.out)?;
    write_manifest(&args.out, "gen", args.seed, args, started)?;
    eprintln!("wrote {} interactions over {} users and {} items to {}", data.interactions.len(), args.users, args.items, args.out.display());
    Ok(())
}

fn load_split(data: &Path) -> Result<(Dataset, SplitDataset)> {
    let ds = Dataset::load_dir(data).with_context(|| format!("cannot load dataset from {}", data.display()))?;
    let split = partition_cold_warm(chronological_split(&ds.log, SplitRatios::default())?, COLD_BOUNDARY)?;
    Ok((ds, split))
}

fn train_config(h: &HyperArgs, backbone: Backbone, components: Components) -> TrainConfig {
    let defaults = ModelConfig::default();
    TrainConfig {
        model: ModelConfig {
            backbone,
            dim: h.dim,
            components,
            pi_mode: h.pi_mode,
            encoder_mode: match h.encoder {
                Encoder::Precomputed => EncoderMode::Precomputed,
                Encoder::Trainable => EncoderMode::Trainable,
            },
            image_side: h.image_side,
            branch_weight: h.branch_weight,
            l2: h.l2,
            ..defaults
        },
        batch_size: h.batch,
        lr_rec: h.lr,
        lr_dqn: h.lr_dqn,
        decay_rate: h.decay_rate,
        decay_every: h.decay_every,
        epochs: h.epochs,
        seed: h.seed,
        patience: h.patience,
        valid_n_neg: h.valid_n_neg,
        ..Default::default()
    }
}

fn jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn train(args: &TrainArgs, exec: Exec) -> Result<()> {
    let started = unix_now();
    let config = train_config(&args.hyper, args.backbone, args.components);
    config.validate()?;
    let (ds, split) = load_split(&args.hyper.data)?;
    prepare_dir(&args.out, args.force)?;
    let outcome = fit(&config, &split, &ds.content, exec, |e| {
        let valid = e.valid_recall.map(|v| format!(" valid R@10 {v:.4}")).unwrap_or_default();
        eprintln!("epoch {:>3} loss {:.4} (v {:.4}, s {:.4}) lr {:.4}{valid}", e.epoch, e.loss_main, e.loss_v, e.loss_s, e.lr);
    })?;
    save_checkpoint(&outcome.model, &args.out.join(CHECKPOINT))?;
    jsonl(&args.out.join(EPOCH_LOG), &outcome.epochs)?;
    if config.model.components.gr {
        jsonl(&args.out.join(GATE_LOG), &outcome.gate_trace)?;
    }
    ds.ids.write(&args.out.join(Dataset::IDMAP))?;
    fs::write(args.out.join(CONFIG_KV), to_kv(args)?)?;
    write_manifest(&args.out, "train", config.seed, &config, started)?;
    eprintln!(
        "kept epoch {} of {}; {} parameters; run written to {}",
        outcome.best_epoch,
        outcome.epochs.len(),
        outcome.model.num_parameters(),
        args.out.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs, exec: Exec) -> Result<()> {
    let protocol = args.protocol.protocol()?;
    protocol.validate()?;
    let model = load_checkpoint(&args.run.join(CHECKPOINT))?;
    let (ds, split) = load_split(&args.data)?;
    check_shape(&model, &split, &ds)?;
    let report = evaluate_model(&model, &split, &ds.content, &protocol, exec)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out)?;
    fs::write(out.join(METRICS_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    let label = model_label(&model.config);
    let table = render_table(report.k, &[(label, report.mean)]);
    fs::write(out.join(METRICS_TXT), &table)?;
    print!("{table}");
    Ok(())
}

fn check_shape(model: &cierec::model::Model, split: &SplitDataset, ds: &Dataset) -> Result<()> {
    if model.n_users != split.n_users || model.n_items != split.n_items || model.vocab != ds.content.vocab_size {
        bail!(
            "checkpoint was trained on {} users, {} items and {} elements but the dataset has {}, {} and {}",
            model.n_users,
            model.n_items,
            model.vocab,
            split.n_users,
            split.n_items,
            ds.content.vocab_size
        );
    }
    Ok(())
}

fn model_label(config: &ModelConfig) -> String {
    let backbone = config.backbone.to_string().to_uppercase();
    if config.components == Components::NONE {
        backbone
    } else {
        format!("CIERec({backbone}) [{}]", config.components)
    }
}

pub fn ablate(args: &AblateArgs, exec: Exec) -> Result<()> {
    let started = unix_now();
    let protocol = args.protocol.protocol()?;
    protocol.validate()?;
    let base = train_config(&args.hyper, Backbone::Mf, Components::ALL);
    base.validate()?;
    let (ds, split) = load_split(&args.hyper.data)?;
    prepare_dir(&args.out, args.force)?;
    let mut backbones: Vec<Backbone> = Vec::new();
    for b in &args.backbone {
        if !backbones.contains(b) {
            backbones.push(*b);
        }
    }
    for backbone in backbones {
        let mut config = base.clone();
        config.model.backbone = backbone;
        eprintln!("ablation ladder for {backbone}");
        let table = run_ablation(&config, &split, &ds.content, &protocol, exec)?;
        let text = table.render();
        fs::write(args.out.join(format!("ablation-{backbone}.json")), serde_json::to_string_pretty(&table)? + "\n")?;
        fs::write(args.out.join(format!("ablation-{backbone}.txt")), &text)?;
        println!("{}", backbone.to_string().to_uppercase());
        print!("{text}");
    }
    fs::write(args.out.join(CONFIG_KV), to_kv(args)?)?;
    write_manifest(&args.out, "ablate", base.seed, args, started)?;
    Ok(())
}

/// Export selection in dense ids; `items` pairs each item with the user
/// whose context computes its fused representation.
struct Selection {
    users: Vec<usize>,
    items: Vec<(usize, usize)>,
    unknown: Vec<String>,
}

fn select(args: &ExportArgs, ids: &IdMap, split: &SplitDataset) -> Result<Selection> {
    let mut unknown = Vec::new();
    let mut users: Vec<usize> = Vec::new();
    for &u in &args.user_ids {
        match ids.user(u) {
            Some(d) if !users.contains(&d) => users.push(d),
            Some(_) => {}
            None => unknown.push(format!("user {u}")),
        }
    }
    if args.users > 0 {
        let pool: Vec<usize> = (0..split.n_users).filter(|&u| !split.train_by_user[u].is_empty() && !users.contains(&u)).collect();
        if args.users > pool.len() {
            bail!("requested {} random users but only {} are eligible", args.users, pool.len());
        }
        let mut r = rng::stream(args.seed, "export.users");
        let mut drawn: Vec<usize> = index::sample(&mut r, pool.len(), args.users).into_iter().map(|k| pool[k]).collect();
        drawn.sort_unstable();
        users.extend(drawn);
    }
    let mut items: Vec<(usize, usize)> = Vec::new();
    let mut seen = BTreeSet::new();
    if args.with_interacted_items {
        for &u in &users {
            for &i in &split.train_by_user[u] {
                if seen.insert(i) {
                    items.push((i, u));
                }
            }
        }
    }
    let context = users.first().copied().unwrap_or(0);
    for &i in &args.item_ids {
        match ids.item(i) {
            Some(d) => {
                if seen.insert(d) {
                    items.push((d, context));
                }
            }
            None => unknown.push(format!("item {i}")),
        }
    }
    Ok(Selection { users, items, unknown })
}

fn vector_text(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.8}")).collect::<Vec<_>>().join(",")
}

pub fn export(args: &ExportArgs, exec: Exec) -> Result<()> {
    let model = load_checkpoint(&args.run.join(CHECKPOINT))?;
    let (ds, split) = load_split(&args.data)?;
    check_shape(&model, &split, &ds)?;
    let sel = select(args, &ds.ids, &split)?;
    let mut out = Vec::new();
    writeln!(out, "kind\tid\tvector")?;
    let scorer = Scorer::new(&model, &ds.content, exec)?;
    for &u in &sel.users {
        let p = model.users.lookup(&model.store, u)?;
        writeln!(out, "user\t{}\t{}", ds.ids.users[u], vector_text(p))?;
    }
    for &(i, u) in &sel.items {
        writeln!(out, "item\t{}\t{}", ds.ids.items[i], vector_text(&scorer.fused(u, i)?))?;
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.out, out)?;
    if !sel.unknown.is_empty() {
        eprintln!("warning: skipped {} unknown ids: {}", sel.unknown.len(), sel.unknown.join(", "));
    }
    eprintln!("exported {} users and {} items to {}", sel.users.len(), sel.items.len(), args.out.display());
    Ok(())
}
