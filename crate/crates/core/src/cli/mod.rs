//! Command-line interface: `train`, `eval`, `gradcheck`, `ablate`, `masks`.
//!
//! Failures print one line `res3atn: error[<kind>]: <message>` to stderr and
//! exit with 2 (configuration or data), 3 (checkpoint or file mismatch on
//! `eval`/`masks`), or 1 (anything else, including failed gradient checks).
//! `R3ATN_THREADS` caps the worker pool (0 or unset: one per core).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::arch::{build_res3atn, network_check_config, network_grad_check, reduced_spec, NETWORK_CHECK_BATCH};
use crate::data::{eval_preprocess, load_clip_dir, ClipDataset, LabeledClip};
use crate::error::Error;
use crate::tensor::gradcheck::{operator_suite, GradCheckConfig};
use crate::tensor::Mutation;
use crate::train::{
    ablation_run, evaluate, export_attention_masks, full_grid, standard_grid, train_with_progress, Checkpoint, MetricsRecord,
    RunConfig, Split,
};

#[derive(Debug, Parser)]
#[command(name = "res3atn", version, about = "3D residual attention network for gesture clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size defaults.
    Full,
    /// Reduced widths, 16 frames, 24x24 crops, 4 synthetic classes.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// No attention, each single site, each pair.
    #[value(alias = "paper")]
    Standard,
    /// `standard` plus all three sites.
    Full,
    /// The `--variant` list.
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MutateOp {
    Conv3d,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// TOML file with [network], [augment], [optimizer], [run], [synthetic].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings the config file is applied on top of.
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// Directory with `train/` and `eval/` class folders of `.r3clip` files.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate the synthetic motion dataset in-process.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Sets the shuffle, init, augmentation and synthetic seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated attention sites, e.g. `1,2,3`; empty for none.
    #[arg(long)]
    pub sites: Option<String>,
    #[arg(long)]
    pub channel_scale: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network and write checkpoints, metrics and a summary.
    Train(RunArgs),
    /// Evaluate a checkpoint on a directory of class folders.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print top-1 only (1) or top-1 and top-min(5, classes) (5).
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = 6)]
        batch_size: usize,
        /// Print the record as one JSON line.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every operator and of a reduced network.
    Gradcheck {
        /// Channel divisor of the reduced network.
        #[arg(long, default_value_t = 16)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random shapes per operator.
        #[arg(long, default_value_t = 5)]
        cases: usize,
        /// Corrupt one backward rule to confirm the check fails.
        #[arg(long, value_enum)]
        mutate: Option<MutateOp>,
        /// Operators only.
        #[arg(long)]
        skip_network: bool,
    },
    /// Train one variant per attention-site subset and write a comparison table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "standard")]
        grid: Grid,
        /// Site list for `--grid custom`, e.g. `--variant "" --variant 1,3`.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Export per-frame attention masks of one clip as PGM images.
    Masks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed command: exit code, error kind and one-line message.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        let message: String = message.into();
        Self {
            code,
            kind,
            message: message.split_whitespace().collect::<Vec<_>>().join(" "),
        }
    }

    pub fn line(&self) -> String {
        format!("res3atn: error[{}]: {}", self.kind, self.message)
    }
}

fn kind_of(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::Tape(_) => "tape",
        Error::GradCheck(_) => "gradcheck",
        Error::BatchNorm(_) => "batchnorm",
        Error::Arch(_) => "arch",
        Error::Optim(_) => "optim",
        Error::Data(_) => "data",
        Error::File { .. } | Error::Io { .. } => "file",
        Error::Format { .. } => "format",
        Error::Mismatch(_) => "mismatch",
        Error::Train(_) => "train",
        Error::Config(_) => "config",
    }
}

/// Errors while reading configuration or datasets.
fn setup(e: Error) -> CliError {
    let code = match e {
        Error::Config(_) | Error::Data(_) | Error::File { .. } | Error::Io { .. } | Error::Format { .. } => 2,
        _ => 1,
    };
    CliError::new(code, kind_of(&e), e.to_string())
}

/// Errors while reading or applying a checkpoint.
fn artifact(e: Error) -> CliError {
    let code = match e {
        Error::Mismatch(_) | Error::File { .. } | Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 3,
        Error::Config(_) => 2,
        _ => 1,
    };
    CliError::new(code, kind_of(&e), e.to_string())
}

fn runtime(e: Error) -> CliError {
    CliError::new(1, kind_of(&e), e.to_string())
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::new(1, "io", e.to_string())
}

fn parse_sites(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| CliError::new(2, "config", format!("bad attention site {t:?} in {s:?}")))
        })
        .collect()
}

/// Builds the run configuration: preset, then config file, then flags.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut base = match args.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(2, "config", format!("{}: {e}", path.display())))?;
        let file: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::new(2, "config", format!("{}: {e}", path.display())))?;
        let mut merged = toml::Table::try_from(&base).expect("run config serializes");
        merge(&mut merged, file);
        base = RunConfig::from_toml(&toml::to_string(&merged).expect("table serializes"))
            .map_err(|e| CliError::new(2, "config", format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = args.seed {
        base = base.with_seed(seed);
    }
    if let Some(v) = args.epochs {
        base.run.epochs = v;
    }
    if let Some(v) = args.batch_size {
        base.run.batch_size = v;
    }
    if let Some(v) = args.lr {
        base.optimizer.lr = v;
    }
    if let Some(v) = &args.sites {
        base.network.attention_sites = parse_sites(v)?;
    }
    if let Some(v) = args.channel_scale {
        base.network.channel_scale = v;
    }
    if let Some(v) = &args.out {
        base.run.output_dir = v.clone();
    }
    base.validate().map_err(setup)?;
    Ok(base)
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn load_splits(args: &RunArgs, cfg: &RunConfig) -> Result<(ClipDataset, ClipDataset), CliError> {
    if args.synthetic {
        return cfg.synthetic_splits().map_err(setup);
    }
    let root = args
        .data
        .as_ref()
        .ok_or_else(|| CliError::new(2, "config", "pass --data DIR or --synthetic"))?;
    let train = load_clip_dir(&root.join("train")).map_err(setup)?;
    let eval = load_clip_dir(&root.join("eval")).map_err(setup)?;
    Ok((train, eval))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::TrainEval => "train-eval",
        Split::Eval => "eval",
    }
}

fn print_record<W: Write>(out: &mut W, r: &MetricsRecord) -> Result<(), CliError> {
    writeln!(
        out,
        "epoch {:>3} {:<10} loss {:.4} top1 {:6.2} top{} {:6.2}",
        r.epoch,
        split_name(r.split),
        r.loss,
        r.top1,
        r.k,
        r.top5
    )
    .map_err(io_err)
}

fn cmd_train<W: Write>(args: &RunArgs, out: &mut W) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let (mut train_set, mut eval_set) = load_splits(args, &cfg)?;
    let dir = cfg.run.output_dir.clone();
    if args.synthetic {
        // train on the written files so `eval --data` sees the same clip order
        let (train_dir, eval_dir) = (dir.join("data/train"), dir.join("data/eval"));
        train_set.save_dir(&train_dir).map_err(runtime)?;
        eval_set.save_dir(&eval_dir).map_err(runtime)?;
        train_set = load_clip_dir(&train_dir).map_err(runtime)?;
        eval_set = load_clip_dir(&eval_dir).map_err(runtime)?;
    }
    writeln!(
        out,
        "training {} epochs on {} clips ({} eval), output {}",
        cfg.run.epochs,
        train_set.len(),
        eval_set.len(),
        dir.display()
    )
    .map_err(io_err)?;
    let mut failed = None;
    let report = train_with_progress(&cfg, &train_set, &eval_set, Some(&dir), &mut |r| {
        if r.split != Split::Train {
            if let Err(e) = print_record(out, r) {
                failed.get_or_insert(e);
            }
        }
    })
    .map_err(setup_or_runtime)?;
    if let Some(e) = failed {
        return Err(e);
    }
    writeln!(
        out,
        "best eval top1 {:.2} at epoch {}; wrote {}",
        report.best_top1,
        report.best_epoch,
        dir.join("best.ckpt").display()
    )
    .map_err(io_err)
}

fn setup_or_runtime(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::Data(_) => setup(e),
        _ => runtime(e),
    }
}

/// Loads a checkpoint and rebuilds the network recorded in it.
fn load_network(path: &Path) -> Result<(RunConfig, crate::arch::Network<f32>), CliError> {
    let ck = Checkpoint::load(path).map_err(artifact)?;
    let text = ck
        .config_text()
        .ok_or_else(|| CliError::new(3, "format", format!("{}: no run configuration recorded", path.display())))?;
    let cfg = RunConfig::from_toml(&text).map_err(artifact)?;
    let mut net = build_res3atn::<f32>(&cfg.network).map_err(artifact)?;
    ck.restore(&mut net, None).map_err(artifact)?;
    Ok((cfg, net))
}

fn cmd_eval<W: Write>(checkpoint: &Path, data: &Path, topk: usize, batch: usize, json: bool, out: &mut W) -> Result<(), CliError> {
    if !matches!(topk, 1 | 5) {
        return Err(CliError::new(2, "config", format!("--topk must be 1 or 5, got {topk}")));
    }
    let (cfg, mut net) = load_network(checkpoint)?;
    let set = load_clip_dir(data).map_err(artifact)?;
    if set.classes.len() != net.spec.num_classes {
        return Err(CliError::new(
            3,
            "mismatch",
            format!("{} has {} classes, checkpoint network has {}", data.display(), set.classes.len(), net.spec.num_classes),
        ));
    }
    let r = evaluate(&mut net, &set, &cfg.augment, batch, 0, Split::Eval).map_err(artifact)?;
    if json {
        return writeln!(out, "{}", serde_json::to_string(&r).expect("record serializes")).map_err(io_err);
    }
    writeln!(out, "samples {}", r.samples).map_err(io_err)?;
    writeln!(out, "top1 {}", r.top1).map_err(io_err)?;
    if topk == 5 {
        writeln!(out, "top{} {}", r.k, r.top5).map_err(io_err)?;
        writeln!(out, "loss {}", r.loss).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_gradcheck<W: Write>(scale: usize, seed: u64, cases: usize, mutate: Option<MutateOp>, skip_network: bool, out: &mut W) -> Result<(), CliError> {
    let mutation = mutate.map(|MutateOp::Conv3d| Mutation::conv3d_weight());
    let cfg = GradCheckConfig {
        seed,
        mutation,
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    let suite = operator_suite::<f32>(&cfg, cases).map_err(runtime)?;
    for c in &suite {
        writeln!(
            out,
            "{:<20} cases {:>2}  max rel {:.3e}  {}",
            c.op,
            c.cases,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        )
        .map_err(io_err)?;
        ok &= c.passed;
    }
    if !skip_network {
        let mut spec = reduced_spec(seed);
        spec.channel_scale = scale;
        let net_cfg = GradCheckConfig {
            mutation,
            ..network_check_config(seed)
        };
        let r = network_grad_check::<f64>(&spec, NETWORK_CHECK_BATCH, &net_cfg).map_err(setup_or_runtime)?;
        writeln!(
            out,
            "{:<20} coords {:>3} (kinks skipped {})  max rel {:.3e}  {}",
            format!("network/{scale}"),
            r.checked,
            r.skipped,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        )
        .map_err(io_err)?;
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::new(1, "gradcheck", "gradient check failed"))
    }
}

fn cmd_ablate<W: Write>(run: &RunArgs, grid: Grid, variants: &[String], out: &mut W) -> Result<(), CliError> {
    let cfg = resolve_config(run)?;
    let sites = match grid {
        Grid::Standard => standard_grid(),
        Grid::Full => full_grid(),
        Grid::Custom => {
            if variants.is_empty() {
                return Err(CliError::new(2, "config", "--grid custom needs at least one --variant"));
            }
            variants.iter().map(|v| parse_sites(v)).collect::<Result<_, _>>()?
        }
    };
    let (train_set, eval_set) = load_splits(run, &cfg)?;
    let dir = cfg.run.output_dir.clone();
    let table = ablation_run(&cfg, &sites, &train_set, &eval_set, Some(&dir)).map_err(setup_or_runtime)?;
    write!(out, "{}", table.to_markdown()).map_err(io_err)?;
    writeln!(out, "wrote {}", dir.join("ablation.md").display()).map_err(io_err)
}

fn cmd_masks<W: Write>(checkpoint: &Path, clip: &Path, dir: &Path, out: &mut W) -> Result<(), CliError> {
    let (cfg, mut net) = load_network(checkpoint)?;
    let clip = LabeledClip::load(clip, 0).map_err(artifact)?;
    let x = eval_preprocess(&clip, &cfg.augment).map_err(artifact)?;
    let paths = export_attention_masks(&mut net, &x, dir).map_err(|e| match e {
        Error::Arch(_) => CliError::new(2, "arch", e.to_string()),
        e => artifact(e),
    })?;
    writeln!(out, "wrote {} mask images to {}", paths.len(), dir.display()).map_err(io_err)
}

fn init_threads() -> Result<(), CliError> {
    let n = match std::env::var("R3ATN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::new(2, "config", format!("R3ATN_THREADS must be a number, got {v:?}")))?,
        Err(_) => 0,
    };
    // only the first call in a process can size the global pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one parsed command, writing its report to `out`.
pub fn run<W: Write>(cli: &Cli, out: &mut W) -> Result<(), CliError> {
    init_threads()?;
    match &cli.command {
        Command::Train(args) => cmd_train(args, out),
        Command::Eval {
            checkpoint,
            data,
            topk,
            batch_size,
            json,
        } => cmd_eval(checkpoint, data, *topk, *batch_size, *json, out),
        Command::Gradcheck {
            scale,
            seed,
            cases,
            mutate,
            skip_network,
        } => cmd_gradcheck(*scale, *seed, *cases, *mutate, *skip_network, out),
        Command::Ablate { run, grid, variants } => cmd_ablate(run, *grid, variants, out),
        Command::Masks { checkpoint, clip, out: dir } => cmd_masks(checkpoint, clip, dir, out),
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn main_with_args<I, S, W, E>(args: I, out: &mut W, err: &mut E) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
    W: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            let _ = writeln!(err, "{}", CliError::new(2, "usage", first).line());
            return 2;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.line());
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = main_with_args(std::iter::once("res3atn").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_config_key_exits_2_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[run]\nepochz = 1\n").unwrap();
        let (code, _, err) = call(&["train", "--synthetic", "--config", p.to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(err.starts_with("res3atn: error[config]:") && err.contains("epochz"), "{err}");
        assert_eq!(err.lines().count(), 1);
    }

    #[test]
    fn config_file_overlays_preset_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[run]\nepochs = 7\nbatch_size = 4\n[network]\nattention_sites = [2]\n").unwrap();
        let cli = Cli::try_parse_from(["res3atn", "train", "--preset", "desk", "--config", p.to_str().unwrap(), "--epochs", "3"]).unwrap();
        let Command::Train(args) = &cli.command else { unreachable!() };
        let cfg = resolve_config(args).unwrap();
        assert_eq!((cfg.run.epochs, cfg.run.batch_size), (3, 4));
        assert_eq!(cfg.network.attention_sites, vec![2]);
        assert_eq!(cfg.network.channel_scale, 8);
    }

    #[test]
    fn eval_missing_checkpoint_exits_3() {
        let (code, _, err) = call(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", "/nonexistent"]);
        assert_eq!(code, 3, "{err}");
        assert!(err.starts_with("res3atn: error[file]:"), "{err}");
    }

    #[test]
    fn empty_custom_grid_exits_2() {
        let (code, _, err) = call(&["ablate", "--synthetic", "--preset", "desk", "--grid", "custom"]);
        assert_eq!(code, 2, "{err}");
    }

    #[test]
    fn bad_usage_is_one_line() {
        let (code, _, err) = call(&["train", "--epochs", "many"]);
        assert_eq!(code, 2);
        assert_eq!(err.lines().count(), 1);
        assert!(err.starts_with("res3atn: error[usage]:"));
    }

    #[test]
    fn sites_parse() {
        assert_eq!(parse_sites("1, 3").unwrap(), vec![1, 3]);
        assert!(parse_sites("").unwrap().is_empty());
        assert!(parse_sites("x").is_err());
    }
}
