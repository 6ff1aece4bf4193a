//! Command-line front end. `run` returns the process exit code: 0 on success,
//! 2 for unusable flags and 1 for everything else.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{TrainConfig, Variant};
use crate::graph::{generate_sbm, load_dataset_with, save_dataset, Graph, LoadOptions, SbmParams};
use crate::runs::{emit_report, node_losses_csv, probe_csv, read_checkpoint, write_run, ReportRow};
use crate::trainer::{noise_probe, per_node_loss_report, train};

pub const SEED_ENV: &str = "FREEKD_SEED";

#[derive(Parser, Debug)]
#[command(name = "freekd", version, about = "Mutual distillation between two graph neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a stochastic block model dataset.
    GenSbm(GenSbm),
    /// Load a dataset directory and print its shape.
    ValidateData(DataArgs),
    /// Train one pair from a config file.
    Train(TrainArgs),
    /// Run every variant over a range of seeds and tabulate.
    Ablate(AblateArgs),
    /// Re-score the node-level policy with phi's weights perturbed.
    Probe(ProbeArgs),
    /// Summarize run directories into one CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenSbm {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 150)]
    nodes_per_block: usize,
    #[arg(long, default_value_t = 0.08)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    feature_noise: f64,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 120)]
    val_size: usize,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of classes, when some classes have no labeled node.
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the config seed and the environment.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Noise levels for probe.csv.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
    sigmas: Vec<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Seeds `first..first+seeds`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long)]
    first_seed: Option<u64>,
    /// Defaults to every variant.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// A directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0])]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<run>/probe.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories, or parents that are searched for them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name) and executes it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenSbm(a) => gen_sbm(a),
        Command::ValidateData(a) => {
            let g = load(&a)?;
            println!(
                "nodes {}  edges {}  features {}  classes {}  train {}  val {}  test {}",
                g.num_nodes(),
                g.num_edges(),
                g.num_features(),
                g.num_classes(),
                g.train_nodes().len(),
                g.val_nodes().len(),
                g.test_nodes().len()
            );
            Ok(())
        }
        Command::Train(a) => train_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Probe(a) => probe(a),
        Command::Report(a) => {
            let dirs = find_runs(&a.runs)?;
            let rows = emit_report(&dirs, &a.out)?;
            print_rows(&rows);
            Ok(())
        }
    }
}

fn gen_sbm(a: GenSbm) -> anyhow::Result<()> {
    let params = SbmParams {
        nodes_per_block: a.nodes_per_block,
        blocks: a.blocks,
        p_in: a.p_in,
        p_out: a.p_out,
        feature_dim: a.feature_dim,
        feature_noise: a.feature_noise,
        seed: a.seed,
        train_per_class: a.train_per_class,
        val_size: a.val_size,
        test_size: a.test_size,
    };
    let g = generate_sbm(&params)?;
    save_dataset(&g, &a.out)?;
    println!("wrote {} nodes, {} edges to {}", g.num_nodes(), g.num_edges(), a.out.display());
    Ok(())
}

fn load(a: &DataArgs) -> anyhow::Result<Graph> {
    let opts = LoadOptions {
        num_classes: a.num_classes,
    };
    Ok(load_dataset_with(&a.data, &opts)?)
}

/// Reads the config, then applies the environment seed, then the flag.
fn load_config(path: &Path, seed_flag: Option<u64>) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
    }
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config, a.seed)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let graph = load(&a.data)?;
    let outcome = train(&graph, &cfg)?;
    write_run(&a.out, &cfg, &outcome)?;

    let all: Vec<usize> = (0..graph.num_nodes()).collect();
    let losses = per_node_loss_report(&graph, &outcome.phi, &outcome.psi, &all)?;
    std::fs::write(a.out.join("node_losses.csv"), node_losses_csv(&losses, graph.ids()))?;
    let rows = noise_probe(&outcome, &a.sigmas, &graph, &all, cfg.seed)?;
    std::fs::write(a.out.join("probe.csv"), probe_csv(&rows, graph.ids()))?;

    let m = &outcome.metrics;
    println!(
        "{}: test micro-F1 phi {:.4} psi {:.4} (best epoch {}, {} epochs)",
        cfg.variant,
        m.test_f1_phi,
        m.test_f1_psi,
        m.best_epoch,
        m.epochs.len()
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = load_config(&a.config, None)?;
    let graph = load(&a.data)?;
    let first = a.first_seed.unwrap_or(base.seed);
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| (first..first + a.seeds).map(move |s| (v, s)))
        .collect();
    let dirs: Vec<PathBuf> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let dir = a.out.join(variant.name()).join(format!("seed-{seed}"));
            let outcome = train(&graph, &cfg).with_context(|| format!("{variant} seed {seed}"))?;
            write_run(&dir, &cfg, &outcome)?;
            Ok(dir)
        })
        .collect::<anyhow::Result<_>>()?;
    let rows = emit_report(&dirs, &a.out.join("ablation.csv"))?;
    print_rows(&rows);
    Ok(())
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let graph = load(&a.data)?;
    let outcome = read_checkpoint(&a.run)?.into_outcome();
    let all: Vec<usize> = (0..graph.num_nodes()).collect();
    let rows = noise_probe(&outcome, &a.sigmas, &graph, &all, a.seed)?;
    let out = a.out.unwrap_or_else(|| a.run.join("probe.csv"));
    std::fs::write(&out, probe_csv(&rows, graph.ids())).with_context(|| out.display().to_string())?;
    for (s, m) in a.sigmas.iter().zip(crate::trainer::probe_means(&rows, &a.sigmas)) {
        println!("sigma {s}: mean p(phi teaches) {m:.4}");
    }
    Ok(())
}

fn find_runs(roots: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        if dir.join("metrics.json").is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        for c in children {
            walk(&c, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for r in roots {
        if !r.is_dir() {
            bail!("{} is not a directory", r.display());
        }
        walk(r, &mut out).with_context(|| r.display().to_string())?;
    }
    if out.is_empty() {
        bail!("no metrics.json found under the given directories");
    }
    Ok(out)
}

fn print_rows(rows: &[ReportRow]) {
    for r in rows {
        let gain = r.improvement.map(|x| format!("{:+.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
        println!(
            "{:<15} {}+{}  phi {:.2} ± {:.2}  psi {:.2} ± {:.2}  gain {}  (n={})",
            r.variant.name(),
            r.arch_phi,
            r.arch_psi,
            100.0 * r.mean_f1_phi,
            100.0 * r.std_f1_phi,
            100.0 * r.mean_f1_psi,
            100.0 * r.std_f1_psi,
            gain,
            r.runs
        );
    }
}
