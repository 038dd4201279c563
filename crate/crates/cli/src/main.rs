//! Batch front end: simulate cohorts, train models, run cross-validation and
//! variant comparisons, rank discriminative ROIs, export population templates.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage errors.
//! Every command is deterministic given its flags; the resolved
//! configuration, including the seed, is echoed through the logger.
//! Outputs are written atomically (temp file, then rename).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use remi_core::{
    compare_variants, crossval, discriminability_ranking, format_matrix, forward_subject_with_cycles,
    generate_synthetic, load_checkpoint, load_dataset, load_matrix, population_cbt,
    save_checkpoint, save_dataset, topk_overlap, train, Cbt, LongitudinalDataset, MetricsReport,
    TrainingConfig, Variant,
};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "remi",
    version,
    about = "Estimate and forecast connectional templates for longitudinal brain multigraphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal cohort on disk.
    Simulate(SimulateArgs),
    /// Train a model and write checkpoints plus the loss history.
    Train(TrainArgs),
    /// K-fold cross-validation of one variant.
    Crossval(CrossvalArgs),
    /// Cross-validate several variants over shared folds, with paired tests.
    Compare(CompareArgs),
    /// Rank ROIs by how strongly two templates disagree.
    Discriminate(DiscriminateArgs),
    /// Rebuild the population template from a checkpoint and export it.
    ExportCbt(ExportCbtArgs),
}

fn non_negative(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("{x} must be finite and non-negative"))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    subjects: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rois: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    views: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    timepoints: u64,
    #[arg(long, env = "REMI_SEED", default_value_t = 42)]
    seed: u64,
    /// Scale of the per-timepoint population drift.
    #[arg(long, default_value_t = 0.05, value_parser = non_negative)]
    drift: f64,
    /// Scale of the per-observation symmetric noise.
    #[arg(long, default_value_t = 0.05, value_parser = non_negative)]
    noise: f64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

/// Training options shared by train, crossval and compare. Precedence:
/// command-line flag, then REMI_SEED (seed only), then configuration file,
/// then built-in default.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// TOML run-configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: vanilla, cyclic, cyclic-minmax or full.
    #[arg(long)]
    variant: Option<Variant>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Temporal regularisation weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Peer subjects sampled per training step.
    #[arg(long)]
    k: Option<usize>,
    /// Recursion cycles; defaults to the variant's convention.
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long, env = "REMI_SEED")]
    seed: Option<u64>,
    /// Epoch interval between held-out evaluations.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Symmetric gradient clip bound.
    #[arg(long)]
    grad_clip: Option<f64>,
}

/// On-disk mirror of the training options plus run plumbing. Unknown keys
/// are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    variant: Option<Variant>,
    hidden_dims: Option<Vec<usize>>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    alpha: Option<f64>,
    k_samples: Option<usize>,
    cycles: Option<usize>,
    seed: Option<u64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_epsilon: Option<f64>,
    eval_every: Option<usize>,
    grad_clip: Option<f64>,
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    variants: Option<Vec<Variant>>,
    folds: Option<usize>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
}

fn resolve_config(flags: &ConfigFlags) -> Result<(TrainingConfig, RunConfigFile)> {
    let file = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading configuration file {}", path.display()))?;
            toml::from_str::<RunConfigFile>(&text)
                .with_context(|| format!("parsing configuration file {}", path.display()))?
        }
        None => RunConfigFile::default(),
    };
    let mut config = TrainingConfig::default();
    let f = &file;
    if let Some(v) = f.variant {
        config.variant = v;
    }
    if let Some(d) = &f.hidden_dims {
        config.hidden_dims = d.clone();
    }
    if let Some(x) = f.learning_rate {
        config.learning_rate = x;
    }
    if let Some(x) = f.epochs {
        config.epochs = x;
    }
    if let Some(x) = f.alpha {
        config.alpha = x;
    }
    if let Some(x) = f.k_samples {
        config.k_samples = x;
    }
    if f.cycles.is_some() {
        config.cycles = f.cycles;
    }
    if let Some(x) = f.seed {
        config.seed = x;
    }
    if let Some(x) = f.adam_beta1 {
        config.adam_beta1 = x;
    }
    if let Some(x) = f.adam_beta2 {
        config.adam_beta2 = x;
    }
    if let Some(x) = f.adam_epsilon {
        config.adam_epsilon = x;
    }
    if let Some(x) = f.eval_every {
        config.eval_every = x;
    }
    if f.grad_clip.is_some() {
        config.grad_clip = f.grad_clip;
    }
    if let Some(v) = flags.variant {
        config.variant = v;
    }
    if let Some(d) = &flags.hidden {
        config.hidden_dims = d.clone();
    }
    if let Some(x) = flags.lr {
        config.learning_rate = x;
    }
    if let Some(x) = flags.epochs {
        config.epochs = x;
    }
    if let Some(x) = flags.alpha {
        config.alpha = x;
    }
    if let Some(x) = flags.k {
        config.k_samples = x;
    }
    if flags.cycles.is_some() {
        config.cycles = flags.cycles;
    }
    if let Some(x) = flags.seed {
        config.seed = x;
    }
    if let Some(x) = flags.eval_every {
        config.eval_every = x;
    }
    if flags.grad_clip.is_some() {
        config.grad_clip = flags.grad_clip;
    }
    Ok((config, file))
}

/// Accept either a manifest path or a dataset directory.
fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.toml")
    } else {
        data.to_path_buf()
    }
}

fn load_data(data: &Path) -> Result<LongitudinalDataset> {
    load_dataset(&manifest_path(data))
        .with_context(|| format!("loading dataset {}", data.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write through a temp file and rename, so interrupted runs never leave a
/// half-written artifact.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = tmp_sibling(path);
    std::fs::write(&tmp, contents)
        .with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_checkpoint_atomic(path: &Path, params: &remi_core::ModelParams, config: &TrainingConfig) -> Result<()> {
    let tmp = tmp_sibling(path);
    save_checkpoint(&tmp, params, config)
        .with_context(|| format!("writing checkpoint {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn init_worker_pool(jobs: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build_global()
        .context("initialising the worker pool")
}

fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_atomic(&out.join("folds.csv"), &report.folds_csv())?;
    write_atomic(&out.join("aggregate.csv"), &report.aggregate_csv())?;
    write_atomic(&out.join("summary.txt"), &report.summary())?;
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset for best-model selection.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Output directory for checkpoints and the loss history.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for fold-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated variant list.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for fold-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct DiscriminateArgs {
    /// First template (view-file CSV).
    #[arg(long)]
    cbt_a: PathBuf,
    /// Second template (view-file CSV).
    #[arg(long)]
    cbt_b: PathBuf,
    /// How many top ROIs to report.
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(1..))]
    topk: u64,
    /// Optional CSV output for the full ranking.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCbtArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for per-timepoint template files.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    log::info!(
        "simulate: {} subjects, {} ROIs, {} views, {} timepoints, seed {}, drift {}, noise {}",
        args.subjects,
        args.rois,
        args.views,
        args.timepoints,
        args.seed,
        args.drift,
        args.noise
    );
    let ds = generate_synthetic(
        args.subjects as usize,
        args.rois as usize,
        args.views as usize,
        args.timepoints as usize,
        args.seed,
        args.drift,
        args.noise,
    );
    let manifest = save_dataset(&ds, &args.out)
        .with_context(|| format!("writing dataset under {}", args.out.display()))?;
    println!(
        "wrote dataset: {} subjects, {} ROIs, {} views, {} timepoints -> {}",
        ds.n_subjects(),
        ds.dims.n_rois,
        ds.dims.n_views,
        ds.dims.n_timepoints,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (config, file) = resolve_config(&args.config)?;
    let data = args
        .data
        .clone()
        .or(file.data)
        .ok_or_else(|| anyhow::anyhow!("no dataset: pass --data or set data in the config file"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set out in the config file"))?;
    let eval_data = args.eval_data.clone().or(file.eval_data);
    log::info!("resolved configuration: {config:?}");
    log::info!(
        "train: data {}, evaluation {}, output {}",
        data.display(),
        eval_data
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none".to_string()),
        out.display()
    );

    let ds = load_data(&data)?;
    let eval_set = eval_data.as_deref().map(load_data).transpose()?;
    let result = train(&ds, eval_set.as_ref(), &config).context("training failed")?;

    ensure_dir(&out)?;
    write_checkpoint_atomic(&out.join("checkpoint_last.ckpt"), &result.last, &config)?;
    if eval_set.is_some() {
        write_checkpoint_atomic(&out.join("checkpoint_best.ckpt"), &result.best, &config)?;
    }
    write_atomic(&out.join("history.csv"), &result.history.to_csv())?;
    let last = result.history.records.last().expect("nonempty history");
    println!(
        "finished {} epochs: loss {:.6}{}",
        config.epochs,
        last.mean_total,
        result
            .best_epoch
            .map(|e| format!(", best held-out score at epoch {e}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_crossval(args: &CrossvalArgs) -> Result<()> {
    let (config, file) = resolve_config(&args.config)?;
    let data = args
        .data
        .clone()
        .or(file.data)
        .ok_or_else(|| anyhow::anyhow!("no dataset: pass --data or set data in the config file"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set out in the config file"))?;
    let folds = args
        .folds
        .or(file.folds)
        .ok_or_else(|| anyhow::anyhow!("no fold count: pass --folds or set folds in the config file"))?;
    let jobs = args.jobs.or(file.jobs).unwrap_or(1);
    init_worker_pool(jobs)?;
    log::info!("resolved configuration: {config:?}");
    log::info!(
        "crossval: data {}, {folds} folds, {jobs} worker(s), output {}",
        data.display(),
        out.display()
    );

    let ds = load_data(&data)?;
    let report = crossval(&ds, &config, folds).context("cross-validation failed")?;
    write_report(&report, &out)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let (config, file) = resolve_config(&args.config)?;
    let data = args
        .data
        .clone()
        .or(file.data)
        .ok_or_else(|| anyhow::anyhow!("no dataset: pass --data or set data in the config file"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set out in the config file"))?;
    let folds = args
        .folds
        .or(file.folds)
        .ok_or_else(|| anyhow::anyhow!("no fold count: pass --folds or set folds in the config file"))?;
    let variants = args
        .variants
        .clone()
        .or(file.variants)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| anyhow::anyhow!("no variants: pass --variants or set variants in the config file"))?;
    let jobs = args.jobs.or(file.jobs).unwrap_or(1);
    init_worker_pool(jobs)?;
    log::info!("resolved configuration: {config:?}");
    log::info!(
        "compare: data {}, variants {:?}, {folds} folds, {jobs} worker(s), output {}",
        data.display(),
        variants.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
        out.display()
    );

    let ds = load_data(&data)?;
    let report =
        compare_variants(&ds, &config, &variants, folds).context("variant comparison failed")?;
    write_report(&report, &out)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_discriminate(args: &DiscriminateArgs) -> Result<()> {
    log::info!(
        "discriminate: {} vs {}, top {}",
        args.cbt_a.display(),
        args.cbt_b.display(),
        args.topk
    );
    let a = load_matrix(&args.cbt_a)
        .with_context(|| format!("loading template {}", args.cbt_a.display()))?;
    let b = load_matrix(&args.cbt_b)
        .with_context(|| format!("loading template {}", args.cbt_b.display()))?;
    if a.dim() != b.dim() {
        bail!(
            "template shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        );
    }
    let k = args.topk as usize;
    if k > a.nrows() {
        bail!("--topk {} exceeds the {} ROIs", k, a.nrows());
    }
    let ranking = discriminability_ranking(&a, &b);
    let mut csv = String::from("rank,roi,score\n");
    for (position, &roi) in ranking.ranking.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{:.16e}\n",
            position + 1,
            roi,
            ranking.scores[roi]
        ));
    }
    match &args.out {
        Some(path) => write_atomic(path, &csv)?,
        None => print!("{csv}"),
    }
    let top: Vec<String> = ranking.top_k(k).iter().map(|r| r.to_string()).collect();
    println!("top-{k} ROIs: {}", top.join(", "));
    println!(
        "top-{k} self-overlap: {:.3}",
        topk_overlap(&ranking, &ranking, k)
    );
    Ok(())
}

fn cmd_export_cbt(args: &ExportCbtArgs) -> Result<()> {
    let (params, config) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    log::info!("resolved configuration: {config:?}");
    let data = args
        .data
        .clone()
        .ok_or_else(|| anyhow::anyhow!("no dataset: pass --data"))?;
    log::info!(
        "export-cbt: data {}, checkpoint {}, output {}",
        data.display(),
        args.checkpoint.display(),
        args.out.display()
    );
    let ds = load_data(&data)?;
    let n_t = ds.dims.n_timepoints;
    let cycles = config.effective_cycles();
    let per_subject: Vec<Vec<Cbt>> = ds
        .subjects
        .iter()
        .map(|s| forward_subject_with_cycles(s.baseline(), &params, n_t, cycles))
        .collect();
    let pop = population_cbt(&per_subject);
    ensure_dir(&args.out)?;
    for (t, c) in pop.cbts.iter().enumerate() {
        write_atomic(&args.out.join(format!("cbt_t{}.csv", t + 1)), &format_matrix(c))?;
    }
    println!(
        "exported {} population templates ({} ROIs)",
        pop.cbts.len(),
        pop.n_rois()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Crossval(args) => cmd_crossval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Discriminate(args) => cmd_discriminate(args),
        Command::ExportCbt(args) => cmd_export_cbt(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
