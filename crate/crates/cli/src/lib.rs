//! The `spreadnet` command line: `gen`, `stats`, `split`, `train`, `eval`,
//! `baseline` and `gradcheck`.
//!
//! Every subcommand takes an optional `--config` file of `key=value` lines
//! and repeatable `--set key=value` overrides. Flags win over `--set`,
//! which wins over the file. Exit codes: 0 on success, 1 on usage errors,
//! 2 on runtime errors.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use spreadnet::dataio::{join, meta_path, read_esg, split_dataset, KeyValues, SampleMeta, SplitManifest, StatsFile};
use spreadnet::layers::layer_grad_checks;
use spreadnet::models::{read_checkpoint, write_checkpoint, Arch, LinearBaseline, Model, ModelSpec, TemporalMode};
use spreadnet::synth::{generate_dataset, sample_path, GenConfig, SplitOptions};
use spreadnet::train::{
    curve_csv, evaluate, fit_linear_on, prepare, train, EvalConfig, EvalReport, InputConfig, ModelEstimator,
    ReducedSample, SpreadEstimator, StatsAccumulator, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "spreadnet",
    version,
    about = "Emulate ensemble spread from a few trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// File of key=value lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory with ESG samples.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Split manifest [default: DIR/manifest.txt].
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ensemble dataset and its split manifest.
    Gen {
        /// Directory for samples, meta files and the manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compute standardization statistics over the training split.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Output file [default: DIR/stats.txt].
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a train/validation/test manifest for a dataset directory.
    Split {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output file [default: DIR/manifest.txt].
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a spread model; writes checkpoints, inputs.txt and curve.csv.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Stats file [default: DIR/stats.txt].
        #[arg(long, value_name = "FILE")]
        stats: Option<PathBuf>,
        /// Run directory for checkpoints and the learning curve.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Seeds both shuffling and initialization.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score checkpoints, the linear baseline and the m-member spreads.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Stats file [default: DIR/stats.txt].
        #[arg(long, value_name = "FILE")]
        stats: Option<PathBuf>,
        /// Checkpoint with inputs.txt beside it (repeatable).
        #[arg(long, value_name = "FILE")]
        checkpoint: Vec<PathBuf>,
        /// Directory for reports and heatmaps.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the per-level linear baseline and score it.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        /// Directory for the fitted baseline and its report.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check every layer's gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failed run: usage errors exit 1, runtime errors exit 2.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome<T> = Result<T, Failure>;

fn usage(stage: &str, msg: impl Display) -> Failure {
    Failure::Usage(format!("spreadnet {stage}: {msg}"))
}

fn runtime(stage: &str, msg: impl Display) -> Failure {
    Failure::Runtime(format!("spreadnet {stage}: {msg}"))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.command {
        Command::Gen {
            out,
            samples,
            seed,
            cfg,
        } => cmd_gen(&out, samples, seed, &cfg),
        Command::Stats { data, out, cfg } => cmd_stats(&data, out, &cfg),
        Command::Split { data, out, seed, cfg } => cmd_split(&data, out, seed, &cfg),
        Command::Train {
            data,
            stats,
            out,
            seed,
            steps,
            cfg,
        } => cmd_train(&data, stats, &out, seed, steps, &cfg),
        Command::Eval {
            data,
            stats,
            checkpoint,
            out,
            cfg,
        } => cmd_eval(&data, stats, &checkpoint, &out, &cfg),
        Command::Baseline { data, out, cfg } => cmd_baseline(&data, &out, &cfg),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("{m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("{m}");
            2
        }
    }
}

/// Merges the config file, `--set` entries and flags, then rejects keys
/// outside `valid`.
fn load_config(stage: &str, args: &ConfigArgs, flags: &[(&str, Option<String>)], valid: &[&str]) -> Outcome<KeyValues> {
    let mut kv = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(stage, format!("{}: {e}", path.display())))?;
            KeyValues::parse(&text).map_err(|e| usage(stage, format!("{}: {e}", path.display())))?
        }
        None => KeyValues::default(),
    };
    for entry in &args.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| usage(stage, format!("--set expects KEY=VALUE, got '{entry}'")))?;
        kv.set(k.trim(), v.trim());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v.as_str());
        }
    }
    kv.check_known(valid).map_err(|e| usage(stage, e))?;
    Ok(kv)
}

/// The entries of `kv` whose keys are in `keys`.
fn subset(kv: &KeyValues, keys: &[&str]) -> KeyValues {
    let mut out = KeyValues::default();
    for k in kv.keys().filter(|k| keys.contains(k)) {
        out.set(k, kv.get(k).unwrap_or_default());
    }
    out
}

fn require_file(stage: &str, what: &str, path: &Path) -> Outcome<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(stage, format!("missing {what} {}", path.display())))
    }
}

fn require_dir(stage: &str, path: &Path) -> Outcome<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(stage, format!("missing data directory {}", path.display())))
    }
}

fn write_text(stage: &str, path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).map_err(|e| runtime(stage, format!("{}: {e}", path.display())))
}

fn create_dir(stage: &str, path: &Path) -> Outcome<()> {
    fs::create_dir_all(path).map_err(|e| runtime(stage, format!("{}: {e}", path.display())))
}

/// The most recent fifth of the epoch tags, at least one when there are two or more.
fn default_test_epochs(n_epochs: u32) -> BTreeSet<u32> {
    if n_epochs < 2 {
        return BTreeSet::new();
    }
    let n = (n_epochs / 5).max(1);
    (n_epochs - n..n_epochs).collect()
}

fn split_options(stage: &str, kv: &KeyValues, seed_key: &str, n_epochs: u32) -> Outcome<SplitOptions> {
    let bad = |e| usage(stage, e);
    Ok(SplitOptions {
        seed: kv.optional(seed_key).map_err(bad)?.unwrap_or(0),
        train_frac: kv.optional("train_frac").map_err(bad)?.unwrap_or(0.8),
        test_epoch_tags: match kv.list("test_epochs").map_err(bad)? {
            Some(v) => v.into_iter().collect(),
            None => default_test_epochs(n_epochs),
        },
    })
}

fn cmd_gen(out: &Path, samples: Option<usize>, seed: Option<u64>, args: &ConfigArgs) -> Outcome<()> {
    const STAGE: &str = "gen";
    let extra = ["samples", "split_seed", "train_frac", "test_epochs"];
    let valid: Vec<&str> = GenConfig::KEYS.iter().copied().chain(extra).collect();
    let flags = [
        ("samples", samples.map(|v| v.to_string())),
        ("seed", seed.map(|v| v.to_string())),
    ];
    let kv = load_config(STAGE, args, &flags, &valid)?;
    let mut cfg = GenConfig::default();
    cfg.apply(&subset(&kv, &GenConfig::KEYS)).map_err(|e| usage(STAGE, e))?;
    let n: usize = kv.optional("samples").map_err(|e| usage(STAGE, e))?.unwrap_or(100);
    let split = split_options(STAGE, &kv, "split_seed", cfg.n_epochs)?;
    let (paths, manifest) = generate_dataset(&cfg, n, out, &split).map_err(|e| runtime(STAGE, e))?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        paths.len(),
        out.display(),
        manifest.train_ids.len(),
        manifest.val_ids.len(),
        manifest.test_ids.len()
    );
    Ok(())
}

fn cmd_split(data: &Path, out: Option<PathBuf>, seed: Option<u64>, args: &ConfigArgs) -> Outcome<()> {
    const STAGE: &str = "split";
    require_dir(STAGE, data)?;
    let flags = [("seed", seed.map(|v| v.to_string()))];
    let kv = load_config(STAGE, args, &flags, &["seed", "train_frac", "test_epochs"])?;
    let entries = fs::read_dir(data).map_err(|e| runtime(STAGE, format!("{}: {e}", data.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "esg"))
        .collect();
    files.sort();
    let mut ids = Vec::with_capacity(files.len());
    for f in &files {
        let mp = meta_path(f);
        let text = fs::read_to_string(&mp).map_err(|e| runtime(STAGE, format!("{}: {e}", mp.display())))?;
        let meta = SampleMeta::parse(&text).map_err(|e| runtime(STAGE, format!("{}: {e}", mp.display())))?;
        ids.push((meta.sample_id, meta.epoch_tag));
    }
    let n_epochs = ids.iter().map(|(_, t)| t + 1).max().unwrap_or(0);
    let opts = split_options(STAGE, &kv, "seed", n_epochs)?;
    let manifest =
        split_dataset(&ids, opts.seed, opts.train_frac, &opts.test_epoch_tags).map_err(|e| runtime(STAGE, e))?;
    let out = out.unwrap_or_else(|| data.join("manifest.txt"));
    manifest.write(&out).map_err(|e| runtime(STAGE, e))?;
    println!(
        "wrote {} (train {}, val {}, test {})",
        out.display(),
        manifest.train_ids.len(),
        manifest.val_ids.len(),
        manifest.test_ids.len()
    );
    Ok(())
}

fn read_manifest(stage: &str, data: &DataArgs) -> Outcome<SplitManifest> {
    require_dir(stage, &data.data)?;
    let path = data.manifest.clone().unwrap_or_else(|| data.data.join("manifest.txt"));
    require_file(stage, "manifest", &path)?;
    SplitManifest::read(&path).map_err(|e| runtime(stage, format!("{}: {e}", path.display())))
}

fn read_stats(stage: &str, data: &DataArgs, stats: Option<PathBuf>) -> Outcome<StatsFile> {
    let path = stats.unwrap_or_else(|| data.data.join("stats.txt"));
    require_file(stage, "stats file", &path)?;
    StatsFile::read(&path).map_err(|e| runtime(stage, format!("{}: {e}", path.display())))
}

fn cmd_stats(data: &DataArgs, out: Option<PathBuf>, args: &ConfigArgs) -> Outcome<()> {
    const STAGE: &str = "stats";
    load_config(STAGE, args, &[], &[])?;
    let manifest = read_manifest(STAGE, data)?;
    let mut acc = StatsAccumulator::new();
    for id in &manifest.train_ids {
        let sample = read_esg(&sample_path(&data.data, id)).map_err(|e| runtime(STAGE, e))?;
        acc.push(&sample).map_err(|e| runtime(STAGE, e))?;
    }
    let stats = acc.finish().map_err(|e| runtime(STAGE, e))?;
    let out = out.unwrap_or_else(|| data.data.join("stats.txt"));
    stats.write(&out).map_err(|e| runtime(STAGE, e))?;
    println!(
        "wrote {} from {} training samples",
        out.display(),
        manifest.train_ids.len()
    );
    Ok(())
}

/// Reads samples and keeps only what training and evaluation need.
fn load_samples(
    stage: &str,
    dir: &Path,
    ids: &[String],
    keep: usize,
    input: &InputConfig,
) -> Outcome<Vec<ReducedSample>> {
    ids.iter()
        .map(|id| {
            let s = read_esg(&sample_path(dir, id)).map_err(|e| runtime(stage, e))?;
            ReducedSample::new(&s, keep.min(s.n_members()), input.target_param, input.target_time)
                .map_err(|e| runtime(stage, format!("sample {id}: {e}")))
        })
        .collect()
}

/// Members an input recipe reads.
fn members_needed(input: &InputConfig) -> usize {
    match input.temporal_mode {
        TemporalMode::None => input.m_trajectories,
        _ => 1,
    }
}

/// Model keys a user may set; the rest follow from the data and inputs.
const MODEL_KEYS: [&str; 8] = [
    "arch",
    "base_channels",
    "depth",
    "conv_variant",
    "model_seed",
    "kernel",
    "bn_group",
    "time_steps",
];

fn cmd_train(
    data: &DataArgs,
    stats: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    args: &ConfigArgs,
) -> Outcome<()> {
    const STAGE: &str = "train";
    let valid: Vec<&str> = TrainConfig::KEYS
        .iter()
        .chain(&MODEL_KEYS)
        .chain(&InputConfig::KEYS)
        .copied()
        .collect();
    let s = seed.map(|v| v.to_string());
    let flags = [
        ("seed", s.clone()),
        ("model_seed", s),
        ("steps", steps.map(|v| v.to_string())),
    ];
    let kv = load_config(STAGE, args, &flags, &valid)?;
    let manifest = read_manifest(STAGE, data)?;
    let stats = read_stats(STAGE, data, stats)?;
    let first_id = manifest
        .train_ids
        .first()
        .ok_or_else(|| runtime(STAGE, "empty training split"))?;
    let first = read_esg(&sample_path(&data.data, first_id)).map_err(|e| runtime(STAGE, e))?;
    let grid = first.spec.clone();
    let input = InputConfig::from_kv(&grid, &subset(&kv, &InputConfig::KEYS)).map_err(|e| usage(STAGE, e))?;
    input.validate(&grid, first.n_members()).map_err(|e| usage(STAGE, e))?;
    let mut cfg = TrainConfig::default();
    cfg.apply(&kv).map_err(|e| usage(STAGE, e))?;
    cfg.validate().map_err(|e| usage(STAGE, e))?;
    let mut spec = ModelSpec {
        temporal_mode: input.temporal_mode,
        time_steps: input.input_times.len(),
        ..ModelSpec::default()
    };
    spec.apply(&subset(&kv, &MODEL_KEYS)).map_err(|e| usage(STAGE, e))?;
    spec.in_channels = input.channels(&grid);
    spec.out_channels = 1;
    spec.n_levels = input.levels(&grid);
    spec.n_lat = grid.n_lat;
    spec.n_lon = grid.n_lon;
    if spec.arch == Arch::ConvLstm && spec.temporal_mode == TemporalMode::None {
        return Err(usage(STAGE, "convlstm needs temporal_mode spread or spread+ip"));
    }
    let model = Model::build(spec).map_err(|e| usage(STAGE, e))?;

    let keep = members_needed(&input);
    let all_levels = input.temporal_mode != TemporalMode::None;
    let train_samples = load_samples(STAGE, &data.data, &manifest.train_ids, keep, &input)?;
    let val_samples = load_samples(STAGE, &data.data, &manifest.val_ids, keep, &input)?;
    let train_set = prepare(&train_samples, &stats, &input, all_levels).map_err(|e| runtime(STAGE, e))?;
    let val_set = if val_samples.is_empty() {
        None
    } else {
        Some(prepare(&val_samples, &stats, &input, all_levels).map_err(|e| runtime(STAGE, e))?)
    };
    println!(
        "training {} parameters on {} examples ({} validation)",
        model.params.count(),
        train_set.len(),
        val_set.as_ref().map_or(0, |v| v.len())
    );
    let outcome = train(model, &train_set, val_set.as_ref(), &cfg, |p| {
        if let Some(v) = p.val_rmse {
            println!("step {} train_mse {:.6e} val_rmse {:.6e}", p.step, p.train_mse, v);
        } else if p.step % cfg.checkpoint_every == 0 {
            println!("step {} train_mse {:.6e}", p.step, p.train_mse);
        }
    })
    .map_err(|e| runtime(STAGE, e))?;

    create_dir(STAGE, out)?;
    write_checkpoint(&outcome.model, &out.join("final.ckpt")).map_err(|e| runtime(STAGE, e))?;
    write_checkpoint(&outcome.best, &out.join("best.ckpt")).map_err(|e| runtime(STAGE, e))?;
    write_text(STAGE, &out.join("inputs.txt"), &input.to_text())?;
    write_text(STAGE, &out.join("curve.csv"), &curve_csv(&outcome.curve))?;
    match outcome.best_val_rmse {
        Some(r) => println!(
            "best step {} val_rmse {:.6e}; wrote {}",
            outcome.best_step,
            r,
            out.display()
        ),
        None => println!("wrote {}", out.display()),
    }
    Ok(())
}

fn eval_config(stage: &str, kv: &KeyValues, out: &Path) -> Outcome<EvalConfig> {
    let bad = |e| usage(stage, e);
    let d = EvalConfig::default();
    Ok(EvalConfig {
        heatmap_level: kv.optional("heatmap_level").map_err(bad)?.unwrap_or(d.heatmap_level),
        heatmap_samples: kv
            .optional("heatmap_samples")
            .map_err(bad)?
            .unwrap_or(d.heatmap_samples),
        heatmap_dir: Some(out.join("heatmaps")),
    })
}

fn eval_ids<'a>(stage: &str, kv: &KeyValues, manifest: &'a SplitManifest) -> Outcome<&'a [String]> {
    let ids = match kv.get("split").unwrap_or("test") {
        "test" => &manifest.test_ids,
        "val" => &manifest.val_ids,
        other => return Err(usage(stage, format!("split must be test or val, got '{other}'"))),
    };
    if ids.is_empty() {
        return Err(runtime(stage, "evaluation split is empty"));
    }
    Ok(ids)
}

fn write_report(stage: &str, out: &Path, report: &EvalReport) -> Outcome<()> {
    write_text(stage, &out.join("report.txt"), &report.to_table())?;
    write_text(stage, &out.join("report.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_eval(
    data: &DataArgs,
    stats: Option<PathBuf>,
    checkpoints: &[PathBuf],
    out: &Path,
    args: &ConfigArgs,
) -> Outcome<()> {
    const STAGE: &str = "eval";
    let kv = load_config(
        STAGE,
        args,
        &[],
        &["heatmap_level", "heatmap_samples", "split", "linear"],
    )?;
    if checkpoints.is_empty() {
        return Err(usage(STAGE, "at least one --checkpoint is required"));
    }
    let manifest = read_manifest(STAGE, data)?;
    let stats = read_stats(STAGE, data, stats)?;
    let mut estimators = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        require_file(STAGE, "checkpoint", path)?;
        let inputs = path.with_file_name("inputs.txt");
        require_file(STAGE, "input recipe", &inputs)?;
        let text = fs::read_to_string(&inputs).map_err(|e| runtime(STAGE, format!("{}: {e}", inputs.display())))?;
        let model = read_checkpoint(path).map_err(|e| runtime(STAGE, format!("{}: {e}", path.display())))?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|d| format!("{}/", d.to_string_lossy()))
            .unwrap_or_default()
            + &path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        estimators.push((name, model, text));
    }
    let ids = eval_ids(STAGE, &kv, &manifest)?;
    let first = read_esg(&sample_path(&data.data, &ids[0])).map_err(|e| runtime(STAGE, e))?;
    let grid = first.spec.clone();
    let mut models = Vec::with_capacity(estimators.len());
    for (name, model, text) in estimators {
        let parsed = KeyValues::parse(&text).map_err(|e| runtime(STAGE, e))?;
        let input = InputConfig::from_kv(&grid, &parsed).map_err(|e| runtime(STAGE, e))?;
        input
            .validate(&grid, first.n_members())
            .map_err(|e| runtime(STAGE, e))?;
        models.push(ModelEstimator { name, model, input });
    }
    let target = (models[0].input.target_param, models[0].input.target_time);
    if models
        .iter()
        .any(|m| (m.input.target_param, m.input.target_time) != target)
    {
        return Err(usage(STAGE, "checkpoints predict different targets"));
    }
    let keep = models.iter().map(|m| members_needed(&m.input)).max().unwrap_or(1);
    let test = load_samples(STAGE, &data.data, ids, keep, &models[0].input)?;
    let linear = if kv.optional("linear").map_err(|e| usage(STAGE, e))?.unwrap_or(true) {
        let train_samples = load_samples(STAGE, &data.data, &manifest.train_ids, 1, &models[0].input)?;
        Some(fit_linear_on(&train_samples).map_err(|e| runtime(STAGE, e))?)
    } else {
        None
    };
    let cfg = eval_config(STAGE, &kv, out)?;
    create_dir(STAGE, out)?;
    let refs: Vec<&dyn SpreadEstimator> = models.iter().map(|m| m as &dyn SpreadEstimator).collect();
    let report = evaluate(&refs, linear.as_ref(), &test, &stats, &cfg).map_err(|e| runtime(STAGE, e))?;
    write_report(STAGE, out, &report)
}

fn linear_text(fit: &LinearBaseline) -> String {
    format!("a={}\nb={}\n", join(&fit.a), join(&fit.b))
}

fn cmd_baseline(data: &DataArgs, out: &Path, args: &ConfigArgs) -> Outcome<()> {
    const STAGE: &str = "baseline";
    let kv = load_config(STAGE, args, &[], &["target_param", "target_time", "split"])?;
    let manifest = read_manifest(STAGE, data)?;
    let ids = eval_ids(STAGE, &kv, &manifest)?;
    let first = read_esg(&sample_path(&data.data, &ids[0])).map_err(|e| runtime(STAGE, e))?;
    let input = InputConfig::from_kv(&first.spec, &subset(&kv, &["target_param", "target_time"]))
        .map_err(|e| usage(STAGE, e))?;
    input
        .validate(&first.spec, first.n_members())
        .map_err(|e| usage(STAGE, e))?;
    let train_samples = load_samples(STAGE, &data.data, &manifest.train_ids, 1, &input)?;
    let fit = fit_linear_on(&train_samples).map_err(|e| runtime(STAGE, e))?;
    let test = load_samples(STAGE, &data.data, ids, 1, &input)?;
    // Raw statistics are not needed: the baseline works in physical units.
    let n = (first.spec.n_params, first.spec.n_levels);
    let identity = StatsFile {
        field: spreadnet::grids::NormStats::identity(n.0, n.1),
        spread: vec![spreadnet::grids::NormStats::identity(n.0, n.1); first.spec.n_times()],
    };
    create_dir(STAGE, out)?;
    write_text(STAGE, &out.join("linear.txt"), &linear_text(&fit))?;
    let report = evaluate(&[], Some(&fit), &test, &identity, &EvalConfig::default()).map_err(|e| runtime(STAGE, e))?;
    write_report(STAGE, out, &report)
}

fn cmd_gradcheck(seed: u64) -> Outcome<()> {
    const STAGE: &str = "gradcheck";
    let checks = layer_grad_checks(seed).map_err(|e| runtime(STAGE, e))?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<16} max_rel_error {:.3e} {verdict}", c.layer, c.max_rel_error);
        if !c.passed() {
            failed.push(c.layer);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(STAGE, format!("gradient mismatch in {}", failed.join(", "))))
    }
}
