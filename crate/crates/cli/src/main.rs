mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use mtfatt::dataio::{self, Stem, StemSet, SynthSpec};
use mtfatt::metrics;
use mtfatt::model::{SeparationModel, StemEstimator, Variant};
use mtfatt::selftest::{run_selftest, SelftestOptions};
use mtfatt::training::{self, AugmentConfig, TrainConfig};

use config::{DataSource, RunConfig};

#[derive(Parser)]
#[command(name = "mtfatt", version, about = "Music source separation: train, separate, evaluate and self-test")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per requested stem.
    Train(Common),
    /// Split a WAV file into stems with trained checkpoints.
    Separate {
        #[command(flatten)]
        common: Common,
        /// Mixture to separate.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score trained models on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Split name; defaults to `run.eval_split`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Run the fast invariant suite.
    Selftest {
        /// Doubles the attention softmax scale so the oracle group must fail.
        #[arg(long)]
        corrupt_softmax_scale: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// vocals, bass, drums, other, all, or `synthetic-<stem>`.
    #[arg(long)]
    stem: Option<String>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sets both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status 2: bad flags, config or dataset location.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_stems(spec: &str) -> anyhow::Result<(Option<DataSource>, Vec<Stem>)> {
    let (source, name) = match spec.strip_prefix("synthetic") {
        Some("") => (Some(DataSource::Synthetic), "all"),
        Some(rest) => match rest.strip_prefix('-') {
            Some(name) => (Some(DataSource::Synthetic), name),
            None => return Err(usage(format!("unknown stem `{spec}`"))),
        },
        None => (None, spec),
    };
    let stems = if name == "all" {
        Stem::ALL.to_vec()
    } else {
        vec![name.parse::<Stem>().map_err(|e| usage(e.to_string()))?]
    };
    Ok((source, stems))
}

fn resolve_threads(flag: Option<usize>, file: usize) -> anyhow::Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("MTFATT_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("MTFATT_THREADS: not a thread count: `{v}`"))),
        Err(_) => Ok(file),
    }
}

fn init_threads(n: usize) {
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(spec) = &common.stem {
        let (source, stems) = parse_stems(spec)?;
        if let Some(s) = source {
            cfg.source = s;
        }
        cfg.stems = stems;
    }
    if let Some(v) = common.variant {
        cfg.model.variant = v;
    }
    if let Some(e) = common.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.threads = resolve_threads(common.threads, cfg.threads)?;
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.stems.is_empty() {
        return Err(usage("no stems requested"));
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

/// Writes the effective configuration next to the command's outputs.
fn echo_config(cfg: &RunConfig) -> anyhow::Result<()> {
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("run.cfg");
    fs::write(&path, cfg.to_text()).with_context(|| format!("cannot write {}", path.display()))
}

fn checkpoint_path(cfg: &RunConfig, stem: Stem) -> PathBuf {
    cfg.checkpoint_dir.join(format!("{}-{}.ckpt", cfg.model.variant, stem))
}

fn load_songs(cfg: &RunConfig, split: &str) -> anyhow::Result<Vec<StemSet>> {
    match cfg.source {
        DataSource::Synthetic => {
            let (train, val) = (cfg.synth_train, cfg.synth_val);
            if train + val > cfg.synth_songs {
                return Err(usage("data.synth_train + data.synth_val exceeds data.synth_songs"));
            }
            let range = match split {
                "train" => 0..train,
                "val" => train..train + val,
                "test" => train + val..cfg.synth_songs,
                _ => return Err(usage(format!("unknown synthetic split `{split}` (train, val or test)"))),
            };
            let spec = SynthSpec::disjoint(cfg.model.sample_rate);
            let mut songs = dataio::synth_dataset(&spec, cfg.synth_songs, cfg.synth_duration, cfg.synth_seed)?;
            Ok(songs.drain(range).collect())
        }
        DataSource::Directory => {
            if !cfg.dataset_root.is_dir() {
                return Err(usage(format!("dataset not found: {}", cfg.dataset_root.display())));
            }
            let manifest = cfg.manifest_path();
            if !manifest.is_file() {
                return Err(usage(format!("split manifest not found: {}", manifest.display())));
            }
            let entries = dataio::read_manifest(&manifest, &cfg.dataset_root)?;
            Ok(dataio::load_split(&entries, split, cfg.model.sample_rate)?)
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let train_songs = load_songs(cfg, "train")?;
    let val_songs = load_songs(cfg, "val")?;
    create_dir(&cfg.checkpoint_dir)?;
    for &stem in &cfg.stems {
        let ckpt = checkpoint_path(cfg, stem);
        let tc = TrainConfig {
            target: stem,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            alpha: cfg.alpha,
            augment: AugmentConfig {
                swap_prob: cfg.swap_prob,
                remix_prob: cfg.remix_prob,
            },
            seed: cfg.seed,
            shift_frames: cfg.shift_frames,
            max_batches_per_epoch: cfg.max_batches_per_epoch,
            checkpoint: Some(ckpt.clone()),
        };
        let mut model = SeparationModel::<f32>::build(cfg.model.clone())?;
        log::info!("training {} {} ({} parameters)", cfg.model.variant, stem, model.num_parameters());
        let report = training::train(&mut model, &train_songs, &val_songs, &tc)?;
        let path = cfg.output_dir.join(format!("train-{}-{}.txt", cfg.model.variant, stem));
        fs::write(&path, report.to_text()).with_context(|| format!("cannot write {}", path.display()))?;
        println!(
            "{stem}: initial val {:.6e}, final val {:.6e}, checkpoint {}",
            report.initial_val.total,
            report.final_val_loss(),
            ckpt.display()
        );
    }
    Ok(())
}

/// Checkpoints for the requested stems that exist on disk.
fn load_models(cfg: &RunConfig, require_all: bool) -> anyhow::Result<Vec<(Stem, SeparationModel<f32>)>> {
    let mut models = Vec::new();
    for &stem in &cfg.stems {
        let path = checkpoint_path(cfg, stem);
        if !path.is_file() {
            if require_all {
                return Err(anyhow!("no checkpoint for stem `{stem}` at {}", path.display()));
            }
            continue;
        }
        let model = dataio::load_checkpoint(&path, &cfg.model).with_context(|| format!("loading {}", path.display()))?;
        models.push((stem, model));
    }
    if models.is_empty() {
        return Err(anyhow!("no checkpoints found in {}", cfg.checkpoint_dir.display()));
    }
    Ok(models)
}

fn cmd_separate(cfg: &RunConfig, input: &Path) -> anyhow::Result<()> {
    let models = load_models(cfg, false)?;
    let (audio, rate) = dataio::read_wav(input)?;
    if rate != cfg.model.sample_rate {
        return Err(usage(format!(
            "{} is sampled at {rate} Hz but the model expects {} Hz",
            input.display(),
            cfg.model.sample_rate
        )));
    }
    for (stem, model) in &models {
        let estimate = model.estimate(&audio)?;
        let path = cfg.output_dir.join(format!("{stem}.wav"));
        dataio::write_wav(&path, &estimate, rate)?;
        println!("{stem}: {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, split: &str) -> anyhow::Result<()> {
    let models = load_models(cfg, true)?;
    let songs = load_songs(cfg, split)?;
    let refs: Vec<(Stem, &dyn StemEstimator)> = models.iter().map(|(s, m)| (*s, m as &dyn StemEstimator)).collect();
    let label = format!("{} on {split}", cfg.model.variant);
    let report = metrics::evaluate(&refs, &songs, &cfg.stems, &label)?;
    let base = cfg.output_dir.join(format!("eval-{}-{split}", cfg.model.variant));
    let table = report.to_table();
    fs::write(base.with_extension("txt"), &table).context("cannot write report")?;
    fs::write(base.with_extension("tsv"), report.to_records()).context("cannot write records")?;
    print!("{table}");
    Ok(())
}

fn cmd_selftest(opts: SelftestOptions) -> anyhow::Result<bool> {
    let results = run_selftest(opts);
    for r in &results {
        println!(
            "{} {} ({:.1} s): {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed.as_secs_f64(),
            r.detail
        );
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Selftest {
            corrupt_softmax_scale,
            threads,
        } => {
            init_threads(resolve_threads(threads, 0)?);
            cmd_selftest(SelftestOptions { corrupt_softmax_scale })
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            init_threads(cfg.threads);
            echo_config(&cfg)?;
            cmd_train(&cfg).map(|_| true)
        }
        Command::Separate { common, input } => {
            let cfg = load_config(&common)?;
            init_threads(cfg.threads);
            echo_config(&cfg)?;
            cmd_separate(&cfg, &input).map(|_| true)
        }
        Command::Evaluate { common, split } => {
            let cfg = load_config(&common)?;
            init_threads(cfg.threads);
            echo_config(&cfg)?;
            let split = split.unwrap_or_else(|| cfg.eval_split.clone());
            cmd_evaluate(&cfg, &split).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<mtfatt::Error>(), Some(mtfatt::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
