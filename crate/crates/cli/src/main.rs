use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use xct_core::analysis;
use xct_core::checkpoint;
use xct_core::config::{RunConfig, TaskName};
use xct_core::profiler::{self, SweepAxis};
use xct_core::synthgen::{self, SynthSpec};
use xct_core::tasks::{self, MetricReport};
use xct_core::trainer::{self, Dataset};
use xct_core::Tensor;

#[derive(Parser)]
#[command(name = "xct", version, about = "Cross-channel, cross-time transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset and evaluate on its test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Re-evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the dataset path stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Generate the synthetic lagged-dependency dataset.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        n_points: usize,
        #[arg(long, default_value_t = 2021)]
        seed: u64,
        /// Observation noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Patch-level heatmap and histograms of a learned mask.
    MaskReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Also histogram activated weights on the first test window.
        #[arg(long)]
        weights: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Parameter and FLOP growth of untrained models.
    Profile {
        /// Base configuration; the reference scaling configuration otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "n_features")]
        axis: String,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        /// Profile the compressed attention variant.
        #[arg(long)]
        decop: bool,
        /// Channel count assumed with --config when sweeping seq_len.
        #[arg(long, default_value_t = 7)]
        channels: usize,
        #[arg(long, default_value_t = profiler::DEFAULT_MASK_CAP)]
        mask_cap: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Train once per value of k or patch_len.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `k` or `patch_len`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Forecast horizons (or mask rates for imputation) to average over.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        mask_rates: Vec<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Robustness of one test metric across seeds.
    SeedSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [2021u64, 2022, 2023, 2024, 2025])]
        seeds: Vec<u64>,
        #[arg(long, default_value = "mse")]
        metric: String,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Args)]
struct Out {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Out {
    fn dir(&self) -> anyhow::Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

/// Load a config, resolving a relative data path against the config's directory.
fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let mut run = RunConfig::from_path(path)?;
    let data = Path::new(&run.data_path);
    if data.is_relative() {
        let base = path.parent().unwrap_or(Path::new("."));
        run.data_path = base.join(data).to_string_lossy().into_owned();
    }
    Ok(run)
}

fn metric<'a>(reports: &'a [MetricReport], name: &str) -> Option<&'a MetricReport> {
    reports.iter().find(|m| m.name == name)
}

fn write_evaluation(dir: &Path, eval: &trainer::Evaluation) -> anyhow::Result<()> {
    tasks::write_metrics_csv(&dir.join("metrics.csv"), &eval.metrics)?;
    if let Some(labels) = &eval.labels {
        tasks::write_labels_csv(&dir.join("labels.csv"), labels)?;
    }
    Ok(())
}

fn cmd_train(config: &Path, out: &Out) -> anyhow::Result<()> {
    let run = load_config(config)?;
    let dir = out.dir()?;
    let data = Dataset::load(&run)?;
    let outcome = trainer::train(&run, &data)?;
    log::info!(
        "trained {} on {} channels, best epoch {}",
        outcome.model.config.mode,
        outcome.model.config.channels,
        outcome.fit.best_epoch
    );
    trainer::write_history_csv(&dir.join("history.csv"), &outcome.fit.history)?;
    checkpoint::save(&dir.join("checkpoint"), &run, &outcome.model)?;
    if let Some(eval) = &outcome.evaluation {
        write_evaluation(dir, eval)?;
        for m in &eval.metrics {
            println!("{}={}", m.name, m.value);
        }
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: Option<&Path>, out: &Out) -> anyhow::Result<()> {
    let (mut run, model) = checkpoint::load(ckpt)?;
    if let Some(d) = data {
        run.data_path = d.to_string_lossy().into_owned();
    }
    let dir = out.dir()?;
    let prepared = trainer::prepare(&run, &Dataset::load(&run)?)?;
    let eval = trainer::evaluate(&model, &run, &prepared)?;
    write_evaluation(dir, &eval)?;
    for m in &eval.metrics {
        println!("{}={}", m.name, m.value);
    }
    Ok(())
}

fn cmd_synth(n_points: usize, seed: u64, noise: Option<f64>, out: &Out) -> anyhow::Result<()> {
    let mut spec = SynthSpec {
        n_points,
        seed,
        ..SynthSpec::default()
    };
    if let Some(n) = noise {
        spec.noise_std = n;
    }
    spec.validate()?;
    let dir = out.dir()?;
    let data = synthgen::generate(&spec)?;
    let path = dir.join("synth.csv");
    synthgen::write_csv(&path, &data, &spec)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_mask_report(ckpt: &Path, layer: usize, head: usize, weights: bool, out: &Out) -> anyhow::Result<()> {
    let (run, model) = checkpoint::load(ckpt)?;
    let input = if weights {
        let prepared = trainer::prepare(&run, &Dataset::load(&run)?)?;
        let test = prepared.test.as_ref().context("no test split for the weight histogram")?;
        let (l, c) = (run.seq_len, test.channels());
        if test.rows() < l {
            bail!("test split shorter than seq_len");
        }
        Some(Tensor::new(vec![1, l, c], test.values()[..l * c].to_vec())?)
    } else {
        None
    };
    let report = analysis::mask_report(&model, layer, head, input.as_ref())?;
    report.write(out.dir()?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile(
    config: Option<&Path>,
    axis: &str,
    values: &[usize],
    decop: bool,
    channels: usize,
    mask_cap: usize,
    out: &Out,
) -> anyhow::Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let mode = if decop {
        xct_core::attention::AttentionMode::CrabDecop
    } else {
        xct_core::attention::AttentionMode::Crab
    };
    let base = match config {
        Some(p) => {
            let mut c = RunConfig::from_path(p)?.model_config(channels);
            c.mode = mode;
            c
        }
        None => profiler::scaling_config(mode),
    };
    let values: Vec<usize> = if !values.is_empty() {
        values.to_vec()
    } else {
        match (axis, decop) {
            (SweepAxis::Features, false) => (1..=10).map(|i| 20 * i).collect(),
            (SweepAxis::Features, true) => (1..=10).map(|i| 80 * i).collect(),
            (SweepAxis::SeqLen, _) => (1..=10).map(|i| 96 * i).collect(),
        }
    };
    let report = profiler::profile(&base, axis, &values, mask_cap)?;
    let dir = out.dir()?;
    report.write_csv(&dir.join("profile.csv"))?;
    report.write_fit_csv(&dir.join("profile_fit.csv"))?;
    println!("param_exponent={}", report.param_exponent);
    println!("score_flop_exponent={}", report.score_exponent);
    Ok(())
}

/// Test mse and mae averaged over the repeat settings of one sweep point.
fn sweep_point(run: &RunConfig, data: &Dataset, horizons: &[usize], mask_rates: &[f64]) -> anyhow::Result<(f64, f64)> {
    let mut variants = Vec::new();
    match run.task {
        TaskName::Forecast if !horizons.is_empty() => {
            variants.extend(horizons.iter().map(|&h| RunConfig {
                pred_len: h,
                ..run.clone()
            }));
        }
        TaskName::Impute if !mask_rates.is_empty() => {
            variants.extend(mask_rates.iter().map(|&r| RunConfig {
                mask_rate: r,
                ..run.clone()
            }));
        }
        _ => variants.push(run.clone()),
    }
    let (mut mse, mut mae) = (0.0, 0.0);
    for v in &variants {
        let outcome = trainer::train(v, data)?;
        let eval = outcome.evaluation.context("no test split")?;
        mse += metric(&eval.metrics, "mse").context("no mse")?.value;
        mae += metric(&eval.metrics, "mae").context("no mae")?.value;
    }
    let n = variants.len() as f64;
    Ok((mse / n, mae / n))
}

fn cmd_sweep(config: &Path, axis: &str, values: &[usize], horizons: &[usize], mask_rates: &[f64], out: &Out) -> anyhow::Result<()> {
    let base = load_config(config)?;
    let data = Dataset::load(&base)?;
    let runs: Vec<RunConfig> = match axis {
        "k" => {
            if !base.resolved_mode(data.frame.channels()).is_decop() {
                return Err(xct_core::Error::Config(vec![
                    "k sweep requires compressed attention (set decop = \"on\")".into(),
                ])
                .into());
            }
            values.iter().map(|&k| RunConfig { k, ..base.clone() }).collect()
        }
        "patch_len" => values
            .iter()
            .map(|&p| RunConfig {
                patch_len: p,
                stride: (p / 2).max(1),
                ..base.clone()
            })
            .collect(),
        _ => bail!("unknown sweep axis {axis:?} (k, patch_len)"),
    };
    let results: Vec<anyhow::Result<(f64, f64)>> =
        runs.par_iter().map(|r| sweep_point(r, &data, horizons, mask_rates)).collect();
    let mut text = format!("{axis},mse,mae\n");
    for (v, r) in values.iter().zip(results) {
        let (mse, mae) = r?;
        text.push_str(&format!("{v},{mse},{mae}\n"));
    }
    let path = out.dir()?.join("sweep.csv");
    std::fs::write(&path, text).with_context(|| path.display().to_string())?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_seed_sweep(config: &Path, seeds: &[u64], metric_name: &str, out: &Out) -> anyhow::Result<()> {
    let base = load_config(config)?;
    let data = Dataset::load(&base)?;
    let result = trainer::seed_sweep(&base, &data, seeds, metric_name)?;
    result.write_csv(&out.dir()?.join("seed_sweep.csv"))?;
    if result.is_partial() {
        eprintln!("warning: {} of {} seeds failed", result.failures.len(), seeds.len());
    }
    println!("mean={} std={} cv={} confidence={}", result.mean, result.std, result.cv, result.confidence);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval { checkpoint, data, out } => cmd_eval(checkpoint, data.as_deref(), out),
        Command::Synth {
            n_points,
            seed,
            noise,
            out,
        } => cmd_synth(*n_points, *seed, *noise, out),
        Command::MaskReport {
            checkpoint,
            layer,
            head,
            weights,
            out,
        } => cmd_mask_report(checkpoint, *layer, *head, *weights, out),
        Command::Profile {
            config,
            axis,
            values,
            decop,
            channels,
            mask_cap,
            out,
        } => cmd_profile(config.as_deref(), axis, values, *decop, *channels, *mask_cap, out),
        Command::Sweep {
            config,
            axis,
            values,
            horizons,
            mask_rates,
            out,
        } => cmd_sweep(config, axis, values, horizons, mask_rates, out),
        Command::SeedSweep {
            config,
            seeds,
            metric,
            out,
        } => cmd_seed_sweep(config, seeds, metric, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<xct_core::Error>().map_or("runtime", xct_core::Error::kind);
            let msg = format!("{e:#}").replace('\n', " | ");
            eprintln!("error kind={kind} message={msg}");
            ExitCode::from(1)
        }
    }
}
