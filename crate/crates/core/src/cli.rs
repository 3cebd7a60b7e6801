//! Command-line front end. Exit codes: 0 success, 1 I/O or other runtime
//! failure, 2 configuration or usage error, 3 training divergence,
//! 4 noise-rate estimation unavailable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{Manifest, Provenance};
use crate::error::{Error, Result};
use crate::histogram::{read_hist_csv, CosHistogram, StatsParams, DEFAULT_ZETA};
use crate::model::Checkpoint;
use crate::trainer::{run_experiment, split_dataset, target_cosines, RunSummary, TrainMode};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_NO_ESTIMATE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "noisetol", version, about = "Noise-tolerant training of angular-margin classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as CSV plus manifest.
    Generate(Common),
    /// Train one run and write its run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// normal, clean-oracle, paradigm-m1 or paradigm-m2.
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Print the noise-rate estimate of a run directory or histogram CSV.
    Estimate {
        path: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ZETA)]
        zeta: f64,
    },
    /// Recompute training-set cosine histograms (all, clean, noisy) from a
    /// run's checkpoint.
    ExportHist {
        #[command(flatten)]
        common: Common,
        /// Run directory holding `checkpoint.json`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Train every mode at every noise rate and seed; writes `grid.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = TrainMode::ALL)]
        modes: Vec<TrainMode>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6])]
        rates: Vec<f64>,
        /// Seeds to average over; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::EstimationUnavailable => EXIT_NO_ESTIMATE,
        _ => EXIT_RUNTIME,
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => cmd_generate(&common).map(|_| ()),
        Command::Train { common, mode } => cmd_train(&common, mode).map(|_| ()),
        Command::Estimate { path, zeta } => {
            let est = cmd_estimate(&path, zeta)?;
            println!("{}", serde_json::to_string(&est)?);
            Ok(())
        }
        Command::ExportHist { common, run } => cmd_export_hist(&common, &run).map(|_| ()),
        Command::Sweep {
            common,
            modes,
            rates,
            seeds,
        } => cmd_sweep(&common, &modes, &rates, &seeds).map(|_| ()),
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Writes `dataset.csv` and `manifest.json` into the output directory.
pub fn cmd_generate(common: &Common) -> Result<PathBuf> {
    let (cfg, out) = load(common)?;
    let synth = cfg
        .synth_config()
        .ok_or_else(|| Error::Config("generate needs a [data.synthetic] section".into()))?;
    let ds = cfg.dataset()?;
    create_dir(&out)?;
    let csv = out.join("dataset.csv");
    ds.save_csv(&csv)?;
    Manifest::from_config(&synth).save(&out.join("manifest.json"))?;
    println!("wrote {} samples to {}", ds.len(), csv.display());
    Ok(csv)
}

pub fn cmd_train(common: &Common, mode: Option<TrainMode>) -> Result<RunSummary> {
    let (mut cfg, out) = load(common)?;
    if let Some(m) = mode {
        cfg.paradigm.mode = m;
    }
    let tc = cfg.train_config()?;
    let ds = cfg.dataset()?;
    create_dir(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(format!("writing config into {}", out.display()), e))?;
    let summary = run_experiment(&ds, &tc, Some(&out))?.summary;
    println!(
        "{} seed={} accuracy={:.4} auc={} noise_estimate={}",
        summary.mode,
        summary.seed,
        summary.verification_accuracy,
        fmt_opt(summary.clean_noisy_auc),
        fmt_opt(summary.final_noise_estimate),
    );
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateOutput {
    pub noise_rate_estimate: f64,
    pub mu_l: Option<f64>,
    pub mu_r: Option<f64>,
    pub count: usize,
}

/// A directory is read through its `hist_final.csv`; any other path is taken
/// as a histogram CSV. Values are placed at bin centers.
pub fn cmd_estimate(path: &Path, zeta: f64) -> Result<EstimateOutput> {
    let csv = if path.is_dir() { path.join("hist_final.csv") } else { path.to_path_buf() };
    let hist = CosHistogram::from_frequencies(&read_hist_csv(&csv)?)?;
    let params = StatsParams {
        zeta,
        ..StatsParams::default()
    };
    if hist.bins().iter().all(|&b| b == 0) {
        return Err(Error::EstimationUnavailable);
    }
    let st = hist.stats_with(&params)?;
    Ok(EstimateOutput {
        noise_rate_estimate: hist.estimate_noise_rate(&st)?,
        mu_l: st.mu_l,
        mu_r: st.mu_r,
        count: hist.count(),
    })
}

/// Writes `hist_all`, and with provenance `hist_clean` / `hist_noisy`, for
/// the training split of the run.
pub fn cmd_export_hist(common: &Common, run: &Path) -> Result<Vec<PathBuf>> {
    let (cfg, out) = load(common)?;
    let tc = cfg.train_config()?;
    let ckpt = Checkpoint::load(&run.join("checkpoint.json"))?;
    let ds = cfg.dataset()?;
    let (train, _) = split_dataset(&ds, &tc)?;
    let cos = target_cosines(&ckpt.model, &train)?;
    let params = StatsParams {
        zeta: tc.policy.zeta,
        ..StatsParams::default()
    };
    create_dir(&out)?;
    let mut written = Vec::new();
    let mut export = |stem: &str, keep: &dyn Fn(Provenance) -> bool| -> Result<()> {
        let vals: Vec<f64> = cos
            .iter()
            .zip(&train.samples)
            .filter(|(_, s)| keep(s.provenance))
            .map(|(c, _)| *c)
            .collect();
        if vals.is_empty() {
            return Ok(());
        }
        let mut h = CosHistogram::new(vals.len())?;
        for v in vals {
            h.push(v)?;
        }
        written.push(h.export(&out, stem, &params)?);
        Ok(())
    };
    export("hist_all", &|_| true)?;
    export("hist_clean", &|p| p.is_clean())?;
    export("hist_noisy", &|p| !p.is_clean())?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub mode: TrainMode,
    pub noise_rate: f64,
    pub seed: u64,
    pub verification_accuracy: f64,
    pub clean_noisy_auc: Option<f64>,
    pub noise_estimate: Option<f64>,
}

pub fn cmd_sweep(common: &Common, modes: &[TrainMode], rates: &[f64], seeds: &[u64]) -> Result<Vec<GridRow>> {
    let (base, out) = load(common)?;
    if base.synth_config().is_none() {
        return Err(Error::Config("sweep needs a [data.synthetic] section".into()));
    }
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    create_dir(&out)?;
    let mut rows = Vec::new();
    for &rate in rates {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            if let crate::config::DataSection::Synthetic(s) = &mut cfg.data {
                s.noise_rate = rate;
            }
            cfg.validate()?;
            let ds = cfg.dataset()?;
            for &mode in modes {
                cfg.paradigm.mode = mode;
                let dir = out.join(format!("{mode}_rho{rate}_seed{seed}"));
                let s = run_experiment(&ds, &cfg.train_config()?, Some(&dir))?.summary;
                println!(
                    "{mode} rho={rate} seed={seed} accuracy={:.4} auc={} noise_estimate={}",
                    s.verification_accuracy,
                    fmt_opt(s.clean_noisy_auc),
                    fmt_opt(s.final_noise_estimate)
                );
                rows.push(GridRow {
                    mode,
                    noise_rate: rate,
                    seed,
                    verification_accuracy: s.verification_accuracy,
                    clean_noisy_auc: s.clean_noisy_auc,
                    noise_estimate: s.final_noise_estimate,
                });
            }
        }
    }
    let grid = out.join("grid.csv");
    let io_err = |e: csv::Error| Error::io(format!("writing {}", grid.display()), std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&grid).map_err(io_err)?;
    for r in &rows {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", grid.display()), e))?;
    Ok(rows)
}
