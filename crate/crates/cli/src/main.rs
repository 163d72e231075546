use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pola::datasets::{load_power, load_sunspot, write_series_csv, DatasetKind, DatasetSpec};
use pola::driver::MethodKind;
use pola::experiment::{emit_plot_data, execute, plan, ExperimentConfig, Manifest, PlotOptions, SummaryRow};
use pola::windowing::count_samples;

#[derive(Parser)]
#[command(name = "pola", version, about = "Online recurrent forecasting with meta-learned learning rates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune, run and summarize an experiment grid.
    Run {
        #[command(flatten)]
        grid: GridArgs,
        /// Re-execute a manifest instead of a config (no tuning).
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        /// Results directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Tune γ and q and write the resolved manifest.
    Tune {
        #[command(flatten)]
        grid: GridArgs,
        /// Where to write the manifest (printed to stdout when omitted).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write figure CSVs for a results directory.
    Plotdata {
        results: PathBuf,
        /// Error smoothing window in steps.
        #[arg(long, default_value_t = 24)]
        smoothing: usize,
        /// Forecast step shown in the prediction files (default: last).
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Load a data file and report what the loader sees.
    ValidateData {
        #[arg(long)]
        dataset: DatasetKind,
        path: PathBuf,
        /// Require the canonical length.
        #[arg(long)]
        strict: bool,
        /// Also write the standardized series as CSV.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GridArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Data file, overriding the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fixed maximum learning rate for every method (skips its tuning).
    #[arg(long)]
    gamma: Option<f64>,
    /// Online batch size.
    #[arg(long)]
    b: Option<usize>,
    /// Fixed moving-average window for POLA methods.
    #[arg(long)]
    q: Option<usize>,
    /// Meta steps for POLA-GD.
    #[arg(long)]
    k: Option<usize>,
    /// Meta step size for POLA-GD.
    #[arg(long)]
    eta: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<MethodKind>>,
    #[arg(long)]
    workers: Option<usize>,
}

impl GridArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(p) = &self.data {
            cfg.dataset.path = Some(p.clone());
        }
        if let Some(kinds) = &self.methods {
            cfg.methods.retain(|m| kinds.contains(&m.kind));
            for &k in kinds {
                if !cfg.methods.iter().any(|m| m.kind == k) {
                    cfg.methods.push(pola::experiment::MethodEntry::new(k));
                }
            }
        }
        for m in &mut cfg.methods {
            if self.gamma.is_some() {
                m.gamma = self.gamma;
            }
            if m.kind.is_pola() && self.q.is_some() {
                m.q = self.q;
            }
            if m.kind == MethodKind::PolaGd {
                m.k = self.k.or(m.k);
                m.eta = self.eta.or(m.eta);
            }
        }
        if let Some(b) = self.b {
            cfg.b = b;
            cfg.sweep.b.clear();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<40} {:>8} {:>3} {:>10} {:>10}", "group", "gamma", "q", "mean", "std");
    for r in rows {
        println!("{:<40} {:>8} {:>3} {:>10.4} {:>10.4}", r.label, r.gamma, r.q, r.mean, r.std);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { grid, manifest, out } => {
            let manifest = match manifest {
                Some(p) => Manifest::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => plan(&grid.config()?)?,
            };
            let res = execute(&manifest, &out)?;
            print_summary(&res.summary);
            println!("results written to {}", out.display());
        }
        Command::Tune { grid, out } => {
            let manifest = plan(&grid.config()?)?;
            for g in &manifest.groups {
                println!("{:<40} gamma={} q={}", g.label, g.method.gamma, g.method.q);
            }
            let json = manifest.to_json()?;
            match out {
                Some(p) => std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
        }
        Command::Plotdata { results, smoothing, horizon } => {
            let files = emit_plot_data(&results, &PlotOptions { smoothing, horizon })?;
            println!("wrote {} files under {}", files.len(), results.join("plots").display());
        }
        Command::ValidateData { dataset, path, strict, dump } => {
            let ds = match dataset {
                DatasetKind::Sunspot => load_sunspot(&path, strict)?,
                DatasetKind::Power => load_power(&path)?,
                DatasetKind::Synthetic => bail!("synthetic data is generated, not loaded"),
            };
            let spec = DatasetSpec::for_kind(dataset);
            let s = &ds.series;
            println!("observations: {}", s.len());
            println!("dimensions:   {}", s.dim());
            println!(
                "range:        {} .. {}",
                ds.labels.first().map(String::as_str).unwrap_or("-"),
                ds.labels.last().map(String::as_str).unwrap_or("-")
            );
            println!("mean:         {:?}", s.mean().to_vec());
            println!("std:          {:?}", s.std().to_vec());
            println!(
                "samples:      {} (window {}, horizon {})",
                count_samples(s.len(), spec.window_len, spec.horizon),
                spec.window_len,
                spec.horizon
            );
            if let Some(p) = dump {
                write_series_csv(&ds, &p, true)?;
                println!("standardized series written to {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pola: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
