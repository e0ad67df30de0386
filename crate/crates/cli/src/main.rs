use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use invert_core::pipeline::{self, PipelineConfig};

#[derive(Parser)]
#[command(name = "invert", about = "Bayesian deconvolution and segmentation pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline once and write all artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured reconstruction method
        /// (closed_form | laplace | vba | mf_vba | unrolled).
        #[arg(long)]
        method: Option<String>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline for every seed in a half-open range.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Seed range `a..b` (b exclusive), e.g. `0..20`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an unrolled reconstruction net and save its weights.
    TrainUnrolled {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report { run_dir: PathBuf },
    /// Print a ready-to-edit default configuration to stdout.
    DefaultConfig,
}

fn parse_seed_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a range like 0..20, got {s:?}"))?;
    let from: u64 = a.trim().parse().map_err(|_| format!("bad range start {a:?}"))?;
    let to: u64 = b.trim().parse().map_err(|_| format!("bad range end {b:?}"))?;
    if to <= from {
        return Err(format!("empty seed range {s:?}"));
    }
    Ok((from, to))
}

fn print_metrics(m: &invert_core::pipeline::metrics::Metrics) {
    let fmt_psnr = |p: &invert_core::pipeline::metrics::Psnr| {
        if p.0.is_finite() {
            format!("{:.3} dB", p.0)
        } else {
            "inf".to_string()
        }
    };
    println!("  rmse:                     {:.6}", m.rmse);
    println!("  psnr (observation):       {}", fmt_psnr(&m.psnr_observed));
    println!("  psnr (reconstruction):    {}", fmt_psnr(&m.psnr_reconstructed));
    println!("  segmentation accuracy:    {:.4}", m.segmentation_accuracy);
    println!("  segmentation (observed):  {:.4}", m.segmentation_accuracy_observed);
    for (c, acc) in m.per_class_accuracy.iter().enumerate() {
        match acc {
            Some(a) => println!("  class {c} accuracy:         {a:.4}"),
            None => println!("  class {c} accuracy:         n/a (absent)"),
        }
    }
}

fn run(command: Command) -> Result<(), String> {
    match command {
        Command::Run { config, method, out } => {
            let mut cfg = PipelineConfig::from_path(&config).map_err(|e| e.to_string())?;
            if let Some(m) = method {
                cfg.method.name = m;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let report = pipeline::run_pipeline(&cfg, &out_dir).map_err(|e| e.to_string())?;
            println!("method: {}", report.method);
            println!("output: {}", out_dir.display());
            print_metrics(&report.metrics);
            for (stage, secs) in &report.timings {
                println!("  [time] {stage}: {secs:.3}s");
            }
            Ok(())
        }
        Command::Sweep { config, seeds, out } => {
            let cfg = PipelineConfig::from_path(&config).map_err(|e| e.to_string())?;
            let (from, to) = parse_seed_range(&seeds)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let results = pipeline::run_sweep(&cfg, from, to, &out_dir).map_err(|e| e.to_string())?;
            println!("swept {} seeds into {}", results.len(), out_dir.display());
            for (seed, m) in &results {
                println!(
                    "  seed {seed:4}: rmse {:.6}, seg accuracy {:.4}",
                    m.rmse, m.segmentation_accuracy
                );
            }
            Ok(())
        }
        Command::TrainUnrolled { config, out } => {
            let cfg = PipelineConfig::from_path(&config).map_err(|e| e.to_string())?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let trace = pipeline::train_unrolled(&cfg, &out_dir).map_err(|e| e.to_string())?;
            println!("trained {} epochs into {}", trace.len().saturating_sub(1), out_dir.display());
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!("  loss: {first:.6} -> {last:.6}");
            }
            Ok(())
        }
        Command::Report { run_dir } => {
            let (metrics, manifest) = pipeline::load_run(&run_dir).map_err(|e| e.to_string())?;
            println!("run: {}", run_dir.display());
            println!("method: {}", manifest.config.method.name);
            println!(
                "phantom: {:?} {}x{}, seed {}",
                manifest.config.phantom.kind,
                manifest.config.phantom.rows,
                manifest.config.phantom.cols,
                manifest.config.phantom.seed
            );
            println!(
                "degradation: psf {}x{} sigma {}, noise sigma {}, seed {}",
                manifest.config.degradation.psf_size,
                manifest.config.degradation.psf_size,
                manifest.config.degradation.psf_sigma,
                manifest.config.degradation.noise_sigma,
                manifest.config.degradation.seed
            );
            print_metrics(&metrics);
            Ok(())
        }
        Command::DefaultConfig => {
            let cfg = PipelineConfig::default_config();
            println!("{}", serde_json::to_string_pretty(&cfg).map_err(|e| e.to_string())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
