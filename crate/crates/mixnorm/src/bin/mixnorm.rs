//! CLI for the test-time normalization harness: source training, online
//! adaptation runs, protocol sweeps, report rendering, and hyperparameter
//! tuning. Exit codes: 0 success, 2 usage error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mixnorm::bench::{build_stream, generate_source_dataset, StreamMode};
use mixnorm::error::{Error, Result};
use mixnorm::format;
use mixnorm::harness::{
    render_rows, report, rows_from_csv, run_adaptation, sweep, tune, tune_report, Method,
    MethodKind, ProtocolConfig, ReportFormat,
};
use mixnorm::harness::DEFAULT_EVAL_PER_CLASS;
use mixnorm::model::{reference_backbone, train_source, OptimizerConfig, TrainConfig};

/// Test-time normalization benchmark harness.
#[derive(Parser)]
#[command(name = "mixnorm", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference backbone on the procedural source dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one adaptation method over one evaluation stream.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: String,
        /// single:<kind>:<sev>, mixed:<sev>, or clean
        #[arg(long)]
        stream: String,
        #[arg(long, value_name = "n")]
        batch_size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross product of methods x batch sizes x streams x seeds.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_name = "comma-list")]
        methods: String,
        #[arg(long, value_name = "comma-list")]
        batch_sizes: String,
        #[arg(long, value_name = "comma-list")]
        streams: String,
        #[arg(long, value_name = "comma-list")]
        seeds: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render results files from a sweep/adapt output directory.
    Report {
        #[arg(long, value_name = "dir")]
        r#in: PathBuf,
        /// csv, table, or svg
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search m and tau on the reserved gaussian_noise severity-5 split.
    Tune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let items: std::result::Result<Vec<T>, _> =
        s.split(',').filter(|t| !t.is_empty()).map(str::parse).collect();
    items.map_err(|_| Error::usage(format!("bad {what} list `{s}`")))
}

/// The evaluation dataset is pinned (class-balanced, disjoint seed from any
/// training dataset); per-run variation enters through the stream seed.
const EVAL_DATASET_SEED: u64 = 2001;

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = format::load_config(&config)?;
            let train: Vec<_> = generate_source_dataset(seed, cfg.n_per_class)?
                .into_iter()
                .map(|img| (img.pixels, img.label))
                .collect();
            let val: Vec<_> = generate_source_dataset(seed ^ 0x5641_4c53_4554, cfg.val_per_class)?
                .into_iter()
                .map(|img| (img.pixels, img.label))
                .collect();
            let optimizer = match cfg.optimizer.as_str() {
                "sgd" => OptimizerConfig::sgd(cfg.learning_rate),
                _ => OptimizerConfig::adam(cfg.learning_rate),
            };
            let tc = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                optimizer,
                bn_momentum: 0.1,
            };
            let net =
                train_source(reference_backbone(10), [3, 16, 16], 10, &train, &val, &tc, seed)?;
            format::save_model(&net, &out)?;
            if let Some(e) = net.clean_val_error {
                println!("trained; clean validation error {e:.4}");
            } else {
                println!("trained; no validation split");
            }
            Ok(())
        }
        Command::Adapt { model, method, stream, batch_size, seed, out } => {
            let net = format::load_model(&model)?;
            let mode = StreamMode::parse(&stream)?;
            let kind = MethodKind::parse(&method)?;
            let dataset = generate_source_dataset(EVAL_DATASET_SEED, DEFAULT_EVAL_PER_CLASS)?;
            let s = build_stream(&dataset, mode, seed)?;
            let result = run_adaptation(&net, &Method::defaults(kind, mode), &s, batch_size, seed)?;
            std::fs::write(&out, report(&[result.clone()], ReportFormat::Csv)?)?;
            println!(
                "{} on {} (batch {batch_size}): error {:.4} over {} samples",
                result.method, result.stream, result.error_rate, result.n_samples
            );
            Ok(())
        }
        Command::Sweep { model, methods, batch_sizes, streams, seeds, out_dir } => {
            let net = format::load_model(&model)?;
            let method_kinds: Vec<MethodKind> = methods
                .split(',')
                .filter(|t| !t.is_empty())
                .map(MethodKind::parse)
                .collect::<Result<_>>()?;
            let stream_modes: Vec<StreamMode> = streams
                .split(',')
                .filter(|t| !t.is_empty())
                .map(StreamMode::parse)
                .collect::<Result<_>>()?;
            let protocol = ProtocolConfig {
                batch_sizes: parse_list(&batch_sizes, "batch size")?,
                stream_modes,
                seeds: parse_list(&seeds, "seed")?,
            };
            let dataset = generate_source_dataset(EVAL_DATASET_SEED, DEFAULT_EVAL_PER_CLASS)?;
            let results = sweep(&net, &method_kinds, &dataset, &protocol)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("results.csv"), report(&results, ReportFormat::Csv)?)?;
            println!("{} runs written to {}", results.len(), out_dir.join("results.csv").display());
            Ok(())
        }
        Command::Report { r#in, format: fmt, out } => {
            let fmt = ReportFormat::parse(&fmt)?;
            let mut rows = Vec::new();
            let mut files: Vec<PathBuf> = std::fs::read_dir(&r#in)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::usage(format!(
                    "no .csv result files in {}",
                    r#in.display()
                )));
            }
            for f in files {
                rows.extend(rows_from_csv(&std::fs::read_to_string(&f)?)?);
            }
            std::fs::write(&out, render_rows(&rows, fmt)?)?;
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Tune { model, method, out } => {
            let net = format::load_model(&model)?;
            let kind = MethodKind::parse(&method)?;
            let dataset = generate_source_dataset(EVAL_DATASET_SEED, DEFAULT_EVAL_PER_CLASS)?;
            let result = tune(&net, kind, &dataset, 0)?;
            std::fs::write(&out, tune_report(&result))?;
            println!(
                "best m={} tau={} error={:.4}",
                result.best_m, result.best_tau, result.best_error
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
