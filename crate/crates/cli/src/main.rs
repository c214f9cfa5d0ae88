use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedvuln_core::experiment::{self, ExperimentConfig, Prepared};
use fedvuln_core::synth::{self, SynthConfig};
use fedvuln_core::Error;

/// Federated learning experiments for code vulnerability detection.
#[derive(Debug, Parser)]
#[command(name = "fedvuln", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, clean, split and partition the configured dataset.
    Prepare(ConfigArgs),
    /// Run federated training on the prepared dataset.
    Run(RunArgs),
    /// Train one client alone for the matched number of epochs.
    Baseline(BaselineArgs),
    /// Compare a federated report with an independent one.
    Compare {
        /// Directory holding the federated report.json.
        federated: PathBuf,
        /// Directory holding the independent report.json.
        independent: PathBuf,
        /// Output directory (defaults to the federated directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the report stored in a run or baseline directory.
    Report { dir: PathBuf },
    /// Write a synthetic corpus as JSON lines.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().n_samples)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Replace every seed in the config except the synthetic corpus seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Local training threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Run directory (defaults to <output_dir>/run).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Client whose shard is trained (defaults to baseline.client).
    #[arg(long)]
    client: Option<usize>,
    /// Output directory (defaults to <output_dir>/baseline).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::State(_)
        | Error::NonFinite(_)
        | Error::DegenerateWeights
        | Error::DegenerateVector => 3,
        Error::Config(_)
        | Error::Input(_)
        | Error::Partition(_)
        | Error::Dimension { .. }
        | Error::Schema { .. }
        | Error::Record { .. } => 1,
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print_histograms(p: &Prepared) {
    let m = &p.manifest;
    println!(
        "loaded {} samples, {} after cleaning, {} train / {} test, vocabulary {}",
        m.n_loaded,
        m.n_cleaned,
        p.train.len(),
        p.test.len(),
        p.vocab.size()
    );
    println!(
        "{:<16} {:>8} {:>8} {:>8}",
        "category", "loaded", "train", "test"
    );
    for (cat, n) in &m.loaded_histogram {
        let get = |h: &std::collections::BTreeMap<String, usize>| h.get(cat).copied().unwrap_or(0);
        println!(
            "{:<16} {:>8} {:>8} {:>8}",
            cat,
            n,
            get(&m.train_histogram),
            get(&m.test_histogram)
        );
    }
    for s in &m.shards {
        let vulnerable: usize = s
            .histogram
            .iter()
            .filter(|(k, _)| k.as_str() != fedvuln_core::corpus::SECURE)
            .map(|(_, v)| v)
            .sum();
        println!(
            "client {:>3}: {:>6} samples, {:>6} vulnerable, {:>3} categories",
            s.client_id,
            s.n_samples,
            vulnerable,
            s.histogram.len()
        );
    }
    println!("heterogeneity (mean chi-square) {:.4}", m.heterogeneity);
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare(args) => {
            let cfg = load_config(&args)?;
            let prepared = experiment::prepare_to_disk(&cfg)?;
            print_histograms(&prepared);
            println!("wrote {}", cfg.prepared_dir().display());
        }
        Command::Run(args) => {
            let mut cfg = load_config(&args.config)?;
            if let Some(w) = args.workers {
                cfg.federation.workers = w;
            }
            let prepared = experiment::load_prepared(&cfg)?;
            let dir = args.out.unwrap_or_else(|| cfg.run_dir());
            write_config(&dir, &cfg)?;
            let outcome = experiment::run_to_disk(&cfg, &prepared, &dir)?;
            for r in &outcome.trace {
                println!(
                    "round {:>3}  loss {:.4}  acc {:.4}  f1 {:.4}  upload {} bytes",
                    r.round, r.mean_train_loss, r.accuracy, r.f1, r.upload_bytes
                );
            }
            print!("{}", outcome.report.to_text());
            println!("wrote {}", dir.display());
        }
        Command::Baseline(args) => {
            let mut cfg = load_config(&args.config)?;
            if let Some(c) = args.client {
                cfg.baseline.client = c;
            }
            let prepared = experiment::load_prepared(&cfg)?;
            let dir = args.out.unwrap_or_else(|| cfg.baseline_dir());
            write_config(&dir, &cfg)?;
            let report = experiment::baseline(&cfg, &prepared)?;
            experiment::write_report(&dir, &report)?;
            print!("{}", report.to_text());
            println!("wrote {}", dir.display());
        }
        Command::Compare {
            federated,
            independent,
            out,
        } => {
            let out = out.unwrap_or_else(|| federated.clone());
            let table = experiment::compare_dirs(&federated, &independent, &out)?;
            print!("{}", table.to_text());
            println!("wrote {}", out.display());
        }
        Command::Report { dir } => {
            let report = experiment::read_report(&dir)?;
            print!("{}", report.to_text());
        }
        Command::Synth { out, samples, seed } => {
            let config = SynthConfig {
                n_samples: samples,
                seed,
                ..SynthConfig::default()
            };
            let records = synth::generate(&config)?;
            let file = fs::File::create(&out).map_err(|e| io_err(&out, e))?;
            let mut w = std::io::BufWriter::new(file);
            synth::write_jsonl(&records, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| io_err(&out, e))?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
