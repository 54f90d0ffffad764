use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use semanticache::bench::{compression_workers, run_bench, BenchConfig};
use semanticache::format::{load_cache, load_compressed, save_cache, save_compressed, FormatError};
use semanticache::synthetic::{generate, SyntheticSpec};
use semanticache::verify::{verify_cache, verify_pair, PropertyFailure};
use semanticache::{compress_multi_head, Chunking, Threshold};

/// Exit status for a library-level rejection (bad threshold, invalid spec, ...).
const EXIT_INVALID_INPUT: u8 = 11;
/// Exit status for anything not covered by the table.
const EXIT_OTHER: u8 = 12;

#[derive(Parser)]
#[command(name = "semanticache", version, about = "Semantic KV-cache compression harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a cache dump and write a compressed dump.
    Compress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        tau: f64,
        /// `semantic` or `fixed:<block>`.
        #[arg(long, default_value = "semantic")]
        chunking: Chunking,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic cache dump from a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Check a cache dump, and optionally a compressed dump made from it.
    Verify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        compressed: Option<PathBuf>,
        /// Threshold the compressed dump was produced with.
        #[arg(long, default_value_t = 0.7, allow_negative_numbers = true)]
        tau: f64,
        #[arg(long, default_value = "semantic")]
        chunking: Chunking,
    },
    /// Sweep thresholds over a synthetic cache and time decode attention.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
        tau_grid: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))
}

fn compress(input: &Path, tau: f64, chunking: Chunking, output: &Path) -> Result<()> {
    let mh = load_cache(input).with_context(|| format!("loading {}", input.display()))?;
    let heads = compress_multi_head(&mh, Threshold::new(tau)?, chunking)?;
    save_compressed(&heads, output).with_context(|| format!("writing {}", output.display()))?;
    for (h, c) in heads.iter().enumerate() {
        println!("head {h}: {} -> {} entries, retained {:.4}", c.original_len(), c.len(), c.retained_fraction());
    }
    Ok(())
}

fn gen(spec: &Path, output: &Path) -> Result<()> {
    let spec = read_spec(spec)?;
    let mh = generate(&spec)?;
    save_cache(&mh, output).with_context(|| format!("writing {}", output.display()))?;
    println!("wrote {} heads x {} tokens x dim {}", mh.heads().len(), mh.len(), mh.dim());
    Ok(())
}

fn verify(input: &Path, compressed: Option<&Path>, tau: f64, chunking: Chunking) -> Result<Option<PropertyFailure>> {
    let mh = load_cache(input).with_context(|| format!("loading {}", input.display()))?;
    let tau = Threshold::new(tau)?;
    let outcome = match compressed {
        Some(path) => {
            let heads = load_compressed(path).with_context(|| format!("loading {}", path.display()))?;
            verify_pair(&mh, &heads, tau, chunking)
        }
        None => verify_cache(&mh, tau, chunking),
    };
    Ok(outcome.err())
}

fn bench(spec: &Path, grid: &[f64], queries: usize, repeats: usize, csv_path: &Path) -> Result<()> {
    let spec = read_spec(spec)?;
    let mh = generate(&spec)?;
    let config = BenchConfig {
        queries,
        repeats,
        ..BenchConfig::default()
    };
    let rows = run_bench(&mh, grid, &config)?;

    let mut file = fs::File::create(csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    writeln!(file, "# compression_workers={}", compression_workers())?;
    writeln!(file, "# timing_workers=1")?;
    writeln!(file, "# time_unit=seconds_per_decode_step")?;
    writeln!(file, "# queries={queries} repeats={repeats} chunking={}", config.chunking)?;
    let mut out = csv::Writer::from_writer(file);
    for row in &rows {
        out.serialize(row)?;
    }
    out.flush()?;
    for row in &rows {
        println!(
            "tau {:.2}: retained {:.4}, removed {:.1}%, speedup {:.2}x",
            row.tau, row.retained_fraction, row.removed_fraction_pct, row.speedup
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return e.code() as u8;
        }
        if cause.is::<semanticache::Error>() {
            return EXIT_INVALID_INPUT;
        }
        // Spec files and CSV output share the dump codes for json and i/o.
        if cause.is::<serde_json::Error>() {
            return 10;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 3;
        }
    }
    EXIT_OTHER
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compress {
            input,
            tau,
            chunking,
            output,
        } => compress(&input, tau, chunking, &output),
        Command::Gen { spec, output } => gen(&spec, &output),
        Command::Verify {
            input,
            compressed,
            tau,
            chunking,
        } => match verify(&input, compressed.as_deref(), tau, chunking) {
            Ok(None) => {
                println!("ok");
                Ok(())
            }
            Ok(Some(failure)) => {
                println!("FAILED {failure}");
                return ExitCode::from(1);
            }
            Err(e) => {
                // Unreadable or corrupt inputs fail verification too.
                println!("FAILED load: {e:#}");
                return ExitCode::from(1);
            }
        },
        Command::Bench {
            spec,
            tau_grid,
            queries,
            repeats,
            csv,
        } => bench(&spec, &tau_grid, queries, repeats, &csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
