use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xeroalign_cli::config::{read_toml, GridConfig, MatrixConfig, RunConfig};
use xeroalign_cli::{grid, matrix, report, runner, CliError, CliResult};
use xeroalign_core::data::synth::{write_generated, SynthSpec};

#[derive(Parser)]
#[command(name = "xeroalign", version, about = "Cross-lingual alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus as JSONL files.
    GenData {
        /// Generator spec; the built-in default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configuration row over presets and seeds and tabulate.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Align with one target language at a time and score every language.
    GridOneLanguage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Plot and summarize run directories.
    Report {
        /// A run directory, or a directory of runs.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parent(p: &Path) -> Option<&Path> {
    p.parent()
}

fn gen_data(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let mut spec = match config {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default_spec(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let files = write_generated(&spec, out)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let mut rc: RunConfig = read_toml(config)?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    rc.train.validate()?;
    let corpus = rc.data.load(parent(config))?;
    let r = runner::run_to_dir(&rc.train, &rc.data, &corpus, out)?;
    println!(
        "{}: target intent accuracy {:.4}, slot F1 {:.4}",
        rc.train.mode, r.average.intent_accuracy, r.average.slot_f1
    );
    Ok(())
}

fn failures(outcomes: &[runner::CellOutcome]) -> CliResult<()> {
    let n = outcomes.iter().filter(|o| o.result.is_err()).count();
    if n > 0 {
        return Err(CliError::Runtime(format!("{n} of {} cells failed", outcomes.len())));
    }
    Ok(())
}

fn run_matrix(config: &Path, seed: Option<u64>, out: &Path, jobs: usize) -> CliResult<()> {
    let mut mc: MatrixConfig = read_toml(config)?;
    if let Some(s) = seed {
        mc.seeds = vec![s];
    }
    let cells = mc.cells()?;
    let corpus = mc.data.load(parent(config))?;
    let outcomes = runner::run_cells(cells, &mc.data, &corpus, out, jobs)?;
    let table = matrix::aggregate(&outcomes);
    matrix::write_table(&table, out, "results")?;
    print!("{}", matrix::render_text(&table));
    failures(&outcomes)
}

fn run_grid(config: &Path, seed: Option<u64>, out: &Path, jobs: usize) -> CliResult<()> {
    let mut gc: GridConfig = read_toml(config)?;
    if let Some(s) = seed {
        gc.seeds = vec![s];
    }
    let corpus = gc.data.load(parent(config))?;
    let targets = corpus.target_languages();
    let cells = gc.cells(&targets)?;
    let outcomes = runner::run_cells(cells, &gc.data, &corpus, out, jobs)?;
    let table = grid::aggregate(&outcomes, corpus.source_language(), &targets);
    grid::write_grid(&table, out)?;
    print!("{}", grid::render_text(&table));
    failures(&outcomes)
}

fn run_report(out: &Path) -> CliResult<()> {
    let runs = report::find_runs(out)?;
    if runs.is_empty() {
        return Err(CliError::Runtime(format!("no run directories under {}", out.display())));
    }
    let mut incomplete = 0;
    for dir in &runs {
        let missing = report::report_run(dir)?;
        if missing.is_empty() {
            println!("reported {}", dir.display());
        } else {
            incomplete += 1;
            eprintln!("skipped {}: missing {}", dir.display(), missing.join(", "));
        }
    }
    if incomplete > 0 {
        return Err(CliError::Runtime(format!("{incomplete} of {} runs incomplete", runs.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { config, seed, out } => gen_data(config, seed, &out),
        Command::Run { config, seed, out } => run(&config, seed, &out),
        Command::Matrix { config, seed, out, jobs } => run_matrix(&config, seed, &out, jobs),
        Command::GridOneLanguage { config, seed, out, jobs } => run_grid(&config, seed, &out, jobs),
        Command::Report { out } => run_report(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
