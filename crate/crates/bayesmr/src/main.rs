use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bayesmr::cli;

/// Bayesian Mendelian randomization for family data.
#[derive(Parser)]
#[command(name = "bayesmr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct InputFiles {
    /// Pedigree file (family id father mother sex; 0 = missing parent).
    #[arg(long)]
    pedigree: PathBuf,
    /// Genotype dose file (wide or long format).
    #[arg(long)]
    genotypes: PathBuf,
    /// Phenotype file (id y x [sex]; empty x = missing).
    #[arg(long)]
    phenotypes: PathBuf,
}

#[derive(Args)]
struct SelectionFlags {
    /// Marginal-association p-value threshold.
    #[arg(long, default_value_t = 5e-3)]
    p_max: f64,
    /// Pairwise squared-correlation pruning threshold.
    #[arg(long, default_value_t = 0.20)]
    r2_max: f64,
    /// Pruning window in kilobases.
    #[arg(long, default_value_t = 100)]
    window_kb: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the kinship coefficient matrix of a pedigree.
    Kinship {
        #[arg(long)]
        pedigree: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select instrumental variants: mixed-model scan plus LD pruning.
    Select {
        #[command(flatten)]
        inputs: InputFiles,
        #[command(flatten)]
        selection: SelectionFlags,
        #[arg(long)]
        out: PathBuf,
        /// Treat case exposures as missing before the scan.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        mask_cases: bool,
    },
    /// Frequentist estimator battery over summary statistics.
    FitFreq {
        #[command(flatten)]
        inputs: InputFiles,
        #[command(flatten)]
        selection: SelectionFlags,
        /// Instrument list (one variant id per line); selection runs
        /// internally when omitted.
        #[arg(long)]
        instruments: Option<PathBuf>,
        /// Instrument ids to exclude (manual outlier removal).
        #[arg(long)]
        exclude: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bayesian MR fit: percentile table, draws, diagnostics.
    FitBayes {
        #[command(flatten)]
        inputs: InputFiles,
        #[command(flatten)]
        selection: SelectionFlags,
        #[arg(long)]
        instruments: Option<PathBuf>,
        /// Model prior overrides (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 9000)]
        iterations: usize,
        #[arg(long, default_value_t = 4500)]
        warmup: usize,
        /// Treat case exposures as missing (reverse-causation guard).
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        mask_cases: bool,
        /// Include per-individual coordinates in draws and diagnostics.
        #[arg(long, default_value_t = false)]
        full_draws: bool,
    },
    /// Simulate a synthetic pedigree dataset with known ground truth.
    Simulate {
        /// Scenario configuration (TOML); desk-scale default if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Multi-replicate calibration metrics (bias, coverage, RMSE).
    Replicate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 9000)]
        iterations: usize,
        #[arg(long, default_value_t = 4500)]
        warmup: usize,
    },
}

fn run(command: Command) -> bayesmr::Result<()> {
    match command {
        Command::Kinship { pedigree, out } => cli::cmd_kinship(&cli::KinshipArgs { pedigree, out }),
        Command::Select { inputs, selection, out, mask_cases } => cli::cmd_select(&cli::SelectArgs {
            pedigree: inputs.pedigree,
            genotypes: inputs.genotypes,
            phenotypes: inputs.phenotypes,
            out,
            p_max: selection.p_max,
            r2_max: selection.r2_max,
            window_kb: selection.window_kb,
            mask_cases,
        }),
        Command::FitFreq { inputs, selection, instruments, exclude, out } => {
            cli::cmd_fit_freq(&cli::FitFreqArgs {
                pedigree: inputs.pedigree,
                genotypes: inputs.genotypes,
                phenotypes: inputs.phenotypes,
                instruments,
                out,
                p_max: selection.p_max,
                r2_max: selection.r2_max,
                window_kb: selection.window_kb,
                exclude,
            })
        }
        Command::FitBayes {
            inputs,
            selection,
            instruments,
            config,
            out,
            seed,
            chains,
            iterations,
            warmup,
            mask_cases,
            full_draws,
        } => cli::cmd_fit_bayes(&cli::FitBayesArgs {
            pedigree: inputs.pedigree,
            genotypes: inputs.genotypes,
            phenotypes: inputs.phenotypes,
            instruments,
            config,
            out,
            seed,
            chains,
            iterations,
            warmup,
            mask_cases,
            p_max: selection.p_max,
            r2_max: selection.r2_max,
            window_kb: selection.window_kb,
            full_draws,
        }),
        Command::Simulate { config, out, seed } => {
            cli::cmd_simulate(&cli::SimulateArgs { config, out, seed })
        }
        Command::Replicate { config, out, seed, replicates, chains, iterations, warmup } => {
            cli::cmd_replicate(&cli::ReplicateArgs {
                config,
                out,
                seed,
                n_replicates: replicates,
                chains,
                iterations,
                warmup,
            })
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            cli::log_error(&err);
            ExitCode::FAILURE
        }
    }
}
