//! Pipeline commands behind the `bayesmr` binary: kinship export,
//! instrument selection, the frequentist estimator table, the Bayesian
//! fit, dataset simulation and multi-replicate calibration metrics.
//!
//! Every command takes one top-level seed; per-stage seeds are derived
//! deterministically, so rerunning a command with identical inputs
//! reproduces its outputs byte for byte. Data products go to files
//! only; stderr carries line-delimited JSON logs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, mask_exposure_in_cases, standardize_exposure, Dataset};
use crate::error::{Error, Result};
use crate::instruments::{ld_prune, marginal_scan, select_instruments, ScanOptions};
use crate::model::{BayesModel, ModelSpec};
use crate::mr::{estimate_all, outcome_scan, CovariateSet, EstimateRecord, ScanStatus, SummaryStats};
use crate::numeric::percentile_sorted;
use crate::pedigree::{kinship, parse_pedigree, KinshipMatrix, Pedigree};
use crate::sampler::{
    diagnostics_for, sample, summarize, Diagnostic, PosteriorDraws, SamplerConfig,
    SummaryTransform,
};
use crate::simulate::{simulate_scenario, Scenario, ScenarioConfig};

/// Structured log line on stderr.
pub fn log_json(level: &str, msg: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "level": level, "msg": msg })
    );
}

/// Machine-readable error report (stderr) used by the binary before a
/// nonzero exit.
pub fn log_error(err: &Error) {
    eprintln!(
        "{}",
        serde_json::json!({ "level": "error", "code": err.code(), "msg": err.to_string() })
    );
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::Cli(format!("cannot open {}: {e}", path.display()))
    })?))
}

fn read_pedigree(path: &Path) -> Result<Pedigree> {
    parse_pedigree(open(path)?)
}

fn read_dataset(pedigree: &Path, genotypes: &Path, phenotypes: &Path) -> Result<(Pedigree, Dataset)> {
    let ped = read_pedigree(pedigree)?;
    let ds = load_dataset(open(genotypes)?, open(phenotypes)?, &ped)?;
    Ok((ped, ds))
}

// ---------------------------------------------------------------------
// kinship

pub struct KinshipArgs {
    pub pedigree: PathBuf,
    pub out: PathBuf,
}

/// Write the kinship coefficient matrix as CSV (`kinship.csv`).
pub fn cmd_kinship(args: &KinshipArgs) -> Result<()> {
    let ped = read_pedigree(&args.pedigree)?;
    let k = kinship(&ped)?;
    let mut w = create(&args.out.join("kinship.csv"))?;
    write!(w, "id")?;
    for id in k.order() {
        write!(w, ",{id}")?;
    }
    writeln!(w)?;
    for (i, id) in k.order().iter().enumerate() {
        write!(w, "{id}")?;
        for j in 0..k.n() {
            write!(w, ",{}", k.get(i, j))?;
        }
        writeln!(w)?;
    }
    log_json("info", &format!("kinship matrix for {} individuals written", k.n()));
    Ok(())
}

// ---------------------------------------------------------------------
// select

pub struct SelectArgs {
    pub pedigree: PathBuf,
    pub genotypes: PathBuf,
    pub phenotypes: PathBuf,
    pub out: PathBuf,
    pub p_max: f64,
    pub r2_max: f64,
    pub window_kb: u64,
    pub mask_cases: bool,
}

/// Mixed-model scan, LD pruning and the p-value screen. Writes
/// `scan.csv` and `instruments.txt`.
pub fn cmd_select(args: &SelectArgs) -> Result<()> {
    let (_ped, ds) = read_dataset(&args.pedigree, &args.genotypes, &args.phenotypes)?;
    let k = kinship(&read_pedigree(&args.pedigree)?)?;
    let ds = prepare_exposure(&ds, args.mask_cases)?;
    let scan = marginal_scan(&ds, &k, &ScanOptions::default())?;
    let pruned = ld_prune(&ds, args.r2_max, args.window_kb * 1000);
    let set = select_instruments(&scan, &pruned, &ds.variants, args.p_max, args.r2_max, args.window_kb * 1000)?;

    let mut w = create(&args.out.join("scan.csv"))?;
    writeln!(w, "variant_id,phi_hat,se,p,n")?;
    for r in &scan.records {
        writeln!(w, "{},{},{},{},{}", r.variant_id, r.phi_hat, r.se, r.p_value, r.n_used)?;
    }
    let mut w = create(&args.out.join("instruments.txt"))?;
    for id in &set.ids {
        writeln!(w, "{id}")?;
    }
    log_json("info", &format!("{} instruments selected", set.ids.len()));
    Ok(())
}

fn read_instruments(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Case masking followed by standardization (the masking default is
/// on: exposure values in treated cases are discarded as missing).
fn prepare_exposure(ds: &Dataset, mask_cases: bool) -> Result<Dataset> {
    let ds = if mask_cases { mask_exposure_in_cases(ds) } else { ds.clone() };
    standardize_exposure(&ds)
}

// ---------------------------------------------------------------------
// fit-freq

pub struct FitFreqArgs {
    pub pedigree: PathBuf,
    pub genotypes: PathBuf,
    pub phenotypes: PathBuf,
    pub instruments: Option<PathBuf>,
    pub out: PathBuf,
    pub p_max: f64,
    pub r2_max: f64,
    pub window_kb: u64,
    pub exclude: Vec<String>,
}

/// Summary statistics for a chosen instrument list: mixed-model
/// first-stage effects on the exposure plus logistic second-stage
/// effects on the outcome. Variants that are monomorphic or separate
/// the outcome are dropped with a log line.
fn summary_stats_for(
    ds_analysis: &Dataset,
    ds_full: &Dataset,
    k: &KinshipMatrix,
    ids: &[String],
) -> Result<SummaryStats> {
    let restricted = ds_analysis.select_variants(ids)?;
    let scan = marginal_scan(&restricted, k, &ScanOptions::default())?;
    let gamma = outcome_scan(ds_full, ids, CovariateSet { sex: true })?;
    let mut out = SummaryStats {
        instrument_ids: Vec::new(),
        phi: Vec::new(),
        se_phi: Vec::new(),
        gamma: Vec::new(),
        se_gamma: Vec::new(),
    };
    for (first, second) in scan.records.iter().zip(&gamma) {
        if first.monomorphic {
            log_json("warn", &format!("instrument {} monomorphic; dropped", first.variant_id));
            continue;
        }
        if second.status != ScanStatus::Ok {
            log_json(
                "warn",
                &format!("instrument {} separated in outcome regression; dropped", second.variant_id),
            );
            continue;
        }
        out.instrument_ids.push(first.variant_id.clone());
        out.phi.push(first.phi_hat);
        out.se_phi.push(first.se);
        out.gamma.push(second.gamma);
        out.se_gamma.push(second.se);
    }
    Ok(out)
}

/// The eleven-method estimate table plus Egger-plot data. Writes
/// `mr_estimates.csv` and `egger_plot.csv`.
pub fn cmd_fit_freq(args: &FitFreqArgs) -> Result<()> {
    let (ped, ds) = read_dataset(&args.pedigree, &args.genotypes, &args.phenotypes)?;
    let k = kinship(&ped)?;
    // First stage on disease-free observed exposures; the frequentist
    // route always discards case exposures (complete-case analysis).
    let analysis = prepare_exposure(&ds, true)?;
    let ids = match &args.instruments {
        Some(path) => read_instruments(path)?,
        None => {
            let scan = marginal_scan(&analysis, &k, &ScanOptions::default())?;
            let pruned = ld_prune(&analysis, args.r2_max, args.window_kb * 1000);
            select_instruments(&scan, &pruned, &analysis.variants, args.p_max, args.r2_max, args.window_kb * 1000)?
                .ids
        }
    };
    let stats = summary_stats_for(&analysis, &ds, &k, &ids)?.excluding(&args.exclude);
    let rows = estimate_all(&stats)?;

    write_estimates_csv(&args.out.join("mr_estimates.csv"), &rows)?;

    // plot data: points plus IVW and Egger lines
    let ivw_fit = crate::mr::ivw(&stats, crate::mr::IvwMode::Fixed)?;
    let (egger_slope, egger_int) = crate::mr::egger(&stats, crate::mr::EggerMode::Plain)?;
    let plot = crate::mr::egger_plot_data(&stats, &[(ivw_fit, 0.0), (egger_slope, egger_int.estimate)]);
    let mut w = create(&args.out.join("egger_plot.csv"))?;
    writeln!(w, "kind,label,phi,gamma,se_phi,se_gamma,intercept,slope")?;
    for r in &plot {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.kind, r.label, r.phi, r.gamma, r.se_phi, r.se_gamma, r.intercept, r.slope
        )?;
    }
    log_json("info", &format!("{} instruments -> {} estimator rows", stats.len(), rows.len()));
    Ok(())
}

fn write_estimates_csv(path: &Path, rows: &[EstimateRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "method,estimate,std_error,ci_low,ci_high,p_value")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method, r.estimate, r.std_error, r.ci_lower, r.ci_upper, r.p_value
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// fit-bayes

pub struct FitBayesArgs {
    pub pedigree: PathBuf,
    pub genotypes: PathBuf,
    pub phenotypes: PathBuf,
    pub instruments: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub mask_cases: bool,
    pub p_max: f64,
    pub r2_max: f64,
    pub window_kb: u64,
    pub full_draws: bool,
}

/// Optional TOML overrides for the model priors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelOverrides {
    pub theta_scale: Option<f64>,
    pub alpha_scale_prior: Option<f64>,
    pub horseshoe_global_scale: Option<f64>,
    pub horseshoe_slab_scale: Option<f64>,
    pub horseshoe_slab_df: Option<f64>,
    pub family_effect_scale: Option<f64>,
    pub sigma_x_prior_scale: Option<f64>,
    pub delta_x_prior_scale: Option<f64>,
    pub omega_y_prior_scale: Option<f64>,
    pub liability_scale: Option<f64>,
    pub kinship_scale: Option<crate::pedigree::KinshipScale>,
    pub cholesky_jitter: Option<f64>,
}

impl ModelOverrides {
    pub fn apply(&self, spec: &mut ModelSpec) {
        let p = &mut spec.priors;
        if let Some(v) = self.theta_scale {
            p.theta_scale = v;
        }
        if let Some(v) = self.alpha_scale_prior {
            p.alpha_scale_prior = v;
        }
        if let Some(v) = self.horseshoe_global_scale {
            p.horseshoe.global_scale = v;
        }
        if let Some(v) = self.horseshoe_slab_scale {
            p.horseshoe.slab_scale = v;
        }
        if let Some(v) = self.horseshoe_slab_df {
            p.horseshoe.slab_df = v;
        }
        if let Some(v) = self.family_effect_scale {
            p.family_effect_scale = v;
        }
        if let Some(v) = self.sigma_x_prior_scale {
            p.sigma_x_prior_scale = v;
        }
        if let Some(v) = self.delta_x_prior_scale {
            p.delta_x_prior_scale = v;
        }
        if let Some(v) = self.omega_y_prior_scale {
            p.omega_y_prior_scale = v;
        }
        if let Some(v) = self.liability_scale {
            spec.liability_scale = v;
        }
        if let Some(v) = self.kinship_scale {
            spec.kinship_scale = v;
        }
        if let Some(v) = self.cholesky_jitter {
            spec.cholesky_jitter = v;
        }
    }
}

/// A fitted Bayesian model with everything the writers need.
pub struct BayesFit {
    pub draws: PosteriorDraws,
    pub theta_percentiles: [f64; 7],
    pub or_percentiles: [f64; 7],
    pub theta_diag: Diagnostic,
}

/// Shared Bayes pipeline: mask (optionally), standardize, restrict to
/// instruments, build the model and sample.
pub fn fit_bayes_pipeline(
    ds: &Dataset,
    k: &KinshipMatrix,
    instrument_ids: Option<&[String]>,
    overrides: Option<&ModelOverrides>,
    sampler_cfg: &SamplerConfig,
    mask_cases: bool,
) -> Result<BayesFit> {
    let analysis = prepare_exposure(ds, mask_cases)?;
    let analysis = match instrument_ids {
        Some(ids) => analysis.select_variants(ids)?,
        None => analysis,
    };
    let mut spec = ModelSpec::for_dataset(&analysis);
    if let Some(o) = overrides {
        o.apply(&mut spec);
    }
    let model = BayesModel::new(spec, &analysis, k)?;
    let draws = sample(&model, sampler_cfg)?;
    for wmsg in &draws.warnings {
        log_json("warn", wmsg);
    }
    let theta_percentiles = summarize(&draws, "theta", SummaryTransform::Identity)?;
    let or_percentiles = summarize(&draws, "theta", SummaryTransform::Exp)?;
    let theta_diag = diagnostics_for(&draws, "theta")?;
    Ok(BayesFit { draws, theta_percentiles, or_percentiles, theta_diag })
}

/// Percentile CSV in the two-row layout: log odds ratio and odds ratio
/// per sd of exposure, with columns min, 5, 25, 50, 75, 95, max.
pub fn write_percentiles_csv(path: &Path, fit: &BayesFit) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "row,min,p5,p25,p50,p75,p95,max")?;
    let fmt = |vals: &[f64; 7]| {
        vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    };
    writeln!(w, "Causal Exposure Log Odds Ratio,{}", fmt(&fit.theta_percentiles))?;
    writeln!(w, "Causal Exposure Odds Ratio,{}", fmt(&fit.or_percentiles))?;
    Ok(())
}

/// Columnar draws CSV: chain, iteration, then one column per coordinate.
/// By default the per-individual blocks (u, eta_raw, x_miss) are
/// omitted; `full` includes every coordinate.
pub fn write_draws_csv(path: &Path, draws: &PosteriorDraws, full: bool) -> Result<()> {
    let keep: Vec<usize> = (0..draws.dim)
        .filter(|&k| {
            full || {
                let n = &draws.names[k];
                !(n.starts_with("u[") || n.starts_with("eta_raw[") || n.starts_with("x_miss["))
            }
        })
        .collect();
    let mut w = create(path)?;
    write!(w, "chain,iteration")?;
    for &k in &keep {
        write!(w, ",{}", draws.names[k])?;
    }
    writeln!(w)?;
    for c in 0..draws.n_chains {
        for t in 0..draws.n_retained {
            write!(w, "{c},{t}")?;
            for &k in &keep {
                write!(w, ",{}", draws.get(c, t, k))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsReport<'a> {
    coordinates: Vec<Diagnostic>,
    chains: &'a [crate::sampler::ChainStats],
    total_divergences: usize,
    warnings: &'a [String],
}

pub fn write_diagnostics_json(path: &Path, draws: &PosteriorDraws, full: bool) -> Result<()> {
    let coords: Vec<String> = draws
        .names
        .iter()
        .filter(|n| {
            full || !(n.starts_with("u[") || n.starts_with("eta_raw[") || n.starts_with("x_miss["))
        })
        .cloned()
        .collect();
    let coordinates: Vec<Diagnostic> = coords
        .par_iter()
        .map(|n| diagnostics_for(draws, n))
        .collect::<Result<Vec<_>>>()?;
    let report = DiagnosticsReport {
        coordinates,
        chains: &draws.chain_stats,
        total_divergences: draws.total_divergences(),
        warnings: &draws.warnings,
    };
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &report)
        .map_err(|e| Error::Cli(format!("diagnostics serialization: {e}")))?;
    writeln!(w)?;
    Ok(())
}

/// Full Bayesian command: percentile table, draws and diagnostics.
pub fn cmd_fit_bayes(args: &FitBayesArgs) -> Result<()> {
    let (ped, ds) = read_dataset(&args.pedigree, &args.genotypes, &args.phenotypes)?;
    let k = kinship(&ped)?;
    let ids = match &args.instruments {
        Some(path) => Some(read_instruments(path)?),
        None => {
            let analysis = prepare_exposure(&ds, args.mask_cases)?;
            let scan = marginal_scan(&analysis, &k, &ScanOptions::default())?;
            let pruned = ld_prune(&analysis, args.r2_max, args.window_kb * 1000);
            Some(
                select_instruments(&scan, &pruned, &analysis.variants, args.p_max, args.r2_max, args.window_kb * 1000)?
                    .ids,
            )
        }
    };
    let overrides = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(toml::from_str::<ModelOverrides>(&text).map_err(|e| {
                Error::Cli(format!("config {}: {e}", path.display()))
            })?)
        }
        None => None,
    };
    let sampler_cfg = SamplerConfig {
        n_iterations: args.iterations,
        n_warmup: args.warmup,
        n_chains: args.chains,
        seed: crate::numeric::derive_seed(args.seed, 3),
        ..SamplerConfig::default()
    };
    let fit = fit_bayes_pipeline(&ds, &k, ids.as_deref(), overrides.as_ref(), &sampler_cfg, args.mask_cases)?;
    write_percentiles_csv(&args.out.join("percentiles.csv"), &fit)?;
    write_draws_csv(&args.out.join("draws.csv"), &fit.draws, args.full_draws)?;
    write_diagnostics_json(&args.out.join("diagnostics.json"), &fit.draws, args.full_draws)?;
    log_json(
        "info",
        &format!(
            "theta median {:.4}, split R-hat {:.4}, bulk ESS {:.0}, divergences {}",
            fit.theta_percentiles[3],
            fit.theta_diag.split_rhat,
            fit.theta_diag.ess_bulk,
            fit.draws.total_divergences()
        ),
    );
    Ok(())
}

// ---------------------------------------------------------------------
// simulate

pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

/// Write a synthetic dataset in the pipeline file formats: pedigree,
/// wide genotypes, phenotypes (raw exposure with blanks for missing),
/// the resolved scenario and the ground truth.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str::<ScenarioConfig>(&text)
                .map_err(|e| Error::Cli(format!("scenario config {}: {e}", path.display())))?
        }
        None => ScenarioConfig::default_desk_scale(args.seed),
    };
    cfg.seed = crate::numeric::derive_seed(args.seed, 1);
    let scenario = simulate_scenario(&cfg)?;
    write_scenario_files(&args.out, &scenario, &cfg)?;
    log_json(
        "info",
        &format!(
            "simulated N={} (cases {}), J={}, missing X {}",
            scenario.dataset.n(),
            scenario.truth.n_cases,
            scenario.dataset.n_variants(),
            scenario.truth.n_missing
        ),
    );
    Ok(())
}

pub fn write_scenario_files(out: &Path, scenario: &Scenario, cfg: &ScenarioConfig) -> Result<()> {
    let ds = &scenario.dataset_raw;
    let mut w = create(&out.join("pedigree.ped"))?;
    for m in scenario.pedigree.members() {
        let father = m.father.map(|i| scenario.pedigree.members()[i].id.clone());
        let mother = m.mother.map(|i| scenario.pedigree.members()[i].id.clone());
        writeln!(
            w,
            "{} {} {} {} {}",
            m.family,
            m.id,
            father.as_deref().unwrap_or("0"),
            mother.as_deref().unwrap_or("0"),
            m.sex.code()
        )?;
    }

    let mut w = create(&out.join("genotypes.csv"))?;
    write!(w, "variant_id,chrom,pos")?;
    for id in &ds.ids {
        write!(w, ",{id}")?;
    }
    writeln!(w)?;
    for (j, v) in ds.variants.iter().enumerate() {
        write!(w, "{},{},{}", v.id, v.chrom, v.pos)?;
        for i in 0..ds.n() {
            write!(w, ",{}", ds.dose(i, j) as u8)?;
        }
        writeln!(w)?;
    }

    let mut w = create(&out.join("phenotypes.csv"))?;
    writeln!(w, "id,y,x,sex")?;
    for i in 0..ds.n() {
        let x = if ds.missing[i] { String::new() } else { ds.exposure[i].to_string() };
        let sex = ds.sex.as_ref().map(|s| s[i]).unwrap_or(0);
        writeln!(w, "{},{},{},{}", ds.ids[i], ds.outcome[i], x, sex)?;
    }

    let mut w = create(&out.join("truth.json"))?;
    serde_json::to_writer_pretty(&mut w, &scenario.truth)
        .map_err(|e| Error::Cli(format!("truth serialization: {e}")))?;
    writeln!(w)?;

    let mut w = create(&out.join("scenario.toml"))?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Cli(format!("scenario serialization: {e}")))?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------
// replicate

pub struct ReplicateArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub n_replicates: usize,
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
}

/// Summary of a single replicate's Bayesian fit.
#[derive(Debug, Clone, Serialize)]
pub struct BayesSummary {
    pub median: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub split_rhat: f64,
    pub ess_bulk: f64,
    pub divergences: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// True causal effect per sd of the analysis-scale exposure.
    pub theta_true: f64,
    pub bayes: BayesSummary,
    /// The eleven frequentist rows.
    pub freq: Vec<EstimateRecord>,
}

/// One replicate: simulate under a derived seed, mask cases,
/// standardize, fit the Bayesian model on all simulated instruments and
/// the frequentist battery on complete-case summary statistics.
pub fn run_replicate(
    base: &ScenarioConfig,
    sampler_cfg: &SamplerConfig,
    seed: u64,
    replicate: usize,
    mask_cases: bool,
) -> Result<ReplicateResult> {
    let mut cfg = base.clone();
    cfg.seed = crate::numeric::derive_seed(seed, 1000 + replicate as u64);
    let scenario = simulate_scenario(&cfg)?;

    // analysis dataset: optional case masking on top of the scenario's
    // missingness rule
    let masked = if mask_cases {
        mask_exposure_in_cases(&scenario.dataset_raw)
    } else {
        scenario.dataset_raw.clone()
    };
    let analysis = standardize_exposure(&masked)?;
    let theta_true = cfg.theta * analysis.scaling.expect("standardized").sd;

    // Bayesian fit on all simulated instruments; structural switches
    // follow the scenario so the model matches the generating process
    let mut spec = ModelSpec::for_dataset(&analysis);
    spec.liability_scale = cfg.liability_scale;
    spec.kinship_scale = cfg.kinship_scale;
    let model = BayesModel::new(spec, &analysis, &scenario.kinship)?;
    let chain_cfg = SamplerConfig {
        seed: crate::numeric::derive_seed(cfg.seed, 3),
        ..sampler_cfg.clone()
    };
    let draws = sample(&model, &chain_cfg)?;
    let mut theta_draws = draws.pooled(0);
    theta_draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let diag = diagnostics_for(&draws, "theta")?;
    let bayes = BayesSummary {
        median: percentile_sorted(&theta_draws, 0.5),
        ci_lower: percentile_sorted(&theta_draws, 0.025),
        ci_upper: percentile_sorted(&theta_draws, 0.975),
        split_rhat: diag.split_rhat,
        ess_bulk: diag.ess_bulk,
        divergences: draws.total_divergences(),
    };

    // frequentist battery on complete-case summary statistics
    let ids: Vec<String> = analysis.variants.iter().map(|v| v.id.clone()).collect();
    let stats = summary_stats_for(&analysis, &scenario.dataset_raw, &scenario.kinship, &ids)?;
    let freq = estimate_all(&stats)?;

    Ok(ReplicateResult { replicate, theta_true, bayes, freq })
}

/// Replicates fan out across worker threads; chain-level seeds are
/// derived per replicate so scheduling never changes results.
pub fn run_replicates(
    base: &ScenarioConfig,
    sampler_cfg: &SamplerConfig,
    seed: u64,
    n_replicates: usize,
    mask_cases: bool,
) -> Result<Vec<ReplicateResult>> {
    (0..n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(base, sampler_cfg, seed, r, mask_cases))
        .collect()
}

/// Per-estimator calibration metrics over a replicate batch.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorMetrics {
    pub estimator: String,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub n_replicates: usize,
}

pub fn replicate_metrics(results: &[ReplicateResult]) -> Vec<EstimatorMetrics> {
    let n = results.len();
    let mut out = Vec::new();
    let collect = |name: &str, vals: Vec<(f64, f64, f64, f64)>| {
        // (estimate, lo, hi, truth)
        let bias = vals.iter().map(|v| v.0 - v.3).sum::<f64>() / n as f64;
        let rmse =
            (vals.iter().map(|v| (v.0 - v.3) * (v.0 - v.3)).sum::<f64>() / n as f64).sqrt();
        let coverage =
            vals.iter().filter(|v| v.1 <= v.3 && v.3 <= v.2).count() as f64 / n as f64;
        EstimatorMetrics { estimator: name.to_string(), bias, rmse, coverage, n_replicates: n }
    };
    out.push(collect(
        "Bayesian posterior median",
        results
            .iter()
            .map(|r| (r.bayes.median, r.bayes.ci_lower, r.bayes.ci_upper, r.theta_true))
            .collect(),
    ));
    if let Some(first) = results.first() {
        for (k, rec) in first.freq.iter().enumerate() {
            out.push(collect(
                &rec.method,
                results
                    .iter()
                    .map(|r| {
                        let f = &r.freq[k];
                        (f.estimate, f.ci_lower, f.ci_upper, r.theta_true)
                    })
                    .collect(),
            ));
        }
    }
    out
}

/// Multi-replicate calibration run. Writes `replicates.csv` (one row
/// per replicate and estimator) and `metrics.csv` (bias, coverage,
/// RMSE per estimator).
pub fn cmd_replicate(args: &ReplicateArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str::<ScenarioConfig>(&text)
                .map_err(|e| Error::Cli(format!("scenario config {}: {e}", path.display())))?
        }
        None => ScenarioConfig::default_desk_scale(args.seed),
    };
    let sampler_cfg = SamplerConfig {
        n_iterations: args.iterations,
        n_warmup: args.warmup,
        n_chains: args.chains,
        ..SamplerConfig::default()
    };
    let results = run_replicates(&base, &sampler_cfg, args.seed, args.n_replicates, true)?;

    let mut w = create(&args.out.join("replicates.csv"))?;
    writeln!(w, "replicate,estimator,estimate,ci_low,ci_high,theta_true,covered")?;
    for r in &results {
        let covered = r.bayes.ci_lower <= r.theta_true && r.theta_true <= r.bayes.ci_upper;
        writeln!(
            w,
            "{},Bayesian posterior median,{},{},{},{},{}",
            r.replicate, r.bayes.median, r.bayes.ci_lower, r.bayes.ci_upper, r.theta_true, covered
        )?;
        for f in &r.freq {
            let covered = f.ci_lower <= r.theta_true && r.theta_true <= f.ci_upper;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.replicate, f.method, f.estimate, f.ci_lower, f.ci_upper, r.theta_true, covered
            )?;
        }
    }

    let metrics = replicate_metrics(&results);
    let mut w = create(&args.out.join("metrics.csv"))?;
    writeln!(w, "estimator,bias,rmse,coverage,n_replicates")?;
    for m in &metrics {
        writeln!(w, "{},{},{},{},{}", m.estimator, m.bias, m.rmse, m.coverage, m.n_replicates)?;
    }
    log_json("info", &format!("{} replicates complete", results.len()));
    Ok(())
}
