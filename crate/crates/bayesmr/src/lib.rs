//! Bayesian Mendelian randomization for family data.
//!
//! This crate estimates the causal effect of a continuous exposure
//! (e.g. a circulating protein level) on a binary disease outcome using
//! genetic variants as instruments, in samples of related individuals.
//! Exposure values may be missing at random or deliberately masked in
//! cases; the Bayesian model treats them as parameters and samples them
//! jointly with everything else.
//!
//! The main pieces:
//!
//! - [`pedigree`] — pedigree parsing, kinship coefficients and the
//!   block-structured kinship matrix with its Cholesky factor.
//! - [`data`] — dataset ingestion (genotype doses, exposure with a
//!   missingness mask, binary outcome), exposure standardization and
//!   case masking.
//! - [`instruments`] — instrument selection: kinship-aware mixed-model
//!   association scan followed by LD pruning.
//! - [`mr`] — the frequentist estimator battery over per-instrument
//!   summary statistics: IVW, MR-Egger and weighted-median families,
//!   with penalized and robust variants.
//! - [`model`] — the full Bayesian model: unconstrained parameter
//!   layout, log posterior density and its exact gradient, including
//!   missing-exposure parameters, family effects, a kinship-correlated
//!   latent liability and shrinkage priors.
//! - [`sampler`] — No-U-Turn Hamiltonian Monte Carlo with dual-averaging
//!   step-size adaptation, diagonal mass-matrix estimation, multi-chain
//!   execution and convergence diagnostics.
//! - [`simulate`] — synthetic pedigrees, gene-dropped genotypes and
//!   phenotypes generated from the same structural model, so every
//!   estimator can be checked against known ground truth.
//! - [`cli`] — the pipeline commands behind the `bayesmr` binary.
//!
//! Start with the runnable programs under `examples/`; each one
//! demonstrates a single capability end to end.

pub mod cli;
pub mod data;
pub mod error;
pub mod instruments;
pub mod model;
pub mod mr;
pub mod numeric;
pub mod pedigree;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
