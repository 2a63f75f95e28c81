//! The full Bayesian MR model: unconstrained parameter layout, log
//! posterior density and its exact gradient.
//!
//! Structure, for individual i with instruments Z_i, confounder score
//! U_i, family f(i) and exposure x_i (a parameter when missing):
//!
//! ```text
//! U_i      ~ N(0, 1)
//! x_i      ~ N(nu_i, sigma_x^2),   nu_i = sum_j alpha_j Z_ij + delta_x U_i + gammaX_f(i)
//! eta      = mu + s * L eta_raw,   eta_raw ~ N(0, I), L L' = kinship
//! mu_i     = omega_y + theta x_i + sum_j beta_j Z_ij + U_i + gammaY_f(i)
//! Y_i      ~ Bernoulli(logistic(eta_i))
//! ```
//!
//! Priors: theta Cauchy(0, 2.5); alpha_j double-exponential with a
//! half-Cauchy scale; beta_j regularized horseshoe (half-Cauchy locals
//! and global, scaled inverse-chi-squared slab); normal family effects;
//! half-Cauchy sigma_x; normal delta_x and omega_y. Positive parameters
//! are sampled on the log scale with the Jacobian included.
//!
//! The confounder enters the outcome equation with fixed coefficient 1
//! and the exposure equation with the free coefficient delta_x; this
//! asymmetry is the identifiability device and must not be "fixed".

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{ln_gamma, sigmoid, softplus};
use crate::pedigree::{cholesky_dense, KinshipMatrix, KinshipScale};
use crate::sampler::LogDensity;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Regularized-horseshoe hyperparameters for the pleiotropy block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HorseshoeConfig {
    /// Scale of the half-Cauchy prior on the global shrinkage.
    pub global_scale: f64,
    /// Slab scale c_s of the scaled inverse-chi-squared slab.
    pub slab_scale: f64,
    /// Slab degrees of freedom.
    pub slab_df: f64,
}

impl HorseshoeConfig {
    /// Default global scale p0 / ((J - p0) sqrt(N)) with p0 = max(1, J/10),
    /// assuming roughly one instrument in ten is pleiotropic.
    pub fn default_for(n_instruments: usize, n_individuals: usize) -> HorseshoeConfig {
        let j = n_instruments as f64;
        let p0 = (j / 10.0).max(1.0);
        let denom = (j - p0).max(0.5) * (n_individuals.max(1) as f64).sqrt();
        HorseshoeConfig {
            global_scale: if n_instruments == 0 { 1.0 } else { p0 / denom },
            slab_scale: 2.5,
            slab_df: 4.0,
        }
    }
}

/// Prior hyperparameters. All scales strictly positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Cauchy scale for the causal effect theta.
    pub theta_scale: f64,
    /// Half-Cauchy scale for the double-exponential rate of the alpha block.
    pub alpha_scale_prior: f64,
    pub horseshoe: HorseshoeConfig,
    /// Normal sd of the per-family exposure and outcome effects.
    pub family_effect_scale: f64,
    /// Half-Cauchy scale for sigma_x.
    pub sigma_x_prior_scale: f64,
    /// Normal sd for delta_x.
    pub delta_x_prior_scale: f64,
    /// Normal sd for omega_y.
    pub omega_y_prior_scale: f64,
}

impl PriorConfig {
    pub fn default_for(n_instruments: usize, n_individuals: usize) -> PriorConfig {
        PriorConfig {
            theta_scale: 2.5,
            alpha_scale_prior: 1.0,
            horseshoe: HorseshoeConfig::default_for(n_instruments, n_individuals),
            family_effect_scale: 5.0,
            sigma_x_prior_scale: 1.0,
            delta_x_prior_scale: 2.0,
            omega_y_prior_scale: 5.0,
        }
    }
}

/// Model dimensions, prior hyperparameters and structural switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_instruments: usize,
    pub n_individuals: usize,
    pub n_families: usize,
    pub n_missing: usize,
    pub priors: PriorConfig,
    /// Scale s applied to the kinship-correlated liability innovations.
    pub liability_scale: f64,
    /// Whether the liability covariance uses kinship coefficients or
    /// twice them (the numerator relationship matrix).
    pub kinship_scale: KinshipScale,
    /// Starting jitter for the kinship Cholesky (escalates on failure).
    pub cholesky_jitter: f64,
}

impl ModelSpec {
    pub fn for_dataset(ds: &Dataset) -> ModelSpec {
        ModelSpec {
            n_instruments: ds.n_variants(),
            n_individuals: ds.n(),
            n_families: ds.n_families,
            n_missing: ds.n_missing(),
            priors: PriorConfig::default_for(ds.n_variants(), ds.n()),
            liability_scale: 1.0,
            kinship_scale: KinshipScale::Coefficient,
            cholesky_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.priors;
        let scales = [
            p.theta_scale,
            p.alpha_scale_prior,
            p.horseshoe.global_scale,
            p.horseshoe.slab_scale,
            p.horseshoe.slab_df,
            p.family_effect_scale,
            p.sigma_x_prior_scale,
            p.delta_x_prior_scale,
            p.omega_y_prior_scale,
        ];
        if scales.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Model("all prior scales must be positive".into()));
        }
        if self.n_missing > self.n_individuals {
            return Err(Error::Model("n_missing exceeds n_individuals".into()));
        }
        if self.liability_scale < 0.0 {
            return Err(Error::Model("liability scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Fixed coordinate order of the unconstrained parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterLayout {
    pub n_instruments: usize,
    pub n_families: usize,
    pub n_individuals: usize,
    pub n_missing: usize,
}

impl ParameterLayout {
    pub fn of(spec: &ModelSpec) -> ParameterLayout {
        ParameterLayout {
            n_instruments: spec.n_instruments,
            n_families: spec.n_families,
            n_individuals: spec.n_individuals,
            n_missing: spec.n_missing,
        }
    }

    pub fn dim(&self) -> usize {
        3 * self.n_instruments + 2 * self.n_families + 2 * self.n_individuals + self.n_missing + 7
    }

    pub fn theta(&self) -> usize {
        0
    }
    pub fn alpha(&self) -> std::ops::Range<usize> {
        1..1 + self.n_instruments
    }
    /// Standardized pleiotropy scores: beta_j = beta_z_j * sqrt(v_j)
    /// with v_j the effective horseshoe variance. Sampling the scores
    /// instead of beta itself removes the local-scale funnel that
    /// otherwise makes the trajectories diverge.
    pub fn beta_z(&self) -> std::ops::Range<usize> {
        let j = self.n_instruments;
        1 + j..1 + 2 * j
    }
    pub fn log_lambda(&self) -> std::ops::Range<usize> {
        let j = self.n_instruments;
        1 + 2 * j..1 + 3 * j
    }
    pub fn log_tau(&self) -> usize {
        1 + 3 * self.n_instruments
    }
    pub fn log_c2(&self) -> usize {
        2 + 3 * self.n_instruments
    }
    pub fn log_b_alpha(&self) -> usize {
        3 + 3 * self.n_instruments
    }
    pub fn delta_x(&self) -> usize {
        4 + 3 * self.n_instruments
    }
    pub fn log_sigma_x(&self) -> usize {
        5 + 3 * self.n_instruments
    }
    pub fn omega_y(&self) -> usize {
        6 + 3 * self.n_instruments
    }
    pub fn gamma_x(&self) -> std::ops::Range<usize> {
        let base = 7 + 3 * self.n_instruments;
        base..base + self.n_families
    }
    pub fn gamma_y(&self) -> std::ops::Range<usize> {
        let base = 7 + 3 * self.n_instruments + self.n_families;
        base..base + self.n_families
    }
    pub fn u(&self) -> std::ops::Range<usize> {
        let base = 7 + 3 * self.n_instruments + 2 * self.n_families;
        base..base + self.n_individuals
    }
    pub fn eta_raw(&self) -> std::ops::Range<usize> {
        let base = 7 + 3 * self.n_instruments + 2 * self.n_families + self.n_individuals;
        base..base + self.n_individuals
    }
    pub fn x_miss(&self) -> std::ops::Range<usize> {
        let base = 7 + 3 * self.n_instruments + 2 * self.n_families + 2 * self.n_individuals;
        base..base + self.n_missing
    }

    /// Stable coordinate names for draw output, aligned with the vector.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        names.push("theta".to_string());
        for j in 1..=self.n_instruments {
            names.push(format!("alpha[{j}]"));
        }
        for j in 1..=self.n_instruments {
            names.push(format!("beta_z[{j}]"));
        }
        for j in 1..=self.n_instruments {
            names.push(format!("log_lambda[{j}]"));
        }
        names.push("log_tau".to_string());
        names.push("log_c2".to_string());
        names.push("log_b_alpha".to_string());
        names.push("delta_x".to_string());
        names.push("log_sigma_x".to_string());
        names.push("omega_y".to_string());
        for f in 1..=self.n_families {
            names.push(format!("gamma_x[{f}]"));
        }
        for f in 1..=self.n_families {
            names.push(format!("gamma_y[{f}]"));
        }
        for i in 1..=self.n_individuals {
            names.push(format!("u[{i}]"));
        }
        for i in 1..=self.n_individuals {
            names.push(format!("eta_raw[{i}]"));
        }
        for k in 1..=self.n_missing {
            names.push(format!("x_miss[{k}]"));
        }
        names
    }
}

/// Log posterior value and gradient at one point.
#[derive(Debug, Clone)]
pub struct LogDensityResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Named value of each additive term of the log posterior; used for
/// diagnosing non-finite densities and for factorization tests.
#[derive(Debug, Clone)]
pub struct DensityTerms {
    pub terms: Vec<(&'static str, f64)>,
}

impl DensityTerms {
    pub fn total(&self) -> f64 {
        self.terms.iter().map(|(_, v)| v).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        self.terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Lower-triangular Cholesky factor stored block-diagonally. Families
/// occupy contiguous index runs in pedigree order, so the kinship factor
/// of the block matrix is itself block-diagonal and liability matvecs
/// skip the structural zeros.
#[derive(Debug, Clone)]
struct BlockCholesky {
    blocks: Vec<CholBlock>,
    jitter_used: f64,
}

#[derive(Debug, Clone)]
struct CholBlock {
    offset: usize,
    size: usize,
    /// Row-major size x size lower-triangular factor.
    l: Vec<f64>,
}

impl BlockCholesky {
    /// y = L x
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for b in &self.blocks {
            for r in 0..b.size {
                let mut acc = 0.0;
                let row = &b.l[r * b.size..r * b.size + r + 1];
                for (c, lrc) in row.iter().enumerate() {
                    acc += lrc * x[b.offset + c];
                }
                y[b.offset + r] = acc;
            }
        }
    }

    /// y = L^T x
    fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        for b in &self.blocks {
            for c in 0..b.size {
                let mut acc = 0.0;
                for r in c..b.size {
                    acc += b.l[r * b.size + c] * x[b.offset + r];
                }
                y[b.offset + c] = acc;
            }
        }
    }

    /// Solve L y = x by forward substitution.
    fn solve_lower(&self, x: &[f64], y: &mut [f64]) {
        for b in &self.blocks {
            for r in 0..b.size {
                let mut acc = x[b.offset + r];
                for c in 0..r {
                    acc -= b.l[r * b.size + c] * y[b.offset + c];
                }
                y[b.offset + r] = acc / b.l[r * b.size + r];
            }
        }
    }
}

/// The assembled model: frozen data plus precomputed structures.
pub struct BayesModel {
    spec: ModelSpec,
    layout: ParameterLayout,
    /// n x j row-major allele doses.
    doses: Vec<f64>,
    /// Observed exposure (NaN where missing).
    x_obs: Vec<f64>,
    /// Per individual, the slot into the x_miss block, if missing.
    miss_slot: Vec<Option<usize>>,
    y: Vec<f64>,
    family: Vec<usize>,
    chol: BlockCholesky,
}

impl BayesModel {
    pub fn new(spec: ModelSpec, ds: &Dataset, kinship: &KinshipMatrix) -> Result<BayesModel> {
        spec.validate()?;
        if ds.n() != spec.n_individuals
            || ds.n_variants() != spec.n_instruments
            || ds.n_families != spec.n_families
            || ds.n_missing() != spec.n_missing
        {
            return Err(Error::Model(format!(
                "spec dimensions (N={}, J={}, M={}, miss={}) do not match dataset (N={}, J={}, M={}, miss={})",
                spec.n_individuals,
                spec.n_instruments,
                spec.n_families,
                spec.n_missing,
                ds.n(),
                ds.n_variants(),
                ds.n_families,
                ds.n_missing()
            )));
        }
        if kinship.n() != ds.n() {
            return Err(Error::Model("kinship order does not match dataset".into()));
        }
        if ds.ids != kinship.order() {
            return Err(Error::Model("kinship ids do not match dataset ids".into()));
        }

        let factor = match spec.kinship_scale {
            KinshipScale::Coefficient => 1.0,
            KinshipScale::Numerator => 2.0,
        };
        let chol = factor_blockwise(kinship, &ds.family, factor, spec.cholesky_jitter)?;

        let mut miss_slot = vec![None; ds.n()];
        for (slot, &i) in ds.missing_indices().iter().enumerate() {
            miss_slot[i] = Some(slot);
        }

        Ok(BayesModel {
            layout: ParameterLayout::of(&spec),
            spec,
            doses: ds.doses.clone(),
            x_obs: ds.exposure.clone(),
            miss_slot,
            y: ds.outcome.iter().map(|&v| v as f64).collect(),
            family: ds.family.clone(),
            chol,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    /// Jitter that the kinship factorization actually needed.
    pub fn cholesky_jitter_used(&self) -> f64 {
        self.chol.jitter_used
    }

    /// Log posterior with exact gradient. Errors on dimension mismatch
    /// or a NaN density (reporting the first offending term); returns
    /// -inf values as ordinary results since the sampler treats them as
    /// rejections.
    pub fn log_posterior(&self, position: &[f64]) -> Result<LogDensityResult> {
        if position.len() != self.layout.dim() {
            return Err(Error::Model(format!(
                "parameter vector has length {}, expected {}",
                position.len(),
                self.layout.dim()
            )));
        }
        let mut gradient = vec![0.0; position.len()];
        let terms = self.accumulate(position, Some(&mut gradient));
        let value = terms.total();
        if value.is_nan() {
            let offender = terms.first_non_finite().unwrap_or("unknown");
            return Err(Error::Model(format!(
                "non-finite log density; first offending term: {offender}"
            )));
        }
        Ok(LogDensityResult { value, gradient })
    }

    /// Term-by-term breakdown without gradients.
    pub fn log_density_terms(&self, position: &[f64]) -> DensityTerms {
        self.accumulate(position, None)
    }

    /// Liability vector eta at a parameter point (for tests and
    /// diagnostics).
    pub fn liability(&self, position: &[f64]) -> Vec<f64> {
        let lay = &self.layout;
        let s = self.spec.liability_scale;
        let eta_raw = &position[lay.eta_raw()];
        let mut v = vec![0.0; self.y.len()];
        self.chol.matvec(eta_raw, &mut v);
        let mut eta = vec![0.0; self.y.len()];
        for i in 0..self.y.len() {
            eta[i] = self.mu_i(position, i) + s * v[i];
        }
        eta
    }

    /// Transform liability innovations so that a permuted model yields
    /// the permuted liability: eta_raw' = L'^-1 P L eta_raw. Used by the
    /// permutation-invariance tests.
    pub fn transport_eta_raw(&self, other: &BayesModel, perm: &[usize], eta_raw: &[f64]) -> Vec<f64> {
        let n = eta_raw.len();
        let mut v = vec![0.0; n];
        self.chol.matvec(eta_raw, &mut v);
        let mut pv = vec![0.0; n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            pv[new_i] = v[old_i];
        }
        let mut out = vec![0.0; n];
        other.chol.solve_lower(&pv, &mut out);
        out
    }

    /// Pleiotropy effects implied by the scores and the horseshoe
    /// scales at a parameter point: beta_j = beta_z_j * sqrt(v_j).
    pub fn derived_beta(&self, position: &[f64]) -> Vec<f64> {
        let lay = &self.layout;
        let v = self.horseshoe_effective_variance(position);
        position[lay.beta_z()]
            .iter()
            .zip(v)
            .map(|(&z, vj)| z * vj.sqrt())
            .collect()
    }

    fn mu_i(&self, position: &[f64], i: usize) -> f64 {
        let lay = &self.layout;
        let j = lay.n_instruments;
        let theta = position[lay.theta()];
        let beta = self.derived_beta(position);
        let u = &position[lay.u()];
        let gamma_y = &position[lay.gamma_y()];
        let omega_y = position[lay.omega_y()];
        let x_i = self.exposure_value(position, i);
        let mut dot = 0.0;
        for (jj, b) in beta.iter().enumerate() {
            dot += b * self.doses[i * j + jj];
        }
        omega_y + theta * x_i + dot + u[i] + gamma_y[self.family[i]]
    }

    fn exposure_value(&self, position: &[f64], i: usize) -> f64 {
        match self.miss_slot[i] {
            Some(slot) => position[self.layout.x_miss()][slot],
            None => self.x_obs[i],
        }
    }

    /// One pass over data and priors accumulating term values and,
    /// optionally, the gradient.
    fn accumulate(&self, position: &[f64], mut gradient: Option<&mut [f64]>) -> DensityTerms {
        let lay = &self.layout;
        let n = lay.n_individuals;
        let j = lay.n_instruments;
        let pr = &self.spec.priors;
        let s = self.spec.liability_scale;

        let theta = position[lay.theta()];
        let alpha = &position[lay.alpha()];
        let beta_z = &position[lay.beta_z()];
        let log_lambda = &position[lay.log_lambda()];
        let log_tau = position[lay.log_tau()];
        let log_c2 = position[lay.log_c2()];
        let log_b_alpha = position[lay.log_b_alpha()];
        let delta_x = position[lay.delta_x()];
        let log_sigma_x = position[lay.log_sigma_x()];
        let omega_y = position[lay.omega_y()];
        let gamma_x = &position[lay.gamma_x()];
        let gamma_y = &position[lay.gamma_y()];
        let u = &position[lay.u()];
        let eta_raw = &position[lay.eta_raw()];

        let sigma_x = log_sigma_x.exp();
        let inv_var_x = 1.0 / (sigma_x * sigma_x);
        let tau = log_tau.exp();
        let c2 = log_c2.exp();
        let b_alpha = log_b_alpha.exp();

        // derived pleiotropy effects beta_j = beta_z_j * sqrt(v_j) with
        // v_j = c2 tau^2 lambda_j^2 / (c2 + tau^2 lambda_j^2)
        let tau2 = tau * tau;
        let mut beta = vec![0.0; j];
        let mut hs_scale = vec![0.0; j]; // sqrt(v_j)
        let mut hs_cfrac = vec![0.0; j]; // c2 / (c2 + tau^2 lambda^2)
        let mut hs_tfrac = vec![0.0; j]; // tau^2 lambda^2 / (c2 + ...)
        for jj in 0..j {
            let l2 = (2.0 * log_lambda[jj]).exp();
            let tl = tau2 * l2;
            let v = c2 * tl / (c2 + tl);
            hs_scale[jj] = v.sqrt();
            hs_cfrac[jj] = c2 / (c2 + tl);
            hs_tfrac[jj] = tl / (c2 + tl);
            beta[jj] = beta_z[jj] * hs_scale[jj];
        }

        // --- (a) confounder prior ---
        let mut t_u = 0.0;
        for i in 0..n {
            t_u += -0.5 * u[i] * u[i];
        }
        t_u -= 0.5 * n as f64 * LN_2PI;
        if let Some(g) = gradient.as_deref_mut() {
            let gu = &mut g[lay.u()];
            for i in 0..n {
                gu[i] -= u[i];
            }
        }

        // --- (b) exposure model (observed and missing alike) ---
        let mut t_x = -(n as f64) * (0.5 * LN_2PI + log_sigma_x);
        let mut sum_r2 = 0.0;
        for i in 0..n {
            let x_i = self.exposure_value(position, i);
            let mut nu = delta_x * u[i] + gamma_x[self.family[i]];
            let row = &self.doses[i * j..(i + 1) * j];
            for (jj, a) in alpha.iter().enumerate() {
                nu += a * row[jj];
            }
            let r = x_i - nu;
            sum_r2 += r * r;
            if let Some(g) = gradient.as_deref_mut() {
                let r_w = r * inv_var_x;
                for (jj, d) in row.iter().enumerate() {
                    g[lay.alpha()][jj] += r_w * d;
                }
                g[lay.delta_x()] += r_w * u[i];
                g[lay.gamma_x()][self.family[i]] += r_w;
                g[lay.u()][i] += r_w * delta_x;
                if let Some(slot) = self.miss_slot[i] {
                    g[lay.x_miss()][slot] -= r_w;
                }
            }
        }
        t_x -= 0.5 * sum_r2 * inv_var_x;
        if let Some(g) = gradient.as_deref_mut() {
            g[lay.log_sigma_x()] += -(n as f64) + sum_r2 * inv_var_x;
        }

        // --- (c) liability innovations ---
        let mut t_eta = 0.0;
        for i in 0..n {
            t_eta += -0.5 * eta_raw[i] * eta_raw[i];
        }
        t_eta -= 0.5 * n as f64 * LN_2PI;
        if let Some(g) = gradient.as_deref_mut() {
            let ge = &mut g[lay.eta_raw()];
            for i in 0..n {
                ge[i] -= eta_raw[i];
            }
        }

        // --- (d)+(e) kinship-correlated liability and outcome ---
        let mut lv = vec![0.0; n];
        self.chol.matvec(eta_raw, &mut lv);
        let mut t_y = 0.0;
        let mut g_resid = vec![0.0; n];
        let mut g_dose = vec![0.0; j]; // sum_i g_i Z_ij
        for i in 0..n {
            let x_i = self.exposure_value(position, i);
            let mut mu = omega_y + theta * x_i + u[i] + gamma_y[self.family[i]];
            let row = &self.doses[i * j..(i + 1) * j];
            for (jj, b) in beta.iter().enumerate() {
                mu += b * row[jj];
            }
            let eta = mu + s * lv[i];
            t_y += self.y[i] * eta - softplus(eta);
            let gi = self.y[i] - sigmoid(eta);
            g_resid[i] = gi;
            if let Some(g) = gradient.as_deref_mut() {
                g[lay.omega_y()] += gi;
                g[lay.theta()] += gi * x_i;
                for (jj, d) in row.iter().enumerate() {
                    g_dose[jj] += gi * d;
                }
                g[lay.u()][i] += gi;
                g[lay.gamma_y()][self.family[i]] += gi;
                if let Some(slot) = self.miss_slot[i] {
                    g[lay.x_miss()][slot] += gi * theta;
                }
            }
        }
        if let Some(g) = gradient.as_deref_mut() {
            let mut lt_g = vec![0.0; n];
            self.chol.matvec_transpose(&g_resid, &mut lt_g);
            let ge = &mut g[lay.eta_raw()];
            for i in 0..n {
                ge[i] += s * lt_g[i];
            }
            // back-propagate the dose sums through beta = z * sqrt(v)
            for jj in 0..j {
                let gb = g_dose[jj];
                g[lay.beta_z()][jj] += gb * hs_scale[jj];
                g[lay.log_lambda()][jj] += gb * beta[jj] * hs_cfrac[jj];
                g[lay.log_tau()] += gb * beta[jj] * hs_cfrac[jj];
                g[lay.log_c2()] += gb * beta[jj] * 0.5 * hs_tfrac[jj];
            }
        }

        // --- priors ---
        // theta ~ Cauchy(0, theta_scale)
        let a = pr.theta_scale;
        let t_theta = -(std::f64::consts::PI * a).ln() - (1.0 + (theta / a).powi(2)).ln();
        if let Some(g) = gradient.as_deref_mut() {
            g[lay.theta()] += -2.0 * theta / (a * a + theta * theta);
        }

        // alpha_j ~ double-exponential(0, b_alpha)
        let mut sum_abs_alpha = 0.0;
        if let Some(g) = gradient.as_deref_mut() {
            for (jj, &aj) in alpha.iter().enumerate() {
                sum_abs_alpha += aj.abs();
                g[lay.alpha()][jj] += -aj.signum() / b_alpha;
            }
        } else {
            sum_abs_alpha = alpha.iter().map(|v| v.abs()).sum();
        }
        let t_alpha = -(j as f64) * (2.0 * b_alpha).ln() - sum_abs_alpha / b_alpha;

        // b_alpha ~ half-Cauchy(0, alpha_scale_prior), log transform.
        // d/d(log b) of the alpha block is -J + sum|alpha|/b; the prior
        // plus Jacobian adds -2b^2/(sb^2+b^2) + 1.
        let sb = pr.alpha_scale_prior;
        let t_b_alpha = half_cauchy_lpdf(b_alpha, sb) + log_b_alpha;
        if let Some(g) = gradient.as_deref_mut() {
            g[lay.log_b_alpha()] += -(j as f64) + sum_abs_alpha / b_alpha
                - 2.0 * b_alpha * b_alpha / (sb * sb + b_alpha * b_alpha)
                + 1.0;
        }

        // pleiotropy scores ~ N(0, 1); the horseshoe scale enters the
        // likelihood through the derived beta instead
        let mut t_beta = -0.5 * (j as f64) * LN_2PI;
        let mut t_lambda = 0.0;
        for jj in 0..j {
            let z = beta_z[jj];
            t_beta += -0.5 * z * z;
            let lambda = log_lambda[jj].exp();
            let l2 = lambda * lambda;
            // local half-Cauchy(0,1) plus Jacobian
            t_lambda += half_cauchy_lpdf(lambda, 1.0) + log_lambda[jj];
            if let Some(g) = gradient.as_deref_mut() {
                g[lay.beta_z()][jj] += -z;
                g[lay.log_lambda()][jj] += -2.0 * l2 / (1.0 + l2) + 1.0;
            }
        }

        // tau ~ half-Cauchy(0, tau0), log transform
        let tau0 = pr.horseshoe.global_scale;
        let t_tau = half_cauchy_lpdf(tau, tau0) + log_tau;
        if let Some(g) = gradient.as_deref_mut() {
            g[lay.log_tau()] += -2.0 * tau2 / (tau0 * tau0 + tau2) + 1.0;
        }

        // c2 ~ scaled inverse-chi-squared(nu, c_s^2), log transform
        let nu = pr.horseshoe.slab_df;
        let cs2 = pr.horseshoe.slab_scale * pr.horseshoe.slab_scale;
        let half_nu = 0.5 * nu;
        let t_c2 = half_nu * (half_nu).ln() - ln_gamma(half_nu) + half_nu * cs2.ln()
            - (1.0 + half_nu) * log_c2
            - half_nu * cs2 / c2
            + log_c2;
        if let Some(g) = gradient.as_deref_mut() {
            g[lay.log_c2()] += -(1.0 + half_nu) + half_nu * cs2 / c2 + 1.0;
        }

        // family effects ~ N(0, family_effect_scale^2)
        let fes = pr.family_effect_scale;
        let mut t_gamma = 0.0;
        for f in 0..lay.n_families {
            t_gamma += normal_lpdf(gamma_x[f], fes) + normal_lpdf(gamma_y[f], fes);
            if let Some(g) = gradient.as_deref_mut() {
                g[lay.gamma_x()][f] += -gamma_x[f] / (fes * fes);
                g[lay.gamma_y()][f] += -gamma_y[f] / (fes * fes);
            }
        }

        // sigma_x^2 ~ inverse-gamma(2, sigma_x_prior_scale^2 / 2), log
        // transform. The prior must vanish at zero: with a per-individual
        // confounder in the exposure mean, a zero-permitting prior leaves
        // an integrable density spike at sigma_x -> 0 (the latent scores
        // interpolate the observed exposures exactly) that traps the
        // sampler in a Heywood-type collapse.
        let ss = pr.sigma_x_prior_scale;
        let ig_shape = 2.0;
        let ig_rate = 0.5 * ss * ss;
        let var_x = sigma_x * sigma_x;
        let t_sigma_x = ig_shape * ig_rate.ln() - ln_gamma(ig_shape)
            - (ig_shape + 1.0) * var_x.ln()
            - ig_rate / var_x
            + (2.0 * var_x).ln();
        if let Some(g) = gradient.as_deref_mut() {
            g[lay.log_sigma_x()] += -2.0 * (ig_shape + 1.0) + 2.0 * ig_rate / var_x + 2.0;
        }

        // delta_x ~ N(0, delta_x_prior_scale^2), omega_y ~ N(0, omega_y_prior_scale^2)
        let t_delta = normal_lpdf(delta_x, pr.delta_x_prior_scale);
        let t_omega = normal_lpdf(omega_y, pr.omega_y_prior_scale);
        if let Some(g) = gradient.as_deref_mut() {
            g[lay.delta_x()] += -delta_x / (pr.delta_x_prior_scale * pr.delta_x_prior_scale);
            g[lay.omega_y()] += -omega_y / (pr.omega_y_prior_scale * pr.omega_y_prior_scale);
        }

        DensityTerms {
            terms: vec![
                ("u_prior", t_u),
                ("exposure_model", t_x),
                ("liability_innovations", t_eta),
                ("outcome_likelihood", t_y),
                ("theta_prior", t_theta),
                ("alpha_prior", t_alpha),
                ("alpha_scale_prior", t_b_alpha),
                ("pleiotropy_scores_prior", t_beta),
                ("horseshoe_local_prior", t_lambda),
                ("horseshoe_global_prior", t_tau),
                ("horseshoe_slab_prior", t_c2),
                ("family_effects_prior", t_gamma),
                ("exposure_scale_prior", t_sigma_x),
                ("delta_x_prior", t_delta),
                ("omega_y_prior", t_omega),
            ],
        }
    }

    /// Effective horseshoe variance of each beta_j at a parameter point.
    pub fn horseshoe_effective_variance(&self, position: &[f64]) -> Vec<f64> {
        let lay = &self.layout;
        let tau2 = (2.0 * position[lay.log_tau()]).exp();
        let c2 = position[lay.log_c2()].exp();
        position[lay.log_lambda()]
            .iter()
            .map(|&ll| {
                let l2 = (2.0 * ll).exp();
                c2 * tau2 * l2 / (c2 + tau2 * l2)
            })
            .collect()
    }
}

fn normal_lpdf(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - 0.5 * (x / sd) * (x / sd)
}

fn half_cauchy_lpdf(x: f64, scale: f64) -> f64 {
    // density 2/(pi scale (1 + (x/scale)^2)) on x > 0
    (2.0 / (std::f64::consts::PI * scale)).ln() - (1.0 + (x / scale).powi(2)).ln()
}

/// Factor the (scaled) kinship matrix block-by-block along contiguous
/// family runs. Falls back to one dense block when families interleave
/// or when cross-family entries are nonzero.
fn factor_blockwise(
    kinship: &KinshipMatrix,
    family: &[usize],
    scale: f64,
    start_jitter: f64,
) -> Result<BlockCholesky> {
    let n = kinship.n();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut contiguous = true;
    if n > 0 {
        let mut start = 0;
        for i in 1..=n {
            if i == n || family[i] != family[start] {
                runs.push((start, i - start));
                start = i;
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &(off, _) in &runs {
            if !seen.insert(family[off]) {
                contiguous = false;
                break;
            }
        }
        if contiguous {
            // verify cross-run entries are zero as the block structure assumes
            'outer: for (a, &(off_a, len_a)) in runs.iter().enumerate() {
                for &(off_b, len_b) in runs.iter().skip(a + 1) {
                    for i in off_a..off_a + len_a {
                        for jj in off_b..off_b + len_b {
                            if kinship.get(i, jj) != 0.0 {
                                contiguous = false;
                                break 'outer;
                            }
                        }
                    }
                }
            }
        }
    }
    if !contiguous {
        runs = vec![(0, n)];
    }

    let jitters = if start_jitter > 0.0 {
        vec![start_jitter, 1e-8, 1e-6]
    } else {
        vec![0.0, 1e-8, 1e-6]
    };
    let mut blocks = Vec::with_capacity(runs.len());
    let mut jitter_used = 0.0f64;
    for (off, len) in runs {
        let mut sub = vec![0.0; len * len];
        for r in 0..len {
            for c in 0..len {
                sub[r * len + c] = scale * kinship.get(off + r, off + c);
            }
        }
        let mut factored = None;
        for &jit in &jitters {
            match cholesky_dense(&sub, len, jit) {
                Ok(l) => {
                    factored = Some((l, jit));
                    break;
                }
                Err(_) => continue,
            }
        }
        let (l, jit) = factored.ok_or_else(|| {
            Error::Model(format!(
                "kinship block at offset {off} not positive definite even with jitter 1e-6"
            ))
        })?;
        jitter_used = jitter_used.max(jit);
        blocks.push(CholBlock { offset: off, size: len, l });
    }
    Ok(BlockCholesky { blocks, jitter_used })
}

/// Completed exposure vector: observed entries pass through, missing
/// entries are filled from the x_miss block in dataset order.
pub fn impute_missing(position: &[f64], layout: &ParameterLayout, ds: &Dataset) -> Vec<f64> {
    let x_miss = &position[layout.x_miss()];
    let mut out = Vec::with_capacity(ds.n());
    let mut slot = 0;
    for i in 0..ds.n() {
        if ds.missing[i] {
            out.push(x_miss[slot]);
            slot += 1;
        } else {
            out.push(ds.exposure[i]);
        }
    }
    out
}

/// Conditional causal odds ratio for an interventional shift of the
/// exposure from `x0` to `x1` (in sd units): exp(theta (x1 - x0)).
pub fn cor_from_theta(theta: f64, x0: f64, x1: f64) -> f64 {
    (theta * (x1 - x0)).exp()
}

/// Deterministic starting point: location parameters uniform on
/// (-0.5, 0.5), log-scale parameters at 0 (scale 1).
pub fn initial_point(spec: &ModelSpec, seed: u64) -> Vec<f64> {
    let layout = ParameterLayout::of(spec);
    let mut rng = crate::numeric::derive_rng(seed, 0x696e_6974);
    let mut p = vec![0.0; layout.dim()];
    let mut log_scale = vec![false; layout.dim()];
    for r in layout.log_lambda() {
        log_scale[r] = true;
    }
    log_scale[layout.log_tau()] = true;
    log_scale[layout.log_c2()] = true;
    log_scale[layout.log_b_alpha()] = true;
    log_scale[layout.log_sigma_x()] = true;
    for (k, v) in p.iter_mut().enumerate() {
        if !log_scale[k] {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

impl LogDensity for BayesModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let terms = self.accumulate(position, Some(grad));
        let v = terms.total();
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn coordinate_names(&self) -> Vec<String> {
        self.layout.coordinate_names()
    }

    fn initial_point(&self, seed: u64) -> Vec<f64> {
        initial_point(&self.spec, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::numeric::{derive_rng, finite_difference_gradient, softplus};
    use crate::pedigree::kinship;
    use crate::simulate::{simulate_scenario, MissingnessRule, ScenarioConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// Hand-built 2-individual, 1-instrument, 1-family dataset with the
    /// second exposure missing.
    fn toy_dataset() -> (Dataset, crate::pedigree::KinshipMatrix) {
        let ped = crate::pedigree::parse_pedigree(std::io::Cursor::new(
            "F1 A 0 0 1\nF1 B 0 0 2\n",
        ))
        .unwrap();
        let k = kinship(&ped).unwrap();
        let ds = Dataset {
            ids: vec!["A".into(), "B".into()],
            variants: vec![crate::data::VariantPos { id: "rs1".into(), chrom: "1".into(), pos: 100 }],
            doses: vec![1.0, 2.0],
            exposure: vec![0.3, f64::NAN],
            missing: vec![false, true],
            outcome: vec![0, 1],
            sex: None,
            family: vec![0, 0],
            n_families: 1,
            scaling: None,
        };
        (ds, k)
    }

    fn scenario_model(
        n_families: usize,
        n_instruments: usize,
        seed: u64,
        missingness: MissingnessRule,
    ) -> (BayesModel, Dataset, crate::pedigree::KinshipMatrix) {
        let mut rng = derive_rng(seed, 77);
        let cfg = ScenarioConfig {
            n_families,
            couples_per_family: 1,
            offspring_per_couple: 3,
            generations: 2,
            allele_freqs: (0..n_instruments).map(|_| rng.random_range(0.2..0.5)).collect(),
            alpha: (0..n_instruments).map(|_| rng.random_range(0.2..0.5)).collect(),
            beta: vec![0.0; n_instruments],
            theta: -0.5,
            delta_x: 0.5,
            sigma_x: 0.8,
            omega_y: -0.5,
            family_effect_sd_x: 0.3,
            family_effect_sd_y: 0.3,
            liability_scale: 1.0,
            kinship_scale: KinshipScale::Coefficient,
            missingness,
            seed,
        };
        let sc = simulate_scenario(&cfg).unwrap();
        let spec = ModelSpec::for_dataset(&sc.dataset);
        let model = BayesModel::new(spec, &sc.dataset, &sc.kinship).unwrap();
        (model, sc.dataset, sc.kinship)
    }

    /// Random parameter point kept away from the |alpha| kink where the
    /// double-exponential prior is not differentiable.
    fn random_point(layout: &ParameterLayout, seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, 99);
        let mut p: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-0.75..0.75)).collect();
        for k in layout.alpha() {
            while p[k].abs() < 1e-3 {
                p[k] = rng.random_range(-0.75..0.75);
            }
        }
        p
    }

    // Independent term-by-term oracle: every density re-derived from
    // scratch, no shared code with the implementation.
    mod oracle {
        pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

        pub fn normal(x: f64, mean: f64, sd: f64) -> f64 {
            -0.5 * LN_2PI - sd.ln() - 0.5 * ((x - mean) / sd).powi(2)
        }

        pub fn cauchy(x: f64, scale: f64) -> f64 {
            -(std::f64::consts::PI * scale).ln() - (1.0 + (x / scale).powi(2)).ln()
        }

        pub fn half_cauchy(x: f64, scale: f64) -> f64 {
            (2.0 / (std::f64::consts::PI * scale)).ln() - (1.0 + (x / scale).powi(2)).ln()
        }

        pub fn laplace(x: f64, rate: f64) -> f64 {
            -(2.0 * rate).ln() - x.abs() / rate
        }

        pub fn scaled_inv_chi2(x: f64, df: f64, scale2: f64) -> f64 {
            let h = 0.5 * df;
            h * h.ln() - crate::numeric::ln_gamma(h) + h * scale2.ln()
                - (1.0 + h) * x.ln()
                - h * scale2 / x
        }

        pub fn inv_gamma(x: f64, shape: f64, rate: f64) -> f64 {
            shape * rate.ln() - crate::numeric::ln_gamma(shape) - (shape + 1.0) * x.ln()
                - rate / x
        }
    }

    #[test]
    fn toy_density_matches_term_oracle() {
        let (ds, k) = toy_dataset();
        let spec = ModelSpec::for_dataset(&ds);
        let model = BayesModel::new(spec.clone(), &ds, &k).unwrap();
        let layout = ParameterLayout::of(&spec);
        assert_eq!(layout.dim(), 3 + 3 + 1 + 1 + 1 + 1 + 2 + 2 + 2 + 1);

        // evaluate both at the transform origin and at a generic point
        for (tag, point) in [
            ("origin", vec![0.0; layout.dim()]),
            ("generic", random_point(&layout, 5)),
        ] {
            let got = model.log_posterior(&point).unwrap().value;

            // unpack
            let theta = point[layout.theta()];
            let alpha = point[layout.alpha()][0];
            let beta_z = point[layout.beta_z()][0];
            let lambda = point[layout.log_lambda()][0].exp();
            let tau = point[layout.log_tau()].exp();
            let c2 = point[layout.log_c2()].exp();
            let b_alpha = point[layout.log_b_alpha()].exp();
            let delta_x = point[layout.delta_x()];
            let sigma_x = point[layout.log_sigma_x()].exp();
            let omega_y = point[layout.omega_y()];
            let gx = point[layout.gamma_x()][0];
            let gy = point[layout.gamma_y()][0];
            let u: Vec<f64> = point[layout.u()].to_vec();
            let eta_raw: Vec<f64> = point[layout.eta_raw()].to_vec();
            let x_miss = point[layout.x_miss()][0];

            let x = [0.3, x_miss];
            let z = [1.0, 2.0];
            let y = [0.0, 1.0];
            let v = c2 * tau * tau * lambda * lambda / (c2 + tau * tau * lambda * lambda);
            let beta = beta_z * v.sqrt();

            let mut want = 0.0;
            // confounder and innovation priors
            for i in 0..2 {
                want += oracle::normal(u[i], 0.0, 1.0);
                want += oracle::normal(eta_raw[i], 0.0, 1.0);
            }
            // exposure model
            for i in 0..2 {
                let nu = alpha * z[i] + delta_x * u[i] + gx;
                want += oracle::normal(x[i], nu, sigma_x);
            }
            // liability and outcome; founders: K = 0.5 I, L = sqrt(0.5) I
            let l = 0.5f64.sqrt();
            for i in 0..2 {
                let mu = omega_y + theta * x[i] + beta * z[i] + u[i] + gy;
                let eta = mu + 1.0 * l * eta_raw[i];
                want += y[i] * eta - softplus(eta);
            }
            // priors
            let pr = &spec.priors;
            want += oracle::cauchy(theta, pr.theta_scale);
            want += oracle::laplace(alpha, b_alpha);
            want += oracle::half_cauchy(b_alpha, pr.alpha_scale_prior) + b_alpha.ln();
            want += oracle::normal(beta_z, 0.0, 1.0);
            want += oracle::half_cauchy(lambda, 1.0) + lambda.ln();
            want += oracle::half_cauchy(tau, pr.horseshoe.global_scale) + tau.ln();
            want += oracle::scaled_inv_chi2(
                c2,
                pr.horseshoe.slab_df,
                pr.horseshoe.slab_scale * pr.horseshoe.slab_scale,
            ) + c2.ln();
            want += oracle::normal(gx, 0.0, pr.family_effect_scale);
            want += oracle::normal(gy, 0.0, pr.family_effect_scale);
            // variance-scale prior with the log-sigma Jacobian d(sigma^2)/d(log sigma)
            want += oracle::inv_gamma(
                sigma_x * sigma_x,
                2.0,
                0.5 * pr.sigma_x_prior_scale * pr.sigma_x_prior_scale,
            ) + (2.0 * sigma_x * sigma_x).ln();
            want += oracle::normal(delta_x, 0.0, pr.delta_x_prior_scale);
            want += oracle::normal(omega_y, 0.0, pr.omega_y_prior_scale);

            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
            assert!(got.is_finite(), "{tag}: non-finite density");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (model, _, _) = scenario_model(3, 5, 21, MissingnessRule::MissingInCases);
        let layout = *model.layout();
        let mut grad = vec![0.0; layout.dim()];
        for point_ix in 0..20 {
            let p = random_point(&layout, 1000 + point_ix);
            let value = model.logp_grad(&p, &mut grad);
            assert!(value.is_finite());
            let fd = finite_difference_gradient(
                |q| {
                    let mut scratch = vec![0.0; layout.dim()];
                    model.logp_grad(q, &mut scratch)
                },
                &p,
                1e-5,
            );
            for k in 0..layout.dim() {
                let rel = (grad[k] - fd[k]).abs() / (1.0 + fd[k].abs());
                assert!(
                    rel < 1e-5,
                    "point {point_ix}, coordinate {k} ({}): analytic {} vs fd {}",
                    layout.coordinate_names()[k],
                    grad[k],
                    fd[k]
                );
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let (model, ds, _) = scenario_model(2, 3, 33, MissingnessRule::MissingInCases);
        let layout = *model.layout();
        let n = ds.n();

        // reversal permutation: perm[new] = old
        let perm: Vec<usize> = (0..n).rev().collect();

        // permuted dataset
        let j = ds.n_variants();
        let mut doses = vec![0.0; n * j];
        for (new_i, &old_i) in perm.iter().enumerate() {
            doses[new_i * j..(new_i + 1) * j]
                .copy_from_slice(&ds.doses[old_i * j..(old_i + 1) * j]);
        }
        // family labels in new first-appearance order
        let mut fam_labels: Vec<usize> = Vec::new();
        let mut new_family = Vec::with_capacity(n);
        for &old_i in &perm {
            let old_f = ds.family[old_i];
            let nf = match fam_labels.iter().position(|&f| f == old_f) {
                Some(ix) => ix,
                None => {
                    fam_labels.push(old_f);
                    fam_labels.len() - 1
                }
            };
            new_family.push(nf);
        }
        let permuted = Dataset {
            ids: perm.iter().map(|&i| ds.ids[i].clone()).collect(),
            variants: ds.variants.clone(),
            doses,
            exposure: perm.iter().map(|&i| ds.exposure[i]).collect(),
            missing: perm.iter().map(|&i| ds.missing[i]).collect(),
            outcome: perm.iter().map(|&i| ds.outcome[i]).collect(),
            sex: None,
            family: new_family,
            n_families: ds.n_families,
            scaling: ds.scaling,
        };
        let (_, _, base_kin) = scenario_model(2, 3, 33, MissingnessRule::MissingInCases);
        let perm_kin = permute_kinship(&base_kin, &perm);
        let spec = ModelSpec::for_dataset(&permuted);
        let permuted_model = BayesModel::new(spec, &permuted, &perm_kin).unwrap();

        let p = random_point(&layout, 7);
        let mut q = vec![0.0; layout.dim()];
        // scalar blocks unchanged
        q[layout.theta()] = p[layout.theta()];
        q[layout.alpha()].copy_from_slice(&p[layout.alpha()]);
        q[layout.beta_z()].copy_from_slice(&p[layout.beta_z()]);
        q[layout.log_lambda()].copy_from_slice(&p[layout.log_lambda()]);
        q[layout.log_tau()] = p[layout.log_tau()];
        q[layout.log_c2()] = p[layout.log_c2()];
        q[layout.log_b_alpha()] = p[layout.log_b_alpha()];
        q[layout.delta_x()] = p[layout.delta_x()];
        q[layout.log_sigma_x()] = p[layout.log_sigma_x()];
        q[layout.omega_y()] = p[layout.omega_y()];
        // family effects re-indexed
        for (new_f, &old_f) in fam_labels.iter().enumerate() {
            q[layout.gamma_x()][new_f] = p[layout.gamma_x()][old_f];
            q[layout.gamma_y()][new_f] = p[layout.gamma_y()][old_f];
        }
        // per-individual blocks permuted
        for (new_i, &old_i) in perm.iter().enumerate() {
            q[layout.u()][new_i] = p[layout.u()][old_i];
        }
        // missing-exposure slots follow dataset order
        let old_missing: Vec<usize> = ds.missing_indices();
        let new_missing: Vec<usize> = permuted.missing_indices();
        for (new_slot, &new_i) in new_missing.iter().enumerate() {
            let old_i = perm[new_i];
            let old_slot = old_missing.iter().position(|&x| x == old_i).unwrap();
            q[layout.x_miss()][new_slot] = p[layout.x_miss()][old_slot];
        }
        // liability innovations transported through the Cholesky factors
        let transported =
            model.transport_eta_raw(&permuted_model, &perm, &p[layout.eta_raw()]);
        q[layout.eta_raw()].copy_from_slice(&transported);

        let a = model.log_posterior(&p).unwrap().value;
        let b = permuted_model.log_posterior(&q).unwrap().value;
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }

    fn permute_kinship(
        k: &crate::pedigree::KinshipMatrix,
        perm: &[usize],
    ) -> crate::pedigree::KinshipMatrix {
        crate::pedigree::KinshipMatrix::from_parts(
            perm.iter().map(|&i| k.order()[i].clone()).collect(),
            {
                let n = k.n();
                let mut v = vec![0.0; n * n];
                for (a, &i) in perm.iter().enumerate() {
                    for (b, &jj) in perm.iter().enumerate() {
                        v[a * n + b] = k.get(i, jj);
                    }
                }
                v
            },
        )
    }

    #[test]
    fn identity_kinship_factorizes_per_individual() {
        // founders in distinct families with the numerator scale: 2K = I,
        // so the liability term must equal a product of independent
        // per-individual contributions.
        let n = 6;
        let ped_text: String = (0..n).map(|i| format!("F{i} I{i} 0 0 1\n")).collect();
        let ped = crate::pedigree::parse_pedigree(std::io::Cursor::new(ped_text)).unwrap();
        let k = kinship(&ped).unwrap();
        let ds = Dataset {
            ids: ped.members().iter().map(|m| m.id.clone()).collect(),
            variants: vec![crate::data::VariantPos { id: "rs1".into(), chrom: "1".into(), pos: 5 }],
            doses: (0..n).map(|i| (i % 3) as f64).collect(),
            exposure: (0..n).map(|i| (i as f64 - 2.0) / 2.0).collect(),
            missing: vec![false; n],
            outcome: (0..n).map(|i| (i % 2) as u8).collect(),
            sex: None,
            family: (0..n).collect(),
            n_families: n,
            scaling: None,
        };
        let mut spec = ModelSpec::for_dataset(&ds);
        spec.kinship_scale = KinshipScale::Numerator;
        spec.liability_scale = 1.0;
        let model = BayesModel::new(spec, &ds, &k).unwrap();
        let layout = *model.layout();
        let p = random_point(&layout, 12);

        let terms = model.log_density_terms(&p);
        let y_term = terms.get("outcome_likelihood").unwrap();

        // independent per-individual oracle
        let theta = p[layout.theta()];
        let lambda2 = (2.0 * p[layout.log_lambda()][0]).exp();
        let tau2 = (2.0 * p[layout.log_tau()]).exp();
        let c2 = p[layout.log_c2()].exp();
        let beta =
            p[layout.beta_z()][0] * (c2 * tau2 * lambda2 / (c2 + tau2 * lambda2)).sqrt();
        let omega_y = p[layout.omega_y()];
        let mut want = 0.0;
        for i in 0..n {
            let mu = omega_y
                + theta * ds.exposure[i]
                + beta * ds.doses[i]
                + p[layout.u()][i]
                + p[layout.gamma_y()][i];
            let eta = mu + p[layout.eta_raw()][i];
            want += ds.outcome[i] as f64 * eta - softplus(eta);
        }
        assert_abs_diff_eq!(y_term, want, epsilon = 1e-10);
    }

    #[test]
    fn exclusion_restriction_mechanical() {
        // with beta = 0 and alpha_k = 0, changing the unused Z column
        // leaves the outcome likelihood unchanged
        let (model_a, ds, k) = scenario_model(2, 3, 44, MissingnessRule::None);
        let mut altered = ds.clone();
        for i in 0..ds.n() {
            // rewrite column 2 arbitrarily
            altered.doses[i * 3 + 2] = ((i * 7) % 3) as f64;
        }
        let spec = ModelSpec::for_dataset(&altered);
        let model_b = BayesModel::new(spec, &altered, &k).unwrap();

        let layout = *model_a.layout();
        let mut p = random_point(&layout, 3);
        for kk in layout.beta_z() {
            p[kk] = 0.0;
        }
        p[layout.alpha()][2] = 0.0;

        let ta = model_a.log_density_terms(&p);
        let tb = model_b.log_density_terms(&p);
        assert_abs_diff_eq!(
            ta.get("outcome_likelihood").unwrap(),
            tb.get("outcome_likelihood").unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            ta.get("exposure_model").unwrap(),
            tb.get("exposure_model").unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn horseshoe_effective_scale_bounds() {
        let (model, _, _) = scenario_model(2, 4, 55, MissingnessRule::None);
        let layout = *model.layout();
        let mut rng = derive_rng(3, 3);
        for _ in 0..200 {
            let mut p = vec![0.0; layout.dim()];
            for v in p.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
            let v = model.horseshoe_effective_variance(&p);
            let tau2 = (2.0 * p[layout.log_tau()]).exp();
            let c2 = p[layout.log_c2()].exp();
            for (jj, &vj) in v.iter().enumerate() {
                let l2 = (2.0 * p[layout.log_lambda()][jj]).exp();
                assert!(vj <= c2 * (1.0 + 1e-12), "slab bound violated");
                assert!(vj <= tau2 * l2 * (1.0 + 1e-12), "local bound violated");
                // monotone in lambda
                let bigger = c2 * tau2 * (l2 * 4.0) / (c2 + tau2 * (l2 * 4.0));
                assert!(bigger >= vj - 1e-12);
            }
        }
    }

    #[test]
    fn impute_missing_fills_slots() {
        let (ds, k) = toy_dataset();
        let spec = ModelSpec::for_dataset(&ds);
        let model = BayesModel::new(spec, &ds, &k).unwrap();
        let layout = *model.layout();
        let mut p = vec![0.0; layout.dim()];
        p[layout.x_miss()][0] = 0.7;
        let full = impute_missing(&p, &layout, &ds);
        assert_eq!(full, vec![0.3, 0.7]);

        // no missing entries: identity
        let mut ds2 = ds.clone();
        ds2.missing = vec![false, false];
        ds2.exposure = vec![0.3, 0.4];
        let spec2 = ModelSpec::for_dataset(&ds2);
        let layout2 = ParameterLayout::of(&spec2);
        let p2 = vec![0.0; layout2.dim()];
        assert_eq!(impute_missing(&p2, &layout2, &ds2), vec![0.3, 0.4]);

        // all missing: vector equals x_miss
        let mut ds3 = ds.clone();
        ds3.missing = vec![true, true];
        ds3.exposure = vec![f64::NAN, f64::NAN];
        let spec3 = ModelSpec::for_dataset(&ds3);
        let layout3 = ParameterLayout::of(&spec3);
        let mut p3 = vec![0.0; layout3.dim()];
        p3[layout3.x_miss()][0] = 1.5;
        p3[layout3.x_miss()][1] = -2.5;
        assert_eq!(impute_missing(&p3, &layout3, &ds3), vec![1.5, -2.5]);
    }

    #[test]
    fn causal_odds_ratio() {
        assert_eq!(cor_from_theta(0.0, 1.0, 3.0), 1.0);
        // posterior-median value reported for a one-sd shift
        assert!((cor_from_theta(-2.12, 0.0, 1.0) - 0.12).abs() < 0.005);
        assert_abs_diff_eq!(
            cor_from_theta(0.5, 0.0, 2.0),
            std::f64::consts::E,
            epsilon = 1e-12
        );
    }

    #[test]
    fn initial_point_deterministic_and_finite() {
        let (model, ds, k) = scenario_model(3, 4, 66, MissingnessRule::MissingInCases);
        let spec = ModelSpec::for_dataset(&ds);
        let _ = k;
        let a = initial_point(&spec, 1);
        let b = initial_point(&spec, 1);
        let c = initial_point(&spec, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let layout = ParameterLayout::of(&spec);
        // log-scale coordinates start at zero
        assert_eq!(a[layout.log_tau()], 0.0);
        assert_eq!(a[layout.log_sigma_x()], 0.0);
        for kk in layout.log_lambda() {
            assert_eq!(a[kk], 0.0);
        }
        // location coordinates inside (-0.5, 0.5)
        assert!(a[layout.theta()].abs() < 0.5);
        let v = model.log_posterior(&a).unwrap().value;
        assert!(v.is_finite());
    }

    #[test]
    fn zero_instruments_still_finite() {
        let (ds, k) = toy_dataset();
        let mut ds = ds;
        ds.variants.clear();
        ds.doses.clear();
        let spec = ModelSpec::for_dataset(&ds);
        let model = BayesModel::new(spec.clone(), &ds, &k).unwrap();
        let layout = ParameterLayout::of(&spec);
        assert_eq!(layout.n_instruments, 0);
        let p = random_point(&layout, 9);
        let res = model.log_posterior(&p).unwrap();
        assert!(res.value.is_finite());
        assert!(res.gradient.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let (ds, k) = toy_dataset();
        let spec = ModelSpec::for_dataset(&ds);
        let model = BayesModel::new(spec, &ds, &k).unwrap();
        let err = model.log_posterior(&[0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("length"), "{err}");
    }

    #[test]
    fn coordinate_names_align_with_layout() {
        let layout = ParameterLayout {
            n_instruments: 2,
            n_families: 2,
            n_individuals: 3,
            n_missing: 1,
        };
        let names = layout.coordinate_names();
        assert_eq!(names.len(), layout.dim());
        assert_eq!(names[layout.theta()], "theta");
        assert_eq!(names[layout.log_tau()], "log_tau");
        assert_eq!(names[layout.u().start], "u[1]");
        assert_eq!(names[layout.x_miss().start], "x_miss[1]");
        assert_eq!(names[layout.alpha().start], "alpha[1]");
    }
}
