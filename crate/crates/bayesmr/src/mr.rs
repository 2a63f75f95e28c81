//! Frequentist Mendelian-randomization estimators over per-instrument
//! summary statistics, and the second-stage logistic regressions that
//! produce the instrument-outcome effects.
//!
//! Estimates are log odds ratios of disease per standard deviation of
//! exposure. The battery mirrors the conventional eleven-method table:
//! simple/weighted/penalized-weighted median, IVW in four variants and
//! MR-Egger in four variants.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{chi2_1_upper_tail, derive_rng, normal_two_sided_p, sigmoid};

/// Per-instrument summary statistics: instrument-exposure effect and
/// instrument-outcome log-odds effect, each with a standard error.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SummaryStats {
    pub instrument_ids: Vec<String>,
    pub phi: Vec<f64>,
    pub se_phi: Vec<f64>,
    pub gamma: Vec<f64>,
    pub se_gamma: Vec<f64>,
}

impl SummaryStats {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.phi.len();
        if self.se_phi.len() != n || self.gamma.len() != n || self.se_gamma.len() != n {
            return Err(Error::Mr("summary statistic vectors not aligned".into()));
        }
        if self.se_phi.iter().chain(&self.se_gamma).any(|&s| s <= 0.0) {
            return Err(Error::Mr("standard errors must be positive".into()));
        }
        Ok(())
    }

    /// Drop instruments by id (manual outlier exclusion).
    pub fn excluding(&self, drop: &[String]) -> SummaryStats {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&j| !drop.contains(&self.instrument_ids[j]))
            .collect();
        SummaryStats {
            instrument_ids: keep.iter().map(|&j| self.instrument_ids[j].clone()).collect(),
            phi: keep.iter().map(|&j| self.phi[j]).collect(),
            se_phi: keep.iter().map(|&j| self.se_phi[j]).collect(),
            gamma: keep.iter().map(|&j| self.gamma[j]).collect(),
            se_gamma: keep.iter().map(|&j| self.se_gamma[j]).collect(),
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EstimateRecord {
    pub method: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
}

impl EstimateRecord {
    fn from_wald(method: &str, estimate: f64, se: f64) -> EstimateRecord {
        let z = 1.959_963_984_540_054; // Phi^-1(0.975)
        EstimateRecord {
            method: method.to_string(),
            estimate,
            std_error: se,
            ci_lower: estimate - z * se,
            ci_upper: estimate + z * se,
            p_value: normal_two_sided_p(estimate / se),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvwMode {
    Fixed,
    Penalized,
    Robust,
    PenalizedRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EggerMode {
    Plain,
    Penalized,
    Robust,
    PenalizedRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MedianMode {
    Simple,
    Weighted,
    PenalizedWeighted,
}

/// Huber IRLS tuning constant (95% efficiency at the normal).
const HUBER_K: f64 = 1.345;
const IRLS_MAX_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-10;

/// Weighted regression of `gamma` on `phi` through the origin.
/// Returns (estimate, fixed-effect se, per-instrument fitted residuals).
fn wls_origin(phi: &[f64], gamma: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let sxx: f64 = phi.iter().zip(w).map(|(&p, &wj)| wj * p * p).sum();
    let sxy: f64 = phi
        .iter()
        .zip(gamma)
        .zip(w)
        .map(|((&p, &g), &wj)| wj * p * g)
        .sum();
    if sxx <= 0.0 {
        return Err(Error::Mr("all weights zero or all phi zero".into()));
    }
    Ok((sxy / sxx, 1.0 / sxx.sqrt()))
}

/// Residual scale factor max(1, sqrt(sum w r^2 / df)); the multiplicative
/// random-effects correction applied to fixed-effect standard errors.
fn overdispersion_factor(resid: &[f64], w: &[f64], df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let q: f64 = resid.iter().zip(w).map(|(&r, &wj)| wj * r * r).sum();
    (q / df as f64).sqrt().max(1.0)
}

/// Multiply weights by the chi-squared(1) upper-tail probability of each
/// instrument's heterogeneity contribution, capped at 1 (one iteration).
fn penalize_weights(w: &[f64], resid: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(resid)
        .map(|(&wj, &r)| {
            let q = wj * r * r;
            wj * chi2_1_upper_tail(q).min(1.0)
        })
        .collect()
}

/// Huber weights for standardized residuals. `base_w` are the
/// inverse-variance weights; the robust weight multiplies them.
fn huber_weights(resid: &[f64], base_w: &[f64]) -> Vec<f64> {
    // Scale from the median absolute standardized residual.
    let mut std_resid: Vec<f64> = resid
        .iter()
        .zip(base_w)
        .map(|(&r, &wj)| (r * wj.sqrt()).abs())
        .collect();
    std_resid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = crate::numeric::percentile_sorted(&std_resid, 0.5) / 0.674_489_750_196_081_7;
    if mad <= 0.0 {
        return base_w.to_vec();
    }
    resid
        .iter()
        .zip(base_w)
        .map(|(&r, &wj)| {
            let u = (r * wj.sqrt() / mad).abs();
            let h = if u <= HUBER_K { 1.0 } else { HUBER_K / u };
            wj * h
        })
        .collect()
}

fn base_weights(s: &SummaryStats) -> Vec<f64> {
    s.se_gamma.iter().map(|&se| 1.0 / (se * se)).collect()
}

/// Inverse-variance weighted estimator: weighted regression of the
/// instrument-outcome effects on the instrument-exposure effects through
/// the origin, weights 1/se(gamma)^2.
pub fn ivw(s: &SummaryStats, mode: IvwMode) -> Result<EstimateRecord> {
    s.validate()?;
    if s.is_empty() {
        return Err(Error::Mr("ivw needs at least one instrument".into()));
    }
    let mut w = base_weights(s);
    let (est0, _) = wls_origin(&s.phi, &s.gamma, &w)?;
    let resid0: Vec<f64> = s
        .gamma
        .iter()
        .zip(&s.phi)
        .map(|(&g, &p)| g - est0 * p)
        .collect();

    if matches!(mode, IvwMode::Penalized | IvwMode::PenalizedRobust) {
        w = penalize_weights(&w, &resid0);
    }
    if matches!(mode, IvwMode::Robust | IvwMode::PenalizedRobust) {
        let mut est = est0;
        for _ in 0..IRLS_MAX_ITER {
            let resid: Vec<f64> = s
                .gamma
                .iter()
                .zip(&s.phi)
                .map(|(&g, &p)| g - est * p)
                .collect();
            let rw = huber_weights(&resid, &w);
            let (next, _) = wls_origin(&s.phi, &s.gamma, &rw)?;
            let done = (next - est).abs() < IRLS_TOL;
            est = next;
            if done {
                break;
            }
        }
        let resid: Vec<f64> = s
            .gamma
            .iter()
            .zip(&s.phi)
            .map(|(&g, &p)| g - est * p)
            .collect();
        let rw = huber_weights(&resid, &w);
        let (est, se_fe) = wls_origin(&s.phi, &s.gamma, &rw)?;
        let resid: Vec<f64> = s
            .gamma
            .iter()
            .zip(&s.phi)
            .map(|(&g, &p)| g - est * p)
            .collect();
        let se = se_fe * overdispersion_factor(&resid, &rw, s.len().saturating_sub(1));
        return Ok(EstimateRecord::from_wald(mode_name_ivw(mode), est, se));
    }

    let (est, se_fe) = wls_origin(&s.phi, &s.gamma, &w)?;
    let resid: Vec<f64> = s
        .gamma
        .iter()
        .zip(&s.phi)
        .map(|(&g, &p)| g - est * p)
        .collect();
    let se = se_fe * overdispersion_factor(&resid, &w, s.len().saturating_sub(1));
    Ok(EstimateRecord::from_wald(mode_name_ivw(mode), est, se))
}

fn mode_name_ivw(mode: IvwMode) -> &'static str {
    match mode {
        IvwMode::Fixed => "IVW",
        IvwMode::Penalized => "Penalized IVW",
        IvwMode::Robust => "Robust IVW",
        IvwMode::PenalizedRobust => "Penalized robust IVW",
    }
}

fn mode_name_egger(mode: EggerMode) -> &'static str {
    match mode {
        EggerMode::Plain => "MR-Egger",
        EggerMode::Penalized => "Penalized MR-Egger",
        EggerMode::Robust => "Robust MR-Egger",
        EggerMode::PenalizedRobust => "Penalized robust MR-Egger",
    }
}

fn mode_name_median(mode: MedianMode) -> &'static str {
    match mode {
        MedianMode::Simple => "Simple median",
        MedianMode::Weighted => "Weighted median",
        MedianMode::PenalizedWeighted => "Penalized weighted median",
    }
}

/// Weighted least squares of `y` on `(1, x)`. Returns
/// ((intercept, slope), (se_intercept, se_slope)).
fn wls_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<((f64, f64), (f64, f64))> {
    let s0: f64 = w.iter().sum();
    let s1: f64 = x.iter().zip(w).map(|(&xi, &wi)| wi * xi).sum();
    let s2: f64 = x.iter().zip(w).map(|(&xi, &wi)| wi * xi * xi).sum();
    let sy: f64 = y.iter().zip(w).map(|(&yi, &wi)| wi * yi).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&xi, &yi), &wi)| wi * xi * yi)
        .sum();
    let det = s0 * s2 - s1 * s1;
    if det <= 0.0 || !det.is_finite() {
        return Err(Error::Mr("degenerate design: constant phi".into()));
    }
    let intercept = (s2 * sy - s1 * sxy) / det;
    let slope = (s0 * sxy - s1 * sy) / det;
    Ok(((intercept, slope), ((s2 / det).sqrt(), (s0 / det).sqrt())))
}

/// MR-Egger regression and its intercept (average pleiotropy). The
/// instrument-exposure effects are sign-oriented to be non-negative
/// before fitting, per Egger's identifiability convention.
pub fn egger(s: &SummaryStats, mode: EggerMode) -> Result<(EstimateRecord, EstimateRecord)> {
    s.validate()?;
    if s.len() < 2 {
        return Err(Error::Mr("egger needs at least two instruments".into()));
    }
    // Orientation flip: all phi >= 0.
    let phi: Vec<f64> = s.phi.iter().map(|&p| p.abs()).collect();
    let gamma: Vec<f64> = s
        .gamma
        .iter()
        .zip(&s.phi)
        .map(|(&g, &p)| if p < 0.0 { -g } else { g })
        .collect();
    if phi.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-14) {
        return Err(Error::Mr("egger needs non-constant phi".into()));
    }

    let mut w = base_weights(s);
    let ((a0, b0), _) = wls_line(&phi, &gamma, &w)?;
    let resid0: Vec<f64> = gamma
        .iter()
        .zip(&phi)
        .map(|(&g, &p)| g - a0 - b0 * p)
        .collect();

    if matches!(mode, EggerMode::Penalized | EggerMode::PenalizedRobust) {
        w = penalize_weights(&w, &resid0);
    }
    let robust = matches!(mode, EggerMode::Robust | EggerMode::PenalizedRobust);

    let (mut a, mut b) = if robust { (a0, b0) } else { (0.0, 0.0) };
    let final_w = if robust {
        let mut rw = w.clone();
        for _ in 0..IRLS_MAX_ITER {
            let resid: Vec<f64> = gamma
                .iter()
                .zip(&phi)
                .map(|(&g, &p)| g - a - b * p)
                .collect();
            rw = huber_weights(&resid, &w);
            let ((an, bn), _) = wls_line(&phi, &gamma, &rw)?;
            let done = (an - a).abs() < IRLS_TOL && (bn - b).abs() < IRLS_TOL;
            a = an;
            b = bn;
            if done {
                break;
            }
        }
        rw
    } else {
        w.clone()
    };

    let ((a, b), (se_a_fe, se_b_fe)) = wls_line(&phi, &gamma, &final_w)?;
    let resid: Vec<f64> = gamma
        .iter()
        .zip(&phi)
        .map(|(&g, &p)| g - a - b * p)
        .collect();
    let factor = overdispersion_factor(&resid, &final_w, s.len().saturating_sub(2));
    let slope = EstimateRecord::from_wald(mode_name_egger(mode), b, se_b_fe * factor);
    let intercept = EstimateRecord::from_wald(
        &format!("{} intercept", mode_name_egger(mode)),
        a,
        se_a_fe * factor,
    );
    Ok((slope, intercept))
}

/// Weighted 50th percentile by linear interpolation of the cumulative
/// weight function s_j = (cum_j - w_j/2) / W.
fn weighted_median(ratios: &[f64], weights: &[f64]) -> f64 {
    let mut ix: Vec<usize> = (0..ratios.len()).collect();
    ix.sort_by(|&i, &j| ratios[i].partial_cmp(&ratios[j]).unwrap());
    let total: f64 = weights.iter().sum();
    let mut cum = 0.0;
    let mut s = Vec::with_capacity(ix.len());
    for &i in &ix {
        cum += weights[i];
        s.push((cum - 0.5 * weights[i]) / total);
    }
    let first_ge = s.iter().position(|&v| v >= 0.5).unwrap_or(s.len() - 1);
    if first_ge == 0 {
        return ratios[ix[0]];
    }
    let (lo, hi) = (first_ge - 1, first_ge);
    let (rlo, rhi) = (ratios[ix[lo]], ratios[ix[hi]]);
    rlo + (rhi - rlo) * (0.5 - s[lo]) / (s[hi] - s[lo])
}

/// Median-family estimator over per-instrument ratio estimates
/// gamma_j / phi_j, with the standard error from a parametric bootstrap
/// (1000 resamples under a fixed seed).
pub fn median_estimator(s: &SummaryStats, mode: MedianMode) -> Result<EstimateRecord> {
    median_estimator_seeded(s, mode, 0x6d65_6469, 1000)
}

pub fn median_estimator_seeded(
    s: &SummaryStats,
    mode: MedianMode,
    seed: u64,
    n_boot: usize,
) -> Result<EstimateRecord> {
    s.validate()?;
    if s.len() < 3 {
        return Err(Error::Mr("median estimator needs at least three instruments".into()));
    }
    if s.phi.iter().any(|&p| p == 0.0) {
        return Err(Error::Mr("median estimator undefined when any phi is zero".into()));
    }
    let ratios: Vec<f64> = s.gamma.iter().zip(&s.phi).map(|(&g, &p)| g / p).collect();
    let weights = match mode {
        MedianMode::Simple => vec![1.0; s.len()],
        MedianMode::Weighted => median_weights(s),
        MedianMode::PenalizedWeighted => {
            let w = median_weights(s);
            let est = weighted_median(&ratios, &w);
            let resid: Vec<f64> = ratios.iter().map(|&r| r - est).collect();
            penalize_weights(&w, &resid)
        }
    };
    let est = weighted_median(&ratios, &weights);

    // Parametric bootstrap for the standard error; weights held fixed.
    let mut rng = derive_rng(seed, 0);
    let mut boot = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut r = Vec::with_capacity(s.len());
        for j in 0..s.len() {
            let zp: f64 = rng.sample(StandardNormal);
            let zg: f64 = rng.sample(StandardNormal);
            let phi = s.phi[j] + s.se_phi[j] * zp;
            let gamma = s.gamma[j] + s.se_gamma[j] * zg;
            r.push(gamma / phi);
        }
        boot.push(weighted_median(&r, &weights));
    }
    let (_, sd) = crate::numeric::mean_sd(&boot);
    Ok(EstimateRecord::from_wald(mode_name_median(mode), est, sd))
}

/// Weighted-median weights proportional to phi^2 / se(gamma)^2, the
/// inverse variances of the per-instrument ratio estimates.
fn median_weights(s: &SummaryStats) -> Vec<f64> {
    s.phi
        .iter()
        .zip(&s.se_gamma)
        .map(|(&p, &se)| p * p / (se * se))
        .collect()
}

/// The eleven-method battery in conventional table order.
pub fn estimate_all(s: &SummaryStats) -> Result<Vec<EstimateRecord>> {
    let mut rows = Vec::with_capacity(11);
    rows.push(median_estimator(s, MedianMode::Simple)?);
    rows.push(median_estimator(s, MedianMode::Weighted)?);
    rows.push(median_estimator(s, MedianMode::PenalizedWeighted)?);
    rows.push(ivw(s, IvwMode::Fixed)?);
    rows.push(ivw(s, IvwMode::Penalized)?);
    rows.push(ivw(s, IvwMode::Robust)?);
    rows.push(ivw(s, IvwMode::PenalizedRobust)?);
    for mode in [
        EggerMode::Plain,
        EggerMode::Penalized,
        EggerMode::Robust,
        EggerMode::PenalizedRobust,
    ] {
        rows.push(egger(s, mode)?.0);
    }
    Ok(rows)
}

/// One row of scatter/fit data for an Egger-style plot.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PlotRow {
    pub kind: String, // "point" or "line"
    pub label: String,
    pub phi: f64,
    pub gamma: f64,
    pub se_phi: f64,
    pub se_gamma: f64,
    pub intercept: f64,
    pub slope: f64,
}

/// Per-instrument points plus one fitted-line row per supplied fit.
/// IVW-style fits pass through the origin (zero intercept column);
/// Egger fits carry their estimated intercept.
pub fn egger_plot_data(s: &SummaryStats, fits: &[(EstimateRecord, f64)]) -> Vec<PlotRow> {
    let mut rows = Vec::with_capacity(s.len() + fits.len());
    for j in 0..s.len() {
        rows.push(PlotRow {
            kind: "point".into(),
            label: s.instrument_ids[j].clone(),
            phi: s.phi[j],
            gamma: s.gamma[j],
            se_phi: s.se_phi[j],
            se_gamma: s.se_gamma[j],
            intercept: 0.0,
            slope: 0.0,
        });
    }
    for (fit, intercept) in fits {
        rows.push(PlotRow {
            kind: "line".into(),
            label: fit.method.clone(),
            phi: 0.0,
            gamma: 0.0,
            se_phi: 0.0,
            se_gamma: 0.0,
            intercept: *intercept,
            slope: fit.estimate,
        });
    }
    rows
}

/// Outcome of one instrument's second-stage logistic regression.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum ScanStatus {
    Ok,
    /// Perfect separation; the estimate column holds a signed infinity
    /// sentinel.
    Separated,
    /// Zero-variance dose; no regression attempted.
    Monomorphic,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct OutcomeEffect {
    pub variant_id: String,
    pub gamma: f64,
    pub se: f64,
    pub status: ScanStatus,
}

/// Covariate selection for the regression stages.
#[derive(Debug, Clone, Copy, Default)]
pub struct CovariateSet {
    pub sex: bool,
}

/// Maximum-likelihood logistic regression of the outcome on each
/// instrument in turn (full sample, optional sex adjustment), reporting
/// the Wald estimate and standard error on the log-odds scale.
pub fn outcome_scan(
    ds: &Dataset,
    instrument_ids: &[String],
    covariates: CovariateSet,
) -> Result<Vec<OutcomeEffect>> {
    let n = ds.n();
    let y: Vec<f64> = ds.outcome.iter().map(|&v| v as f64).collect();
    let sex: Option<Vec<f64>> = if covariates.sex {
        ds.sex.as_ref().map(|s| s.iter().map(|&v| v as f64).collect())
    } else {
        None
    };
    let mut out = Vec::with_capacity(instrument_ids.len());
    for id in instrument_ids {
        let j = ds
            .variants
            .iter()
            .position(|v| &v.id == id)
            .ok_or_else(|| Error::Mr(format!("unknown instrument id `{id}`")))?;
        let dose = ds.dose_column(j);
        if dose.windows(2).all(|w| w[0] == w[1]) {
            out.push(OutcomeEffect {
                variant_id: id.clone(),
                gamma: 0.0,
                se: f64::INFINITY,
                status: ScanStatus::Monomorphic,
            });
            continue;
        }
        let mut cols: Vec<&[f64]> = vec![&dose];
        if let Some(s) = &sex {
            cols.push(s);
        }
        match logistic_fit(&y, &cols, n) {
            LogisticFit::Converged { coef, se } => out.push(OutcomeEffect {
                variant_id: id.clone(),
                gamma: coef[1],
                se: se[1],
                status: ScanStatus::Ok,
            }),
            LogisticFit::Separated { sign } => out.push(OutcomeEffect {
                variant_id: id.clone(),
                gamma: sign * f64::INFINITY,
                se: f64::INFINITY,
                status: ScanStatus::Separated,
            }),
        }
    }
    Ok(out)
}

enum LogisticFit {
    Converged { coef: Vec<f64>, se: Vec<f64> },
    Separated { sign: f64 },
}

/// Newton-Raphson logistic MLE with an intercept plus the given columns.
/// Column 0 of the returned coefficients is the intercept.
fn logistic_fit(y: &[f64], cols: &[&[f64]], n: usize) -> LogisticFit {
    let p = cols.len() + 1;
    let design = DMatrix::from_fn(n, p, |i, k| if k == 0 { 1.0 } else { cols[k - 1][i] });
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    const SEPARATION_BOUND: f64 = 15.0;

    for _ in 0..100 {
        let eta = &design * &beta;
        let probs = eta.map(sigmoid);
        let wdiag = probs.map(|pi| (pi * (1.0 - pi)).max(1e-12));
        let grad = design.transpose() * (&yv - &probs);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let wi = wdiag[i];
            for a in 0..p {
                for b in 0..p {
                    hess[(a, b)] += wi * design[(i, a)] * design[(i, b)];
                }
            }
        }
        let step = match hess.clone().lu().solve(&grad) {
            Some(s) => s,
            None => return LogisticFit::Separated { sign: beta[1].signum() },
        };
        beta += &step;
        if beta[1].abs() > SEPARATION_BOUND {
            return LogisticFit::Separated { sign: beta[1].signum() };
        }
        if step.amax() < 1e-10 {
            // Standard errors from the inverse observed information.
            let cov = match hess.try_inverse() {
                Some(c) => c,
                None => return LogisticFit::Separated { sign: beta[1].signum() },
            };
            let se: Vec<f64> = (0..p).map(|k| cov[(k, k)].sqrt()).collect();
            return LogisticFit::Converged {
                coef: beta.iter().copied().collect(),
                se,
            };
        }
    }
    LogisticFit::Separated { sign: beta[1].signum() }
}
