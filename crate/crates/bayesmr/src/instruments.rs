//! Instrument selection: marginal association of each variant with the
//! exposure under a kinship-aware linear mixed model, followed by LD
//! pruning and a p-value screen.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::data::{Dataset, VariantPos};
use crate::error::{Error, Result};
use crate::mr::CovariateSet;
use crate::numeric::normal_two_sided_p;
use crate::pedigree::KinshipMatrix;

/// One variant's association record from the mixed-model scan.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScanRecord {
    pub variant_id: String,
    /// Effect of one allele dose on the exposure (sd-of-X units).
    pub phi_hat: f64,
    pub se: f64,
    pub p_value: f64,
    pub n_used: usize,
    /// Zero-variance dose in the scan subsample; reported with
    /// phi_hat = 0, p = 1 and excluded from candidacy.
    pub monomorphic: bool,
}

#[derive(Debug, Clone)]
pub struct AssociationScan {
    pub records: Vec<ScanRecord>,
}

/// Selected instruments with the parameters that produced them.
#[derive(Debug, Clone)]
pub struct InstrumentSet {
    pub ids: Vec<String>,
    pub p_max: f64,
    pub r2_max: f64,
    pub window_bp: u64,
}

/// Options for the mixed-model scan.
#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub covariates: CovariateSet,
    /// Fix the variance ratio sigma_g^2 / sigma_e^2 instead of profiling
    /// it (0 reproduces ordinary least squares).
    pub lambda_override: Option<f64>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { covariates: CovariateSet { sex: true }, lambda_override: None }
    }
}

const LAMBDA_GRID_POINTS: usize = 64;
const LAMBDA_LOG10_MIN: f64 = -5.0;
const LAMBDA_LOG10_MAX: f64 = 5.0;
const MIN_SCAN_SAMPLE: usize = 10;

/// Restricted-likelihood profile for one variance ratio on the rotated
/// data. Returns (reml log-likelihood, gls coefficients, coefficient
/// covariance). `eigvals` are the eigenvalues of twice the kinship
/// submatrix.
struct RotatedDesign {
    /// Q^T W, n x p
    design: DMatrix<f64>,
    /// Q^T x
    response: DVector<f64>,
    eigvals: Vec<f64>,
}

impl RotatedDesign {
    fn reml_at(&self, lambda: f64) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let n = self.response.len();
        let p = self.design.ncols();
        let d: Vec<f64> = self.eigvals.iter().map(|&ev| 1.0 / (lambda * ev.max(0.0) + 1.0)).collect();

        let mut xtwx: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut xtwy: DVector<f64> = DVector::zeros(p);
        for i in 0..n {
            let di = d[i];
            for a in 0..p {
                let xa = self.design[(i, a)];
                xtwy[a] += di * xa * self.response[i];
                for b in a..p {
                    xtwx[(a, b)] += di * xa * self.design[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }

        let chol = xtwx.clone().cholesky()?;
        let beta = chol.solve(&xtwy);
        let mut rss = 0.0;
        for i in 0..n {
            let mut fit = 0.0;
            for a in 0..p {
                fit += self.design[(i, a)] * beta[a];
            }
            let r = self.response[i] - fit;
            rss += d[i] * r * r;
        }
        let df = (n - p) as f64;
        let sigma_e2 = rss / df;
        if sigma_e2 <= 0.0 || !sigma_e2.is_finite() {
            return None;
        }
        // log det of X' D X from its Cholesky factor
        let mut logdet_xtwx = 0.0;
        for a in 0..p {
            logdet_xtwx += 2.0 * chol.l_dirty()[(a, a)].ln();
        }
        let logdet_v: f64 = self
            .eigvals
            .iter()
            .map(|&ev| (lambda * ev.max(0.0) + 1.0).ln())
            .sum();
        let reml = -0.5 * (df * sigma_e2.ln() + logdet_v + logdet_xtwx);
        let cov = chol.inverse() * sigma_e2;
        Some((reml, beta, cov))
    }
}

/// Marginal mixed-model scan of every variant against the exposure.
///
/// Restricted to disease-free individuals with an observed exposure.
/// For each variant, fits `x = mu + phi * dose + covariates + g + e`
/// with `g ~ MVN(0, sigma_g^2 * 2K)` and `e ~ MVN(0, sigma_e^2 I)`,
/// profiling the variance ratio on a 64-point log grid over one shared
/// eigendecomposition, and reports the Wald estimate, standard error and
/// p-value per variant.
pub fn marginal_scan(
    ds: &Dataset,
    kinship: &KinshipMatrix,
    options: &ScanOptions,
) -> Result<AssociationScan> {
    if kinship.n() != ds.n() {
        return Err(Error::Instruments(format!(
            "kinship order ({}) does not match dataset ({})",
            kinship.n(),
            ds.n()
        )));
    }
    let subsample: Vec<usize> = (0..ds.n())
        .filter(|&i| !ds.missing[i] && ds.outcome[i] == 0)
        .collect();
    if subsample.len() < MIN_SCAN_SAMPLE {
        return Err(Error::Instruments(format!(
            "scan subsample too small: {} disease-free individuals with observed exposure (need >= {MIN_SCAN_SAMPLE})",
            subsample.len()
        )));
    }
    let n = subsample.len();

    // Eigendecompose 2 K_sub once; reused across variants.
    let a = DMatrix::from_fn(n, n, |r, c| 2.0 * kinship.get(subsample[r], subsample[c]));
    let eig = SymmetricEigen::new(a);
    let q = eig.eigenvectors;
    let eigvals: Vec<f64> = eig.eigenvalues.iter().copied().collect();

    let x_sub = DVector::from_iterator(n, subsample.iter().map(|&i| ds.exposure[i]));
    let response = q.transpose() * &x_sub;

    let sex: Option<Vec<f64>> = if options.covariates.sex {
        ds.sex
            .as_ref()
            .map(|s| subsample.iter().map(|&i| s[i] as f64).collect())
    } else {
        None
    };
    let p = 2 + sex.is_some() as usize;

    let grid: Vec<f64> = match options.lambda_override {
        Some(l) => vec![l],
        None => (0..LAMBDA_GRID_POINTS)
            .map(|k| {
                let t = k as f64 / (LAMBDA_GRID_POINTS - 1) as f64;
                10f64.powf(LAMBDA_LOG10_MIN + t * (LAMBDA_LOG10_MAX - LAMBDA_LOG10_MIN))
            })
            .collect(),
    };

    let records: Vec<ScanRecord> = (0..ds.n_variants())
        .into_par_iter()
        .map(|j| {
            let dose: Vec<f64> = subsample.iter().map(|&i| ds.dose(i, j)).collect();
            let id = ds.variants[j].id.clone();
            if dose.windows(2).all(|w| w[0] == w[1]) {
                return ScanRecord {
                    variant_id: id,
                    phi_hat: 0.0,
                    se: f64::INFINITY,
                    p_value: 1.0,
                    n_used: n,
                    monomorphic: true,
                };
            }
            let mut w = DMatrix::zeros(n, p);
            for i in 0..n {
                w[(i, 0)] = 1.0;
                w[(i, 1)] = dose[i];
                if let Some(s) = &sex {
                    w[(i, 2)] = s[i];
                }
            }
            let rot = RotatedDesign {
                design: q.transpose() * w,
                response: response.clone(),
                eigvals: eigvals.clone(),
            };
            let mut best: Option<(f64, DVector<f64>, DMatrix<f64>)> = None;
            for &lambda in &grid {
                if let Some(fit) = rot.reml_at(lambda) {
                    let better = match &best {
                        None => true,
                        Some((ll, _, _)) => fit.0 > *ll,
                    };
                    if better {
                        best = Some(fit);
                    }
                }
            }
            match best {
                Some((_, beta, cov)) => {
                    let phi = beta[1];
                    let se = cov[(1, 1)].sqrt();
                    ScanRecord {
                        variant_id: id,
                        phi_hat: phi,
                        se,
                        p_value: normal_two_sided_p(phi / se),
                        n_used: n,
                        monomorphic: false,
                    }
                }
                None => ScanRecord {
                    variant_id: id,
                    phi_hat: 0.0,
                    se: f64::INFINITY,
                    p_value: 1.0,
                    n_used: n,
                    monomorphic: true,
                },
            }
        })
        .collect();

    Ok(AssociationScan { records })
}

/// Squared Pearson correlation between two dose vectors; zero-variance
/// vectors correlate with nothing.
pub fn dose_r2(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&ai, &bi) in a.iter().zip(b) {
        sab += (ai - ma) * (bi - mb);
        saa += (ai - ma) * (ai - ma);
        sbb += (bi - mb) * (bi - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab * sab) / (saa * sbb)
    }
}

/// Greedy position-ordered LD pruning: scan variants in genomic order
/// and drop the later member of any same-chromosome pair closer than
/// `window_bp` with squared correlation at or above `r2_max`. Ties at
/// equal position keep the lexicographically smaller id.
pub fn ld_prune(ds: &Dataset, r2_max: f64, window_bp: u64) -> Vec<String> {
    let mut order: Vec<usize> = (0..ds.n_variants()).collect();
    order.sort_by(|&a, &b| {
        let va = &ds.variants[a];
        let vb = &ds.variants[b];
        (&va.chrom, va.pos, &va.id).cmp(&(&vb.chrom, vb.pos, &vb.id))
    });

    let mut kept: Vec<(usize, Vec<f64>)> = Vec::new();
    for &j in &order {
        let vj = &ds.variants[j];
        let dose_j = ds.dose_column(j);
        let mut drop = false;
        for (k, dose_k) in &kept {
            let vk = &ds.variants[*k];
            if vk.chrom != vj.chrom {
                continue;
            }
            if vj.pos.saturating_sub(vk.pos) > window_bp {
                continue;
            }
            if dose_r2(dose_k, &dose_j) >= r2_max {
                drop = true;
                break;
            }
        }
        if !drop {
            kept.push((j, dose_j));
        }
    }
    kept.into_iter().map(|(j, _)| ds.variants[j].id.clone()).collect()
}

/// Intersect the p-value screen with the pruned set, in genomic order.
pub fn select_instruments(
    scan: &AssociationScan,
    pruned: &[String],
    positions: &[VariantPos],
    p_max: f64,
    r2_max: f64,
    window_bp: u64,
) -> Result<InstrumentSet> {
    let passing: Vec<&str> = scan
        .records
        .iter()
        .filter(|r| !r.monomorphic && r.p_value < p_max)
        .map(|r| r.variant_id.as_str())
        .collect();
    let mut ids: Vec<String> = pruned
        .iter()
        .filter(|id| passing.contains(&id.as_str()))
        .cloned()
        .collect();
    ids.sort_by_key(|id| {
        positions
            .iter()
            .position(|v| &v.id == id)
            .map(|k| (positions[k].chrom.clone(), positions[k].pos, id.clone()))
            .unwrap_or((String::new(), 0, id.clone()))
    });
    if ids.is_empty() {
        return Err(Error::Instruments(format!(
            "no instruments pass p < {p_max} after pruning"
        )));
    }
    Ok(InstrumentSet { ids, p_max, r2_max, window_bp })
}

/// Convenience wrapper: scan, prune, select with the default thresholds
/// p < 5e-3, r^2 < 0.20 within 100 kb.
pub fn default_selection(
    ds: &Dataset,
    kinship: &KinshipMatrix,
    options: &ScanOptions,
) -> Result<(AssociationScan, InstrumentSet)> {
    let scan = marginal_scan(ds, kinship, options)?;
    let pruned = ld_prune(ds, 0.20, 100_000);
    let set = select_instruments(&scan, &pruned, &ds.variants, 5e-3, 0.20, 100_000)?;
    Ok((scan, set))
}
