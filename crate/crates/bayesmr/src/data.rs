//! Analysis dataset: genotype doses, exposure with missingness, binary
//! outcome, covariates and the family indicator, all aligned with a
//! pedigree order.

use std::collections::HashMap;
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::pedigree::{split_fields, Pedigree};

/// Per-variant genomic coordinates used by LD pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantPos {
    pub id: String,
    pub chrom: String,
    pub pos: u64,
}

/// Exposure standardization constants, kept so imputed values can be
/// mapped back to the raw measurement scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureScaling {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Individual ids in pedigree order.
    pub ids: Vec<String>,
    /// Variant metadata, one entry per genotype column.
    pub variants: Vec<VariantPos>,
    /// Allele doses, row-major `n x j`, values in {0,1,2}.
    pub doses: Vec<f64>,
    /// Exposure values; entries flagged missing hold NaN.
    pub exposure: Vec<f64>,
    /// Missingness mask for the exposure (true = missing).
    pub missing: Vec<bool>,
    /// Binary outcome.
    pub outcome: Vec<u8>,
    /// Optional sex covariate (1=male, 2=female, 0=unknown), if present.
    pub sex: Option<Vec<u8>>,
    /// Family index per individual, 0-based, aligned with the pedigree's
    /// family order.
    pub family: Vec<usize>,
    /// Number of families.
    pub n_families: usize,
    /// Standardization constants once `standardize_exposure` has run.
    pub scaling: Option<ExposureScaling>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn n_variants(&self) -> usize {
        self.variants.len()
    }

    pub fn dose(&self, i: usize, j: usize) -> f64 {
        self.doses[i * self.variants.len() + j]
    }

    /// Dose column for variant `j`.
    pub fn dose_column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.dose(i, j)).collect()
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Indices of individuals with missing exposure, in dataset order.
    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.missing[i]).collect()
    }

    /// Restrict the genotype matrix to the given variant ids, in the
    /// given order.
    pub fn select_variants(&self, keep: &[String]) -> Result<Dataset> {
        let mut cols = Vec::with_capacity(keep.len());
        for id in keep {
            let j = self
                .variants
                .iter()
                .position(|v| &v.id == id)
                .ok_or_else(|| Error::Data(format!("unknown variant id `{id}`")))?;
            cols.push(j);
        }
        let n = self.n();
        let mut doses = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            for &j in &cols {
                doses.push(self.dose(i, j));
            }
        }
        Ok(Dataset {
            variants: cols.iter().map(|&j| self.variants[j].clone()).collect(),
            doses,
            ..self.clone()
        })
    }
}

/// Parsed phenotype row before alignment.
struct PhenotypeRow {
    y: u8,
    x: Option<f64>,
    sex: Option<u8>,
}

/// Load and validate the dataset from a genotype stream and a phenotype
/// stream, aligning rows with the pedigree order.
///
/// Genotype format (wide): header `variant_id chrom pos id1 id2 ...`,
/// one row per variant with doses in {0,1,2}. Long format: header
/// `variant_id chrom pos individual_id dose`, one row per
/// (variant, individual) pair. Both may be whitespace- or
/// comma-delimited; the format is detected from the header.
///
/// Phenotype format: header `id y x [sex]`; an empty or `NA` exposure
/// field means missing.
pub fn load_dataset<G: BufRead, P: BufRead>(
    genotypes: G,
    phenotypes: P,
    ped: &Pedigree,
) -> Result<Dataset> {
    let (variants, dose_by_id) = parse_genotypes(genotypes)?;
    let pheno = parse_phenotypes(phenotypes)?;

    let n = ped.len();
    let j = variants.len();
    let mut doses = vec![0.0; n * j];
    let mut exposure = vec![f64::NAN; n];
    let mut missing = vec![true; n];
    let mut outcome = vec![0u8; n];
    let mut sex_col = Vec::with_capacity(n);
    let mut any_sex = false;

    for (i, member) in ped.members().iter().enumerate() {
        let row = dose_by_id.get(member.id.as_str()).ok_or_else(|| {
            Error::Data(format!("genotypes missing for pedigree id `{}`", member.id))
        })?;
        doses[i * j..(i + 1) * j].copy_from_slice(row);
        let ph = pheno.get(member.id.as_str()).ok_or_else(|| {
            Error::Data(format!("phenotypes missing for pedigree id `{}`", member.id))
        })?;
        outcome[i] = ph.y;
        match ph.x {
            Some(x) => {
                exposure[i] = x;
                missing[i] = false;
            }
            None => {
                exposure[i] = f64::NAN;
                missing[i] = true;
            }
        }
        if let Some(s) = ph.sex {
            any_sex = true;
            sex_col.push(s);
        } else {
            sex_col.push(member.sex.code());
        }
    }

    for id in pheno.keys() {
        if ped.position_of(id).is_none() {
            return Err(Error::Data(format!(
                "phenotype id `{id}` absent from pedigree"
            )));
        }
    }

    Ok(Dataset {
        ids: ped.members().iter().map(|m| m.id.clone()).collect(),
        variants,
        doses,
        exposure,
        missing,
        outcome,
        sex: any_sex.then_some(sex_col),
        family: ped.family_indices().to_vec(),
        n_families: ped.families().len(),
        scaling: None,
    })
}

fn parse_dose(s: &str) -> Result<f64> {
    match s {
        "0" => Ok(0.0),
        "1" => Ok(1.0),
        "2" => Ok(2.0),
        other => Err(Error::Data(format!(
            "allele dose `{other}` not in {{0,1,2}}"
        ))),
    }
}

type DoseMap = HashMap<String, Vec<f64>>;

fn parse_genotypes<R: BufRead>(reader: R) -> Result<(Vec<VariantPos>, DoseMap)> {
    let mut lines = reader.lines();
    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line?;
                let t = line.trim().to_string();
                if !t.is_empty() && !t.starts_with('#') {
                    break t;
                }
            }
            None => return Err(Error::Data("empty genotype stream".into())),
        }
    };
    let head: Vec<String> = split_fields(&header).iter().map(|s| s.to_string()).collect();
    if head.len() < 4 || head[0] != "variant_id" || head[1] != "chrom" || head[2] != "pos" {
        return Err(Error::Data(
            "genotype header must start with `variant_id chrom pos`".into(),
        ));
    }

    let long_format = head.len() == 5 && head[3] == "individual_id" && head[4] == "dose";
    let mut variants: Vec<VariantPos> = Vec::new();
    let mut variant_ix: HashMap<String, usize> = HashMap::new();
    // per-individual rows are assembled after reading in both formats
    let mut cells: HashMap<String, HashMap<usize, f64>> = HashMap::new();

    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        let bad_cols = |want: usize| {
            Error::Data(format!(
                "genotype line {}: expected {} columns, got {}",
                lineno + 2,
                want,
                fields.len()
            ))
        };
        let pos: u64 = fields
            .get(2)
            .ok_or_else(|| bad_cols(if long_format { 5 } else { head.len() }))?
            .parse()
            .map_err(|_| Error::Data(format!("genotype line {}: bad position", lineno + 2)))?;
        let vid = fields[0].to_string();
        let vix = *variant_ix.entry(vid.clone()).or_insert_with(|| {
            variants.push(VariantPos { id: vid.clone(), chrom: fields[1].to_string(), pos });
            variants.len() - 1
        });

        if long_format {
            if fields.len() != 5 {
                return Err(bad_cols(5));
            }
            cells
                .entry(fields[3].to_string())
                .or_default()
                .insert(vix, parse_dose(fields[4])?);
        } else {
            if fields.len() != head.len() {
                return Err(bad_cols(head.len()));
            }
            for (col, field) in fields.iter().enumerate().skip(3) {
                cells
                    .entry(head[col].clone())
                    .or_default()
                    .insert(vix, parse_dose(field)?);
            }
        }
    }

    let j = variants.len();
    let mut by_id: DoseMap = HashMap::new();
    for (id, row) in cells {
        let mut v = vec![f64::NAN; j];
        for (vix, dose) in row {
            v[vix] = dose;
        }
        if let Some(k) = v.iter().position(|d| d.is_nan()) {
            return Err(Error::Data(format!(
                "individual `{id}`: missing genotype for variant `{}`",
                variants[k].id
            )));
        }
        by_id.insert(id, v);
    }
    Ok((variants, by_id))
}

fn parse_phenotypes<R: BufRead>(reader: R) -> Result<HashMap<String, PhenotypeRow>> {
    let mut out = HashMap::new();
    let mut saw_header = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        // Split on comma even when the exposure field is empty.
        let fields: Vec<&str> = if trimmed.contains(',') {
            trimmed.split(',').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        if !saw_header {
            saw_header = true;
            if fields.first() == Some(&"id") {
                continue;
            }
        }
        if fields.len() < 3 {
            return Err(Error::Data(format!(
                "phenotype line {}: expected columns id y x [sex]",
                lineno + 1
            )));
        }
        let y: u8 = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!(
                    "phenotype id `{}`: outcome `{other}` not in {{0,1}}",
                    fields[0]
                )))
            }
        };
        let x = match fields[2] {
            "" | "NA" | "na" | "NaN" => None,
            s => Some(s.parse::<f64>().map_err(|_| {
                Error::Data(format!("phenotype id `{}`: bad exposure `{s}`", fields[0]))
            })?),
        };
        let sex = match fields.get(3) {
            Some(&"") | None => None,
            Some(s) => Some(s.parse::<u8>().map_err(|_| {
                Error::Data(format!("phenotype id `{}`: bad sex `{s}`", fields[0]))
            })?),
        };
        if out
            .insert(fields[0].to_string(), PhenotypeRow { y, x, sex })
            .is_some()
        {
            return Err(Error::Data(format!("duplicate phenotype id `{}`", fields[0])));
        }
    }
    Ok(out)
}

/// Rescale the observed exposure entries to mean 0, sd 1. The mean and
/// sd are computed over observed entries only and retained for mapping
/// imputed values back to the raw scale. Idempotent up to floating
/// point: re-standardizing composes the affine maps.
pub fn standardize_exposure(ds: &Dataset) -> Result<Dataset> {
    let observed: Vec<f64> = ds
        .exposure
        .iter()
        .zip(&ds.missing)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .collect();
    if observed.len() < 2 {
        return Err(Error::Data(format!(
            "exposure standardization needs >= 2 observed values, have {}",
            observed.len()
        )));
    }
    let (mean, sd) = crate::numeric::mean_sd(&observed);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::Data("exposure has zero variance".into()));
    }
    let mut out = ds.clone();
    for (x, &m) in out.exposure.iter_mut().zip(&ds.missing) {
        if !m {
            *x = (*x - mean) / sd;
        }
    }
    // Compose with any previous standardization so raw-scale recovery
    // still works after repeated application.
    out.scaling = Some(match ds.scaling {
        None => ExposureScaling { mean, sd },
        Some(prev) => ExposureScaling {
            mean: prev.mean + prev.sd * mean,
            sd: prev.sd * sd,
        },
    });
    Ok(out)
}

/// Flag the exposure as missing for every case (outcome 1), discarding
/// the recorded values. Exposure in treated cases may be
/// reverse-affected, so it is excluded from the likelihood.
pub fn mask_exposure_in_cases(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for i in 0..out.n() {
        if out.outcome[i] == 1 {
            out.missing[i] = true;
            out.exposure[i] = f64::NAN;
        }
    }
    out
}
