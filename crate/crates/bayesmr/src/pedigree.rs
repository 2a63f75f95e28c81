//! Pedigree structures, kinship coefficients and the kinship matrix.
//!
//! Kinship here is the coefficient of coancestry: the probability that
//! an allele drawn at random from individual `i` and one drawn from `j`
//! are identical by descent. A non-inbred individual has self-kinship
//! 0.5; a parent-child pair of unrelated parents has 0.25. Individuals
//! in different families have kinship exactly 0, which gives the full
//! N x N matrix its block-diagonal structure.

use std::collections::HashMap;
use std::io::BufRead;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    fn from_code(code: &str) -> Result<Sex> {
        match code {
            "1" => Ok(Sex::Male),
            "2" => Ok(Sex::Female),
            "0" => Ok(Sex::Unknown),
            other => Err(Error::Pedigree(format!("unrecognized sex code `{other}`"))),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Sex::Male => 1,
            Sex::Female => 2,
            Sex::Unknown => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub id: String,
    pub family: String,
    /// Indexes into `Pedigree::members`; `None` for founders.
    pub father: Option<usize>,
    pub mother: Option<usize>,
    pub sex: Sex,
}

impl Member {
    pub fn is_founder(&self) -> bool {
        self.father.is_none()
    }
}

/// A validated pedigree: parent links resolved to indices, acyclic,
/// both parents present or both absent.
#[derive(Debug, Clone)]
pub struct Pedigree {
    members: Vec<Member>,
    families: Vec<String>,
    /// Family index per member, aligned with `members`.
    family_index: Vec<usize>,
}

impl Pedigree {
    /// Build from raw records `(family, id, father_id, mother_id, sex)`
    /// where an empty parent id means founder.
    pub fn from_records(
        records: Vec<(String, String, Option<String>, Option<String>, Sex)>,
    ) -> Result<Pedigree> {
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            if index.insert(rec.1.clone(), i).is_some() {
                return Err(Error::Pedigree(format!("duplicate id `{}`", rec.1)));
            }
        }

        let mut members = Vec::with_capacity(records.len());
        for (family, id, father, mother, sex) in &records {
            let (father_ix, mother_ix) = match (father, mother) {
                (None, None) => (None, None),
                (Some(f), Some(m)) => {
                    let fi = *index.get(f).ok_or_else(|| {
                        Error::Pedigree(format!("id `{id}`: dangling father reference `{f}`"))
                    })?;
                    let mi = *index.get(m).ok_or_else(|| {
                        Error::Pedigree(format!("id `{id}`: dangling mother reference `{m}`"))
                    })?;
                    for pi in [fi, mi] {
                        if records[pi].0 != *family {
                            return Err(Error::Pedigree(format!(
                                "id `{id}`: parent `{}` belongs to family `{}`, not `{family}`",
                                records[pi].1, records[pi].0
                            )));
                        }
                    }
                    (Some(fi), Some(mi))
                }
                _ => {
                    return Err(Error::Pedigree(format!(
                        "id `{id}`: single-parent record (both parents required, or neither)"
                    )));
                }
            };
            members.push(Member {
                id: id.clone(),
                family: family.clone(),
                father: father_ix,
                mother: mother_ix,
                sex: *sex,
            });
        }

        let ped = Pedigree::index_families(members);
        ped.check_acyclic()?;
        Ok(ped)
    }

    fn index_families(members: Vec<Member>) -> Pedigree {
        let mut families: Vec<String> = Vec::new();
        let mut fam_ix: HashMap<&str, usize> = HashMap::new();
        let mut family_index = Vec::with_capacity(members.len());
        for m in &members {
            let ix = *fam_ix.entry(m.family.as_str()).or_insert_with(|| {
                families.push(m.family.clone());
                families.len() - 1
            });
            family_index.push(ix);
        }
        Pedigree { members, families, family_index }
    }

    fn check_acyclic(&self) -> Result<()> {
        // Colors: 0 unvisited, 1 on stack, 2 done.
        let mut color = vec![0u8; self.members.len()];
        for start in 0..self.members.len() {
            if color[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            color[start] = 1;
            while let Some(&(node, stage)) = stack.last() {
                let parents = [self.members[node].father, self.members[node].mother];
                let next = parents.iter().skip(stage).flatten().next().copied();
                match next {
                    Some(p) => {
                        stack.last_mut().unwrap().1 = stage + 1;
                        match color[p] {
                            0 => {
                                color[p] = 1;
                                stack.push((p, 0));
                            }
                            1 => {
                                return Err(Error::Pedigree(format!(
                                    "cycle detected through id `{}`",
                                    self.members[p].id
                                )));
                            }
                            _ => {}
                        }
                    }
                    None => {
                        color[node] = 2;
                        stack.pop();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Distinct family labels in first-appearance order.
    pub fn families(&self) -> &[String] {
        &self.families
    }

    /// Family index (into `families()`) per member.
    pub fn family_indices(&self) -> &[usize] {
        &self.family_index
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.members.iter().position(|m| m.id == id)
    }

    /// Members ordered so every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.members.len();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        let mut remaining = n;
        while remaining > 0 {
            let before = remaining;
            for i in 0..n {
                if placed[i] {
                    continue;
                }
                let ready = [self.members[i].father, self.members[i].mother]
                    .iter()
                    .flatten()
                    .all(|&p| placed[p]);
                if ready {
                    placed[i] = true;
                    order.push(i);
                    remaining -= 1;
                }
            }
            if remaining == before {
                return Err(Error::Pedigree(
                    "no topological order: cycle in parent links".into(),
                ));
            }
        }
        Ok(order)
    }
}

/// Parse a pedigree file: one row per individual, columns
/// `family id father mother sex`, whitespace- or comma-delimited, with
/// `0` denoting a missing parent and sex coded 1=male, 2=female,
/// 0=unknown. Lines starting with `#` are skipped.
pub fn parse_pedigree<R: BufRead>(reader: R) -> Result<Pedigree> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        if fields.len() < 5 {
            return Err(Error::Pedigree(format!(
                "line {}: expected 5 columns (family id father mother sex), got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parent = |s: &str| if s == "0" { None } else { Some(s.to_string()) };
        records.push((
            fields[0].to_string(),
            fields[1].to_string(),
            parent(fields[2]),
            parent(fields[3]),
            Sex::from_code(fields[4])?,
        ));
    }
    Pedigree::from_records(records)
}

pub(crate) fn split_fields(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Dense symmetric kinship matrix over a fixed individual order.
#[derive(Debug, Clone)]
pub struct KinshipMatrix {
    order: Vec<String>,
    values: Vec<f64>, // row-major n x n
    n: usize,
}

/// Scale convention for the relatedness matrix used downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KinshipScale {
    /// Coefficient of coancestry; non-inbred diagonal 0.5.
    #[default]
    Coefficient,
    /// Numerator relationship matrix (twice the kinship coefficients).
    Numerator,
}

impl KinshipMatrix {
    /// Assemble from a precomputed symmetric matrix (row-major).
    pub fn from_parts(order: Vec<String>, values: Vec<f64>) -> KinshipMatrix {
        let n = order.len();
        assert_eq!(values.len(), n * n, "kinship matrix shape mismatch");
        KinshipMatrix { order, values, n }
    }

    pub fn order(&self) -> &[String] {
        &self.order
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// A copy of the dense matrix multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Vec<f64> {
        self.values.iter().map(|v| v * factor).collect()
    }

    /// Submatrix over `rows` (also used for the columns), preserving order.
    pub fn submatrix(&self, rows: &[usize]) -> Vec<f64> {
        let m = rows.len();
        let mut out = vec![0.0; m * m];
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in rows.iter().enumerate() {
                out[a * m + b] = self.get(i, j);
            }
        }
        out
    }
}

/// Kinship coefficients by the recursive tabular method: process
/// individuals parents-first; for non-founder i with parents (f, m),
///   phi(i,i) = 0.5 + 0.5 phi(f,m)
///   phi(i,j) = 0.5 (phi(f,j) + phi(m,j))      for j processed before i
/// and founders are mutually unrelated with self-kinship 0.5.
pub fn kinship(ped: &Pedigree) -> Result<KinshipMatrix> {
    let n = ped.len();
    let order = ped.topological_order()?;
    let mut values = vec![0.0f64; n * n];
    // rank[i] = position of member i in the topological order
    let mut rank = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }

    for &i in &order {
        match (ped.members[i].father, ped.members[i].mother) {
            (None, None) => {
                values[i * n + i] = 0.5;
            }
            (Some(f), Some(m)) => {
                values[i * n + i] = 0.5 + 0.5 * values[f * n + m];
                for &j in &order {
                    if rank[j] >= rank[i] {
                        break;
                    }
                    let v = 0.5 * (values[f * n + j] + values[m * n + j]);
                    values[i * n + j] = v;
                    values[j * n + i] = v;
                }
            }
            _ => unreachable!("validated pedigree has both parents or neither"),
        }
    }

    Ok(KinshipMatrix {
        order: ped.members.iter().map(|m| m.id.clone()).collect(),
        values,
        n,
    })
}

/// Lower-triangular Cholesky factor of `K + jitter I`.
///
/// Fails with the index of the leading minor that is not positive
/// definite. The retry policy (1e-8 then 1e-6) lives in
/// [`cholesky_with_retry`].
pub fn cholesky(k: &KinshipMatrix, jitter: f64) -> Result<Vec<f64>> {
    cholesky_dense(&k.values, k.n, jitter)
}

pub(crate) fn cholesky_dense(a: &[f64], n: usize, jitter: f64) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Pedigree(format!(
                        "matrix not positive definite at leading minor {}",
                        i + 1
                    )));
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Factor with escalating jitter: exact first, then 1e-8, then 1e-6.
/// Duplicated founders can make a kinship matrix numerically
/// semi-definite, which the small diagonal bump repairs.
pub fn cholesky_with_retry(k: &KinshipMatrix) -> Result<(Vec<f64>, f64)> {
    for jitter in [0.0, 1e-8, 1e-6] {
        if let Ok(l) = cholesky(k, jitter) {
            return Ok((l, jitter));
        }
    }
    cholesky(k, 1e-6).map(|l| (l, 1e-6))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<Pedigree> {
        parse_pedigree(Cursor::new(text))
    }

    #[test]
    fn founder_row_parses() {
        let ped = parse("F1 A 0 0 1\n").unwrap();
        assert_eq!(ped.len(), 1);
        assert!(ped.members()[0].is_founder());
        assert_eq!(ped.members()[0].sex, Sex::Male);
    }

    #[test]
    fn trio_parses() {
        let ped = parse("F1 A 0 0 1\nF1 B 0 0 2\nF1 C A B 1\n").unwrap();
        assert_eq!(ped.len(), 3);
        assert_eq!(ped.members()[2].father, Some(0));
        assert_eq!(ped.members()[2].mother, Some(1));
    }

    #[test]
    fn comma_delimited_parses() {
        let ped = parse("F1,A,0,0,1\nF1,B,0,0,2\nF1,C,A,B,0\n").unwrap();
        assert_eq!(ped.len(), 3);
    }

    #[test]
    fn single_parent_rejected() {
        let err = parse("F1 A 0 0 1\nF1 C A 0 2\n").unwrap_err();
        assert!(err.to_string().contains("single-parent"), "{err}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = parse("F1 A 0 0 1\nF1 A 0 0 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn dangling_parent_rejected() {
        let err = parse("F1 C A B 1\n").unwrap_err();
        assert!(err.to_string().contains("dangling"), "{err}");
    }

    #[test]
    fn cycle_rejected() {
        // A and B are each other's ancestors.
        let recs = vec![
            ("F1".into(), "A".into(), Some("B".into()), Some("C".into()), Sex::Male),
            ("F1".into(), "B".into(), Some("A".into()), Some("C".into()), Sex::Female),
            ("F1".into(), "C".into(), None, None, Sex::Female),
        ];
        let err = Pedigree::from_records(recs).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn cross_family_parent_rejected() {
        let err = parse("F1 A 0 0 1\nF1 B 0 0 2\nF2 C A B 1\n").unwrap_err();
        assert!(err.to_string().contains("family"), "{err}");
    }

    fn nuclear() -> Pedigree {
        parse("F1 A 0 0 1\nF1 B 0 0 2\nF1 C A B 1\nF1 D A B 2\n").unwrap()
    }

    #[test]
    fn kinship_base_cases() {
        let k = kinship(&nuclear()).unwrap();
        // self of non-inbred
        assert_abs_diff_eq!(k.get(0, 0), 0.5, epsilon = 0.0);
        assert_abs_diff_eq!(k.get(2, 2), 0.5, epsilon = 0.0);
        // parent-child
        assert_abs_diff_eq!(k.get(0, 2), 0.25, epsilon = 0.0);
        // full siblings
        assert_abs_diff_eq!(k.get(2, 3), 0.25, epsilon = 0.0);
        // unrelated founders
        assert_abs_diff_eq!(k.get(0, 1), 0.0, epsilon = 0.0);
    }

    #[test]
    fn kinship_cross_family_zero() {
        let ped = parse(
            "F1 A 0 0 1\nF1 B 0 0 2\nF1 C A B 1\nF2 X 0 0 1\nF2 Y 0 0 2\nF2 Z X Y 2\n",
        )
        .unwrap();
        let k = kinship(&ped).unwrap();
        for i in 0..3 {
            for j in 3..6 {
                assert_eq!(k.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn kinship_grandchild_and_inbred() {
        // Three generations plus a full-sib mating to exercise the
        // inbred diagonal: child of full sibs has phi(f,m)=0.25 so
        // self-kinship 0.625.
        let ped = parse(
            "F1 A 0 0 1\nF1 B 0 0 2\nF1 C A B 1\nF1 D A B 2\nF1 E C D 1\n",
        )
        .unwrap();
        let k = kinship(&ped).unwrap();
        // grandparent-grandchild: A-E
        assert_abs_diff_eq!(k.get(0, 4), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(k.get(4, 4), 0.625, epsilon = 1e-15);
    }

    #[test]
    fn kinship_respects_file_order_not_topology() {
        // Child listed before its parents still works.
        let ped = parse("F1 C A B 1\nF1 A 0 0 1\nF1 B 0 0 2\n").unwrap();
        let k = kinship(&ped).unwrap();
        assert_abs_diff_eq!(k.get(0, 1), 0.25, epsilon = 0.0);
        assert_abs_diff_eq!(k.get(0, 0), 0.5, epsilon = 0.0);
    }

    #[test]
    fn permutation_equivariance() {
        let base = parse("F1 A 0 0 1\nF1 B 0 0 2\nF1 C A B 1\nF1 D A B 2\nF1 E C D 1\n").unwrap();
        let permuted =
            parse("F1 E C D 1\nF1 D A B 2\nF1 C A B 1\nF1 B 0 0 2\nF1 A 0 0 1\n").unwrap();
        let kb = kinship(&base).unwrap();
        let kp = kinship(&permuted).unwrap();
        for (ib, ida) in kb.order().iter().enumerate() {
            for (jb, idb) in kb.order().iter().enumerate() {
                let ip = kp.order().iter().position(|x| x == ida).unwrap();
                let jp = kp.order().iter().position(|x| x == idb).unwrap();
                assert_eq!(kb.get(ib, jb), kp.get(ip, jp));
            }
        }
    }

    #[test]
    fn cholesky_identity() {
        let k = KinshipMatrix {
            order: vec!["a".into(), "b".into()],
            values: vec![1.0, 0.0, 0.0, 1.0],
            n: 2,
        };
        let l = cholesky(&k, 0.0).unwrap();
        assert_eq!(l, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cholesky_recovers_two_by_two() {
        // [[0.5, 0.25], [0.25, 0.5]]: closed form l11 = sqrt(0.5),
        // l21 = 0.25/l11, l22 = sqrt(0.5 - l21^2).
        let k = KinshipMatrix {
            order: vec!["a".into(), "b".into()],
            values: vec![0.5, 0.25, 0.25, 0.5],
            n: 2,
        };
        let l = cholesky(&k, 0.0).unwrap();
        let l11 = 0.5f64.sqrt();
        let l21 = 0.25 / l11;
        let l22 = (0.5 - l21 * l21).sqrt();
        assert_abs_diff_eq!(l[0], l11, epsilon = 1e-15);
        assert_abs_diff_eq!(l[2], l21, epsilon = 1e-15);
        assert_abs_diff_eq!(l[3], l22, epsilon = 1e-15);
        // reconstruction within 1e-10 relative
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for t in 0..2 {
                    s += l[i * 2 + t] * l[j * 2 + t];
                }
                assert_abs_diff_eq!(s, k.get(i, j), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn cholesky_singular_fails_without_jitter() {
        // duplicated founder on the numerator scale: exactly singular,
        // and 1 - 1*1 = 0 is exact in floating point
        let k = KinshipMatrix {
            order: vec!["a".into(), "b".into()],
            values: vec![1.0, 1.0, 1.0, 1.0],
            n: 2,
        };
        let err = cholesky(&k, 0.0).unwrap_err();
        assert!(err.to_string().contains("minor 2"), "{err}");
        // retry policy succeeds via jitter
        let (_, jitter) = cholesky_with_retry(&k).unwrap();
        assert!(jitter > 0.0);
    }
}
