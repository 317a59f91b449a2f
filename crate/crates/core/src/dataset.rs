//! Cohort data model, CSV ingestion and reproducible splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clinical group label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "HC")]
    Hc,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "OTHER")]
    Other,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Hc, Group::Mci, Group::Ad, Group::Other];
    /// The clinical groups that enter group statistics.
    pub const CLINICAL: [Group; 3] = [Group::Hc, Group::Mci, Group::Ad];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Hc => "HC",
            Group::Mci => "MCI",
            Group::Ad => "AD",
            Group::Other => "OTHER",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HC" => Ok(Group::Hc),
            "MCI" => Ok(Group::Mci),
            "AD" => Ok(Group::Ad),
            "OTHER" => Ok(Group::Other),
            other => Err(format!("unknown group label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Chronological age in years.
    pub age: f64,
    pub group: Group,
    /// CDR sum-of-boxes, when available.
    pub cdr: Option<f64>,
    /// Regional cortical thickness (mm).
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CohortRepr")]
pub struct Cohort {
    m: usize,
    scale_tag: String,
    subjects: Vec<Subject>,
}

#[derive(Deserialize)]
struct CohortRepr {
    m: usize,
    scale_tag: String,
    subjects: Vec<Subject>,
}

impl TryFrom<CohortRepr> for Cohort {
    type Error = Error;

    fn try_from(r: CohortRepr) -> Result<Self> {
        Cohort::new(r.m, r.scale_tag, r.subjects)
    }
}

impl Cohort {
    /// Builds a cohort, checking dimensions, ages, CDR values and id uniqueness.
    pub fn new(m: usize, scale_tag: impl Into<String>, subjects: Vec<Subject>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if s.features.len() != m {
                return Err(Error::Data(format!(
                    "subject {}: {} features, cohort declares {m}",
                    s.id,
                    s.features.len()
                )));
            }
            if !(s.age > 0.0) || !s.age.is_finite() {
                return Err(Error::Data(format!("subject {}: age must be positive", s.id)));
            }
            if let Some(c) = s.cdr {
                if !(c >= 0.0) || !c.is_finite() {
                    return Err(Error::Data(format!("subject {}: negative cdr", s.id)));
                }
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate subject id {}", s.id)));
            }
        }
        Ok(Cohort {
            m,
            scale_tag: scale_tag.into(),
            subjects,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn scale_tag(&self) -> &str {
        &self.scale_tag
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.age).collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.subjects.iter().map(|s| s.features.as_slice()).collect()
    }

    pub fn group_counts(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for s in &self.subjects {
            *out.entry(s.group).or_insert(0) += 1;
        }
        out
    }

    /// Sub-cohort made of the subjects at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Cohort {
        Cohort {
            m: self.m,
            scale_tag: self.scale_tag.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    pub fn with_scale_tag(mut self, tag: impl Into<String>) -> Cohort {
        self.scale_tag = tag.into();
        self
    }

    /// Applies `f` to every feature vector, keeping the dimension.
    pub fn map_features(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Cohort> {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                features: f(&s.features),
                ..s.clone()
            })
            .collect::<Vec<_>>();
        let m = subjects.first().map_or(self.m, |s| s.features.len());
        Cohort::new(m, self.scale_tag.clone(), subjects)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Cohort> {
        Ok(serde_json::from_str(text)?)
    }
}

const RESERVED: [&str; 4] = ["id", "age", "group", "cdr"];

/// Reads a cohort CSV: `id,age,group[,cdr],f1,...,fm`.
pub fn load_cohort(path: impl AsRef<Path>, scale_tag: &str) -> Result<Cohort> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cohort(&text, &path.display().to_string(), scale_tag)
}

/// Parses cohort CSV text. `origin` is only used in error messages.
pub fn parse_cohort(text: &str, origin: &str, scale_tag: &str) -> Result<Cohort> {
    let perr = |row: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let names: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names.len() < 4 || names[0] != "id" || names[1] != "age" || names[2] != "group" {
        return Err(perr(1, "header must start with id,age,group and name at least one feature".into()));
    }
    let has_cdr = names[3] == "cdr";
    let first_feature = if has_cdr { 4 } else { 3 };
    let m = names.len() - first_feature;
    if m == 0 {
        return Err(perr(1, "no feature columns".into()));
    }
    for name in &names[first_feature..] {
        if name.is_empty() || RESERVED.contains(&name.as_str()) {
            return Err(perr(1, format!("bad feature column name {name:?}")));
        }
    }

    let mut subjects = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        if record.len() != names.len() {
            return Err(perr(
                row,
                format!("ragged row: {} fields, header has {}", record.len(), names.len()),
            ));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(perr(row, "empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(perr(row, format!("duplicate id {id}")));
        }
        let age: f64 = record[1]
            .parse()
            .map_err(|_| perr(row, format!("non-numeric age {:?}", &record[1])))?;
        if !(age > 0.0) || !age.is_finite() {
            return Err(perr(row, format!("age must be positive, got {age}")));
        }
        let group: Group = record[2].parse().map_err(|e: String| perr(row, e))?;
        let cdr = if has_cdr && !record[3].is_empty() {
            let v: f64 = record[3]
                .parse()
                .map_err(|_| perr(row, format!("non-numeric cdr {:?}", &record[3])))?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(perr(row, format!("cdr must be nonnegative, got {v}")));
            }
            Some(v)
        } else {
            None
        };
        let mut features = Vec::with_capacity(m);
        for (j, cell) in record.iter().skip(first_feature).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                perr(
                    row,
                    format!("non-numeric feature {:?} in column {}", cell, names[first_feature + j]),
                )
            })?;
            if !v.is_finite() {
                return Err(perr(row, format!("non-finite feature in column {}", names[first_feature + j])));
            }
            features.push(v);
        }
        subjects.push(Subject {
            id,
            age,
            group,
            cdr,
            features,
        });
    }
    Cohort::new(m, scale_tag, subjects)
}

/// Writes a cohort as CSV. The `cdr` column is always emitted; missing values are empty cells.
pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cohort_to_csv(cohort)).map_err(|e| Error::io(path, e))
}

pub fn cohort_to_csv(cohort: &Cohort) -> String {
    let mut out = String::from("id,age,group,cdr");
    for j in 1..=cohort.m() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for s in cohort.subjects() {
        out.push_str(&format!("{},{},{},", s.id, s.age, s.group));
        if let Some(c) = s.cdr {
            out.push_str(&c.to_string());
        }
        for v in &s.features {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    #[serde(default)]
    pub stratify_by_group: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
            stratify_by_group: false,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        SplitSpec { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::Config(format!("split fractions must lie in (0,1): {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("split fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earliest part.
pub fn apportion(n: usize, fracs: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fracs.len()).collect();
    let rem = |i: usize| (quotas[i] - counts[i] as f64).max(0.0);
    // stable sort keeps earlier parts first on ties
    order.sort_by(|&a, &b| rem(b).partial_cmp(&rem(a)).unwrap_or(std::cmp::Ordering::Equal));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Partitions a cohort into (train, validation, test). Each part keeps cohort order.
pub fn split(cohort: &Cohort, spec: &SplitSpec) -> Result<(Cohort, Cohort, Cohort)> {
    spec.validate()?;
    let fracs = [spec.train_frac, spec.val_frac, spec.test_frac];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();

    let strata: Vec<Vec<usize>> = if spec.stratify_by_group {
        Group::ALL
            .iter()
            .map(|g| {
                (0..cohort.n())
                    .filter(|&i| cohort.subjects[i].group == *g)
                    .collect::<Vec<_>>()
            })
            .filter(|v| !v.is_empty())
            .collect()
    } else {
        vec![(0..cohort.n()).collect()]
    };
    for mut idx in strata {
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), &fracs);
        let mut start = 0;
        for (p, c) in counts.into_iter().enumerate() {
            parts[p].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    for (p, name) in parts.iter_mut().zip(["train", "validation", "test"]) {
        if p.is_empty() {
            return Err(Error::Data(format!(
                "split of {} subjects leaves the {name} part empty",
                cohort.n()
            )));
        }
        p.sort_unstable();
    }
    Ok((cohort.select(&parts[0]), cohort.select(&parts[1]), cohort.select(&parts[2])))
}

/// Keeps subjects whose group is in `groups`, preserving order.
pub fn filter_group(cohort: &Cohort, groups: &BTreeSet<Group>) -> Cohort {
    let idx: Vec<usize> = (0..cohort.n())
        .filter(|&i| groups.contains(&cohort.subjects[i].group))
        .collect();
    cohort.select(&idx)
}

/// Per-feature z-scoring. Zero-variance features are only centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(cohort: &Cohort) -> Result<Standardizer> {
        if cohort.n() < 2 {
            return Err(Error::Data("standardization needs at least two subjects".into()));
        }
        let n = cohort.n() as f64;
        let m = cohort.m();
        let mut means = vec![0.0; m];
        for s in cohort.subjects() {
            for (a, v) in means.iter_mut().zip(&s.features) {
                *a += v;
            }
        }
        means.iter_mut().for_each(|a| *a /= n);
        let mut scales = vec![0.0; m];
        for s in cohort.subjects() {
            for j in 0..m {
                let d = s.features[j] - means[j];
                scales[j] += d * d;
            }
        }
        for v in &mut scales {
            let sd = (*v / n).sqrt();
            *v = if sd > 0.0 { sd } else { 1.0 };
        }
        Ok(Standardizer { means, scales })
    }

    pub fn apply(&self, cohort: &Cohort) -> Result<Cohort> {
        if cohort.m() != self.means.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on m={}, cohort has m={}",
                self.means.len(),
                cohort.m()
            )));
        }
        cohort.map_features(|x| {
            x.iter()
                .zip(self.means.iter().zip(&self.scales))
                .map(|(v, (mu, sd))| (v - mu) / sd)
                .collect()
        })
    }
}
