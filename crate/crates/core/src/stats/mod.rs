//! Error metrics and the group tests used on Δ-Age.

pub mod special;
pub mod tukey;

use serde::{Deserialize, Serialize};

use crate::brainage::DeltaAgeReport;
use crate::dataset::Group;
use crate::error::{Error, Result};

/// Mean absolute error.
pub fn mae(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "mae over {} predictions and {} targets",
            predictions.len(),
            truth.len()
        )));
    }
    Ok(predictions.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolated quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Pearson correlation with a two-sided t-test p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Shape(format!("pearson over {} and {} values", n, y.len())));
    }
    if n < 3 {
        return Err(Error::Data(format!("pearson needs at least 3 pairs, got {n}")));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data("pearson on a constant sample".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(PearsonResult {
        r,
        p: pearson_p(r, n),
        n,
    })
}

/// Two-sided p-value of a correlation `r` over `n` pairs.
pub fn pearson_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    special::t_two_sided_p(t, df)
}

/// Labelled sample entering a group comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub label: String,
    pub values: Vec<f64>,
}

impl GroupSample {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        GroupSample {
            label: label.into(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
    pub ms_within: f64,
}

fn check_groups(groups: &[GroupSample]) -> Result<usize> {
    if groups.len() < 2 {
        return Err(Error::Data("group comparison needs at least two groups".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.values.is_empty()) {
        return Err(Error::Data(format!("group {} is empty", g.label)));
    }
    if groups.iter().flat_map(|g| &g.values).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in group comparison".into()));
    }
    let total: usize = groups.iter().map(|g| g.values.len()).sum();
    if total <= groups.len() {
        return Err(Error::Data("no within-group degrees of freedom".into()));
    }
    Ok(total)
}

/// One-way ANOVA.
pub fn anova_oneway(groups: &[GroupSample]) -> Result<AnovaResult> {
    let total = check_groups(groups)?;
    let grand = groups.iter().flat_map(|g| &g.values).sum::<f64>() / total as f64;
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for g in groups {
        let m = mean(&g.values);
        ssb += g.values.len() as f64 * (m - grand) * (m - grand);
        ssw += g.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let dfb = groups.len() - 1;
    let dfw = total - groups.len();
    let msw = ssw / dfw as f64;
    if msw <= 0.0 && ssb <= 0.0 {
        return Err(Error::Numerical("F undefined: no variance within or between groups".into()));
    }
    let f = if msw <= 0.0 { f64::INFINITY } else { (ssb / dfb as f64) / msw };
    Ok(AnovaResult {
        f,
        df_between: dfb,
        df_within: dfw,
        p: special::f_sf(f, dfb as f64, dfw as f64),
        ms_within: msw,
    })
}

/// One pairwise comparison; `mean_diff` is mean(a) − mean(b).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub a: String,
    pub b: String,
    pub mean_diff: f64,
    pub q: f64,
    pub p: f64,
    /// `p < alpha`.
    pub reject: bool,
}

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Tukey–Kramer honest significant difference over all pairs `i < j`.
pub fn tukey_hsd(groups: &[GroupSample], alpha: f64) -> Result<Vec<TukeyPair>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0,1)")));
    }
    if let Some(g) = groups.iter().find(|g| g.values.len() < 2) {
        return Err(Error::Data(format!("group {} needs at least 2 values", g.label)));
    }
    let anova = anova_oneway(groups)?;
    let k = groups.len();
    let means: Vec<f64> = groups.iter().map(|g| mean(&g.values)).collect();
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let (ni, nj) = (groups[i].values.len() as f64, groups[j].values.len() as f64);
            let se = (anova.ms_within / 2.0 * (1.0 / ni + 1.0 / nj)).sqrt();
            let diff = means[i] - means[j];
            let q = diff.abs() / se;
            let p = (1.0 - tukey::ptukey(q, k, anova.df_within as f64)).clamp(0.0, 1.0);
            out.push(TukeyPair {
                a: groups[i].label.clone(),
                b: groups[j].label.clone(),
                mean_diff: diff,
                q,
                p,
                reject: p < alpha,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub groups: Vec<String>,
    pub anova: AnovaResult,
    pub alpha: f64,
    pub tukey: Vec<TukeyPair>,
}

impl GroupComparison {
    pub fn compute(groups: &[GroupSample], alpha: f64) -> Result<Self> {
        Ok(GroupComparison {
            groups: groups.iter().map(|g| g.label.clone()).collect(),
            anova: anova_oneway(groups)?,
            alpha,
            tukey: tukey_hsd(groups, alpha)?,
        })
    }

    pub fn pair(&self, a: &str, b: &str) -> Option<&TukeyPair> {
        self.tukey
            .iter()
            .find(|t| (t.a == a && t.b == b) || (t.a == b && t.b == a))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `pair,mean_diff,q,p`.
    pub fn tukey_csv(&self) -> String {
        let mut out = String::from("pair,mean_diff,q,p\n");
        for t in &self.tukey {
            out.push_str(&format!("{}-{},{},{},{}\n", t.a, t.b, t.mean_diff, t.q, t.p));
        }
        out
    }
}

/// ANOVA and Tukey over the Δ-Age of each clinical group present; OTHER is left out.
pub fn summarize_groups(report: &DeltaAgeReport) -> Result<GroupComparison> {
    let groups: Vec<GroupSample> = Group::CLINICAL
        .iter()
        .map(|&g| GroupSample::new(g.as_str(), report.group_values(g)))
        .filter(|g| !g.values.is_empty())
        .collect();
    GroupComparison::compute(&groups, DEFAULT_ALPHA)
}
