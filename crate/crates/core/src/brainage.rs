//! Age-bias correction, Δ-Age and the two cohort-level training protocols.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::covariance::{normalized_covariance, CovarianceModel};
use crate::dataset::{filter_group, Cohort, Group};
use crate::error::{Error, Result};
use crate::stats::{self, GroupComparison, PearsonResult};
use crate::training::{predict_ensemble_cohort, train_ensemble, CovBinding, Ensemble, TrainConfig, TrainReport};
use crate::vnn::VnnConfig;

/// Linear model of the estimation error: Φ − y ≈ α·y + β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrector {
    pub alpha: f64,
    pub beta: f64,
    pub fit_group: BTreeSet<Group>,
    pub fit_n: usize,
}

impl BiasCorrector {
    pub fn identity() -> Self {
        BiasCorrector {
            alpha: 0.0,
            beta: 0.0,
            fit_group: BTreeSet::new(),
            fit_n: 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Ordinary least squares of (Φ − y) on y over `(Φ, y)` pairs.
pub fn fit_bias(estimates: &[(f64, f64)], fit_group: BTreeSet<Group>) -> Result<BiasCorrector> {
    let n = estimates.len();
    if n < 2 {
        return Err(Error::Data(format!("bias correction needs at least 2 subjects, got {n}")));
    }
    if estimates.iter().any(|(p, y)| !p.is_finite() || !y.is_finite()) {
        return Err(Error::Data("non-finite estimate or age".into()));
    }
    let nf = n as f64;
    let y_mean = estimates.iter().map(|e| e.1).sum::<f64>() / nf;
    let r_mean = estimates.iter().map(|(p, y)| p - y).sum::<f64>() / nf;
    let (mut syy, mut sry) = (0.0, 0.0);
    for (p, y) in estimates {
        let dy = y - y_mean;
        syy += dy * dy;
        sry += (p - y - r_mean) * dy;
    }
    if syy == 0.0 {
        return Err(Error::Data("ages have zero variance".into()));
    }
    let alpha = sry / syy;
    Ok(BiasCorrector {
        alpha,
        beta: r_mean - alpha * y_mean,
        fit_group,
        fit_n: n,
    })
}

/// Returns `(brain_age, delta_age)` with ŷ_B = Φ − (α·y + β) and Δ-Age = ŷ_B − y.
pub fn apply_bias(bc: &BiasCorrector, phi: f64, age: f64) -> (f64, f64) {
    let brain_age = phi - (bc.alpha * age + bc.beta);
    (brain_age, brain_age - age)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaAgeRecord {
    pub id: String,
    pub group: Group,
    pub age: f64,
    pub phi: f64,
    pub brain_age: f64,
    pub delta_age: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMae {
    pub group: Group,
    pub n: usize,
    /// |Φ − y| averaged over the group.
    pub mae_raw: f64,
    /// |ŷ_B − y| averaged over the group.
    pub mae_brain_age: f64,
    pub mean_delta_age: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train on healthy controls only.
    #[default]
    HcOnly,
    /// Train on every subject regardless of diagnosis.
    FullCohort,
}

impl Protocol {
    pub fn train_groups(self) -> BTreeSet<Group> {
        match self {
            Protocol::HcOnly => [Group::Hc].into(),
            Protocol::FullCohort => Group::ALL.into(),
        }
    }
}

/// Covariance the ensemble is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalCovariance {
    #[default]
    WholeCohort,
    TrainingSubjects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BrainAgeConfig {
    pub protocol: Protocol,
    pub eval_covariance: EvalCovariance,
}

/// How the numbers in a report were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub scale_tag: String,
    pub m: usize,
    pub protocol: Option<Protocol>,
    pub train_groups: BTreeSet<Group>,
    pub train_covariance: CovBinding,
    pub eval_covariance: String,
    pub ensemble_size: usize,
    pub corrector: BiasCorrector,
    pub corrector_source: String,
    /// Correlation test used for Δ-Age against CDR.
    pub correlation_test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaAgeReport {
    pub meta: ReportMeta,
    pub records: Vec<DeltaAgeRecord>,
    pub group_mae: Vec<GroupMae>,
    /// ANOVA and Tukey over clinical groups; absent when fewer than two groups qualify.
    pub stats: Option<GroupComparison>,
    pub cdr_correlation: Option<PearsonResult>,
}

pub const CORRELATION_TEST: &str = "pearson, two-sided t test";

impl DeltaAgeReport {
    /// Builds records, per-group errors and statistics from raw ensemble estimates.
    pub fn assemble(cohort: &Cohort, phi: &[f64], mut meta: ReportMeta) -> Result<Self> {
        if phi.len() != cohort.n() {
            return Err(Error::Shape(format!("{} estimates for {} subjects", phi.len(), cohort.n())));
        }
        meta.correlation_test = CORRELATION_TEST.into();
        let records: Vec<DeltaAgeRecord> = cohort
            .subjects()
            .iter()
            .zip(phi)
            .map(|(s, &p)| {
                let (brain_age, delta_age) = apply_bias(&meta.corrector, p, s.age);
                DeltaAgeRecord {
                    id: s.id.clone(),
                    group: s.group,
                    age: s.age,
                    phi: p,
                    brain_age,
                    delta_age,
                    cdr: s.cdr,
                }
            })
            .collect();
        let group_mae = group_mae(&records);
        let mut report = DeltaAgeReport {
            meta,
            records,
            group_mae,
            stats: None,
            cdr_correlation: None,
        };
        report.stats = stats::summarize_groups(&report).ok();
        let (cdr, delta): (Vec<f64>, Vec<f64>) = report
            .records
            .iter()
            .filter_map(|r| r.cdr.map(|c| (c, r.delta_age)))
            .unzip();
        report.cdr_correlation = stats::pearson(&delta, &cdr).ok();
        Ok(report)
    }

    pub fn group_values(&self, group: Group) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.group == group)
            .map(|r| r.delta_age)
            .collect()
    }

    pub fn mean_delta(&self, group: Group) -> Option<f64> {
        let v = self.group_values(group);
        (!v.is_empty()).then(|| stats::mean(&v))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `id,group,age,phi,brain_age,delta_age`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,group,age,phi,brain_age,delta_age\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id, r.group, r.age, r.phi, r.brain_age, r.delta_age
            ));
        }
        out
    }

    /// Per-group five-number summary with 1.5·IQR whiskers and the points beyond them.
    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("group,n,whisker_low,q1,median,q3,whisker_high,outliers\n");
        for g in Group::ALL {
            let mut v = self.group_values(g);
            if v.is_empty() {
                continue;
            }
            let b = BoxStats::from_values(&mut v);
            let outliers: Vec<String> = b.outliers.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                g,
                v.len(),
                b.whisker_low,
                b.q1,
                b.median,
                b.q3,
                b.whisker_high,
                outliers.join(";")
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    /// Sorts `values` in place.
    pub fn from_values(values: &mut [f64]) -> BoxStats {
        values.sort_by(f64::total_cmp);
        let q1 = stats::quantile_sorted(values, 0.25);
        let median = stats::quantile_sorted(values, 0.5);
        let q3 = stats::quantile_sorted(values, 0.75);
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = values.iter().copied().filter(|v| (lo..=hi).contains(v)).collect();
        BoxStats {
            q1,
            median,
            q3,
            whisker_low: inside.first().copied().unwrap_or(q1),
            whisker_high: inside.last().copied().unwrap_or(q3),
            outliers: values.iter().copied().filter(|v| !(lo..=hi).contains(v)).collect(),
        }
    }
}

fn group_mae(records: &[DeltaAgeRecord]) -> Vec<GroupMae> {
    Group::ALL
        .iter()
        .filter_map(|&g| {
            let rs: Vec<&DeltaAgeRecord> = records.iter().filter(|r| r.group == g).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            Some(GroupMae {
                group: g,
                n: rs.len(),
                mae_raw: rs.iter().map(|r| (r.phi - r.age).abs()).sum::<f64>() / n,
                mae_brain_age: rs.iter().map(|r| (r.brain_age - r.age).abs()).sum::<f64>() / n,
                mean_delta_age: rs.iter().map(|r| r.delta_age).sum::<f64>() / n,
            })
        })
        .collect()
}

/// Fits the corrector on every healthy control of `cohort`.
pub fn fit_on_hc(cohort: &Cohort, phi: &[f64]) -> Result<BiasCorrector> {
    let pairs: Vec<(f64, f64)> = cohort
        .subjects()
        .iter()
        .zip(phi)
        .filter(|(s, _)| s.group == Group::Hc)
        .map(|(s, &p)| (p, s.age))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!("cohort {} has no HC subjects", cohort.scale_tag())));
    }
    fit_bias(&pairs, [Group::Hc].into())
}

/// Evaluation covariance for `cohort` under `binding`.
pub fn evaluation_covariance(
    cohort: &Cohort,
    binding: EvalCovariance,
    train_groups: &BTreeSet<Group>,
) -> Result<CovarianceModel> {
    match binding {
        EvalCovariance::WholeCohort => normalized_covariance(cohort),
        EvalCovariance::TrainingSubjects => normalized_covariance(&filter_group(cohort, train_groups)),
    }
}

/// Scores a cohort with a trained ensemble, fits the HC corrector and assembles the report.
pub fn score_cohort(
    ens: &Ensemble,
    cohort: &Cohort,
    cfg: &BrainAgeConfig,
    train_groups: &BTreeSet<Group>,
) -> Result<DeltaAgeReport> {
    if !cohort.subjects().iter().any(|s| s.group == Group::Hc) {
        return Err(Error::Data(format!("cohort {} has no HC subjects", cohort.scale_tag())));
    }
    let cov = evaluation_covariance(cohort, cfg.eval_covariance, train_groups)?;
    let phi = predict_ensemble_cohort(ens, &cov, cohort)?;
    let corrector = fit_on_hc(cohort, &phi)?;
    let meta = ReportMeta {
        scale_tag: cohort.scale_tag().to_string(),
        m: cohort.m(),
        protocol: Some(cfg.protocol),
        train_groups: train_groups.clone(),
        train_covariance: ens.train_covariance,
        eval_covariance: match cfg.eval_covariance {
            EvalCovariance::WholeCohort => "whole_cohort".into(),
            EvalCovariance::TrainingSubjects => "training_subjects".into(),
        },
        ensemble_size: ens.len(),
        corrector,
        corrector_source: format!("fit on all {} HC subjects", cohort.group_counts().get(&Group::Hc).unwrap_or(&0)),
        correlation_test: CORRELATION_TEST.into(),
    };
    DeltaAgeReport::assemble(cohort, &phi, meta)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: DeltaAgeReport,
    pub ensemble: Ensemble,
    pub train_reports: Vec<TrainReport>,
}

/// Trains an ensemble under `cfg.protocol` and turns its estimates into Δ-Age.
pub fn run_pipeline(cohort: &Cohort, cfg: &BrainAgeConfig, vcfg: &VnnConfig, tcfg: &TrainConfig) -> Result<PipelineRun> {
    if !cohort.subjects().iter().any(|s| s.group == Group::Hc) {
        return Err(Error::Data(format!("cohort {} has no HC subjects", cohort.scale_tag())));
    }
    let tcfg = TrainConfig {
        train_groups: cfg.protocol.train_groups(),
        ..tcfg.clone()
    };
    let (ensemble, train_reports) = train_ensemble(cohort, vcfg, &tcfg)?;
    let report = score_cohort(&ensemble, cohort, cfg, &tcfg.train_groups)?;
    Ok(PipelineRun {
        report,
        ensemble,
        train_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Subject;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hc() -> BTreeSet<Group> {
        [Group::Hc].into()
    }

    #[test]
    fn perfect_predictor_needs_no_correction() {
        let e: Vec<(f64, f64)> = (0..10).map(|i| (50.0 + i as f64, 50.0 + i as f64)).collect();
        let bc = fit_bias(&e, hc()).unwrap();
        assert!(bc.alpha.abs() < 1e-14 && bc.beta.abs() < 1e-12);
    }

    #[test]
    fn exact_linear_bias_is_recovered() {
        let e: Vec<(f64, f64)> = (0..10).map(|i| (0.5 * (50.0 + i as f64) + 10.0, 50.0 + i as f64)).collect();
        let bc = fit_bias(&e, hc()).unwrap();
        assert!((bc.alpha + 0.5).abs() < 1e-12);
        assert!((bc.beta - 10.0).abs() < 1e-10);
        for (p, y) in &e {
            assert!(apply_bias(&bc, *p, *y).1.abs() < 1e-10);
        }
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<(f64, f64)> = (0..40)
            .map(|_| {
                let y = rng.random_range(55.0..85.0);
                (0.7 * y + 20.0 + rng.random_range(-5.0..5.0), y)
            })
            .collect();
        let bc = fit_bias(&e, hc()).unwrap();
        // [n Σy; Σy Σy²][β α]ᵀ = [Σr Σry]ᵀ solved by Cramer's rule
        let n = e.len() as f64;
        let (sy, syy) = (e.iter().map(|x| x.1).sum::<f64>(), e.iter().map(|x| x.1 * x.1).sum::<f64>());
        let (sr, sry) = (
            e.iter().map(|(p, y)| p - y).sum::<f64>(),
            e.iter().map(|(p, y)| (p - y) * y).sum::<f64>(),
        );
        let det = n * syy - sy * sy;
        let alpha = (n * sry - sy * sr) / det;
        let beta = (syy * sr - sy * sry) / det;
        assert!((bc.alpha - alpha).abs() < 1e-10);
        assert!((bc.beta - beta).abs() < 1e-10);
    }

    #[test]
    fn apply_by_hand() {
        let bc = BiasCorrector {
            alpha: 0.1,
            beta: -2.0,
            ..BiasCorrector::identity()
        };
        let (b, d) = apply_bias(&bc, 70.0, 60.0);
        assert!((b - 66.0).abs() < 1e-12 && (d - 6.0).abs() < 1e-12);
        assert_eq!(apply_bias(&BiasCorrector::identity(), 71.5, 60.0).0, 71.5);
    }

    #[test]
    fn degenerate_fits() {
        assert!(fit_bias(&[(1.0, 60.0)], hc()).is_err());
        assert!(fit_bias(&[(1.0, 60.0), (2.0, 60.0)], hc()).is_err());
    }

    fn toy_cohort() -> (Cohort, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let groups = [Group::Hc, Group::Hc, Group::Mci, Group::Ad];
        let subjects: Vec<Subject> = (0..40)
            .map(|i| Subject {
                id: format!("s{i}"),
                age: rng.random_range(55.0..85.0),
                group: groups[i % 4],
                cdr: (i % 4 != 0).then(|| (i % 7) as f64),
                features: vec![1.0, 2.0],
            })
            .collect();
        let phi = subjects
            .iter()
            .map(|s| s.age + rng.random_range(-3.0..3.0) + if s.group == Group::Ad { 5.0 } else { 0.0 })
            .collect();
        (Cohort::new(2, "toy", subjects).unwrap(), phi)
    }

    fn meta(corrector: BiasCorrector) -> ReportMeta {
        ReportMeta {
            scale_tag: "toy".into(),
            m: 2,
            protocol: None,
            train_groups: hc(),
            train_covariance: CovBinding::TrainingSplit,
            eval_covariance: "whole_cohort".into(),
            ensemble_size: 1,
            corrector,
            corrector_source: "test".into(),
            correlation_test: String::new(),
        }
    }

    #[test]
    fn report_tables_are_consistent() {
        let (c, phi) = toy_cohort();
        let bc = fit_on_hc(&c, &phi).unwrap();
        let r = DeltaAgeReport::assemble(&c, &phi, meta(bc)).unwrap();
        assert_eq!(r.records.len(), 40);
        assert!(r.mean_delta(Group::Hc).unwrap().abs() < 1e-10);
        for g in &r.group_mae {
            let v = r.group_values(g.group);
            assert_eq!(v.len(), g.n);
            assert!((stats::mean(&v) - g.mean_delta_age).abs() < 1e-12);
        }
        assert!(r.stats.is_some());
        assert!(r.cdr_correlation.is_some());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 41);
        assert!(csv.starts_with("id,group,age,phi,brain_age,delta_age\n"));
        let back = DeltaAgeReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.boxplot_csv().lines().count(), 4);
    }

    #[test]
    fn box_stats_flag_outliers() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0, 100.0];
        let b = BoxStats::from_values(&mut v);
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 4.0));
    }
}
