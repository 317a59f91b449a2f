//! Re-binding trained taps to other scales and sites, and measuring what changes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brainage::{fit_on_hc, BiasCorrector, DeltaAgeReport, ReportMeta, CORRELATION_TEST};
use crate::covariance::{normalized_covariance, CovarianceModel};
use crate::dataset::{Cohort, Group};
use crate::error::{Error, Result};
use crate::stats::GroupComparison;
use crate::training::{predict_ensemble, predict_ensemble_cohort, Ensemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rebias {
    /// Apply the corrector fit at the source site unchanged.
    #[default]
    KeepSourceCorrector,
    /// Refit the corrector on the target cohort's healthy controls.
    RefitOnTargetHc,
}

/// Subjects whose covariance the target evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetCovariance {
    #[default]
    WholeCohort,
    HealthyControls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub rebias: Rebias,
    pub eval_covariance: TargetCovariance,
}

/// An ensemble whose filters are evaluated with a particular covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundEnsemble {
    pub ensemble: Ensemble,
    pub cov: CovarianceModel,
}

impl BoundEnsemble {
    pub fn m(&self) -> usize {
        self.cov.dim()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        predict_ensemble(&self.ensemble, &self.cov, x)
    }

    pub fn predict_cohort(&self, cohort: &Cohort) -> Result<Vec<f64>> {
        predict_ensemble_cohort(&self.ensemble, &self.cov, cohort)
    }
}

/// Binds the unchanged taps of `ens` to `target_cov`.
pub fn transfer_model(ens: &Ensemble, target_cov: &CovarianceModel) -> BoundEnsemble {
    BoundEnsemble {
        ensemble: ens.clone(),
        cov: target_cov.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutput {
    pub id: String,
    pub phi_a: f64,
    pub phi_b: f64,
    pub abs_diff: f64,
}

/// Empirical transferability constant over paired subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub m_a: usize,
    pub m_b: usize,
    pub mean: f64,
    pub max: f64,
    /// Sorted by subject id.
    pub pairs: Vec<PairedOutput>,
}

fn index_by_id(c: &Cohort) -> BTreeMap<&str, usize> {
    c.subjects().iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
}

/// Per-subject |Φ(x_a; C_a) − Φ(x_b; C_b)| for the same subjects observed twice.
pub fn measure_epsilon(
    ens: &Ensemble,
    a: &Cohort,
    b: &Cohort,
    cov_a: &CovarianceModel,
    cov_b: &CovarianceModel,
) -> Result<EpsilonSummary> {
    let ia = index_by_id(a);
    let ib = index_by_id(b);
    if ia.len() != ib.len() || ia.keys().zip(ib.keys()).any(|(x, y)| x != y) {
        return Err(Error::Data(format!(
            "cohorts {} and {} do not contain the same subjects",
            a.scale_tag(),
            b.scale_tag()
        )));
    }
    if ia.is_empty() {
        return Err(Error::Data("no subjects to pair".into()));
    }
    let phi_a = predict_ensemble_cohort(ens, cov_a, a)?;
    let phi_b = predict_ensemble_cohort(ens, cov_b, b)?;
    let pairs: Vec<PairedOutput> = ia
        .iter()
        .map(|(id, &i)| {
            let j = ib[id];
            PairedOutput {
                id: id.to_string(),
                phi_a: phi_a[i],
                phi_b: phi_b[j],
                abs_diff: (phi_a[i] - phi_b[j]).abs(),
            }
        })
        .collect();
    let mean = pairs.iter().map(|p| p.abs_diff).sum::<f64>() / pairs.len() as f64;
    let max = pairs.iter().map(|p| p.abs_diff).fold(0.0, f64::max);
    Ok(EpsilonSummary {
        m_a: a.m(),
        m_b: b.m(),
        mean,
        max,
        pairs,
    })
}

/// Same architecture and readout, with the taps of every layer shuffled.
pub fn permuted_taps_control(ens: &Ensemble, seed: u64) -> Result<Ensemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = ens
        .models
        .iter()
        .map(|m| {
            let mut m = m.clone();
            for layer in &mut m.taps.layers {
                layer.coeffs_mut().shuffle(&mut rng);
            }
            m
        })
        .collect();
    Ensemble::new(models, ens.train_covariance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub target_tag: String,
    pub m: usize,
    pub config: TransferConfig,
    /// Output discrepancy against the source scale when subjects are shared.
    pub epsilon: Option<EpsilonSummary>,
    /// Mean HC Δ-Age; nonzero values reveal a site offset under the source corrector.
    pub hc_offset: f64,
    pub report: DeltaAgeReport,
}

impl TransferReport {
    pub fn stats(&self) -> Option<&GroupComparison> {
        self.report.stats.as_ref()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// What was learned at the source: the ensemble, its corrector and how it was evaluated.
#[derive(Debug, Clone)]
pub struct SourceModel<'a> {
    pub ensemble: &'a Ensemble,
    pub corrector: &'a BiasCorrector,
    pub meta: &'a ReportMeta,
    /// Source cohort and its evaluation covariance, for ε on shared subjects.
    pub paired: Option<(&'a Cohort, &'a CovarianceModel)>,
}

/// Evaluates the source ensemble on `target` and builds its Δ-Age report.
pub fn transfer_pipeline(source: &SourceModel, target: &Cohort, cfg: &TransferConfig) -> Result<TransferReport> {
    let cov_cohort = match cfg.eval_covariance {
        TargetCovariance::WholeCohort => target.clone(),
        TargetCovariance::HealthyControls => crate::dataset::filter_group(target, &[Group::Hc].into()),
    };
    let cov = normalized_covariance(&cov_cohort)?;
    let bound = transfer_model(source.ensemble, &cov);
    let phi = bound.predict_cohort(target)?;
    let (corrector, provenance) = match cfg.rebias {
        Rebias::KeepSourceCorrector => (
            source.corrector.clone(),
            format!("source corrector ({})", source.meta.corrector_source),
        ),
        Rebias::RefitOnTargetHc => {
            let c = fit_on_hc(target, &phi)?;
            let note = format!("refit on {} target HC subjects", c.fit_n);
            (c, note)
        }
    };
    let meta = ReportMeta {
        scale_tag: target.scale_tag().to_string(),
        m: target.m(),
        corrector,
        corrector_source: provenance,
        eval_covariance: match cfg.eval_covariance {
            TargetCovariance::WholeCohort => "target_whole_cohort".into(),
            TargetCovariance::HealthyControls => "target_hc".into(),
        },
        correlation_test: CORRELATION_TEST.into(),
        ..source.meta.clone()
    };
    let report = DeltaAgeReport::assemble(target, &phi, meta)?;
    let epsilon = match source.paired {
        Some((src, src_cov)) if same_subjects(src, target) => {
            Some(measure_epsilon(source.ensemble, src, target, src_cov, &cov)?)
        }
        _ => None,
    };
    let hc_offset = report
        .mean_delta(Group::Hc)
        .ok_or_else(|| Error::Data(format!("target {} has no HC subjects", target.scale_tag())))?;
    Ok(TransferReport {
        target_tag: target.scale_tag().to_string(),
        m: target.m(),
        config: cfg.clone(),
        epsilon,
        hc_offset,
        report,
    })
}

fn same_subjects(a: &Cohort, b: &Cohort) -> bool {
    index_by_id(a).keys().eq(index_by_id(b).keys())
}
