//! MSE objective, exact gradients, Adam and the ensemble training protocol.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{normalized_covariance, CovarianceModel};
use crate::dataset::{filter_group, split, Cohort, Group, SplitSpec};
use crate::error::{Error, Result};
use crate::vnn::engine::{backward_batch, forward_batch, predict_batch, stack_inputs};
use crate::vnn::{forward, VnnConfig, VnnModel, MODEL_FORMAT_VERSION};

pub use crate::vnn::engine::ModelGradient;

/// Which covariance the filters see while a member is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovBinding {
    /// Covariance of the member's own training split.
    #[default]
    TrainingSplit,
    /// Covariance of every subject eligible for training.
    WholeCohort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Full,
}

fn default_groups() -> BTreeSet<Group> {
    [Group::Hc].into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: BatchMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub split: SplitSpec,
    pub ensemble_size: usize,
    #[serde(default = "default_groups")]
    pub train_groups: BTreeSet<Group>,
    pub covariance: CovBinding,
    /// Global gradient-norm clipping; off when `None`.
    pub clip_grad_norm: Option<f64>,
    /// Fit the readout by ridge least squares on the initial pooled features.
    pub readout_warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0033,
            epochs: 100,
            batch: BatchMode::Full,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            split: SplitSpec::default(),
            ensemble_size: 100,
            train_groups: default_groups(),
            covariance: CovBinding::TrainingSplit,
            clip_grad_norm: None,
            readout_warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.ensemble_size == 0 {
            return Err(Error::Config("epochs and ensemble_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        if self.train_groups.is_empty() {
            return Err(Error::Config("train_groups is empty".into()));
        }
        self.split.validate()
    }
}

/// Loss curves and selection outcome of one trained model.
///
/// Index `e` of the loss vectors is the loss after `e` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub selected_epoch: usize,
    /// MAE of the selected model on `test_set`.
    pub test_mae: f64,
    pub test_set: String,
    /// Not serialized; reports must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Two-column CSV `epoch,loss`.
    pub fn loss_csv(losses: &[f64]) -> String {
        let mut out = String::from("epoch,loss\n");
        for (e, l) in losses.iter().enumerate() {
            out.push_str(&format!("{e},{l}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub format_version: u32,
    pub train_covariance: CovBinding,
    pub models: Vec<VnnModel>,
}

impl Ensemble {
    pub fn new(models: Vec<VnnModel>, train_covariance: CovBinding) -> Result<Self> {
        let e = Ensemble {
            format_version: MODEL_FORMAT_VERSION,
            train_covariance,
            models,
        };
        e.validate()?;
        Ok(e)
    }

    /// Members must share their architecture; seeds may differ.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .models
            .first()
            .ok_or_else(|| Error::Data("empty ensemble".into()))?;
        for (i, m) in self.models.iter().enumerate() {
            m.validate().map_err(|e| Error::Member {
                index: i,
                source: Box::new(e),
            })?;
            let (a, b) = (&m.config, &first.config);
            if a.widths != b.widths || a.taps_per_layer != b.taps_per_layer || a.nonlinearity != b.nonlinearity {
                return Err(Error::Shape(format!("member {i} has a different architecture")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Ensemble> {
        let e: Ensemble = serde_json::from_str(text)?;
        if e.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported format_version {}", e.format_version)));
        }
        e.validate()?;
        Ok(e)
    }
}

/// (1/n) Σ (ŷᵢ − yᵢ)².
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "mse over {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of (Φ(x) − y)² with respect to every parameter.
pub fn backward(model: &VnnModel, cov: &CovarianceModel, x: &[f64], y: f64) -> Result<ModelGradient> {
    let batch = stack_inputs([x], cov.dim())?;
    let fwd = forward_batch(model, cov, &batch)?;
    let d = 2.0 * (fwd.outputs[0] - y);
    backward_batch(model, cov, &fwd, &[d])
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn from_config(n_params: usize, cfg: &TrainConfig) -> Self {
        Adam::new(n_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn cohort_matrix(c: &Cohort) -> Result<Array2<f64>> {
    stack_inputs(c.subjects().iter().map(|s| s.features.as_slice()), c.m())
}

/// Ridge least-squares fit of the readout on the pooled final-layer features.
fn warm_start_readout(model: &mut VnnModel, cov: &CovarianceModel, x: &Array2<f64>, y: &[f64]) -> Result<()> {
    let fwd = forward_batch(model, cov, x)?;
    let (f, n) = fwd.pooled.dim();
    let means: Vec<f64> = (0..f).map(|j| fwd.pooled.row(j).sum() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut gram = DMatrix::<f64>::zeros(f, f);
    let mut rhs = DVector::<f64>::zeros(f);
    for i in 0..n {
        for a in 0..f {
            let pa = fwd.pooled[[a, i]] - means[a];
            rhs[a] += pa * (y[i] - y_mean);
            for b in 0..=a {
                gram[(a, b)] += pa * (fwd.pooled[[b, i]] - means[b]);
            }
        }
    }
    for a in 0..f {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let ridge = 1e-6 * gram.trace() / f as f64 + 1e-12;
    for a in 0..f {
        gram[(a, a)] += ridge;
    }
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("readout normal equations not positive definite".into()))?
        .solve(&rhs);
    model.readout_weights = w.iter().copied().collect();
    model.readout_bias = y_mean - w.iter().zip(&means).map(|(a, b)| a * b).sum::<f64>();
    Ok(())
}

/// Trains one model on prepared splits with a fixed covariance.
pub fn train_on_splits(
    train: &Cohort,
    val: &Cohort,
    test: &Cohort,
    vcfg: &VnnConfig,
    tcfg: &TrainConfig,
    cov: &CovarianceModel,
) -> Result<(VnnModel, TrainReport)> {
    tcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be nonempty".into()));
    }
    let started = Instant::now();
    let x_train = cohort_matrix(train)?;
    let y_train = train.ages();
    let x_val = cohort_matrix(val)?;
    let y_val = val.ages();
    let n = y_train.len() as f64;

    let mut model = VnnModel::init(vcfg)?;
    if tcfg.readout_warm_start {
        warm_start_readout(&mut model, cov, &x_train, &y_train)?;
    }
    let mut params = model.params();
    let mut adam = Adam::from_config(params.len(), tcfg);

    let val_loss_of = |model: &VnnModel, epoch: usize| -> Result<f64> {
        let l = mse_loss(&predict_batch(model, cov, &x_val)?, &y_val)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                epoch,
                msg: "validation loss is not finite".into(),
            });
        }
        Ok(l)
    };

    let mut train_loss = Vec::with_capacity(tcfg.epochs + 1);
    let mut val_loss = vec![val_loss_of(&model, 0)?];
    let mut best = (val_loss[0], 0usize, params.clone());

    for epoch in 1..=tcfg.epochs {
        let fwd = forward_batch(&model, cov, &x_train)?;
        let loss = mse_loss(&fwd.outputs, &y_train)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch - 1,
                msg: "training loss is not finite".into(),
            });
        }
        train_loss.push(loss);
        let d: Vec<f64> = fwd
            .outputs
            .iter()
            .zip(&y_train)
            .map(|(p, y)| 2.0 * (p - y) / n)
            .collect();
        let mut grad = backward_batch(&model, cov, &fwd, &d)
            .map_err(|e| Error::Divergence {
                epoch,
                msg: e.to_string(),
            })?
            .flatten();
        if let Some(max_norm) = tcfg.clip_grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                grad.iter_mut().for_each(|g| *g *= max_norm / norm);
            }
        }
        adam.step(&mut params, &grad);
        model.set_params(&params);
        let vl = val_loss_of(&model, epoch)?;
        val_loss.push(vl);
        if vl < best.0 {
            best = (vl, epoch, params.clone());
        }
    }
    let final_loss = mse_loss(&predict_batch(&model, cov, &x_train)?, &y_train)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: tcfg.epochs,
            msg: "training loss is not finite".into(),
        });
    }
    train_loss.push(final_loss);

    model.set_params(&best.2);
    let test_mae = if test.is_empty() {
        f64::NAN
    } else {
        let pred = predict_batch(&model, cov, &cohort_matrix(test)?)?;
        crate::stats::mae(&pred, &test.ages())?
    };
    let report = TrainReport {
        seed: vcfg.seed,
        split_seed: tcfg.split.seed,
        n_train: train.n(),
        n_val: val.n(),
        n_test: test.n(),
        train_loss,
        val_loss,
        selected_epoch: best.1,
        test_mae,
        test_set: format!("own test split, split seed {}", tcfg.split.seed),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Splits the eligible subjects with `tcfg.split` and trains one model against `cov`.
pub fn train_one(
    cohort: &Cohort,
    vcfg: &VnnConfig,
    tcfg: &TrainConfig,
    cov: &CovarianceModel,
) -> Result<(VnnModel, TrainReport)> {
    let eligible = filter_group(cohort, &tcfg.train_groups);
    let (train, val, test) = split(&eligible, &tcfg.split)?;
    train_on_splits(&train, &val, &test, vcfg, tcfg, cov)
}

/// Member `i` uses split seed `split.seed + i` and initialization seed `vcfg.seed + i`.
pub fn member_configs(vcfg: &VnnConfig, tcfg: &TrainConfig, i: usize) -> (VnnConfig, TrainConfig) {
    let mut v = vcfg.clone();
    v.seed = vcfg.seed.wrapping_add(i as u64);
    let mut t = tcfg.clone();
    t.split = tcfg.split.with_seed(tcfg.split.seed.wrapping_add(i as u64));
    (v, t)
}

/// Trains `ensemble_size` members, each on a fresh train/validation/test split.
///
/// Members are independent and trained in parallel; the result does not depend on
/// scheduling.
pub fn train_ensemble(cohort: &Cohort, vcfg: &VnnConfig, tcfg: &TrainConfig) -> Result<(Ensemble, Vec<TrainReport>)> {
    vcfg.validate()?;
    tcfg.validate()?;
    let eligible = filter_group(cohort, &tcfg.train_groups);
    if eligible.is_empty() {
        return Err(Error::Data(format!(
            "no subjects in training groups {:?}",
            tcfg.train_groups
        )));
    }
    let whole = match tcfg.covariance {
        CovBinding::WholeCohort => Some(normalized_covariance(&eligible)?),
        CovBinding::TrainingSplit => None,
    };
    let results: Vec<Result<(VnnModel, TrainReport)>> = (0..tcfg.ensemble_size)
        .into_par_iter()
        .map(|i| {
            let (v, t) = member_configs(vcfg, tcfg, i);
            let (train, val, test) = split(&eligible, &t.split)?;
            let cov = match &whole {
                Some(c) => c.clone(),
                None => normalized_covariance(&train)?,
            };
            train_on_splits(&train, &val, &test, &v, &t, &cov)
        })
        .collect();
    let mut models = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let (m, rep) = r.map_err(|e| Error::Member {
            index: i,
            source: Box::new(e),
        })?;
        models.push(m);
        reports.push(rep);
    }
    Ok((Ensemble::new(models, tcfg.covariance)?, reports))
}

/// Arithmetic mean of the member outputs for one subject.
pub fn predict_ensemble(ens: &Ensemble, cov: &CovarianceModel, x: &[f64]) -> Result<f64> {
    if ens.is_empty() {
        return Err(Error::Data("empty ensemble".into()));
    }
    let mut sum = 0.0;
    for m in &ens.models {
        sum += forward(m, cov, x)?;
    }
    Ok(sum / ens.len() as f64)
}

/// Ensemble mean for every subject of a cohort.
pub fn predict_ensemble_cohort(ens: &Ensemble, cov: &CovarianceModel, cohort: &Cohort) -> Result<Vec<f64>> {
    if ens.is_empty() {
        return Err(Error::Data("empty ensemble".into()));
    }
    if cohort.m() != cov.dim() {
        return Err(Error::Shape(format!(
            "cohort has m={}, covariance has m={}",
            cohort.m(),
            cov.dim()
        )));
    }
    let x = cohort_matrix(cohort)?;
    let mut sum = vec![0.0; cohort.n()];
    for m in &ens.models {
        for (s, p) in sum.iter_mut().zip(predict_batch(m, cov, &x)?) {
            *s += p;
        }
    }
    let k = ens.len() as f64;
    Ok(sum.into_iter().map(|s| s / k).collect())
}
