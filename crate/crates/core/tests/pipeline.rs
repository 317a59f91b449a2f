mod common;

use std::collections::BTreeSet;

use covnn::brainage::{run_pipeline, BrainAgeConfig, BoxStats};
use covnn::covariance::normalized_covariance;
use covnn::dataset::{split, Group};
use covnn::stats::{mean, quantile_sorted};
use covnn::synth::{generate_multiscale, GraphonSpec, PathologySpec, ScaleSpec};
use covnn::training::{train_ensemble, train_one, TrainConfig};
use covnn::transfer::{transfer_pipeline, Rebias, SourceModel, TransferConfig};
use covnn::vnn::{forward, Nonlinearity, VnnConfig};

fn small_vnn(seed: u64) -> VnnConfig {
    VnnConfig {
        widths: vec![4, 4],
        seed,
        ..VnnConfig::default()
    }
}

fn all_groups() -> BTreeSet<Group> {
    Group::ALL.into()
}

#[test]
fn learns_a_shared_linear_factor() {
    let cohort = common::linear_cohort(200, 12, 0.0, 5);
    let tcfg = TrainConfig {
        train_groups: all_groups(),
        ..TrainConfig::default()
    };
    let cov = normalized_covariance(&split(&cohort, &tcfg.split).unwrap().0).unwrap();
    for seed in 0..4 {
        let vcfg = VnnConfig {
            nonlinearity: Nonlinearity::Tanh,
            ..small_vnn(seed)
        };
        let (_, report) = train_one(&cohort, &vcfg, &tcfg, &cov).unwrap();
        assert!(report.test_mae <= 0.3, "seed {seed}: test MAE {}", report.test_mae);
        assert_eq!(report.train_loss.len(), tcfg.epochs + 1);
        assert!(report.val_loss[report.selected_epoch] <= report.val_loss[0]);
    }
}

#[test]
fn dead_relu_initialization_falls_back_to_the_mean_age() {
    let cohort = common::linear_cohort(200, 12, 0.0, 5);
    let tcfg = TrainConfig {
        train_groups: all_groups(),
        ..TrainConfig::default()
    };
    let (train, _, _) = split(&cohort, &tcfg.split).unwrap();
    let cov = normalized_covariance(&train).unwrap();
    let (model, _) = train_one(&cohort, &small_vnn(1), &tcfg, &cov).unwrap();
    let phi: Vec<f64> = cohort.subjects().iter().map(|s| forward(&model, &cov, &s.features).unwrap()).collect();
    assert!(phi.iter().all(|p| (p - phi[0]).abs() <= 1e-9));
    assert!((phi[0] - mean(&train.ages())).abs() <= 0.05, "{} vs {}", phi[0], mean(&train.ages()));
}

#[test]
fn noiseless_synthetic_ages_are_recovered() {
    let g = GraphonSpec {
        variance: 0.0,
        seed: 11,
        ..GraphonSpec::default()
    };
    let data = generate_multiscale(&g, &ScaleSpec { scales: vec![40] }, 200, &PathologySpec::null()).unwrap();
    let tcfg = TrainConfig {
        ensemble_size: 1,
        train_groups: all_groups(),
        ..TrainConfig::default()
    };
    let (_, reports) = train_ensemble(data.cohort(40).unwrap(), &small_vnn(2), &tcfg).unwrap();
    assert!(reports[0].test_mae <= 0.2, "test MAE {}", reports[0].test_mae);
}

#[test]
fn ensemble_members_differ_and_rerun_identically() {
    let cohort = common::linear_cohort(120, 6, 0.3, 9);
    let tcfg = TrainConfig {
        ensemble_size: 5,
        epochs: 20,
        train_groups: all_groups(),
        ..TrainConfig::default()
    };
    let (ens, reports) = train_ensemble(&cohort, &small_vnn(3), &tcfg).unwrap();
    assert_eq!(ens.len(), 5);
    assert_eq!(reports.len(), 5);
    let seeds: BTreeSet<u64> = reports.iter().map(|r| r.seed).collect();
    let split_seeds: BTreeSet<u64> = reports.iter().map(|r| r.split_seed).collect();
    assert_eq!((seeds.len(), split_seeds.len()), (5, 5));
    let (again, again_reports) = train_ensemble(&cohort, &small_vnn(3), &tcfg).unwrap();
    assert_eq!(again.to_json().unwrap(), ens.to_json().unwrap());
    assert_eq!(
        serde_json::to_string(&again_reports).unwrap(),
        serde_json::to_string(&reports).unwrap()
    );
}

fn synthetic_run() -> (covnn::dataset::Cohort, covnn::brainage::PipelineRun) {
    let g = GraphonSpec {
        seed: 21,
        ..GraphonSpec::default()
    };
    let data = generate_multiscale(&g, &ScaleSpec { scales: vec![60] }, 150, &PathologySpec::default()).unwrap();
    let cohort = data.cohort(60).unwrap().clone();
    let tcfg = TrainConfig {
        ensemble_size: 3,
        epochs: 40,
        ..TrainConfig::default()
    };
    let run = run_pipeline(&cohort, &BrainAgeConfig::default(), &small_vnn(4), &tcfg).unwrap();
    (cohort, run)
}

#[test]
fn brain_age_report_is_consistent() {
    let (cohort, run) = synthetic_run();
    let report = &run.report;
    assert_eq!(report.records.len(), cohort.n());
    assert!(report.mean_delta(Group::Hc).unwrap().abs() <= 1e-9);
    assert!(report.stats.is_some());

    // Box-plot quartiles recomputed from the flat CSV.
    let mut by_group: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "id,group,age,phi,brain_age,delta_age");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        by_group.entry(cols[1].to_string()).or_default().push(cols[5].parse().unwrap());
    }
    let boxes = report.boxplot_csv();
    for line in boxes.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let mut values = by_group[cols[0]].clone();
        values.sort_by(f64::total_cmp);
        assert_eq!(cols[1].parse::<usize>().unwrap(), values.len());
        for (col, p) in [(3, 0.25), (4, 0.5), (5, 0.75)] {
            let got: f64 = cols[col].parse().unwrap();
            assert!((got - quantile_sorted(&values, p)).abs() <= 1e-9 * (1.0 + got.abs()));
        }
        let b = BoxStats::from_values(&mut values.clone());
        assert_eq!(b.outliers.len(), if cols[7].is_empty() { 0 } else { cols[7].split(';').count() });
    }
    let back = covnn::brainage::DeltaAgeReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(&back, report);
}

#[test]
fn self_transfer_reproduces_the_source_report() {
    let (cohort, run) = synthetic_run();
    let cov = normalized_covariance(&cohort).unwrap();
    let source = SourceModel {
        ensemble: &run.ensemble,
        corrector: &run.report.meta.corrector,
        meta: &run.report.meta,
        paired: Some((&cohort, &cov)),
    };
    let t = transfer_pipeline(&source, &cohort, &TransferConfig::default()).unwrap();
    assert_eq!(t.epsilon.as_ref().unwrap().max, 0.0);
    for (a, b) in t.report.records.iter().zip(&run.report.records) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.delta_age, b.delta_age);
    }
    assert!(t.hc_offset.abs() <= 1e-9);
    let refit = transfer_pipeline(
        &source,
        &cohort,
        &TransferConfig {
            rebias: Rebias::RefitOnTargetHc,
            ..TransferConfig::default()
        },
    )
    .unwrap();
    let d: Vec<f64> = refit.report.records.iter().map(|r| r.delta_age).collect();
    let d0: Vec<f64> = run.report.records.iter().map(|r| r.delta_age).collect();
    assert!(d.iter().zip(&d0).all(|(a, b)| (a - b).abs() <= 1e-9));
    assert!((mean(&d) - mean(&d0)).abs() <= 1e-9);
}
