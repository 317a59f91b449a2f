//! Command implementations behind the `covnn` binary.
//!
//! Every command reads one [`ExperimentConfig`], writes into the output directory and
//! leaves a manifest under `manifests/`. Wall-clock timings go to `timing/` so that all
//! other files are reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::brainage::{evaluation_covariance, score_cohort, DeltaAgeReport};
use crate::config::{resolve, sha256_hex, CohortRef, ExperimentConfig};
use crate::dataset::{cohort_to_csv, Cohort, Standardizer};
use crate::error::{Error, Result};
use crate::stats::{summarize_groups, GroupComparison, PearsonResult};
use crate::synth::{generate_multiscale, generate_site_variant, GraphonSpec, ScaleSpec};
use crate::training::{train_ensemble, Ensemble, TrainConfig, TrainReport};
use crate::transfer::{measure_epsilon, permuted_taps_control, transfer_pipeline, SourceModel, TransferReport};
use crate::vnn::MODEL_FORMAT_VERSION;

pub const ENSEMBLE_PATH: &str = "model/ensemble.json";
pub const BRAINAGE_REPORT_PATH: &str = "brainage/report.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub model_format_version: u32,
    pub config_sha256: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub standardized_features: bool,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Loaded configuration plus the directory everything is written to.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub config_sha256: String,
    pub out: PathBuf,
    pub seeds: BTreeMap<String, u64>,
}

impl RunContext {
    /// `out` and `seed` override the values in the file.
    pub fn load(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let (mut cfg, config_sha256) = ExperimentConfig::load(config)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let base = config.parent().unwrap_or(Path::new("."));
        let out = match (out, &cfg.out_dir) {
            (Some(o), _) => o,
            (None, Some(o)) => resolve(base, o),
            (None, None) => return Err(Error::Config("no output directory: pass --out or set out_dir".into())),
        };
        Self::new(cfg, config_sha256, out)
    }

    pub fn new(mut cfg: ExperimentConfig, config_sha256: String, out: PathBuf) -> Result<Self> {
        let seeds = cfg.derive_seeds();
        cfg.validate()?;
        Ok(RunContext {
            cfg,
            config_sha256,
            out,
            seeds,
        })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        resolve(&self.out, rel.as_ref())
    }

    fn read(&self, rel: impl AsRef<Path>, inputs: &mut Vec<FileDigest>) -> Result<String> {
        let p = self.path(rel.as_ref());
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        inputs.push(FileDigest {
            path: rel.as_ref().display().to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(text)
    }

    fn load_cohort(&self, r: &CohortRef, inputs: &mut Vec<FileDigest>) -> Result<Cohort> {
        let text = self.read(&r.path, inputs)?;
        let cohort = crate::dataset::parse_cohort(&text, &self.path(&r.path).display().to_string(), &r.tag)?;
        if self.cfg.standardize_features {
            Standardizer::fit(&cohort)?.apply(&cohort)
        } else {
            Ok(cohort)
        }
    }
}

/// Collects written files for the manifest.
struct Outputs<'a> {
    ctx: &'a RunContext,
    files: Vec<FileDigest>,
}

impl<'a> Outputs<'a> {
    fn new(ctx: &'a RunContext) -> Self {
        Outputs { ctx, files: Vec::new() }
    }

    fn write(&mut self, rel: impl AsRef<Path>, contents: &str) -> Result<()> {
        let p = self.ctx.path(rel.as_ref());
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.files.push(FileDigest {
            path: rel.as_ref().display().to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    fn finish(mut self, command: &str, inputs: Vec<FileDigest>, started: Instant) -> Result<Manifest> {
        let ctx = self.ctx;
        let manifest = Manifest {
            command: command.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            model_format_version: MODEL_FORMAT_VERSION,
            config_sha256: ctx.config_sha256.clone(),
            master_seed: ctx.cfg.seed,
            seeds: ctx.seeds.clone(),
            standardized_features: ctx.cfg.standardize_features,
            inputs,
            outputs: std::mem::take(&mut self.files),
        };
        self.write(format!("manifests/{command}.json"), &serde_json::to_string_pretty(&manifest)?)?;
        let timing = serde_json::json!({ "command": command, "seconds": started.elapsed().as_secs_f64() });
        self.write(format!("timing/{command}.json"), &serde_json::to_string_pretty(&timing)?)?;
        Ok(manifest)
    }
}

fn train_config(ctx: &RunContext) -> TrainConfig {
    TrainConfig {
        train_groups: ctx.cfg.brainage.protocol.train_groups(),
        ..ctx.cfg.train.clone()
    }
}

/// Generates the synthetic cohorts at every scale and site.
pub fn cmd_gen(ctx: &RunContext) -> Result<Manifest> {
    let started = Instant::now();
    let s = &ctx.cfg.synth;
    let mut out = Outputs::new(ctx);
    let data = generate_multiscale(&s.graphon, &ScaleSpec { scales: s.scales.clone() }, s.n, &s.pathology)?;
    for c in &data.cohorts {
        out.write(format!("cohorts/m{}.csv", c.m()), &cohort_to_csv(c))?;
    }
    out.write("ground_truth.json", &data.truth.to_json()?)?;
    for site in &s.sites {
        let cohort = if site.fresh_subjects {
            let g = GraphonSpec {
                seed: site.subject_seed,
                ..s.graphon.clone()
            };
            let fresh = generate_multiscale(&g, &ScaleSpec { scales: vec![site.params.m] }, s.n, &s.pathology)?;
            out.write(format!("ground_truth_{}.json", site.params.tag), &fresh.truth.to_json()?)?;
            generate_site_variant(&fresh, &site.params)?
        } else {
            generate_site_variant(&data, &site.params)?
        };
        out.write(format!("cohorts/{}.csv", site.params.tag), &cohort_to_csv(&cohort))?;
    }
    out.finish("gen", Vec::new(), started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ensemble_size: usize,
    pub train_groups: Vec<String>,
    /// Test MAE reported for the ensemble: member 0 on its own test split.
    pub test_mae: f64,
    pub test_set: String,
    pub selected_epochs: Vec<usize>,
}

pub fn cmd_train(ctx: &RunContext) -> Result<Manifest> {
    let started = Instant::now();
    let mut inputs = Vec::new();
    let paths = ctx.cfg.cohort_paths();
    let cohort = ctx.load_cohort(&paths.train, &mut inputs)?;
    let tcfg = train_config(ctx);
    let (ens, reports) = train_ensemble(&cohort, &ctx.cfg.vnn, &tcfg)?;
    let mut out = Outputs::new(ctx);
    out.write(ENSEMBLE_PATH, &ens.to_json()?)?;
    out.write("train/reports.json", &serde_json::to_string_pretty(&reports)?)?;
    for (i, r) in reports.iter().enumerate() {
        out.write(format!("train/loss/member_{i:03}_train.csv"), &TrainReport::loss_csv(&r.train_loss))?;
        out.write(format!("train/loss/member_{i:03}_val.csv"), &TrainReport::loss_csv(&r.val_loss))?;
    }
    let summary = TrainSummary {
        ensemble_size: ens.len(),
        train_groups: tcfg.train_groups.iter().map(|g| g.to_string()).collect(),
        test_mae: reports[0].test_mae,
        test_set: format!("member 0 {}", reports[0].test_set),
        selected_epochs: reports.iter().map(|r| r.selected_epoch).collect(),
    };
    out.write("train/summary.json", &serde_json::to_string_pretty(&summary)?)?;
    out.finish("train", inputs, started)
}

fn load_ensemble(ctx: &RunContext, inputs: &mut Vec<FileDigest>) -> Result<Ensemble> {
    Ensemble::from_json(&ctx.read(ENSEMBLE_PATH, inputs)?)
}

fn write_report(out: &mut Outputs, dir: &str, report: &DeltaAgeReport) -> Result<()> {
    out.write(format!("{dir}/delta_age.csv"), &report.to_csv())?;
    out.write(format!("{dir}/boxplot.csv"), &report.boxplot_csv())
}

pub fn cmd_brainage(ctx: &RunContext) -> Result<Manifest> {
    let started = Instant::now();
    let mut inputs = Vec::new();
    let ens = load_ensemble(ctx, &mut inputs)?;
    let cohort = ctx.load_cohort(&ctx.cfg.cohort_paths().train, &mut inputs)?;
    let report = score_cohort(&ens, &cohort, &ctx.cfg.brainage, &train_config(ctx).train_groups)?;
    let mut out = Outputs::new(ctx);
    out.write(BRAINAGE_REPORT_PATH, &report.to_json()?)?;
    write_report(&mut out, "brainage", &report)?;
    out.write("brainage/corrector.json", &report.meta.corrector.to_json()?)?;
    out.finish("brainage", inputs, started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummaryRow {
    pub tag: String,
    pub m: usize,
    pub hc_offset: f64,
    pub eps_mean: Option<f64>,
    pub eps_max: Option<f64>,
    /// Same quantities for the permuted-taps control ensemble.
    pub control_eps_mean: Option<f64>,
    pub control_eps_max: Option<f64>,
}

pub fn cmd_transfer(ctx: &RunContext) -> Result<Manifest> {
    let started = Instant::now();
    let mut inputs = Vec::new();
    let ens = load_ensemble(ctx, &mut inputs)?;
    let source_report = DeltaAgeReport::from_json(&ctx.read(BRAINAGE_REPORT_PATH, &mut inputs)?)?;
    let paths = ctx.cfg.cohort_paths();
    let source_cohort = ctx.load_cohort(&paths.train, &mut inputs)?;
    let source_cov = evaluation_covariance(
        &source_cohort,
        ctx.cfg.brainage.eval_covariance,
        &train_config(ctx).train_groups,
    )?;
    let source = SourceModel {
        ensemble: &ens,
        corrector: &source_report.meta.corrector,
        meta: &source_report.meta,
        paired: Some((&source_cohort, &source_cov)),
    };
    let control = permuted_taps_control(&ens, ctx.seeds["control"])?;
    let mut out = Outputs::new(ctx);
    let mut summary = Vec::new();
    for target_ref in &paths.targets {
        let target = ctx.load_cohort(target_ref, &mut inputs)?;
        let t = transfer_pipeline(&source, &target, &ctx.cfg.transfer)?;
        let dir = format!("transfer/{}", target_ref.tag);
        out.write(format!("{dir}/report.json"), &t.to_json()?)?;
        write_report(&mut out, &dir, &t.report)?;
        let control_eps = match &t.epsilon {
            Some(_) => {
                let target_cov = crate::covariance::normalized_covariance(&target)?;
                Some(measure_epsilon(&control, &source_cohort, &target, &source_cov, &target_cov)?)
            }
            None => None,
        };
        summary.push(TransferSummaryRow {
            tag: target_ref.tag.clone(),
            m: t.m,
            hc_offset: t.hc_offset,
            eps_mean: t.epsilon.as_ref().map(|e| e.mean),
            eps_max: t.epsilon.as_ref().map(|e| e.max),
            control_eps_mean: control_eps.as_ref().map(|e| e.mean),
            control_eps_max: control_eps.as_ref().map(|e| e.max),
        });
    }
    out.write("transfer/summary.json", &serde_json::to_string_pretty(&summary)?)?;
    out.finish("transfer", inputs, started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsOutput {
    pub source: String,
    pub comparison: GroupComparison,
    pub cdr_correlation: Option<PearsonResult>,
}

/// Parses either a Δ-Age report or a transfer report.
pub fn read_any_report(text: &str) -> Result<DeltaAgeReport> {
    match DeltaAgeReport::from_json(text) {
        Ok(r) => Ok(r),
        Err(_) => TransferReport::from_json(text)
            .map(|t| t.report)
            .map_err(|e| Error::Data(format!("not a Δ-Age or transfer report: {e}"))),
    }
}

fn stats_name(rel: &Path) -> String {
    let stem = rel.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let parent: Vec<String> = rel
        .parent()
        .into_iter()
        .flat_map(|p| p.components())
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    if stem == "report" && !parent.is_empty() {
        parent.join("_")
    } else {
        stem.to_string()
    }
}

/// Group statistics for each report; defaults to every report the pipeline wrote.
pub fn cmd_stats(ctx: &RunContext, reports: &[PathBuf]) -> Result<Manifest> {
    let started = Instant::now();
    let mut inputs = Vec::new();
    let targets: Vec<PathBuf> = if reports.is_empty() {
        std::iter::once(PathBuf::from(BRAINAGE_REPORT_PATH))
            .chain(
                ctx.cfg
                    .cohort_paths()
                    .targets
                    .iter()
                    .map(|t| PathBuf::from(format!("transfer/{}/report.json", t.tag))),
            )
            .filter(|p| ctx.path(p).exists())
            .collect()
    } else {
        reports.to_vec()
    };
    if targets.is_empty() {
        return Err(Error::Data("no reports found; run brainage first".into()));
    }
    let mut out = Outputs::new(ctx);
    for rel in &targets {
        let report = read_any_report(&ctx.read(rel, &mut inputs)?)?;
        let comparison = summarize_groups(&report)?;
        let name = stats_name(rel);
        out.write(format!("stats/{name}_tukey.csv"), &comparison.tukey_csv())?;
        let result = StatsOutput {
            source: rel.display().to_string(),
            comparison,
            cdr_correlation: report.cdr_correlation,
        };
        out.write(format!("stats/{name}.json"), &serde_json::to_string_pretty(&result)?)?;
    }
    out.finish("stats", inputs, started)
}
