//! Experiment configuration and master-seed derivation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::brainage::BrainAgeConfig;
use crate::error::{Error, Result};
use crate::synth::{GraphonSpec, PathologySpec, SiteParams};
use crate::training::TrainConfig;
use crate::transfer::TransferConfig;
use crate::vnn::VnnConfig;

/// A second site observed through its own parcellation and scanner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteSpec {
    pub params: SiteParams,
    /// Draw new subjects for the site instead of re-observing the main cohort.
    pub fresh_subjects: bool,
    /// Generator seed for the fresh subjects.
    pub subject_seed: u64,
}

impl Default for SiteSpec {
    fn default() -> Self {
        SiteSpec {
            params: SiteParams::default(),
            fresh_subjects: true,
            subject_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub graphon: GraphonSpec,
    pub scales: Vec<usize>,
    /// Scale the ensemble is trained at.
    pub train_scale: usize,
    pub n: usize,
    pub pathology: PathologySpec,
    pub sites: Vec<SiteSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            graphon: GraphonSpec::default(),
            scales: vec![100, 300, 500],
            train_scale: 100,
            n: 300,
            pathology: PathologySpec::default(),
            sites: vec![SiteSpec::default()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortRef {
    pub tag: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortPaths {
    pub train: CohortRef,
    #[serde(default)]
    pub targets: Vec<CohortRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every seed used by a run is derived from this one.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Z-score every feature within each loaded cohort before use.
    pub standardize_features: bool,
    pub synth: SynthConfig,
    /// Cohort files; defaults to the files written by `gen`.
    pub cohorts: Option<CohortPaths>,
    pub vnn: VnnConfig,
    pub train: TrainConfig,
    pub brainage: BrainAgeConfig,
    pub transfer: TransferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: None,
            standardize_features: false,
            synth: SynthConfig::default(),
            cohorts: None,
            vnn: VnnConfig::default(),
            train: TrainConfig::default(),
            brainage: BrainAgeConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

/// 64-bit seed from the master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(master.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, sha256_hex(text.as_bytes())))
    }

    /// Overwrites every component seed with one derived from the master seed.
    pub fn derive_seeds(&mut self) -> BTreeMap<String, u64> {
        let m = self.seed;
        let mut seeds = BTreeMap::new();
        let mut take = |label: &str| {
            let s = derive_seed(m, label);
            seeds.insert(label.to_string(), s);
            s
        };
        self.synth.graphon.seed = take("synth");
        self.vnn.seed = take("init");
        self.train.split.seed = take("split");
        for site in &mut self.synth.sites {
            site.params.seed = take(&format!("site/{}", site.params.tag));
            site.subject_seed = take(&format!("site_subjects/{}", site.params.tag));
        }
        take("control");
        seeds
    }

    pub fn validate(&self) -> Result<()> {
        self.vnn.validate()?;
        self.train.validate()?;
        self.synth.graphon.validate()?;
        self.synth.pathology.validate()?;
        if !self.synth.scales.contains(&self.synth.train_scale) {
            return Err(Error::Config(format!(
                "train_scale {} is not among the generated scales",
                self.synth.train_scale
            )));
        }
        let mut tags: Vec<&str> = self.synth.sites.iter().map(|s| s.params.tag.as_str()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("site tags must be unique".into()));
        }
        Ok(())
    }

    /// Cohort files, falling back to the layout written by `gen`.
    pub fn cohort_paths(&self) -> CohortPaths {
        if let Some(c) = &self.cohorts {
            return c.clone();
        }
        let scale_ref = |m: usize| CohortRef {
            tag: format!("m{m}"),
            path: PathBuf::from(format!("cohorts/m{m}.csv")),
        };
        let mut targets: Vec<CohortRef> = self
            .synth
            .scales
            .iter()
            .filter(|&&m| m != self.synth.train_scale)
            .map(|&m| scale_ref(m))
            .collect();
        targets.extend(self.synth.sites.iter().map(|s| CohortRef {
            tag: s.params.tag.clone(),
            path: PathBuf::from(format!("cohorts/{}.csv", s.params.tag)),
        }));
        CohortPaths {
            train: scale_ref(self.synth.train_scale),
            targets,
        }
    }
}

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
