//! Synthetic multi-scale and multi-site cortical-thickness cohorts with known ground truth.
//!
//! Every subject owns a thickness field on a fine grid of `D` points in [0, 1]. The field
//! is a smooth baseline, a linear age effect with a spatially varying slope, a regional
//! pathology effect expressed in years of extra aging, and squared-exponential Gaussian
//! process noise. A scale `m` observes the field through `m` contiguous block means.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{apportion, Cohort, Group, Subject};
use crate::error::{Error, Result};

/// Latent smooth covariance on the unit interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphonSpec {
    pub fine_grid: usize,
    /// Squared-exponential length-scale.
    pub length_scale: f64,
    /// Pointwise noise variance (mm²).
    pub variance: f64,
    pub base_thickness: f64,
    pub profile_amplitude: f64,
    pub seed: u64,
}

impl Default for GraphonSpec {
    fn default() -> Self {
        GraphonSpec {
            fine_grid: 1000,
            length_scale: 0.1,
            variance: 0.12 * 0.12,
            base_thickness: 2.5,
            profile_amplitude: 0.2,
            seed: 0,
        }
    }
}

impl GraphonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fine_grid < 2 {
            return Err(Error::Config("fine_grid must be at least 2".into()));
        }
        if !(self.length_scale > 0.0) || !(self.variance >= 0.0) {
            return Err(Error::Config("length_scale must be positive and variance nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub scales: Vec<usize>,
}

impl ScaleSpec {
    pub fn validate(&self, fine_grid: usize) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("no scales requested".into()));
        }
        if let Some(&m) = self.scales.iter().find(|&&m| m == 0 || m > fine_grid) {
            return Err(Error::Config(format!("scale {m} outside 1..={fine_grid}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupProportions {
    pub hc: f64,
    pub mci: f64,
    pub ad: f64,
}

/// Group effects, expressed as extra years of regional aging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathologySpec {
    pub shift_hc: f64,
    pub shift_mci: f64,
    pub shift_ad: f64,
    /// Affected interval of the unit domain.
    pub region: (f64, f64),
    pub proportions: GroupProportions,
    /// Thickness change per year (mm), negative for thinning.
    pub age_slope: f64,
    /// Relative spatial modulation of the age slope.
    pub slope_variation: f64,
    pub age_range: (f64, f64),
    pub severity_range: (f64, f64),
    /// Share of MCI/AD subjects that receive a CDR score.
    pub cdr_fraction: f64,
}

impl Default for PathologySpec {
    fn default() -> Self {
        PathologySpec {
            shift_hc: 0.0,
            shift_mci: 10.0,
            shift_ad: 20.0,
            region: (0.3, 0.7),
            proportions: GroupProportions {
                hc: 0.6,
                mci: 0.2,
                ad: 0.2,
            },
            age_slope: -0.01,
            slope_variation: 0.3,
            age_range: (55.0, 85.0),
            severity_range: (0.5, 1.5),
            cdr_fraction: 0.5,
        }
    }
}

impl PathologySpec {
    /// No group effects at all.
    pub fn null() -> Self {
        PathologySpec {
            shift_mci: 0.0,
            shift_ad: 0.0,
            ..PathologySpec::default()
        }
    }

    pub fn shift(&self, group: Group) -> f64 {
        match group {
            Group::Hc | Group::Other => self.shift_hc,
            Group::Mci => self.shift_mci,
            Group::Ad => self.shift_ad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.proportions;
        if [p.hc, p.mci, p.ad].iter().any(|v| !(*v >= 0.0)) || ((p.hc + p.mci + p.ad) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("group proportions must be nonnegative and sum to 1".into()));
        }
        if p.hc <= 0.0 {
            return Err(Error::Config("cohort needs healthy controls".into()));
        }
        if self.shift_hc != 0.0 {
            return Err(Error::Config("shift_hc must be 0".into()));
        }
        let (lo, hi) = (self.shift_hc.min(self.shift_ad), self.shift_hc.max(self.shift_ad));
        if self.shift_mci < lo || self.shift_mci > hi {
            return Err(Error::Config("shift_mci must lie between shift_hc and shift_ad".into()));
        }
        let (a, b) = self.region;
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::Config("region must be a subinterval of [0,1]".into()));
        }
        if !(self.age_range.0 > 0.0 && self.age_range.0 < self.age_range.1) {
            return Err(Error::Config("age_range must be increasing and positive".into()));
        }
        if !(self.severity_range.0 <= self.severity_range.1) || !(0.0..=1.0).contains(&self.cdr_fraction) {
            return Err(Error::Config("invalid severity_range or cdr_fraction".into()));
        }
        Ok(())
    }
}

/// Fine-grid point `j` sits at `(j + 0.5) / D`.
fn grid_point(j: usize, d: usize) -> f64 {
    (j as f64 + 0.5) / d as f64
}

/// Block boundaries `b_j = round(j·D/m)`; blocks nest whenever one scale divides the other.
pub fn block_bounds(fine: usize, m: usize) -> Vec<usize> {
    (0..=m).map(|j| (2 * j * fine + m) / (2 * m)).collect()
}

pub fn block_means(field: &[f64], m: usize) -> Vec<f64> {
    let b = block_bounds(field.len(), m);
    b.windows(2)
        .map(|w| field[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
        .collect()
}

/// Unit-variance squared-exponential noise on the grid, by Gaussian smoothing of white noise.
struct SmoothNoise {
    weights: Vec<f64>,
    pad: usize,
}

impl SmoothNoise {
    fn new(fine: usize, length_scale: f64) -> Self {
        let step = 1.0 / fine as f64;
        // convolving white noise with exp(-t²/(2s²)) gives an SE kernel of length s·√2
        let s = length_scale / std::f64::consts::SQRT_2;
        let pad = ((4.0 * s) / step).ceil() as usize;
        let mut weights: Vec<f64> = (0..=2 * pad)
            .map(|i| {
                let t = (i as f64 - pad as f64) * step;
                (-t * t / (2.0 * s * s)).exp()
            })
            .collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        weights.iter_mut().for_each(|w| *w /= norm);
        SmoothNoise { weights, pad }
    }

    fn sample(&self, fine: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let white: Vec<f64> = (0..fine + 2 * self.pad).map(|_| StandardNormal.sample(rng)).collect();
        (0..fine)
            .map(|j| {
                self.weights
                    .iter()
                    .zip(&white[j..j + self.weights.len()])
                    .map(|(w, z)| w * z)
                    .sum()
            })
            .collect()
    }
}

/// Latent draw for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub group: Group,
    pub age: f64,
    pub severity: f64,
    /// Regional extra aging in years: group shift times severity.
    pub regional_years: f64,
}

/// Everything needed to check generated data against its generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub graphon: GraphonSpec,
    pub scales: ScaleSpec,
    pub pathology: PathologySpec,
    pub n: usize,
    /// Fine-grid indices carrying the pathology effect.
    pub region_mask: Vec<usize>,
    pub block_bounds: Vec<Vec<usize>>,
    pub subjects: Vec<SubjectTruth>,
}

impl GroundTruth {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiscaleData {
    /// One cohort per requested scale, in the order of `ScaleSpec::scales`.
    pub cohorts: Vec<Cohort>,
    pub truth: GroundTruth,
    /// `fine[i]` is subject `i`'s thickness on the fine grid.
    pub fine: Vec<Vec<f64>>,
    cdr: Vec<Option<f64>>,
}

impl MultiscaleData {
    pub fn cohort(&self, m: usize) -> Option<&Cohort> {
        self.cohorts.iter().find(|c| c.m() == m)
    }

    /// Block means of the fine fields at any scale, not only the generated ones.
    pub fn at_scale(&self, m: usize) -> Result<Cohort> {
        if m == 0 || m > self.truth.graphon.fine_grid {
            return Err(Error::Config(format!("scale {m} outside 1..={}", self.truth.graphon.fine_grid)));
        }
        let subjects = self
            .truth
            .subjects
            .iter()
            .zip(&self.fine)
            .zip(&self.cdr)
            .map(|((t, f), cdr)| Subject {
                id: t.id.clone(),
                age: t.age,
                group: t.group,
                cdr: *cdr,
                features: block_means(f, m),
            })
            .collect();
        Cohort::new(m, format!("m{m}"), subjects)
    }
}

pub fn subject_id(seed: u64, i: usize) -> String {
    format!("sub-{seed}-{i:04}")
}

/// Draws `n` subjects and observes them at every requested scale.
pub fn generate_multiscale(g: &GraphonSpec, s: &ScaleSpec, n: usize, p: &PathologySpec) -> Result<MultiscaleData> {
    g.validate()?;
    s.validate(g.fine_grid)?;
    p.validate()?;
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 subjects, got {n}")));
    }
    let d = g.fine_grid;

    let mut cohort_rng = ChaCha8Rng::seed_from_u64(g.seed);
    let counts = apportion(n, &[p.proportions.hc, p.proportions.mci, p.proportions.ad]);
    let mut groups: Vec<Group> = Group::CLINICAL
        .iter()
        .zip(&counts)
        .flat_map(|(g, &c)| std::iter::repeat_n(*g, c))
        .collect();
    groups.shuffle(&mut cohort_rng);

    let profile: Vec<f64> = (0..d)
        .map(|j| g.base_thickness + g.profile_amplitude * (2.0 * std::f64::consts::PI * grid_point(j, d)).cos())
        .collect();
    let slope: Vec<f64> = (0..d)
        .map(|j| p.age_slope * (1.0 + p.slope_variation * (2.0 * std::f64::consts::PI * grid_point(j, d)).sin()))
        .collect();
    let region_mask: Vec<usize> = (0..d)
        .filter(|&j| {
            let t = grid_point(j, d);
            t >= p.region.0 && t < p.region.1
        })
        .collect();
    let noise = SmoothNoise::new(d, g.length_scale);
    let sd = g.variance.sqrt();
    let centre_age = 0.5 * (p.age_range.0 + p.age_range.1);

    let mut truths = Vec::with_capacity(n);
    let mut fine = Vec::with_capacity(n);
    let mut cdr = Vec::with_capacity(n);
    for (i, &group) in groups.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
        rng.set_stream(i as u64 + 1);
        let age = rng.random_range(p.age_range.0..p.age_range.1);
        let severity = if group == Group::Hc {
            0.0
        } else {
            rng.random_range(p.severity_range.0..=p.severity_range.1)
        };
        let regional_years = p.shift(group) * severity;
        let mut field: Vec<f64> = (0..d).map(|j| profile[j] + slope[j] * (age - centre_age)).collect();
        for &j in &region_mask {
            field[j] += slope[j] * regional_years;
        }
        if sd > 0.0 {
            for (f, z) in field.iter_mut().zip(noise.sample(d, &mut rng)) {
                *f += sd * z;
            }
        }
        let score = if group != Group::Hc && rng.random::<f64>() < p.cdr_fraction {
            let z: f64 = StandardNormal.sample(&mut rng);
            Some((0.2 * regional_years + 0.5 * z).max(0.0))
        } else {
            None
        };
        truths.push(SubjectTruth {
            id: subject_id(g.seed, i),
            group,
            age,
            severity,
            regional_years,
        });
        fine.push(field);
        cdr.push(score);
    }

    let truth = GroundTruth {
        graphon: g.clone(),
        scales: s.clone(),
        pathology: p.clone(),
        n,
        region_mask,
        block_bounds: s.scales.iter().map(|&m| block_bounds(d, m)).collect(),
        subjects: truths,
    };
    let mut data = MultiscaleData {
        cohorts: Vec::new(),
        truth,
        fine,
        cdr,
    };
    data.cohorts = s.scales.iter().map(|&m| data.at_scale(m)).collect::<Result<_>>()?;
    Ok(data)
}

/// Acquisition differences of a second site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteParams {
    pub tag: String,
    /// Parcellation used by the site.
    pub m: usize,
    /// Standard deviation of the smooth multiplicative gain around 1.
    pub gain_sd: f64,
    pub gain_length_scale: f64,
    /// Shared additive offset (mm).
    pub offset_mean: f64,
    /// Per-region jitter of the offset (mm).
    pub offset_sd: f64,
    pub seed: u64,
}

impl Default for SiteParams {
    fn default() -> Self {
        SiteParams {
            tag: "site_b".into(),
            m: 96,
            gain_sd: 0.05,
            gain_length_scale: 0.2,
            offset_mean: 0.05,
            offset_sd: 0.01,
            seed: 1,
        }
    }
}

impl SiteParams {
    pub fn identity(m: usize) -> Self {
        SiteParams {
            tag: format!("m{m}"),
            m,
            gain_sd: 0.0,
            offset_mean: 0.0,
            offset_sd: 0.0,
            ..SiteParams::default()
        }
    }

    /// Per-region gains and offsets at the site's scale.
    pub fn gains_offsets(&self, fine: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.m == 0 || self.m > fine {
            return Err(Error::Config(format!("site scale {} outside 1..={fine}", self.m)));
        }
        if !(self.gain_length_scale > 0.0) || !(self.gain_sd >= 0.0) || !(self.offset_sd >= 0.0) {
            return Err(Error::Config("invalid site parameters".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let field = SmoothNoise::new(fine, self.gain_length_scale).sample(fine, &mut rng);
        let bounds = block_bounds(fine, self.m);
        let gains = bounds
            .windows(2)
            .map(|w| 1.0 + self.gain_sd * field[(w[0] + w[1] - 1) / 2])
            .collect();
        let offsets = (0..self.m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.offset_mean + self.offset_sd * z
            })
            .collect();
        Ok((gains, offsets))
    }
}

/// Observes the subjects of `data` through another site's scanner and parcellation.
pub fn generate_site_variant(data: &MultiscaleData, site: &SiteParams) -> Result<Cohort> {
    let (gains, offsets) = site.gains_offsets(data.truth.graphon.fine_grid)?;
    let base = data.at_scale(site.m)?;
    let subjects = base
        .subjects()
        .iter()
        .map(|s| Subject {
            features: s
                .features
                .iter()
                .zip(gains.iter().zip(&offsets))
                .map(|(x, (g, o))| g * x + o)
                .collect(),
            ..s.clone()
        })
        .collect();
    Cohort::new(site.m, site.tag.clone(), subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::sample_covariance;

    fn small() -> MultiscaleData {
        let g = GraphonSpec {
            seed: 5,
            ..GraphonSpec::default()
        };
        generate_multiscale(&g, &ScaleSpec { scales: vec![50, 500] }, 60, &PathologySpec::default()).unwrap()
    }

    #[test]
    fn bounds_partition_and_nest() {
        for m in [1, 7, 50, 96, 300, 1000] {
            let b = block_bounds(1000, m);
            assert_eq!((b[0], b[m]), (0, 1000));
            assert!(b.windows(2).all(|w| w[1] > w[0]));
        }
        let coarse = block_bounds(1000, 50);
        let fine = block_bounds(1000, 500);
        assert!(coarse.iter().all(|c| fine.contains(c)));
    }

    #[test]
    fn deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.cohorts, b.cohorts);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn nested_scales_agree() {
        let d = small();
        let (c50, c500) = (d.cohort(50).unwrap(), d.cohort(500).unwrap());
        for (a, b) in c50.subjects().iter().zip(c500.subjects()) {
            assert_eq!(a.id, b.id);
            let re = block_means(&b.features, 50);
            for (x, y) in a.features.iter().zip(&re) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregated_covariance_matches_coarse() {
        let d = small();
        let fine = sample_covariance(d.cohort(500).unwrap()).unwrap();
        let coarse = sample_covariance(d.cohort(50).unwrap()).unwrap();
        // A C Aᵀ with A averaging 10 consecutive blocks
        let a = ndarray::Array2::from_shape_fn((50, 500), |(i, j)| if j / 10 == i { 0.1 } else { 0.0 });
        let agg = a.dot(fine.matrix()).dot(&a.t());
        let diff = (&agg - coarse.matrix()).mapv(|v| v * v).sum().sqrt();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn group_counts_and_pathology_order() {
        let d = small();
        let counts = d.cohorts[0].group_counts();
        assert_eq!(counts[&Group::Hc], 36);
        assert_eq!(counts[&Group::Mci], 12);
        assert_eq!(counts[&Group::Ad], 12);
        let mean_of = |g: Group| {
            let v: Vec<f64> = d
                .truth
                .subjects
                .iter()
                .filter(|s| s.group == g)
                .map(|s| s.regional_years)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_of(Group::Hc) < mean_of(Group::Mci));
        assert!(mean_of(Group::Mci) < mean_of(Group::Ad));
        assert!(d.truth.subjects.iter().all(|s| (55.0..85.0).contains(&s.age)));
    }

    #[test]
    fn noiseless_features_are_affine_in_age() {
        let g = GraphonSpec {
            variance: 0.0,
            seed: 2,
            ..GraphonSpec::default()
        };
        let d = generate_multiscale(&g, &ScaleSpec { scales: vec![20] }, 30, &PathologySpec::null()).unwrap();
        let c = &d.cohorts[0];
        let (s0, s1) = (&c.subjects()[0], &c.subjects()[1]);
        for s in c.subjects() {
            for j in 0..20 {
                let t = (s.age - s0.age) / (s1.age - s0.age);
                let want = s0.features[j] + t * (s1.features[j] - s0.features[j]);
                assert!((s.features[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_site_is_unchanged() {
        let d = small();
        let v = generate_site_variant(&d, &SiteParams::identity(50)).unwrap();
        assert_eq!(&v, d.cohort(50).unwrap());
    }

    #[test]
    fn site_offsets_shift_means() {
        let d = generate_multiscale(
            &GraphonSpec {
                seed: 8,
                ..GraphonSpec::default()
            },
            &ScaleSpec { scales: vec![96] },
            400,
            &PathologySpec::default(),
        )
        .unwrap();
        let site = SiteParams {
            gain_sd: 0.1,
            offset_mean: 0.3,
            offset_sd: 0.05,
            ..SiteParams::default()
        };
        let (gains, offsets) = site.gains_offsets(1000).unwrap();
        let v = generate_site_variant(&d, &site).unwrap();
        let src = d.cohort(96).unwrap();
        for j in 0..96 {
            let mean = |c: &Cohort| c.subjects().iter().map(|s| s.features[j]).sum::<f64>() / c.n() as f64;
            assert!((mean(&v) - (gains[j] * mean(src) + offsets[j])).abs() < 1e-9);
        }
        assert_eq!(v.m(), 96);
    }

    #[test]
    fn invalid_specs() {
        let mut p = PathologySpec::default();
        p.proportions.hc = 0.9;
        assert!(p.validate().is_err());
        let p = PathologySpec {
            shift_mci: 30.0,
            ..PathologySpec::default()
        };
        assert!(p.validate().is_err());
        assert!(generate_multiscale(&GraphonSpec::default(), &ScaleSpec { scales: vec![10] }, 5, &PathologySpec::default()).is_err());
    }
}
