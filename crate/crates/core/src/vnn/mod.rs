//! coVariance filters, filter-bank layers and the VNN forward map.
//!
//! A filter with taps `h_0..h_K` maps `x` to `Σ_k h_k C^k x`. The powers `C^k x`
//! are built by repeated matrix-vector products; `C^k` itself is never formed.
//! Nothing in a [`VnnModel`] depends on the dimension of `C`, so one model can be
//! evaluated against covariances of any size.

pub mod engine;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{check_permutation, CovarianceModel};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Nonlinearity::Relu => u.max(0.0),
            Nonlinearity::Tanh => u.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `u` and output `z = σ(u)`.
    #[inline]
    pub fn derivative(self, u: f64, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => 1.0 - z * z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Unweighted mean over nodes, then a linear map of the final features to a scalar.
    #[default]
    MeanThenLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VnnConfig {
    pub layers: usize,
    /// Polynomial order K; each filter has K + 1 taps.
    pub taps_per_layer: usize,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub seed: u64,
}

impl Default for VnnConfig {
    fn default() -> Self {
        VnnConfig {
            layers: 2,
            taps_per_layer: 1,
            widths: vec![44, 44],
            nonlinearity: Nonlinearity::Relu,
            readout: Readout::MeanThenLinear,
            seed: 0,
        }
    }
}

impl VnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("a VNN needs at least one layer".into()));
        }
        if self.widths.len() != self.layers {
            return Err(Error::Config(format!(
                "{} layers but {} widths",
                self.layers,
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// (F_in, F_out) per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut f_in = 1;
        self.widths
            .iter()
            .map(|&f_out| {
                let s = (f_in, f_out);
                f_in = f_out;
                s
            })
            .collect()
    }
}

/// Tap tensor of one layer, indexed `[f_out][f_in][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<Vec<f64>>>", try_from = "Vec<Vec<Vec<f64>>>")]
pub struct LayerTaps {
    f_out: usize,
    f_in: usize,
    n_taps: usize,
    coeffs: Vec<f64>,
}

impl LayerTaps {
    pub fn zeros(f_out: usize, f_in: usize, order: usize) -> Self {
        LayerTaps {
            f_out,
            f_in,
            n_taps: order + 1,
            coeffs: vec![0.0; f_out * f_in * (order + 1)],
        }
    }

    pub fn from_nested(nested: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let f_out = nested.len();
        let f_in = nested.first().map_or(0, Vec::len);
        let n_taps = nested.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if f_out == 0 || f_in == 0 || n_taps == 0 {
            return Err(Error::Shape("empty tap tensor".into()));
        }
        let mut coeffs = Vec::with_capacity(f_out * f_in * n_taps);
        for row in &nested {
            if row.len() != f_in {
                return Err(Error::Shape("ragged tap tensor".into()));
            }
            for taps in row {
                if taps.len() != n_taps {
                    return Err(Error::Shape("ragged tap tensor".into()));
                }
                if taps.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data("non-finite filter tap".into()));
                }
                coeffs.extend_from_slice(taps);
            }
        }
        Ok(LayerTaps {
            f_out,
            f_in,
            n_taps,
            coeffs,
        })
    }

    pub fn f_out(&self) -> usize {
        self.f_out
    }

    pub fn f_in(&self) -> usize {
        self.f_in
    }

    /// Number of taps per filter (K + 1).
    pub fn n_taps(&self) -> usize {
        self.n_taps
    }

    /// Taps of the filter from input feature `g` to output feature `f`.
    pub fn filter(&self, f: usize, g: usize) -> &[f64] {
        let start = (f * self.f_in + g) * self.n_taps;
        &self.coeffs[start..start + self.n_taps]
    }

    pub fn filter_mut(&mut self, f: usize, g: usize) -> &mut [f64] {
        let start = (f * self.f_in + g) * self.n_taps;
        &mut self.coeffs[start..start + self.n_taps]
    }

    #[inline]
    pub fn get(&self, f: usize, g: usize, k: usize) -> f64 {
        self.coeffs[(f * self.f_in + g) * self.n_taps + k]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }
}

impl From<LayerTaps> for Vec<Vec<Vec<f64>>> {
    fn from(t: LayerTaps) -> Self {
        (0..t.f_out)
            .map(|f| (0..t.f_in).map(|g| t.filter(f, g).to_vec()).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for LayerTaps {
    type Error = Error;

    fn try_from(v: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        LayerTaps::from_nested(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterTaps {
    pub layers: Vec<LayerTaps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnnModel {
    pub config: VnnConfig,
    pub taps: FilterTaps,
    pub readout_weights: Vec<f64>,
    pub readout_bias: f64,
}

#[derive(Serialize)]
struct ModelDocRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    model: &'a VnnModel,
}

#[derive(Deserialize)]
struct ModelDoc {
    format_version: u32,
    #[serde(flatten)]
    model: VnnModel,
}

impl VnnModel {
    /// Seeded initialization: taps uniform on ±1/√(F_in·(K+1)), readout weights
    /// uniform on ±1/√F_out(L), zero bias.
    pub fn init(config: &VnnConfig) -> Result<VnnModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_taps = config.taps_per_layer + 1;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(f_in, f_out)| {
                let mut t = LayerTaps::zeros(f_out, f_in, config.taps_per_layer);
                let bound = 1.0 / ((f_in * n_taps) as f64).sqrt();
                t.coeffs.iter_mut().for_each(|c| *c = rng.random_range(-bound..bound));
                t
            })
            .collect();
        let f_last = *config.widths.last().expect("validated");
        let bound = 1.0 / (f_last as f64).sqrt();
        let readout_weights = (0..f_last).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(VnnModel {
            config: config.clone(),
            taps: FilterTaps { layers },
            readout_weights,
            readout_bias: 0.0,
        })
    }

    /// Checks that the tap tensors agree with the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.layer_shapes();
        if shapes.len() != self.taps.layers.len() {
            return Err(Error::Shape(format!(
                "config has {} layers, taps have {}",
                shapes.len(),
                self.taps.layers.len()
            )));
        }
        for (l, ((f_in, f_out), t)) in shapes.iter().zip(&self.taps.layers).enumerate() {
            if t.f_in != *f_in || t.f_out != *f_out || t.n_taps != self.config.taps_per_layer + 1 {
                return Err(Error::Shape(format!(
                    "layer {l}: taps are {}x{}x{}, config wants {f_out}x{f_in}x{}",
                    t.f_out,
                    t.f_in,
                    t.n_taps,
                    self.config.taps_per_layer + 1
                )));
            }
            if t.coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::Data(format!("layer {l}: non-finite tap")));
            }
        }
        if self.readout_weights.len() != *self.config.widths.last().expect("validated") {
            return Err(Error::Shape("readout width does not match final layer".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.taps.layers.iter().map(|t| t.coeffs.len()).sum::<usize>() + self.readout_weights.len() + 1
    }

    /// All parameters flattened: layer taps in order, readout weights, readout bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.taps.layers {
            out.extend_from_slice(&t.coeffs);
        }
        out.extend_from_slice(&self.readout_weights);
        out.push(self.readout_bias);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        let mut at = 0;
        for t in &mut self.taps.layers {
            let len = t.coeffs.len();
            t.coeffs.copy_from_slice(&params[at..at + len]);
            at += len;
        }
        let len = self.readout_weights.len();
        self.readout_weights.copy_from_slice(&params[at..at + len]);
        self.readout_bias = params[at + len];
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocRef {
            format_version: MODEL_FORMAT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<VnnModel> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model format_version {}",
                doc.format_version
            )));
        }
        doc.model.validate()?;
        Ok(doc.model)
    }
}

fn check_input(cov: &CovarianceModel, x: &[f64]) -> Result<()> {
    if x.len() != cov.dim() {
        return Err(Error::Shape(format!(
            "signal of length {} on a covariance of dimension {}",
            x.len(),
            cov.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite input signal".into()));
    }
    Ok(())
}

/// `[x, Cx, C²x, ..., C^K x]`.
fn shifted_signals(cov: &CovarianceModel, x: &[f64], order: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(x.to_vec());
    for k in 1..=order {
        let next = cov.matvec(&out[k - 1]);
        out.push(next);
    }
    out
}

/// coVariance filter output `Σ_k h_k C^k x`.
pub fn apply_filter(taps: &[f64], cov: &CovarianceModel, x: &[f64]) -> Result<Vec<f64>> {
    if taps.is_empty() {
        return Err(Error::Shape("a filter needs at least one tap".into()));
    }
    check_input(cov, x)?;
    let mut out: Vec<f64> = x.iter().map(|v| taps[0] * v).collect();
    let mut shifted = x.to_vec();
    for &h in &taps[1..] {
        shifted = cov.matvec(&shifted);
        for (o, s) in out.iter_mut().zip(&shifted) {
            *o += h * s;
        }
    }
    Ok(out)
}

/// One filter-bank layer: `x_out[f] = σ(Σ_g H_fg(C) x_in[g])`.
pub fn layer_forward(
    layer: &LayerTaps,
    cov: &CovarianceModel,
    x_in: &[Vec<f64>],
    nonlinearity: Nonlinearity,
) -> Result<Vec<Vec<f64>>> {
    if x_in.len() != layer.f_in {
        return Err(Error::Shape(format!(
            "layer expects {} input features, got {}",
            layer.f_in,
            x_in.len()
        )));
    }
    let m = cov.dim();
    let mut shifted = Vec::with_capacity(layer.f_in);
    for x in x_in {
        check_input(cov, x)?;
        shifted.push(shifted_signals(cov, x, layer.n_taps - 1));
    }
    let mut out = Vec::with_capacity(layer.f_out);
    for f in 0..layer.f_out {
        let mut u = vec![0.0; m];
        for (g, powers) in shifted.iter().enumerate() {
            for (k, p) in powers.iter().enumerate() {
                let h = layer.get(f, g, k);
                for (a, b) in u.iter_mut().zip(p) {
                    *a += h * b;
                }
            }
        }
        u.iter_mut().for_each(|v| *v = nonlinearity.apply(*v));
        out.push(u);
    }
    Ok(out)
}

/// Per-feature node means of the final layer.
pub fn pooled_features(model: &VnnModel, cov: &CovarianceModel, x: &[f64]) -> Result<Vec<f64>> {
    model.validate()?;
    check_input(cov, x)?;
    let mut h = vec![x.to_vec()];
    for layer in &model.taps.layers {
        h = layer_forward(layer, cov, &h, model.config.nonlinearity)?;
    }
    let m = cov.dim() as f64;
    Ok(h.iter().map(|z| z.iter().sum::<f64>() / m).collect())
}

/// Φ(x; C, H): layers, node mean, linear readout.
pub fn forward(model: &VnnModel, cov: &CovarianceModel, x: &[f64]) -> Result<f64> {
    let pooled = pooled_features(model, cov, x)?;
    Ok(pooled
        .iter()
        .zip(&model.readout_weights)
        .map(|(p, w)| p * w)
        .sum::<f64>()
        + model.readout_bias)
}

/// Relabels the nodes of an input and its covariance consistently: returns `(Px, PCPᵀ)`.
pub fn permute_input(x: &[f64], cov: &CovarianceModel, perm: &[usize]) -> Result<(Vec<f64>, CovarianceModel)> {
    check_permutation(perm, x.len())?;
    let pc = cov.permuted(perm)?;
    Ok((perm.iter().map(|&p| x[p]).collect(), pc))
}
