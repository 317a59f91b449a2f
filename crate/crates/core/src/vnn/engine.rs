//! Batched forward and reverse-mode passes used for training and bulk scoring.
//!
//! Signals of a layer are stored as one row-major matrix with `F·n` rows and `m`
//! columns: rows `g·n .. (g+1)·n` hold feature `g` for every subject. Since `C` is
//! symmetric, `(C x)ᵀ = xᵀ C`, so shifting all signals at once is a single `P · C`.

use ndarray::Array2;

use super::{Nonlinearity, VnnModel};
use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};

/// Gradient with the same layout as [`VnnModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    /// Per layer, laid out like `LayerTaps::coeffs`.
    pub taps: Vec<Vec<f64>>,
    pub readout_weights: Vec<f64>,
    pub readout_bias: f64,
}

impl ModelGradient {
    pub fn zeros_like(model: &VnnModel) -> Self {
        ModelGradient {
            taps: model.taps.layers.iter().map(|t| vec![0.0; t.coeffs().len()]).collect(),
            readout_weights: vec![0.0; model.readout_weights.len()],
            readout_bias: 0.0,
        }
    }

    /// Same ordering as [`VnnModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.taps.iter().flatten().copied().collect();
        out.extend_from_slice(&self.readout_weights);
        out.push(self.readout_bias);
        out
    }
}

struct LayerCache {
    /// `powers[k]` = C^k applied to every input signal, `(F_in·n) × m`.
    powers: Vec<Array2<f64>>,
    pre: Array2<f64>,
    out: Array2<f64>,
}

/// Intermediate values of a batched forward pass.
pub struct ForwardPass {
    n: usize,
    layers: Vec<LayerCache>,
    /// `pooled[[f, i]]`: node mean of final feature `f` for subject `i`.
    pub pooled: Array2<f64>,
    pub outputs: Vec<f64>,
}

impl ForwardPass {
    /// Smallest |pre-activation| over all layers.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.pre.iter())
            .fold(f64::INFINITY, |a, &u| a.min(u.abs()))
    }
}

/// Stacks feature vectors into an `n × m` matrix.
pub fn stack_inputs<'a, I>(xs: I, m: usize) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut flat = Vec::new();
    let mut n = 0;
    for x in xs {
        if x.len() != m {
            return Err(Error::Shape(format!("signal of length {} for m={m}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite input signal".into()));
        }
        flat.extend_from_slice(x);
        n += 1;
    }
    Array2::from_shape_vec((n, m), flat).map_err(|e| Error::Shape(e.to_string()))
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Runs the model on the rows of `x` (`n × m`).
pub fn forward_batch(model: &VnnModel, cov: &CovarianceModel, x: &Array2<f64>) -> Result<ForwardPass> {
    model.validate()?;
    let (n, m) = x.dim();
    if m != cov.dim() {
        return Err(Error::Shape(format!("inputs have m={m}, covariance has m={}", cov.dim())));
    }
    let c = cov.matrix();
    let sigma = model.config.nonlinearity;
    let block = n * m;
    let mut input = x.as_standard_layout().into_owned();
    let mut layers = Vec::with_capacity(model.taps.layers.len());
    for t in &model.taps.layers {
        let mut powers = Vec::with_capacity(t.n_taps());
        powers.push(input);
        for k in 1..t.n_taps() {
            let next = powers[k - 1].dot(c);
            powers.push(next);
        }
        let mut pre = Array2::<f64>::zeros((t.f_out() * n, m));
        {
            let pre_s = pre.as_slice_mut().expect("standard layout");
            for f in 0..t.f_out() {
                let dst = &mut pre_s[f * block..(f + 1) * block];
                for g in 0..t.f_in() {
                    for (k, p) in powers.iter().enumerate() {
                        let src = &p.as_slice().expect("standard layout")[g * block..(g + 1) * block];
                        axpy(t.get(f, g, k), src, dst);
                    }
                }
            }
        }
        let out = pre.mapv(|u| sigma.apply(u));
        input = out.clone();
        layers.push(LayerCache { powers, pre, out });
    }
    let last = &layers.last().expect("validated").out;
    let f_last = model.readout_weights.len();
    let mut pooled = Array2::<f64>::zeros((f_last, n));
    let mut outputs = vec![model.readout_bias; n];
    for f in 0..f_last {
        for i in 0..n {
            let mean = last.row(f * n + i).sum() / m as f64;
            pooled[[f, i]] = mean;
            outputs[i] += model.readout_weights[f] * mean;
        }
    }
    Ok(ForwardPass {
        n,
        layers,
        pooled,
        outputs,
    })
}

/// Scores many subjects at once.
pub fn predict_batch(model: &VnnModel, cov: &CovarianceModel, x: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(forward_batch(model, cov, x)?.outputs)
}

/// Reverse pass. `d_outputs[i]` is ∂L/∂Φ(xᵢ); the result is ∂L/∂θ summed over subjects.
pub fn backward_batch(
    model: &VnnModel,
    cov: &CovarianceModel,
    fwd: &ForwardPass,
    d_outputs: &[f64],
) -> Result<ModelGradient> {
    let n = fwd.n;
    if d_outputs.len() != n {
        return Err(Error::Shape("output gradient length differs from batch size".into()));
    }
    let m = cov.dim();
    let block = n * m;
    let c = cov.matrix();
    let sigma: Nonlinearity = model.config.nonlinearity;
    let mut grad = ModelGradient::zeros_like(model);

    let f_last = model.readout_weights.len();
    for f in 0..f_last {
        grad.readout_weights[f] = (0..n).map(|i| d_outputs[i] * fwd.pooled[[f, i]]).sum();
    }
    grad.readout_bias = d_outputs.iter().sum();

    let mut d_out = Array2::<f64>::zeros((f_last * n, m));
    for f in 0..f_last {
        for i in 0..n {
            let v = model.readout_weights[f] * d_outputs[i] / m as f64;
            d_out.row_mut(f * n + i).fill(v);
        }
    }

    for (l, (t, cache)) in model.taps.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let mut d_pre = d_out;
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.pre)
            .and(&cache.out)
            .for_each(|d, &u, &z| *d *= sigma.derivative(u, z));
        if let Some(bad) = d_pre.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("layer {l}: non-finite gradient at entry {bad}")));
        }
        let d_pre_s = d_pre.as_slice().expect("standard layout");
        let g_taps = &mut grad.taps[l];
        let n_taps = t.n_taps();
        for f in 0..t.f_out() {
            let df = &d_pre_s[f * block..(f + 1) * block];
            for g in 0..t.f_in() {
                for (k, p) in cache.powers.iter().enumerate() {
                    let src = &p.as_slice().expect("standard layout")[g * block..(g + 1) * block];
                    g_taps[(f * t.f_in() + g) * n_taps + k] = dot(df, src);
                }
            }
        }
        if l == 0 {
            break;
        }
        // ∂L/∂(C^k z_g) = Σ_f h_fgk ∂L/∂u_f, then fold the powers back with Horner's rule.
        let mut d_powers: Vec<Array2<f64>> = (0..n_taps).map(|_| Array2::zeros((t.f_in() * n, m))).collect();
        for (k, dp) in d_powers.iter_mut().enumerate() {
            let dp_s = dp.as_slice_mut().expect("standard layout");
            for g in 0..t.f_in() {
                let dst = &mut dp_s[g * block..(g + 1) * block];
                for f in 0..t.f_out() {
                    axpy(t.get(f, g, k), &d_pre_s[f * block..(f + 1) * block], dst);
                }
            }
        }
        let mut acc = d_powers.pop().expect("at least one tap");
        while let Some(dp) = d_powers.pop() {
            acc = acc.dot(c) + dp;
        }
        d_out = acc;
    }
    Ok(grad)
}
