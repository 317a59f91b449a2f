//! Studentized range distribution by adaptive Gauss–Legendre quadrature.

use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use super::special::{norm_cdf, norm_pdf};

const GL_ORDER: usize = 15;
const ABS_TOL: f64 = 1e-6;
const MAX_DEPTH: u32 = 30;
const INNER_LIMIT: f64 = 8.5;

fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=n {
                    let j = j as f64;
                    let p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

fn gl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (nodes, weights) = gauss_legendre();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (a + b);
    let left = gl(f, a, mid);
    let right = gl(f, mid, b);
    if depth >= MAX_DEPTH || (left + right - whole).abs() <= tol {
        return left + right;
    }
    adaptive(f, a, mid, left, tol / 2.0, depth + 1) + adaptive(f, mid, b, right, tol / 2.0, depth + 1)
}

/// ∫ₐᵇ f by interval halving until the halves agree with the whole within `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let whole = gl(&f, a, b);
    adaptive(&f, a, b, whole, tol, 0)
}

/// P(range of k standard normals ≤ w).
pub fn range_cdf(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let kf = k as f64;
    let km1 = (k - 1) as i32;
    let v = integrate(
        |z| norm_pdf(z) * (norm_cdf(z) - norm_cdf(z - w)).powi(km1),
        -INNER_LIMIT,
        INNER_LIMIT + w.min(INNER_LIMIT),
        ABS_TOL / kf,
    );
    (kf * v).clamp(0.0, 1.0)
}

/// CDF of the studentized range for `k` groups and `df` error degrees of freedom.
pub fn ptukey(q: f64, k: usize, df: f64) -> f64 {
    assert!(k >= 2, "studentized range needs at least two groups");
    if q.is_nan() || df.is_nan() {
        return f64::NAN;
    }
    if q <= 0.0 {
        return 0.0;
    }
    if q.is_infinite() {
        return 1.0;
    }
    if df.is_infinite() || df > 25_000.0 {
        return range_cdf(q, k);
    }
    // s = chi_df / sqrt(df)
    let half = df / 2.0;
    let log_norm = half * df.ln() - ln_gamma(half) - (half - 1.0) * std::f64::consts::LN_2;
    let density = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            (log_norm + (df - 1.0) * s.ln() - half * s * s).exp()
        }
    };
    let spread = 12.0 / df.sqrt();
    let lo = (1.0 - spread).max(0.0);
    let hi = 1.0 + spread;
    integrate(|s| density(s) * range_cdf(q * s, k), lo, hi, ABS_TOL).clamp(0.0, 1.0)
}

/// Quantile of the studentized range, found by bisection.
pub fn qtukey(p: f64, k: usize, df: f64) -> f64 {
    assert!((0.0..1.0).contains(&p), "probability must lie in [0,1)");
    let (mut lo, mut hi) = (0.0, 1.0);
    while ptukey(hi, k, df) < p {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ptukey(mid, k, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    0.5 * (lo + hi)
}
