//! Feature maps, covariances and the closed-form predictors the networks are checked against.

use thiserror::Error;

use crate::constructions::KnotGrid;
use crate::linalg::{invert, matvec, spectral_norm, LinalgError, Matrix};
use crate::tasks::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("no samples given")]
    Empty,
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empirical covariance is rank deficient ({samples} samples for {features} features)")]
    RankDeficient { samples: usize, features: usize },
    #[error("unsupported pairing: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureSpec {
    Monomial(usize),
    Spline(KnotGrid),
}

impl FeatureSpec {
    /// Feature count `w`: `d + 1` or `m + q`.
    pub fn dim(&self) -> usize {
        match self {
            FeatureSpec::Monomial(d) => d + 1,
            FeatureSpec::Spline(g) => g.dim(),
        }
    }

    pub fn features(&self, x: f64) -> Vec<f64> {
        match self {
            FeatureSpec::Monomial(d) => monomial_features(x, *d),
            FeatureSpec::Spline(g) => bspline_basis(x, g),
        }
    }

    /// `sup ‖φ(x)‖₂` over inputs with `|x| ≤ r`.
    pub fn feature_norm_bound(&self, r: f64) -> f64 {
        match self {
            FeatureSpec::Monomial(d) => ((d + 1) as f64).sqrt() * r.abs().powi(*d as i32).max(1.0),
            // nonnegative entries summing to one
            FeatureSpec::Spline(_) => 1.0,
        }
    }
}

/// Input distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform {
    pub a: f64,
    pub b: f64,
}

impl Uniform {
    pub fn new(a: f64, b: f64) -> Self {
        assert!(a < b, "uniform({a}, {b}) has empty support");
        Self { a, b }
    }

    pub fn symmetric() -> Self {
        Self { a: -1.0, b: 1.0 }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        self.a + (self.b - self.a) * rng.uniform()
    }

    pub fn radius(&self) -> f64 {
        self.a.abs().max(self.b.abs())
    }
}

/// `[1, x, …, xᵈ]` by repeated multiplication.
pub fn monomial_features(x: f64, d: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(d + 1);
    let mut p = 1.0;
    v.push(p);
    for _ in 0..d {
        p *= x;
        v.push(p);
    }
    v
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Cardinal B-spline `B_q(u) = (1/q!) Σⱼ (-1)ʲ C(q+1, j) (u - j)₊^q`.
pub fn cardinal_bspline(u: f64, q: usize) -> f64 {
    let fact: f64 = (1..=q).map(|i| i as f64).product();
    let mut total = 0.0;
    for j in 0..=q + 1 {
        let r = (u - j as f64).max(0.0);
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binomial(q + 1, j) * r.powi(q as i32);
    }
    total / fact
}

/// `B_q((x - t_j)/h)` for `j = 1-q ..= m`.
pub fn bspline_basis(x: f64, grid: &KnotGrid) -> Vec<f64> {
    let h = grid.spacing();
    grid.basis_indices()
        .map(|j| cardinal_bspline((x - grid.knot(j)) / h, grid.degree))
        .collect()
}

/// `Σₖ cₖ Pₖ(x)` via `(k+1) P_{k+1} = (2k+1) x P_k - k P_{k-1}`.
pub fn legendre_eval(coeffs: &[f64], x: f64) -> f64 {
    let mut total = 0.0;
    let (mut prev, mut cur) = (0.0, 1.0);
    for (k, &c) in coeffs.iter().enumerate() {
        total += c * cur;
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * cur - kf * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
    }
    total
}

/// `E[φφᵀ]` in closed form; splines are integrated exactly bin by bin.
pub fn sigma_closed_form(spec: &FeatureSpec, dist: &Uniform) -> Result<Matrix, RegressionError> {
    match spec {
        FeatureSpec::Monomial(d) => {
            let (a, b) = (dist.a, dist.b);
            Ok(Matrix::from_fn(d + 1, d + 1, |i, j| {
                let p = (i + j + 1) as i32;
                (b.powi(p) - a.powi(p)) / (p as f64 * (b - a))
            }))
        }
        FeatureSpec::Spline(grid) => spline_sigma(grid, dist),
    }
}

const GAUSS_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664_0,
    0.906_179_845_938_664_0,
];
const GAUSS_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

fn spline_sigma(grid: &KnotGrid, dist: &Uniform) -> Result<Matrix, RegressionError> {
    if dist.a < grid.a - 1e-12 || dist.b > grid.b + 1e-12 {
        return Err(RegressionError::Unsupported(format!(
            "distribution [{}, {}] leaves the grid [{}, {}]",
            dist.a, dist.b, grid.a, grid.b
        )));
    }
    // break points: knots inside the support plus its ends
    let mut cuts = vec![dist.a];
    for j in 1..=grid.m as i64 + 1 {
        let t = grid.knot(j);
        if t > dist.a && t < dist.b {
            cuts.push(t);
        }
    }
    cuts.push(dist.b);
    let w = grid.dim();
    let mut s = Matrix::zeros(w, w);
    for pair in cuts.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let half = (hi - lo) / 2.0;
        let mid = (hi + lo) / 2.0;
        for (&node, &weight) in GAUSS_NODES.iter().zip(&GAUSS_WEIGHTS) {
            let phi = bspline_basis(mid + half * node, grid);
            let c = weight * half / (dist.b - dist.a);
            for i in 0..w {
                for j in 0..w {
                    s[(i, j)] += c * phi[i] * phi[j];
                }
            }
        }
    }
    Ok(s)
}

/// `(1/n) Σ φ(xᵢ) φ(xᵢ)ᵀ`, symmetric by construction.
pub fn sigma_empirical(xs: &[f64], spec: &FeatureSpec) -> Result<Matrix, RegressionError> {
    if xs.is_empty() {
        return Err(RegressionError::Empty);
    }
    let w = spec.dim();
    let mut s = Matrix::zeros(w, w);
    for &x in xs {
        let phi = spec.features(x);
        for i in 0..w {
            for j in i..w {
                s[(i, j)] += phi[i] * phi[j];
            }
        }
    }
    let n = xs.len() as f64;
    for i in 0..w {
        for j in i..w {
            let v = s[(i, j)] / n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Population and empirical covariance with `τ ≈ ‖Σ⁻¹‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    pub sigma: Matrix,
    pub sigma_n: Matrix,
    pub tau_estimate: f64,
}

pub fn covariance_pair(
    xs: &[f64],
    spec: &FeatureSpec,
    dist: &Uniform,
) -> Result<CovariancePair, RegressionError> {
    let sigma = sigma_closed_form(spec, dist)?;
    let sigma_n = sigma_empirical(xs, spec)?;
    let tau_estimate = spectral_norm(&invert(&sigma)?)?;
    Ok(CovariancePair {
        sigma,
        sigma_n,
        tau_estimate,
    })
}

/// `(1/n) Σ yᵢ φ(xᵢ)`.
pub fn moment_vector(xs: &[f64], ys: &[f64], spec: &FeatureSpec) -> Result<Vec<f64>, RegressionError> {
    if xs.is_empty() {
        return Err(RegressionError::Empty);
    }
    if xs.len() != ys.len() {
        return Err(RegressionError::Dimension {
            what: "outputs",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let mut g = vec![0.0; spec.dim()];
    for (&x, &y) in xs.iter().zip(ys) {
        for (gi, p) in g.iter_mut().zip(spec.features(x)) {
            *gi += y * p;
        }
    }
    let n = xs.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// `((1/n) Σ yᵢ φ(xᵢ)ᵀ) Σ⁻¹ φ(x)`.
pub fn reference_predict(
    context: &[(f64, f64)],
    query: f64,
    spec: &FeatureSpec,
    sigma_inv: &Matrix,
) -> Result<f64, RegressionError> {
    let xs: Vec<f64> = context.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = context.iter().map(|p| p.1).collect();
    reference_predict_xy(&xs, &ys, query, spec, sigma_inv)
}

pub fn reference_predict_xy(
    xs: &[f64],
    ys: &[f64],
    query: f64,
    spec: &FeatureSpec,
    sigma_inv: &Matrix,
) -> Result<f64, RegressionError> {
    let w = spec.dim();
    if sigma_inv.shape() != (w, w) {
        return Err(RegressionError::Dimension {
            what: "sigma_inv",
            expected: w,
            got: sigma_inv.rows(),
        });
    }
    let g = moment_vector(xs, ys, spec)?;
    let s = matvec(sigma_inv, &spec.features(query))?;
    Ok(g.iter().zip(&s).map(|(a, b)| a * b).sum())
}

/// Coordinatewise prediction for vector outputs.
pub fn reference_predict_vector(
    xs: &[f64],
    ys: &[Vec<f64>],
    query: f64,
    spec: &FeatureSpec,
    sigma_inv: &Matrix,
) -> Result<Vec<f64>, RegressionError> {
    let out_dim = ys.first().map_or(0, Vec::len);
    (0..out_dim)
        .map(|k| {
            let col: Vec<f64> = ys.iter().map(|y| y[k]).collect();
            reference_predict_xy(xs, &col, query, spec, sigma_inv)
        })
        .collect()
}

/// Least-squares coefficients `Σₙ⁻¹ (1/n) Σ yᵢ φ(xᵢ)`.
pub fn ols_solve(context: &[(f64, f64)], spec: &FeatureSpec) -> Result<Vec<f64>, RegressionError> {
    let w = spec.dim();
    if context.len() < w {
        return Err(RegressionError::RankDeficient {
            samples: context.len(),
            features: w,
        });
    }
    let xs: Vec<f64> = context.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = context.iter().map(|p| p.1).collect();
    let sigma_n = sigma_empirical(&xs, spec)?;
    let inv = invert(&sigma_n).map_err(|e| match e {
        LinalgError::Singular { .. } => RegressionError::RankDeficient {
            samples: context.len(),
            features: w,
        },
        other => other.into(),
    })?;
    Ok(matvec(&inv, &moment_vector(&xs, &ys, spec)?)?)
}

/// One row of the covariance concentration report.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinReport {
    pub n: usize,
    /// Polynomial degree, or spline feature count minus one.
    pub d: usize,
    pub mean_norm: f64,
    /// `√(2 R⁴ log(2w) / n) + 2 R² log(2w) / (3n)`.
    pub bound: f64,
    /// Fraction of trials with `‖Σₙ - Σ‖ ≥ bound`.
    pub tail_freq: f64,
    /// `2w · exp(-(t²/2) / (v + L t / 3))` at `t = bound`.
    pub tail_bound: f64,
}

impl BernsteinReport {
    pub const CSV_HEADER: &'static str = "n,d,mean_norm,bound,tail_freq,tail_bound";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{:e}",
            self.n, self.d, self.mean_norm, self.bound, self.tail_freq, self.tail_bound
        )
    }
}

/// Samples `Y = Σₙ - Σ` over `trials` independent contexts of size `n`.
pub fn bernstein_diagnostic(
    n: usize,
    spec: &FeatureSpec,
    dist: &Uniform,
    trials: usize,
    seed: u64,
) -> Result<BernsteinReport, RegressionError> {
    if n == 0 || trials == 0 {
        return Err(RegressionError::Empty);
    }
    let sigma = sigma_closed_form(spec, dist)?;
    let w = spec.dim();
    let rv = spec.feature_norm_bound(dist.radius());
    let nf = n as f64;
    let log2w = (2.0 * w as f64).ln();
    let bound = (2.0 * rv.powi(4) * log2w / nf).sqrt() + 2.0 * rv * rv * log2w / (3.0 * nf);
    let variance = rv.powi(4) / nf;
    let l = 2.0 * rv * rv / nf;
    let tail_bound =
        (2.0 * w as f64 * (-(bound * bound / 2.0) / (variance + l * bound / 3.0)).exp()).min(1.0);

    let mut total = 0.0;
    let mut exceed = 0usize;
    let mut xs = vec![0.0; n];
    for trial in 0..trials {
        let mut rng = SeededRng::derive(seed, trial as u64);
        xs.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        let y = sigma_empirical(&xs, spec)?.sub(&sigma)?;
        let norm = spectral_norm(&y)?;
        total += norm;
        if norm >= bound {
            exceed += 1;
        }
    }
    Ok(BernsteinReport {
        n,
        d: w - 1,
        mean_norm: total / trials as f64,
        bound,
        tail_freq: exceed as f64 / trials as f64,
        tail_bound,
    })
}
