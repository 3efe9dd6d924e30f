//! Networks with explicitly constructed weights.
//!
//! Indices are 0-based throughout: rows of the embedding matrix and columns
//! (context positions) both start at 0, so the query sits in column `n`.
//! The polynomial layout with `d_embed = d + 7` is
//!
//! ```text
//! row 0          x
//! rows 1..=d+1   x⁰ … xᵈ   (written by the featurizer)
//! row d+2        y
//! row d+3        zero
//! rows d+4, d+5  positional encoding
//! row d+6        bias
//! ```
//!
//! Every nonlinear feature is produced by interaction heads: ReLU heads that
//! write `scale · σ(⟨q_data h_t1, k_data h_t2⟩ + M)` into a single entry. A
//! shift `M` keeps the ReLU argument positive and a decrementing FFN removes
//! it again.

use std::ops::Range;

use thiserror::Error;

use crate::linalg::{max_norm, Matrix};
use crate::transformer::{
    positional_encoding, ActivationKind, AttentionHeadWeights, FfnLayer, FfnWeights,
    TransformerBlock, TransformerError, TransformerNetwork,
};

/// Largest gate gain an interaction head may use.
pub const MAX_GAIN: f64 = 1e15;

/// Constant `C` in the weight bound `C · d_embed⁴ μ² ℓ² U²` checked for every interaction head.
pub const WEIGHT_BOUND_CONSTANT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructionError {
    #[error("gate gain {gain:.3e} exceeds {MAX_GAIN:e}; use a shorter context or a smaller data bound")]
    GainOverflow { gain: f64 },
    #[error("{what} must be {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid construction input: {0}")]
    Precondition(String),
    #[error("constructed weight {max_weight:.3e} exceeds the recorded bound {bound:.3e}")]
    WeightBound { max_weight: f64, bound: f64 },
    #[error(transparent)]
    Transformer(#[from] TransformerError),
}

fn precondition(msg: impl Into<String>) -> ConstructionError {
    ConstructionError::Precondition(msg.into())
}

/// Target of one interaction head.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSpec {
    /// Column that receives the output.
    pub t1: usize,
    /// Partner column providing the key.
    pub t2: usize,
    pub out_row: usize,
    /// `(d_embed - 3) × d_embed`.
    pub q_data: Matrix,
    /// `(d_embed - 3) × d_embed`.
    pub k_data: Matrix,
    pub scale: f64,
    pub shift: f64,
}

impl InteractionSpec {
    /// Spec whose data kernels are single rows: `⟨q_data h_t1, k_data h_t2⟩ = Σ_r qᵣ·h_t1 kᵣ·h_t2`
    /// with one `(q, k)` row pair per entry of `terms`, each row given as sparse `(index, weight)`.
    pub fn from_terms(
        d_embed: usize,
        t1: usize,
        t2: usize,
        out_row: usize,
        terms: &[(&[(usize, f64)], &[(usize, f64)])],
        scale: f64,
        shift: f64,
    ) -> Self {
        let mut q_data = Matrix::zeros(d_embed - 3, d_embed);
        let mut k_data = Matrix::zeros(d_embed - 3, d_embed);
        for (r, (q, k)) in terms.iter().enumerate() {
            for &(c, w) in q.iter() {
                q_data[(r, c)] += w;
            }
            for &(c, w) in k.iter() {
                k_data[(r, c)] += w;
            }
        }
        Self {
            t1,
            t2,
            out_row,
            q_data,
            k_data,
            scale,
            shift,
        }
    }

    /// Largest data-kernel entry `μ`.
    pub fn mu(&self) -> f64 {
        max_norm(&self.q_data).max(max_norm(&self.k_data))
    }

    /// `⟨q_data h_t1, k_data h_t2⟩ + M` evaluated directly.
    pub fn contract_score(&self, h: &Matrix) -> f64 {
        let (rows, cols) = self.q_data.shape();
        let mut total = 0.0;
        for r in 0..rows {
            let mut q = 0.0;
            let mut k = 0.0;
            for c in 0..cols {
                q += self.q_data[(r, c)] * h[(c, self.t1)];
                k += self.k_data[(r, c)] * h[(c, self.t2)];
            }
            total += q * k;
        }
        total + self.shift
    }

    /// The head output promised by the construction: zero except at `(out_row, t1)`.
    pub fn contract_output(&self, h: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(h.rows(), h.cols());
        out[(self.out_row, self.t1)] = self.scale * self.contract_score(h).max(0.0);
        out
    }
}

/// A built interaction head together with its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionHead {
    pub weights: AttentionHeadWeights,
    pub gain: f64,
    /// Largest entry of `Q` and `K`.
    pub max_weight: f64,
    /// `C · d_embed⁴ μ² ℓ² U²` with `μ, U` floored at 1 and `μ ≥ |M|`.
    pub weight_bound: f64,
}

/// Builds the ReLU head realizing `spec` for sequences of length `ell` whose entries are below `data_bound`.
pub fn build_interaction_head(
    spec: &InteractionSpec,
    ell: usize,
    d_embed: usize,
    data_bound: f64,
) -> Result<AttentionHeadWeights, ConstructionError> {
    build_interaction_head_report(spec, ell, d_embed, data_bound).map(|h| h.weights)
}

pub fn build_interaction_head_report(
    spec: &InteractionSpec,
    ell: usize,
    d_embed: usize,
    data_bound: f64,
) -> Result<InteractionHead, ConstructionError> {
    let d = d_embed;
    if d < 5 {
        return Err(precondition(format!("d_embed {d} < 5")));
    }
    if ell == 0 || spec.t1 >= ell || spec.t2 >= ell {
        return Err(precondition(format!(
            "columns ({}, {}) outside sequence of length {ell}",
            spec.t1, spec.t2
        )));
    }
    if spec.out_row >= d {
        return Err(precondition(format!("out_row {} >= d_embed {d}", spec.out_row)));
    }
    if !(data_bound > 0.0) || !spec.shift.is_finite() || spec.shift < 0.0 {
        return Err(precondition("data bound must be positive and shift non-negative"));
    }
    for (what, m) in [("q_data", &spec.q_data), ("k_data", &spec.k_data)] {
        if m.shape() != (d - 3, d) {
            return Err(ConstructionError::Shape {
                what,
                expected: (d - 3, d),
                found: m.shape(),
            });
        }
    }

    let u = data_bound.max(1.0);
    let mut b_data = 0.0;
    for r in 0..d - 3 {
        let qs: f64 = spec.q_data.row(r).iter().map(|v| v.abs()).sum();
        let ks: f64 = spec.k_data.row(r).iter().map(|v| v.abs()).sum();
        b_data += qs * ks;
    }
    b_data *= u * u;
    let theta = std::f64::consts::PI / (2.0 * ell as f64);
    let half = (theta / 2.0).sin();
    // off-target gates are at most -2G sin²(θ/2) = -2(B + M + 1)
    let gain = (b_data + spec.shift + 1.0) / (half * half);
    if !(gain <= MAX_GAIN) {
        return Err(ConstructionError::GainOverflow { gain });
    }

    let (ra, rb, rc) = (d - 3, d - 2, d - 1);
    let (pc, ps, bias) = (d - 3, d - 2, d - 1);
    let mut q = Matrix::zeros(d, d);
    let mut k = Matrix::zeros(d, d);
    for r in 0..d - 3 {
        q.row_mut(r).copy_from_slice(spec.q_data.row(r));
        k.row_mut(r).copy_from_slice(spec.k_data.row(r));
    }
    let gate = |m: &mut Matrix, row: usize, t: usize| {
        let (c, s) = positional_encoding(t + 1, ell);
        let wc = gain * c;
        let ws = gain * s;
        m[(row, pc)] = wc;
        m[(row, ps)] = ws;
        // cancels the exact floating-point value at the target position
        m[(row, bias)] = -(wc * c + ws * s);
    };
    gate(&mut k, ra, spec.t2);
    q[(ra, bias)] = 1.0;
    gate(&mut q, rb, spec.t1);
    k[(rb, bias)] = 1.0;
    q[(rc, bias)] = 1.0;
    k[(rc, bias)] = spec.shift;

    let mut v = Matrix::zeros(d, d);
    v[(spec.out_row, bias)] = spec.scale;

    let max_weight = max_norm(&q).max(max_norm(&k));
    let mu = spec.mu().max(spec.shift).max(1.0);
    let df = d as f64;
    let weight_bound =
        WEIGHT_BOUND_CONSTANT * df.powi(4) * mu * mu * (ell as f64).powi(2) * u * u;
    if max_weight > weight_bound {
        return Err(ConstructionError::WeightBound {
            max_weight,
            bound: weight_bound,
        });
    }
    Ok(InteractionHead {
        weights: AttentionHeadWeights::new(q, k, v),
        gain,
        max_weight,
        weight_bound,
    })
}

/// One subtraction of `shift` from `rows` over the columns in `cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decrement {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub shift: f64,
}

/// Residual FFN subtracting `shift` from `rows` in the columns `cols`, leaving everything else unchanged.
///
/// Column membership is decided from the positional encoding alone, so the map is exact on any
/// input whose positional and bias rows are intact.
pub fn build_decrementing_ffn(
    rows: Range<usize>,
    cols: Range<usize>,
    shift: f64,
    ell: usize,
    d_embed: usize,
) -> Result<FfnWeights, ConstructionError> {
    build_stacked_decrementers(&[Decrement { rows, cols, shift }], ell, d_embed)
}

/// Several decrementers side by side in one FFN of depth 5.
pub fn build_stacked_decrementers(
    parts: &[Decrement],
    ell: usize,
    d_embed: usize,
) -> Result<FfnWeights, ConstructionError> {
    let d = d_embed;
    if d < 5 || ell == 0 {
        return Err(precondition("decrementer needs d_embed >= 5 and ell >= 1"));
    }
    if parts.is_empty() {
        return Err(precondition("no decrement requested"));
    }
    for p in parts {
        if p.rows.start >= p.rows.end || p.rows.end > d - 3 {
            return Err(precondition(format!(
                "rows {:?} must be a nonempty range below {}",
                p.rows,
                d - 3
            )));
        }
        if p.cols.start > p.cols.end || p.cols.end > ell {
            return Err(precondition(format!("columns {:?} outside 0..{ell}", p.cols)));
        }
        if !(p.shift > 0.0) || !p.shift.is_finite() {
            return Err(precondition("shift must be positive"));
        }
    }
    let k = parts.len();
    let theta = std::f64::consts::PI / (2.0 * ell as f64);
    let w = 2.0 / (theta / 2.0).sin();
    let (pc, ps) = (d - 3, d - 2);

    let mut l1 = Matrix::zeros(2 * k, d);
    let mut l2 = Matrix::zeros(4 * k, 2 * k);
    let mut b2 = vec![0.0; 4 * k];
    let mut l3 = Matrix::zeros(2 * k, 4 * k);
    let mut l4 = Matrix::zeros(k, 2 * k);
    let b4 = vec![-1.0; k];
    let mut l5 = Matrix::zeros(d, k);
    for (i, p) in parts.iter().enumerate() {
        // column c has position c+1; a = [c >= start], b = [c < end]
        let phi1 = (p.cols.start as f64 + 0.5) * theta;
        let phi2 = (p.cols.end as f64 + 0.5) * theta;
        l1[(2 * i, ps)] = w * phi1.cos();
        l1[(2 * i, pc)] = -w * phi1.sin();
        l1[(2 * i + 1, pc)] = w * phi2.sin();
        l1[(2 * i + 1, ps)] = -w * phi2.cos();
        for s in 0..2 {
            l2[(4 * i + s, 2 * i + s)] = 1.0;
            l2[(4 * i + 2 + s, 2 * i + s)] = 1.0;
            b2[4 * i + 2 + s] = -1.0;
            l3[(2 * i + s, 4 * i + s)] = 1.0;
            l3[(2 * i + s, 4 * i + 2 + s)] = -1.0;
            l4[(i, 2 * i + s)] = 1.0;
        }
        for r in p.rows.clone() {
            l5[(r, i)] -= p.shift;
        }
    }
    Ok(FfnWeights::new(vec![
        FfnLayer {
            weight: l1,
            bias: vec![0.0; 2 * k],
        },
        FfnLayer {
            weight: l2,
            bias: b2,
        },
        FfnLayer {
            weight: l3,
            bias: vec![0.0; 2 * k],
        },
        FfnLayer {
            weight: l4,
            bias: b4,
        },
        FfnLayer {
            weight: l5,
            bias: vec![0.0; d],
        },
    ])?)
}

/// Bounds used when sizing shifts and gates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    /// Bound `R` on `|x|` for inputs and queries.
    pub input_bound: f64,
    /// Overrides the default shift `M = 10 (1 + U)²`.
    pub shift: Option<f64>,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            input_bound: 1.0,
            shift: None,
        }
    }
}

impl OracleParams {
    /// `U = max(1, R)ᵈ + 1`, a strict bound on every feature entry.
    pub fn data_bound(&self, d: usize) -> f64 {
        self.input_bound.abs().max(1.0).powi(d as i32) + 1.0
    }

    pub fn shift_for(&self, data_bound: f64) -> f64 {
        self.shift
            .unwrap_or_else(|| 10.0 * (1.0 + data_bound) * (1.0 + data_bound))
    }
}

/// Row positions of a feature layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub d_embed: usize,
    pub features: Range<usize>,
    pub outputs: Range<usize>,
}

impl FeatureLayout {
    /// Monomials of degree `d` with `out_dim` outputs: `d_embed = out_dim + d + 6`.
    pub fn polynomial(d: usize, out_dim: usize) -> Self {
        Self {
            d_embed: out_dim + d + 6,
            features: 1..d + 2,
            outputs: d + 2..d + 2 + out_dim,
        }
    }

    pub fn linear_spline(m: usize) -> Self {
        Self {
            d_embed: m + 7,
            features: 1..m + 2,
            outputs: m + 2..m + 3,
        }
    }

    pub fn quadratic_spline(m: usize) -> Self {
        let first = 4 * (m + 2) + 1;
        Self {
            d_embed: 5 * m + 16,
            features: first..first + m + 2,
            outputs: 5 * m + 11..5 * m + 12,
        }
    }

    pub fn bias_row(&self) -> usize {
        self.d_embed - 1
    }
}

pub fn poly_embed_dim(d: usize) -> usize {
    d + 7
}

/// Block B₀: writes ones into row 1 and a copy of `x` into row 2.
pub fn build_copy_block(d: usize, n: usize) -> Result<TransformerBlock, ConstructionError> {
    build_copy_block_with(&FeatureLayout::polynomial(d, 1), d, n, &OracleParams::default())
}

pub fn build_copy_block_with(
    layout: &FeatureLayout,
    d: usize,
    n: usize,
    params: &OracleParams,
) -> Result<TransformerBlock, ConstructionError> {
    if d == 0 {
        return Err(precondition("degree must be at least 1"));
    }
    let de = layout.d_embed;
    let ell = n + 1;
    let bias = layout.bias_row();
    let u = params.data_bound(d);
    let m = params.shift_for(u);
    let ones_row = layout.features.start;
    let x_row = ones_row + 1;
    let mut heads = Vec::with_capacity(2 * ell);
    for t in 0..ell {
        let ones = InteractionSpec::from_terms(
            de,
            t,
            t,
            ones_row,
            &[(&[(bias, 1.0)], &[(bias, 1.0)])],
            1.0,
            0.0,
        );
        heads.push(build_interaction_head(&ones, ell, de, u)?);
        let copy = InteractionSpec::from_terms(
            de,
            t,
            t,
            x_row,
            &[(&[(bias, 1.0)], &[(0, 1.0)])],
            1.0,
            m,
        );
        heads.push(build_interaction_head(&copy, ell, de, u)?);
    }
    let ffn = build_decrementing_ffn(x_row..x_row + 1, 0..ell, m, ell, de)?;
    Ok(TransformerBlock {
        heads,
        activation: ActivationKind::relu(),
        ffn: Some(ffn),
    })
}

/// Number of doubling blocks, `⌈log₂ d⌉`.
pub fn doubling_depth(d: usize) -> usize {
    let mut depth = 0;
    while (1usize << depth) < d {
        depth += 1;
    }
    depth
}

/// Blocks raising `x` to all powers up to `d`; block `j` multiplies `x^(2^(j-1))` by `x¹ … x^(2^(j-1))`.
pub fn build_power_doubling_blocks(
    d: usize,
    n: usize,
) -> Result<Vec<TransformerBlock>, ConstructionError> {
    build_power_doubling_blocks_with(&FeatureLayout::polynomial(d, 1), d, n, &OracleParams::default())
}

pub fn build_power_doubling_blocks_with(
    layout: &FeatureLayout,
    d: usize,
    n: usize,
    params: &OracleParams,
) -> Result<Vec<TransformerBlock>, ConstructionError> {
    let de = layout.d_embed;
    let ell = n + 1;
    let u = params.data_bound(d);
    let m = params.shift_for(u);
    let row_of = |power: usize| layout.features.start + power;
    let mut blocks = Vec::new();
    for j in 1..=doubling_depth(d) {
        let base = 1usize << (j - 1);
        let top = (2 * base).min(d);
        let mut heads = Vec::with_capacity((top - base) * ell);
        for k in 1..=top - base {
            for t in 0..ell {
                let spec = InteractionSpec::from_terms(
                    de,
                    t,
                    t,
                    row_of(base + k),
                    &[(&[(row_of(base), 1.0)], &[(row_of(k), 1.0)])],
                    1.0,
                    m,
                );
                heads.push(build_interaction_head(&spec, ell, de, u)?);
            }
        }
        let ffn = build_decrementing_ffn(row_of(base + 1)..row_of(top) + 1, 0..ell, m, ell, de)?;
        blocks.push(TransformerBlock {
            heads,
            activation: ActivationKind::relu(),
            ffn: Some(ffn),
        });
    }
    Ok(blocks)
}

/// Linear-attention head with `V = p` on the output rows and merged `KᵀQ = Σ⁻¹` on the feature rows.
pub fn build_readout_block(
    sigma_inv: &Matrix,
    layout: &FeatureLayout,
    p: f64,
) -> Result<TransformerBlock, ConstructionError> {
    let w = layout.features.len();
    if sigma_inv.shape() != (w, w) {
        return Err(ConstructionError::Shape {
            what: "sigma_inv",
            expected: (w, w),
            found: sigma_inv.shape(),
        });
    }
    let de = layout.d_embed;
    let mut q = Matrix::zeros(de, de);
    q.set_block(layout.features.start, layout.features.start, sigma_inv);
    let mut v = Matrix::zeros(de, de);
    for r in layout.outputs.clone() {
        v[(r, r)] = p;
    }
    Ok(TransformerBlock::attention_only(
        vec![AttentionHeadWeights::merged(q, v)],
        ActivationKind::linear(),
    ))
}

/// OLS readout block for the polynomial layout of degree `d`.
pub fn build_ols_linear_block(
    sigma_inv: &Matrix,
    d: usize,
    p: f64,
) -> Result<TransformerBlock, ConstructionError> {
    build_readout_block(sigma_inv, &FeatureLayout::polynomial(d, 1), p)
}

/// B₀, the doubling blocks and the readout: predicts `((1/n)Σ yᵢ v(xᵢ)ᵀ) Σ⁻¹ v(x)`.
pub fn build_poly_oracle(
    d: usize,
    n: usize,
    sigma_inv: &Matrix,
) -> Result<TransformerNetwork, ConstructionError> {
    build_poly_oracle_with(d, n, sigma_inv, &OracleParams::default())
}

pub fn build_poly_oracle_with(
    d: usize,
    n: usize,
    sigma_inv: &Matrix,
    params: &OracleParams,
) -> Result<TransformerNetwork, ConstructionError> {
    let layout = FeatureLayout::polynomial(d, 1);
    let mut blocks = vec![build_copy_block_with(&layout, d, n, params)?];
    blocks.extend(build_power_doubling_blocks_with(&layout, d, n, params)?);
    blocks.push(build_readout_block(sigma_inv, &layout, 1.0)?);
    Ok(TransformerNetwork::scalar(layout.d_embed, blocks)
        .with_metadata(format!("kind=poly;d={d};n={n}")))
}

/// Same pipeline with `out_dim` output rows read in parallel.
pub fn build_vector_valued_oracle(
    d: usize,
    n: usize,
    out_dim: usize,
    sigma_inv: &Matrix,
) -> Result<TransformerNetwork, ConstructionError> {
    if out_dim == 0 {
        return Err(precondition("output dimension must be at least 1"));
    }
    let layout = FeatureLayout::polynomial(d, out_dim);
    let params = OracleParams::default();
    let mut blocks = vec![build_copy_block_with(&layout, d, n, &params)?];
    blocks.extend(build_power_doubling_blocks_with(&layout, d, n, &params)?);
    blocks.push(build_readout_block(sigma_inv, &layout, 1.0)?);
    Ok(TransformerNetwork::vector(layout.d_embed, out_dim, blocks)
        .with_metadata(format!("kind=vector;d={d};n={n};out_dim={out_dim}")))
}

/// Equally spaced knots `t_j = a + (j - 1) h` on `[a, b]` with `m` bins; indices below 1 are ghost knots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotGrid {
    pub a: f64,
    pub b: f64,
    pub m: usize,
    pub degree: usize,
}

impl KnotGrid {
    pub fn new(a: f64, b: f64, m: usize, degree: usize) -> Result<Self, ConstructionError> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(precondition(format!("interval [{a}, {b}] is empty")));
        }
        if m == 0 {
            return Err(precondition("grid needs at least one bin"));
        }
        if !(1..=2).contains(&degree) {
            return Err(precondition(format!("spline degree {degree} not in 1..=2")));
        }
        Ok(Self { a, b, m, degree })
    }

    pub fn spacing(&self) -> f64 {
        (self.b - self.a) / self.m as f64
    }

    pub fn knot(&self, j: i64) -> f64 {
        self.a + (j - 1) as f64 * self.spacing()
    }

    /// Basis indices `1 - q ..= m`.
    pub fn basis_indices(&self) -> std::ops::RangeInclusive<i64> {
        1 - self.degree as i64..=self.m as i64
    }

    /// Number of basis functions, `m + q`.
    pub fn dim(&self) -> usize {
        self.m + self.degree
    }
}

/// Writes `B₁ʲ(xᵢ)` into rows `1..=m+1`, three ReLU heads per basis function and column.
pub fn build_linear_spline_block(
    grid: &KnotGrid,
    n: usize,
) -> Result<TransformerBlock, ConstructionError> {
    if grid.degree != 1 {
        return Err(precondition("linear spline block needs a degree-1 grid"));
    }
    let layout = FeatureLayout::linear_spline(grid.m);
    let de = layout.d_embed;
    let ell = n + 1;
    let bias = layout.bias_row();
    let h = grid.spacing();
    let u = grid.a.abs().max(grid.b.abs()) + 1.0;
    let coef = [1.0 / h, -2.0 / h, 1.0 / h];
    let mut heads = Vec::with_capacity(3 * ell * grid.dim());
    for (slot, j) in grid.basis_indices().enumerate() {
        let row = layout.features.start + slot;
        for (kk, &c) in coef.iter().enumerate() {
            let offset = -grid.knot(j) - kk as f64 * h;
            for t in 0..ell {
                let spec = InteractionSpec::from_terms(
                    de,
                    t,
                    t,
                    row,
                    &[(&[(bias, 1.0)], &[(0, 1.0)]), (&[(bias, 1.0)], &[(bias, offset)])],
                    c,
                    0.0,
                );
                heads.push(build_interaction_head(&spec, ell, de, u)?);
            }
        }
    }
    Ok(TransformerBlock::attention_only(heads, ActivationKind::relu()))
}

pub fn build_linear_spline_oracle(
    grid: &KnotGrid,
    n: usize,
    sigma_inv: &Matrix,
) -> Result<TransformerNetwork, ConstructionError> {
    let layout = FeatureLayout::linear_spline(grid.m);
    let blocks = vec![
        build_linear_spline_block(grid, n)?,
        build_readout_block(sigma_inv, &layout, 1.0)?,
    ];
    Ok(TransformerNetwork::scalar(layout.d_embed, blocks)
        .with_metadata(format!("kind=linear_spline;m={};n={n}", grid.m)))
}

/// Bounds for the squaring block of the quadratic spline: `(U, largest coefficient, M)`.
fn quadratic_bounds(grid: &KnotGrid, params: &OracleParams) -> (f64, f64, f64) {
    let h = grid.spacing();
    let reach = params.input_bound.abs().max(grid.a.abs()).max(grid.b.abs());
    let u = reach + grid.knot(-1).abs() + 1.0;
    let cmax = 3.0 / (2.0 * h * h);
    let m = params
        .shift
        .unwrap_or(10.0 * (1.0 + u) * (1.0 + u) * cmax.max(1.0));
    (u, cmax, m)
}

/// Two blocks: ReLU ramps `γₖʲ = (x - t_j - kh)₊` into scratch rows, then their weighted squares summed into `B₂ʲ`.
pub fn build_quadratic_spline_blocks(
    grid: &KnotGrid,
    n: usize,
) -> Result<Vec<TransformerBlock>, ConstructionError> {
    if grid.degree != 2 {
        return Err(precondition("quadratic spline blocks need a degree-2 grid"));
    }
    let layout = FeatureLayout::quadratic_spline(grid.m);
    let de = layout.d_embed;
    let ell = n + 1;
    let bias = layout.bias_row();
    let h = grid.spacing();
    let (u, _, m) = quadratic_bounds(grid, &OracleParams::default());
    let upsilon = [1.0, -3.0, 3.0, -1.0];
    let gamma_row = |slot: usize, k: usize| 1 + 4 * slot + k;

    let mut ramps = Vec::with_capacity(4 * grid.dim() * ell);
    let mut squares = Vec::with_capacity(4 * grid.dim() * ell);
    for (slot, j) in grid.basis_indices().enumerate() {
        for (k, &ups) in upsilon.iter().enumerate() {
            let offset = -grid.knot(j) - k as f64 * h;
            let c = ups / (2.0 * h * h);
            for t in 0..ell {
                let ramp = InteractionSpec::from_terms(
                    de,
                    t,
                    t,
                    gamma_row(slot, k),
                    &[(&[(bias, 1.0)], &[(0, 1.0)]), (&[(bias, 1.0)], &[(bias, offset)])],
                    1.0,
                    0.0,
                );
                ramps.push(build_interaction_head(&ramp, ell, de, u)?);
                let square = InteractionSpec::from_terms(
                    de,
                    t,
                    t,
                    layout.features.start + slot,
                    &[(&[(gamma_row(slot, k), c)], &[(gamma_row(slot, k), 1.0)])],
                    1.0,
                    m,
                );
                squares.push(build_interaction_head(&square, ell, de, u)?);
            }
        }
    }
    let ffn = build_decrementing_ffn(layout.features.clone(), 0..ell, 4.0 * m, ell, de)?;
    Ok(vec![
        TransformerBlock::attention_only(ramps, ActivationKind::relu()),
        TransformerBlock {
            heads: squares,
            activation: ActivationKind::relu(),
            ffn: Some(ffn),
        },
    ])
}

pub fn build_quadratic_spline_oracle(
    grid: &KnotGrid,
    n: usize,
    sigma_inv: &Matrix,
) -> Result<TransformerNetwork, ConstructionError> {
    let layout = FeatureLayout::quadratic_spline(grid.m);
    let mut blocks = build_quadratic_spline_blocks(grid, n)?;
    blocks.push(build_readout_block(sigma_inv, &layout, 1.0)?);
    Ok(TransformerNetwork::scalar(layout.d_embed, blocks)
        .with_metadata(format!("kind=quadratic_spline;m={};n={n}", grid.m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{attention_forward, block_forward, embed_prompt};

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    fn prompt(n: usize, d_embed: usize, seed: u64) -> Matrix {
        let mut r = lcg(seed);
        let ctx: Vec<(f64, f64)> = (0..n).map(|_| (r(), r())).collect();
        embed_prompt(&ctx, r(), d_embed).unwrap().matrix
    }

    #[test]
    fn bias_copy_head_adds_one() {
        let de = 9;
        let h = prompt(3, de, 1);
        let spec = InteractionSpec::from_terms(de, 2, 2, 1, &[(&[(8, 1.0)], &[(8, 1.0)])], 1.0, 0.0);
        let head = build_interaction_head(&spec, 4, de, 2.0).unwrap();
        let out = attention_forward(&head, &h, ActivationKind::relu()).unwrap();
        let mut expect = Matrix::zeros(de, 4);
        expect[(1, 2)] = 1.0;
        assert_eq!(out, expect);
    }

    #[test]
    fn zero_scale_head_is_silent() {
        let de = 9;
        let h = prompt(4, de, 2);
        let spec = InteractionSpec::from_terms(de, 0, 3, 2, &[(&[(0, 1.0)], &[(0, 1.0)])], 0.0, 5.0);
        let head = build_interaction_head(&spec, 5, de, 2.0).unwrap();
        let out = attention_forward(&head, &h, ActivationKind::relu()).unwrap();
        assert_eq!(max_norm(&out), 0.0);
    }

    #[test]
    fn gain_overflow_is_reported() {
        let de = 9;
        let spec = InteractionSpec::from_terms(de, 0, 0, 1, &[(&[(0, 1.0)], &[(0, 1.0)])], 1.0, 0.0);
        let err = build_interaction_head(&spec, 100_000, de, 1e6).unwrap_err();
        assert!(matches!(err, ConstructionError::GainOverflow { .. }));
        assert!(err.to_string().contains("shorter context"));
    }

    #[test]
    fn decrementer_touches_only_its_window() {
        let de = 10;
        let h = prompt(6, de, 3);
        let ffn = build_decrementing_ffn(2..3, 3..4, 7.5, 7, de).unwrap();
        let out = ffn.apply_residual(&h).unwrap();
        let diff = out.sub(&h).unwrap();
        for i in 0..de {
            for j in 0..7 {
                let want = if (i, j) == (2, 3) { -7.5 } else { 0.0 };
                assert_eq!(diff[(i, j)], want, "entry ({i}, {j})");
            }
        }
        let empty = build_decrementing_ffn(1..4, 4..4, 3.0, 7, de).unwrap();
        assert_eq!(empty.apply_residual(&h).unwrap(), h);
    }

    #[test]
    fn decrementer_depth_and_weight_growth() {
        let f = build_decrementing_ffn(1..3, 0..9, 100.0, 9, 12).unwrap();
        assert_eq!(f.depth(), 5);
        let mut biggest: f64 = 0.0;
        for l in &f.layers {
            biggest = biggest.max(max_norm(&l.weight));
        }
        assert!(biggest <= 2.0 * 9.0 * 100.0);
    }

    #[test]
    fn copy_block_example() {
        let de = poly_embed_dim(2);
        let p = embed_prompt(&[(0.3, 0.7), (-0.4, -0.1)], 0.1, de).unwrap();
        let out = block_forward(&build_copy_block(2, 2).unwrap(), &p.matrix).unwrap();
        let mut want = p.matrix.clone();
        for (t, x) in [0.3, -0.4, 0.1].into_iter().enumerate() {
            want[(1, t)] = 1.0;
            want[(2, t)] = x;
        }
        assert!(max_norm(&out.sub(&want).unwrap()) <= 1e-12);
        assert_eq!(out.row(4), p.matrix.row(4));
    }

    #[test]
    fn doubling_depths() {
        assert_eq!(build_power_doubling_blocks(2, 3).unwrap().len(), 1);
        assert_eq!(build_power_doubling_blocks(8, 3).unwrap().len(), 3);
        assert_eq!(build_power_doubling_blocks(5, 3).unwrap().len(), 3);
        assert!(build_power_doubling_blocks(1, 3).unwrap().is_empty());
    }

    #[test]
    fn knot_grid_layout() {
        let g = KnotGrid::new(-1.0, 1.0, 4, 2).unwrap();
        assert_eq!(g.spacing(), 0.5);
        assert_eq!(g.knot(1), -1.0);
        assert_eq!(g.knot(5), 1.0);
        assert_eq!(g.knot(-1), -2.0);
        assert_eq!(g.basis_indices().count(), 6);
        assert!(KnotGrid::new(1.0, 1.0, 4, 1).is_err());
        assert!(KnotGrid::new(0.0, 1.0, 4, 3).is_err());
        assert_eq!(FeatureLayout::quadratic_spline(4).d_embed, 36);
        assert_eq!(FeatureLayout::quadratic_spline(4).outputs, 31..32);
    }

    #[test]
    fn readout_shape_mismatch() {
        let err = build_ols_linear_block(&Matrix::identity(3), 1, 1.0).unwrap_err();
        assert!(matches!(err, ConstructionError::Shape { .. }));
    }
}
