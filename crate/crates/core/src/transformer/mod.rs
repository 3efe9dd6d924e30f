//! Forward evaluation of the sum-form multi-head transformer.
//!
//! A prompt `(x₁, y₁, …, xₙ, yₙ, x)` is embedded into a `d_embed × ℓ` matrix
//! (`ℓ = n + 1`) with this row layout, 0-based:
//!
//! ```text
//! row 0                x₁ … xₙ x
//! rows 1 ..            zeros (scratch space for features)
//! row d_embed-5        y₁ … yₙ 0      (a block of D rows for vector outputs)
//! row d_embed-4        zeros
//! rows d_embed-3, -2   cos(iπ/2ℓ), sin(iπ/2ℓ)
//! row d_embed-1        ones
//! ```
//!
//! Blocks compute `B(H) = FFN(MHA(H) + H) + MHA(H) + H`, where each head is
//! `V H σ((K H)ᵀ Q H)`. The decoder reads the output rows at the last column.

pub mod codec;

use thiserror::Error;

use crate::linalg::{matmul, matmul_tn, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("embedding dimension {d_embed} too small (need at least {min})")]
    EmbeddingTooSmall { d_embed: usize, min: usize },
    #[error("prompt must contain at least one context pair")]
    EmptyContext,
    #[error("context outputs must all have {expected} components, pair {index} has {got}")]
    RaggedOutputs {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("head weights must be {expected}x{expected}, found {found:?}")]
    HeadShape {
        expected: usize,
        found: (usize, usize),
    },
    #[error("input has {got} rows but the network expects {expected}")]
    RowMismatch { expected: usize, got: usize },
    #[error("FFN layer {layer} does not chain: {detail}")]
    FfnShape { layer: usize, detail: String },
    #[error("linear attention normalization undefined for sequence length {ell}")]
    BadNormalization { ell: usize },
    #[error("readout rows {start}..{end} out of range for d_embed {d_embed}")]
    BadReadout {
        start: usize,
        end: usize,
        d_embed: usize,
    },
}

/// Multiplier applied to attention scores before the activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreScale {
    One,
    /// `1/√d_embed`.
    InvSqrtEmbed,
    /// `1/(ℓ-1)`, i.e. division by the normalization `ρ(ℓ) = ℓ - 1`.
    InvContext,
    Fixed(f64),
}

impl ScoreScale {
    pub fn factor(&self, d_embed: usize, ell: usize) -> Result<f64, TransformerError> {
        Ok(match *self {
            ScoreScale::One => 1.0,
            ScoreScale::InvSqrtEmbed => 1.0 / (d_embed as f64).sqrt(),
            ScoreScale::InvContext => {
                if ell < 2 {
                    return Err(TransformerError::BadNormalization { ell });
                }
                1.0 / (ell - 1) as f64
            }
            ScoreScale::Fixed(c) => c,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Softmax => "softmax",
        }
    }
}

/// Activation of a block's attention scores together with their scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationKind {
    pub activation: Activation,
    pub scale: ScoreScale,
}

impl ActivationKind {
    /// Unscaled ReLU, as used by the explicit constructions.
    pub fn relu() -> Self {
        Self {
            activation: Activation::Relu,
            scale: ScoreScale::One,
        }
    }

    /// Linear attention normalized by `ρ(ℓ) = ℓ - 1`.
    pub fn linear() -> Self {
        Self {
            activation: Activation::Linear,
            scale: ScoreScale::InvContext,
        }
    }

    /// Linear attention with an explicit normalization `ρ`.
    pub fn linear_with_rho(rho: f64) -> Self {
        Self {
            activation: Activation::Linear,
            scale: ScoreScale::Fixed(1.0 / rho),
        }
    }

    /// Softmax over keys with `1/√d_embed` score scaling.
    pub fn softmax() -> Self {
        Self {
            activation: Activation::Softmax,
            scale: ScoreScale::InvSqrtEmbed,
        }
    }

    pub fn with_scale(activation: Activation, scale: ScoreScale) -> Self {
        Self { activation, scale }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadWeights {
    pub q: Matrix,
    /// `None` for the merged linear form, where `q` stores `KᵀQ`.
    pub k: Option<Matrix>,
    pub v: Matrix,
}

impl AttentionHeadWeights {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Self {
        Self { q, k: Some(k), v }
    }

    pub fn merged(q: Matrix, v: Matrix) -> Self {
        Self { q, k: None, v }
    }

    pub fn zeros(d_embed: usize, with_key: bool) -> Self {
        Self {
            q: Matrix::zeros(d_embed, d_embed),
            k: with_key.then(|| Matrix::zeros(d_embed, d_embed)),
            v: Matrix::zeros(d_embed, d_embed),
        }
    }

    pub fn d_embed(&self) -> usize {
        self.q.rows()
    }

    fn validate(&self, d: usize) -> Result<(), TransformerError> {
        for m in std::iter::once(&self.q)
            .chain(self.k.as_ref())
            .chain(std::iter::once(&self.v))
        {
            if m.shape() != (d, d) {
                return Err(TransformerError::HeadShape {
                    expected: d,
                    found: m.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn max_abs_weight(&self) -> f64 {
        use crate::linalg::max_norm;
        let k = self.k.as_ref().map_or(0.0, max_norm);
        max_norm(&self.q).max(k).max(max_norm(&self.v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Columnwise ReLU network; ReLU sits between layers, the last layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub layers: Vec<FfnLayer>,
}

impl FfnWeights {
    pub fn new(layers: Vec<FfnLayer>) -> Result<Self, TransformerError> {
        let f = Self { layers };
        f.validate(None)?;
        Ok(f)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows()).max().unwrap_or(0)
    }

    pub fn validate(&self, d_embed: Option<usize>) -> Result<(), TransformerError> {
        if self.layers.is_empty() {
            return Err(TransformerError::FfnShape {
                layer: 0,
                detail: "no layers".into(),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(TransformerError::FfnShape {
                    layer: i,
                    detail: format!("bias {} vs weight rows {}", l.bias.len(), l.weight.rows()),
                });
            }
            if i > 0 && self.layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(TransformerError::FfnShape {
                    layer: i,
                    detail: format!(
                        "input {} vs previous output {}",
                        l.weight.cols(),
                        self.layers[i - 1].weight.rows()
                    ),
                });
            }
        }
        let first = self.layers[0].weight.cols();
        let last = self.layers[self.layers.len() - 1].weight.rows();
        if first != last || d_embed.is_some_and(|d| d != first) {
            return Err(TransformerError::FfnShape {
                layer: self.layers.len() - 1,
                detail: format!("network maps {first} -> {last}, expected d_embed {d_embed:?}"),
            });
        }
        Ok(())
    }

    /// The FFN map alone, applied to every column of `u`.
    pub fn apply(&self, u: &Matrix) -> Result<Matrix, TransformerError> {
        let mut z = u.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            z = matmul(&layer.weight, &z)?;
            add_bias(&mut z, &layer.bias);
            if i < last {
                relu_in_place(&mut z);
            }
        }
        Ok(z)
    }

    /// `u + FFN(u)`.
    pub fn apply_residual(&self, u: &Matrix) -> Result<Matrix, TransformerError> {
        let f = self.apply(u)?;
        Ok(u.add(&f)?)
    }
}

pub(crate) fn add_bias(z: &mut Matrix, bias: &[f64]) {
    for (i, &b) in bias.iter().enumerate() {
        if b != 0.0 {
            for v in z.row_mut(i) {
                *v += b;
            }
        }
    }
}

pub(crate) fn relu_in_place(z: &mut Matrix) {
    for v in z.as_mut_slice() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub heads: Vec<AttentionHeadWeights>,
    pub activation: ActivationKind,
    /// `None` for attention-only blocks.
    pub ffn: Option<FfnWeights>,
}

impl TransformerBlock {
    pub fn attention_only(heads: Vec<AttentionHeadWeights>, activation: ActivationKind) -> Self {
        Self {
            heads,
            activation,
            ffn: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerNetwork {
    pub blocks: Vec<TransformerBlock>,
    pub d_embed: usize,
    /// 0-based rows read at the last column; `d_embed-5 .. d_embed-4` for scalar outputs.
    pub readout_rows: std::ops::Range<usize>,
    /// Free-form `key=value` description carried through serialization.
    pub metadata: String,
}

impl TransformerNetwork {
    /// Network with the standard scalar decoder reading row `d_embed - 5` (0-based).
    pub fn scalar(d_embed: usize, blocks: Vec<TransformerBlock>) -> Self {
        Self {
            blocks,
            d_embed,
            readout_rows: d_embed - 5..d_embed - 4,
            metadata: String::new(),
        }
    }

    /// Network decoding the `out_dim` output rows that end at `d_embed - 5`.
    pub fn vector(d_embed: usize, out_dim: usize, blocks: Vec<TransformerBlock>) -> Self {
        Self {
            blocks,
            d_embed,
            readout_rows: d_embed - 4 - out_dim..d_embed - 4,
            metadata: String::new(),
        }
    }

    pub fn with_metadata(mut self, metadata: impl Into<String>) -> Self {
        self.metadata = metadata.into();
        self
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        if self.readout_rows.start >= self.readout_rows.end || self.readout_rows.end > self.d_embed
        {
            return Err(TransformerError::BadReadout {
                start: self.readout_rows.start,
                end: self.readout_rows.end,
                d_embed: self.d_embed,
            });
        }
        for block in &self.blocks {
            for head in &block.heads {
                head.validate(self.d_embed)?;
            }
            if let Some(ffn) = &block.ffn {
                ffn.validate(Some(self.d_embed))?;
            }
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.blocks.iter().map(|b| b.heads.len()).sum()
    }

    pub fn max_abs_weight(&self) -> f64 {
        use crate::linalg::max_norm;
        let mut m = 0.0_f64;
        for b in &self.blocks {
            for h in &b.heads {
                m = m.max(h.max_abs_weight());
            }
            if let Some(f) = &b.ffn {
                for l in &f.layers {
                    m = m.max(max_norm(&l.weight));
                    m = m.max(l.bias.iter().fold(0.0, |a, v| a.max(v.abs())));
                }
            }
        }
        m
    }

    /// Zero-valued network with the same shapes (used to hold gradients).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.param_slices_mut().into_iter().for_each(|s| s.fill(0.0));
        z
    }

    /// Every trainable array in a fixed order: per block, per head `q, k, v`,
    /// then FFN `weight, bias` per layer.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            for h in &b.heads {
                out.push(h.q.as_slice());
                if let Some(k) = &h.k {
                    out.push(k.as_slice());
                }
                out.push(h.v.as_slice());
            }
            if let Some(f) = &b.ffn {
                for l in &f.layers {
                    out.push(l.weight.as_slice());
                    out.push(&l.bias);
                }
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            for h in &mut b.heads {
                out.push(h.q.as_mut_slice());
                if let Some(k) = &mut h.k {
                    out.push(k.as_mut_slice());
                }
                out.push(h.v.as_mut_slice());
            }
            if let Some(f) = &mut b.ffn {
                for l in &mut f.layers {
                    out.push(l.weight.as_mut_slice());
                    out.push(&mut l.bias);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedPrompt {
    pub matrix: Matrix,
    pub n: usize,
}

impl EmbeddedPrompt {
    pub fn ell(&self) -> usize {
        self.n + 1
    }

    pub fn d_embed(&self) -> usize {
        self.matrix.rows()
    }
}

/// `(cos(iπ/2ℓ), sin(iπ/2ℓ))` for the 1-based position `i`.
pub fn positional_encoding(i: usize, ell: usize) -> (f64, f64) {
    let angle = i as f64 * std::f64::consts::PI / (2.0 * ell as f64);
    (angle.cos(), angle.sin())
}

/// Smallest embedding that fits the fixed rows for `out_dim` outputs plus one feature row.
pub fn min_embed_dim(out_dim: usize) -> usize {
    7 + out_dim
}

/// Embeds a scalar-output prompt.
pub fn embed_prompt(
    context: &[(f64, f64)],
    query: f64,
    d_embed: usize,
) -> Result<EmbeddedPrompt, TransformerError> {
    let xs: Vec<f64> = context.iter().map(|p| p.0).collect();
    let ys: Vec<Vec<f64>> = context.iter().map(|p| vec![p.1]).collect();
    embed_prompt_vector(&xs, &ys, query, d_embed)
}

/// Embeds a prompt whose outputs are `D`-vectors; the `D` output rows end at row `d_embed - 5`.
pub fn embed_prompt_vector(
    xs: &[f64],
    ys: &[Vec<f64>],
    query: f64,
    d_embed: usize,
) -> Result<EmbeddedPrompt, TransformerError> {
    if xs.is_empty() {
        return Err(TransformerError::EmptyContext);
    }
    let out_dim = ys.first().map_or(1, Vec::len);
    if let Some((index, y)) = ys.iter().enumerate().find(|(_, y)| y.len() != out_dim) {
        return Err(TransformerError::RaggedOutputs {
            index,
            expected: out_dim,
            got: y.len(),
        });
    }
    let min = min_embed_dim(out_dim);
    if d_embed < min {
        return Err(TransformerError::EmbeddingTooSmall { d_embed, min });
    }
    assert_eq!(xs.len(), ys.len(), "xs and ys must pair up");
    let n = xs.len();
    let ell = n + 1;
    let mut m = Matrix::zeros(d_embed, ell);
    let y0 = d_embed - 4 - out_dim;
    for t in 0..ell {
        m[(0, t)] = if t < n { xs[t] } else { query };
        if t < n {
            for (k, &y) in ys[t].iter().enumerate() {
                m[(y0 + k, t)] = y;
            }
        }
        let (c, s) = positional_encoding(t + 1, ell);
        m[(d_embed - 3, t)] = c;
        m[(d_embed - 2, t)] = s;
        m[(d_embed - 1, t)] = 1.0;
    }
    Ok(EmbeddedPrompt { matrix: m, n })
}

/// Scores `(K H)ᵀ Q H` scaled by the activation's factor, before `σ`.
pub fn attention_scores(
    head: &AttentionHeadWeights,
    h: &Matrix,
    activation: ActivationKind,
) -> Result<Matrix, TransformerError> {
    let d = h.rows();
    head.validate(d)?;
    let qh = matmul(&head.q, h)?;
    let mut s = match &head.k {
        Some(k) => matmul_tn(&matmul(k, h)?, &qh)?,
        None => matmul_tn(h, &qh)?,
    };
    let c = activation.scale.factor(d, h.cols())?;
    if c != 1.0 {
        s.as_mut_slice().iter_mut().for_each(|v| *v *= c);
    }
    Ok(s)
}

/// Applies `σ` to a score matrix; softmax normalizes each column over the key axis.
pub fn activate(scores: &mut Matrix, activation: Activation) {
    match activation {
        Activation::Relu => relu_in_place(scores),
        Activation::Linear => {}
        Activation::Softmax => softmax_columns(scores),
    }
}

pub(crate) fn softmax_columns(s: &mut Matrix) {
    let (rows, cols) = s.shape();
    for j in 0..cols {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..rows {
            mx = mx.max(s[(i, j)]);
        }
        let mut total = 0.0;
        for i in 0..rows {
            let e = (s[(i, j)] - mx).exp();
            s[(i, j)] = e;
            total += e;
        }
        for i in 0..rows {
            s[(i, j)] /= total;
        }
    }
}

/// One head: `V H σ((K H)ᵀ Q H)`.
pub fn attention_forward(
    head: &AttentionHeadWeights,
    h: &Matrix,
    activation: ActivationKind,
) -> Result<Matrix, TransformerError> {
    let mut s = attention_scores(head, h, activation)?;
    activate(&mut s, activation.activation);
    let vh = matmul(&head.v, h)?;
    Ok(matmul(&vh, &s)?)
}

/// Sum of all heads of the block.
pub fn mha_forward(block: &TransformerBlock, h: &Matrix) -> Result<Matrix, TransformerError> {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for head in &block.heads {
        out.add_assign(&attention_forward(head, h, block.activation)?)?;
    }
    Ok(out)
}

pub fn block_forward(block: &TransformerBlock, h: &Matrix) -> Result<Matrix, TransformerError> {
    let u = mha_forward(block, h)?.add(h)?;
    match &block.ffn {
        Some(ffn) => ffn.apply_residual(&u),
        None => Ok(u),
    }
}

/// Output of every block in order, starting from the embedded prompt.
pub fn forward_trace(
    net: &TransformerNetwork,
    prompt: &EmbeddedPrompt,
) -> Result<Vec<Matrix>, TransformerError> {
    if prompt.d_embed() != net.d_embed {
        return Err(TransformerError::RowMismatch {
            expected: net.d_embed,
            got: prompt.d_embed(),
        });
    }
    let mut states = Vec::with_capacity(net.blocks.len() + 1);
    states.push(prompt.matrix.clone());
    for block in &net.blocks {
        let next = block_forward(block, states.last().expect("nonempty"))?;
        states.push(next);
    }
    Ok(states)
}

/// Runs all blocks and decodes the readout rows at the query column.
pub fn network_forward(
    net: &TransformerNetwork,
    prompt: &EmbeddedPrompt,
) -> Result<Vec<f64>, TransformerError> {
    net.validate()?;
    let states = forward_trace(net, prompt)?;
    Ok(decode(net, states.last().expect("nonempty")))
}

pub fn decode(net: &TransformerNetwork, h: &Matrix) -> Vec<f64> {
    let col = h.cols() - 1;
    net.readout_rows.clone().map(|r| h[(r, col)]).collect()
}
