//! Trainable transformers: initialization, MSE loss, reverse-mode gradients, clipping and Adam.
//!
//! Gradients are stored in a [`TransformerNetwork`] of the same shape as the
//! model, so the optimizer can walk parameters and gradients in lockstep via
//! [`TransformerNetwork::param_slices`].

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::tasks::{Prompt, SeededRng};
use crate::transformer::codec::{
    read_network_body, write_network_body, CodecError, Reader, Writer,
};
use crate::transformer::{
    add_bias, embed_prompt, relu_in_place, softmax_columns, Activation, ActivationKind,
    AttentionHeadWeights, EmbeddedPrompt, FfnLayer, FfnWeights, ScoreScale, TransformerBlock,
    TransformerError, TransformerNetwork,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error("non-finite loss at prompt {index}")]
    NonFinite { index: usize },
    #[error("empty batch or dataset")]
    Empty,
    #[error("training diverged in epoch {epoch} (batch loss {loss:e})")]
    Diverged {
        epoch: usize,
        loss: f64,
        history: Vec<EpochRecord>,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// ReLU blocks, then one linear block with a single head and no FFN.
    Theory,
    AllLinear,
    AllSoftmax,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Theory => "theory",
            Architecture::AllLinear => "linear",
            Architecture::AllSoftmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "theory" | "relu" => Some(Architecture::Theory),
            "linear" | "all_linear" => Some(Architecture::AllLinear),
            "softmax" | "all_softmax" => Some(Architecture::AllSoftmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPolicy {
    Fixed(usize),
    /// `⌈n/8⌉` heads, at least one.
    Scaling,
}

impl HeadPolicy {
    pub fn heads(&self, n: usize) -> usize {
        match *self {
            HeadPolicy::Fixed(k) => k,
            HeadPolicy::Scaling => n.div_ceil(8).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableModelConfig {
    pub architecture: Architecture,
    pub num_blocks: usize,
    pub heads: HeadPolicy,
    pub ffn: bool,
    pub d_embed: usize,
    pub init_std: f64,
    /// Context length, used by [`HeadPolicy::Scaling`].
    pub n: usize,
}

impl TrainableModelConfig {
    /// Defaults for degree-`d` polynomial tasks: `d` blocks, `⌈n/8⌉` heads, FFN on.
    pub fn polynomial(architecture: Architecture, d: usize, n: usize) -> Self {
        Self {
            architecture,
            num_blocks: d,
            heads: HeadPolicy::Scaling,
            ffn: true,
            d_embed: d + 7,
            init_std: 0.01,
            n,
        }
    }

    pub fn block_layout(&self) -> Vec<(ActivationKind, usize, bool)> {
        let h = self.heads.heads(self.n);
        (0..self.num_blocks)
            .map(|i| match self.architecture {
                Architecture::Theory if i + 1 == self.num_blocks => {
                    (ActivationKind::linear(), 1, false)
                }
                Architecture::Theory => (
                    ActivationKind::with_scale(Activation::Relu, ScoreScale::InvSqrtEmbed),
                    h,
                    self.ffn,
                ),
                Architecture::AllLinear => (ActivationKind::linear(), h, self.ffn),
                Architecture::AllSoftmax => (ActivationKind::softmax(), h, self.ffn),
            })
            .collect()
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// Gaussian weights with the configured standard deviation; FFN biases start at zero.
pub fn init_model(
    cfg: &TrainableModelConfig,
    rng: &mut SeededRng,
) -> Result<TransformerNetwork, TrainingError> {
    let d = cfg.d_embed;
    if d < 8 || cfg.num_blocks == 0 || cfg.n == 0 {
        return Err(TrainingError::Config(format!(
            "need d_embed >= 8, at least one block and n >= 1 (got {d}, {}, {})",
            cfg.num_blocks, cfg.n
        )));
    }
    let s = cfg.init_std;
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for (activation, heads, ffn) in cfg.block_layout() {
        if heads == 0 {
            return Err(TrainingError::Config("blocks need at least one head".into()));
        }
        let heads = (0..heads)
            .map(|_| {
                let q = normal_matrix(d, d, s, rng);
                let k = normal_matrix(d, d, s, rng);
                let v = normal_matrix(d, d, s, rng);
                AttentionHeadWeights::new(q, k, v)
            })
            .collect();
        let ffn = ffn.then(|| FfnWeights {
            layers: (0..2)
                .map(|_| FfnLayer {
                    weight: normal_matrix(d, d, s, rng),
                    bias: vec![0.0; d],
                })
                .collect(),
        });
        blocks.push(TransformerBlock {
            heads,
            activation,
            ffn,
        });
    }
    Ok(TransformerNetwork::scalar(d, blocks).with_metadata(format!(
        "kind=trainable;architecture={};blocks={};ffn={}",
        cfg.architecture.name(),
        cfg.num_blocks,
        cfg.ffn
    )))
}

#[derive(Debug, Clone)]
struct HeadCache {
    qh: Matrix,
    /// `None` for merged heads, where the key side is `H` itself.
    kh: Option<Matrix>,
    vh: Matrix,
    /// Post-activation scores.
    a: Matrix,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Matrix,
    heads: Vec<HeadCache>,
    /// Inputs to each FFN layer; the first is `MHA(H) + H`.
    ffn_inputs: Vec<Matrix>,
    scale: f64,
}

/// Intermediates of one prompt's forward pass.
#[derive(Debug, Clone)]
pub struct PromptCache {
    blocks: Vec<BlockCache>,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct BatchCache {
    pub prompts: Vec<PromptCache>,
    pub loss: f64,
}

fn forward_cached(
    net: &TransformerNetwork,
    prompt: &EmbeddedPrompt,
    target: f64,
) -> Result<PromptCache, TransformerError> {
    let mut h = prompt.matrix.clone();
    let ell = h.cols();
    let mut blocks = Vec::with_capacity(net.blocks.len());
    for block in &net.blocks {
        let scale = block.activation.scale.factor(net.d_embed, ell)?;
        let mut mha = Matrix::zeros(h.rows(), ell);
        let mut heads = Vec::with_capacity(block.heads.len());
        for head in &block.heads {
            let qh = matmul(&head.q, &h)?;
            let kh = match &head.k {
                Some(k) => Some(matmul(k, &h)?),
                None => None,
            };
            let mut a = matmul_tn(kh.as_ref().unwrap_or(&h), &qh)?;
            if scale != 1.0 {
                a.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            }
            match block.activation.activation {
                Activation::Relu => relu_in_place(&mut a),
                Activation::Linear => {}
                Activation::Softmax => softmax_columns(&mut a),
            }
            let vh = matmul(&head.v, &h)?;
            mha.add_assign(&matmul(&vh, &a)?)?;
            heads.push(HeadCache { qh, kh, vh, a });
        }
        let mut ffn_inputs = vec![mha.add(&h)?];
        let out = match &block.ffn {
            None => ffn_inputs[0].clone(),
            Some(ffn) => {
                let last = ffn.layers.len() - 1;
                let mut z = ffn_inputs[0].clone();
                for (i, layer) in ffn.layers.iter().enumerate() {
                    let mut next = matmul(&layer.weight, &z)?;
                    add_bias(&mut next, &layer.bias);
                    if i < last {
                        relu_in_place(&mut next);
                        ffn_inputs.push(next.clone());
                    }
                    z = next;
                }
                ffn_inputs[0].add(&z)?
            }
        };
        blocks.push(BlockCache {
            input: std::mem::replace(&mut h, out),
            heads,
            ffn_inputs,
            scale,
        });
    }
    let prediction = h[(net.readout_rows.start, ell - 1)];
    Ok(PromptCache {
        blocks,
        prediction,
        target,
    })
}

fn check_scalar(net: &TransformerNetwork) -> Result<(), TrainingError> {
    net.validate()?;
    if net.readout_rows.len() != 1 {
        return Err(TrainingError::Config("training needs a scalar readout".into()));
    }
    Ok(())
}

/// Scalar prediction for one prompt.
pub fn predict(net: &TransformerNetwork, prompt: &Prompt) -> Result<f64, TrainingError> {
    let e = embed_prompt(&prompt.context(), prompt.query, net.d_embed)?;
    let out = crate::transformer::network_forward(net, &e)?;
    Ok(out[0])
}

/// Mean squared error over the batch, with the intermediates needed by [`backward`].
pub fn forward_loss(
    net: &TransformerNetwork,
    batch: &[Prompt],
) -> Result<(f64, BatchCache), TrainingError> {
    check_scalar(net)?;
    if batch.is_empty() {
        return Err(TrainingError::Empty);
    }
    let mut prompts = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for (index, p) in batch.iter().enumerate() {
        let e = embed_prompt(&p.context(), p.query, net.d_embed)?;
        let c = forward_cached(net, &e, p.target)?;
        let err = c.prediction - c.target;
        if !err.is_finite() {
            return Err(TrainingError::NonFinite { index });
        }
        total += err * err;
        prompts.push(c);
    }
    let loss = total / batch.len() as f64;
    Ok((loss, BatchCache { prompts, loss }))
}

fn backward_prompt(
    net: &TransformerNetwork,
    cache: &PromptCache,
    weight: f64,
    grads: &mut TransformerNetwork,
) -> Result<(), TransformerError> {
    let ell = cache.blocks[0].input.cols();
    let mut d_out = Matrix::zeros(net.d_embed, ell);
    d_out[(net.readout_rows.start, ell - 1)] = 2.0 * (cache.prediction - cache.target) * weight;
    for (bi, block) in net.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];
        // out = U + FFN(U)
        let mut d_u = d_out.clone();
        if let (Some(ffn), Some(gffn)) = (&block.ffn, gb.ffn.as_mut()) {
            let mut d_z = d_out;
            for (li, layer) in ffn.layers.iter().enumerate().rev() {
                let x = &bc.ffn_inputs[li];
                gffn.layers[li].weight.add_assign(&matmul_nt(&d_z, x)?)?;
                for (r, g) in gffn.layers[li].bias.iter_mut().enumerate() {
                    *g += d_z.row(r).iter().sum::<f64>();
                }
                let mut d_x = matmul_tn(&layer.weight, &d_z)?;
                if li > 0 {
                    for (g, &v) in d_x.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                d_z = d_x;
            }
            d_u.add_assign(&d_z)?;
        }
        // U = H + Σ V H σ(c (KH)ᵀ QH)
        let h = &bc.input;
        let mut d_h = d_u.clone();
        for ((head, hc), gh) in block.heads.iter().zip(&bc.heads).zip(gb.heads.iter_mut()) {
            let d_vh = matmul_nt(&d_u, &hc.a)?;
            let mut d_s = matmul_tn(&hc.vh, &d_u)?;
            match block.activation.activation {
                Activation::Relu => {
                    for (g, &a) in d_s.as_mut_slice().iter_mut().zip(hc.a.as_slice()) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                Activation::Linear => {}
                Activation::Softmax => {
                    for t in 0..ell {
                        let mut dot = 0.0;
                        for i in 0..ell {
                            dot += hc.a[(i, t)] * d_s[(i, t)];
                        }
                        for i in 0..ell {
                            d_s[(i, t)] = hc.a[(i, t)] * (d_s[(i, t)] - dot);
                        }
                    }
                }
            }
            if bc.scale != 1.0 {
                d_s.as_mut_slice().iter_mut().for_each(|v| *v *= bc.scale);
            }
            let key_side = hc.kh.as_ref().unwrap_or(h);
            let d_qh = matmul(key_side, &d_s)?;
            let d_kh = matmul_nt(&hc.qh, &d_s)?;
            gh.q.add_assign(&matmul_nt(&d_qh, h)?)?;
            gh.v.add_assign(&matmul_nt(&d_vh, h)?)?;
            d_h.add_assign(&matmul_tn(&head.q, &d_qh)?)?;
            d_h.add_assign(&matmul_tn(&head.v, &d_vh)?)?;
            match (&head.k, gh.k.as_mut()) {
                (Some(k), Some(gk)) => {
                    gk.add_assign(&matmul_nt(&d_kh, h)?)?;
                    d_h.add_assign(&matmul_tn(k, &d_kh)?)?;
                }
                _ => d_h.add_assign(&d_kh)?,
            }
        }
        d_out = d_h;
    }
    Ok(())
}

/// Gradients of the mean batch loss with respect to every parameter.
pub fn backward(
    net: &TransformerNetwork,
    cache: &BatchCache,
) -> Result<TransformerNetwork, TrainingError> {
    let mut grads = net.zeros_like();
    let w = 1.0 / cache.prompts.len() as f64;
    for p in &cache.prompts {
        backward_prompt(net, p, w, &mut grads)?;
    }
    Ok(grads)
}

/// Loss and gradients, one prompt at a time so only one cache is alive.
pub fn loss_and_gradients(
    net: &TransformerNetwork,
    batch: &[Prompt],
    grads: &mut TransformerNetwork,
) -> Result<f64, TrainingError> {
    check_scalar(net)?;
    if batch.is_empty() {
        return Err(TrainingError::Empty);
    }
    grads.param_slices_mut().into_iter().for_each(|s| s.fill(0.0));
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (index, p) in batch.iter().enumerate() {
        let e = embed_prompt(&p.context(), p.query, net.d_embed)?;
        let c = forward_cached(net, &e, p.target)?;
        let err = c.prediction - c.target;
        if !err.is_finite() {
            return Err(TrainingError::NonFinite { index });
        }
        total += err * err;
        backward_prompt(net, &c, w, grads)?;
    }
    Ok(total * w)
}

/// Signs of every ReLU input (attention scores and hidden FFN units) over the batch.
///
/// Two parameter settings with equal patterns lie on the same linear piece of the loss.
pub fn relu_pattern(net: &TransformerNetwork, batch: &[Prompt]) -> Result<Vec<bool>, TrainingError> {
    let mut out = Vec::new();
    for p in batch {
        let e = embed_prompt(&p.context(), p.query, net.d_embed)?;
        let c = forward_cached(net, &e, p.target)?;
        for (block, bc) in net.blocks.iter().zip(&c.blocks) {
            if block.activation.activation == Activation::Relu {
                for hc in &bc.heads {
                    out.extend(hc.a.as_slice().iter().map(|&v| v > 0.0));
                }
            }
            for x in bc.ffn_inputs.iter().skip(1) {
                out.extend(x.as_slice().iter().map(|&v| v > 0.0));
            }
        }
    }
    Ok(out)
}

pub fn global_norm(grads: &TransformerNetwork) -> f64 {
    grads
        .param_slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales to global norm `max_norm` when the norm exceeds it by more than rounding; returns the norm before clipping.
pub fn clip_gradients(grads: &mut TransformerNetwork, max_norm: f64) -> f64 {
    let g = global_norm(grads);
    if g > max_norm * (1.0 + 1e-12) {
        let s = max_norm / g;
        grads
            .param_slices_mut()
            .into_iter()
            .for_each(|sl| sl.iter_mut().for_each(|v| *v *= s));
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_max_norm: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_max_norm: 1.0,
        }
    }

    pub fn for_network(net: &TransformerNetwork) -> Self {
        Self::new(net.param_count())
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// One bias-corrected Adam update over a flat parameter list.
pub fn adam_update(state: &mut OptimizerState, params: &mut [&mut [f64]], grads: &[&[f64]]) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut idx = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        assert_eq!(p.len(), g.len(), "parameter and gradient shapes differ");
        for (w, &gi) in p.iter_mut().zip(g.iter()) {
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            *m = state.beta1 * *m + (1.0 - state.beta1) * gi;
            *v = state.beta2 * *v + (1.0 - state.beta2) * gi * gi;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
            idx += 1;
        }
    }
    assert_eq!(idx, state.m.len(), "optimizer state does not match the parameters");
}

pub fn adam_step(state: &mut OptimizerState, net: &mut TransformerNetwork, grads: &TransformerNetwork) {
    let g = grads.param_slices();
    let mut p = net.param_slices_mut();
    adam_update(state, &mut p, &g);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_max_norm: f64,
    pub divergence_threshold: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            lr: 1e-3,
            clip_max_norm: 1.0,
            divergence_threshold: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses seen during the epoch.
    pub train_mse: f64,
    pub test_mse: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_mse,test_mse\n");
    for r in history {
        let test = r.test_mse.map(|v| format!("{v:e}")).unwrap_or_default();
        s.push_str(&format!("{},{:e},{}\n", r.epoch, r.train_mse, test));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: TransformerNetwork,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch Adam; batches follow a fresh shuffle each epoch and the last partial batch is kept.
pub fn train(
    mut net: TransformerNetwork,
    dataset: &[Prompt],
    settings: &TrainSettings,
    rng: &mut SeededRng,
    test: Option<&[Prompt]>,
) -> Result<TrainOutcome, TrainingError> {
    check_scalar(&net)?;
    if dataset.is_empty() || settings.batch_size == 0 {
        return Err(TrainingError::Empty);
    }
    let mut opt = OptimizerState::for_network(&net).with_lr(settings.lr);
    opt.clip_max_norm = settings.clip_max_norm;
    let mut grads = net.zeros_like();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch: Vec<Prompt> = Vec::with_capacity(settings.batch_size);
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let loss = match loss_and_gradients(&net, &batch, &mut grads) {
                Ok(l) => l,
                Err(TrainingError::NonFinite { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss > settings.divergence_threshold {
                return Err(TrainingError::Diverged {
                    epoch,
                    loss,
                    history,
                });
            }
            sum += loss;
            batches += 1;
            clip_gradients(&mut grads, opt.clip_max_norm);
            adam_step(&mut opt, &mut net, &grads);
        }
        let test_mse = match test {
            Some(t) => Some(evaluate(&net, t)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_mse: sum / batches as f64,
            test_mse,
        });
    }
    Ok(TrainOutcome {
        net,
        optimizer: opt,
        history,
    })
}

/// Mean squared error over held-out prompts.
pub fn evaluate(net: &TransformerNetwork, test: &[Prompt]) -> Result<f64, TrainingError> {
    if test.is_empty() {
        return Err(TrainingError::Empty);
    }
    let mut total = 0.0;
    for p in test {
        let e = predict(net, p)? - p.target;
        total += e * e;
    }
    Ok(total / test.len() as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network container followed by the optimizer state (step, hyperparameters, moments).
pub fn write_checkpoint<W: Write>(
    net: &TransformerNetwork,
    opt: &OptimizerState,
    out: W,
) -> Result<(), CodecError> {
    let mut w = Writer { inner: out };
    w.inner.write_all(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    write_network_body(&mut w, net)?;
    w.u64(opt.step)?;
    for x in [opt.lr, opt.beta1, opt.beta2, opt.eps, opt.clip_max_norm] {
        w.f64(x)?;
    }
    w.u64(opt.m.len() as u64)?;
    w.f64s(&opt.m)?;
    w.f64s(&opt.v)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(TransformerNetwork, OptimizerState), CodecError> {
    let mut r = Reader { inner: input };
    r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CodecError::Version(version));
    }
    let net = read_network_body(&mut r)?;
    let step = r.u64()?;
    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let clip_max_norm = r.f64()?;
    let len = r.len()?;
    if len != net.param_count() {
        return Err(CodecError::Corrupt(format!(
            "optimizer holds {len} moments for {} parameters",
            net.param_count()
        )));
    }
    let m = r.f64s(len)?;
    let v = r.f64s(len)?;
    Ok((
        net,
        OptimizerState {
            step,
            m,
            v,
            lr,
            beta1,
            beta2,
            eps,
            clip_max_norm,
        },
    ))
}

pub fn checkpoint_to_bytes(net: &TransformerNetwork, opt: &OptimizerState) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(net, opt, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn save_checkpoint(
    net: &TransformerNetwork,
    opt: &OptimizerState,
    path: &Path,
) -> Result<(), CodecError> {
    std::fs::write(path, checkpoint_to_bytes(net, opt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerNetwork, OptimizerState), CodecError> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let out = read_checkpoint(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(CodecError::Corrupt(format!("{} trailing bytes", cursor.len())));
    }
    Ok(out)
}
