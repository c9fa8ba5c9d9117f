//! A one-block, single-head self-attention encoder over bridged sequences.
//!
//! ```text
//! X  = Emb[tokens]
//! A  = softmax(rope(X W_q) rope(X W_k)ᵀ / √d)
//! X1 = X + (A · X W_v) W_o
//! X2 = X1 + gelu(X1 W_1) W_2
//! h  = mean of X2 over non-separator positions
//! ŷ  = h W_c + b
//! ```
//!
//! Gradients are written out by hand and checked against finite differences
//! in the tests.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    axpy_slice, cross_entropy_with_grad, gelu, gelu_derivative, softmax_backward, softmax_in_place, Matrix,
    ParamSet, RngStream, STREAM_INIT,
};
use crate::raw::{RawReader, RawWriter};
use crate::sequence::{BridgeSequence, Provenance};
use crate::text::{EmbeddingTable, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    /// Model width `d_lm`.
    pub dim: usize,
    /// Feed-forward width; `None` means `4·d_lm`.
    pub ff_dim: Option<usize>,
    pub rotary: bool,
    pub rotary_base: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            ff_dim: None,
            rotary: true,
            rotary_base: 10_000.0,
            learning_rate: 0.5,
            epochs: 6,
            batch_size: 32,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ff_dim == Some(0) {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        if self.rotary && !self.dim.is_multiple_of(2) {
            return Err(Error::invalid("rotary positions need an even model width"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.dim)
    }

    pub fn positions(&self) -> Positions {
        if self.rotary {
            Positions::Rotary {
                base: self.rotary_base,
            }
        } else {
            Positions::None
        }
    }
}

/// Position encoding applied to queries and keys.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Positions {
    Rotary { base: f64 },
    /// No positional information; the encoder is permutation-equivariant.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniLmParams {
    /// `V×d`, trainable; a copy of the frozen table when widths match.
    pub embedding: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `d×d_ff`
    pub w_1: Matrix,
    /// `d_ff×d`
    pub w_2: Matrix,
    /// `d×C`
    pub classifier: Matrix,
    pub bias: Vec<f64>,
    pub positions: Positions,
}

impl ParamSet for MiniLmParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("embedding", self.embedding.data()),
            ("w_q", self.w_q.data()),
            ("w_k", self.w_k.data()),
            ("w_v", self.w_v.data()),
            ("w_o", self.w_o.data()),
            ("w_1", self.w_1.data()),
            ("w_2", self.w_2.data()),
            ("classifier", self.classifier.data()),
            ("bias", &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("embedding", self.embedding.data_mut()),
            ("w_q", self.w_q.data_mut()),
            ("w_k", self.w_k.data_mut()),
            ("w_v", self.w_v.data_mut()),
            ("w_o", self.w_o.data_mut()),
            ("w_1", self.w_1.data_mut()),
            ("w_2", self.w_2.data_mut()),
            ("classifier", self.classifier.data_mut()),
            ("bias", &mut self.bias),
        ]
    }
}

impl MiniLmParams {
    /// Embedding rows start from `frozen` when its width equals `config.dim`,
    /// otherwise from `N(0, 1/√d)`. Square projections use `N(0, 1/d_in)`.
    pub fn init(frozen: &EmbeddingTable, num_classes: usize, config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let ff = config.ff_dim();
        let mut rng = RngStream::derive(seed, STREAM_INIT, 1);
        let embedding = if frozen.dim() == d {
            frozen.weights().clone()
        } else {
            Matrix::gaussian(frozen.vocab_size(), d, (d as f64).powf(-0.25), &mut rng)
        };
        let std_d = 1.0 / (d as f64).sqrt();
        Ok(Self {
            embedding,
            w_q: Matrix::gaussian(d, d, std_d, &mut rng),
            w_k: Matrix::gaussian(d, d, std_d, &mut rng),
            w_v: Matrix::gaussian(d, d, std_d, &mut rng),
            w_o: Matrix::gaussian(d, d, std_d, &mut rng),
            w_1: Matrix::gaussian(d, ff, std_d, &mut rng),
            w_2: Matrix::gaussian(ff, d, 1.0 / (ff as f64).sqrt(), &mut rng),
            classifier: Matrix::gaussian(d, num_classes, std_d, &mut rng),
            bias: vec![0.0; num_classes],
            positions: config.positions(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn ff_dim(&self) -> usize {
        self.w_1.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// FNV-1a over every parameter, as a hex string.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        format!("{h:016x}")
    }

    /// Header `V, d_lm, d_ff, C` as `u32`, then each tensor in declaration
    /// order as little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = RawWriter::create(path)?;
        w.header(&[self.vocab_size(), self.dim(), self.ff_dim(), self.num_classes()])?;
        for (_, t) in self.tensors() {
            w.values(t)?;
        }
        w.finish()
    }

    pub fn load(path: &Path, positions: Positions) -> Result<Self> {
        let mut r = RawReader::open(path)?;
        let [v, d, ff, c] = r.header()?;
        let params = Self {
            embedding: r.matrix(v, d)?,
            w_q: r.matrix(d, d)?,
            w_k: r.matrix(d, d)?,
            w_v: r.matrix(d, d)?,
            w_o: r.matrix(d, d)?,
            w_1: r.matrix(d, ff)?,
            w_2: r.matrix(ff, d)?,
            classifier: r.matrix(d, c)?,
            bias: r.values(c)?,
            positions,
        };
        r.finish()?;
        Ok(params)
    }
}

/// Per-position rotation angles for rotary embeddings.
struct RotaryTable {
    cos: Matrix,
    sin: Matrix,
}

impl RotaryTable {
    fn new(len: usize, dim: usize, base: f64) -> Self {
        let half = dim / 2;
        let mut cos = Matrix::zeros(len, half);
        let mut sin = Matrix::zeros(len, half);
        for p in 0..len {
            for m in 0..half {
                let theta = p as f64 * base.powf(-2.0 * m as f64 / dim as f64);
                cos.set(p, m, theta.cos());
                sin.set(p, m, theta.sin());
            }
        }
        Self { cos, sin }
    }

    /// Rotates each `(2m, 2m+1)` pair of row `p` by `sign · θ_{p,m}`.
    fn apply(&self, x: &mut Matrix, sign: f64) {
        for p in 0..x.rows() {
            let (c, s) = (self.cos.row(p), self.sin.row(p));
            let row = x.row_mut(p);
            for m in 0..c.len() {
                let (a, b) = (row[2 * m], row[2 * m + 1]);
                let sn = sign * s[m];
                row[2 * m] = a * c[m] - b * sn;
                row[2 * m + 1] = a * sn + b * c[m];
            }
        }
    }
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LmOutput {
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    /// Largest `|Σ_j A_rj − 1|` over the attention rows.
    pub max_attention_error: f64,
}

struct Cache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    mixed: Matrix,
    x1: Matrix,
    pre_ff: Matrix,
    ff: Matrix,
    pooled_rows: Vec<usize>,
    rotary: Option<RotaryTable>,
    out: LmOutput,
}

fn pooled_positions(seq: &BridgeSequence) -> Vec<usize> {
    let rows: Vec<usize> = (0..seq.len())
        .filter(|&p| seq.provenance.get(p) != Some(&Provenance::Separator))
        .collect();
    if rows.is_empty() {
        (0..seq.len()).collect()
    } else {
        rows
    }
}

fn forward_cached(seq: &BridgeSequence, params: &MiniLmParams) -> Result<Cache> {
    if seq.is_empty() {
        return Err(Error::invalid(format!("sequence for node {} is empty", seq.root)));
    }
    if let Some(&bad) = seq.token_ids.iter().find(|&&t| t >= params.vocab_size()) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of size {}",
            params.vocab_size()
        )));
    }
    let d = params.dim();
    let x = params.embedding.gather_rows(&seq.token_ids);
    let mut q = x.matmul(&params.w_q);
    let mut k = x.matmul(&params.w_k);
    let v = x.matmul(&params.w_v);
    let rotary = match params.positions {
        Positions::Rotary { base } => {
            let table = RotaryTable::new(seq.len(), d, base);
            table.apply(&mut q, 1.0);
            table.apply(&mut k, 1.0);
            Some(table)
        }
        Positions::None => None,
    };

    let mut attn = q.matmul_t(&k);
    attn.scale(1.0 / (d as f64).sqrt());
    let mut max_attention_error: f64 = 0.0;
    for r in 0..attn.rows() {
        let row = attn.row_mut(r);
        softmax_in_place(row);
        max_attention_error = max_attention_error.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    let mixed = attn.matmul(&v);
    let mut x1 = mixed.matmul(&params.w_o);
    x1.axpy(1.0, &x);
    let pre_ff = x1.matmul(&params.w_1);
    let mut activated = pre_ff.clone();
    activated.data_mut().iter_mut().for_each(|u| *u = gelu(*u));
    let mut x2 = activated.matmul(&params.w_2);
    x2.axpy(1.0, &x1);

    let pooled_rows = pooled_positions(seq);
    let mut pooled = vec![0.0; d];
    for &p in &pooled_rows {
        axpy_slice(&mut pooled, 1.0, x2.row(p));
    }
    let inv = 1.0 / pooled_rows.len() as f64;
    pooled.iter_mut().for_each(|v| *v *= inv);
    let mut logits = params.classifier.vecmat(&pooled);
    axpy_slice(&mut logits, 1.0, &params.bias);

    Ok(Cache {
        x,
        q,
        k,
        v,
        attn,
        mixed,
        x1,
        pre_ff,
        ff: activated,
        pooled_rows,
        rotary,
        out: LmOutput {
            pooled,
            logits,
            max_attention_error,
        },
    })
}

/// Accumulates `scale · ∂L/∂θ` into `grad`, given `∂L/∂logits`.
fn backward(seq: &BridgeSequence, params: &MiniLmParams, cache: &Cache, d_logits: &[f64], scale: f64, grad: &mut MiniLmParams) {
    let d = params.dim();
    let len = seq.len();

    grad.classifier.add_outer(scale, &cache.out.pooled, d_logits);
    axpy_slice(&mut grad.bias, scale, d_logits);
    let d_pooled = params.classifier.matvec(d_logits);

    let mut d_x2 = Matrix::zeros(len, d);
    let share = scale / cache.pooled_rows.len() as f64;
    for &p in &cache.pooled_rows {
        axpy_slice(d_x2.row_mut(p), share, &d_pooled);
    }

    // feed-forward block
    grad.w_2.axpy(1.0, &cache.ff.t_matmul(&d_x2));
    let mut d_pre = d_x2.matmul_t(&params.w_2);
    for (g, &u) in d_pre.data_mut().iter_mut().zip(cache.pre_ff.data()) {
        *g *= gelu_derivative(u);
    }
    grad.w_1.axpy(1.0, &cache.x1.t_matmul(&d_pre));
    let mut d_x1 = d_pre.matmul_t(&params.w_1);
    d_x1.axpy(1.0, &d_x2);

    // attention block
    grad.w_o.axpy(1.0, &cache.mixed.t_matmul(&d_x1));
    let d_mixed = d_x1.matmul_t(&params.w_o);
    let d_attn = d_mixed.matmul_t(&cache.v);
    let d_v = cache.attn.t_matmul(&d_mixed);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut d_scores = Matrix::zeros(len, len);
    for r in 0..len {
        let g = softmax_backward(cache.attn.row(r), d_attn.row(r));
        d_scores.row_mut(r).copy_from_slice(&g);
    }
    d_scores.scale(inv_sqrt_d);
    let mut d_q = d_scores.matmul(&cache.k);
    let mut d_k = d_scores.t_matmul(&cache.q);
    if let Some(table) = &cache.rotary {
        table.apply(&mut d_q, -1.0);
        table.apply(&mut d_k, -1.0);
    }

    grad.w_q.axpy(1.0, &cache.x.t_matmul(&d_q));
    grad.w_k.axpy(1.0, &cache.x.t_matmul(&d_k));
    grad.w_v.axpy(1.0, &cache.x.t_matmul(&d_v));

    let mut d_x = d_x1;
    d_x.axpy(1.0, &d_q.matmul_t(&params.w_q));
    d_x.axpy(1.0, &d_k.matmul_t(&params.w_k));
    d_x.axpy(1.0, &d_v.matmul_t(&params.w_v));
    for (p, &t) in seq.token_ids.iter().enumerate() {
        axpy_slice(grad.embedding.row_mut(t), 1.0, d_x.row(p));
    }
}

/// Pooled embedding and class logits of one sequence.
pub fn lm_forward(seq: &BridgeSequence, params: &MiniLmParams) -> Result<LmOutput> {
    forward_cached(seq, params).map(|c| c.out)
}

/// Attention matrix of one sequence, for inspection.
pub fn attention_weights(seq: &BridgeSequence, params: &MiniLmParams) -> Result<Matrix> {
    forward_cached(seq, params).map(|c| c.attn)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LmLoss {
    pub cross_entropy: f64,
    pub max_attention_error: f64,
}

/// Mean cross-entropy over `(sequence, label)` pairs.
pub fn lm_loss(params: &MiniLmParams, batch: &[(&BridgeSequence, usize)]) -> Result<LmLoss> {
    lm_loss_impl(params, batch, None)
}

pub fn lm_loss_and_grad(params: &MiniLmParams, batch: &[(&BridgeSequence, usize)]) -> Result<(LmLoss, MiniLmParams)> {
    let mut grad = params.zeros_like();
    let loss = lm_loss_impl(params, batch, Some(&mut grad))?;
    Ok((loss, grad))
}

fn lm_loss_impl(
    params: &MiniLmParams,
    batch: &[(&BridgeSequence, usize)],
    mut grad: Option<&mut MiniLmParams>,
) -> Result<LmLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut out = LmLoss::default();
    for &(seq, label) in batch {
        let cache = forward_cached(seq, params)?;
        let (ce, d_logits) = cross_entropy_with_grad(&cache.out.logits, label)?;
        out.cross_entropy += ce * scale;
        out.max_attention_error = out.max_attention_error.max(cache.out.max_attention_error);
        if let Some(g) = grad.as_deref_mut() {
            backward(seq, params, &cache, &d_logits, scale, g);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LmLog {
    pub initial_train_ce: f64,
    pub final_train_ce: f64,
    /// Mean mini-batch loss of each epoch, measured before each update.
    pub epoch_batch_ce: Vec<f64>,
    pub max_attention_error: f64,
}

/// Mini-batch gradient descent on mean cross-entropy. Batch order for epoch
/// `e` is a shuffle drawn from the `(seed, "batches", e)` stream.
pub fn train_lm(
    examples: &[(&BridgeSequence, usize)],
    mut params: MiniLmParams,
    config: &LmConfig,
    seed: u64,
) -> Result<(MiniLmParams, LmLog)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no labeled sequences to train on"));
    }
    let mut log = LmLog::default();
    let start = lm_loss(&params, examples)?;
    log.initial_train_ce = start.cross_entropy;
    log.max_attention_error = start.max_attention_error;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = RngStream::derive(seed, "batches", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| examples[i]).collect();
            let (loss, grad) = lm_loss_and_grad(&params, &batch)?;
            params.add_scaled(-config.learning_rate, &grad);
            if !loss.cross_entropy.is_finite() || !params.all_finite() {
                return Err(Error::Divergence {
                    stage: "lm",
                    epoch,
                    loss: loss.cross_entropy,
                });
            }
            total += loss.cross_entropy * chunk.len() as f64;
            log.max_attention_error = log.max_attention_error.max(loss.max_attention_error);
        }
        log.epoch_batch_ce.push(total / examples.len() as f64);
    }
    let end = lm_loss(&params, examples)?;
    log.final_train_ce = end.cross_entropy;
    log.max_attention_error = log.max_attention_error.max(end.max_attention_error);
    Ok((params, log))
}

/// Pooled encoder output for every node, with the fingerprint of the
/// parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddingMatrix {
    pub embeddings: Matrix,
    pub source: String,
}

impl NodeEmbeddingMatrix {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::raw::write_matrix(path, &self.embeddings)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let embeddings = crate::raw::read_matrix(path)?;
        if !embeddings.is_finite() {
            return Err(Error::invalid("node embeddings contain non-finite values"));
        }
        Ok(Self {
            embeddings,
            source: path.display().to_string(),
        })
    }
}

/// Encodes every sequence; `sequences[i]` must be node `i`'s.
pub fn embed_all(sequences: &[BridgeSequence], params: &MiniLmParams) -> Result<NodeEmbeddingMatrix> {
    let mut embeddings = Matrix::zeros(sequences.len(), params.dim());
    for (i, seq) in sequences.iter().enumerate() {
        if seq.root != i {
            return Err(Error::InvalidState(format!("sequence {i} belongs to node {}", seq.root)));
        }
        embeddings.row_mut(i).copy_from_slice(&lm_forward(seq, params)?.pooled);
    }
    Ok(NodeEmbeddingMatrix {
        embeddings,
        source: params.fingerprint(),
    })
}

/// A sequence made of one node's own tokens only.
pub fn plain_sequence(root: usize, token_ids: &[TokenId]) -> BridgeSequence {
    BridgeSequence {
        root,
        token_ids: token_ids.to_vec(),
        provenance: vec![Provenance::Node(root); token_ids.len()],
    }
}
