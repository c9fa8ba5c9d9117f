//! Two-layer mean-aggregator GraphSAGE on frozen node embeddings, for node
//! classification and dot-product link prediction.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{SplitKind, SplitMask, TextAttributedGraph};
use crate::numerics::{
    argmax, cross_entropy_with_grad, sigmoid, softplus, Matrix, ParamSet, RngStream, STREAM_INIT,
    STREAM_NEGATIVES,
};
use crate::raw::{RawReader, RawWriter};

/// Sparse row-wise linear operator on node matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Propagation {
    /// `D⁻¹A`; isolated nodes get an all-zero row.
    pub fn neighbor_mean(graph: &TextAttributedGraph) -> Self {
        let rows = (0..graph.num_nodes())
            .map(|i| {
                let nb = graph.neighbors(i);
                let w = 1.0 / nb.len().max(1) as f64;
                nb.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        Self { rows }
    }

    /// `D̃^{-1/2}(A + I)D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
    pub fn gcn_normalized(graph: &TextAttributedGraph) -> Self {
        let inv_sqrt: Vec<f64> = (0..graph.num_nodes())
            .map(|i| 1.0 / ((graph.degree(i) + 1) as f64).sqrt())
            .collect();
        let rows = (0..graph.num_nodes())
            .map(|i| {
                let mut row: Vec<(usize, f64)> = graph
                    .neighbors(i)
                    .iter()
                    .map(|&j| (j, inv_sqrt[i] * inv_sqrt[j]))
                    .collect();
                row.push((i, inv_sqrt[i] * inv_sqrt[i]));
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        Self { rows }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.rows.len();
        let mut m = Matrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m.set(i, j, m.get(i, j) + w);
            }
        }
        m
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows.len(), x.cols());
        for (i, row) in self.rows.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, w) in row {
                crate::numerics::axpy_slice(dst, w, x.row(j));
            }
        }
        out
    }

    pub fn apply_transpose(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows.len(), x.cols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                crate::numerics::axpy_slice(out.row_mut(j), w, x.row(i));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 0.1,
            epochs: 200,
            patience: 20,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `Z = ReLU(H W_s1 + M H W_n1) W_s2 + M ReLU(H W_s1 + M H W_n1) W_n2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SageParams {
    pub w_self1: Matrix,
    pub w_neigh1: Matrix,
    pub w_self2: Matrix,
    pub w_neigh2: Matrix,
}

impl ParamSet for SageParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_self1", self.w_self1.data()),
            ("w_neigh1", self.w_neigh1.data()),
            ("w_self2", self.w_self2.data()),
            ("w_neigh2", self.w_neigh2.data()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w_self1", self.w_self1.data_mut()),
            ("w_neigh1", self.w_neigh1.data_mut()),
            ("w_self2", self.w_self2.data_mut()),
            ("w_neigh2", self.w_neigh2.data_mut()),
        ]
    }
}

impl SageParams {
    /// Entries drawn from `N(0, 1/d_in)` on the `(seed, "init", 2)` stream.
    pub fn init(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = RngStream::derive(seed, STREAM_INIT, 2);
        let s1 = 1.0 / (input.max(1) as f64).sqrt();
        let s2 = 1.0 / (hidden.max(1) as f64).sqrt();
        Self {
            w_self1: Matrix::gaussian(input, hidden, s1, &mut rng),
            w_neigh1: Matrix::gaussian(input, hidden, s1, &mut rng),
            w_self2: Matrix::gaussian(hidden, output, s2, &mut rng),
            w_neigh2: Matrix::gaussian(hidden, output, s2, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_self1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_self1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_self2.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Header `(2, d_in, hidden, d_out)` as `u32`, then the four weights.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = RawWriter::create(path)?;
        w.header(&[2, self.input_dim(), self.hidden_dim(), self.output_dim()])?;
        for (_, t) in self.tensors() {
            w.values(t)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = RawReader::open(path)?;
        let [layers, d, h, c] = r.header()?;
        if layers != 2 {
            return Err(Error::invalid(format!("expected 2 layers in checkpoint, found {layers}")));
        }
        let p = Self {
            w_self1: r.matrix(d, h)?,
            w_neigh1: r.matrix(d, h)?,
            w_self2: r.matrix(h, c)?,
            w_neigh2: r.matrix(h, c)?,
        };
        r.finish()?;
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct SageOutput {
    pub hidden: Matrix,
    pub output: Matrix,
}

struct SageCache {
    agg0: Matrix,
    pre1: Matrix,
    hidden: Matrix,
    agg1: Matrix,
    output: Matrix,
}

fn sage_cached(h: &Matrix, op: &Propagation, p: &SageParams) -> Result<SageCache> {
    if h.rows() != op.num_nodes() {
        return Err(Error::invalid(format!(
            "feature matrix has {} rows for {} nodes",
            h.rows(),
            op.num_nodes()
        )));
    }
    if h.cols() != p.input_dim() {
        return Err(Error::invalid(format!(
            "feature width {} does not match model input {}",
            h.cols(),
            p.input_dim()
        )));
    }
    let agg0 = op.apply(h);
    let mut pre1 = h.matmul(&p.w_self1);
    pre1.axpy(1.0, &agg0.matmul(&p.w_neigh1));
    let mut hidden = pre1.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let agg1 = op.apply(&hidden);
    let mut output = hidden.matmul(&p.w_self2);
    output.axpy(1.0, &agg1.matmul(&p.w_neigh2));
    Ok(SageCache {
        agg0,
        pre1,
        hidden,
        agg1,
        output,
    })
}

fn sage_backward(h: &Matrix, op: &Propagation, p: &SageParams, c: &SageCache, d_out: &Matrix) -> SageParams {
    let w_self2 = c.hidden.t_matmul(d_out);
    let w_neigh2 = c.agg1.t_matmul(d_out);
    let mut d_hidden = d_out.matmul_t(&p.w_self2);
    d_hidden.axpy(1.0, &op.apply_transpose(&d_out.matmul_t(&p.w_neigh2)));
    for (g, &z) in d_hidden.data_mut().iter_mut().zip(c.pre1.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    SageParams {
        w_self1: h.t_matmul(&d_hidden),
        w_neigh1: c.agg0.t_matmul(&d_hidden),
        w_self2,
        w_neigh2,
    }
}

/// Per-node logits and hidden-layer embeddings.
pub fn sage_forward(h: &Matrix, graph: &TextAttributedGraph, params: &SageParams) -> Result<SageOutput> {
    sage_with(h, &Propagation::neighbor_mean(graph), params)
}

pub fn sage_with(h: &Matrix, op: &Propagation, params: &SageParams) -> Result<SageOutput> {
    let c = sage_cached(h, op, params)?;
    Ok(SageOutput {
        hidden: c.hidden,
        output: c.output,
    })
}

/// Mean CE over `nodes` and its gradient with respect to the output matrix.
pub(crate) fn node_ce(output: &Matrix, labels: &[usize], nodes: &[usize]) -> Result<(f64, Matrix)> {
    if nodes.is_empty() {
        return Err(Error::invalid("no labeled nodes"));
    }
    let mut d = Matrix::zeros(output.rows(), output.cols());
    let scale = 1.0 / nodes.len() as f64;
    let mut loss = 0.0;
    for &i in nodes {
        let (ce, g) = cross_entropy_with_grad(output.row(i), labels[i])?;
        loss += ce * scale;
        crate::numerics::axpy_slice(d.row_mut(i), scale, &g);
    }
    Ok((loss, d))
}

/// Mean node-classification CE of a SAGE model.
pub fn sage_node_loss(h: &Matrix, op: &Propagation, labels: &[usize], nodes: &[usize], p: &SageParams) -> Result<f64> {
    let c = sage_cached(h, op, p)?;
    Ok(node_ce(&c.output, labels, nodes)?.0)
}

pub fn sage_node_loss_and_grad(
    h: &Matrix,
    op: &Propagation,
    labels: &[usize],
    nodes: &[usize],
    p: &SageParams,
) -> Result<(f64, SageParams)> {
    let c = sage_cached(h, op, p)?;
    let (loss, d) = node_ce(&c.output, labels, nodes)?;
    Ok((loss, sage_backward(h, op, p, &c, &d)))
}

/// Fraction of `nodes` whose argmax logit equals the label; 0 for no nodes.
pub fn accuracy(logits: &Matrix, labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes.iter().filter(|&&i| argmax(logits.row(i)) == labels[i]).count();
    hits as f64 / nodes.len() as f64
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitScores {
    pub fn get(&self, kind: SplitKind) -> f64 {
        match kind {
            SplitKind::Train => self.train,
            SplitKind::Val => self.val,
            SplitKind::Test => self.test,
        }
    }
}

/// Argmax accuracy per split, rounded to four decimals.
pub fn evaluate_nodes(logits: &Matrix, labels: &[usize], split: &SplitMask) -> SplitScores {
    SplitScores {
        train: round4(accuracy(logits, labels, split.get(SplitKind::Train))),
        val: round4(accuracy(logits, labels, split.get(SplitKind::Val))),
        test: round4(accuracy(logits, labels, split.get(SplitKind::Test))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GnnEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GnnLog {
    pub initial_train_loss: f64,
    pub epochs: Vec<GnnEpoch>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub stopped_early: bool,
}

impl GnnLog {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }
}

/// Full-batch gradient descent with early stopping on a validation metric
/// (higher is better). Epoch 0 is the initial model.
pub(crate) fn train_early_stopping<P, L, V>(
    mut params: P,
    lr: f64,
    epochs: usize,
    patience: usize,
    stage: &'static str,
    mut loss_and_grad: L,
    mut val_metric: V,
) -> Result<(P, GnnLog)>
where
    P: ParamSet + Clone,
    L: FnMut(&P) -> Result<(f64, P)>,
    V: FnMut(&P) -> Result<f64>,
{
    let mut log = GnnLog::default();
    let mut best = params.clone();
    log.best_val_metric = val_metric(&params)?;
    let mut since_best = 0;
    for epoch in 1..=epochs {
        let (loss, grad) = loss_and_grad(&params)?;
        if epoch == 1 {
            log.initial_train_loss = loss;
        }
        params.add_scaled(-lr, &grad);
        if !loss.is_finite() || !params.all_finite() {
            return Err(Error::Divergence { stage, epoch, loss });
        }
        let metric = val_metric(&params)?;
        let (after, _) = loss_and_grad(&params)?;
        log.epochs.push(GnnEpoch {
            epoch,
            train_loss: after,
            val_metric: metric,
        });
        if metric > log.best_val_metric {
            log.best_val_metric = metric;
            log.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, log))
}

/// Trains a node classifier on `op`-propagated features. The validation set
/// falls back to the training nodes when empty.
pub fn train_node_model(
    h: &Matrix,
    op: &Propagation,
    labels: &[usize],
    split: &SplitMask,
    init: SageParams,
    config: &GnnConfig,
    stage: &'static str,
) -> Result<(SageParams, GnnLog)> {
    config.validate()?;
    let train = split.get(SplitKind::Train);
    if train.is_empty() {
        return Err(Error::invalid("no labeled training nodes"));
    }
    let val = if split.get(SplitKind::Val).is_empty() {
        train
    } else {
        split.get(SplitKind::Val)
    };
    train_early_stopping(
        init,
        config.learning_rate,
        config.epochs,
        config.patience,
        stage,
        |p| sage_node_loss_and_grad(h, op, labels, train, p),
        |p| Ok(accuracy(&sage_cached(h, op, p)?.output, labels, val)),
    )
}

pub fn train_gnn(
    h: &Matrix,
    graph: &TextAttributedGraph,
    split: &SplitMask,
    config: &GnnConfig,
    seed: u64,
) -> Result<(SageParams, GnnLog)> {
    let init = SageParams::init(h.cols(), config.hidden, graph.num_classes(), seed);
    let op = Propagation::neighbor_mean(graph);
    train_node_model(h, &op, graph.labels(), split, init, config, "gnn")
}

/// Edge partition and matched non-edges for link prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPredSplit {
    pub train_pos: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub train_neg: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
    pub seed: u64,
}

impl LinkPredSplit {
    pub fn positives(&self, kind: SplitKind) -> &[(usize, usize)] {
        match kind {
            SplitKind::Train => &self.train_pos,
            SplitKind::Val => &self.val_pos,
            SplitKind::Test => &self.test_pos,
        }
    }

    pub fn negatives(&self, kind: SplitKind) -> &[(usize, usize)] {
        match kind {
            SplitKind::Train => &self.train_neg,
            SplitKind::Val => &self.val_neg,
            SplitKind::Test => &self.test_neg,
        }
    }

    /// The input graph with only training edges kept.
    pub fn restricted_graph(&self, graph: &TextAttributedGraph) -> Result<TextAttributedGraph> {
        graph.with_edges(&self.train_pos)
    }
}

/// Shuffles the edges into 60/20/20 parts and draws as many uniform
/// non-edges per part, disjoint across parts.
pub fn split_links(graph: &TextAttributedGraph, seed: u64) -> Result<LinkPredSplit> {
    let mut edges = graph.edges();
    let m = edges.len();
    if m < 5 {
        return Err(Error::invalid(format!("link prediction needs at least 5 edges, graph has {m}")));
    }
    let n = graph.num_nodes();
    let non_edges = n * (n - 1) / 2 - m;
    if non_edges < m {
        return Err(Error::invalid(format!(
            "graph too dense: {non_edges} non-edges available, {m} negatives needed"
        )));
    }
    edges.shuffle(&mut RngStream::derive(seed, "links", 0));
    let n_train = (0.6 * m as f64).round() as usize;
    let n_val = (0.2 * m as f64).round() as usize;

    let mut rng = RngStream::derive(seed, STREAM_NEGATIVES, 0);
    let negatives: Vec<(usize, usize)> = if non_edges >= 4 * m {
        let mut seen = HashSet::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            let pair = (u.min(v), u.max(v));
            if u != v && !graph.has_edge(u, v) && seen.insert(pair) {
                out.push(pair);
            }
        }
        out
    } else {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|&(u, v)| !graph.has_edge(u, v))
            .collect();
        let (picked, _) = all.partial_shuffle(&mut rng, m);
        picked.to_vec()
    };

    let (tp, rest) = edges.split_at(n_train);
    let (vp, sp) = rest.split_at(n_val);
    let (tn, rest) = negatives.split_at(n_train);
    let (vn, sn) = rest.split_at(n_val);
    Ok(LinkPredSplit {
        train_pos: tp.to_vec(),
        val_pos: vp.to_vec(),
        test_pos: sp.to_vec(),
        train_neg: tn.to_vec(),
        val_neg: vn.to_vec(),
        test_neg: sn.to_vec(),
        seed,
    })
}

/// Area under the ROC curve via the Mann–Whitney statistic, with tied
/// scores given average ranks. Returns 0.5 when either side is empty.
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positive.len() as f64, negative.len() as f64);
    (rank_sum - p * (p + 1.0) / 2.0) / (p * n)
}

fn pair_scores(z: &Matrix, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(u, v)| sigmoid(crate::numerics::dot(z.row(u), z.row(v))))
        .collect()
}

/// Mean binary CE of `σ(z_u·z_v)` over positive and negative pairs.
pub fn link_loss_and_grad(
    h: &Matrix,
    op: &Propagation,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    p: &SageParams,
    with_grad: bool,
) -> Result<(f64, Option<SageParams>)> {
    let total = pos.len() + neg.len();
    if total == 0 {
        return Err(Error::invalid("no training pairs"));
    }
    let c = sage_cached(h, op, p)?;
    let z = &c.output;
    let scale = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(z.rows(), z.cols());
    for (pairs, target) in [(pos, 1.0), (neg, 0.0)] {
        for &(u, v) in pairs {
            let s = crate::numerics::dot(z.row(u), z.row(v));
            loss += scale * if target == 1.0 { softplus(-s) } else { softplus(s) };
            let g = scale * (sigmoid(s) - target);
            crate::numerics::axpy_slice(d.row_mut(u), g, z.row(v));
            crate::numerics::axpy_slice(d.row_mut(v), g, z.row(u));
        }
    }
    let grad = with_grad.then(|| sage_backward(h, op, p, &c, &d));
    Ok((loss, grad))
}

fn check_restricted(restricted: &TextAttributedGraph, split: &LinkPredSplit) -> Result<()> {
    let mut train = split.train_pos.clone();
    train.sort_unstable();
    if restricted.edges() != train {
        return Err(Error::invalid("message-passing graph must contain exactly the training edges"));
    }
    Ok(())
}

/// Trains a link model (`d_in → hidden → hidden`) on the training pairs,
/// early-stopping on validation AUC.
pub fn train_link_model(
    h: &Matrix,
    restricted: &TextAttributedGraph,
    split: &LinkPredSplit,
    config: &GnnConfig,
    seed: u64,
) -> Result<(SageParams, GnnLog)> {
    config.validate()?;
    check_restricted(restricted, split)?;
    let op = Propagation::neighbor_mean(restricted);
    let init = SageParams::init(h.cols(), config.hidden, config.hidden, seed);
    train_early_stopping(
        init,
        config.learning_rate,
        config.epochs,
        config.patience,
        "link",
        |p| {
            let (l, g) = link_loss_and_grad(h, &op, &split.train_pos, &split.train_neg, p, true)?;
            Ok((l, g.expect("gradient requested")))
        },
        |p| {
            let z = sage_cached(h, &op, p)?.output;
            Ok(auc(&pair_scores(&z, &split.val_pos), &pair_scores(&z, &split.val_neg)))
        },
    )
}

/// AUC of `σ(z_u·z_v)` per split, with message passing over training edges
/// only.
pub fn evaluate_links(
    params: &SageParams,
    h: &Matrix,
    restricted: &TextAttributedGraph,
    split: &LinkPredSplit,
) -> Result<SplitScores> {
    check_restricted(restricted, split)?;
    let z = sage_forward(h, restricted, params)?.output;
    let score = |kind| {
        round4(auc(
            &pair_scores(&z, split.positives(kind)),
            &pair_scores(&z, split.negatives(kind)),
        ))
    };
    Ok(SplitScores {
        train: score(SplitKind::Train),
        val: score(SplitKind::Val),
        test: score(SplitKind::Test),
    })
}
