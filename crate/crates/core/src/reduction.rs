//! Graph-aware token reduction.
//!
//! Each node's frozen token embeddings `E_i` are mean-pooled into `z_i`, the
//! pooled vectors are averaged over neighbors `l` times without self-loops,
//! and the result queries the node's own tokens through a cross-attention
//! layer:
//!
//! ```text
//! Score_i = softmax((z_i^(l) W_q)(E_i W_k)ᵀ / √d′)
//! s_i     = Score_i · E_i
//! L       = mean_i [ CE(C(s_i), y_i) + β · KL(U ‖ Score_i) ]
//! ```
//!
//! Only `W_q`, `W_k` and the linear classifier `C` are trained. At reduction
//! time the `k′` highest-scoring tokens of each node are kept in text order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{SplitMask, TextAttributedGraph};
use crate::numerics::{
    axpy_slice, cross_entropy_with_grad, dot, kl_from_uniform, kl_from_uniform_grad, softmax_backward,
    softmax_in_place, Matrix, ParamSet, RngStream,
};
use crate::text::{TokenId, TokenMatrix};

/// Which dimension sets the `1/√·` temperature of the score logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// `√d′`, the width of the query/key projections.
    #[default]
    Projected,
    /// `√d`, the token-embedding width.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReductionConfig {
    /// Message-passing hops `l`.
    pub hops: usize,
    /// Weight `β` of the KL-to-uniform regularizer.
    pub beta: f64,
    /// Retained-token budget `k′` per node.
    pub keep: usize,
    /// Query/key width `d′`; `None` means `d′ = d`.
    pub projected_dim: Option<usize>,
    pub scale: ScoreScale,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Standard deviation of the random part of the initial projections, in
    /// units of `1/√d`.
    pub init_gain: f64,
    /// Multiple of the (rectangular) identity added to both initial
    /// projections, so the untrained score already ranks tokens by similarity
    /// to the aggregated neighborhood text.
    pub init_identity: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            hops: 1,
            beta: 0.1,
            keep: 16,
            projected_dim: None,
            scale: ScoreScale::Projected,
            learning_rate: 3.0,
            epochs: 100,
            patience: 10,
            init_gain: 12.0,
            init_identity: 6.0,
        }
    }
}

impl ReductionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep == 0 {
            return Err(Error::invalid("keep (k′) must be at least 1"));
        }
        if self.projected_dim == Some(0) {
            return Err(Error::invalid("projected dimension d′ must be at least 1"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::invalid("beta must be a finite non-negative number"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Trainable parameters of the scoring module and its classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionParams {
    /// `d×d′`
    pub w_q: Matrix,
    /// `d×d′`
    pub w_k: Matrix,
    /// `d×C`
    pub classifier: Matrix,
    pub bias: Vec<f64>,
}

impl ReductionParams {
    /// Projections start at `identity · I + N(0, (gain/√d)²)`; the classifier
    /// at `N(0, 1/d)` with zero bias.
    pub fn init(
        dim: usize,
        projected_dim: usize,
        num_classes: usize,
        gain: f64,
        identity: f64,
        rng: &mut RngStream,
    ) -> Self {
        let std = gain / (dim as f64).sqrt();
        let mut w_q = Matrix::gaussian(dim, projected_dim, std, rng);
        let mut w_k = Matrix::gaussian(dim, projected_dim, std, rng);
        for i in 0..dim.min(projected_dim) {
            w_q.set(i, i, w_q.get(i, i) + identity);
            w_k.set(i, i, w_k.get(i, i) + identity);
        }
        Self {
            w_q,
            w_k,
            classifier: Matrix::gaussian(dim, num_classes, 1.0 / (dim as f64).sqrt(), rng),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn from_config(dim: usize, num_classes: usize, config: &ReductionConfig, rng: &mut RngStream) -> Self {
        Self::init(
            dim,
            config.projected_dim.unwrap_or(dim),
            num_classes,
            config.init_gain,
            config.init_identity,
            rng,
        )
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn projected_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

impl ParamSet for ReductionParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_q", self.w_q.data()),
            ("w_k", self.w_k.data()),
            ("classifier", self.classifier.data()),
            ("bias", &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w_q", self.w_q.data_mut()),
            ("w_k", self.w_k.data_mut()),
            ("classifier", self.classifier.data_mut()),
            ("bias", &mut self.bias),
        ]
    }
}

/// `z_i = (1/k_i) Σ_j e_j`
pub fn mean_pool(tokens: &Matrix) -> Vec<f64> {
    tokens.column_mean()
}

/// Applies `z^(t)_i = mean_{j ∈ N(i)} z^(t−1)_j` `hops` times. A node with no
/// neighbors keeps its previous vector.
pub fn message_pass(z: &Matrix, graph: &TextAttributedGraph, hops: usize) -> Matrix {
    assert_eq!(z.rows(), graph.num_nodes(), "one row per node");
    let mut current = z.clone();
    for _ in 0..hops {
        let mut next = Matrix::zeros(z.rows(), z.cols());
        for i in 0..graph.num_nodes() {
            let ns = graph.neighbors(i);
            let row = next.row_mut(i);
            if ns.is_empty() {
                row.copy_from_slice(current.row(i));
                continue;
            }
            for &j in ns {
                axpy_slice(row, 1.0, current.row(j));
            }
            let inv = 1.0 / ns.len() as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        current = next;
    }
    current
}

fn score_divisor(params: &ReductionParams, scale: ScoreScale) -> f64 {
    match scale {
        ScoreScale::Projected => (params.projected_dim() as f64).sqrt(),
        ScoreScale::Embedding => (params.dim() as f64).sqrt(),
    }
}

/// Intermediates of one node's forward pass that the backward pass reuses.
struct ScoreForward {
    /// `q = z W_q`
    query: Vec<f64>,
    scores: Vec<f64>,
}

fn score_forward(query_vec: &[f64], tokens: &Matrix, params: &ReductionParams, divisor: f64) -> ScoreForward {
    let query = params.w_q.vecmat(query_vec);
    // logits_j = e_j · (W_k qᵀ) / divisor
    let key_dir = params.w_k.matvec(&query);
    let mut scores: Vec<f64> = tokens.iter_rows().map(|e| dot(e, &key_dir) / divisor).collect();
    softmax_in_place(&mut scores);
    ScoreForward { query, scores }
}

/// Importance scores of one node's tokens given its aggregated query vector.
pub fn importance_score(query: &[f64], tokens: &Matrix, params: &ReductionParams, scale: ScoreScale) -> Vec<f64> {
    score_forward(query, tokens, params, score_divisor(params, scale)).scores
}

/// `s_i = Score_i · E_i`
pub fn weighted_pool(scores: &[f64], tokens: &Matrix) -> Vec<f64> {
    tokens.vecmat(scores)
}

/// Kept token positions: the `keep` largest scores, ties to the earlier
/// position, returned in ascending position order.
pub fn select_topk(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if keep < scores.len() {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(keep);
        order.sort_unstable();
    }
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub kl: f64,
    /// Largest `|Σ Score_i − 1|` seen while computing this loss.
    pub max_simplex_error: f64,
}

/// Frozen inputs of the reduction objective: token matrices, aggregated
/// queries and labels.
pub struct ReductionProblem<'a> {
    tokens: &'a [TokenMatrix],
    queries: Matrix,
    labels: &'a [usize],
    num_classes: usize,
    scale: ScoreScale,
}

impl<'a> ReductionProblem<'a> {
    pub fn new(graph: &'a TextAttributedGraph, tokens: &'a [TokenMatrix], hops: usize, scale: ScoreScale) -> Result<Self> {
        if tokens.len() != graph.num_nodes() {
            return Err(Error::invalid(format!(
                "{} token matrices for {} nodes",
                tokens.len(),
                graph.num_nodes()
            )));
        }
        let dim = tokens.first().map_or(0, |t| t.embeddings.cols());
        let mut pooled = Matrix::zeros(tokens.len(), dim);
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid(format!("node {i} has no tokens")));
            }
            pooled.row_mut(i).copy_from_slice(&mean_pool(&t.embeddings));
        }
        Ok(Self {
            tokens,
            queries: message_pass(&pooled, graph, hops),
            labels: graph.labels(),
            num_classes: graph.num_classes(),
            scale,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Aggregated query vectors `z^(l)`, one row per node.
    pub fn queries(&self) -> &Matrix {
        &self.queries
    }

    pub fn scores(&self, params: &ReductionParams, node: usize) -> Vec<f64> {
        importance_score(self.queries.row(node), &self.tokens[node].embeddings, params, self.scale)
    }

    fn check_params(&self, params: &ReductionParams) -> Result<()> {
        if params.dim() != self.dim() || params.w_k.rows() != self.dim() || params.classifier.rows() != self.dim() {
            return Err(Error::invalid("parameter width does not match embedding width"));
        }
        if params.w_k.cols() != params.projected_dim() {
            return Err(Error::invalid("W_q and W_k have different projected widths"));
        }
        if params.num_classes() != self.num_classes || params.classifier.cols() != self.num_classes {
            return Err(Error::invalid("classifier width does not match class count"));
        }
        Ok(())
    }

    /// Loss over `nodes` without gradients.
    pub fn loss(&self, params: &ReductionParams, nodes: &[usize], beta: f64) -> Result<LossBreakdown> {
        self.evaluate(params, nodes, beta, 1.0, None)
    }

    /// Loss over `nodes` and its gradient with respect to every trainable
    /// parameter. The embedding table receives no gradient.
    pub fn loss_and_grad(&self, params: &ReductionParams, nodes: &[usize], beta: f64) -> Result<(LossBreakdown, ReductionParams)> {
        let mut grad = params.zeros_like();
        let loss = self.evaluate(params, nodes, beta, 1.0, Some(&mut grad))?;
        Ok((loss, grad))
    }

    /// Shared forward/backward pass. `ce_weight` scales the classification
    /// term; it is 1 everywhere except the regularizer-only diagnostics.
    fn evaluate(
        &self,
        params: &ReductionParams,
        nodes: &[usize],
        beta: f64,
        ce_weight: f64,
        mut grad: Option<&mut ReductionParams>,
    ) -> Result<LossBreakdown> {
        if nodes.is_empty() {
            return Err(Error::invalid("labeled node set is empty"));
        }
        self.check_params(params)?;
        let divisor = score_divisor(params, self.scale);
        let inv_n = 1.0 / nodes.len() as f64;
        let mut out = LossBreakdown::default();

        for &i in nodes {
            let e = &self.tokens[i].embeddings;
            let z = self.queries.row(i);
            let fwd = score_forward(z, e, params, divisor);
            let p = &fwd.scores;
            out.max_simplex_error = out.max_simplex_error.max((p.iter().sum::<f64>() - 1.0).abs());

            let pooled = weighted_pool(p, e);
            let mut logits = params.classifier.vecmat(&pooled);
            axpy_slice(&mut logits, 1.0, &params.bias);
            let (ce, d_logits) = cross_entropy_with_grad(&logits, self.labels[i])?;
            let kl = kl_from_uniform(p);
            out.cross_entropy += ce * inv_n;
            out.kl += kl * inv_n;
            out.total += (ce_weight * ce + beta * kl) * inv_n;

            let Some(g) = grad.as_deref_mut() else {
                continue;
            };
            let w = ce_weight * inv_n;
            // classifier
            g.classifier.add_outer(w, &pooled, &d_logits);
            axpy_slice(&mut g.bias, w, &d_logits);
            // dL/dp = w · E·(C·dlogits) + (β/n) · dKL/dp
            let d_pooled = params.classifier.matvec(&d_logits);
            let mut d_p: Vec<f64> = e.matvec(&d_pooled).into_iter().map(|v| v * w).collect();
            if beta != 0.0 {
                axpy_slice(&mut d_p, beta * inv_n, &kl_from_uniform_grad(p));
            }
            let d_logit = softmax_backward(p, &d_p);
            // logits_j = e_j · (W_k qᵀ) / divisor
            let g_e: Vec<f64> = e.vecmat(&d_logit).into_iter().map(|v| v / divisor).collect();
            g.w_k.add_outer(1.0, &g_e, &fwd.query);
            let d_query = params.w_k.vecmat(&g_e);
            g.w_q.add_outer(1.0, z, &d_query);
        }

        if !out.total.is_finite() {
            return Err(Error::invalid("reduction loss is not finite"));
        }
        Ok(out)
    }

    /// Gradient descent on `β · KL` alone (classification weight zero), used
    /// to probe the regularizer in isolation.
    pub fn regularizer_only_step(&self, params: &mut ReductionParams, nodes: &[usize], beta: f64, lr: f64) -> Result<LossBreakdown> {
        let mut grad = params.zeros_like();
        let loss = self.evaluate(params, nodes, beta, 0.0, Some(&mut grad))?;
        params.add_scaled(-lr, &grad);
        Ok(loss)
    }

    /// Mean over `nodes` of `max_j Score_i[j]`.
    pub fn mean_max_score(&self, params: &ReductionParams, nodes: &[usize]) -> f64 {
        if nodes.is_empty() {
            return 0.0;
        }
        nodes
            .iter()
            .map(|&i| self.scores(params, i).into_iter().fold(0.0, f64::max))
            .sum::<f64>()
            / nodes.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReductionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_kl: f64,
    pub val_ce: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReductionLog {
    pub initial_train_loss: f64,
    pub epochs: Vec<ReductionEpoch>,
    /// Epoch whose parameters were returned; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val_ce: f64,
    pub stopped_early: bool,
    /// Largest `|Σ Score_i − 1|` over every score vector computed in training.
    pub max_simplex_error: f64,
}

impl ReductionLog {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }
}

/// Full-batch gradient descent on the training nodes with early stopping on
/// validation cross-entropy. Returns the best-validation parameters.
pub fn train_reducer(
    problem: &ReductionProblem<'_>,
    split: &SplitMask,
    init: ReductionParams,
    config: &ReductionConfig,
) -> Result<(ReductionParams, ReductionLog)> {
    config.validate()?;
    let train = split.train();
    let val = if split.val().is_empty() { train } else { split.val() };

    let mut params = init;
    let mut log = ReductionLog::default();
    let start = problem.loss(&params, train, config.beta)?;
    let start_val = problem.loss(&params, val, 0.0)?;
    log.initial_train_loss = start.total;
    log.best_val_ce = start_val.cross_entropy;
    log.max_simplex_error = start.max_simplex_error.max(start_val.max_simplex_error);
    let mut best = params.clone();
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        let (loss, grad) = problem.loss_and_grad(&params, train, config.beta)?;
        params.add_scaled(-config.learning_rate, &grad);
        if !params.all_finite() {
            return Err(Error::Divergence {
                stage: "reducer",
                epoch,
                loss: loss.total,
            });
        }
        let after = problem
            .loss(&params, train, config.beta)
            .map_err(|_| Error::Divergence {
                stage: "reducer",
                epoch,
                loss: f64::NAN,
            })?;
        let val_loss = problem.loss(&params, val, 0.0)?;
        log.max_simplex_error = log
            .max_simplex_error
            .max(loss.max_simplex_error)
            .max(after.max_simplex_error)
            .max(val_loss.max_simplex_error);
        log.epochs.push(ReductionEpoch {
            epoch,
            train_loss: after.total,
            train_ce: after.cross_entropy,
            train_kl: after.kl,
            val_ce: val_loss.cross_entropy,
        });

        if val_loss.cross_entropy < log.best_val_ce {
            log.best_val_ce = val_loss.cross_entropy;
            log.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, log))
}

/// One node's reduced text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedText {
    pub id: usize,
    pub kept_token_ids: Vec<TokenId>,
    pub kept_positions: Vec<usize>,
    /// Full per-token score vector over the original text when the reducer
    /// produces one; empty otherwise.
    pub scores: Vec<f64>,
}

impl ReducedText {
    pub fn from_positions(id: usize, token_ids: &[TokenId], positions: Vec<usize>, scores: Vec<f64>) -> Self {
        Self {
            id,
            kept_token_ids: positions.iter().map(|&p| token_ids[p]).collect(),
            kept_positions: positions,
            scores,
        }
    }
}

/// Scores every node and keeps its top-`keep` tokens in original order.
pub fn reduce_graph(problem: &ReductionProblem<'_>, params: &ReductionParams, keep: usize) -> Vec<ReducedText> {
    (0..problem.num_nodes())
        .map(|i| {
            let scores = problem.scores(params, i);
            let positions = select_topk(&scores, keep);
            ReducedText::from_positions(i, &problem.tokens[i].token_ids, positions, scores)
        })
        .collect()
}

pub fn save_reduced(path: &Path, reduced: &[ReducedText]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in reduced {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_reduced(path: &Path) -> Result<Vec<ReducedText>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReducedText = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if rec.id != out.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected node {}, found {}", out.len(), rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::Rng;

    fn path3() -> TextAttributedGraph {
        TextAttributedGraph::new(vec![String::new(); 3], vec![0, 1, 0], 2, &[(0, 1), (1, 2)])
            .unwrap()
            .0
    }

    fn token_matrix(node: usize, rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix {
            node,
            token_ids: (0..rows.len()).collect(),
            embeddings: Matrix::from_rows(rows),
        }
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(mean_pool(&Matrix::from_rows(&[[1.0, 3.0], [3.0, 5.0]])), vec![2.0, 4.0]);
        assert_eq!(mean_pool(&Matrix::from_rows(&[[0.5, -7.0, 2.0]])), vec![0.5, -7.0, 2.0]);
    }

    #[test]
    fn message_pass_examples() {
        let g = path3();
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 2.0]]);
        assert_eq!(message_pass(&z, &g, 0), z);
        let z1 = message_pass(&z, &g, 1);
        assert_eq!(z1, Matrix::from_rows(&[[0.0, 1.0], [1.0, 1.0], [0.0, 1.0]]));
    }

    #[test]
    fn isolated_nodes_keep_their_vector() {
        let (g, _) = TextAttributedGraph::new(vec![String::new(); 3], vec![0; 3], 1, &[(0, 1)]).unwrap();
        let z = Matrix::from_rows(&[[1.0], [2.0], [5.0]]);
        let z3 = message_pass(&z, &g, 3);
        assert_eq!(z3.row(2), &[5.0]);
        assert_eq!(z3.row(0), &[2.0]);
    }

    fn identity_params(d: usize, classes: usize) -> ReductionParams {
        ReductionParams {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            classifier: Matrix::zeros(d, classes),
            bias: vec![0.0; classes],
        }
    }

    #[test]
    fn importance_score_hand_example() {
        let p = identity_params(2, 2);
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let s = importance_score(&[1.0, 0.0], &e, &p, ScoreScale::Projected);
        // softmax([1/√2, 0]) = [0.669761549..., 0.330238450...]
        assert!((s[0] - 0.669_761_549_326_657).abs() < 1e-12);
        assert!((s[1] - 0.330_238_450_673_343).abs() < 1e-12);
    }

    #[test]
    fn identical_tokens_give_uniform_scores() {
        let mut rng = RngStream::new(1, "test");
        let p = ReductionParams::init(3, 3, 2, 1.0, 0.0, &mut rng);
        let e = Matrix::from_rows(&[[0.2, -0.4, 0.9]; 5]);
        for s in importance_score(&[1.0, 2.0, -3.0], &e, &p, ScoreScale::Projected) {
            assert!((s - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_pool_examples() {
        let e = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.0, 4.0]]);
        let uniform = weighted_pool(&[1.0 / 3.0; 3], &e);
        for (a, b) in uniform.iter().zip(mean_pool(&e)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(weighted_pool(&[0.0, 1.0, 0.0], &e), vec![3.0, -1.0]);
    }

    #[test]
    fn select_topk_examples() {
        assert_eq!(select_topk(&[0.5, 0.3, 0.2], 2), vec![0, 1]);
        assert_eq!(select_topk(&[0.25; 4], 2), vec![0, 1]);
        assert_eq!(select_topk(&[0.1, 0.9], 5), vec![0, 1]);
        assert_eq!(select_topk(&[0.1, 0.2, 0.7], 1), vec![2]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let g = path3();
        let tokens: Vec<_> = (0..3).map(|i| token_matrix(i, &[&[1.0, 0.0], &[0.0, 1.0]])).collect();
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Projected).unwrap();
        let p = identity_params(2, 2);
        let loss = problem.loss(&p, &[0, 1, 2], 0.0).unwrap();
        assert!((loss.total - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_scores_make_kl_vanish() {
        let g = path3();
        let tokens: Vec<_> = (0..3).map(|i| token_matrix(i, &[&[0.3, 0.7][..]; 4])).collect();
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Projected).unwrap();
        let mut rng = RngStream::new(3, "test");
        let p = ReductionParams::init(2, 2, 2, 1.0, 0.0, &mut rng);
        let a = problem.loss(&p, &[0, 2], 0.0).unwrap();
        let b = problem.loss(&p, &[0, 2], 10.0).unwrap();
        assert!(a.kl.abs() < 1e-15);
        assert!((a.total - b.total).abs() < 1e-14);
    }

    #[test]
    fn empty_labeled_set_is_rejected() {
        let g = path3();
        let tokens: Vec<_> = (0..3).map(|i| token_matrix(i, &[&[1.0, 0.0]])).collect();
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Projected).unwrap();
        assert!(problem.loss(&identity_params(2, 2), &[], 0.1).is_err());
    }

    fn random_fixture(rng: &mut RngStream, n: usize, k: usize, d: usize) -> (TextAttributedGraph, Vec<TokenMatrix>) {
        let labels = (0..n).map(|i| i % 2).collect();
        let (g, _) = TextAttributedGraph::new(vec![String::new(); n], labels, 2, &[(0, 1), (1, 2)]).unwrap();
        let tokens = (0..n)
            .map(|i| {
                let len = rng.random_range(1..=k);
                TokenMatrix {
                    node: i,
                    token_ids: (0..len).collect(),
                    embeddings: Matrix::gaussian(len, d, 1.0, rng),
                }
            })
            .collect();
        (g, tokens)
    }

    #[test]
    fn three_node_gradients_pass_grad_check() {
        let mut rng = RngStream::new(5, "test");
        let (g, tokens) = random_fixture(&mut rng, 3, 4, 4);
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Projected).unwrap();
        let params = ReductionParams::init(4, 4, 2, 1.0, 0.0, &mut rng);
        let nodes = [0, 1, 2];
        let (_, grad) = problem.loss_and_grad(&params, &nodes, 0.1).unwrap();
        let report = grad_check(
            &params,
            &grad,
            |p| problem.loss(p, &nodes, 0.1).unwrap().total,
            GradCheckOptions::default(),
        );
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn embedding_scale_uses_token_width() {
        let mut rng = RngStream::new(9, "test");
        let (g, tokens) = random_fixture(&mut rng, 3, 3, 4);
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Embedding).unwrap();
        let params = ReductionParams::init(4, 2, 2, 1.0, 0.0, &mut rng);
        let (_, grad) = problem.loss_and_grad(&params, &[0, 1], 0.5).unwrap();
        let report = grad_check(
            &params,
            &grad,
            |p| problem.loss(p, &[0, 1], 0.5).unwrap().total,
            GradCheckOptions::default(),
        );
        assert!(report.passed(), "{:?}", report.failures());
        let q = problem.queries().row(0);
        let wide = importance_score(q, &tokens[0].embeddings, &params, ScoreScale::Embedding);
        let narrow = importance_score(q, &tokens[0].embeddings, &params, ScoreScale::Projected);
        if tokens[0].len() > 1 {
            assert_ne!(wide, narrow);
        }
    }

    #[test]
    fn regularizer_alone_flattens_scores() {
        let (g, _) = TextAttributedGraph::new(vec![String::new()], vec![0], 1, &[]).unwrap();
        let tokens = vec![token_matrix(0, &[&[2.0, 0.0], &[0.0, 1.0], &[-1.0, 1.0], &[0.5, 0.5]])];
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Projected).unwrap();
        let mut params = identity_params(2, 1);
        params.w_q.scale(3.0);
        let before = problem.mean_max_score(&params, &[0]);
        assert!(before - 0.25 > 0.1);
        for _ in 0..2000 {
            problem.regularizer_only_step(&mut params, &[0], 1.0, 0.5).unwrap();
        }
        let after = problem.mean_max_score(&params, &[0]);
        assert!(after - 0.25 < 0.01, "{after}");
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut rng = RngStream::new(2, "test");
        let (g, tokens) = random_fixture(&mut rng, 3, 4, 3);
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Projected).unwrap();
        let init = ReductionParams::init(3, 3, 2, 1.0, 0.0, &mut rng);
        let split = SplitMask::new(vec![0, 1], vec![2], vec![], 3).unwrap();
        let config = ReductionConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..Default::default()
        };
        let (out, log) = train_reducer(&problem, &split, init.clone(), &config).unwrap();
        assert_eq!(out, init);
        assert!(log.epochs.iter().all(|e| e.train_loss == log.initial_train_loss));
    }

    #[test]
    fn reduce_keeps_everything_when_budget_is_large() {
        let mut rng = RngStream::new(4, "test");
        let (g, tokens) = random_fixture(&mut rng, 3, 5, 3);
        let problem = ReductionProblem::new(&g, &tokens, 1, ScoreScale::Projected).unwrap();
        let params = ReductionParams::init(3, 3, 2, 1.0, 0.0, &mut rng);
        for r in reduce_graph(&problem, &params, 5) {
            assert_eq!(r.kept_token_ids, tokens[r.id].token_ids);
            assert_eq!(r.scores.len(), tokens[r.id].len());
        }
    }

    #[test]
    fn reduced_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reduced.jsonl");
        let reduced = vec![
            ReducedText::from_positions(0, &[5, 6, 7], vec![0, 2], vec![0.5, 0.1, 0.4]),
            ReducedText::from_positions(1, &[9], vec![0], vec![]),
        ];
        save_reduced(&path, &reduced).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            first.lines().next().unwrap(),
            r#"{"id":0,"kept_token_ids":[5,7],"kept_positions":[0,2],"scores":[0.5,0.1,0.4]}"#
        );
        assert_eq!(load_reduced(&path).unwrap(), reduced);
    }
}
