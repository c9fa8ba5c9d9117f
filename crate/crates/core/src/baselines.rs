//! Alternative token reducers and reference node classifiers.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{accuracy, evaluate_nodes, node_ce, train_early_stopping, GnnConfig, GnnLog, Propagation, SplitScores};
use crate::graph::{SplitKind, SplitMask, SyntheticSpec, TextAttributedGraph};
use crate::numerics::{Matrix, ParamSet, RngStream, STREAM_INIT};
use crate::reduction::{select_topk, ReducedText};
use crate::text::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerKind {
    /// Learned, neighborhood-aware importance scores.
    #[default]
    Graph,
    Random,
    Tfidf,
    Truncate,
}

impl ReducerKind {
    pub const ALL: [ReducerKind; 4] = [Self::Graph, Self::Random, Self::Tfidf, Self::Truncate];

    pub fn name(self) -> &'static str {
        match self {
            Self::Graph => "graph",
            Self::Random => "random",
            Self::Tfidf => "tfidf",
            Self::Truncate => "truncate",
        }
    }
}

impl fmt::Display for ReducerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReducerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown reducer `{s}` (graph|random|tfidf|truncate)")))
    }
}

/// `min(keep, len)` positions drawn uniformly without replacement, ascending.
pub fn random_reduce<R: Rng + ?Sized>(len: usize, keep: usize, rng: &mut R) -> Vec<usize> {
    if keep >= len {
        return (0..len).collect();
    }
    let mut picked = sample(rng, len, keep).into_vec();
    picked.sort_unstable();
    picked
}

/// The first `min(keep, len)` positions.
pub fn truncate_reduce(len: usize, keep: usize) -> Vec<usize> {
    (0..len.min(keep)).collect()
}

/// Document frequencies over a tokenized corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub doc_freq: HashMap<TokenId, usize>,
}

impl CorpusStats {
    pub fn new<D: AsRef<[TokenId]>>(docs: &[D]) -> Self {
        let mut doc_freq = HashMap::new();
        for doc in docs {
            let mut seen: Vec<TokenId> = doc.as_ref().to_vec();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        Self {
            num_docs: docs.len(),
            doc_freq,
        }
    }

    /// `ln((1 + N) / (1 + df))`
    pub fn idf(&self, token: TokenId) -> f64 {
        let df = self.doc_freq.get(&token).copied().unwrap_or(0);
        ((1 + self.num_docs) as f64 / (1 + df) as f64).ln()
    }
}

/// Per-position `tf(t) · idf(t)` with raw in-document counts as `tf`.
pub fn tfidf_scores(token_ids: &[TokenId], stats: &CorpusStats) -> Vec<f64> {
    let mut tf: HashMap<TokenId, usize> = HashMap::new();
    for &t in token_ids {
        *tf.entry(t).or_insert(0) += 1;
    }
    token_ids.iter().map(|t| tf[t] as f64 * stats.idf(*t)).collect()
}

/// Top-`keep` positions by tf-idf, ties to the earlier position, ascending.
pub fn tfidf_reduce(token_ids: &[TokenId], stats: &CorpusStats, keep: usize) -> Vec<usize> {
    select_topk(&tfidf_scores(token_ids, stats), keep)
}

/// Applies a score-free reducer to every node. `Graph` needs the trained
/// reducer and is rejected here.
pub fn reduce_all(kind: ReducerKind, docs: &[Vec<TokenId>], keep: usize, seed: u64) -> Result<Vec<ReducedText>> {
    if keep == 0 {
        return Err(Error::invalid("token budget must be at least 1"));
    }
    let stats = (kind == ReducerKind::Tfidf).then(|| CorpusStats::new(docs));
    docs.iter()
        .enumerate()
        .map(|(i, ids)| {
            let (positions, scores) = match kind {
                ReducerKind::Graph => {
                    return Err(Error::invalid("the graph reducer needs trained parameters"));
                }
                ReducerKind::Random => {
                    let mut rng = RngStream::derive(seed, "reduce", i as u64);
                    (random_reduce(ids.len(), keep, &mut rng), Vec::new())
                }
                ReducerKind::Tfidf => {
                    let s = tfidf_scores(ids, stats.as_ref().expect("stats built for tfidf"));
                    (select_topk(&s, keep), s)
                }
                ReducerKind::Truncate => (truncate_reduce(ids.len(), keep), Vec::new()),
            };
            Ok(ReducedText::from_positions(i, ids, positions, scores))
        })
        .collect()
}

/// Mean over nodes of the fraction of kept tokens that are signal tokens of
/// the node's own class.
pub fn signal_fraction(reduced: &[ReducedText], labels: &[usize], vocab: &Vocabulary) -> f64 {
    if reduced.is_empty() {
        return 0.0;
    }
    let total: f64 = reduced
        .iter()
        .map(|r| {
            if r.kept_token_ids.is_empty() {
                return 0.0;
            }
            let hits = r
                .kept_token_ids
                .iter()
                .filter(|&&t| vocab.token(t).and_then(SyntheticSpec::signal_class) == Some(labels[r.id]))
                .count();
            hits as f64 / r.kept_token_ids.len() as f64
        })
        .sum();
    total / reduced.len() as f64
}

/// Sparse bag-of-words counts, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct BowMatrix {
    pub vocab_size: usize,
    pub rows: Vec<Vec<(TokenId, f64)>>,
}

impl BowMatrix {
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows.len(), self.vocab_size);
        for (i, row) in self.rows.iter().enumerate() {
            for &(t, c) in row {
                m.set(i, t, c);
            }
        }
        m
    }

    /// Each row divided by its total count.
    pub fn to_dense_frequencies(&self) -> Matrix {
        let mut m = self.to_dense();
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        m
    }
}

pub fn bow_features(graph: &TextAttributedGraph, vocab: &Vocabulary) -> BowMatrix {
    let rows = graph
        .texts()
        .iter()
        .map(|text| {
            let mut counts: HashMap<TokenId, f64> = HashMap::new();
            for t in vocab.tokenize(text) {
                *counts.entry(t).or_insert(0.0) += 1.0;
            }
            let mut row: Vec<_> = counts.into_iter().collect();
            row.sort_unstable_by_key(|&(t, _)| t);
            row
        })
        .collect();
    BowMatrix {
        vocab_size: vocab.len(),
        rows,
    }
}

/// `Z = P ReLU(P X W_1) W_2` for a fixed propagation `P`: the normalized
/// adjacency for GCN, the identity for an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerParams {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl ParamSet for TwoLayerParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![("w1", self.w1.data()), ("w2", self.w2.data())]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![("w1", self.w1.data_mut()), ("w2", self.w2.data_mut())]
    }
}

impl TwoLayerParams {
    pub fn init(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = RngStream::derive(seed, STREAM_INIT, 3);
        Self {
            w1: Matrix::gaussian(input, hidden, 1.0 / (input.max(1) as f64).sqrt(), &mut rng),
            w2: Matrix::gaussian(hidden, output, 1.0 / (hidden.max(1) as f64).sqrt(), &mut rng),
        }
    }
}

struct TwoLayerCache {
    px: Matrix,
    pre: Matrix,
    hidden: Matrix,
    output: Matrix,
}

fn two_layer_cached(x: &Matrix, op: &Propagation, p: &TwoLayerParams) -> Result<TwoLayerCache> {
    if x.rows() != op.num_nodes() || x.cols() != p.w1.rows() {
        return Err(Error::invalid(format!(
            "features are {}×{}, model expects {}×{}",
            x.rows(),
            x.cols(),
            op.num_nodes(),
            p.w1.rows()
        )));
    }
    let px = op.apply(x);
    let pre = px.matmul(&p.w1);
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let output = op.apply(&hidden).matmul(&p.w2);
    Ok(TwoLayerCache {
        px,
        pre,
        hidden,
        output,
    })
}

pub fn two_layer_forward(x: &Matrix, op: &Propagation, p: &TwoLayerParams) -> Result<Matrix> {
    two_layer_cached(x, op, p).map(|c| c.output)
}

pub fn two_layer_loss_and_grad(
    x: &Matrix,
    op: &Propagation,
    labels: &[usize],
    nodes: &[usize],
    p: &TwoLayerParams,
) -> Result<(f64, TwoLayerParams)> {
    let c = two_layer_cached(x, op, p)?;
    let (loss, d_out) = node_ce(&c.output, labels, nodes)?;
    let ph = op.apply(&c.hidden);
    let w2 = ph.t_matmul(&d_out);
    let mut d_hidden = op.apply_transpose(&d_out.matmul_t(&p.w2));
    for (g, &z) in d_hidden.data_mut().iter_mut().zip(c.pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let w1 = c.px.t_matmul(&d_hidden);
    Ok((loss, TwoLayerParams { w1, w2 }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceModel {
    Gcn,
    Mlp,
}

impl ReferenceModel {
    pub fn propagation(self, graph: &TextAttributedGraph) -> Propagation {
        match self {
            Self::Gcn => Propagation::gcn_normalized(graph),
            Self::Mlp => Propagation::identity(graph.num_nodes()),
        }
    }
}

/// Trains a reference GCN or MLP like the SAGE classifier and returns its
/// per-split accuracy.
pub fn gcn_reference(
    model: ReferenceModel,
    features: &Matrix,
    graph: &TextAttributedGraph,
    split: &SplitMask,
    config: &GnnConfig,
    seed: u64,
) -> Result<(TwoLayerParams, GnnLog, SplitScores)> {
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
    let op = model.propagation(graph);
    let labels = graph.labels();
    let init = TwoLayerParams::init(features.cols(), config.hidden, graph.num_classes(), seed);
    let stage = match model {
        ReferenceModel::Gcn => "gcn",
        ReferenceModel::Mlp => "mlp",
    };
    let (params, log) = train_early_stopping(
        init,
        config.learning_rate,
        config.epochs,
        config.patience,
        stage,
        |p| two_layer_loss_and_grad(features, &op, labels, train, p),
        |p| Ok(accuracy(&two_layer_forward(features, &op, p)?, labels, val)),
    )?;
    let logits = two_layer_forward(features, &op, &params)?;
    let scores = evaluate_nodes(&logits, labels, split);
    Ok((params, log, scores))
}
