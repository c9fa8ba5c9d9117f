//! Finite-difference checks of every hand-written gradient on randomized
//! small fixtures.

use rand::Rng;
use serde::Serialize;

use crate::baselines::{two_layer_loss_and_grad, ReferenceModel, TwoLayerParams};
use crate::gnn::{link_loss_and_grad, sage_node_loss, sage_node_loss_and_grad, Propagation, SageParams};
use crate::graph::TextAttributedGraph;
use crate::lm::{lm_loss, lm_loss_and_grad, LmConfig, MiniLmParams};
use crate::numerics::{grad_check, GradCheckOptions, Matrix, RngStream};
use crate::reduction::{ReductionParams, ReductionProblem, ScoreScale};
use crate::sequence::{BridgeSequence, Provenance};
use crate::text::{embed_tokens, EmbeddingTable, SEP};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradModel {
    Reduction,
    Lm,
    Gnn,
    Gcn,
}

impl GradModel {
    pub const ALL: [GradModel; 4] = [Self::Reduction, Self::Lm, Self::Gnn, Self::Gcn];
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSuiteResult {
    pub model: GradModel,
    pub fixtures: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradSuiteResult {
    pub fn all_passed(&self) -> bool {
        self.passed == self.fixtures
    }
}

fn random_graph(rng: &mut RngStream, n: usize, p: f64, num_classes: usize) -> Result<TextAttributedGraph> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    Ok(TextAttributedGraph::new(vec![String::new(); n], labels, num_classes, &edges)?.0)
}

fn random_nodes(rng: &mut RngStream, n: usize) -> Vec<usize> {
    let nodes: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
    if nodes.is_empty() {
        vec![0]
    } else {
        nodes
    }
}

fn random_sequence(rng: &mut RngStream, vocab: usize) -> BridgeSequence {
    let own = rng.random_range(1..=4);
    let others = rng.random_range(0..=4);
    let mut token_ids: Vec<usize> = (0..own).map(|_| rng.random_range(2..vocab)).collect();
    let mut provenance = vec![Provenance::Node(0); own];
    if others > 0 {
        token_ids.push(SEP);
        provenance.push(Provenance::Separator);
        for _ in 0..others {
            token_ids.push(rng.random_range(2..vocab));
            provenance.push(Provenance::Node(1));
        }
    }
    BridgeSequence {
        root: 0,
        token_ids,
        provenance,
    }
}

fn one_fixture(model: GradModel, rng: &mut RngStream, seed: u64) -> Result<(f64, Vec<String>)> {
    let opts = GradCheckOptions::default();
    let report = match model {
        GradModel::Reduction => {
            let n = rng.random_range(2..=6);
            let c = rng.random_range(2..=3);
            let d = rng.random_range(3..=5);
            let dp = rng.random_range(2..=5);
            let g = random_graph(rng, n, 0.5, c)?;
            let table = EmbeddingTable::new(9, d, seed);
            let tokens = (0..n)
                .map(|i| {
                    let len = rng.random_range(1..=5);
                    let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..9)).collect();
                    embed_tokens(i, &ids, &table)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = if rng.random_bool(0.5) {
                ScoreScale::Projected
            } else {
                ScoreScale::Embedding
            };
            let hops = rng.random_range(0..=2);
            let problem = ReductionProblem::new(&g, &tokens, hops, scale)?;
            let params = ReductionParams::init(d, dp, c, 1.0, 0.5, rng);
            let beta = rng.random_range(0.0..1.0);
            let nodes = random_nodes(rng, n);
            let (_, grad) = problem.loss_and_grad(&params, &nodes, beta)?;
            grad_check(
                &params,
                &grad,
                |p| problem.loss(p, &nodes, beta).map_or(f64::NAN, |l| l.total),
                opts,
            )
        }
        GradModel::Lm => {
            let d = 2 * rng.random_range(2..=3);
            let vocab = 8;
            let config = LmConfig {
                dim: d,
                ff_dim: Some(rng.random_range(4..=8)),
                rotary: rng.random_bool(0.5),
                ..LmConfig::default()
            };
            let table = EmbeddingTable::new(vocab, d, seed);
            let params = MiniLmParams::init(&table, 3, &config, seed)?;
            let seqs: Vec<BridgeSequence> = (0..2).map(|_| random_sequence(rng, vocab)).collect();
            let batch: Vec<(&BridgeSequence, usize)> = seqs.iter().map(|s| (s, rng.random_range(0..3))).collect();
            let (_, grad) = lm_loss_and_grad(&params, &batch)?;
            grad_check(
                &params,
                &grad,
                |p| lm_loss(p, &batch).map_or(f64::NAN, |l| l.cross_entropy),
                opts,
            )
        }
        GradModel::Gnn => {
            let n = rng.random_range(3..=7);
            let g = random_graph(rng, n, 0.4, 3)?;
            let op = Propagation::neighbor_mean(&g);
            let h = Matrix::gaussian(n, 3, 1.0, rng);
            if rng.random_bool(0.5) {
                let params = SageParams::init(3, 4, 3, seed);
                let nodes = random_nodes(rng, n);
                let (_, grad) = sage_node_loss_and_grad(&h, &op, g.labels(), &nodes, &params)?;
                grad_check(
                    &params,
                    &grad,
                    |p| sage_node_loss(&h, &op, g.labels(), &nodes, p).unwrap_or(f64::NAN),
                    opts,
                )
            } else {
                let params = SageParams::init(3, 4, 4, seed);
                let pairs = |rng: &mut RngStream| -> Vec<(usize, usize)> {
                    (0..3)
                        .map(|_| {
                            let u = rng.random_range(0..n);
                            (u, (u + rng.random_range(1..n)) % n)
                        })
                        .collect()
                };
                let (pos, neg) = (pairs(rng), pairs(rng));
                let (_, grad) = link_loss_and_grad(&h, &op, &pos, &neg, &params, true)?;
                grad_check(
                    &params,
                    &grad.expect("gradient requested"),
                    |p| link_loss_and_grad(&h, &op, &pos, &neg, p, false).map_or(f64::NAN, |r| r.0),
                    opts,
                )
            }
        }
        GradModel::Gcn => {
            let n = rng.random_range(3..=7);
            let g = random_graph(rng, n, 0.4, 3)?;
            let model = if rng.random_bool(0.5) {
                ReferenceModel::Gcn
            } else {
                ReferenceModel::Mlp
            };
            let op = model.propagation(&g);
            let x = Matrix::gaussian(n, 4, 1.0, rng);
            let params = TwoLayerParams::init(4, 5, 3, seed);
            let nodes = random_nodes(rng, n);
            let (_, grad) = two_layer_loss_and_grad(&x, &op, g.labels(), &nodes, &params)?;
            grad_check(
                &params,
                &grad,
                |p| two_layer_loss_and_grad(&x, &op, g.labels(), &nodes, p).map_or(f64::NAN, |r| r.0),
                opts,
            )
        }
    };
    let failures = report.failures();
    Ok((report.max_rel_err(), failures))
}

/// Checks `fixtures` random instances of `model`, reproducibly from `seed`.
pub fn run_gradient_suite(model: GradModel, fixtures: usize, seed: u64) -> Result<GradSuiteResult> {
    let mut result = GradSuiteResult {
        model,
        fixtures,
        passed: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for f in 0..fixtures {
        let mut rng = RngStream::derive(seed, "gradsuite", (model as u64) << 32 | f as u64);
        let (err, failures) = one_fixture(model, &mut rng, seed.wrapping_add(f as u64))?;
        result.max_rel_err = result.max_rel_err.max(err);
        if failures.is_empty() {
            result.passed += 1;
        } else {
            result
                .failures
                .extend(failures.into_iter().map(|m| format!("fixture {f}: {m}")));
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_model_passes_a_few_fixtures() {
        for model in GradModel::ALL {
            let r = run_gradient_suite(model, 5, 42).unwrap();
            assert!(r.all_passed(), "{model:?}: {:?}", r.failures);
        }
    }
}
