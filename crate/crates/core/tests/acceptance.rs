//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Heavy; uses the default synthetic configuration throughout.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use graphbridge::baselines::{two_layer_forward, ReducerKind, ReferenceModel, TwoLayerParams};
use graphbridge::gnn::{auc, sage_forward, split_links, Propagation, SageParams};
use graphbridge::gradsuite::{run_gradient_suite, GradModel};
use graphbridge::graph::{SplitKind, SyntheticSpec, TextAttributedGraph};
use graphbridge::numerics::Matrix;
use graphbridge::pipeline::{
    cmd_account, cmd_reference, cmd_run, reduction_stage, run_pipeline, DataSource, ExperimentConfig, MetricsReport,
    Task,
};
use graphbridge::reduction::{message_pass, select_topk};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed < Duration::from_secs(budget_s)
}

type Dense = Vec<Vec<f64>>;

fn dense(m: &Matrix) -> Dense {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn mul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn relu(a: &Dense) -> Dense {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn max_diff(a: &Dense, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), (b.rows(), b.cols()));
    a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (v - b.get(i, j)).abs()))
        .fold(0.0, f64::max)
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> TextAttributedGraph {
    let p = rng.random_range(0.0..0.6);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    TextAttributedGraph::new(vec![String::new(); n], vec![0; n], 1, &edges).unwrap().0
}

fn random_dense(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Dense {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Row-normalized adjacency; `isolated_self` puts a 1 on the diagonal of
/// rows without neighbors instead of leaving them zero.
fn mean_operator(g: &TextAttributedGraph, isolated_self: bool) -> Dense {
    let n = g.num_nodes();
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            let nb = g.neighbors(i);
            if nb.is_empty() && isolated_self {
                row[i] = 1.0;
            }
            for &j in nb {
                row[j] += 1.0 / nb.len() as f64;
            }
            row
        })
        .collect()
}

fn gcn_operator(g: &TextAttributedGraph) -> Dense {
    let n = g.num_nodes();
    let deg: Vec<f64> = (0..n).map(|i| g.degree(i) as f64 + 1.0).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let a = if i == j || g.neighbors(i).contains(&j) { 1.0 } else { 0.0 };
                    a / (deg[i] * deg[j]).sqrt()
                })
                .collect()
        })
        .collect()
}

fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn rank_oracle(scores: &[f64], keep: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&j| {
            let beaten_by = (0..scores.len())
                .filter(|&i| scores[i] > scores[j] || (scores[i] == scores[j] && i < j))
                .count();
            beaten_by < keep
        })
        .collect()
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for model in GradModel::ALL {
        let r = run_gradient_suite(model, 20, 2024).unwrap();
        pass &= r.all_passed() && r.fixtures >= 20;
        parts.push(format!("{model:?} {}/{} (max rel {:.1e})", r.passed, r.fixtures, r.max_rel_err));
        for f in &r.failures {
            parts.push(f.clone());
        }
    }
    let t = start.elapsed();
    Outcome {
        pass: pass && within(t, 60),
        detail: format!("{}; {:.1}s", parts.join(", "), t.as_secs_f64()),
    }
}

fn c2_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let mut mp_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=20);
        let g = random_graph(&mut rng, n);
        let z = random_dense(&mut rng, n, 3);
        let hops = rng.random_range(0..=4);
        let m = mean_operator(&g, true);
        let mut expected = z.clone();
        for _ in 0..hops {
            expected = mul(&m, &expected);
        }
        let got = message_pass(&Matrix::from_rows(&z), &g, hops);
        mp_err = mp_err.max(max_diff(&expected, &got));
    }

    let mut topk_bad = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..=30);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let keep = rng.random_range(0..=len + 2);
        if select_topk(&scores, keep) != rank_oracle(&scores, keep) {
            topk_bad += 1;
        }
    }

    let mut auc_err: f64 = 0.0;
    let mut auc_fixtures = 0;
    for _ in 0..200 {
        let p = rng.random_range(1..=15);
        let q = rng.random_range(1..=15);
        let pos: Vec<f64> = (0..p).map(|_| rng.random_range(0..5) as f64).collect();
        let neg: Vec<f64> = (0..q).map(|_| rng.random_range(0..5) as f64).collect();
        auc_err = auc_err.max((auc(&pos, &neg) - brute_auc(&pos, &neg)).abs());
        auc_fixtures += 1;
    }
    for seed in 0..20 {
        let (g, _) = graphbridge::graph::generate_synthetic(&SyntheticSpec {
            nodes_per_class: 10,
            p_in: 0.3,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let split = split_links(&g, seed).unwrap();
        let z: Vec<f64> = (0..g.num_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let score = |pairs: &[(usize, usize)]| pairs.iter().map(|&(u, v)| z[u] * z[v]).collect::<Vec<f64>>();
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let (pos, neg) = (score(split.positives(kind)), score(split.negatives(kind)));
            auc_err = auc_err.max((auc(&pos, &neg) - brute_auc(&pos, &neg)).abs());
            auc_fixtures += 1;
        }
    }

    let mut fwd_err: f64 = 0.0;
    for t in 0..50 {
        let n = rng.random_range(1..=20);
        let g = random_graph(&mut rng, n);
        let h = random_dense(&mut rng, n, 4);
        let hm = Matrix::from_rows(&h);

        let p = SageParams::init(4, 5, 3, t);
        let m = mean_operator(&g, false);
        let h1 = relu(&add(&mul(&h, &dense(&p.w_self1)), &mul(&mul(&m, &h), &dense(&p.w_neigh1))));
        let z = add(&mul(&h1, &dense(&p.w_self2)), &mul(&mul(&m, &h1), &dense(&p.w_neigh2)));
        let out = sage_forward(&hm, &g, &p).unwrap();
        fwd_err = fwd_err.max(max_diff(&h1, &out.hidden)).max(max_diff(&z, &out.output));

        let q = TwoLayerParams::init(4, 5, 3, t);
        let a = gcn_operator(&g);
        let gz = mul(&mul(&a, &relu(&mul(&mul(&a, &h), &dense(&q.w1)))), &dense(&q.w2));
        let got = two_layer_forward(&hm, &ReferenceModel::Gcn.propagation(&g), &q).unwrap();
        fwd_err = fwd_err.max(max_diff(&gz, &got));
        let mz = mul(&relu(&mul(&h, &dense(&q.w1))), &dense(&q.w2));
        let got = two_layer_forward(&hm, &Propagation::identity(n), &q).unwrap();
        fwd_err = fwd_err.max(max_diff(&mz, &got));
    }

    Outcome {
        pass: mp_err <= 1e-12 && topk_bad == 0 && auc_err <= 1e-12 && fwd_err <= 1e-12,
        detail: format!(
            "message pass {mp_err:.1e} (100 graphs), top-k {topk_bad}/1000 mismatches, AUC {auc_err:.1e} ({auc_fixtures} fixtures), SAGE/GCN/MLP {fwd_err:.1e}"
        ),
    }
}

fn c3_simplex(report: &MetricsReport) -> Outcome {
    let score = report.reduction.max_simplex_error.unwrap_or(f64::INFINITY);
    let attention = report.lm.max_attention_error;
    Outcome {
        pass: score < 1e-9 && attention < 1e-9,
        detail: format!("max |ΣScore−1| {score:.1e}, max |Σattention−1| {attention:.1e}"),
    }
}

fn c4_regularization(base: &ExperimentConfig) -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let mut c = base.reseeded(seed);
        let with = reduction_stage(&c).unwrap().mean_max_score.unwrap();
        c.reduction.beta = 0.0;
        let without = reduction_stage(&c).unwrap().mean_max_score.unwrap();
        let gap = without - with;
        wins += usize::from(gap >= 0.05);
        gaps.push(format!("{gap:.3}"));
    }
    let t = start.elapsed();
    Outcome {
        pass: wins >= 4 && within(t, 300),
        detail: format!("β=0 minus β=0.1 mean max score [{}], {wins}/5 ≥ 0.05; {:.0}s", gaps.join(", "), t.as_secs_f64()),
    }
}

fn designed_config() -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(SyntheticSpec {
            signal_fraction: 0.3,
            noise_vocab_size: 200,
            ..SyntheticSpec::default()
        }),
        ..ExperimentConfig::default()
    }
}

fn c5_ablation(scratch: &Path) -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut acc = Vec::new();
        for reducer in [ReducerKind::Graph, ReducerKind::Random, ReducerKind::Truncate] {
            let mut c = designed_config().reseeded(seed);
            c.reducer = reducer;
            acc.push(run_pipeline(&c, &scratch.join(format!("c5-{reducer}-{seed}"))).unwrap().test_metric());
        }
        wins += usize::from(acc[0] >= acc[1] && acc[0] >= acc[2]);
        rows.push(format!("{:.3}/{:.3}/{:.3}", acc[0], acc[1], acc[2]));
    }
    let t = start.elapsed();
    Outcome {
        pass: wins >= 4 && within(t, 900),
        detail: format!("graph/random/truncate [{}], {wins}/5; {:.0}s", rows.join(", "), t.as_secs_f64()),
    }
}

fn c6_integration(base: &ExperimentConfig, runs: &[(MetricsReport, Duration)]) -> Outcome {
    let start = Instant::now();
    let (mut vs_lm, mut vs_bow) = (0, 0);
    let mut rows = Vec::new();
    for (seed, (report, _)) in SEEDS.iter().zip(runs) {
        let reference = cmd_reference(&base.reseeded(*seed)).unwrap();
        let ours = report.test_metric();
        vs_lm += usize::from(ours >= reference.lm_only.test);
        vs_bow += usize::from(ours >= reference.sage_bow.test);
        rows.push(format!("{ours:.3}/{:.3}/{:.3}", reference.lm_only.test, reference.sage_bow.test));
    }
    let t = start.elapsed() + runs.iter().map(|r| r.1).sum::<Duration>();
    Outcome {
        pass: vs_lm >= 4 && vs_bow >= 4 && within(t, 900),
        detail: format!(
            "pipeline/LM-only/SAGE-BoW [{}], ≥LM {vs_lm}/5, ≥BoW {vs_bow}/5; {:.0}s",
            rows.join(", "),
            t.as_secs_f64()
        ),
    }
}

fn c7_accounting(base: &ExperimentConfig) -> Outcome {
    let start = Instant::now();
    let rows = cmd_account(base, &[8, 16, 32]).unwrap();
    let bounded = rows.iter().all(|r| r.reduced.total_sequence <= r.bound);
    let growing = rows.windows(2).all(|w| w[0].unreduced.total_sequence < w[1].unreduced.total_sequence);
    let mut ratios = Vec::new();
    for k in [50, 100, 200] {
        let mut c = base.clone();
        if let DataSource::Synthetic(spec) = &mut c.data {
            spec.text_length = k;
        }
        ratios.push(cmd_account(&c, &[]).unwrap()[0].ratio);
    }
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let t = start.elapsed();
    Outcome {
        pass: bounded && growing && decreasing && within(t, 120),
        detail: format!(
            "steps 8/16/32 reduced {:?} ≤ bound {:?}, unreduced {:?}; ratio at k=50/100/200 {:.3?}; {:.1}s",
            rows.iter().map(|r| r.reduced.total_sequence).collect::<Vec<_>>(),
            rows.iter().map(|r| r.bound).collect::<Vec<_>>(),
            rows.iter().map(|r| r.unreduced.total_sequence).collect::<Vec<_>>(),
            ratios,
            t.as_secs_f64()
        ),
    }
}

fn c8_links(scratch: &Path) -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut aucs = Vec::new();
    for seed in SEEDS {
        let c = ExperimentConfig {
            task: Task::LinkPrediction,
            data: DataSource::Synthetic(SyntheticSpec {
                p_in: 0.1,
                p_out: 0.005,
                ..SyntheticSpec::default()
            }),
            ..ExperimentConfig::default()
        }
        .reseeded(seed);
        let a = run_pipeline(&c, &scratch.join(format!("c8-{seed}"))).unwrap().test_metric();
        wins += usize::from(a > 0.75);
        aucs.push(format!("{a:.3}"));
    }
    let t = start.elapsed();
    Outcome {
        pass: wins >= 4 && within(t, 600),
        detail: format!("test AUC [{}], {wins}/5 > 0.75; {:.0}s", aucs.join(", "), t.as_secs_f64()),
    }
}

fn c9_determinism(base: &ExperimentConfig, scratch: &Path) -> Outcome {
    let a = cmd_run(base, &scratch.join("c9-a")).unwrap();
    let b = cmd_run(base, &scratch.join("c9-b")).unwrap();
    let same = a.without_timings().to_json().unwrap() == b.without_timings().to_json().unwrap();
    Outcome {
        pass: same,
        detail: format!("test accuracy {:.4} vs {:.4}, reports identical: {same}", a.test_metric(), b.test_metric()),
    }
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().unwrap();
    let base = ExperimentConfig::default();
    let report = |id: &str, name: &str, o: Outcome| {
        println!("{id} {:<22} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        o.pass
    };

    let runs: Vec<(MetricsReport, Duration)> = SEEDS
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let r = run_pipeline(&base.reseeded(seed), &scratch.path().join(format!("default-{seed}"))).unwrap();
            (r, start.elapsed())
        })
        .collect();

    let results = [
        report("C1", "gradient suite", c1_gradients()),
        report("C2", "oracle suite", c2_oracles()),
        report("C3", "simplex invariants", c3_simplex(&runs[0].0)),
        report("C4", "regularization echo", c4_regularization(&base)),
        report("C5", "ablation echo", c5_ablation(scratch.path())),
        report("C6", "integration echo", c6_integration(&base, &runs)),
        report("C7", "token accounting", c7_accounting(&base)),
        report("C8", "link prediction", c8_links(scratch.path())),
        report("C9", "determinism", c9_determinism(&base, scratch.path())),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
