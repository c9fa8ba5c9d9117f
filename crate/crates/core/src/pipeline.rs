//! Staged experiment runs with on-disk artifacts between stages.
//!
//! | stage       | reads                                | writes            |
//! |-------------|--------------------------------------|-------------------|
//! | `data`      | config                               | `nodes.jsonl`, `edges.txt`, `links.json` |
//! | `vocab`     | graph                                | `vocab.jsonl`, `embeddings.bin` |
//! | `reduce`    | `vocab.jsonl`, `embeddings.bin`      | `reduced.jsonl`   |
//! | `sequences` | `reduced.jsonl`                      | `sequences.jsonl` |
//! | `lm`        | `sequences.jsonl`, `embeddings.bin`  | `lm.ckpt`         |
//! | `embed`     | `sequences.jsonl`, `lm.ckpt`         | `H.bin`           |
//! | `gnn`       | `H.bin`                              | `gnn.ckpt`, `metrics.json` |

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{bow_features, gcn_reference, reduce_all, signal_fraction, ReducerKind, ReferenceModel};
use crate::error::{Error, Result};
use crate::gnn::{
    evaluate_links, evaluate_nodes, round4, sage_forward, split_links, train_gnn, train_link_model, GnnConfig,
    LinkPredSplit, SageParams, SplitScores,
};
use crate::graph::{generate_synthetic, load_graph, save_graph, SplitMask, SyntheticSpec, TextAttributedGraph};
use crate::lm::{embed_all, lm_forward, plain_sequence, train_lm, LmConfig, MiniLmParams, NodeEmbeddingMatrix};
use crate::numerics::{Matrix, RngStream, STREAM_INIT};
use crate::reduction::{
    load_reduced, reduce_graph, save_reduced, train_reducer, ReducedText, ReductionConfig, ReductionParams,
    ReductionProblem,
};
use crate::sampler::{sample_all, RwrConfig};
use crate::sequence::{build_all, load_sequences, save_sequences, BridgeSequence, SequenceConfig};
use crate::text::{embed_tokens, EmbeddingTable, TokenId, Vocabulary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files {
        nodes: PathBuf,
        edges: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    NodeClassification,
    LinkPrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub seed: u64,
    pub task: Task,
    pub reducer: ReducerKind,
    /// Width `d` of the frozen token embeddings.
    pub embedding_dim: usize,
    pub min_count: usize,
    pub reduction: ReductionConfig,
    pub sampler: RwrConfig,
    pub sequence: SequenceConfig,
    pub lm: LmConfig,
    pub gnn: GnnConfig,
    /// Training schedule of the bag-of-words reference models.
    pub reference: GnnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            seed: 0,
            task: Task::default(),
            reducer: ReducerKind::default(),
            embedding_dim: 64,
            min_count: 1,
            reduction: ReductionConfig::default(),
            sampler: RwrConfig::default(),
            sequence: SequenceConfig::default(),
            lm: LmConfig::default(),
            gnn: GnnConfig::default(),
            reference: GnnConfig {
                learning_rate: 0.5,
                ..GnnConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be positive"));
        }
        if self.min_count == 0 {
            return Err(Error::invalid("min_count must be at least 1"));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.reduction.validate()?;
        self.sampler.validate()?;
        if self.sequence.max_length == Some(0) {
            return Err(Error::invalid("max_length must be positive"));
        }
        self.lm.validate()?;
        self.gnn.validate()?;
        self.reference.validate()
    }

    /// Reads a JSON config; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Same config under another seed; a synthetic graph is regenerated from
    /// that seed too.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        if let DataSource::Synthetic(spec) = &mut c.data {
            spec.seed = seed;
        }
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenAccounting {
    pub nodes: usize,
    pub mean_original: f64,
    pub max_original: usize,
    pub mean_retained: f64,
    pub max_retained: usize,
    pub mean_sequence: f64,
    pub max_sequence: usize,
    pub total_sequence: usize,
}

impl TokenAccounting {
    pub fn new(docs: &[Vec<TokenId>], reduced: &[ReducedText], sequences: &[BridgeSequence]) -> Self {
        let n = docs.len().max(1) as f64;
        let orig: Vec<usize> = docs.iter().map(Vec::len).collect();
        let kept: Vec<usize> = reduced.iter().map(|r| r.kept_token_ids.len()).collect();
        let lens: Vec<usize> = sequences.iter().map(BridgeSequence::len).collect();
        let total: usize = lens.iter().sum();
        Self {
            nodes: docs.len(),
            mean_original: orig.iter().sum::<usize>() as f64 / n,
            max_original: orig.iter().copied().max().unwrap_or(0),
            mean_retained: kept.iter().sum::<usize>() as f64 / n,
            max_retained: kept.iter().copied().max().unwrap_or(0),
            mean_sequence: total as f64 / n,
            max_sequence: lens.iter().copied().max().unwrap_or(0),
            total_sequence: total,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReductionMetrics {
    pub reducer: ReducerKind,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    /// Mean over all nodes of `max_j Score_ij`.
    pub mean_max_score: Option<f64>,
    pub max_simplex_error: Option<f64>,
    /// Mean fraction of kept tokens that are own-class signal tokens
    /// (synthetic data only).
    pub signal_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmMetrics {
    pub initial_train_ce: f64,
    pub final_train_ce: f64,
    pub max_attention_error: f64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GnnMetrics {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub seed: u64,
    pub task: Task,
    pub reduction: ReductionMetrics,
    pub lm: LmMetrics,
    pub gnn: GnnMetrics,
    pub accuracy: Option<SplitScores>,
    pub auc: Option<SplitScores>,
    pub tokens: TokenAccounting,
    pub config: ExperimentConfig,
    /// Wall-clock seconds per stage; the only non-reproducible field.
    pub timings: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// Test accuracy for node classification, test AUC for link prediction.
    pub fn test_metric(&self) -> f64 {
        self.accuracy.or(self.auc).map_or(f64::NAN, |s| s.test)
    }

    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn timed<T>(
    timings: &mut BTreeMap<String, f64>,
    stage: &'static str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
    if out.is_ok() {
        log::info!("stage {stage} done in {:.2}s", timings[stage]);
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads or generates the graph named by the config.
pub fn load_data(config: &ExperimentConfig) -> Result<(TextAttributedGraph, SplitMask)> {
    match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Files {
            nodes,
            edges,
            num_classes,
        } => {
            for p in [nodes, edges] {
                if !p.exists() {
                    return Err(Error::invalid(format!("data file {} does not exist", p.display())));
                }
            }
            load_graph(nodes, edges, *num_classes).map(|l| (l.graph, l.split))
        }
    }
}

fn tokenize_all(graph: &TextAttributedGraph, vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    graph.texts().iter().map(|t| vocab.tokenize(t)).collect()
}

struct Reduction {
    reduced: Vec<ReducedText>,
    metrics: ReductionMetrics,
}

fn run_reduction(
    config: &ExperimentConfig,
    graph: &TextAttributedGraph,
    split: &SplitMask,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    docs: &[Vec<TokenId>],
) -> Result<Reduction> {
    let keep = config.reduction.keep;
    let mut metrics = ReductionMetrics {
        reducer: config.reducer,
        ..Default::default()
    };
    let reduced = if config.reducer == ReducerKind::Graph {
        let tokens = docs
            .iter()
            .enumerate()
            .map(|(i, ids)| embed_tokens(i, ids, table))
            .collect::<Result<Vec<_>>>()?;
        let problem = ReductionProblem::new(graph, &tokens, config.reduction.hops, config.reduction.scale)?;
        let mut rng = RngStream::derive(config.seed, STREAM_INIT, 4);
        let init = ReductionParams::from_config(table.dim(), graph.num_classes(), &config.reduction, &mut rng);
        let (params, log) = train_reducer(&problem, split, init, &config.reduction)?;
        let all: Vec<usize> = (0..graph.num_nodes()).collect();
        let reduced = reduce_graph(&problem, &params, keep);
        let simplex = reduced
            .iter()
            .map(|r| (r.scores.iter().sum::<f64>() - 1.0).abs())
            .fold(log.max_simplex_error, f64::max);
        metrics.initial_train_loss = Some(log.initial_train_loss);
        metrics.final_train_loss = Some(log.final_train_loss());
        metrics.best_epoch = Some(log.best_epoch);
        metrics.epochs_run = Some(log.epochs.len());
        metrics.mean_max_score = Some(problem.mean_max_score(&params, &all));
        metrics.max_simplex_error = Some(simplex);
        reduced
    } else {
        reduce_all(config.reducer, docs, keep, config.seed)?
    };
    if matches!(config.data, DataSource::Synthetic(_)) {
        metrics.signal_fraction = Some(signal_fraction(&reduced, graph.labels(), vocab));
    }
    Ok(Reduction { reduced, metrics })
}

/// Runs only the data, vocabulary and reduction stages, in memory.
pub fn reduction_stage(config: &ExperimentConfig) -> Result<ReductionMetrics> {
    config.validate()?;
    let (graph, split) = load_data(config)?;
    let work = match config.task {
        Task::NodeClassification => graph.clone(),
        Task::LinkPrediction => split_links(&graph, config.seed)?.restricted_graph(&graph)?,
    };
    let vocab = Vocabulary::build(graph.texts(), config.min_count);
    let table = EmbeddingTable::new(vocab.len(), config.embedding_dim, config.seed);
    let docs = tokenize_all(&graph, &vocab);
    Ok(run_reduction(config, &work, &split, &vocab, &table, &docs)?.metrics)
}

fn labeled_examples<'a>(sequences: &'a [BridgeSequence], graph: &TextAttributedGraph, split: &SplitMask) -> Vec<(&'a BridgeSequence, usize)> {
    split.train().iter().map(|&i| (&sequences[i], graph.label(i))).collect()
}

/// Runs every stage into `dir` and writes `metrics.json` there.
pub fn run_pipeline(config: &ExperimentConfig, dir: &Path) -> Result<MetricsReport> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut timings = BTreeMap::new();
    let seed = config.seed;
    let path = |name: &str| dir.join(name);

    let (graph, split, links) = timed(&mut timings, "data", || {
        let (graph, split) = load_data(config)?;
        save_graph(&graph, &split, &path("nodes.jsonl"), &path("edges.txt"))?;
        let links = match config.task {
            Task::NodeClassification => None,
            Task::LinkPrediction => {
                let s = split_links(&graph, seed)?;
                write_json(&path("links.json"), &s)?;
                Some(s)
            }
        };
        Ok((graph, split, links))
    })?;
    // Link prediction never lets held-out edges into any stage.
    let work = match &links {
        Some(s) => s.restricted_graph(&graph)?,
        None => graph.clone(),
    };

    timed(&mut timings, "vocab", || {
        let vocab = Vocabulary::build(graph.texts(), config.min_count);
        vocab.save(&path("vocab.jsonl"))?;
        EmbeddingTable::new(vocab.len(), config.embedding_dim, seed).save(&path("embeddings.bin"))
    })?;

    let (docs, reduction) = timed(&mut timings, "reduce", || {
        let vocab = Vocabulary::load(&path("vocab.jsonl"))?;
        let table = EmbeddingTable::load(&path("embeddings.bin"), seed)?;
        let docs = tokenize_all(&graph, &vocab);
        let r = run_reduction(config, &work, &split, &vocab, &table, &docs)?;
        save_reduced(&path("reduced.jsonl"), &r.reduced)?;
        Ok((docs, r.metrics))
    })?;

    timed(&mut timings, "sequences", || {
        let reduced = load_reduced(&path("reduced.jsonl"))?;
        let samples = sample_all(&work, &config.sampler, seed);
        save_sequences(&path("sequences.jsonl"), &build_all(&reduced, &samples, &config.sequence)?)
    })?;

    let lm = timed(&mut timings, "lm", || {
        let sequences = load_sequences(&path("sequences.jsonl"))?;
        let table = EmbeddingTable::load(&path("embeddings.bin"), seed)?;
        let init = MiniLmParams::init(&table, graph.num_classes(), &config.lm, seed)?;
        let (params, log) = train_lm(&labeled_examples(&sequences, &graph, &split), init, &config.lm, seed)?;
        params.save(&path("lm.ckpt"))?;
        Ok(LmMetrics {
            initial_train_ce: log.initial_train_ce,
            final_train_ce: log.final_train_ce,
            max_attention_error: log.max_attention_error,
            checkpoint: params.fingerprint(),
        })
    })?;

    timed(&mut timings, "embed", || {
        let sequences = load_sequences(&path("sequences.jsonl"))?;
        let params = MiniLmParams::load(&path("lm.ckpt"), config.lm.positions())?;
        embed_all(&sequences, &params)?.save(&path("H.bin"))
    })?;

    let (gnn, accuracy, auc) = timed(&mut timings, "gnn", || {
        let h = NodeEmbeddingMatrix::load(&path("H.bin"))?.embeddings;
        run_gnn_stage(config, &h, &work, &split, links.as_ref(), dir)
    })?;

    let tokens = TokenAccounting::new(
        &docs,
        &load_reduced(&path("reduced.jsonl"))?,
        &load_sequences(&path("sequences.jsonl"))?,
    );
    let report = MetricsReport {
        schema: SCHEMA_VERSION,
        seed,
        task: config.task,
        reduction,
        lm,
        gnn,
        accuracy,
        auc,
        tokens,
        config: config.clone(),
        timings,
    };
    write_json(&path("metrics.json"), &report)?;
    Ok(report)
}

type GnnStage = (GnnMetrics, Option<SplitScores>, Option<SplitScores>);

/// Trains and evaluates the graph model from a node-embedding matrix alone.
pub fn run_gnn_stage(
    config: &ExperimentConfig,
    h: &Matrix,
    work: &TextAttributedGraph,
    split: &SplitMask,
    links: Option<&LinkPredSplit>,
    dir: &Path,
) -> Result<GnnStage> {
    let (params, log, accuracy, auc) = match links {
        None => {
            let (params, log) = train_gnn(h, work, split, &config.gnn, config.seed)?;
            let logits = sage_forward(h, work, &params)?.output;
            let acc = evaluate_nodes(&logits, work.labels(), split);
            (params, log, Some(acc), None)
        }
        Some(s) => {
            let (params, log) = train_link_model(h, work, s, &config.gnn, config.seed)?;
            let auc = evaluate_links(&params, h, work, s)?;
            (params, log, None, Some(auc))
        }
    };
    params.save(&dir.join("gnn.ckpt"))?;
    let metrics = GnnMetrics {
        initial_train_loss: log.initial_train_loss,
        final_train_loss: log.final_train_loss(),
        best_epoch: log.best_epoch,
        best_val_metric: log.best_val_metric,
        epochs_run: log.epochs.len(),
    };
    Ok((metrics, accuracy, auc))
}

#[derive(Serialize, Deserialize)]
struct RunIndexEntry {
    dir: String,
    seed: u64,
    task: Task,
    reducer: ReducerKind,
    test: f64,
}

/// Appends one line per finished run to `index_dir/runs.jsonl`.
pub fn append_run_index(index_dir: &Path, run_dir: &Path, report: &MetricsReport) -> Result<()> {
    let path = index_dir.join("runs.jsonl");
    let entry = RunIndexEntry {
        dir: run_dir.display().to_string(),
        seed: report.seed,
        task: report.task,
        reducer: report.reduction.reducer,
        test: report.test_metric(),
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&path, e))
}

pub fn cmd_run(config: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let report = run_pipeline(config, out)?;
    append_run_index(out, out, &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    WalkSteps,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::WalkSteps => "walk-steps",
            Self::Beta => "beta",
        }
    }

    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        match self {
            Self::WalkSteps => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::invalid(format!("walk-steps must be a non-negative integer, got {value}")));
                }
                c.sampler.walk_steps = value as usize;
            }
            Self::Beta => c.reduction.beta = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk-steps" => Ok(Self::WalkSteps),
            "beta" => Ok(Self::Beta),
            _ => Err(Error::invalid(format!("unknown sweep parameter `{s}` (walk-steps|beta)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub test: f64,
    pub mean_max_score: Option<f64>,
    pub mean_sequence: f64,
    pub report: MetricsReport,
}

/// One full run per value under `out/<param>=<value>/`; the table goes to
/// `out/sweep.json`.
pub fn cmd_sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let c = param.apply(config, value)?;
        let dir = out.join(format!("{}={value}", param.name()));
        let report = run_pipeline(&c, &dir)?;
        append_run_index(out, &dir, &report)?;
        rows.push(SweepRow {
            value,
            test: report.test_metric(),
            mean_max_score: report.reduction.mean_max_score,
            mean_sequence: report.tokens.mean_sequence,
            report,
        });
    }
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub reducer: ReducerKind,
    pub seeds: Vec<u64>,
    pub test: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Every reducer under every seed; the table goes to `out/ablation.json`.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    reducers: &[ReducerKind],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() || reducers.is_empty() {
        return Err(Error::invalid("ablation needs at least one reducer and one seed"));
    }
    let mut rows = Vec::new();
    for &reducer in reducers {
        let mut test = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = config.reseeded(seed);
            c.reducer = reducer;
            let dir = out.join(format!("{reducer}-seed{seed}"));
            let report = run_pipeline(&c, &dir)?;
            append_run_index(out, &dir, &report)?;
            test.push(report.test_metric());
        }
        let (mean, std) = mean_std(&test);
        rows.push(AblationRow {
            reducer,
            seeds: seeds.to_vec(),
            test,
            mean: round4(mean),
            std: round4(std),
        });
    }
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPredRow {
    pub seed: u64,
    pub auc: SplitScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPredTable {
    pub rows: Vec<LinkPredRow>,
    pub mean_test: f64,
    pub std_test: f64,
}

pub fn cmd_linkpred(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<LinkPredTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("link prediction needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = config.reseeded(seed);
        c.task = Task::LinkPrediction;
        let dir = out.join(format!("linkpred-seed{seed}"));
        let report = run_pipeline(&c, &dir)?;
        append_run_index(out, &dir, &report)?;
        rows.push(LinkPredRow {
            seed,
            auc: report.auc.expect("link task reports AUC"),
        });
    }
    let tests: Vec<f64> = rows.iter().map(|r| r.auc.test).collect();
    let (mean, std) = mean_std(&tests);
    let table = LinkPredTable {
        rows,
        mean_test: round4(mean),
        std_test: round4(std),
    };
    write_json(&out.join("linkpred.json"), &table)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountRow {
    pub walk_steps: usize,
    pub keep: usize,
    pub reduced: TokenAccounting,
    pub unreduced: TokenAccounting,
    /// `Σ L_i` reduced over `Σ L_i` unreduced.
    pub ratio: f64,
    /// `n·(k′·(1 + steps) + 1)`
    pub bound: usize,
}

/// Sequence-length accounting with and without reduction, before any
/// length cap. Retained counts are `min(k′, k_i)` for every reducer, so no
/// model is trained.
pub fn cmd_account(config: &ExperimentConfig, walk_steps: &[usize]) -> Result<Vec<AccountRow>> {
    config.validate()?;
    let (graph, _) = load_data(config)?;
    let vocab = Vocabulary::build(graph.texts(), config.min_count);
    let docs = tokenize_all(&graph, &vocab);
    let keep = config.reduction.keep;
    let reduced = reduce_all(ReducerKind::Truncate, &docs, keep, config.seed)?;
    let full = reduce_all(ReducerKind::Truncate, &docs, usize::MAX, config.seed)?;
    let uncapped = SequenceConfig {
        max_length: None,
        ..config.sequence.clone()
    };
    let steps: Vec<usize> = if walk_steps.is_empty() {
        vec![config.sampler.walk_steps]
    } else {
        walk_steps.to_vec()
    };
    steps
        .into_iter()
        .map(|s| {
            let sampler = RwrConfig {
                walk_steps: s,
                ..config.sampler.clone()
            };
            let samples = sample_all(&graph, &sampler, config.seed);
            let r = TokenAccounting::new(&docs, &reduced, &build_all(&reduced, &samples, &uncapped)?);
            let u = TokenAccounting::new(&docs, &full, &build_all(&full, &samples, &uncapped)?);
            Ok(AccountRow {
                walk_steps: s,
                keep,
                ratio: r.total_sequence as f64 / u.total_sequence.max(1) as f64,
                bound: graph.num_nodes() * (keep * (1 + s) + 1),
                reduced: r,
                unreduced: u,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub seed: u64,
    /// The encoder alone on each node's full own text.
    pub lm_only: SplitScores,
    pub sage_bow: SplitScores,
    pub gcn_bow: SplitScores,
    pub mlp_bow: SplitScores,
}

/// Encoder-only classification on unreduced own text.
pub fn lm_only(config: &ExperimentConfig, graph: &TextAttributedGraph, split: &SplitMask) -> Result<SplitScores> {
    let vocab = Vocabulary::build(graph.texts(), config.min_count);
    let table = EmbeddingTable::new(vocab.len(), config.embedding_dim, config.seed);
    let cap = config.sequence.max_length.unwrap_or(usize::MAX);
    let sequences: Vec<BridgeSequence> = tokenize_all(graph, &vocab)
        .iter()
        .enumerate()
        .map(|(i, ids)| plain_sequence(i, &ids[..ids.len().min(cap)]))
        .collect();
    let init = MiniLmParams::init(&table, graph.num_classes(), &config.lm, config.seed)?;
    let (params, _) = train_lm(&labeled_examples(&sequences, graph, split), init, &config.lm, config.seed)?;
    let mut logits = Matrix::zeros(graph.num_nodes(), graph.num_classes());
    for (i, s) in sequences.iter().enumerate() {
        logits.row_mut(i).copy_from_slice(&lm_forward(s, &params)?.logits);
    }
    Ok(evaluate_nodes(&logits, graph.labels(), split))
}

/// SAGE trained on row-normalized bag-of-words counts.
pub fn sage_on_features(config: &ExperimentConfig, features: &Matrix, graph: &TextAttributedGraph, split: &SplitMask) -> Result<SplitScores> {
    let (params, _) = train_gnn(features, graph, split, &config.reference, config.seed)?;
    let logits = sage_forward(features, graph, &params)?.output;
    Ok(evaluate_nodes(&logits, graph.labels(), split))
}

/// Reference models for node classification on the configured graph.
pub fn cmd_reference(config: &ExperimentConfig) -> Result<ReferenceReport> {
    config.validate()?;
    if config.task != Task::NodeClassification {
        return Err(Error::invalid("reference models cover node classification only"));
    }
    let (graph, split) = load_data(config)?;
    let vocab = Vocabulary::build(graph.texts(), config.min_count);
    let bow = bow_features(&graph, &vocab).to_dense_frequencies();
    let reference = |model| gcn_reference(model, &bow, &graph, &split, &config.reference, config.seed).map(|r| r.2);
    Ok(ReferenceReport {
        seed: config.seed,
        lm_only: lm_only(config, &graph, &split).map_err(|e| e.in_stage("lm-only"))?,
        sage_bow: sage_on_features(config, &bow, &graph, &split).map_err(|e| e.in_stage("sage-bow"))?,
        gcn_bow: reference(ReferenceModel::Gcn).map_err(|e| e.in_stage("gcn-bow"))?,
        mlp_bow: reference(ReferenceModel::Mlp).map_err(|e| e.in_stage("mlp-bow"))?,
    })
}

/// Retrains the graph model from a saved run directory's `H.bin`.
pub fn rerun_gnn_from_dir(config: &ExperimentConfig, dir: &Path) -> Result<(SageParams, Option<SplitScores>)> {
    let (graph, split) = load_data(config)?;
    let h = NodeEmbeddingMatrix::load(&dir.join("H.bin"))?.embeddings;
    let (params, _) = train_gnn(&h, &graph, &split, &config.gnn, config.seed)?;
    let logits = sage_forward(&h, &graph, &params)?.output;
    Ok((params, Some(evaluate_nodes(&logits, graph.labels(), &split))))
}
