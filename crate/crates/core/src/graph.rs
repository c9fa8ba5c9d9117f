//! Text-attributed graphs: data model, file I/O, splits and a planted-partition
//! synthetic generator.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, STREAM_SYNTH};

/// Undirected graph whose nodes carry a text and a class label.
///
/// Node ids are dense `0..n`. Adjacency is stored as sorted, symmetric
/// neighbor lists without self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TextAttributedGraph {
    texts: Vec<String>,
    labels: Vec<usize>,
    num_classes: usize,
    neighbors: Vec<Vec<usize>>,
}

impl TextAttributedGraph {
    /// Builds a graph from an unordered edge list. Duplicate edges are merged;
    /// self-loops are dropped and counted in the second tuple element.
    pub fn new(
        texts: Vec<String>,
        labels: Vec<usize>,
        num_classes: usize,
        edges: &[(usize, usize)],
    ) -> Result<(Self, usize)> {
        let n = texts.len();
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "{} texts but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::invalid(format!(
                "node {i} has label {y} but there are {num_classes} classes"
            )));
        }
        let mut sets = vec![BTreeSet::new(); n];
        let mut self_loops = 0;
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u}, {v}) outside 0..{n}")));
            }
            if u == v {
                self_loops += 1;
                continue;
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok((
            Self {
                texts,
                labels,
                num_classes,
                neighbors,
            },
            self_loops,
        ))
    }

    pub fn num_nodes(&self) -> usize {
        self.texts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(min, max)`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Same nodes, texts and labels with a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            self.texts.clone(),
            self.labels.clone(),
            self.num_classes,
            edges,
        )
        .map(|(g, _)| g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Disjoint train/val/test node sets, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMask {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl SplitMask {
    pub fn new(
        mut train: Vec<usize>,
        mut val: Vec<usize>,
        mut test: Vec<usize>,
        num_nodes: usize,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("train split is empty"));
        }
        let mut seen = vec![false; num_nodes];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= num_nodes {
                return Err(Error::invalid(format!("split node {i} outside 0..{num_nodes}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("node {i} appears in more than one split")));
            }
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Self { train, val, test })
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn val(&self) -> &[usize] {
        &self.val
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn kind_of(&self, node: usize) -> Option<SplitKind> {
        [SplitKind::Train, SplitKind::Val, SplitKind::Test]
            .into_iter()
            .find(|&k| self.get(k).binary_search(&node).is_ok())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: usize,
    text: String,
    label: usize,
    split: SplitKind,
}

#[derive(Debug)]
pub struct LoadedGraph {
    pub graph: TextAttributedGraph,
    pub split: SplitMask,
    pub self_loops_dropped: usize,
}

/// Reads a JSON Lines nodes file and a whitespace-separated edges file.
///
/// `num_classes` defaults to one more than the largest label.
pub fn load_graph(
    nodes_path: &Path,
    edges_path: &Path,
    num_classes: Option<usize>,
) -> Result<LoadedGraph> {
    let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let file = File::open(nodes_path).map_err(|e| Error::io(nodes_path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(nodes_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(nodes_path, lineno + 1, e.to_string()))?;
        records.push((lineno + 1, rec));
    }

    let n = records.len();
    let num_classes =
        num_classes.unwrap_or_else(|| records.iter().map(|(_, r)| r.label + 1).max().unwrap_or(0));
    let mut texts = vec![None; n];
    let mut labels = vec![0; n];
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (lineno, rec) in records {
        if rec.id >= n {
            return Err(parse_err(
                nodes_path,
                lineno,
                format!("node id {} is not dense in 0..{n}", rec.id),
            ));
        }
        if texts[rec.id].is_some() {
            return Err(parse_err(nodes_path, lineno, format!("duplicate node id {}", rec.id)));
        }
        if rec.label >= num_classes {
            return Err(parse_err(
                nodes_path,
                lineno,
                format!("label {} is not below class count {num_classes}", rec.label),
            ));
        }
        texts[rec.id] = Some(rec.text);
        labels[rec.id] = rec.label;
        match rec.split {
            SplitKind::Train => train.push(rec.id),
            SplitKind::Val => val.push(rec.id),
            SplitKind::Test => test.push(rec.id),
        }
    }
    let texts: Vec<String> = texts.into_iter().map(Option::unwrap_or_default).collect();

    let file = File::open(edges_path).map_err(|e| Error::io(edges_path, e))?;
    let mut edges = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(edges_path, e))?;
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(edges_path, lineno + 1, "expected `src dst`".into()));
        };
        if parts.next().is_some() {
            return Err(parse_err(edges_path, lineno + 1, "trailing fields".into()));
        }
        let parse = |s: &str| -> Result<usize> {
            let v: usize = s
                .parse()
                .map_err(|_| parse_err(edges_path, lineno + 1, format!("bad node id `{s}`")))?;
            if v >= n {
                return Err(parse_err(edges_path, lineno + 1, format!("node id {v} outside 0..{n}")));
            }
            Ok(v)
        };
        edges.push((parse(a)?, parse(b)?));
    }

    let (graph, self_loops_dropped) = TextAttributedGraph::new(texts, labels, num_classes, &edges)?;
    if self_loops_dropped > 0 {
        log::warn!(
            "dropped {self_loops_dropped} self-loop(s) from {}",
            edges_path.display()
        );
    }
    let split = SplitMask::new(train, val, test, n)?;
    Ok(LoadedGraph {
        graph,
        split,
        self_loops_dropped,
    })
}

/// Writes the inverse of [`load_graph`]. Every node must belong to a split.
pub fn save_graph(
    graph: &TextAttributedGraph,
    split: &SplitMask,
    nodes_path: &Path,
    edges_path: &Path,
) -> Result<()> {
    let file = File::create(nodes_path).map_err(|e| Error::io(nodes_path, e))?;
    let mut out = BufWriter::new(file);
    for i in 0..graph.num_nodes() {
        let split = split
            .kind_of(i)
            .ok_or_else(|| Error::invalid(format!("node {i} is not assigned to a split")))?;
        let rec = NodeRecord {
            id: i,
            text: graph.text(i).to_owned(),
            label: graph.label(i),
            split,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(nodes_path, e))?;
    }
    out.flush().map_err(|e| Error::io(nodes_path, e))?;

    let file = File::create(edges_path).map_err(|e| Error::io(edges_path, e))?;
    let mut out = BufWriter::new(file);
    for (u, v) in graph.edges() {
        writeln!(out, "{u} {v}").map_err(|e| Error::io(edges_path, e))?;
    }
    out.flush().map_err(|e| Error::io(edges_path, e))
}

/// Parameters of the planted-partition text-attributed graph generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Distinct signal tokens owned by each class.
    pub signal_vocab_size: usize,
    /// Distinct noise tokens shared by all classes.
    pub noise_vocab_size: usize,
    /// Tokens per node text.
    pub text_length: usize,
    /// Fraction of each text drawn from the node's class vocabulary.
    pub signal_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            nodes_per_class: 50,
            p_in: 0.1,
            p_out: 0.01,
            signal_vocab_size: 60,
            noise_vocab_size: 200,
            text_length: 100,
            signal_fraction: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.num_classes == 0 || self.nodes_per_class == 0 {
            return bad("need at least one class and one node per class");
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return bad("edge probabilities must lie in [0, 1]");
        }
        if self.p_in <= self.p_out {
            return bad("p_in must exceed p_out");
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction < 1.0) {
            return bad("signal fraction must lie in (0, 1)");
        }
        if self.text_length < 2 {
            return bad("text length must be at least 2");
        }
        if self.signal_vocab_size == 0 || self.noise_vocab_size == 0 {
            return bad("vocabularies must be non-empty");
        }
        Ok(())
    }

    pub fn num_signal_tokens(&self) -> usize {
        (self.signal_fraction * self.text_length as f64).ceil() as usize
    }

    pub fn signal_token(class: usize, j: usize) -> String {
        format!("c{class}s{j}")
    }

    pub fn noise_token(j: usize) -> String {
        format!("n{j}")
    }

    /// The class owning a generated signal token, or `None` for anything else.
    pub fn signal_class(token: &str) -> Option<usize> {
        let rest = token.strip_prefix('c')?;
        let (class, j) = rest.split_once('s')?;
        j.parse::<usize>().ok()?;
        class.parse().ok()
    }

    /// Expected fraction of generated edges that join same-class nodes.
    pub fn expected_intra_fraction(&self) -> f64 {
        let m = self.nodes_per_class as f64;
        let c = self.num_classes as f64;
        let intra = c * m * (m - 1.0) / 2.0 * self.p_in;
        let inter = c * (c - 1.0) / 2.0 * m * m * self.p_out;
        intra / (intra + inter)
    }
}

/// Samples a graph and stratified 60/20/20 split from `spec`.
///
/// Nodes `c·m .. (c+1)·m` belong to class `c`. Each text holds
/// `⌈ρ·k⌉` class-signal tokens and `k − ⌈ρ·k⌉` shared noise tokens in
/// random order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TextAttributedGraph, SplitMask)> {
    spec.validate()?;
    let n = spec.num_classes * spec.nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.nodes_per_class).collect();

    let mut rng = RngStream::derive(spec.seed, STREAM_SYNTH, 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut rng = RngStream::derive(spec.seed, STREAM_SYNTH, 1);
    let n_signal = spec.num_signal_tokens().min(spec.text_length);
    let texts = labels
        .iter()
        .map(|&class| {
            let mut tokens: Vec<String> = (0..spec.text_length)
                .map(|t| {
                    if t < n_signal {
                        SyntheticSpec::signal_token(class, rng.random_range(0..spec.signal_vocab_size))
                    } else {
                        SyntheticSpec::noise_token(rng.random_range(0..spec.noise_vocab_size))
                    }
                })
                .collect();
            tokens.shuffle(&mut rng);
            tokens.join(" ")
        })
        .collect();

    let mut rng = RngStream::derive(spec.seed, STREAM_SYNTH, 2);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..spec.num_classes {
        let mut members: Vec<usize> =
            (class * spec.nodes_per_class..(class + 1) * spec.nodes_per_class).collect();
        members.shuffle(&mut rng);
        let m = members.len() as f64;
        let n_train = ((0.6 * m).round() as usize).max(1);
        let n_val = ((0.2 * m).round() as usize).min(members.len() - n_train);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }

    let (graph, _) = TextAttributedGraph::new(texts, labels, spec.num_classes, &edges)?;
    let split = SplitMask::new(train, val, test, n)?;
    Ok((graph, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(edges: &[(usize, usize)]) -> (TextAttributedGraph, usize) {
        TextAttributedGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![0, 1, 0, 1],
            2,
            edges,
        )
        .unwrap()
    }

    #[test]
    fn adjacency_is_symmetric_deduplicated_and_loop_free() {
        let (g, loops) = tiny(&[(0, 1), (1, 0), (2, 2), (3, 1), (0, 1)]);
        assert_eq!(loops, 1);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 3]);
        assert_eq!(g.neighbors(2), &[] as &[usize]);
        assert_eq!(g.edges(), vec![(0, 1), (1, 3)]);
        assert_eq!(g.num_edges(), 2);
        assert!(g.has_edge(3, 1) && !g.has_edge(0, 3));
    }

    #[test]
    fn rejects_labels_outside_class_range() {
        let r = TextAttributedGraph::new(vec!["x".into()], vec![2], 2, &[]);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_must_be_disjoint_with_nonempty_train() {
        assert!(SplitMask::new(vec![], vec![0], vec![1], 2).is_err());
        assert!(SplitMask::new(vec![0], vec![0], vec![1], 2).is_err());
        assert!(SplitMask::new(vec![0], vec![], vec![5], 2).is_err());
        let s = SplitMask::new(vec![1, 0], vec![], vec![2], 3).unwrap();
        assert_eq!(s.train(), &[0, 1]);
        assert_eq!(s.kind_of(2), Some(SplitKind::Test));
    }

    #[test]
    fn spec_validation() {
        let ok = SyntheticSpec::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SyntheticSpec { p_in: 0.01, p_out: 0.1, ..ok.clone() },
            SyntheticSpec { signal_fraction: 1.0, ..ok.clone() },
            SyntheticSpec { signal_fraction: 0.0, ..ok.clone() },
            SyntheticSpec { text_length: 1, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn signal_token_names_round_trip() {
        assert_eq!(SyntheticSpec::signal_class(&SyntheticSpec::signal_token(3, 17)), Some(3));
        assert_eq!(SyntheticSpec::signal_class(&SyntheticSpec::noise_token(3)), None);
        assert_eq!(SyntheticSpec::signal_class("cats"), None);
    }

    #[test]
    fn zero_p_out_gives_only_intra_class_edges() {
        let spec = SyntheticSpec {
            p_out: 0.0,
            nodes_per_class: 15,
            ..Default::default()
        };
        let (g, _) = generate_synthetic(&spec).unwrap();
        assert!(g.num_edges() > 0);
        assert!(g.edges().iter().all(|&(u, v)| g.label(u) == g.label(v)));
    }

    #[test]
    fn near_one_signal_fraction_fills_text_with_signal() {
        let spec = SyntheticSpec {
            signal_fraction: 0.99,
            text_length: 100,
            nodes_per_class: 5,
            ..Default::default()
        };
        let (g, _) = generate_synthetic(&spec).unwrap();
        for i in 0..g.num_nodes() {
            let signal = g
                .text(i)
                .split(' ')
                .filter(|t| SyntheticSpec::signal_class(t) == Some(g.label(i)))
                .count();
            assert!(signal >= 99, "node {i}: {signal}");
            assert_eq!(g.text(i).split(' ').count(), 100);
        }
    }

    #[test]
    fn intra_class_fraction_matches_expectation() {
        let spec = SyntheticSpec {
            num_classes: 4,
            nodes_per_class: 50,
            p_in: 0.1,
            p_out: 0.01,
            seed: 7,
            ..Default::default()
        };
        // 490 expected intra edges vs 150 inter edges
        assert!((spec.expected_intra_fraction() - 490.0 / 640.0).abs() < 1e-12);
        let (g, _) = generate_synthetic(&spec).unwrap();
        let edges = g.edges();
        let intra = edges.iter().filter(|&&(u, v)| g.label(u) == g.label(v)).count();
        let frac = intra as f64 / edges.len() as f64;
        assert!((frac - spec.expected_intra_fraction()).abs() < 0.05, "{frac}");
    }

    #[test]
    fn generation_is_seed_determined() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.0.edges(), c.0.edges());
    }

    #[test]
    fn split_is_stratified_60_20_20() {
        let spec = SyntheticSpec {
            nodes_per_class: 37,
            ..Default::default()
        };
        let (g, split) = generate_synthetic(&spec).unwrap();
        assert_eq!(split.train().len() + split.val().len() + split.test().len(), g.num_nodes());
        for class in 0..spec.num_classes {
            let in_train = split.train().iter().filter(|&&i| g.label(i) == class).count();
            assert!((in_train as f64 - 0.6 * 37.0).abs() <= 1.0);
        }
    }
}
