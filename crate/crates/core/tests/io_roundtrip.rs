use std::fs;
use std::path::Path;

use graphbridge::graph::{load_graph, save_graph};
use graphbridge::lm::{plain_sequence, train_lm, LmConfig, MiniLmParams};
use graphbridge::text::{EmbeddingTable, Vocabulary, UNK};

const NODES: &str = r#"{"id":0,"text":"graph neural networks","label":0,"split":"train"}
{"id":1,"text":"language models read text","label":1,"split":"train"}
{"id":2,"text":"","label":0,"split":"val"}
{"id":3,"text":"message passing on graphs","label":0,"split":"test"}
{"id":4,"text":"tokens and attention","label":1,"split":"test"}
"#;

const EDGES: &str = "0 1\n0 3\n1 4\n3 4\n";

fn write_fixture(dir: &Path, nodes: &str, edges: &str) {
    fs::write(dir.join("nodes.jsonl"), nodes).unwrap();
    fs::write(dir.join("edges.txt"), edges).unwrap();
}

fn roundtrip(nodes: &str, edges: &str) {
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    write_fixture(src.path(), nodes, edges);
    let loaded = load_graph(&src.path().join("nodes.jsonl"), &src.path().join("edges.txt"), None).unwrap();
    save_graph(&loaded.graph, &loaded.split, &dst.path().join("nodes.jsonl"), &dst.path().join("edges.txt")).unwrap();
    assert_eq!(fs::read(dst.path().join("nodes.jsonl")).unwrap(), nodes.as_bytes());
    assert_eq!(fs::read(dst.path().join("edges.txt")).unwrap(), edges.as_bytes());
}

#[test]
fn five_node_fixture_is_byte_identical_after_save() {
    roundtrip(NODES, EDGES);
}

#[test]
fn empty_text_survives_as_a_single_unknown_token() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), NODES, EDGES);
    let loaded = load_graph(&dir.path().join("nodes.jsonl"), &dir.path().join("edges.txt"), None).unwrap();
    assert_eq!(loaded.graph.text(2), "");
    let vocab = Vocabulary::build(loaded.graph.texts(), 1);
    assert_eq!(vocab.tokenize(loaded.graph.text(2)), vec![UNK]);
}

#[test]
fn zero_edge_graph_roundtrips() {
    roundtrip(NODES, "");
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), NODES, "");
    let loaded = load_graph(&dir.path().join("nodes.jsonl"), &dir.path().join("edges.txt"), None).unwrap();
    assert_eq!(loaded.graph.num_edges(), 0);
    assert!((0..5).all(|i| loaded.graph.degree(i) == 0));
}

#[test]
fn self_loops_are_dropped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), NODES, "0 1\n2 2\n1 0\n");
    let loaded = load_graph(&dir.path().join("nodes.jsonl"), &dir.path().join("edges.txt"), None).unwrap();
    assert_eq!(loaded.self_loops_dropped, 1);
    assert_eq!(loaded.graph.num_edges(), 1);
}

#[test]
fn malformed_line_reports_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = NODES.replacen(r#""label":1,"split":"train"}"#, r#""label":1,"split":"nowhere"}"#, 1);
    write_fixture(dir.path(), &bad, EDGES);
    let err = load_graph(&dir.path().join("nodes.jsonl"), &dir.path().join("edges.txt"), None).unwrap_err();
    assert!(err.to_string().contains(":2"), "{err}");
}

#[test]
fn frozen_table_is_untouched_by_training() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), NODES, EDGES);
    let loaded = load_graph(&dir.path().join("nodes.jsonl"), &dir.path().join("edges.txt"), None).unwrap();
    let vocab = Vocabulary::build(loaded.graph.texts(), 1);
    let cfg = LmConfig {
        dim: 8,
        epochs: 3,
        batch_size: 2,
        ..LmConfig::default()
    };
    let table = EmbeddingTable::new(vocab.len(), cfg.dim, 5);
    let before = table.checksum();
    let seqs: Vec<_> = (0..5)
        .map(|i| plain_sequence(i, &vocab.tokenize(loaded.graph.text(i))))
        .collect();
    let examples: Vec<_> = [0, 1, 3, 4].iter().map(|&i| (&seqs[i], loaded.graph.label(i))).collect();
    let init = MiniLmParams::init(&table, 2, &cfg, 5).unwrap();
    let (trained, _) = train_lm(&examples, init, &cfg, 5).unwrap();
    assert_ne!(trained.fingerprint(), MiniLmParams::init(&table, 2, &cfg, 5).unwrap().fingerprint());
    assert_eq!(table.checksum(), before);

    let path = dir.path().join("embeddings.bin");
    table.save(&path).unwrap();
    assert_eq!(EmbeddingTable::load(&path, 5).unwrap().checksum(), before);
}
