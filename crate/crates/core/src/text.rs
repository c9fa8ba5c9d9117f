//! Word-level tokenizer, vocabulary and the frozen token-embedding table.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, STREAM_INIT};
use crate::raw::{RawReader, RawWriter};

pub type TokenId = usize;

pub const UNK: TokenId = 0;
pub const SEP: TokenId = 1;
pub const UNK_TOKEN: &str = "[UNK]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Lowercased maximal runs of alphanumeric characters. Whitespace and
/// punctuation act as boundaries and are dropped.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    token: String,
    id: TokenId,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Tokens with frequency ≥ `min_count`, ordered by descending frequency
    /// then ascending token text, after the two reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for w in split_words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [UNK_TOKEN.to_owned(), SEP_TOKEN.to_owned()]
            .into_iter()
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("counted tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text`; unknown words map to `[UNK]` and an empty result
    /// becomes a single `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let ids: Vec<TokenId> = split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    /// Space-joined token strings.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (id, token) in self.tokens.iter().enumerate() {
            serde_json::to_writer(
                &mut out,
                &VocabRecord {
                    token: token.clone(),
                    id,
                },
            )?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VocabRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if rec.id != tokens.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected id {}, found {}", tokens.len(), rec.id),
                });
            }
            tokens.push(rec.token);
        }
        if tokens.get(UNK).map(String::as_str) != Some(UNK_TOKEN)
            || tokens.get(SEP).map(String::as_str) != Some(SEP_TOKEN)
        {
            return Err(Error::invalid("vocabulary is missing reserved [UNK]/[SEP] ids"));
        }
        Self::from_tokens(tokens)
    }
}

/// Frozen `V×d` token-embedding table. Never mutated after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    weights: Matrix,
    seed: u64,
}

impl EmbeddingTable {
    /// Entries drawn from N(0, 1/√d), i.e. standard deviation `d^(-1/4)`.
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::derive(seed, STREAM_INIT, 0);
        Self {
            weights: Matrix::gaussian(vocab_size, dim, (dim as f64).powf(-0.25), &mut rng),
            seed,
        }
    }

    pub fn from_matrix(weights: Matrix, seed: u64) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::invalid("embedding table has non-finite entries"));
        }
        Ok(Self { weights, seed })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        self.weights.row(id)
    }

    /// FNV-1a over the bit patterns of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.weights.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Header `V: u32, d: u32`, then `V·d` little-endian `f64` values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = RawWriter::create(path)?;
        w.header(&[self.vocab_size(), self.dim()])?;
        w.values(self.weights.data())?;
        w.finish()
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let mut r = RawReader::open(path)?;
        let [v, d] = r.header()?;
        let weights = r.matrix(v, d)?;
        r.finish()?;
        Self::from_matrix(weights, seed)
    }
}

/// A node's token ids together with the gathered embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub node: usize,
    pub token_ids: Vec<TokenId>,
    pub embeddings: Matrix,
}

impl TokenMatrix {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn embed_tokens(node: usize, ids: &[TokenId], table: &EmbeddingTable) -> Result<TokenMatrix> {
    if ids.is_empty() {
        return Err(Error::invalid(format!("node {node} has no tokens")));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= table.vocab_size()) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of size {}",
            table.vocab_size()
        )));
    }
    Ok(TokenMatrix {
        node,
        token_ids: ids.to_vec(),
        embeddings: table.weights().gather_rows(ids),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        let vocab = Vocabulary::build(&["graph neural networks probabilistic"], 1);
        assert_eq!(vocab.tokenize(""), vec![UNK]);
        assert_eq!(vocab.tokenize("  ,.; "), vec![UNK]);
        let ids = vocab.tokenize("Graph graph GRAPH");
        assert_eq!(ids.len(), 3);
        assert!(ids[0] != UNK && ids.iter().all(|&i| i == ids[0]));
        // rule application: lowercase, split at whitespace and ',', drop ','
        let ids = vocab.tokenize("neural networks, probabilistic");
        let expected: Vec<_> = ["neural", "networks", "probabilistic"]
            .iter()
            .map(|w| vocab.id(w).unwrap())
            .collect();
        assert_eq!(ids, expected);
        assert_eq!(vocab.tokenize("unseen"), vec![UNK]);
    }

    #[test]
    fn build_vocab_edge_cases() {
        assert_eq!(Vocabulary::build(&["solo"], 1).len(), 3);
        assert_eq!(Vocabulary::build(&["a b b"], 5).len(), 2);
        let v = Vocabulary::build(&["x"], 1);
        assert_eq!(v.token(UNK), Some(UNK_TOKEN));
        assert_eq!(v.token(SEP), Some(SEP_TOKEN));
    }

    #[test]
    fn build_vocab_fixture_ids() {
        // counts: the=5, graph=3, node=3, a=2, edge=1, text=1, zebra=1
        let corpus = [
            "the graph",
            "The node, the edge",
            "a graph; a node",
            "the text the",
            "graph node zebra",
        ];
        let v = Vocabulary::build(&corpus, 1);
        let order: Vec<&str> = (0..v.len()).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(
            order,
            ["[UNK]", "[SEP]", "the", "graph", "node", "a", "edge", "text", "zebra"]
        );
        let v2 = Vocabulary::build(&corpus, 2);
        assert_eq!(v2.len(), 6);
    }

    #[test]
    fn retokenizing_detokenized_output_is_identity() {
        let spec = crate::graph::SyntheticSpec {
            nodes_per_class: 3,
            ..Default::default()
        };
        let (g, _) = crate::graph::generate_synthetic(&spec).unwrap();
        let vocab = Vocabulary::build(g.texts(), 1);
        for text in g.texts() {
            let ids = vocab.tokenize(text);
            assert_eq!(vocab.tokenize(&vocab.detokenize(&ids)), ids);
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.jsonl");
        let v = Vocabulary::build(&["b a a c"], 1);
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some(r#"{"token":"[UNK]","id":0}"#));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn embed_tokens_is_a_row_gather() {
        let table = EmbeddingTable::new(6, 4, 3);
        let m = embed_tokens(0, &[2, 2], &table).unwrap();
        assert_eq!(m.embeddings.row(0), m.embeddings.row(1));
        let single = embed_tokens(0, &[5], &table).unwrap();
        assert_eq!(single.embeddings.shape(), (1, 4));
        let ids = [4, 0, 3, 1];
        let m = embed_tokens(9, &ids, &table).unwrap();
        for (r, &id) in ids.iter().enumerate() {
            assert_eq!(m.embeddings.row(r), &table.weights().data()[id * 4..id * 4 + 4]);
        }
        assert!(matches!(
            embed_tokens(0, &[6], &table),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn table_file_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let table = EmbeddingTable::new(5, 3, 11);
        table.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &[5, 0, 0, 0, 3, 0, 0, 0]);
        let back = EmbeddingTable::load(&path, 11).unwrap();
        assert_eq!(back.checksum(), table.checksum());
        assert_ne!(EmbeddingTable::new(5, 3, 12).checksum(), table.checksum());
    }
}
