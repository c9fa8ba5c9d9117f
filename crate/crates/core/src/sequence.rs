//! Bridged sequences: a node's kept tokens, a separator, then the kept tokens
//! of its sampled neighbors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduction::ReducedText;
use crate::sampler::NeighborSample;
use crate::text::{TokenId, SEP};

/// Where a sequence position came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Node(usize),
    Separator,
}

impl Provenance {
    fn to_wire(self) -> i64 {
        match self {
            Provenance::Node(i) => i as i64,
            Provenance::Separator => -1,
        }
    }

    fn from_wire(v: i64) -> Result<Self> {
        match v {
            -1 => Ok(Provenance::Separator),
            v if v >= 0 => Ok(Provenance::Node(v as usize)),
            v => Err(Error::invalid(format!("bad provenance {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BridgeSequence {
    pub root: usize,
    pub token_ids: Vec<TokenId>,
    pub provenance: Vec<Provenance>,
}

impl BridgeSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions holding the root's own tokens.
    pub fn root_len(&self) -> usize {
        self.provenance
            .iter()
            .position(|p| *p == Provenance::Separator)
            .unwrap_or(self.provenance.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    /// Insert a separator before every neighbor block instead of only after
    /// the root's tokens.
    pub separator_per_neighbor: bool,
    /// Hard cap on sequence length; excess tokens are cut from the tail.
    pub max_length: Option<usize>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            separator_per_neighbor: false,
            max_length: Some(512),
        }
    }
}

fn lookup(reduced: &[ReducedText], node: usize) -> Result<&ReducedText> {
    reduced
        .get(node)
        .filter(|r| r.id == node)
        .ok_or_else(|| Error::InvalidState(format!("no reduced text for node {node}")))
}

/// `(t_i^1 … t_i^k′, [SEP], t_j1^1 … t_jn^k′)`. Without sampled neighbors the
/// sequence is the root's tokens alone.
pub fn build_sequence(
    root: usize,
    reduced: &[ReducedText],
    sample: &NeighborSample,
    config: &SequenceConfig,
) -> Result<BridgeSequence> {
    let own = lookup(reduced, root)?;
    let mut token_ids = own.kept_token_ids.clone();
    let mut provenance = vec![Provenance::Node(root); token_ids.len()];
    for (k, &j) in sample.neighbors.iter().enumerate() {
        let r = lookup(reduced, j)?;
        if k == 0 || config.separator_per_neighbor {
            token_ids.push(SEP);
            provenance.push(Provenance::Separator);
        }
        token_ids.extend_from_slice(&r.kept_token_ids);
        provenance.extend(std::iter::repeat_n(Provenance::Node(j), r.kept_token_ids.len()));
    }
    if let Some(cap) = config.max_length {
        token_ids.truncate(cap);
        provenance.truncate(cap);
    }
    Ok(BridgeSequence {
        root,
        token_ids,
        provenance,
    })
}

pub fn build_all(
    reduced: &[ReducedText],
    samples: &[NeighborSample],
    config: &SequenceConfig,
) -> Result<Vec<BridgeSequence>> {
    samples
        .iter()
        .map(|s| build_sequence(s.root, reduced, s, config))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    id: usize,
    token_ids: Vec<TokenId>,
    provenance: Vec<i64>,
}

pub fn save_sequences(path: &Path, sequences: &[BridgeSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in sequences {
        let rec = SequenceRecord {
            id: s.root,
            token_ids: s.token_ids.clone(),
            provenance: s.provenance.iter().map(|p| p.to_wire()).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_sequences(path: &Path) -> Result<Vec<BridgeSequence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.token_ids.len() != rec.provenance.len() {
            return Err(parse_err("token_ids and provenance differ in length".into()));
        }
        let provenance = rec
            .provenance
            .into_iter()
            .map(Provenance::from_wire)
            .collect::<Result<_>>()
            .map_err(|e| parse_err(e.to_string()))?;
        out.push(BridgeSequence {
            root: rec.id,
            token_ids: rec.token_ids,
            provenance,
        });
    }
    Ok(out)
}
