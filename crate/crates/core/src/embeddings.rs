//! Word, POS and dependency-label lookup tables.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UNK: &str = "unk";

/// Default POS inventory: the Penn Treebank word tags plus the punctuation
/// tags a question parser emits (42 labels).
pub const PTB_TAGS: [&str; 42] = [
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN", "NNS", "NNP",
    "NNPS", "PDT", "POS", "PRP", "PRP$", "RB", "RBR", "RBS", "RP", "SYM", "TO", "UH", "VB",
    "VBD", "VBG", "VBN", "VBP", "VBZ", "WDT", "WP", "WP$", "WRB", ".", ",", ":", "``", "''", "$",
];

/// Universal Dependencies relations plus `self` for attention self-loops.
pub const DEP_LABELS: [&str; 38] = [
    "acl", "advcl", "advmod", "amod", "appos", "aux", "case", "cc", "ccomp", "clf", "compound",
    "conj", "cop", "csubj", "dep", "det", "discourse", "dislocated", "expl", "fixed", "flat",
    "goeswith", "iobj", "list", "mark", "nmod", "nsubj", "nummod", "obj", "obl", "orphan",
    "parataxis", "punct", "reparandum", "root", "vocative", "xcomp", "self",
];

/// Label set of a table. Index 0 is always `unk`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// `labels` must not contain `unk`; it is prepended. Duplicates keep the
    /// first position.
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut all = Vec::with_capacity(labels.len() + 1);
        all.push(UNK.to_string());
        all.extend(labels.iter().map(|s| s.as_ref().to_string()));
        let mut index = HashMap::with_capacity(all.len());
        for (i, l) in all.iter().enumerate() {
            index.entry(l.clone()).or_insert(i);
        }
        Vocabulary { labels: all, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every label including the leading `unk`.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Labels after `unk`, i.e. what [`Vocabulary::new`] was given.
    pub fn known(&self) -> &[String] {
        &self.labels[1..]
    }

    /// Row index of `token`, falling back to `unk` (0).
    pub fn index(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn indices<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t.as_ref())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vocab: Vocabulary,
    pub rows: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Builds a table from labels (without `unk`) and a `[labels.len()+1 × dim]`
    /// matrix whose row 0 is the `unk` row.
    pub fn from_parts(labels: Vec<String>, rows: Tensor, trainable: bool) -> Result<Self> {
        let dim = rows.cols();
        if rows.rank() != 2 || rows.rows() != labels.len() + 1 {
            return Err(Error::shape("embedding table", rows.shape(), &[labels.len() + 1, dim]));
        }
        Ok(EmbeddingTable {
            dim,
            vocab: Vocabulary::new(&labels),
            rows,
            trainable,
        })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn index(&self, token: &str) -> usize {
        self.vocab.index(token)
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        self.rows.row(self.index(token))
    }
}

/// Reads a GloVe text file: one `word v1 … v_dim` line per word. The table is
/// frozen and its `unk` row is zero.
pub fn load_glove_text(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    parse_glove(&text, dim)
}

pub fn parse_glove(text: &str, dim: usize) -> Result<EmbeddingTable> {
    let mut labels = Vec::new();
    let mut data = vec![0.0; dim];
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default();
        let values: Vec<f64> = parts
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Format {
                    line: i + 1,
                    msg: format!("bad number `{v}`"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Format {
                line: i + 1,
                msg: format!("expected {dim} components, found {}", values.len()),
            });
        }
        if seen.insert(word.to_string()) {
            labels.push(word.to_string());
            data.extend(values);
        }
    }
    let rows = Tensor::new(vec![labels.len() + 1, dim], data)?;
    EmbeddingTable::from_parts(labels, rows, false)
}

/// Trainable table with `Normal(0, 0.02)` entries, deterministic per seed.
pub fn init_random_table(labels: &[&str], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    init_random_table_with_std(labels, dim, seed, 0.02)
}

pub fn init_random_table_with_std(labels: &[&str], dim: usize, seed: u64, std: f64) -> Result<EmbeddingTable> {
    if labels.is_empty() {
        return Err(Error::invalid("random embedding table needs at least one label"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = Tensor::normal(&[labels.len() + 1, dim], std, &mut rng);
    EmbeddingTable::from_parts(labels.iter().map(|s| s.to_string()).collect(), rows, true)
}

/// Row-stacked lookups, `[n × dim]`.
pub fn embed_sequence<S: AsRef<str>>(table: &EmbeddingTable, tokens: &[S]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::invalid("embed_sequence needs at least one token"));
    }
    let mut data = Vec::with_capacity(tokens.len() * table.dim);
    for t in tokens {
        data.extend_from_slice(table.lookup(t.as_ref()));
    }
    Tensor::new(vec![tokens.len(), table.dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GLOVE: &str = "the 0.1 0.2 0.3\ncube -1 0.5 2\n";

    #[test]
    fn glove_counts_and_lookup() {
        let t = parse_glove(GLOVE, 3).unwrap();
        assert_eq!(t.len(), 3);
        assert!(!t.trainable);
        assert_eq!(t.lookup("cube"), &[-1.0, 0.5, 2.0]);
        assert_eq!(t.lookup("sphere"), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn glove_component_count_error_names_line() {
        let err = parse_glove("a 1 2 3\nb 1 2\n", 3).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn glove_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        std::fs::write(&path, GLOVE).unwrap();
        let t = load_glove_text(&path, 3).unwrap();
        assert_eq!(t.lookup("the"), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn random_pos_table_shape_and_determinism() {
        let t = init_random_table(&PTB_TAGS, 128, 5).unwrap();
        assert_eq!(t.rows.shape(), &[43, 128]);
        assert!(t.trainable);
        assert_eq!(t, init_random_table(&PTB_TAGS, 128, 5).unwrap());
        let other = init_random_table(&PTB_TAGS, 128, 6).unwrap();
        assert!(t.rows.max_abs_diff(&other.rows) > 0.0);
        assert!(init_random_table(&[], 4, 0).is_err());
    }

    #[test]
    fn embed_sequence_rows() {
        let t = parse_glove(GLOVE, 3).unwrap();
        let x = embed_sequence(&t, &["unk-word"]).unwrap();
        assert_eq!(x.data(), &[0.0; 3]);
        let x = embed_sequence(&t, &["the", "cube"]).unwrap();
        assert_eq!(x.row(0), t.lookup("the"));
        assert_eq!(x.row(1), t.lookup("cube"));
        let x = embed_sequence(&t, &["cube", "cube"]).unwrap();
        assert_eq!(x.row(0), x.row(1));
    }
}
