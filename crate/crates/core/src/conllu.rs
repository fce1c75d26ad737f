//! Dependency-annotated questions in a CoNLL-U subset.
//!
//! Only ID, FORM, UPOS, XPOS, HEAD and DEPREL (columns 1, 2, 4, 5, 7 and 8)
//! are read; the tag is XPOS when given, since the tag inventory is the Penn
//! Treebank set. Comment lines of the form `# key = value` are kept as sentence
//! metadata. Multiword ranges (`3-4`) and empty nodes (`3.1`) are skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxToken {
    /// 1-based position.
    pub index: usize,
    pub form: String,
    /// Part-of-speech tag: XPOS when present, otherwise UPOS.
    pub pos: String,
    /// Index of the head token, 0 for the root.
    pub head: usize,
    pub deprel: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxTree {
    pub tokens: Vec<SyntaxToken>,
    pub root: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// A non-leaf token with its direct dependents in sentence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxSubtree {
    pub head: usize,
    pub children: Vec<usize>,
}

impl SyntaxSubtree {
    /// Head followed by children.
    pub fn tokens(&self) -> Vec<usize> {
        std::iter::once(self.head)
            .chain(self.children.iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        1 + self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeClass {
    HeadToDep,
    DepToHead,
    SelfLoop,
}

impl EdgeClass {
    pub const ALL: [EdgeClass; 3] = [EdgeClass::HeadToDep, EdgeClass::DepToHead, EdgeClass::SelfLoop];

    pub fn name(self) -> &'static str {
        match self {
            EdgeClass::HeadToDep => "head_to_dep",
            EdgeClass::DepToHead => "dep_to_head",
            EdgeClass::SelfLoop => "self",
        }
    }
}

impl SyntaxTree {
    /// Validates head links and builds a tree. `line` is used for error
    /// reporting only.
    pub fn new(tokens: Vec<SyntaxToken>, line: usize) -> Result<Self> {
        let n = tokens.len();
        let err = |msg: String| Error::Parse { line, msg };
        if n == 0 {
            return Err(err("empty sentence".into()));
        }
        for (pos, t) in tokens.iter().enumerate() {
            if t.index != pos + 1 {
                return Err(err(format!("token id {} out of sequence (expected {})", t.index, pos + 1)));
            }
            if t.head > n {
                return Err(err(format!("token {} has dangling head {}", t.index, t.head)));
            }
            if t.head == t.index {
                return Err(err(format!("token {} is its own head", t.index)));
            }
        }
        let roots: Vec<usize> = tokens.iter().filter(|t| t.head == 0).map(|t| t.index).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(err("no root token".into())),
            _ => return Err(err(format!("multiple roots: {roots:?}"))),
        };
        // Every token must reach the root without revisiting a node.
        for t in &tokens {
            let mut cur = t.index;
            let mut steps = 0;
            while cur != 0 {
                cur = tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(err(format!("cycle through token {}", t.index)));
                }
            }
        }
        Ok(SyntaxTree {
            tokens,
            root,
            meta: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> &SyntaxToken {
        &self.tokens[index - 1]
    }

    /// Direct dependents of `index`, in sentence order.
    pub fn children(&self, index: usize) -> Vec<usize> {
        self.tokens
            .iter()
            .filter(|t| t.head == index)
            .map(|t| t.index)
            .collect()
    }

    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }

    /// Direction class of `(i, j)` for relation-aware attention.
    pub fn edge_class(&self, i: usize, j: usize) -> Result<EdgeClass> {
        if i == j {
            return Ok(EdgeClass::SelfLoop);
        }
        let in_range = |k: usize| (1..=self.len()).contains(&k);
        if in_range(i) && in_range(j) {
            if self.token(j).head == i {
                return Ok(EdgeClass::HeadToDep);
            }
            if self.token(i).head == j {
                return Ok(EdgeClass::DepToHead);
            }
        }
        Err(Error::invalid(format!("({i}, {j}) is not an edge of the tree")))
    }

    /// Dependency label of the edge `(i, j)`: the deprel of whichever token is
    /// the dependent, or `"self"` for `i == j`.
    pub fn edge_label(&self, i: usize, j: usize) -> Result<&str> {
        Ok(match self.edge_class(i, j)? {
            EdgeClass::SelfLoop => "self",
            EdgeClass::HeadToDep => &self.token(j).deprel,
            EdgeClass::DepToHead => &self.token(i).deprel,
        })
    }

    /// Writes the tree back out as a 10-column CoNLL-U sentence block.
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for t in &self.tokens {
            let _ = writeln!(
                out,
                "{}\t{}\t_\t_\t{}\t_\t{}\t{}\t_\t_",
                t.index, t.form, t.pos, t.head, t.deprel
            );
        }
        out
    }
}

/// Serializes many trees, one blank line after each sentence.
pub fn serialize(trees: &[SyntaxTree]) -> String {
    trees.iter().map(|t| t.to_conllu() + "\n").collect()
}

fn parse_token(line: &str, lineno: usize) -> Result<Option<SyntaxToken>> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 10 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 10 tab-separated columns, found {}", cols.len()),
        });
    }
    if cols[0].contains('-') || cols[0].contains('.') {
        return Ok(None);
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad {what} `{s}`"),
        })
    };
    Ok(Some(SyntaxToken {
        index: num(cols[0], "ID")?,
        form: cols[1].to_string(),
        pos: if cols[4] != "_" { cols[4] } else { cols[3] }.to_string(),
        head: num(cols[6], "HEAD")?,
        deprel: cols[7].to_string(),
    }))
}

/// Parses blank-line separated sentences into validated trees.
pub fn parse_conllu(text: &str) -> Result<Vec<SyntaxTree>> {
    let mut trees = Vec::new();
    let mut tokens = Vec::new();
    let mut meta = BTreeMap::new();
    let mut start_line = 1;

    let mut finish = |tokens: &mut Vec<SyntaxToken>,
                      meta: &mut BTreeMap<String, String>,
                      start: usize|
     -> Result<()> {
        if tokens.is_empty() {
            meta.clear();
            return Ok(());
        }
        let mut tree = SyntaxTree::new(std::mem::take(tokens), start)?;
        tree.meta = std::mem::take(meta);
        trees.push(tree);
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut tokens, &mut meta, start_line)?;
            start_line = lineno + 1;
        } else if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else if let Some(tok) = parse_token(line, lineno)? {
            if tokens.is_empty() {
                start_line = lineno;
            }
            tokens.push(tok);
        }
    }
    finish(&mut tokens, &mut meta, start_line)?;
    Ok(trees)
}

/// One subtree per non-leaf token, in head order. A single-token tree yields
/// one degenerate subtree holding only the root.
pub fn decompose(tree: &SyntaxTree) -> Vec<SyntaxSubtree> {
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); tree.len() + 1];
    for t in &tree.tokens {
        children[t.head].push(t.index);
    }
    let subtrees: Vec<SyntaxSubtree> = (1..=tree.len())
        .filter_map(|h| {
            let kids = std::mem::take(&mut children[h]);
            (!kids.is_empty()).then_some(SyntaxSubtree { head: h, children: kids })
        })
        .collect();
    if subtrees.is_empty() {
        vec![SyntaxSubtree {
            head: tree.root,
            children: Vec::new(),
        }]
    } else {
        subtrees
    }
}

/// Keeps the head and the first `max_len - 1` children. The head always
/// stays, so a cap of 0 behaves like 1.
pub fn truncate_subtree(f: &SyntaxSubtree, max_len: usize) -> SyntaxSubtree {
    let keep = max_len.saturating_sub(1);
    SyntaxSubtree {
        head: f.head,
        children: f.children.iter().take(keep).copied().collect(),
    }
}
