//! Syntax-aware question encoder.
//!
//! Three stages, all built on the autodiff graph:
//!
//! 1. **Word-level convolution.** Each syntax subtree (head plus direct
//!    children) is embedded as word ⊕ POS rows, right-padded with zero rows to
//!    at least one window, convolved with window `w` and stride 1, passed
//!    through ReLU and max-pooled over windows into a feature `g_i`.
//! 2. **Phrase-level graph attention.** Subtree heads form a graph whose edges
//!    are the tree edges between heads plus a self-loop per node. Each of `M`
//!    heads scores neighbours with `(U x_i)ᵀ (V_dir g_j) + b'_dep`, normalizes
//!    over the neighbourhood and aggregates `W_dir g_j + b_dep`; a sigmoid
//!    follows and head outputs are concatenated.
//! 3. **Bidirectional GRU** over the phrase features in head order. Row `t` of
//!    `H` is `fwd_t ⊕ bwd_t` and `q = fwd_last ⊕ bwd_first`.
//!
//! Weight matrices are stored input-major (`[in × out]`) and applied to row
//! vectors.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::conllu::{decompose, truncate_subtree, EdgeClass, SyntaxSubtree, SyntaxTree};
use crate::error::Result;
use crate::model::Lexicon;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const WORD_TABLE: &str = "embed.word";
pub const POS_TABLE: &str = "embed.pos";
pub const DEP_VALUE_BIAS: &str = "embed.dep_value_bias";
pub const DEP_SCORE_BIAS: &str = "embed.dep_score_bias";
pub const CONV_KERNEL: &str = "encoder.conv.kernel";
pub const CONV_BIAS: &str = "encoder.conv.bias";
pub const GAT_QUERY: &str = "encoder.gat.query";

pub fn gat_key(dir: EdgeClass) -> String {
    format!("encoder.gat.key.{}", dir.name())
}

pub fn gat_value(dir: EdgeClass) -> String {
    format!("encoder.gat.value.{}", dir.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// Name of a GRU parameter, e.g. `encoder.gru.fwd.update.weight`.
pub fn gru_param(dir: Direction, gate: &str, kind: &str) -> String {
    format!("encoder.gru.{}.{gate}.{kind}", dir.name())
}

pub const GRU_GATES: [&str; 3] = ["update", "reset", "candidate"];

/// Registers every encoder parameter (convolution, attention, GRU). The
/// dependency bias tables are registered here too since only the encoder
/// reads them.
pub fn init_params(store: &mut ParameterStore, cfg: &ModelConfig, num_deps: usize) -> Result<()> {
    let d_in = cfg.input_dim();
    let d_h = cfg.hidden_dim;
    let gru_input = if cfg.no_tree_conv {
        d_in
    } else {
        let d_g = cfg.conv_dim();
        store.insert_xavier(CONV_KERNEL, cfg.conv_window * d_in, d_g)?;
        store.insert_zeros(CONV_BIAS, &[1, d_g])?;
        store.insert_xavier(GAT_QUERY, d_in, d_h)?;
        for dir in EdgeClass::ALL {
            store.insert_xavier(&gat_key(dir), d_g, d_h)?;
            store.insert_xavier(&gat_value(dir), d_g, d_h)?;
        }
        store.insert_normal(DEP_VALUE_BIAS, &[num_deps, d_h], 0.02)?;
        store.insert_normal(DEP_SCORE_BIAS, &[num_deps, cfg.heads], 0.02)?;
        d_h
    };
    for dir in [Direction::Forward, Direction::Backward] {
        for gate in GRU_GATES {
            store.insert_xavier(&gru_param(dir, gate, "weight"), d_h + gru_input, d_h)?;
            store.insert_zeros(&gru_param(dir, gate, "bias"), &[1, d_h])?;
        }
    }
    Ok(())
}

/// Convolution output for one subtree.
#[derive(Debug, Clone, Copy)]
pub struct SubtreeFeature {
    pub head_index: usize,
    /// `[1 × d_g]`
    pub g: Var,
}

/// Output of the encoder, with intermediate stages kept for inspection.
#[derive(Debug, Clone)]
pub struct QuestionEncoding {
    /// `[s × 2·d_h]` phrase features.
    pub h: Var,
    /// `[1 × 2·d_h]` question feature.
    pub q: Var,
    /// Token indices (1-based) making up each phrase, in row order of `h`.
    pub phrases: Vec<Vec<usize>>,
    pub subtree_features: Vec<SubtreeFeature>,
    /// `[s × d_h]` attention output; absent when tree convolution is disabled.
    pub h_star: Option<Var>,
    /// Per node, `[|N_i| × M]` attention weights (columns are heads).
    pub gat_attention: Vec<Var>,
}

impl QuestionEncoding {
    pub fn num_phrases(&self) -> usize {
        self.phrases.len()
    }
}

/// `[N × (d_x + d_t)]` word ⊕ POS rows for every token.
pub fn token_features(graph: &mut Graph, store: &ParameterStore, lexicon: &Lexicon, tree: &SyntaxTree) -> Result<Var> {
    let forms: Vec<String> = tree.tokens.iter().map(|t| t.form.to_lowercase()).collect();
    let tags: Vec<&str> = tree.tokens.iter().map(|t| t.pos.as_str()).collect();
    let words = graph.param(store, WORD_TABLE)?;
    let pos = graph.param(store, POS_TABLE)?;
    let w = graph.gather_rows(words, &lexicon.words.indices(&forms))?;
    let p = graph.gather_rows(pos, &lexicon.pos.indices(&tags))?;
    graph.concat(&[w, p], 1)
}

/// Subtrees after decomposition and truncation to `max_len` tokens.
pub fn convolution_units(tree: &SyntaxTree, max_len: usize) -> Vec<SyntaxSubtree> {
    decompose(tree)
        .iter()
        .map(|f| truncate_subtree(f, max_len))
        .collect()
}

/// Convolution, ReLU and max-pool over one subtree; `xcat` holds the rows of
/// all tokens of the sentence.
pub fn word_level_conv(
    graph: &mut Graph,
    store: &ParameterStore,
    window: usize,
    xcat: Var,
    subtree: &SyntaxSubtree,
) -> Result<SubtreeFeature> {
    let d_in = graph.shape(xcat)[1];
    let ids: Vec<usize> = subtree.tokens().iter().map(|t| t - 1).collect();
    let mut seq = graph.gather_rows(xcat, &ids)?;
    if ids.len() < window {
        let pad = graph.constant(Tensor::zeros(&[window - ids.len(), d_in]));
        seq = graph.concat(&[seq, pad], 0)?;
    }
    let len = ids.len().max(window);
    let mut windows = Vec::with_capacity(len - window + 1);
    for start in 0..=len - window {
        let rows = graph.slice_rows(seq, start, start + window)?;
        windows.push(graph.reshape(rows, &[1, window * d_in])?);
    }
    let unfolded = graph.concat(&windows, 0)?;
    let kernel = graph.param(store, CONV_KERNEL)?;
    let bias = graph.param(store, CONV_BIAS)?;
    let pre = graph.matmul(unfolded, kernel)?;
    let bias_rows = graph.broadcast_rows(bias, windows.len())?;
    let pre = graph.add(pre, bias_rows)?;
    let act = graph.relu(pre)?;
    let pooled = graph.max_pool(act)?;
    let d_g = graph.shape(pooled)[0];
    Ok(SubtreeFeature {
        head_index: subtree.head,
        g: graph.reshape(pooled, &[1, d_g])?,
    })
}

/// `[d_h × M]` indicator summing each head's block of columns.
pub fn head_blocks(d_h: usize, heads: usize) -> Tensor {
    let per = d_h / heads;
    let mut t = Tensor::zeros(&[d_h, heads]);
    for d in 0..d_h {
        t.data_mut()[d * heads + d / per] = 1.0;
    }
    t
}

/// Graph neighbours of node `i` (indices into `subtrees`), self included,
/// in ascending order.
pub fn neighbours(tree: &SyntaxTree, subtrees: &[SyntaxSubtree], i: usize) -> Vec<usize> {
    let hi = subtrees[i].head;
    (0..subtrees.len())
        .filter(|&j| j == i || tree.edge_class(hi, subtrees[j].head).is_ok())
        .collect()
}

pub struct GatOutput {
    /// `[s × d_h]`
    pub h_star: Var,
    pub attention: Vec<Var>,
}

/// Relation-aware multi-head attention over subtree heads.
#[allow(clippy::too_many_arguments)]
pub fn phrase_gat(
    graph: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    lexicon: &Lexicon,
    tree: &SyntaxTree,
    subtrees: &[SyntaxSubtree],
    features: &[SubtreeFeature],
    xcat: Var,
) -> Result<GatOutput> {
    let (d_h, heads) = (cfg.hidden_dim, cfg.heads);
    let gs: Vec<Var> = features.iter().map(|f| f.g).collect();
    let gmat = graph.concat(&gs, 0)?;

    let mut keys = Vec::new();
    let mut values = Vec::new();
    for dir in EdgeClass::ALL {
        let k = graph.param(store, &gat_key(dir))?;
        let v = graph.param(store, &gat_value(dir))?;
        keys.push(graph.matmul(gmat, k)?);
        values.push(graph.matmul(gmat, v)?);
    }
    let dir_slot = |d: EdgeClass| EdgeClass::ALL.iter().position(|&x| x == d).unwrap_or(0);

    let head_ids: Vec<usize> = subtrees.iter().map(|f| f.head - 1).collect();
    let head_x = graph.gather_rows(xcat, &head_ids)?;
    let query = graph.param(store, GAT_QUERY)?;
    let queries = graph.matmul(head_x, query)?;
    let blocks = graph.constant(head_blocks(d_h, heads));
    let blocks_t = graph.constant(head_blocks(d_h, heads).transpose());
    let score_bias = graph.param(store, DEP_SCORE_BIAS)?;
    let value_bias = graph.param(store, DEP_VALUE_BIAS)?;

    let mut rows = Vec::with_capacity(subtrees.len());
    let mut attention = Vec::with_capacity(subtrees.len());
    for i in 0..subtrees.len() {
        let nbrs = neighbours(tree, subtrees, i);
        let hi = subtrees[i].head;
        let mut key_rows = Vec::with_capacity(nbrs.len());
        let mut value_rows = Vec::with_capacity(nbrs.len());
        let mut labels = Vec::with_capacity(nbrs.len());
        for &j in &nbrs {
            let hj = subtrees[j].head;
            let slot = dir_slot(tree.edge_class(hi, hj)?);
            key_rows.push(graph.row(keys[slot], j)?);
            value_rows.push(graph.row(values[slot], j)?);
            labels.push(lexicon.deps.index(tree.edge_label(hi, hj)?));
        }
        let n = nbrs.len();
        let k = graph.concat(&key_rows, 0)?;
        let q_i = graph.row(queries, i)?;
        let q_rep = graph.broadcast_rows(q_i, n)?;
        let prod = graph.mul(q_rep, k)?;
        let scores = graph.matmul(prod, blocks)?;
        let sb = graph.gather_rows(score_bias, &labels)?;
        let scores = graph.add(scores, sb)?;
        let alpha = graph.softmax(scores, 0)?;

        let v = graph.concat(&value_rows, 0)?;
        let vb = graph.gather_rows(value_bias, &labels)?;
        let v = graph.add(v, vb)?;
        let alpha_wide = graph.matmul(alpha, blocks_t)?;
        let weighted = graph.mul(alpha_wide, v)?;
        let ones = graph.constant(Tensor::full(&[1, n], 1.0));
        let agg = graph.matmul(ones, weighted)?;
        rows.push(graph.sigmoid(agg)?);
        attention.push(alpha);
    }
    Ok(GatOutput {
        h_star: graph.concat(&rows, 0)?,
        attention,
    })
}

fn gru_pass(graph: &mut Graph, store: &ParameterStore, dir: Direction, inputs: &[Var], d_h: usize) -> Result<Vec<Var>> {
    let w: Vec<Var> = GRU_GATES
        .iter()
        .map(|g| graph.param(store, &gru_param(dir, g, "weight")))
        .collect::<Result<_>>()?;
    let b: Vec<Var> = GRU_GATES
        .iter()
        .map(|g| graph.param(store, &gru_param(dir, g, "bias")))
        .collect::<Result<_>>()?;
    let mut h = graph.constant(Tensor::zeros(&[1, d_h]));
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let hx = graph.concat(&[h, x], 1)?;
        let z = graph.matmul(hx, w[0])?;
        let z = graph.add(z, b[0])?;
        let z = graph.sigmoid(z)?;
        let r = graph.matmul(hx, w[1])?;
        let r = graph.add(r, b[1])?;
        let r = graph.sigmoid(r)?;
        let rh = graph.mul(r, h)?;
        let rhx = graph.concat(&[rh, x], 1)?;
        let c = graph.matmul(rhx, w[2])?;
        let c = graph.add(c, b[2])?;
        let c = graph.tanh(c)?;
        // h ← (1 − z)·h + z·c, written as h + z·(c − h)
        let delta = graph.sub(c, h)?;
        let step = graph.mul(z, delta)?;
        h = graph.add(h, step)?;
        states.push(h);
    }
    Ok(states)
}

/// Runs both GRU directions over the rows of `seq` (`[s × d_in]`) and returns
/// `(H, q)`.
pub fn bigru_encode(graph: &mut Graph, store: &ParameterStore, d_h: usize, seq: Var) -> Result<(Var, Var)> {
    let s = graph.shape(seq)[0];
    let rows: Vec<Var> = (0..s).map(|t| graph.row(seq, t)).collect::<Result<_>>()?;
    let fwd = gru_pass(graph, store, Direction::Forward, &rows, d_h)?;
    let reversed: Vec<Var> = rows.iter().rev().copied().collect();
    let mut bwd = gru_pass(graph, store, Direction::Backward, &reversed, d_h)?;
    bwd.reverse();
    let h_rows: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| graph.concat(&[f, b], 1))
        .collect::<Result<_>>()?;
    let h = graph.concat(&h_rows, 0)?;
    let q = graph.concat(&[fwd[s - 1], bwd[0]], 1)?;
    Ok((h, q))
}

/// Full encoder: decompose → truncate → convolution → attention → biGRU.
/// With `no_tree_conv` the biGRU reads the token rows directly.
pub fn encode_question(
    graph: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    lexicon: &Lexicon,
    tree: &SyntaxTree,
) -> Result<QuestionEncoding> {
    let xcat = token_features(graph, store, lexicon, tree)?;
    if cfg.no_tree_conv {
        let (h, q) = bigru_encode(graph, store, cfg.hidden_dim, xcat)?;
        return Ok(QuestionEncoding {
            h,
            q,
            phrases: (1..=tree.len()).map(|t| vec![t]).collect(),
            subtree_features: Vec::new(),
            h_star: None,
            gat_attention: Vec::new(),
        });
    }
    let subtrees = convolution_units(tree, cfg.max_subtree_len);
    let features: Vec<SubtreeFeature> = subtrees
        .iter()
        .map(|f| word_level_conv(graph, store, cfg.conv_window, xcat, f))
        .collect::<Result<_>>()?;
    let gat = phrase_gat(graph, store, cfg, lexicon, tree, &subtrees, &features, xcat)?;
    let (h, q) = bigru_encode(graph, store, cfg.hidden_dim, gat.h_star)?;
    Ok(QuestionEncoding {
        h,
        q,
        phrases: subtrees
            .iter()
            .map(|f| {
                let mut t = f.tokens();
                t.sort_unstable();
                t
            })
            .collect(),
        subtree_features: features,
        h_star: Some(gat.h_star),
        gat_attention: gat.attention,
    })
}
