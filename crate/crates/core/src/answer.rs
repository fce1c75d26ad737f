//! Top-down attention fusion, answer scoring, the soft-label loss and the
//! VQA accuracy metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const ATTN_SCORE: &str = "answer.attn_score";
pub const ATTN_ENTITY: &str = "answer.attn_entity";
pub const ATTN_QUESTION: &str = "answer.attn_question";
pub const CLASSIFIER_HIDDEN: &str = "answer.classifier_hidden";
pub const CLASSIFIER_OUT: &str = "answer.classifier_out";

/// Probabilities are clamped into `[ε, 1 − ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpace {
    labels: Vec<String>,
}

impl AnswerSpace {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Data(format!("answer space needs at least 2 answers, got {}", labels.len())));
        }
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::Data("answer labels must be unique".into()));
        }
        Ok(AnswerSpace { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// `min(count / 3, 1)`.
pub fn soft_score(count: u32) -> f64 {
    (f64::from(count) / 3.0).min(1.0)
}

/// VQA accuracy of one predicted answer against annotator counts.
pub fn vqa_score(predicted: &str, counts: &BTreeMap<String, u32>) -> f64 {
    counts.get(predicted).map_or(0.0, |&c| soft_score(c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    /// `[N_ans]`
    pub y: Tensor,
}

impl SoftTarget {
    /// Answers outside the space are ignored.
    pub fn from_counts(space: &AnswerSpace, counts: &BTreeMap<String, u32>) -> Self {
        let y = space
            .labels()
            .iter()
            .map(|l| counts.get(l).map_or(0.0, |&c| soft_score(c)))
            .collect();
        SoftTarget { y: Tensor::vector(y) }
    }
}

/// Mean binary cross-entropy between clamped per-class probabilities and
/// soft targets.
pub fn soft_bce_loss(p_hat: &Tensor, target: &SoftTarget) -> Result<f64> {
    if p_hat.len() != target.y.len() {
        return Err(Error::shape("soft_bce_loss", p_hat.shape(), target.y.shape()));
    }
    let n = p_hat.len() as f64;
    let total: f64 = p_hat
        .data()
        .iter()
        .zip(target.y.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / n)
}

/// Graph version of [`soft_bce_loss`] applied to per-class sigmoid of
/// `logits` (`[1 × N_ans]`).
pub fn soft_bce_from_logits(graph: &mut Graph, logits: Var, target: &SoftTarget) -> Result<Var> {
    let n = graph.value(logits).len();
    if n != target.y.len() {
        return Err(Error::shape("soft_bce_loss", graph.shape(logits), target.y.shape()));
    }
    let shape = graph.shape(logits).to_vec();
    let y = graph.constant(target.y.reshape(&shape)?);
    let p = graph.sigmoid(logits)?;
    let p = graph.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = graph.log(p)?;
    let one_minus_p = graph.affine(p, -1.0, 1.0)?;
    let log_q = graph.log(one_minus_p)?;
    let one_minus_y = graph.affine(y, -1.0, 1.0)?;
    let pos = graph.mul(y, log_p)?;
    let neg = graph.mul(one_minus_y, log_q)?;
    let both = graph.add(pos, neg)?;
    let total = graph.sum(both)?;
    graph.affine(total, -1.0 / n as f64, 0.0)
}

pub fn init_params(store: &mut ParameterStore, cfg: &ModelConfig, num_answers: usize) -> Result<()> {
    let d_out = cfg.output_dim;
    let d_f = cfg.fusion_dim;
    store.insert_xavier(ATTN_ENTITY, d_out, d_f)?;
    store.insert_xavier(ATTN_QUESTION, cfg.phrase_dim(), d_f)?;
    store.insert_xavier(ATTN_SCORE, d_f, 1)?;
    store.insert_xavier(CLASSIFIER_HIDDEN, d_out + cfg.phrase_dim(), d_f)?;
    store.insert_xavier(CLASSIFIER_OUT, d_f, num_answers)?;
    Ok(())
}

pub struct HeadOutput {
    /// `[K × 1]`
    pub beta: Var,
    /// `[1 × N_ans]`
    pub logits: Var,
    /// `[1 × N_ans]` softmax over answers.
    pub probs: Var,
}

/// Question-conditioned attention over entities, fusion with `q`, and the
/// two-layer classifier. With `uniform_attention` every entity gets `1/K`.
pub fn fuse_and_predict(
    graph: &mut Graph,
    store: &ParameterStore,
    v_out: Var,
    q: Var,
    uniform_attention: bool,
) -> Result<HeadOutput> {
    let k = graph.shape(v_out)[0];
    if k == 0 {
        return Err(Error::Data("no entities to attend over".into()));
    }
    let beta = if uniform_attention {
        graph.constant(Tensor::full(&[k, 1], 1.0 / k as f64))
    } else {
        let we = graph.param(store, ATTN_ENTITY)?;
        let wq = graph.param(store, ATTN_QUESTION)?;
        let ws = graph.param(store, ATTN_SCORE)?;
        let pe = graph.matmul(v_out, we)?;
        let pq = graph.matmul(q, wq)?;
        let pq = graph.broadcast_rows(pq, k)?;
        let pre = graph.add(pe, pq)?;
        let act = graph.tanh(pre)?;
        let logits = graph.matmul(act, ws)?;
        graph.softmax(logits, 0)?
    };
    let beta_t = graph.transpose(beta)?;
    let pooled = graph.matmul(beta_t, v_out)?;
    let joint = graph.concat(&[pooled, q], 1)?;
    let w_hidden = graph.param(store, CLASSIFIER_HIDDEN)?;
    let w_out = graph.param(store, CLASSIFIER_OUT)?;
    let hidden = graph.matmul(joint, w_hidden)?;
    let hidden = graph.relu(hidden)?;
    let logits = graph.matmul(hidden, w_out)?;
    let probs = graph.softmax(logits, 1)?;
    Ok(HeadOutput { beta, logits, probs })
}

/// Index of the largest value; the first wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
