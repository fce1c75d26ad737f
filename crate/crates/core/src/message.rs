//! Phrase-guided message passing over the complete graph of visual entities.
//!
//! At each step `t` an instruction vector `c_t` is read off the phrase
//! features by question-conditioned attention. Every entity then builds
//! `ṽ_i = v_i ⊕ ctx_i ⊕ (A v_i ⊙ B ctx_i)`, scores each sender `j ≠ i` by
//! `Σ_d (R ṽ_i)_d (S ṽ_j)_d (K c_t)_d`, normalizes over senders, and sums the
//! weighted messages `(P ṽ_j) ⊙ (Q c_t)`. The context is updated from
//! `ctx_i ⊕ Σ_j m_ji` and the output is a projection of `v_i ⊕ ctx_i`.
//!
//! The initial context is a learned projection of the entity itself.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::encoder::QuestionEncoding;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CTX_INIT: &str = "message.ctx_init";
pub const INSTR_SCORE: &str = "message.instr_score";
pub const INSTR_QUERY: &str = "message.instr_query";
pub const ENTITY_GATE: &str = "message.entity_gate";
pub const CTX_GATE: &str = "message.ctx_gate";
pub const RECEIVER_KEY: &str = "message.receiver_key";
pub const SENDER_KEY: &str = "message.sender_key";
pub const INSTR_KEY: &str = "message.instr_key";
pub const SENDER_VALUE: &str = "message.sender_value";
pub const INSTR_VALUE: &str = "message.instr_value";
pub const CTX_UPDATE: &str = "message.ctx_update";
pub const OUTPUT: &str = "message.output";

/// Step-specific instruction projection, `t` counted from 1.
pub fn instr_step(t: usize) -> String {
    format!("message.instr_step.{t}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualScene {
    pub scene_id: String,
    /// `[K × d_v]`
    pub entities: Tensor,
}

impl VisualScene {
    pub fn new(scene_id: impl Into<String>, entities: Tensor) -> Result<Self> {
        if entities.rank() != 2 || entities.rows() == 0 {
            return Err(Error::Data(format!(
                "scene needs at least one entity row, got shape {:?}",
                entities.shape()
            )));
        }
        Ok(VisualScene {
            scene_id: scene_id.into(),
            entities,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    /// Entities reordered so that new row `r` is old row `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> VisualScene {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| self.entities.row(p).to_vec()).collect();
        VisualScene {
            scene_id: self.scene_id.clone(),
            entities: Tensor::from_rows(&rows),
        }
    }
}

/// Plain-number attention record for export and analysis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// `[T][s]`: phrase attention per step.
    pub instr_attn: Vec<Vec<f64>>,
    /// `[T][j][i]`: weight of the message from sender `j` to receiver `i`.
    pub msg_weights: Vec<Vec<Vec<f64>>>,
    /// `[K]`: final top-down attention over entities.
    pub final_attn: Vec<f64>,
}

pub fn init_params(store: &mut ParameterStore, cfg: &ModelConfig) -> Result<()> {
    let d_v = cfg.entity_dim;
    let d_c = cfg.context_dim;
    let d_p = cfg.phrase_dim();
    let d_tilde = d_v + 2 * d_c;
    store.insert_xavier(CTX_INIT, d_v, d_c)?;
    store.insert_xavier(OUTPUT, d_v + d_c, cfg.output_dim)?;
    let steps = cfg.effective_steps();
    if steps == 0 {
        return Ok(());
    }
    store.insert_xavier(INSTR_SCORE, d_p, 1)?;
    store.insert_xavier(INSTR_QUERY, d_p, d_p)?;
    for t in 1..=steps {
        store.insert_xavier(&instr_step(t), d_p, d_p)?;
    }
    store.insert_xavier(ENTITY_GATE, d_v, d_c)?;
    store.insert_xavier(CTX_GATE, d_c, d_c)?;
    store.insert_xavier(RECEIVER_KEY, d_tilde, d_c)?;
    store.insert_xavier(SENDER_KEY, d_tilde, d_c)?;
    store.insert_xavier(INSTR_KEY, d_p, d_c)?;
    store.insert_xavier(SENDER_VALUE, d_tilde, d_c)?;
    store.insert_xavier(INSTR_VALUE, d_p, d_c)?;
    store.insert_xavier(CTX_UPDATE, 2 * d_c, d_c)?;
    Ok(())
}

/// Instruction vector for step `t` (1-based): `(c_t [1 × 2d_h], α_t [s × 1])`.
pub fn instruction_vector(
    graph: &mut Graph,
    store: &ParameterStore,
    enc: &QuestionEncoding,
    t: usize,
    steps: usize,
) -> Result<(Var, Var)> {
    if t == 0 || t > steps {
        return Err(Error::invalid(format!("instruction step {t} outside 1..={steps}")));
    }
    let s = graph.shape(enc.h)[0];
    let query = graph.param(store, INSTR_QUERY)?;
    let u = graph.matmul(enc.q, query)?;
    let u = graph.relu(u)?;
    let step = graph.param(store, &instr_step(t))?;
    let u = graph.matmul(u, step)?;
    let u = graph.broadcast_rows(u, s)?;
    let gated = graph.mul(enc.h, u)?;
    let score = graph.param(store, INSTR_SCORE)?;
    let logits = graph.matmul(gated, score)?;
    let alpha = graph.softmax(logits, 0)?;
    let alpha_t = graph.transpose(alpha)?;
    let c = graph.matmul(alpha_t, enc.h)?;
    Ok((c, alpha))
}

pub struct MessagePassingOutput {
    /// `[K × d_out]`
    pub v_out: Var,
    /// Per step: `(c_t, α_t)`.
    pub instructions: Vec<(Var, Var)>,
    /// Per step: `[K × K]` with row `i` the receiver and column `j` the sender.
    pub weights: Vec<Var>,
    /// Scene context after each step, `[K × d_ctx]`.
    pub contexts: Vec<Var>,
}

impl MessagePassingOutput {
    /// Instruction and message weights as plain numbers; `msg_weights` is
    /// stored sender-major.
    pub fn trace(&self, graph: &Graph) -> AttentionTrace {
        AttentionTrace {
            instr_attn: self
                .instructions
                .iter()
                .map(|(_, a)| graph.value(*a).data().to_vec())
                .collect(),
            msg_weights: self
                .weights
                .iter()
                .map(|w| {
                    let t = graph.value(*w).transpose();
                    (0..t.rows()).map(|j| t.row(j).to_vec()).collect()
                })
                .collect(),
            final_attn: Vec::new(),
        }
    }
}

pub fn pass_messages(
    graph: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    scene: &VisualScene,
    enc: &QuestionEncoding,
) -> Result<MessagePassingOutput> {
    let k = scene.num_entities();
    if k == 0 {
        return Err(Error::Data("scene has no entities".into()));
    }
    if scene.entities.cols() != cfg.entity_dim {
        return Err(Error::shape("entities", scene.entities.shape(), &[k, cfg.entity_dim]));
    }
    let steps = cfg.effective_steps();
    let v = graph.constant(scene.entities.clone());
    let w0 = graph.param(store, CTX_INIT)?;
    let mut ctx = graph.matmul(v, w0)?;
    let mut instructions = Vec::with_capacity(steps);
    let mut weights = Vec::with_capacity(steps);
    let mut contexts = Vec::with_capacity(steps);

    if steps > 0 {
        let entity_gate = graph.param(store, ENTITY_GATE)?;
        let ctx_gate = graph.param(store, CTX_GATE)?;
        let receiver_key = graph.param(store, RECEIVER_KEY)?;
        let sender_key = graph.param(store, SENDER_KEY)?;
        let instr_key = graph.param(store, INSTR_KEY)?;
        let sender_value = graph.param(store, SENDER_VALUE)?;
        let instr_value = graph.param(store, INSTR_VALUE)?;
        let ctx_update = graph.param(store, CTX_UPDATE)?;
        let gated_entities = graph.matmul(v, entity_gate)?;

        for t in 1..=steps {
            let (c, alpha) = instruction_vector(graph, store, enc, t, steps)?;
            let gated_ctx = graph.matmul(ctx, ctx_gate)?;
            let joint = graph.mul(gated_entities, gated_ctx)?;
            let tilde = graph.concat(&[v, ctx, joint], 1)?;

            let recv = graph.matmul(tilde, receiver_key)?;
            let ck = graph.matmul(c, instr_key)?;
            let ck = graph.broadcast_rows(ck, k)?;
            let recv = graph.mul(recv, ck)?;
            let send = graph.matmul(tilde, sender_key)?;
            let send_t = graph.transpose(send)?;
            let logits = graph.matmul(recv, send_t)?;
            let w = graph.softmax_off_diagonal(logits)?;

            let vals = graph.matmul(tilde, sender_value)?;
            let cv = graph.matmul(c, instr_value)?;
            let cv = graph.broadcast_rows(cv, k)?;
            let vals = graph.mul(vals, cv)?;
            let messages = graph.matmul(w, vals)?;

            let upd_in = graph.concat(&[ctx, messages], 1)?;
            ctx = graph.matmul(upd_in, ctx_update)?;
            instructions.push((c, alpha));
            weights.push(w);
            contexts.push(ctx);
        }
    }

    let out_in = graph.concat(&[v, ctx], 1)?;
    let w12 = graph.param(store, OUTPUT)?;
    let v_out = graph.matmul(out_in, w12)?;
    Ok(MessagePassingOutput {
        v_out,
        instructions,
        weights,
        contexts,
    })
}
