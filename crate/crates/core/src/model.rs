//! The assembled network: encoder, message passing and answer head over one
//! shared [`ParameterStore`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answer::{self, argmax, AnswerSpace, HeadOutput, SoftTarget};
use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::conllu::SyntaxTree;
use crate::embeddings::{self, EmbeddingTable, Vocabulary, DEP_LABELS, PTB_TAGS};
use crate::encoder::{self, QuestionEncoding};
use crate::error::{Error, Result};
use crate::message::{self, AttentionTrace, MessagePassingOutput, VisualScene};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::Tensor;

/// Vocabularies of the three lookup tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub words: Vocabulary,
    pub pos: Vocabulary,
    pub deps: Vocabulary,
}

impl Lexicon {
    pub fn new(words: &[String], pos: &[String], deps: &[String]) -> Self {
        Lexicon {
            words: Vocabulary::new(words),
            pos: Vocabulary::new(pos),
            deps: Vocabulary::new(deps),
        }
    }
}

/// Serialized description of a model, stored alongside its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub answers: Vec<String>,
    pub words: Vec<String>,
    pub pos: Vec<String>,
    pub deps: Vec<String>,
}

pub struct ForwardOutput {
    pub encoding: QuestionEncoding,
    pub messages: MessagePassingOutput,
    pub head: HeadOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: String,
    /// Softmax over the answer space.
    pub p: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Prediction {
    /// The `n` most probable answers, highest first.
    pub fn top(&self, labels: &[String], n: usize) -> Vec<(String, f64)> {
        let mut idx: Vec<usize> = (0..self.p.len()).collect();
        idx.sort_by(|&a, &b| self.p[b].total_cmp(&self.p[a]).then(a.cmp(&b)));
        idx.into_iter().take(n).map(|i| (labels[i].clone(), self.p[i])).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub lexicon: Lexicon,
    pub answers: AnswerSpace,
    pub params: ParameterStore,
}

/// Word table for a model: the configured GloVe file, or frozen random
/// vectors over `words` when none is set.
pub fn word_table(config: &ModelConfig, words: &[String]) -> Result<EmbeddingTable> {
    match &config.glove_path {
        Some(path) => {
            let t = embeddings::load_glove_text(Path::new(path), config.word_dim)?;
            Ok(t)
        }
        None => {
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let mut t = embeddings::init_random_table_with_std(
                &refs,
                config.word_dim,
                config.seed ^ 0x5eed_0f_77,
                config.word_init_std,
            )?;
            // Unknown words map to a zero row.
            t.rows.data_mut()[..config.word_dim].fill(0.0);
            t.trainable = false;
            Ok(t)
        }
    }
}

pub fn default_pos_labels(config: &ModelConfig) -> Vec<String> {
    config
        .pos_labels
        .clone()
        .unwrap_or_else(|| PTB_TAGS.iter().map(|s| s.to_string()).collect())
}

pub fn default_dep_labels() -> Vec<String> {
    DEP_LABELS.iter().map(|s| s.to_string()).collect()
}

fn init_store(
    config: &ModelConfig,
    lexicon: &Lexicon,
    word_rows: Tensor,
    word_trainable: bool,
    num_answers: usize,
) -> Result<ParameterStore> {
    let mut params = ParameterStore::new(config.seed);
    params.insert(encoder::WORD_TABLE, word_rows, word_trainable)?;
    params.insert_normal(encoder::POS_TABLE, &[lexicon.pos.len(), config.pos_dim], 0.02)?;
    encoder::init_params(&mut params, config, lexicon.deps.len())?;
    message::init_params(&mut params, config)?;
    answer::init_params(&mut params, config, num_answers)?;
    Ok(params)
}

impl Model {
    /// Fresh model with parameters initialized from `config.seed`.
    pub fn new(config: ModelConfig, answers: AnswerSpace, words: EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if words.dim != config.word_dim {
            return Err(Error::Config(format!(
                "word table has dim {}, config expects {}",
                words.dim, config.word_dim
            )));
        }
        let pos = default_pos_labels(&config);
        let deps = default_dep_labels();
        let lexicon = Lexicon {
            words: words.vocab.clone(),
            pos: Vocabulary::new(&pos),
            deps: Vocabulary::new(&deps),
        };
        let params = init_store(&config, &lexicon, words.rows, words.trainable, answers.len())?;
        Ok(Model {
            config,
            lexicon,
            answers,
            params,
        })
    }

    pub fn from_parts(meta: ModelMeta, params: ParameterStore) -> Result<Self> {
        meta.config.validate()?;
        Ok(Model {
            lexicon: Lexicon::new(&meta.words, &meta.pos, &meta.deps),
            answers: AnswerSpace::new(meta.answers)?,
            config: meta.config,
            params,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config.clone(),
            answers: self.answers.labels().to_vec(),
            words: self.lexicon.words.known().to_vec(),
            pos: self.lexicon.pos.known().to_vec(),
            deps: self.lexicon.deps.known().to_vec(),
        }
    }

    /// Parameter names and shapes a freshly built model with this config,
    /// lexicon and answer space would have.
    pub fn expected_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let rows = Tensor::zeros(&[self.lexicon.words.len(), self.config.word_dim]);
        let fresh = init_store(&self.config, &self.lexicon, rows, false, self.answers.len())?;
        Ok(fresh.iter().map(|(n, p)| (n.to_string(), p.value.shape().to_vec())).collect())
    }

    fn check_scene(&self, scene: &VisualScene) -> Result<()> {
        let k = scene.num_entities();
        if k < self.config.min_entities || k > self.config.max_entities {
            return Err(Error::Data(format!(
                "scene {} has {k} entities, outside [{}, {}]",
                scene.scene_id, self.config.min_entities, self.config.max_entities
            )));
        }
        if scene.entities.cols() != self.config.entity_dim {
            return Err(Error::Data(format!(
                "scene {} has entity dim {}, model expects {}",
                scene.scene_id,
                scene.entities.cols(),
                self.config.entity_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, graph: &mut Graph, tree: &SyntaxTree, scene: &VisualScene) -> Result<ForwardOutput> {
        self.check_scene(scene)?;
        let encoding = encoder::encode_question(graph, &self.params, &self.config, &self.lexicon, tree)?;
        let messages = message::pass_messages(graph, &self.params, &self.config, scene, &encoding)?;
        let head = answer::fuse_and_predict(
            graph,
            &self.params,
            messages.v_out,
            encoding.q,
            self.config.no_fused_attention,
        )?;
        Ok(ForwardOutput {
            encoding,
            messages,
            head,
        })
    }

    pub fn predict(&self, tree: &SyntaxTree, scene: &VisualScene) -> Result<(Prediction, AttentionTrace)> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, tree, scene)?;
        let p = graph.value(out.head.probs).data().to_vec();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite answer distribution for scene {}", scene.scene_id)));
        }
        let beta = graph.value(out.head.beta).data().to_vec();
        let logits = graph.value(out.head.logits).data().to_vec();
        let answer = self.answers.labels()[argmax(&logits)].clone();
        let mut trace = out.messages.trace(&graph);
        trace.final_attn = beta.clone();
        Ok((Prediction { answer, p, beta }, trace))
    }

    /// Loss and parameter gradients for one annotated question.
    pub fn gradients(
        &self,
        tree: &SyntaxTree,
        scene: &VisualScene,
        counts: &BTreeMap<String, u32>,
    ) -> Result<(f64, Gradients)> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, tree, scene)?;
        let target = SoftTarget::from_counts(&self.answers, counts);
        let loss = answer::soft_bce_from_logits(&mut graph, out.head.logits, &target)?;
        let value = graph.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on scene {}", scene.scene_id)));
        }
        graph.backward(loss)?;
        Ok((value, graph.param_grads()))
    }

    /// Loss only, without building gradients.
    pub fn loss(&self, tree: &SyntaxTree, scene: &VisualScene, counts: &BTreeMap<String, u32>) -> Result<f64> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, tree, scene)?;
        let target = SoftTarget::from_counts(&self.answers, counts);
        let loss = answer::soft_bce_from_logits(&mut graph, out.head.logits, &target)?;
        Ok(graph.value(loss).item())
    }
}
