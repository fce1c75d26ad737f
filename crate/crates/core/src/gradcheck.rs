//! Finite-difference verification of the full model's parameter gradients.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::answer::AnswerSpace;
use crate::config::ModelConfig;
use crate::conllu::{SyntaxToken, SyntaxTree};
use crate::error::{Error, Result};
use crate::message::VisualScene;
use crate::model::{self, Model};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Module {
    Embeddings,
    TreeEncoder,
    MessagePassing,
    AnswerHead,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Embeddings, Module::TreeEncoder, Module::MessagePassing, Module::AnswerHead];

    pub fn name(self) -> &'static str {
        match self {
            Module::Embeddings => "embeddings",
            Module::TreeEncoder => "tree-encoder",
            Module::MessagePassing => "message-passing",
            Module::AnswerHead => "answer-head",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Module::Embeddings => "embed.",
            Module::TreeEncoder => "encoder.",
            Module::MessagePassing => "message.",
            Module::AnswerHead => "answer.",
        }
    }

    pub fn parse(name: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn of_param(name: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| name.starts_with(m.prefix()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Status {
    Checked { max_rel_err: f64, entries: usize },
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub module: Module,
    pub param: String,
    pub status: Status,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        match self.status {
            Status::Checked { max_rel_err, .. } => max_rel_err < TOLERANCE,
            Status::Frozen => true,
        }
    }
}

impl fmt::Display for GroupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Status::Checked { max_rel_err, entries } => write!(
                f,
                "{:<16} {:<40} max rel err {:.3e} over {entries} entries  {}",
                self.module.name(),
                self.param,
                max_rel_err,
                if self.passed() { "ok" } else { "FAIL" }
            ),
            Status::Frozen => write!(f, "{:<16} {:<40} skipped (frozen)", self.module.name(), self.param),
        }
    }
}

/// Reduced dimensions for checking: `d_h = 16`.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        word_dim: 6,
        pos_dim: 4,
        conv_channels: Some(8),
        hidden_dim: 16,
        heads: 4,
        entity_dim: 10,
        context_dim: 8,
        output_dim: 8,
        fusion_dim: 8,
        steps: 2,
        seed,
        ..ModelConfig::default()
    }
}

/// "what is left of the red cube" with three non-leaf tokens, so `s = 3`.
pub fn probe_tree() -> SyntaxTree {
    let t = |index, form: &str, pos: &str, head, deprel: &str| SyntaxToken {
        index,
        form: form.into(),
        pos: pos.into(),
        head,
        deprel: deprel.into(),
    };
    SyntaxTree::new(
        vec![
            t(1, "what", "WP", 2, "nsubj"),
            t(2, "is", "VBZ", 0, "root"),
            t(3, "left", "JJ", 2, "xcomp"),
            t(4, "of", "IN", 7, "case"),
            t(5, "the", "DT", 7, "det"),
            t(6, "red", "JJ", 7, "amod"),
            t(7, "cube", "NN", 3, "obl"),
        ],
        1,
    )
    .expect("probe tree is valid")
}

/// A small model, question, scene (`K = 4`) and annotation drawn from `seed`.
pub fn probe(config: &ModelConfig, seed: u64) -> Result<(Model, SyntaxTree, VisualScene, BTreeMap<String, u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = probe_tree();
    let words: Vec<String> = tree.forms().iter().map(|s| s.to_string()).collect();
    let answers = AnswerSpace::new(vec!["a".into(), "b".into(), "c".into(), "d".into()])?;
    let table = model::word_table(config, &words)?;
    let model = Model::new(config.clone(), answers, table)?;
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..config.entity_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let scene = VisualScene::new("probe", Tensor::from_rows(&rows))?;
    let counts = [("a".to_string(), rng.gen_range(0..5)), ("c".to_string(), rng.gen_range(0..5))].into();
    Ok((model, tree, scene, counts))
}

/// Compares analytic and central-difference gradients for up to
/// `per_param` entries of every parameter in the selected modules.
pub fn check_model(
    model: &mut Model,
    tree: &SyntaxTree,
    scene: &VisualScene,
    counts: &BTreeMap<String, u32>,
    modules: &[Module],
    per_param: usize,
    seed: u64,
) -> Result<Vec<GroupReport>> {
    let (_, grads) = model.gradients(tree, scene, counts)?;
    let names: Vec<(String, bool)> = model.params.iter().map(|(n, p)| (n.to_string(), p.trainable)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c8e_9cf5);
    let mut reports = Vec::new();
    for (name, trainable) in names {
        let Some(module) = Module::of_param(&name) else {
            continue;
        };
        if !modules.contains(&module) {
            continue;
        }
        if !trainable {
            reports.push(GroupReport {
                module,
                param: name,
                status: Status::Frozen,
            });
            continue;
        }
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?
            .clone();
        let original = model.params.value(&name).expect("listed parameter").clone();
        // Half the sample from entries the loss actually touches.
        let mut touched: Vec<usize> = (0..analytic.len()).filter(|&i| analytic.data()[i] != 0.0).collect();
        touched.shuffle(&mut rng);
        let mut picks: Vec<usize> = touched.into_iter().take(per_param.div_ceil(2)).collect();
        let mut rest: Vec<usize> = (0..analytic.len()).filter(|i| !picks.contains(i)).collect();
        rest.shuffle(&mut rng);
        picks.extend(rest.into_iter().take(per_param - picks.len().min(per_param)));
        picks.truncate(per_param);

        let mut worst = 0.0f64;
        for &i in &picks {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut t = original.clone();
                t.data_mut()[i] += delta;
                model.params.set_value(&name, t)?;
                model.loss(tree, scene, counts)
            };
            let plus = eval(STEP)?;
            let minus = eval(-STEP)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        model.params.set_value(&name, original)?;
        reports.push(GroupReport {
            module,
            param: name,
            status: Status::Checked {
                max_rel_err: worst,
                entries: picks.len(),
            },
        });
    }
    Ok(reports)
}

/// Checks the selected modules (all when `filter` is `None`) on the probe
/// instance for `seed`.
pub fn gradcheck(config: &ModelConfig, filter: Option<Module>, seed: u64, per_param: usize) -> Result<Vec<GroupReport>> {
    let (mut model, tree, scene, counts) = probe(config, seed)?;
    let modules: Vec<Module> = match filter {
        Some(m) => vec![m],
        None => Module::ALL.to_vec(),
    };
    check_model(&mut model, &tree, &scene, &counts, &modules, per_param, seed)
}
