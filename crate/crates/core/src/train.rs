//! Training loop, evaluation, ablations, step sweeps, prediction records and
//! attention export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::{vqa_score, AnswerSpace};
use crate::config::{LrSchedule, ModelConfig};
use crate::dataset::{self, Sample};
use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::params::{AdamaxConfig, Gradients};
use crate::synth;

/// Train / val / test partition of a loaded dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn new(samples: &[Sample], fractions: &[f64; 3]) -> Result<Splits> {
        let (train, val, test) = dataset::split(samples, fractions)?;
        Ok(Splits { train, val, test })
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// The split used to compare variants: validation, or test when the
    /// validation split is empty.
    pub fn held_out(&self) -> Result<&[Sample]> {
        if !self.val.is_empty() {
            Ok(&self.val)
        } else if !self.test.is_empty() {
            Ok(&self.test)
        } else {
            Err(Error::Data("no validation or test samples to score".into()))
        }
    }
}

/// Fresh model whose word vocabulary and answer space cover `samples`.
pub fn build_model<'a>(config: &ModelConfig, samples: impl Iterator<Item = &'a Sample>) -> Result<Model> {
    let all: Vec<Sample> = samples.cloned().collect();
    if all.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let words = dataset::word_list(&all);
    let answers = AnswerSpace::new(dataset::answer_list(&all))?;
    let table = model::word_table(config, &words)?;
    Model::new(config.clone(), answers, table)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub count: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub score: f64,
    pub per_template: BTreeMap<String, TemplateScore>,
}

impl EvalReport {
    /// Mean score over the relational templates, if any were present.
    pub fn relational(&self) -> Option<f64> {
        let (n, total) = self
            .per_template
            .iter()
            .filter(|(t, _)| synth::is_relational(t))
            .fold((0, 0.0), |(n, s), (_, ts)| (n + ts.count, s + ts.score * ts.count as f64));
        (n > 0).then(|| total / n as f64)
    }
}

/// Mean VQA score with a per-template breakdown.
pub fn evaluate(model: &Model, samples: &[Sample], threads: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let scores: Vec<f64> = pool(threads)?.install(|| {
        samples
            .par_iter()
            .map(|s| model.predict(&s.tree, &s.scene).map(|(p, _)| vqa_score(&p.answer, &s.counts)))
            .collect::<Result<_>>()
    })?;
    let mut per: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (s, &v) in samples.iter().zip(&scores) {
        let e = per.entry(s.template.clone()).or_default();
        e.0 += 1;
        e.1 += v;
    }
    Ok(EvalReport {
        count: samples.len(),
        score: scores.iter().sum::<f64>() / samples.len() as f64,
        per_template: per
            .into_iter()
            .map(|(t, (n, total))| (t, TemplateScore { count: n, score: total / n as f64 }))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_score: f64,
    pub val_score: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch {:>3}  lr {:.6e}  loss {:.9}  train {:.6}",
            self.epoch + 1,
            self.lr,
            self.loss,
            self.train_score
        );
        if let Some(v) = self.val_score {
            let _ = write!(s, "  val {v:.6}");
        }
        s
    }
}

pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_score: f64,
    /// Model with the best selection score.
    pub model: Model,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        let mut s: String = self.epochs.iter().map(|e| e.line() + "\n").collect();
        let _ = writeln!(s, "best epoch {} score {:.6}", self.best_epoch + 1, self.best_score);
        s
    }
}

/// Per-sample losses and gradients of one batch, in batch order.
fn batch_gradients(
    model: &Model,
    batch: &[&Sample],
    pool: &rayon::ThreadPool,
) -> Result<Vec<(f64, Gradients)>> {
    let parts: Vec<(f64, Gradients)> = pool.install(|| {
        batch
            .par_iter()
            .map(|s| model.gradients(&s.tree, &s.scene, &s.counts))
            .collect::<Result<_>>()
    })?;
    if parts.iter().any(|(_, g)| g.iter().any(|(_, t)| !t.is_finite())) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(parts)
}

/// Trains `model` on `train`, choosing the epoch with the best validation
/// score (training score when `val` is empty).
pub fn train(mut model: Model, train: &[Sample], val: &[Sample]) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let workers = pool(cfg.threads)?;
    let mut schedule = LrSchedule::new(&cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            // Merging in batch order keeps results independent of the
            // number of worker threads.
            let scale = 1.0 / batch.len() as f64;
            for (loss, grads) in batch_gradients(&model, &batch, &workers)? {
                loss_sum += loss;
                model.params.accumulate(&grads, scale)?;
            }
            model.params.adamax_step(lr, AdamaxConfig::default())?;
        }
        let train_score = evaluate(&model, train, cfg.threads)?.score;
        let val_score = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, val, cfg.threads)?.score)
        };
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            train_score,
            val_score,
        };
        info!("{}", log.line());
        let selection = val_score.unwrap_or(train_score);
        schedule.observe(epoch, selection);
        if best.as_ref().map_or(true, |(_, s, _)| selection > *s) {
            best = Some((epoch, selection, model.clone()));
        }
        epochs.push(log);
    }
    let (best_epoch, best_score, model) = best.expect("at least one epoch runs");
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_score,
        model,
    })
}

/// Builds a fresh model over all splits and trains it.
pub fn train_splits(config: &ModelConfig, splits: &Splits) -> Result<TrainReport> {
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let model = build_model(config, splits.all())?;
    train(model, &splits.train, &splits.val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub name: String,
    pub report: EvalReport,
}

fn score_header(rows: &[VariantScore]) -> Vec<String> {
    let mut templates: Vec<String> = rows.iter().flat_map(|r| r.report.per_template.keys().cloned()).collect();
    templates.sort();
    templates.dedup();
    templates
}

fn score_csv(first_column: &str, rows: &[VariantScore]) -> String {
    let templates = score_header(rows);
    let mut out = format!("{first_column},score,relational");
    for t in &templates {
        let _ = write!(out, ",{t}");
    }
    out.push('\n');
    for r in rows {
        let rel = r.report.relational().map_or(String::new(), |v| format!("{v:.6}"));
        let _ = write!(out, "{},{:.6},{rel}", r.name, r.report.score);
        for t in &templates {
            match r.report.per_template.get(t) {
                Some(ts) => {
                    let _ = write!(out, ",{:.6}", ts.score);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub const VARIANTS: [&str; 4] = ["full", "no_tree_conv", "no_message_passing", "no_fused_attention"];

/// Config for a named ablation variant.
pub fn variant_config(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    cfg.no_tree_conv = false;
    cfg.no_message_passing = false;
    cfg.no_fused_attention = false;
    match name {
        "full" => {}
        "no_tree_conv" => cfg.no_tree_conv = true,
        "no_message_passing" => cfg.no_message_passing = true,
        "no_fused_attention" => cfg.no_fused_attention = true,
        other => return Err(Error::Config(format!("unknown variant {other}"))),
    }
    Ok(cfg)
}

/// Trains the full model and each single-mechanism ablation with the same
/// seed and scores each on the held-out split.
pub fn ablate(config: &ModelConfig, splits: &Splits) -> Result<Vec<VariantScore>> {
    let held_out = splits.held_out()?;
    VARIANTS
        .iter()
        .map(|&name| {
            let cfg = variant_config(config, name)?;
            info!("training variant {name}");
            let report = train_splits(&cfg, splits)?;
            Ok(VariantScore {
                name: name.into(),
                report: evaluate(&report.model, held_out, cfg.threads)?,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[VariantScore]) -> String {
    score_csv("variant", rows)
}

pub const DEFAULT_SWEEP: [usize; 5] = [0, 1, 2, 4, 6];

/// One training run per step count, shared seed.
pub fn sweep_steps(config: &ModelConfig, splits: &Splits, steps: &[usize]) -> Result<Vec<VariantScore>> {
    if steps.is_empty() {
        return Err(Error::Config("step sweep needs at least one value".into()));
    }
    let held_out = splits.held_out()?;
    steps
        .iter()
        .map(|&t| {
            let mut cfg = config.clone();
            cfg.steps = t;
            cfg.no_message_passing = false;
            info!("training with {t} message-passing steps");
            let report = train_splits(&cfg, splits)?;
            Ok(VariantScore {
                name: t.to_string(),
                report: evaluate(&report.model, held_out, cfg.threads)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[VariantScore]) -> String {
    score_csv("steps", rows)
}

/// Rounds to six significant digits.
pub fn round6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

fn round_all(v: &[f64]) -> Vec<f64> {
    v.iter().copied().map(round6).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub question_id: String,
    pub answer: String,
    pub p_top5: Vec<(String, f64)>,
    pub beta: Vec<f64>,
}

pub fn prediction_record(model: &Model, sample: &Sample) -> Result<PredictionRecord> {
    let (p, _) = model.predict(&sample.tree, &sample.scene)?;
    Ok(PredictionRecord {
        scene_id: sample.scene.scene_id.clone(),
        question_id: sample.question_id.clone(),
        answer: p.answer.clone(),
        p_top5: p
            .top(model.answers.labels(), 5)
            .into_iter()
            .map(|(l, v)| (l, round6(v)))
            .collect(),
        beta: round_all(&p.beta),
    })
}

/// Attention record of one instance with axis labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub question_id: String,
    pub scene_id: String,
    pub tokens: Vec<String>,
    /// Words of each phrase, in sentence order.
    pub phrases: Vec<String>,
    pub answer: String,
    /// `[T][s]`
    pub instr_attn: Vec<Vec<f64>>,
    /// `[T][sender][receiver]`; each receiver column sums to one.
    pub msg_weights: Vec<Vec<Vec<f64>>>,
    /// `[K]`
    pub final_attn: Vec<f64>,
}

pub fn export_attention(model: &Model, sample: &Sample) -> Result<AttentionExport> {
    let (p, trace) = model.predict(&sample.tree, &sample.scene)?;
    let mut graph = crate::autograd::Graph::new();
    let enc = crate::encoder::encode_question(&mut graph, &model.params, &model.config, &model.lexicon, &sample.tree)?;
    let tokens: Vec<String> = sample.tree.tokens.iter().map(|t| t.form.clone()).collect();
    let phrases = enc
        .phrases
        .iter()
        .map(|ids| ids.iter().map(|&i| tokens[i - 1].as_str()).collect::<Vec<_>>().join(" "))
        .collect();
    Ok(AttentionExport {
        question_id: sample.question_id.clone(),
        scene_id: sample.scene.scene_id.clone(),
        tokens,
        phrases,
        answer: p.answer,
        instr_attn: trace.instr_attn.iter().map(|r| round_all(r)).collect(),
        msg_weights: trace
            .msg_weights
            .iter()
            .map(|m| m.iter().map(|r| round_all(r)).collect())
            .collect(),
        final_attn: round_all(&trace.final_attn),
    })
}
