//! On-disk dataset directory and deterministic splitting.
//!
//! A dataset directory holds three files:
//!
//! * `questions.conllu`: one parsed question per sentence block, with
//!   `# question_id`, `# scene_id` and optional `# template` comments;
//! * `scenes.jsonl`: `{"scene_id": …, "entities": [[f32, …], …]}` per line;
//! * `answers.jsonl`: `{"question_id": …, "scene_id": …, "counts": {answer: n}}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conllu::{self, SyntaxTree};
use crate::error::{Error, Result};
use crate::message::VisualScene;
use crate::tensor::Tensor;

pub const QUESTIONS_FILE: &str = "questions.conllu";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const ANSWERS_FILE: &str = "answers.jsonl";

/// Template label used when a question carries none.
pub const DEFAULT_TEMPLATE: &str = "other";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub question_id: String,
    pub template: String,
    pub tree: SyntaxTree,
    pub scene: VisualScene,
    pub counts: BTreeMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    entities: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct AnswerRecord {
    question_id: String,
    scene_id: String,
    counts: BTreeMap<String, u32>,
}

fn meta<'a>(tree: &'a SyntaxTree, key: &str, n: usize) -> Result<&'a str> {
    tree.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Data(format!("question {n} has no `# {key}` comment")))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn scene_from_record(r: SceneRecord) -> Result<VisualScene> {
    let k = r.entities.len();
    let d = r.entities.first().map_or(0, Vec::len);
    if r.entities.iter().any(|e| e.len() != d) {
        return Err(Error::Data(format!("scene {} has ragged entity rows", r.scene_id)));
    }
    let data = r.entities.into_iter().flatten().map(f64::from).collect();
    let t = Tensor::new(vec![k, d], data)?;
    VisualScene::new(r.scene_id.clone(), t).map_err(|e| Error::Data(format!("scene {}: {e}", r.scene_id)))
}

/// Loads every sample of a dataset directory, in question-file order.
pub fn load(dir: &Path) -> Result<Vec<Sample>> {
    let qpath = dir.join(QUESTIONS_FILE);
    let text = fs::read_to_string(&qpath)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", qpath.display())))?;
    let trees = conllu::parse_conllu(&text).map_err(|e| Error::Data(format!("{}: {e}", qpath.display())))?;

    let mut scenes = HashMap::new();
    for r in read_jsonl::<SceneRecord>(&dir.join(SCENES_FILE))? {
        let id = r.scene_id.clone();
        if scenes.insert(id.clone(), scene_from_record(r)?).is_some() {
            return Err(Error::Data(format!("duplicate scene id {id}")));
        }
    }
    let mut answers = HashMap::new();
    for r in read_jsonl::<AnswerRecord>(&dir.join(ANSWERS_FILE))? {
        let id = r.question_id.clone();
        if answers.insert(id.clone(), r).is_some() {
            return Err(Error::Data(format!("duplicate answer record for question {id}")));
        }
    }

    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(trees.len());
    for (n, tree) in trees.into_iter().enumerate() {
        let qid = meta(&tree, "question_id", n + 1)?.to_string();
        let sid = meta(&tree, "scene_id", n + 1)?.to_string();
        if !seen.insert(qid.clone()) {
            return Err(Error::Data(format!("duplicate question id {qid}")));
        }
        let scene = scenes
            .get(&sid)
            .ok_or_else(|| Error::Data(format!("question {qid} refers to unknown scene {sid}")))?
            .clone();
        let record = answers
            .remove(&qid)
            .ok_or_else(|| Error::Data(format!("question {qid} has no answer record")))?;
        if record.scene_id != sid {
            return Err(Error::Data(format!(
                "question {qid}: answer record names scene {}, question names {sid}",
                record.scene_id
            )));
        }
        let template = tree.meta.get("template").cloned().unwrap_or_else(|| DEFAULT_TEMPLATE.into());
        samples.push(Sample {
            question_id: qid,
            template,
            tree,
            scene,
            counts: record.counts,
        });
    }
    Ok(samples)
}

/// Writes samples as a dataset directory, creating it if needed. Entity
/// values are stored as `f32`.
pub fn write(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let trees: Vec<SyntaxTree> = samples
        .iter()
        .map(|s| {
            let mut t = s.tree.clone();
            t.meta.insert("question_id".into(), s.question_id.clone());
            t.meta.insert("scene_id".into(), s.scene.scene_id.clone());
            t.meta.insert("template".into(), s.template.clone());
            t
        })
        .collect();
    fs::write(dir.join(QUESTIONS_FILE), conllu::serialize(&trees))?;

    let mut scenes = fs::File::create(dir.join(SCENES_FILE))?;
    let mut written = BTreeSet::new();
    for s in samples {
        if !written.insert(s.scene.scene_id.clone()) {
            continue;
        }
        let e = &s.scene.entities;
        let rec = SceneRecord {
            scene_id: s.scene.scene_id.clone(),
            entities: (0..e.rows()).map(|r| e.row(r).iter().map(|&v| v as f32).collect()).collect(),
        };
        writeln!(scenes, "{}", serde_json::to_string(&rec)?)?;
    }

    let mut answers = fs::File::create(dir.join(ANSWERS_FILE))?;
    for s in samples {
        let rec = AnswerRecord {
            question_id: s.question_id.clone(),
            scene_id: s.scene.scene_id.clone(),
            counts: s.counts.clone(),
        };
        writeln!(answers, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Sorted lowercase word forms.
pub fn word_list(samples: &[Sample]) -> Vec<String> {
    let set: BTreeSet<String> = samples
        .iter()
        .flat_map(|s| s.tree.tokens.iter().map(|t| t.form.to_lowercase()))
        .collect();
    set.into_iter().collect()
}

/// Sorted union of every annotated answer.
pub fn answer_list(samples: &[Sample]) -> Vec<String> {
    let set: BTreeSet<&String> = samples.iter().flat_map(|s| s.counts.keys()).collect();
    set.into_iter().cloned().collect()
}

/// Split sizes for `n` items: floor each share, then hand the leftover items
/// to the largest fractional remainders (earlier parts win ties).
pub fn split_sizes(n: usize, fractions: &[f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Contiguous, order-preserving train / val / test partition.
pub fn split<T: Clone>(items: &[T], fractions: &[f64; 3]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [a, b, _] = split_sizes(items.len(), fractions)?;
    Ok((items[..a].to_vec(), items[a..a + b].to_vec(), items[a + b..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_sizes(100, &[0.8, 0.1, 0.1]).unwrap(), [80, 10, 10]);
        assert_eq!(split_sizes(7, &[1.0, 0.0, 0.0]).unwrap(), [7, 0, 0]);
        assert_eq!(split_sizes(10, &[0.45, 0.45, 0.1]).unwrap(), [5, 4, 1]);
        assert!(split_sizes(10, &[0.5, 0.6, 0.0]).is_err());
        let items: Vec<u32> = (0..10).collect();
        let (tr, va, te) = split(&items, &[0.6, 0.2, 0.2]).unwrap();
        assert_eq!((tr, va, te), ((0..6).collect(), vec![6, 7], vec![8, 9]));
    }

    #[test]
    fn sizes_always_cover_everything() {
        for n in 0..50 {
            for f in [[0.8, 0.1, 0.1], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.7, 0.3, 0.0]] {
                assert_eq!(split_sizes(n, &f).unwrap().iter().sum::<usize>(), n);
            }
        }
    }
}
