//! Deterministic synthetic grounded questions.
//!
//! Each scene places entities in distinct horizontal bins. An entity row is
//! laid out as
//!
//! ```text
//! [ color one-hot (C) | shape one-hot (4) | x-bin one-hot (16) | x | y | noise … ]
//! ```
//!
//! Questions ask for the color of an entity picked out by shape (`attr`) or
//! of the entity in the bin adjacent to it (`left`, `right`, `next`). The
//! relational templates can only be answered by combining two entities.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conllu::{SyntaxToken, SyntaxTree};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::message::VisualScene;
use crate::tensor::Tensor;

pub const COLORS: [&str; 12] = [
    "red", "blue", "green", "yellow", "purple", "orange", "gray", "brown", "cyan", "pink", "white", "black",
];
pub const SHAPES: [&str; 4] = ["cube", "sphere", "cylinder", "cone"];
pub const BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Template {
    Attr,
    Left,
    Right,
    Next,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::Attr, Template::Left, Template::Right, Template::Next];

    pub fn name(self) -> &'static str {
        match self {
            Template::Attr => "attr",
            Template::Left => "left",
            Template::Right => "right",
            Template::Next => "next",
        }
    }

    pub fn parse(name: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn is_relational(self) -> bool {
        self != Template::Attr
    }
}

/// True for template names whose answer depends on two entities.
pub fn is_relational(template: &str) -> bool {
    Template::parse(template).is_some_and(Template::is_relational)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_instances: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Number of colors, which is also the answer-space size.
    pub num_answers: usize,
    pub entity_dim: usize,
    pub templates: Vec<Template>,
    pub annotators: u32,
    /// Annotators who give the correct answer; the rest answer at random.
    pub agreeing: u32,
    /// Scale of the continuous nuisance features: coordinate jitter inside a
    /// bin, the vertical coordinate and the trailing noise columns. Zero
    /// puts every entity at its bin centre with no noise.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_instances: 1000,
            min_entities: 4,
            max_entities: 10,
            num_answers: 8,
            entity_dim: 32,
            templates: Template::ALL.to_vec(),
            annotators: 10,
            agreeing: 8,
            jitter: 1.0,
            seed: 0,
        }
    }
}

/// Column offsets of the feature blocks.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub color: usize,
    pub shape: usize,
    pub bin: usize,
    pub coords: usize,
    pub noise: usize,
}

impl Layout {
    pub fn new(num_colors: usize) -> Layout {
        let shape = num_colors;
        let bin = shape + SHAPES.len();
        let coords = bin + BINS;
        Layout {
            color: 0,
            shape,
            bin,
            coords,
            noise: coords + 2,
        }
    }
}

impl SynthSpec {
    pub fn layout(&self) -> Layout {
        Layout::new(self.num_answers)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=COLORS.len()).contains(&self.num_answers) {
            return Err(Error::Config(format!("num_answers must be in 2..={}", COLORS.len())));
        }
        if self.min_entities < 3 || self.min_entities > self.max_entities || self.max_entities > BINS - 2 {
            return Err(Error::Config(format!(
                "entity range must satisfy 3 ≤ min ≤ max ≤ {}",
                BINS - 2
            )));
        }
        if self.entity_dim < self.layout().noise {
            return Err(Error::Config(format!("entity_dim must be at least {}", self.layout().noise)));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Config("jitter must be in [0, 1]".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one template is required".into()));
        }
        if self.agreeing < 3 || self.agreeing > self.annotators {
            return Err(Error::Config("need 3 ≤ agreeing ≤ annotators".into()));
        }
        Ok(())
    }
}

struct Entity {
    color: usize,
    shape: usize,
    bin: usize,
}

fn token(index: usize, form: &str, pos: &str, head: usize, deprel: &str) -> SyntaxToken {
    SyntaxToken {
        index,
        form: form.into(),
        pos: pos.into(),
        head,
        deprel: deprel.into(),
    }
}

/// Hand-built dependency tree for a template and target shape.
pub fn question_tree(template: Template, shape: &str) -> SyntaxTree {
    let mut tokens = vec![
        token(1, "what", "WDT", 2, "det"),
        token(2, "color", "NN", 0, "root"),
        token(3, "is", "VBZ", 2, "cop"),
        token(4, "the", "DT", 5, "det"),
    ];
    let relation = match template {
        Template::Attr => None,
        Template::Left => Some(("left", "of")),
        Template::Right => Some(("right", "of")),
        Template::Next => Some(("next", "to")),
    };
    match relation {
        None => {
            tokens.push(token(5, shape, "NN", 2, "nsubj"));
            tokens.push(token(6, "?", ".", 2, "punct"));
        }
        Some((rel, prep)) => {
            tokens.push(token(5, "thing", "NN", 2, "nsubj"));
            tokens.push(token(6, rel, "JJ", 5, "amod"));
            tokens.push(token(7, prep, "IN", 9, "case"));
            tokens.push(token(8, "the", "DT", 9, "det"));
            tokens.push(token(9, shape, "NN", 6, "obl"));
            tokens.push(token(10, "?", ".", 2, "punct"));
        }
    }
    SyntaxTree::new(tokens, 1).expect("question templates are valid trees")
}

fn pick_bins(rng: &mut ChaCha8Rng, taken: &mut Vec<usize>, forbidden: &[usize], n: usize) {
    let mut free: Vec<usize> = (0..BINS).filter(|b| !taken.contains(b) && !forbidden.contains(b)).collect();
    free.shuffle(rng);
    taken.extend(free.into_iter().take(n));
}

fn other_than(rng: &mut ChaCha8Rng, n: usize, avoid: &[usize]) -> usize {
    loop {
        let c = rng.gen_range(0..n);
        if !avoid.contains(&c) {
            return c;
        }
    }
}

/// Builds the scene for one instance: `(entities, target shape, answer color)`.
/// The target is always entity 0 before shuffling.
fn build_scene(spec: &SynthSpec, template: Template, rng: &mut ChaCha8Rng) -> (Vec<Entity>, usize, usize) {
    let k = rng.gen_range(spec.min_entities..=spec.max_entities);
    let c = spec.num_answers;
    let target_shape = rng.gen_range(0..SHAPES.len());
    let target_bin = rng.gen_range(1..BINS - 1);
    let mut bins = vec![target_bin];
    let mut colors = vec![rng.gen_range(0..c)];

    let answer = match template {
        Template::Attr => {
            pick_bins(rng, &mut bins, &[], k - 1);
            colors[0]
        }
        _ => {
            let toward = match template {
                Template::Left => -1i64,
                Template::Right => 1,
                _ => {
                    if rng.gen_bool(0.5) {
                        -1
                    } else {
                        1
                    }
                }
            };
            let near = (target_bin as i64 + toward) as usize;
            let far = (target_bin as i64 - toward) as usize;
            let answer = rng.gen_range(0..c);
            bins.push(near);
            colors.push(answer);
            // "next" must stay unambiguous; left/right may carry a decoy
            // on the opposite side.
            if template != Template::Next && rng.gen_bool(0.5) && bins.len() < k {
                bins.push(far);
                colors.push(other_than(rng, c, &[answer]));
            }
            let remaining = k - bins.len();
            pick_bins(rng, &mut bins, &[near, far], remaining);
            answer
        }
    };
    while colors.len() < bins.len() {
        colors.push(rng.gen_range(0..c));
    }
    let entities = bins
        .iter()
        .zip(&colors)
        .enumerate()
        .map(|(i, (&bin, &color))| Entity {
            color,
            shape: if i == 0 {
                target_shape
            } else {
                other_than(rng, SHAPES.len(), &[target_shape])
            },
            bin,
        })
        .collect();
    (entities, target_shape, answer)
}

fn entity_row(spec: &SynthSpec, e: &Entity, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = spec.layout();
    let mut row = vec![0.0; spec.entity_dim];
    row[l.color + e.color] = 1.0;
    row[l.shape + e.shape] = 1.0;
    row[l.bin + e.bin] = 1.0;
    let a = spec.jitter;
    row[l.coords] = (e.bin as f64 + 0.5 + a * rng.gen_range(-0.4..0.4)) / BINS as f64;
    row[l.coords + 1] = 0.5 + a * rng.gen_range(-0.5..0.5);
    for v in &mut row[l.noise..] {
        *v = a * rng.gen_range(-0.1..0.1);
    }
    // Values round-trip exactly through the f32 scene file.
    row.iter().map(|&v| f64::from(v as f32)).collect()
}

fn instance(spec: &SynthSpec, idx: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(idx as u64);
    let template = spec.templates[idx % spec.templates.len()];
    let (mut entities, target_shape, answer) = build_scene(spec, template, &mut rng);
    entities.shuffle(&mut rng);
    let rows: Vec<Vec<f64>> = entities.iter().map(|e| entity_row(spec, e, &mut rng)).collect();

    let mut counts = BTreeMap::new();
    counts.insert(COLORS[answer].to_string(), spec.agreeing);
    for _ in spec.agreeing..spec.annotators {
        let other = other_than(&mut rng, spec.num_answers, &[answer]);
        *counts.entry(COLORS[other].to_string()).or_insert(0) += 1;
    }

    let scene_id = format!("s{idx:05}");
    Sample {
        question_id: format!("q{idx:05}"),
        template: template.name().into(),
        tree: question_tree(template, SHAPES[target_shape]),
        scene: VisualScene::new(scene_id, Tensor::from_rows(&rows)).expect("scenes are non-empty"),
        counts,
    }
}

/// Generates `spec.num_instances` samples. Instance `i` depends only on
/// `(spec, i)`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.num_instances).map(|i| instance(spec, i)).collect())
}

/// Answer recomputed from the stored features and the question words alone.
pub fn rule_answer(sample: &Sample, num_colors: usize) -> Option<String> {
    let l = Layout::new(num_colors);
    let forms: Vec<&str> = sample.tree.forms();
    let shape = SHAPES.iter().position(|s| forms.contains(s))?;
    let e = &sample.scene.entities;
    let hot = |r: usize, start: usize, n: usize| (0..n).find(|&i| e.at(r, start + i) == 1.0);
    let target = (0..e.rows()).find(|&r| hot(r, l.shape, SHAPES.len()) == Some(shape))?;
    let tbin = hot(target, l.bin, BINS)? as i64;
    let wanted: Vec<i64> = if forms.contains(&"left") {
        vec![tbin - 1]
    } else if forms.contains(&"right") {
        vec![tbin + 1]
    } else if forms.contains(&"next") {
        vec![tbin - 1, tbin + 1]
    } else {
        vec![tbin]
    };
    let found = (0..e.rows()).find(|&r| hot(r, l.bin, BINS).is_some_and(|b| wanted.contains(&(b as i64))))?;
    hot(found, l.color, num_colors).map(|c| COLORS[c].to_string())
}
