//! Shared fixtures, plus a straight-line reference forward pass that works on
//! nested `Vec`s and never touches the autodiff graph.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stcgn_core::conllu::{EdgeClass, SyntaxToken};
use stcgn_core::encoder::{self, Direction};
use stcgn_core::{answer, message, AnswerSpace, Model, ModelConfig, SyntaxTree, Tensor, VisualScene};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(p, &x)| x * b[p][j]).sum())
                .collect()
        })
        .collect()
}

pub fn vm(v: &[f64], b: &Mat) -> Vec<f64> {
    mm(&vec![v.to_vec()], b).remove(0)
}

pub fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Every intermediate the reference pass produces.
pub struct Reference {
    pub g: Mat,
    pub h_star: Mat,
    pub h: Mat,
    pub q: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    /// `[t][receiver][sender]`
    pub w: Vec<Mat>,
    pub v_out: Mat,
    pub beta: Vec<f64>,
    pub p: Vec<f64>,
}

fn param(model: &Model, name: &str) -> Mat {
    mat(model.params.value(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn gru(model: &Model, dir: Direction, xs: &[Vec<f64>], d_h: usize) -> Mat {
    let w = |gate: &str| param(model, &encoder::gru_param(dir, gate, "weight"));
    let b = |gate: &str| param(model, &encoder::gru_param(dir, gate, "bias")).remove(0);
    let (wz, wr, wc) = (w("update"), w("reset"), w("candidate"));
    let (bz, br, bc) = (b("update"), b("reset"), b("candidate"));
    let mut h = vec![0.0; d_h];
    let mut out = Vec::new();
    for x in xs {
        let hx = cat(&h, x);
        let z: Vec<f64> = vm(&hx, &wz).iter().zip(&bz).map(|(a, b)| sigmoid(a + b)).collect();
        let r: Vec<f64> = vm(&hx, &wr).iter().zip(&br).map(|(a, b)| sigmoid(a + b)).collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = vm(&cat(&rh, x), &wc).iter().zip(&bc).map(|(a, b)| (a + b).tanh()).collect();
        h = (0..d_h).map(|d| (1.0 - z[d]) * h[d] + z[d] * cand[d]).collect();
        out.push(h.clone());
    }
    out
}

fn direction(tree: &SyntaxTree, i: usize, j: usize) -> Option<EdgeClass> {
    if i == j {
        Some(EdgeClass::SelfLoop)
    } else if tree.tokens[j - 1].head == i {
        Some(EdgeClass::HeadToDep)
    } else if tree.tokens[i - 1].head == j {
        Some(EdgeClass::DepToHead)
    } else {
        None
    }
}

/// Evaluates the whole model for one question by direct formulas.
pub fn reference(model: &Model, tree: &SyntaxTree, scene: &VisualScene) -> Reference {
    let cfg = &model.config;
    let n = tree.tokens.len();
    let words = param(model, encoder::WORD_TABLE);
    let tags = param(model, encoder::POS_TABLE);
    let x: Mat = tree
        .tokens
        .iter()
        .map(|t| {
            cat(
                &words[model.lexicon.words.index(&t.form.to_lowercase())],
                &tags[model.lexicon.pos.index(&t.pos)],
            )
        })
        .collect();

    // Subtrees: each token with dependents, its dependents in sentence order,
    // cut to the length cap.
    let mut units: Vec<(usize, Vec<usize>)> = (1..=n)
        .filter_map(|h| {
            let kids: Vec<usize> = (1..=n).filter(|&d| tree.tokens[d - 1].head == h).collect();
            (!kids.is_empty()).then(|| (h, kids.into_iter().take(cfg.max_subtree_len - 1).collect()))
        })
        .collect();
    if units.is_empty() {
        units.push((tree.root, Vec::new()));
    }

    let kernel = param(model, encoder::CONV_KERNEL);
    let conv_bias = param(model, encoder::CONV_BIAS).remove(0);
    let d_in = x[0].len();
    let win = cfg.conv_window;
    let g: Mat = units
        .iter()
        .map(|(h, kids)| {
            let mut rows: Mat = std::iter::once(h).chain(kids).map(|&t| x[t - 1].clone()).collect();
            while rows.len() < win {
                rows.push(vec![0.0; d_in]);
            }
            let acts: Mat = (0..=rows.len() - win)
                .map(|s| {
                    let flat: Vec<f64> = rows[s..s + win].concat();
                    vm(&flat, &kernel).iter().zip(&conv_bias).map(|(a, b)| (a + b).max(0.0)).collect()
                })
                .collect();
            (0..acts[0].len())
                .map(|c| acts.iter().map(|a| a[c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect();

    let d_h = cfg.hidden_dim;
    let per_head = d_h / cfg.heads;
    let query = param(model, encoder::GAT_QUERY);
    let score_bias = param(model, encoder::DEP_SCORE_BIAS);
    let value_bias = param(model, encoder::DEP_VALUE_BIAS);
    let h_star: Mat = units
        .iter()
        .map(|&(hi, _)| {
            let qi = vm(&x[hi - 1], &query);
            let nbrs: Vec<(usize, EdgeClass, usize)> = units
                .iter()
                .enumerate()
                .filter_map(|(j, &(hj, _))| {
                    direction(tree, hi, hj).map(|d| {
                        let label = match d {
                            EdgeClass::SelfLoop => "self".to_string(),
                            EdgeClass::HeadToDep => tree.tokens[hj - 1].deprel.clone(),
                            EdgeClass::DepToHead => tree.tokens[hi - 1].deprel.clone(),
                        };
                        (j, d, model.lexicon.deps.index(&label))
                    })
                })
                .collect();
            let keys: Mat = nbrs
                .iter()
                .map(|&(j, d, _)| vm(&g[j], &param(model, &encoder::gat_key(d))))
                .collect();
            let vals: Mat = nbrs
                .iter()
                .map(|&(j, d, l)| {
                    vm(&g[j], &param(model, &encoder::gat_value(d)))
                        .iter()
                        .zip(&value_bias[l])
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect();
            let mut out = vec![0.0; d_h];
            for m in 0..cfg.heads {
                let block = m * per_head..(m + 1) * per_head;
                let scores: Vec<f64> = nbrs
                    .iter()
                    .zip(&keys)
                    .map(|(&(_, _, l), k)| block.clone().map(|d| qi[d] * k[d]).sum::<f64>() + score_bias[l][m])
                    .collect();
                let alpha = softmax(&scores);
                for d in block {
                    out[d] = alpha.iter().zip(&vals).map(|(a, v)| a * v[d]).sum();
                }
            }
            out.iter().map(|&v| sigmoid(v)).collect()
        })
        .collect();

    let s = h_star.len();
    let fwd = gru(model, Direction::Forward, &h_star, d_h);
    let rev: Mat = h_star.iter().rev().cloned().collect();
    let mut bwd = gru(model, Direction::Backward, &rev, d_h);
    bwd.reverse();
    let h: Mat = (0..s).map(|t| cat(&fwd[t], &bwd[t])).collect();
    let q = cat(&fwd[s - 1], &bwd[0]);

    // Message passing.
    let v = mat(&scene.entities);
    let k = v.len();
    let mut ctx = mm(&v, &param(model, message::CTX_INIT));
    let mut cs = Vec::new();
    let mut ws = Vec::new();
    let steps = cfg.effective_steps();
    if steps > 0 {
        let gate_v = mm(&v, &param(model, message::ENTITY_GATE));
        for t in 1..=steps {
            let u: Vec<f64> = vm(&q, &param(model, message::INSTR_QUERY)).iter().map(|a| a.max(0.0)).collect();
            let u = vm(&u, &param(model, &message::instr_step(t)));
            let score = param(model, message::INSTR_SCORE);
            let logits: Vec<f64> = h
                .iter()
                .map(|hi| hi.iter().zip(&u).enumerate().map(|(d, (a, b))| a * b * score[d][0]).sum())
                .collect();
            let alpha = softmax(&logits);
            let c: Vec<f64> = (0..2 * d_h).map(|d| (0..s).map(|i| alpha[i] * h[i][d]).sum()).collect();

            let gate_c = mm(&ctx, &param(model, message::CTX_GATE));
            let tilde: Mat = (0..k)
                .map(|i| {
                    let joint: Vec<f64> = gate_v[i].iter().zip(&gate_c[i]).map(|(a, b)| a * b).collect();
                    cat(&cat(&v[i], &ctx[i]), &joint)
                })
                .collect();
            let recv = mm(&tilde, &param(model, message::RECEIVER_KEY));
            let send = mm(&tilde, &param(model, message::SENDER_KEY));
            let ck = vm(&c, &param(model, message::INSTR_KEY));
            let vals = mm(&tilde, &param(model, message::SENDER_VALUE));
            let cv = vm(&c, &param(model, message::INSTR_VALUE));
            let w: Mat = (0..k)
                .map(|i| {
                    let others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
                    let logits: Vec<f64> = others
                        .iter()
                        .map(|&j| (0..ck.len()).map(|d| recv[i][d] * send[j][d] * ck[d]).sum())
                        .collect();
                    let sm = softmax(&logits);
                    let mut row = vec![0.0; k];
                    for (&j, p) in others.iter().zip(sm) {
                        row[j] = p;
                    }
                    row
                })
                .collect();
            let upd = param(model, message::CTX_UPDATE);
            ctx = (0..k)
                .map(|i| {
                    let msg: Vec<f64> = (0..cv.len())
                        .map(|d| (0..k).map(|j| w[i][j] * vals[j][d] * cv[d]).sum())
                        .collect();
                    vm(&cat(&ctx[i], &msg), &upd)
                })
                .collect();
            cs.push(c);
            ws.push(w);
        }
    }
    let w_out = param(model, message::OUTPUT);
    let v_out: Mat = (0..k).map(|i| vm(&cat(&v[i], &ctx[i]), &w_out)).collect();

    // Answer head.
    let beta = if cfg.no_fused_attention {
        vec![1.0 / k as f64; k]
    } else {
        let pq = vm(&q, &param(model, answer::ATTN_QUESTION));
        let we = param(model, answer::ATTN_ENTITY);
        let wsc = param(model, answer::ATTN_SCORE);
        let logits: Vec<f64> = v_out
            .iter()
            .map(|vi| {
                vm(vi, &we)
                    .iter()
                    .zip(&pq)
                    .enumerate()
                    .map(|(d, (a, b))| (a + b).tanh() * wsc[d][0])
                    .sum()
            })
            .collect();
        softmax(&logits)
    };
    let pooled: Vec<f64> = (0..v_out[0].len())
        .map(|d| (0..k).map(|i| beta[i] * v_out[i][d]).sum())
        .collect();
    let hidden: Vec<f64> = vm(&cat(&pooled, &q), &param(model, answer::CLASSIFIER_HIDDEN))
        .iter()
        .map(|a| a.max(0.0))
        .collect();
    let p = softmax(&vm(&hidden, &param(model, answer::CLASSIFIER_OUT)));

    Reference {
        g,
        h_star,
        h,
        q,
        c: cs,
        w: ws,
        v_out,
        beta,
        p,
    }
}

/// A fixed question with four phrases and a dependent chain of depth three.
pub fn sample_tree() -> SyntaxTree {
    let rows = [
        ("what", "WDT", 2, "det"),
        ("color", "NN", 0, "root"),
        ("is", "VBZ", 2, "cop"),
        ("the", "DT", 5, "det"),
        ("thing", "NN", 2, "nsubj"),
        ("left", "JJ", 5, "amod"),
        ("of", "IN", 9, "case"),
        ("the", "DT", 9, "det"),
        ("cube", "NN", 6, "obl"),
        ("?", ".", 2, "punct"),
    ];
    let tokens = rows
        .iter()
        .enumerate()
        .map(|(i, &(form, pos, head, deprel))| SyntaxToken {
            index: i + 1,
            form: form.into(),
            pos: pos.into(),
            head,
            deprel: deprel.into(),
        })
        .collect();
    SyntaxTree::new(tokens, 1).unwrap()
}

pub fn small_model(cfg: &ModelConfig, tree: &SyntaxTree) -> Model {
    let words: Vec<String> = tree.forms().iter().map(|s| s.to_lowercase()).collect();
    let answers = AnswerSpace::new(["blue", "brown", "gray", "green", "red"].map(String::from).to_vec()).unwrap();
    let table = stcgn_core::model::word_table(cfg, &words).unwrap();
    Model::new(cfg.clone(), answers, table).unwrap()
}

pub fn random_scene(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> VisualScene {
    let rows: Mat = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    VisualScene::new("s", Tensor::from_rows(&rows)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn counts(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
    pairs.iter().map(|&(a, c)| (a.to_string(), c)).collect()
}

/// A uniformly shaped random dependency tree over `n` tokens: tokens are
/// attached in a random order, each to one already attached.
pub fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> SyntaxTree {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (1..=n).collect();
    order.shuffle(rng);
    let mut heads = vec![0; n + 1];
    for k in 1..n {
        heads[order[k]] = order[rng.gen_range(0..k)];
    }
    let tags = ["NN", "VBZ", "DT", "JJ", "IN", "WP"];
    let rels = ["nsubj", "obj", "det", "amod", "case", "obl"];
    let tokens = (1..=n)
        .map(|i| SyntaxToken {
            index: i,
            form: format!("w{}", rng.gen_range(0..50)),
            pos: tags[rng.gen_range(0..tags.len())].into(),
            head: heads[i],
            deprel: if heads[i] == 0 { "root".into() } else { rels[rng.gen_range(0..rels.len())].into() },
        })
        .collect();
    SyntaxTree::new(tokens, 1).unwrap()
}
