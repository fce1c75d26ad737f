//! One line per acceptance criterion; the process fails if any line does.
//!
//! Run with `cargo test -p stcgn-core --test acceptance`. The mechanism
//! experiment trains six desk-size models and dominates the runtime.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use stcgn_core::answer::{soft_bce_from_logits, soft_bce_loss, soft_score, vqa_score};
use stcgn_core::conllu::{decompose, SyntaxTree};
use stcgn_core::encoder::convolution_units;
use stcgn_core::gradcheck::{self, small_config, Status};
use stcgn_core::synth::{self, SynthSpec};
use stcgn_core::train::{self, Splits};
use stcgn_core::{checkpoint, AnswerSpace, Graph, Model, ModelConfig, SoftTarget, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut groups = 0;
    for seed in 0..5 {
        let cfg = small_config(seed);
        let (_, tree, scene, _) = gradcheck::probe(&cfg, seed).map_err(|e| e.to_string())?;
        if cfg.hidden_dim != 16 || scene.num_entities() != 4 || decompose(&tree).len() != 3 {
            return Err("probe dimensions drifted from d_h=16, K=4, s=3".into());
        }
        for r in gradcheck::gradcheck(&cfg, None, seed, 24).map_err(|e| e.to_string())? {
            if let Status::Checked { max_rel_err, .. } = r.status {
                worst = worst.max(max_rel_err);
                groups += 1;
            }
            if !r.passed() {
                return Err(format!("seed {seed}: {r}"));
            }
        }
    }
    let took = start.elapsed();
    check(
        worst < gradcheck::TOLERANCE && took < Duration::from_secs(120),
        format!("5 seeds, {groups} parameter groups, worst rel err {worst:.2e}, {:.1} s", took.as_secs_f64()),
    )
}

fn vocab_model(cfg: &ModelConfig) -> Model {
    let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let answers = AnswerSpace::new(["a", "b", "c", "d"].map(String::from).to_vec()).unwrap();
    let table = stcgn_core::model::word_table(cfg, &words).unwrap();
    Model::new(cfg.clone(), answers, table).unwrap()
}

fn normalization_suite() -> Outcome {
    let mut worst = 0.0f64;
    let mut sums = 0usize;
    let mut rng = common::rng(2);
    for trial in 0..1000 {
        // A fresh parameter draw every hundred trials.
        let model = vocab_model(&small_config(trial as u64 / 100));
        let tree = common::random_tree(rng.gen_range(1..=12), &mut rng);
        let k = rng.gen_range(2..=8);
        let scale = rng.gen_range(0.1..10.0);
        let mut scene = common::random_scene(k, model.config.entity_dim, &mut rng);
        scene.entities.scale_assign(scale);

        let mut g = Graph::new();
        let out = model.forward(&mut g, &tree, &scene).map_err(|e| e.to_string())?;
        let mut record = |t: &Tensor, axis: usize| {
            let (r, c) = t.dims2();
            let lanes: Vec<f64> = if axis == 0 {
                (0..c).map(|j| (0..r).map(|i| t.at(i, j)).sum()).collect()
            } else {
                (0..r).map(|i| t.row(i).iter().sum()).collect()
            };
            for s in lanes {
                worst = worst.max((s - 1.0).abs());
                sums += 1;
            }
        };
        for a in &out.encoding.gat_attention {
            record(g.value(*a), 0);
        }
        for (_, alpha) in &out.messages.instructions {
            record(g.value(*alpha), 0);
        }
        for w in &out.messages.weights {
            record(g.value(*w), 1);
        }
        record(g.value(out.head.beta), 0);
    }
    check(worst <= 1e-9, format!("1000 trials, {sums} normalized lanes, worst |sum - 1| = {worst:.1e}"))
}

fn structural_suite() -> Outcome {
    let mut rng = common::rng(3);
    let cap = ModelConfig::default().max_subtree_len;
    for trial in 0..500 {
        let tree: SyntaxTree = common::random_tree(rng.gen_range(1..=20), &mut rng);
        let units = decompose(&tree);
        let non_leaf = (1..=tree.len()).filter(|&h| tree.tokens.iter().any(|t| t.head == h)).count();
        if non_leaf > 0 && units.len() != non_leaf {
            return Err(format!("tree {trial}: {} subtrees for {non_leaf} non-leaf tokens", units.len()));
        }
        let mut seen = vec![0usize; tree.len() + 1];
        for u in &units {
            for &c in &u.children {
                if tree.tokens[c - 1].head != u.head {
                    return Err(format!("tree {trial}: {c} listed under {} but its head differs", u.head));
                }
                seen[c] += 1;
            }
        }
        if (1..=tree.len()).any(|t| seen[t] != usize::from(tree.tokens[t - 1].head != 0)) {
            return Err(format!("tree {trial}: an edge is missing or repeated"));
        }
        if let Some(u) = convolution_units(&tree, cap).iter().find(|u| u.len() > cap) {
            return Err(format!("tree {trial}: truncated subtree of length {}", u.len()));
        }
    }
    Ok(format!("500 trees up to 20 tokens, every edge covered once, subtrees capped at {cap}"))
}

fn equivariance_suite() -> Outcome {
    let mut rng = common::rng(4);
    let cfg = small_config(4);
    let tree = common::sample_tree();
    let model = common::small_model(&cfg, &tree);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let scene = common::random_scene(rng.gen_range(2..=9), cfg.entity_dim, &mut rng);
        let k = scene.num_entities();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let moved = scene.permuted(&perm);
        let (p0, t0) = model.predict(&tree, &scene).map_err(|e| e.to_string())?;
        let (p1, t1) = model.predict(&tree, &moved).map_err(|e| e.to_string())?;
        let mut note = |d: f64| worst = worst.max(d);
        for (a, b) in p0.p.iter().zip(&p1.p) {
            note((a - b).abs());
        }
        for r in 0..k {
            note((t1.final_attn[r] - t0.final_attn[perm[r]]).abs());
        }
        for (a, b) in t0.instr_attn.iter().flatten().zip(t1.instr_attn.iter().flatten()) {
            note((a - b).abs());
        }
        for (w0, w1) in t0.msg_weights.iter().zip(&t1.msg_weights) {
            for j in 0..k {
                for i in 0..k {
                    note((w1[j][i] - w0[perm[j]][perm[i]]).abs());
                }
            }
        }
        let mut g0 = Graph::new();
        let mut g1 = Graph::new();
        let o0 = model.forward(&mut g0, &tree, &scene).map_err(|e| e.to_string())?;
        let o1 = model.forward(&mut g1, &tree, &moved).map_err(|e| e.to_string())?;
        let v0 = common::mat(g0.value(o0.messages.v_out));
        let expected: common::Mat = perm.iter().map(|&p| v0[p].clone()).collect();
        note(common::max_diff(&common::mat(g1.value(o1.messages.v_out)), &expected));
    }
    check(worst <= 1e-9, format!("100 permuted scenes, worst elementwise gap {worst:.1e}"))
}

fn metric_suite() -> Outcome {
    for count in 0u32..=10 {
        let expected = match count {
            0 => 0.0,
            1 => 1.0 / 3.0,
            2 => 2.0 / 3.0,
            _ => 1.0,
        };
        let counts = common::counts(&[("x", count)]);
        if soft_score(count) != expected || vqa_score("x", &counts) != expected {
            return Err(format!("count {count}: got {}", vqa_score("x", &counts)));
        }
    }
    if vqa_score("y", &common::counts(&[("x", 5)])) != 0.0 {
        return Err("unannotated answer scored above zero".into());
    }
    let space = AnswerSpace::new(vec!["x".into(), "y".into()]).unwrap();
    let y = SoftTarget::from_counts(&space, &common::counts(&[("x", 2)])).y;
    check(y.data()[0] == 2.0 / 3.0, format!("counts 0..10 exact, soft target for 2 votes = {}", y.data()[0]))
}

fn loss_suite() -> Outcome {
    let space = AnswerSpace::new((0..5).map(|i| format!("a{i}")).collect()).unwrap();
    let target = SoftTarget::from_counts(&space, &Default::default());
    let direct = soft_bce_loss(&Tensor::full(&[5], 0.5), &target).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[1, 5]));
    let loss = soft_bce_from_logits(&mut g, logits, &target).map_err(|e| e.to_string())?;
    let graph_value = g.value(loss).item();
    let ln2 = std::f64::consts::LN_2;
    check(
        (direct - ln2).abs() <= 1e-9 && (graph_value - ln2).abs() <= 1e-9,
        format!("L = {direct:.12} (direct), {graph_value:.12} (graph), ln 2 = {ln2:.12}"),
    )
}

fn overfit_experiment() -> Outcome {
    let start = Instant::now();
    let samples = synth::generate(&SynthSpec {
        num_instances: 64,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        split: [1.0, 0.0, 0.0],
        ..ModelConfig::desk()
    };
    let splits = Splits::new(&samples, &cfg.split).map_err(|e| e.to_string())?;
    let report = train::train_splits(&cfg, &splits).map_err(|e| e.to_string())?;
    let score = train::evaluate(&report.model, &splits.train, 1).map_err(|e| e.to_string())?.score;
    // Mean loss over consecutive five-epoch blocks.
    let smoothed: Vec<f64> = report
        .epochs
        .chunks(5)
        .map(|c| c.iter().map(|e| e.loss).sum::<f64>() / c.len() as f64)
        .collect();
    let decreasing = smoothed.windows(2).all(|w| w[1] < w[0]);
    let took = start.elapsed();
    let blocks: Vec<String> = smoothed.iter().map(|l| format!("{l:.4}")).collect();
    check(
        report.epochs.len() == 30 && score >= 0.95 && decreasing && took < Duration::from_secs(300),
        format!(
            "64 instances, 30 epochs, train score {score:.4}, block losses [{}], {:.1} s",
            blocks.join(" "),
            took.as_secs_f64()
        ),
    )
}

fn mechanism_experiment() -> Outcome {
    let start = Instant::now();
    // Few distractors and exact positions: relational questions then need the
    // neighbour's colour, which only message passing can bring to the anchor.
    let samples = synth::generate(&SynthSpec {
        num_instances: 8000,
        min_entities: 4,
        max_entities: 6,
        jitter: 0.0,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let base = ModelConfig {
        epochs: 12,
        ..ModelConfig::desk()
    };
    let splits = Splits::new(&samples, &base.split).map_err(|e| e.to_string())?;
    let relational = |cfg: &ModelConfig| -> Result<f64, String> {
        let report = train::train_splits(cfg, &splits).map_err(|e| e.to_string())?;
        let eval = train::evaluate(&report.model, &splits.val, 1).map_err(|e| e.to_string())?;
        eval.relational().ok_or_else(|| "no relational questions in val".to_string())
    };
    let mut full = Vec::new();
    let mut none = Vec::new();
    for seed in 0..3 {
        let cfg = ModelConfig { seed, ..base.clone() };
        full.push(relational(&cfg)?);
        let t0 = train::variant_config(&cfg, "no_message_passing").map_err(|e| e.to_string())?;
        none.push(relational(&t0)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");

    // The sweep only has to produce every row; a short run suffices.
    let tiny = Splits::new(&samples[..60], &[0.5, 0.5, 0.0]).map_err(|e| e.to_string())?;
    let sweep_cfg = ModelConfig { epochs: 1, ..base.clone() };
    let rows = train::sweep_steps(&sweep_cfg, &tiny, &train::DEFAULT_SWEEP).map_err(|e| e.to_string())?;
    let csv = train::sweep_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let steps_col: Vec<&str> = lines.iter().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    let sweep_ok = lines.len() == 6
        && lines[0].starts_with("steps,")
        && steps_col == ["0", "1", "2", "4", "6"]
        && lines.iter().all(|l| l.split(',').count() == lines[0].split(',').count());

    check(
        mean(&full) > mean(&none) && sweep_ok,
        format!(
            "relational val T=4 {} (mean {:.3}) vs T=0 {} (mean {:.3}); sweep CSV {} rows{}; {:.0} s",
            fmt(&full),
            mean(&full),
            fmt(&none),
            mean(&none),
            lines.len().saturating_sub(1),
            if sweep_ok { "" } else { " MALFORMED" },
            start.elapsed().as_secs_f64()
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let cfg = small_config(9);
    let tree = common::sample_tree();
    let model = common::small_model(&cfg, &tree);
    let scene = common::random_scene(5, cfg.entity_dim, &mut common::rng(9));
    let r = common::reference(&model, &tree, &scene);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &tree, &scene).map_err(|e| e.to_string())?;
    let m = |v| common::mat(g.value(v));
    let g_rows: common::Mat = out
        .encoding
        .subtree_features
        .iter()
        .map(|f| g.value(f.g).data().to_vec())
        .collect();
    let mut stages = vec![
        ("g", common::max_diff(&g_rows, &r.g)),
        ("h*", common::max_diff(&m(out.encoding.h_star.unwrap()), &r.h_star)),
        ("H", common::max_diff(&m(out.encoding.h), &r.h)),
        ("q", common::max_diff(&m(out.encoding.q), &vec![r.q.clone()])),
    ];
    for (t, (c, _)) in out.messages.instructions.iter().enumerate() {
        stages.push(("c_t", common::max_diff(&m(*c), &vec![r.c[t].clone()])));
        stages.push(("w", common::max_diff(&m(out.messages.weights[t]), &r.w[t])));
    }
    stages.push(("v_out", common::max_diff(&m(out.messages.v_out), &r.v_out)));
    stages.push(("beta", common::max_diff(&vec![g.value(out.head.beta).data().to_vec()], &vec![r.beta.clone()])));
    stages.push(("p", common::max_diff(&vec![g.value(out.head.probs).data().to_vec()], &vec![r.p.clone()])));
    let (name, worst) = stages.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    check(
        worst <= 1e-9 && out.messages.instructions.len() == cfg.steps,
        format!("{} stage comparisons, worst gap {worst:.1e} at {}", stages.len(), if name.is_empty() { "-" } else { name }),
    )
}

fn determinism() -> Outcome {
    let samples = synth::generate(&SynthSpec {
        num_instances: 48,
        seed: 5,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        epochs: 4,
        seed: 11,
        threads: 1,
        ..ModelConfig::desk()
    };
    let splits = Splits::new(&samples, &cfg.split).map_err(|e| e.to_string())?;
    let run = || -> Result<(Vec<u8>, String), String> {
        let r = train::train_splits(&cfg, &splits).map_err(|e| e.to_string())?;
        Ok((checkpoint::to_bytes(&r.model).map_err(|e| e.to_string())?, r.log_text()))
    };
    let (c1, l1) = run()?;
    let (c2, l2) = run()?;
    check(
        c1 == c2 && l1 == l2,
        format!("two runs: checkpoints {} bytes identical={}, logs identical={}", c1.len(), c1 == c2, l1 == l2),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("normalization suite", normalization_suite),
        ("structural suite", structural_suite),
        ("permutation equivariance", equivariance_suite),
        ("metric conformance", metric_suite),
        ("loss sanity", loss_suite),
        ("overfit experiment", overfit_experiment),
        ("mechanism experiment", mechanism_experiment),
        ("oracle equivalence", oracle_equivalence),
        ("determinism", determinism),
    ];
    // Filter like the default harness: `cargo test --test acceptance -- overfit`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
