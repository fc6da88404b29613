//! Acceptance checks, one line per criterion.
//!
//! Runs without the default harness so every line reaches the output:
//! `cargo test --test acceptance`. Failures are reported, not fatal; set
//! `ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.
//! `ACCEPTANCE_ONLY=1,9` restricts the run to the listed criteria.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use idiomlab::assignment::{decode_group, solve_assignment, BlankScores};
use idiomlab::attribution::{attribute, integrated_gradients};
use idiomlab::corpus::{
    build_token_vocabulary, generate_groups, generate_synthetic, split_80_10_10, ClozeExample, IdiomId, SyntheticSpec,
};
use idiomlab::encoder::HiddenStates;
use idiomlab::heads::{
    score_context_pool, score_dual, score_dual_enlarged, score_enlarged, score_idm_emb, DualEmbeddingTable, HeadVariant,
};
use idiomlab::metrics::{evaluate, mrr, Predictor, Scored};
use idiomlab::model::{ClozeModel, ModelConfig};
use idiomlab::tensor::{check_gradient_many, Tape, Tensor, Var};
use idiomlab::training::{example_loss, LossReport, TrainConfig, Trainer};
use idiomlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Model = ClozeModel<f64>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// Reduces an op output to a scalar with fixed random weights so every output coordinate matters.
fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(random_tensor(&mut rng, &shape, -1.0, 1.0))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpCase = (&'static str, Vec<Vec<usize>>, (f64, f64), Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let any = (-1.5, 1.5);
    let pos = (0.2, 2.0);
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], any, Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul(vector)", vec![vec![3, 4], vec![4]], any, Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], any, Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        ("add", vec![vec![2, 3], vec![2, 3]], any, Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], any, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_row", vec![vec![3, 4], vec![4]], any, Box::new(|t, v| t.mul_row(v[0], v[1]))),
        ("add_bias", vec![vec![3, 4], vec![4]], any, Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("add_bias(scalar)", vec![vec![3, 1], vec![1]], any, Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("dot", vec![vec![5], vec![5]], any, Box::new(|t, v| t.dot(v[0], v[1]))),
        ("scale", vec![vec![2, 3]], any, Box::new(|t, v| t.scale(v[0], -2.5))),
        ("softmax", vec![vec![3, 5]], any, Box::new(|t, v| t.softmax(v[0]))),
        ("softmax(vector)", vec![vec![6]], any, Box::new(|t, v| t.softmax(v[0]))),
        ("log", vec![vec![2, 3]], pos, Box::new(|t, v| t.log(v[0], 1e-300))),
        ("max_axis(0)", vec![vec![4, 3]], any, Box::new(|t, v| t.max_axis(v[0], 0))),
        ("max_axis(1)", vec![vec![4, 3]], any, Box::new(|t, v| t.max_axis(v[0], 1))),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], any, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-12))),
        ("gelu", vec![vec![3, 4]], (-3.0, 3.0), Box::new(|t, v| t.gelu(v[0]))),
        ("gather", vec![vec![5, 3]], any, Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2]))),
        ("row", vec![vec![4, 3]], any, Box::new(|t, v| t.row(v[0], 2))),
        ("concat(0)", vec![vec![2, 3], vec![1, 3]], any, Box::new(|t, v| t.concat(&[v[0], v[1]], 0))),
        ("concat(1)", vec![vec![2, 3], vec![2, 2]], any, Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("concat(vector)", vec![vec![3], vec![2]], any, Box::new(|t, v| t.concat(&[v[0], v[1]], 0))),
        (
            "masked_fill",
            vec![vec![2, 3]],
            any,
            Box::new(|t, v| t.masked_fill(v[0], &[false, true, false, true, false, false], -7.0)),
        ),
        ("slice_cols", vec![vec![3, 5]], any, Box::new(|t, v| t.slice_cols(v[0], 1, 4))),
        ("reshape", vec![vec![2, 6]], any, Box::new(|t, v| t.reshape(v[0], vec![3, 4]))),
        ("sum", vec![vec![2, 3]], any, Box::new(|t, v| t.sum(v[0]))),
        ("select", vec![vec![2, 3]], any, Box::new(|t, v| t.select(v[0], 4))),
    ]
}

fn gradient_model() -> Result<(Model, Vec<ClozeExample>)> {
    let corpus = generate_synthetic(&SyntheticSpec {
        idioms: 12,
        examples: 2,
        candidates: 4,
        seed: 5,
        ..SyntheticSpec::default()
    })?;
    let tokens = build_token_vocabulary(&corpus.examples, &corpus.vocab);
    let mut config = ModelConfig::new(HeadVariant::Dual);
    config.encoder.layers = 2;
    config.encoder.hidden = 16;
    config.encoder.heads = 2;
    config.encoder.ffn = 32;
    Ok((Model::new(config, tokens, corpus.vocab)?, corpus.examples))
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_op = ("", 0.0f64);
    for (name, shapes, (lo, hi), f) in op_cases() {
        let xs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s, lo, hi)).collect();
        let err = check_gradient_many(
            |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y)
            },
            &xs,
            1e-5,
        )?;
        if err > worst_op.1 || worst_op.0.is_empty() {
            worst_op = (name, err);
        }
    }

    let (model, examples) = gradient_model()?;
    let xs: Vec<Tensor<f64>> = model.params().entries().iter().map(|e| e.tensor.clone()).collect();
    let scalars: usize = xs.iter().map(Tensor::len).sum();
    let model_err = check_gradient_many(
        |t, v| {
            let mut total: Option<Var> = None;
            for ex in &examples {
                let (l, _) = example_loss(t, v, &model, ex, true, None)?;
                total = Some(match total {
                    Some(acc) => t.add(acc, l)?,
                    None => l,
                });
            }
            Ok(total.expect("two examples"))
        },
        &xs,
        1e-5,
    )?;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.1 <= 1e-4 && model_err <= 1e-4 && secs < 120.0,
        format!(
            "{} ops, worst {} {:.2e}; full cp-de loss (L=2, d=16, {scalars} parameters) {:.2e}; limit 1e-4; {secs:.1}s (< 120s)",
            op_cases().len(),
            worst_op.0,
            worst_op.1,
            model_err
        ),
    )
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_2() -> Result<Outcome> {
    let ids = |n: usize| (0..n).map(IdiomId).collect::<Vec<_>>();
    let m = |rows: usize, data: &[f64]| Tensor::matrix(rows, data.len() / rows, data.to_vec());
    let states = HiddenStates::new(m(3, &[0.0, 1.0, 1.0, 0.0, 2.0, 0.0])?, 1)?;

    let mut examples = Vec::new();
    let idm = score_idm_emb(&[1.0, 2.0], &ids(2), &m(2, &[1.0, 1.0, 2.0, 0.0])?, &[1.0, 1.0], 0.0)?;
    examples.push(("idm", max_diff(&idm.probs, &[0.7311, 0.2689])));
    let enl = score_enlarged(&[1.0, 0.0], &m(3, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0])?)?;
    examples.push(("enlarged", max_diff(&enl.probs, &[0.6652, 0.2447, 0.0900])));
    let cp = score_context_pool(&states, &ids(2), &m(2, &[1.0, 0.0, 0.0, 1.0])?)?;
    examples.push(("pool", max_diff(&cp.probs, &[0.8808, 0.1192])));
    let dual_table = DualEmbeddingTable::new(m(2, &[1.0, 0.0, 0.0, 1.0])?, m(2, &[0.0, 1.0, 1.0, 0.0])?)?;
    let de = score_dual(&states, &ids(2), &dual_table)?;
    examples.push(("dual", max_diff(&de.probs, &[0.5, 0.5])));
    let summed = DualEmbeddingTable::new(m(2, &[0.5, 0.0, 0.0, 0.0])?, m(2, &[0.5, 0.0, 0.0, 0.0])?)?;
    let dee = score_dual_enlarged(&[1.0, 0.0], &summed)?;
    examples.push(("dual-enlarged", max_diff(&dee.probs, &[0.7311, 0.2689])));
    let loss = LossReport::from_probabilities(&[(0.5, Some(0.25))]);
    examples.push(("loss", (loss.total - 2.0794).abs()));
    let worst_example = examples.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });

    // Identities on random tables, against each other and against a hand softmax.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut reduction, mut summed_gap) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (n, d, v, k) = (rng.random_range(1..8), rng.random_range(1..6), rng.random_range(2..10), rng.random_range(1..5));
        let h = random_tensor(&mut rng, &[n, d], -2.0, 2.0);
        let b = rng.random_range(0..n);
        let hs = HiddenStates::new(h.clone(), b)?;
        let u = random_tensor(&mut rng, &[v, d], -2.0, 2.0);
        let w = random_tensor(&mut rng, &[v, d], -2.0, 2.0);
        let cands: Vec<IdiomId> = (0..k).map(|_| IdiomId(rng.random_range(0..v))).collect();

        let same = DualEmbeddingTable::new(u.clone(), u.clone())?;
        let a = score_dual(&hs, &cands, &same)?;
        let c = score_context_pool(&hs, &cands, &u)?;
        reduction = reduction.max(max_diff(&a.probs, &c.probs));

        let h_b = h.row(b);
        let both = DualEmbeddingTable::new(u.clone(), w.clone())?;
        let sum: Vec<f64> = u.data().iter().zip(w.data()).map(|(x, y)| x + y).collect();
        let sum = Tensor::matrix(v, d, sum)?;
        let de = score_dual_enlarged(h_b, &both)?;
        let e = score_enlarged(h_b, &sum)?;
        summed_gap = summed_gap.max(max_diff(&de.probs, &e.probs));

        let hand: Vec<f64> = (0..v).map(|i| sum.row(i).iter().zip(h_b).map(|(x, y)| x * y).sum()).collect();
        summed_gap = summed_gap.max(max_diff(&softmax(&hand), &e.probs));
    }
    outcome(
        worst_example.1 <= 1e-4 && reduction <= 1e-12 && summed_gap <= 1e-12,
        format!(
            "{} hand examples, worst {} {:.1e} (<= 1e-4); dual->pool reduction {:.1e}, dual-enlarged = enlarged(u+v) {:.1e} (<= 1e-12)",
            examples.len(),
            worst_example.0,
            worst_example.1,
            reduction,
            summed_gap
        ),
    )
}

// Minimum over all injections, summing each candidate in row order like the solver does.
fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], cols: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        if cols.len() == cost.len() {
            let total: f64 = cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            *best = best.min(total);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cols.push(j);
                go(cost, cols, used, best);
                cols.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, &mut Vec::new(), &mut vec![false; cost[0].len()], &mut best);
    best
}

fn criterion_3() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut exact, mut feasible) = (0, 0);
    let total = 500;
    for i in 0..total {
        let n = rng.random_range(1..=7);
        let m = rng.random_range(1..=n);
        // Alternate small integers (many ties) with reals.
        let cost: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..n)
                    .map(|_| if i % 2 == 0 { f64::from(rng.random_range(-5i32..6)) } else { rng.random_range(-10.0..10.0) })
                    .collect()
            })
            .collect();
        let a = solve_assignment(&cost)?;
        if a.total == brute_force(&cost) {
            exact += 1;
        }
        let mut cols = a.columns.clone();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() == m && a.columns.iter().all(|&j| j < n) {
            feasible += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        exact == total && feasible == total && secs < 10.0,
        format!("{exact}/{total} equal to brute force, {feasible}/{total} distinct columns, {secs:.2}s (< 10s)"),
    )
}

struct UniformGuess;

impl Predictor for UniformGuess {
    fn score(&self, ex: &ClozeExample) -> Result<Scored> {
        let n: u64 = ex.id.trim_start_matches("syn-").parse().expect("synthetic id");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.set_stream(n);
        let k = ex.candidates.len();
        let pick = rng.random_range(0..k);
        Ok(Scored {
            probs: (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect(),
            gold_rank: None,
        })
    }
}

fn criterion_4() -> Result<Outcome> {
    let m = mrr(&[1, 2, 4])?;
    let corpus = generate_synthetic(&SyntheticSpec {
        examples: 10_000,
        seed: 4,
        ..SyntheticSpec::default()
    })?;
    let report = evaluate(&UniformGuess, &corpus.examples, "random")?;
    let chance = 1.0 / 7.0;
    outcome(
        (m - 0.5833).abs() <= 1e-4 && (report.accuracy - chance).abs() <= 0.02,
        format!(
            "mrr([1,2,4]) = {m:.4} (0.5833 +- 1e-4); uniform K=7 accuracy {:.4} over {} examples (1/7 +- 0.02)",
            report.accuracy, report.count
        ),
    )
}

struct Trained {
    models: Vec<(HeadVariant, Model)>,
    test: Vec<ClozeExample>,
    spec: SyntheticSpec,
    epochs: usize,
    secs: f64,
}

impl Trained {
    fn model(&self, head: HeadVariant) -> &Model {
        &self.models.iter().find(|(h, _)| *h == head).expect("trained head").1
    }
}

const ACCEPTANCE_EPOCHS: usize = 2;

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let spec = SyntheticSpec {
            idioms: 120,
            classes: 4,
            topics: 10,
            examples: 20_000,
            candidates: 7,
            seed: 13,
        };
        let corpus = generate_synthetic(&spec).expect("corpus");
        let (train, _dev, test) = split_80_10_10(&corpus.examples);
        let tokens = build_token_vocabulary(&corpus.examples, &corpus.vocab);
        let heads = [HeadVariant::IdiomEmb, HeadVariant::IdiomEmbEc, HeadVariant::ContextPool, HeadVariant::Dual];
        let models = heads
            .iter()
            .map(|&head| {
                let model = Model::new(ModelConfig::new(head), tokens.clone(), corpus.vocab.clone()).expect("model");
                let config = TrainConfig {
                    epochs: ACCEPTANCE_EPOCHS,
                    ..TrainConfig::desk()
                };
                let mut trainer = Trainer::new(model, config).expect("trainer");
                trainer.fit(&train, None).expect("training");
                (head, trainer.model)
            })
            .collect();
        Trained {
            models,
            test,
            spec,
            epochs: ACCEPTANCE_EPOCHS,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn criterion_5() -> Result<Outcome> {
    // Linear F: attributions are exactly w_i x_i.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_tensor(&mut rng, &[6, 4], -2.0, 2.0);
    let x = random_tensor(&mut rng, &[6, 4], -2.0, 2.0);
    let ig = integrated_gradients(
        |t: &mut Tape<'_, f64>, v| {
            let wv = t.constant(w.clone())?;
            let p = t.mul(v, wv)?;
            t.sum(p)
        },
        &x,
        &Tensor::zeros(vec![6, 4]),
        7,
    )?;
    let expect: Vec<f64> = w.data().iter().zip(x.data()).map(|(a, b)| a * b).collect();
    let linear = max_diff(ig.attributions.data(), &expect);

    let lab = trained();
    let model = lab.model(HeadVariant::Dual);
    let mut worst = 0.0f64;
    for ex in lab.test.iter().take(20) {
        let r = attribute(model, ex, ex.gold, 128)?;
        let span = (r.f_input - r.f_baseline).abs();
        worst = worst.max(r.completeness_gap / span);
    }
    let fixed = &lab.test[0];
    let span = {
        let r = attribute(model, fixed, fixed.gold, 1)?;
        (r.f_input - r.f_baseline).abs()
    };
    // m = 512 is reported only, to show the rate of convergence.
    let gaps: Vec<f64> = [8, 32, 128, 512]
        .iter()
        .map(|&m| attribute(model, fixed, fixed.gold, m).map(|r| r.completeness_gap / span))
        .collect::<Result<_>>()?;
    outcome(
        worst <= 0.01 && linear <= 1e-10 && gaps[2] <= gaps[0],
        format!(
            "trained cp-de, worst relative gap over 20 examples at m=128 {worst:.2e} (<= 1e-2); linear model {linear:.1e} (<= 1e-10); relative gap on one example at m=8/32/128/512 {:.2e}/{:.2e}/{:.2e}/{:.2e}",
            gaps[0], gaps[1], gaps[2], gaps[3]
        ),
    )
}

fn test_accuracy(model: &Model, test: &[ClozeExample]) -> Result<(f64, Option<f64>)> {
    let r = evaluate(model, test, "test")?;
    Ok((r.accuracy, r.mrr))
}

fn criterion_6() -> Result<Outcome> {
    let lab = trained();
    let (de, _) = test_accuracy(lab.model(HeadVariant::Dual), &lab.test)?;
    let (cp, _) = test_accuracy(lab.model(HeadVariant::ContextPool), &lab.test)?;
    let (idm, _) = test_accuracy(lab.model(HeadVariant::IdiomEmb), &lab.test)?;
    outcome(
        de >= 0.80 && de >= cp && cp >= idm,
        format!(
            "test accuracy cp-de {de:.4} (>= 0.80), cp {cp:.4}, idm {idm:.4}; need cp-de >= cp >= idm; V={} N={} seed={} {} epochs, 4 heads trained in {:.0}s",
            lab.spec.idioms, lab.spec.examples, lab.spec.seed, lab.epochs, lab.secs
        ),
    )
}

fn criterion_7() -> Result<Outcome> {
    let lab = trained();
    let (_, ec) = test_accuracy(lab.model(HeadVariant::IdiomEmbEc), &lab.test)?;
    let (_, plain) = test_accuracy(lab.model(HeadVariant::IdiomEmb), &lab.test)?;
    let (ec, plain) = (ec.expect("idm-ec ranks"), plain.expect("idm ranks"));
    outcome(ec > plain, format!("test MRR idm-ec {ec:.4} > idm {plain:.4}"))
}

fn group_accuracy(model: &Model, examples: &[ClozeExample], groups: &[idiomlab::corpus::CandidateGroup]) -> Result<(f64, f64, usize)> {
    let predictions: Vec<Vec<f64>> = examples
        .iter()
        .map(|ex| model.predict(ex).map(|p| p.distribution.probs))
        .collect::<Result<_>>()?;
    let (mut joint, mut single, mut total) = (0, 0, 0);
    let mut at = 0;
    for g in groups {
        let members = &examples[at..at + g.members.len()];
        let probs = &predictions[at..at + g.members.len()];
        at += g.members.len();
        let blanks: Vec<BlankScores<'_>> = members
            .iter()
            .zip(probs)
            .map(|(ex, p)| BlankScores { candidates: &ex.candidates, probs: p })
            .collect();
        let d = decode_group(&g.candidates, &blanks)?;
        for ((ex, p), choice) in members.iter().zip(probs).zip(&d.choices) {
            total += 1;
            joint += usize::from(*choice == ex.gold_idiom());
            single += usize::from(idiomlab::heads::argmax(p) == ex.gold);
        }
    }
    Ok((joint as f64 / total as f64, single as f64 / total as f64, total))
}

fn permutations_best(lp: &[Vec<f64>]) -> f64 {
    let neg: Vec<Vec<f64>> = lp.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
    -brute_force(&neg)
}

fn criterion_8() -> Result<Outcome> {
    let lab = trained();
    let spec = &lab.spec;
    let (examples, groups) = generate_groups(spec, 1000, 4, 8)?;

    // A briefly trained model leaves errors for joint decoding to fix.
    let corpus = generate_synthetic(spec)?;
    let (train, _, _) = split_80_10_10(&corpus.examples);
    let weak = Model::new(
        ModelConfig::new(HeadVariant::Dual),
        lab.model(HeadVariant::Dual).tokens().clone(),
        corpus.vocab.clone(),
    )?;
    let mut trainer = Trainer::new(weak, TrainConfig { epochs: 1, ..TrainConfig::desk() })?;
    trainer.fit(&train, Some(150))?;
    let weak = trainer.model;

    let (j_full, s_full, n) = group_accuracy(lab.model(HeadVariant::Dual), &examples, &groups)?;
    let (j_weak, s_weak, _) = group_accuracy(&weak, &examples, &groups)?;

    // Enumeration oracle on groups of three.
    let (small_ex, small_groups) = generate_groups(spec, 100, 3, 9)?;
    let mut oracle_gap = 0.0f64;
    for (g, members) in small_groups.iter().zip(small_ex.chunks(3)) {
        let probs: Vec<Vec<f64>> = members
            .iter()
            .map(|ex| weak.predict(ex).map(|p| p.distribution.probs))
            .collect::<Result<_>>()?;
        let blanks: Vec<BlankScores<'_>> = members
            .iter()
            .zip(&probs)
            .map(|(ex, p)| BlankScores { candidates: &ex.candidates, probs: p })
            .collect();
        let d = decode_group(&g.candidates, &blanks)?;
        let lp: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|x| x.ln()).collect()).collect();
        oracle_gap = oracle_gap.max((d.log_likelihood - permutations_best(&lp)).abs());
    }
    outcome(
        j_full >= s_full && j_weak >= s_weak && oracle_gap <= 1e-9,
        format!(
            "{n} blanks in 1000 groups: decode {j_full:.4} vs argmax {s_full:.4} (trained), {j_weak:.4} vs {s_weak:.4} (150 steps); m=3 enumeration gap {oracle_gap:.1e}"
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_idiomlab"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()?;
    if !out.status.success() {
        return Err(idiomlab::Error::Config(format!(
            "idiomlab {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    Ok(())
}

fn criterion_9() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    run_cli(dir, &["synth", "--examples", "600", "--out", "data"])?;
    let files = ["model.ckpt", "eval_dev.json", "eval_test.json", "train_log.jsonl", "manifest-train.json"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(dir.join("run"));
        run_cli(
            dir,
            &[
                "train", "--jobs", "1", "--head", "cp-de", "--data", "data/train.jsonl", "--dev", "data/dev.jsonl",
                "--idioms", "data/idioms.json", "--epochs", "1", "--warmup", "3", "--hidden", "32", "--out", "run",
            ],
        )?;
        run_cli(
            dir,
            &["eval", "--jobs", "1", "--checkpoint", "run/model.ckpt", "--data", "data/test.jsonl", "--out", "run"],
        )?;
        runs.push(files.iter().map(|f| fs::read(dir.join("run").join(f))).collect::<std::io::Result<Vec<_>>>()?);
    }
    let same: Vec<&str> = files.iter().zip(runs[0].iter().zip(&runs[1])).filter(|(_, (a, b))| a == b).map(|(f, _)| *f).collect();
    outcome(
        same.len() == files.len(),
        format!("{}/{} artifacts bit-identical across two single-threaded runs ({})", same.len(), files.len(), same.join(", ")),
    )
}

type Criterion = fn() -> Result<Outcome>;

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("gradient fidelity", criterion_1),
        ("formula oracles", criterion_2),
        ("assignment optimality", criterion_3),
        ("metric oracles", criterion_4),
        ("IG completeness", criterion_5),
        ("synthetic learning", criterion_6),
        ("enlarged candidates", criterion_7),
        ("group decoding", criterion_8),
        ("determinism", criterion_9),
    ];
    // ACCEPTANCE_ONLY=1,9 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {} {name}: {} | {detail} [{:.1}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
