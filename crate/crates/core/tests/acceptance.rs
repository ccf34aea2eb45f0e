// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Every criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::error::Error as StdError;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use seqattr::aggregation::{dim_norm, pair_diff, run_pipeline, subword_merge, AggregatorPipeline, NormOrder, Reduction};
use seqattr::attribution::{
    attribute, gradient, input_x_gradient, integrated_gradients, lime, AttributionRequest, DifferentiableTarget,
    EmbeddingTarget, IgConfig, LimeConfig, MaskedScorer, MethodId, MethodSpec, SequenceAttribution, StepProblem,
    TargetLayer,
};
use seqattr::autodiff::{finite_difference_check, Tape, Tensor, Var};
use seqattr::generation::{decode_request, model_inputs, GenerationRequest};
use seqattr::html::{render_html, Colormap};
use seqattr::io::{load_document, save_document, AttributionDocument};
use seqattr::model::{ModelBundle, ModelConfig, TokenId, Tokenizer, PAD_ID};
use seqattr::step_scores::{EmbeddedStep, StepArgs, StepRegistry, StepScoreSpec};
use seqattr::studies::{
    kendall_tau, kendall_tau_naive, parse_records, planted_bias_model, run_cat_study, run_template_study, Case,
    Position, TemplateStudySpec, TermStat, TraceStudySpec,
};

type Outcome = Result<String, Box<dyn StdError>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*).into());
        }
    };
}

fn enc_dec(seed: u64, vocab: usize) -> ModelBundle {
    ModelBundle::init(ModelConfig {
        seed,
        ..ModelConfig::encoder_decoder(vocab)
    })
    .unwrap()
}

fn dec_only(seed: u64, vocab: usize) -> ModelBundle {
    ModelBundle::init(ModelConfig {
        seed,
        ..ModelConfig::decoder_only(vocab)
    })
    .unwrap()
}

fn random_text(rng: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| format!("w{}", rng.random_range(4..vocab)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 1 ---------------------------------------------------------------------

type OpFn = Box<dyn Fn(&mut Tape, Var) -> seqattr::Result<Var>>;

fn weights_like(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|k| (1.3 * k as f64 + 0.7).sin()).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed non-uniform weights.
fn weighted(tape: &mut Tape, y: Var) -> seqattr::Result<Var> {
    let w = tape.constant(weights_like(tape.shape(y)));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn cst(shape: &[usize], offset: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|k| offset + 0.37 * (k as f64 * 0.9).cos()).collect()).unwrap()
}

fn op_cases() -> Vec<(&'static str, Vec<usize>, bool, OpFn)> {
    fn unary(f: fn(&mut Tape, Var) -> seqattr::Result<Var>) -> OpFn {
        Box::new(move |t, x| {
            let y = f(t, x)?;
            weighted(t, y)
        })
    }
    let s23 = vec![2, 3];
    vec![
        ("add", s23.clone(), false, unary(|t, x| {
            let c = t.constant(cst(&[2, 3], 0.1));
            t.add(x, c)
        })),
        ("add_broadcast", vec![3], false, unary(|t, x| {
            let c = t.constant(cst(&[2, 3], 0.1));
            t.add(c, x)
        })),
        ("sub", s23.clone(), false, unary(|t, x| {
            let c = t.constant(cst(&[2, 3], 0.2));
            t.sub(c, x)
        })),
        ("mul", s23.clone(), false, unary(|t, x| t.mul(x, x))),
        ("div", s23.clone(), true, unary(|t, x| {
            let c = t.constant(cst(&[2, 3], 1.0));
            let a = t.div(c, x)?;
            t.div(a, c)
        })),
        ("scale", s23.clone(), false, unary(|t, x| t.scale(x, -2.5))),
        ("matmul_left", s23.clone(), false, unary(|t, x| {
            let w = t.constant(cst(&[3, 4], 0.0));
            t.matmul(x, w)
        })),
        ("matmul_right", s23.clone(), false, unary(|t, x| {
            let w = t.constant(cst(&[4, 2], 0.3));
            t.matmul(w, x)
        })),
        ("transpose", s23.clone(), false, unary(|t, x| {
            let y = t.transpose(x)?;
            t.mul(y, y)
        })),
        ("reshape", s23.clone(), false, unary(|t, x| {
            let y = t.reshape(x, &[3, 2])?;
            t.tanh(y)
        })),
        ("exp", s23.clone(), false, unary(|t, x| t.exp(x))),
        ("ln", s23.clone(), true, unary(|t, x| t.ln(x))),
        ("tanh", s23.clone(), false, unary(|t, x| t.tanh(x))),
        ("relu", s23.clone(), false, unary(|t, x| t.relu(x))),
        ("power_frac", s23.clone(), true, unary(|t, x| t.power(x, 1.7))),
        ("power_int", s23.clone(), false, unary(|t, x| t.power(x, 3.0))),
        ("softmax_rows", s23.clone(), false, unary(|t, x| t.softmax(x, 1))),
        ("softmax_cols", s23.clone(), false, unary(|t, x| t.softmax(x, 0))),
        ("layer_norm", s23.clone(), false, unary(|t, x| t.layer_norm(x, 1, 1e-5))),
        ("embedding", vec![5, 3], false, unary(|t, x| t.embedding(x, &[1, 4, 1, 0]))),
        ("concat", s23.clone(), false, unary(|t, x| {
            let c = t.constant(cst(&[1, 3], 0.4));
            let y = t.concat(&[c, x], 0)?;
            t.tanh(y)
        })),
        ("slice", s23.clone(), false, unary(|t, x| {
            let y = t.slice(x, 1, 1, 3)?;
            t.mul(y, y)
        })),
        ("sum", s23.clone(), false, unary(|t, x| {
            let y = t.sum(x, 0)?;
            t.exp(y)
        })),
        ("mean", s23.clone(), false, unary(|t, x| {
            let y = t.mean(x, 1)?;
            t.exp(y)
        })),
        ("sum_all", s23.clone(), false, Box::new(|t: &mut Tape, x: Var| {
            let y = t.sum_all(x)?;
            t.exp(y)
        })),
        ("dropout", s23, false, unary(|t, x| {
            let y = t.dropout(x, 0.3, 7, true)?;
            t.mul(y, x)
        })),
    ]
}

fn criterion_1() -> Outcome {
    const TOL: f64 = 1e-6;
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut points = 0;
    let mut skipped = 0;
    let mut worst = 0.0f64;
    for (name, shape, positive, f) in op_cases() {
        for _ in 0..3 {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| if positive { rng.random_range(0.3..2.0) } else { rng.random_range(-1.0..1.0) })
                .collect();
            let x = Tensor::new(shape.clone(), data)?;
            let r = finite_difference_check(&*f, &x, H)?;
            ensure!(r.checked > 0, "{name}: every coordinate sits on a kink");
            ensure!(r.max_rel_error <= TOL, "{name}: relative error {:.3e}", r.max_rel_error);
            worst = worst.max(r.max_rel_error);
            skipped += r.skipped.len();
            points += 1;
        }
    }

    let registry = StepRegistry::new();
    let specs = [
        StepScoreSpec::new("probability"),
        StepScoreSpec::new("log_probability"),
        StepScoreSpec::new("entropy"),
        StepScoreSpec::new("crossentropy"),
        StepScoreSpec::new("perplexity"),
        StepScoreSpec::new("logit"),
        StepScoreSpec::new("contrast_prob_diff"),
        StepScoreSpec::mc_dropout(3, 0.1, 5),
    ];
    for model in [dec_only(31, 16), enc_dec(32, 16)] {
        for spec in &specs {
            for _ in 0..2 {
                let source: Vec<TokenId> = (0..2).map(|_| rng.random_range(4..16)).collect();
                let prefix: Vec<TokenId> = (0..2).map(|_| rng.random_range(4..16)).collect();
                let args = StepArgs {
                    target: rng.random_range(4..16),
                    contrast: Some(rng.random_range(4..16)),
                };
                let prefix_emb = model.token_embeddings(&prefix)?;
                let f = |tape: &mut Tape, src: Var| {
                    let p = tape.constant(prefix_emb.clone());
                    let mut step = EmbeddedStep::new(tape, &model, src, Some(p))?;
                    registry.record(tape, &mut step, spec, &args)
                };
                let x = model.token_embeddings(&source)?;
                let r = finite_difference_check(f, &x, H)?;
                ensure!(r.checked > 0, "{}: every coordinate sits on a kink", spec.id);
                ensure!(
                    r.max_rel_error <= TOL,
                    "{} on {}: relative error {:.3e}",
                    spec.id,
                    model.name(),
                    r.max_rel_error
                );
                worst = worst.max(r.max_rel_error);
                skipped += r.skipped.len();
                points += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(points >= 100, "only {points} points");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "{points} points, max rel err {worst:.2e}, {skipped} kink coords skipped, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// 2 ---------------------------------------------------------------------

struct Linear {
    w: Vec<Tensor>,
    c: f64,
}

impl DifferentiableTarget for Linear {
    fn value(&self, inputs: &[Tensor]) -> seqattr::Result<f64> {
        let mut v = self.c;
        for (x, w) in inputs.iter().zip(&self.w) {
            v += x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(v)
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> seqattr::Result<(f64, Vec<Tensor>)> {
        Ok((self.value(inputs)?, self.w.clone()))
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let model = enc_dec(41, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs: Vec<String> = (0..10).map(|_| random_text(&mut rng, 20, 2, 5)).collect();
    let targets: Vec<String> = (0..10).map(|_| random_text(&mut rng, 20, 5, 5)).collect();
    let req = AttributionRequest {
        forced_targets: Some(targets),
        ..AttributionRequest::new(inputs)
    };
    let spec = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::IntegratedGradients)
    };
    let out = attribute(&model, &req, &spec, &StepRegistry::new())?;
    let deltas: Vec<f64> = out
        .sequences
        .iter()
        .flat_map(|s| s.ig_convergence_delta.clone().unwrap_or_default())
        .collect();
    ensure!(deltas.len() == 50, "{} steps attributed", deltas.len());
    let worst = deltas.iter().copied().fold(0.0, f64::max);
    ensure!(worst < 0.05, "max delta {worst}");
    let max_n = out.sequences.iter().flat_map(|s| s.ig_n_steps.clone().unwrap_or_default()).max().unwrap_or(0);

    let mut linear_err = 0.0f64;
    for trial in 0..20 {
        let shape = [3usize, 4];
        let rand_t = |rng: &mut ChaCha8Rng| {
            Tensor::new(shape.to_vec(), (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        };
        let target = Linear {
            w: vec![rand_t(&mut rng), rand_t(&mut rng)],
            c: trial as f64,
        };
        let x = vec![rand_t(&mut rng), rand_t(&mut rng)];
        let b = vec![rand_t(&mut rng), rand_t(&mut rng)];
        let cfg = IgConfig {
            n_steps: 1,
            internal_batch_size: 1,
            max_steps: 1,
        };
        let r = integrated_gradients(&target, &x, &b, cfg)?;
        for i in 0..2 {
            let exact: Vec<f64> = x[i]
                .data()
                .iter()
                .zip(b[i].data())
                .zip(target.w[i].data())
                .map(|((x, b), w)| (x - b) * w)
                .collect();
            linear_err = linear_err.max(max_abs_diff(r.attributions[i].data(), &exact));
        }
        linear_err = linear_err.max(r.delta);
    }
    ensure!(linear_err <= 1e-12, "linear IG error {linear_err:.3e}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "50 steps, max delta {worst:.2e} (up to {max_n} points), linear n_steps=1 error {linear_err:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// 3 ---------------------------------------------------------------------

/// `p(target)` from one plain forward pass over token ids.
fn oracle_probability(model: &ModelBundle, source: &[TokenId], prefix: &[TokenId], target: TokenId) -> f64 {
    let (dec, enc) = model_inputs(model, source, prefix);
    let logits = model.forward(&dec, enc.as_deref(), false).unwrap().logits;
    let v = logits.shape()[1];
    let row = logits.data()[(dec.len() - 1) * v..dec.len() * v].to_vec();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::vector(row).unwrap());
    let p = tape.softmax(l, 0).unwrap();
    let s = tape.slice(p, 0, target as usize, target as usize + 1).unwrap();
    let s = tape.sum_all(s).unwrap();
    tape.value(s).item().unwrap()
}

fn criterion_3() -> Outcome {
    let model = enc_dec(51, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<String> = (0..20).map(|_| random_text(&mut rng, 24, 2, 6)).collect();
    let req = AttributionRequest {
        max_new_tokens: 3,
        ..AttributionRequest::new(inputs.clone())
    };
    let out = attribute(&model, &req, &MethodSpec::new(MethodId::Occlusion), &StepRegistry::new())?;
    let decoded = decode_request(&model, &GenerationRequest {
        max_new_tokens: 3,
        ..GenerationRequest::new(inputs)
    })?;
    let mut cells = 0;
    for (s, d) in out.sequences.iter().zip(&decoded) {
        for ctx in d.step_contexts(None)? {
            let full = oracle_probability(&model, &ctx.source, &ctx.prefix, ctx.target);
            for i in 0..ctx.source.len() {
                let mut occluded = ctx.source.clone();
                occluded[i] = PAD_ID;
                let expect = full - oracle_probability(&model, &occluded, &ctx.prefix, ctx.target);
                let got = s.source_attr.at(&[i, ctx.step]);
                ensure!(
                    got.to_bits() == expect.to_bits(),
                    "cell ({i}, {}) {got:e} vs oracle {expect:e}",
                    ctx.step
                );
                cells += 1;
            }
        }
    }
    Ok(format!("20 sequences, {cells} cells bitwise equal"))
}

// 4 ---------------------------------------------------------------------

struct Additive {
    w: Vec<f64>,
}

impl MaskedScorer for Additive {
    fn n_positions(&self) -> usize {
        self.w.len()
    }

    fn score(&self, keep: &[bool]) -> seqattr::Result<f64> {
        Ok(0.3 + self.w.iter().zip(keep).filter(|(_, &k)| k).map(|(w, _)| w).sum::<f64>())
    }
}

fn criterion_4() -> Outcome {
    let scorer = Additive {
        w: vec![0.9, -0.5, 0.3, 1.2, -1.0, 0.05, 0.6, -0.2],
    };
    let mut worst = 1.0f64;
    for seed in 0..5 {
        let cfg = LimeConfig {
            n_samples: 1000,
            seed,
            ..LimeConfig::default()
        };
        let a = lime(&scorer, cfg)?;
        let b = lime(&scorer, cfg)?;
        ensure!(a == b, "seed {seed} is not reproducible");
        let tau = kendall_tau(&a.coefficients, &scorer.w)?.tau;
        ensure!(tau >= 0.9, "seed {seed}: tau {tau}");
        worst = worst.min(tau);
    }
    Ok(format!("5 seeds, min tau {worst:.3}, reruns identical"))
}

// 5 ---------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let model = enc_dec(61, 20);
    let registry = StepRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<String> = (0..3).map(|_| random_text(&mut rng, 20, 2, 4)).collect();
    let decoded = decode_request(&model, &GenerationRequest {
        max_new_tokens: 4,
        ..GenerationRequest::new(inputs)
    })?;
    let diff_spec = StepScoreSpec::new("contrast_prob_diff");
    let prob_spec = StepScoreSpec::new("probability");
    let ig = IgConfig {
        n_steps: 16,
        internal_batch_size: 16,
        max_steps: 16,
    };
    let mut worst = [0.0f64; 3];
    let mut steps = 0;
    for d in &decoded {
        for ctx in d.step_contexts(None)? {
            let contrast = if ctx.target == 7 { 8 } else { 7 };
            let diff = StepProblem::from_context(&model, &registry, &diff_spec, &ctx, Some(contrast), true);
            let p_t = StepProblem::from_context(&model, &registry, &prob_spec, &ctx, None, true);
            let mut p_c = p_t;
            p_c.args.target = contrast;
            let x = diff.embeddings()?;
            let base = diff.baseline_embeddings(PAD_ID)?;
            let (td, tt, tc) = (EmbeddingTarget(diff), EmbeddingTarget(p_t), EmbeddingTarget(p_c));
            let results: [(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>); 3] = [
                (gradient(&td, &x)?, gradient(&tt, &x)?, gradient(&tc, &x)?),
                (input_x_gradient(&td, &x)?, input_x_gradient(&tt, &x)?, input_x_gradient(&tc, &x)?),
                (
                    integrated_gradients(&td, &x, &base, ig)?.attributions,
                    integrated_gradients(&tt, &x, &base, ig)?.attributions,
                    integrated_gradients(&tc, &x, &base, ig)?.attributions,
                ),
            ];
            for (k, (a, t, c)) in results.iter().enumerate() {
                for ((a, t), c) in a.iter().zip(t).zip(c) {
                    let expect: Vec<f64> = t.data().iter().zip(c.data()).map(|(t, c)| t - c).collect();
                    worst[k] = worst[k].max(max_abs_diff(a.data(), &expect));
                }
            }
            steps += 1;
        }
    }
    for (name, w) in ["gradient", "input_x_gradient", "integrated_gradients"].iter().zip(worst) {
        ensure!(w <= 1e-10, "{name}: {w:.3e}");
    }
    Ok(format!(
        "{steps} steps, max |diff| grad {:.1e}, ixg {:.1e}, ig {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

// 6 ---------------------------------------------------------------------

fn total(t: &Tensor) -> f64 {
    t.data().iter().sum()
}

fn criterion_6() -> Outcome {
    let corpus = "the extraordinary storyteller remembered wonderful adventures of unbelievable travellers";
    let tok = Tokenizer::from_corpus([corpus]);
    let model = ModelBundle::init_with_tokenizer(
        ModelConfig {
            seed: 71,
            ..ModelConfig::decoder_only(tok.len())
        },
        tok,
    )?;
    let registry = StepRegistry::new();
    let spec = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::Gradient)
    };
    let run = |input: &str| -> seqattr::Result<SequenceAttribution> {
        let req = AttributionRequest {
            forced_targets: Some(vec!["wonderful adventures".into()]),
            ..AttributionRequest::new(vec![input.into()])
        };
        Ok(attribute(&model, &req, &spec, &registry)?.sequences.remove(0))
    };
    let input = "the extraordinary storyteller remembered";
    let a = run(input)?;

    let merged = subword_merge(&a, Reduction::Sum)?;
    let src_err = (total(&a.source_attr) - total(&merged.source_attr)).abs();
    let tgt_err = (total(a.target_attr.as_ref().unwrap()) - total(merged.target_attr.as_ref().unwrap())).abs();
    ensure!(src_err <= 1e-12 && tgt_err <= 1e-12, "sum merge changed totals by {src_err:e} / {tgt_err:e}");
    ensure!(merged.source_tokens.len() < a.source_tokens.len(), "no subwords were merged");

    let mut unit = a.clone();
    unit.source_tokens.truncate(1);
    unit.source_ids.truncate(1);
    unit.step_indices.truncate(1);
    unit.step_tokens.truncate(1);
    unit.target_tokens.clear();
    unit.target_ids.clear();
    unit.target_offsets.clear();
    unit.target_attr = None;
    unit.step_scores.clear();
    unit.source_attr = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0])?;
    let norm = dim_norm(&unit, NormOrder::L2)?.source_attr.data()[0];
    ensure!(norm == 5.0, "dim_norm([3, 4]) = {norm}");

    let b = run("the extraordinary storyteller travellers")?;
    let ab = pair_diff(&a, &b, 4)?;
    let ba = pair_diff(&b, &a, 4)?;
    let antisymmetric = ab.source_attr.data().iter().zip(ba.source_attr.data()).all(|(x, y)| *x == -*y)
        && ab
            .target_attr
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .zip(ba.target_attr.as_ref().unwrap().data())
            .all(|(x, y)| *x == -*y);
    ensure!(antisymmetric, "pair_diff(a, b) != -pair_diff(b, a)");

    let reduced = run_pipeline(&a, &AggregatorPipeline::parse("subword_merge:sum,dim_norm:l2")?, None)?;
    let words = 1 + input.split_whitespace().count();
    let want = [words, a.n_columns()];
    ensure!(
        reduced.source_attr.shape() == want,
        "pipeline gave {:?} from {:?}, expected {want:?}",
        reduced.source_attr.shape(),
        a.source_attr.shape()
    );
    Ok(format!(
        "sum conservation {:.1e}, dim_norm([3,4]) = 5, pair_diff antisymmetric, {:?} -> {:?}",
        src_err.max(tgt_err),
        a.source_attr.shape(),
        reduced.source_attr.shape()
    ))
}

// 7 ---------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let model = enc_dec(81, 16);
    let req = AttributionRequest {
        forced_targets: Some(vec!["w5 w9 w4 w12 w7 w10".into()]),
        ..AttributionRequest::new(vec!["w6 w8 w11".into()])
    };
    let spec = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::InputXGradient)
    };
    let s = attribute(&model, &req, &spec, &StepRegistry::new())?.sequences.remove(0);
    ensure!(s.source_attr.shape()[1] == 6, "source_attr shape {:?}", s.source_attr.shape());
    let t = s.target_attr.as_ref().ok_or("no target attribution")?;
    ensure!(t.shape()[..2] == [6, 6], "target_attr shape {:?}", t.shape());
    let d = t.shape()[2];
    let mut populated = 0;
    for r in 0..6 {
        for c in 0..6 {
            let cell = &t.data()[(r * 6 + c) * d..(r * 6 + c + 1) * d];
            ensure!(s.target_cell_populated(r, c) == (r < c), "cell ({r}, {c}) population");
            if r < c {
                populated += 1;
            } else {
                ensure!(cell.iter().all(|&v| v == 0.0), "cell ({r}, {c}) should be empty");
            }
        }
    }
    ensure!(populated == 15 && s.populated_target_cells() == 15, "{populated} populated cells");
    Ok("source [3+1 x 6], target 6 x 6 with 15 populated cells".into())
}

// 8 ---------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut with_ties = 0;
    let mut undefined = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let levels = rng.random_range(2..8);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() < n {
            with_ties += 1;
        }
        match (kendall_tau(&xs, &ys), kendall_tau_naive(&xs, &ys)) {
            (Ok(fast), Ok(slow)) => ensure!(fast.tau.to_bits() == slow.to_bits(), "{} vs {slow}", fast.tau),
            (Err(_), Err(_)) => undefined += 1,
            (a, b) => return Err(format!("disagreement: {a:?} vs {b:?}").into()),
        }
    }
    let up: Vec<f64> = (0..25).map(f64::from).collect();
    let down: Vec<f64> = up.iter().rev().copied().collect();
    ensure!(kendall_tau(&up, &up)?.tau == 1.0, "sorted");
    ensure!(kendall_tau(&up, &down)?.tau == -1.0, "reversed");
    Ok(format!("200 lists ({with_ties} with ties, {undefined} undefined) exact; sorted 1, reversed -1"))
}

// 9 ---------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let records = parse_records(
        "the capital of {} is\tfrance\tparis\trome\n\
         {} plays the\tmessi\tchess\tpiano\n\
         the {} river flows in\tnile\tafrica\teurope\n\
         a {} can\tbird\tfly\tswim\n",
    )?;
    let corpus: Vec<String> = records
        .iter()
        .flat_map(|r| [r.prompt(), r.target_true.clone(), r.target_false.clone()])
        .collect();
    let tok = Tokenizer::from_corpus(corpus.iter().map(String::as_str));
    let model = ModelBundle::init_with_tokenizer(
        ModelConfig {
            seed: 91,
            n_layers_dec: 3,
            ..ModelConfig::decoder_only(tok.len())
        },
        tok,
    )?;
    let n = records.len();
    let r = run_cat_study(&model, &TraceStudySpec {
        records,
        layers: None,
        max_examples: None,
    })?;
    ensure!(r.skipped.is_empty(), "skipped {:?}", r.skipped);
    let want = (n * 3) as u64;
    ensure!(
        r.passes.forward == want && r.passes.backward == want,
        "passes {:?} for {n} records x 3 layers",
        r.passes
    );
    ensure!(r.matrix.len() == 3 && r.matrix.iter().all(|row| row.len() == 4), "matrix shape");

    let req = AttributionRequest {
        max_new_tokens: 3,
        ..AttributionRequest::new(vec!["the capital of france is".into(), "messi plays the".into()])
    };
    let registry = StepRegistry::new();
    let layer = MethodSpec {
        attribute_target: true,
        target_layer: Some(TargetLayer::Embedding),
        ..MethodSpec::new(MethodId::LayerGradientXActivation)
    };
    let ixg = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::InputXGradient)
    };
    let a = attribute(&model, &req, &layer, &registry)?;
    let b = attribute(&model, &req, &ixg, &registry)?;
    let mut worst = 0.0f64;
    for (sa, sb) in a.sequences.iter().zip(&b.sequences) {
        let pairs = [(&sa.source_attr, &sb.source_attr)]
            .into_iter()
            .chain(sa.target_attr.iter().zip(sb.target_attr.iter()));
        for (la, ib) in pairs {
            let d = ib.shape()[2];
            let sums: Vec<f64> = ib.data().chunks(d).map(|c| c.iter().sum()).collect();
            worst = worst.max(max_abs_diff(la.data(), &sums));
        }
    }
    ensure!(worst <= 1e-10, "layer 0 vs input x gradient: {worst:.3e}");
    Ok(format!(
        "{n} records x 3 layers: {} forward / {} backward, matrix 3 x 4, layer-0 match {worst:.1e}",
        r.passes.forward, r.passes.backward
    ))
}

// 10 --------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    std::fs::write(d.join("corpus.txt"), "the cat sat on a mat\nhello world again\n")?;
    let cli = |args: &[&str]| -> Result<(), Box<dyn StdError>> {
        let out = Command::new(env!("CARGO_BIN_EXE_seqattr"))
            .current_dir(d)
            .env_remove("SEQATTR_SEED")
            .args(args)
            .output()?;
        ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        Ok(())
    };
    cli(&["init-model", "--corpus", "corpus.txt", "--arch", "encoder-decoder", "--seed", "3", "--output", "m.sqat"])?;
    for name in ["a.json", "b.json"] {
        cli(&[
            "attribute", "--model", "m.sqat", "--method", "gradient_shap", "--input", "the cat sat", "--input",
            "hello world", "--attribute-target", "--step-scores", "probability", "--seed", "17", "--max-new-tokens",
            "4", "--output", name,
        ])?;
    }
    let a = std::fs::read(d.join("a.json"))?;
    ensure!(a == std::fs::read(d.join("b.json"))?, "CLI runs differ");

    let loaded = load_document(&d.join("a.json"))?;
    ensure!(loaded.ignored_keys.is_empty(), "unknown keys {:?}", loaded.ignored_keys);
    save_document(&loaded.document, &d.join("c.json"))?;
    let c = std::fs::read(d.join("c.json"))?;
    save_document(&load_document(&d.join("c.json"))?.document, &d.join("e.json"))?;
    ensure!(c == a && c == std::fs::read(d.join("e.json"))?, "save/load/save not byte-stable");

    let model = enc_dec(101, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs: Vec<String> = (0..8).map(|_| random_text(&mut rng, 20, 1, 6)).collect();
    let spec = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::IntegratedGradients)
    };
    let run = |batch: usize| {
        let req = AttributionRequest {
            max_new_tokens: 4,
            batch_size: Some(batch),
            step_scores: vec![StepScoreSpec::new("probability")],
            ..AttributionRequest::new(inputs.clone())
        };
        attribute(&model, &req, &spec, &StepRegistry::new())
    };
    let (one, eight) = (run(1)?, run(8)?);
    let mut worst = 0.0f64;
    for (x, y) in one.sequences.iter().zip(&eight.sequences) {
        ensure!(x.target_ids == y.target_ids, "generations differ across batch sizes");
        worst = worst.max(max_abs_diff(x.source_attr.data(), y.source_attr.data()));
        worst = worst.max(max_abs_diff(
            x.target_attr.as_ref().unwrap().data(),
            y.target_attr.as_ref().unwrap().data(),
        ));
        worst = worst.max(max_abs_diff(&x.step_scores["probability"], &y.step_scores["probability"]));
    }
    ensure!(worst <= 1e-12, "batch 1 vs 8: {worst:.3e}");

    let doc = AttributionDocument::from(run_pipeline_doc(eight)?);
    let html = render_html(&doc, &Colormap::default())?;
    let cell = Regex::new(r#"<td class="attr" style="[^"]*">(-?[0-9.]+)</td>"#)?;
    let shown: Vec<f64> = cell.captures_iter(&html).map(|c| c[1].parse().unwrap()).collect();
    let mut expected = Vec::new();
    for s in &doc.sequences {
        expected.extend_from_slice(s.source_attr.data());
        let t = s.target_attr.as_ref().unwrap();
        for r in 0..s.target_tokens.len() {
            for c in 0..s.n_columns() {
                if s.target_cell_populated(r, c) {
                    expected.push(t.at(&[r, c]));
                }
            }
        }
    }
    ensure!(shown.len() == expected.len(), "{} cells rendered, {} expected", shown.len(), expected.len());
    let html_err = shown.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(html_err <= 0.005 + 1e-12, "HTML value off by {html_err}");
    Ok(format!(
        "CLI byte-identical, save/load/save stable, batch 1 vs 8 {worst:.1e}, {} HTML cells within 2 decimals",
        shown.len()
    ))
}

fn run_pipeline_doc(
    out: seqattr::attribution::FeatureAttributionOutput,
) -> seqattr::Result<seqattr::attribution::FeatureAttributionOutput> {
    seqattr::aggregation::aggregate_output(&out, &AggregatorPipeline::default_token_level(), None)
}

// 11 --------------------------------------------------------------------

fn criterion_11() -> Outcome {
    let template = "o bir {}";
    let model = planted_bias_model(template, ("dadi", "pilot"), ("she", "he"), 11)?;
    let terms = vec![
        TermStat {
            term: "dadi".into(),
            statistic: 1.0,
        },
        TermStat {
            term: "pilot".into(),
            statistic: 0.0,
        },
    ];
    let spec = TemplateStudySpec::new(template, "o", terms, ("she", "he"));
    let r = run_template_study(&model, &spec)?;
    let metrics = r.metric_names();
    ensure!(
        metrics == ["p", "gradient", "integrated_gradients", "input_x_gradient"],
        "metrics {metrics:?}"
    );
    for m in &metrics {
        for case in [Case::Base, Case::Swap] {
            for pos in [Position::Pron, Position::Occ] {
                ensure!(r.cell(m, case, pos).is_some(), "missing cell {m} {case:?} {pos:?}");
            }
        }
    }
    ensure!(r.grid.len() == 16, "{} grid cells", r.grid.len());
    let tau = r.cell("p", Case::Swap, Position::Pron).and_then(|c| c.tau);
    ensure!(tau == Some(1.0), "tau(p, stat) = {tau:?}");
    Ok("grid 4 metrics x {base, swap} x {x_pron, x_occ}; tau(p, stat) = 1".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("autodiff soundness", criterion_1),
        ("integrated gradients completeness", criterion_2),
        ("occlusion oracle", criterion_3),
        ("lime recovery", criterion_4),
        ("contrastive linearity", criterion_5),
        ("aggregation algebra", criterion_6),
        ("sequential matrix contract", criterion_7),
        ("kendall tau oracle", criterion_8),
        ("contrastive attribution tracing", criterion_9),
        ("reproducibility and io", criterion_10),
        ("planted bias pipeline", criterion_11),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(e) => {
                println!("FAIL {:>2} {name}: {e}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
