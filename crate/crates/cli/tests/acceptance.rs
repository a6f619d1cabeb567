//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tft_core::data::{
    default_templates, generate_documents, generate_synthetic, split_corpus, AlignedPairRecord,
    Lexicon, SynthConfig,
};
use tft_core::encoder::{init_params, Checkpoint, EncoderConfig};
use tft_core::finetune::{
    ablation_experiment, subsample_experiment, synthetic_task, FinetuneHyper, SyntheticTask,
    BASELINE,
};
use tft_core::gradcheck::{joint_gradcheck, JointCheckConfig};
use tft_core::injection::{
    early_stop_decision, init_heads, inject_train, joint_loss, phrase_feature, prepare,
    sample_negatives, EarlyStopRule, FeatureMode, InjectionData, InjectionHyper, NegativeSampler,
    PhraseLabel, PreparedCorpus, SentenceLabel, Variant, PHRASE_B, PHRASE_W, SENTENCE_B,
    SENTENCE_W,
};
use tft_core::pretrain::{pretrain_loop, smooth, PretrainHyper};
use tft_core::tokenizer::{build_vocab, remap_spans, Vocab};
use tft_tensor::{grad_check, AdjointFault, GradCheckConfig, OpKind, Tape, Tensor, Var};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Relative error of one primitive against central differences, with the
/// output reduced by a fixed random contraction.
fn primitive_error(
    shapes: &[Vec<usize>],
    seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = random_vec(&mut rng, total);
    let run = |theta: &[f64]| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut inputs = Vec::new();
        for s in shapes {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), theta[offset..offset + n].to_vec()).unwrap();
            inputs.push(tape.param(t));
            offset += n;
        }
        let out = build(&mut tape, &inputs);
        let n = tape.value(out).len();
        let mut wr = ChaCha8Rng::seed_from_u64(seed + 1);
        let w = tape.constant(Tensor::new(vec![n, 1], random_vec(&mut wr, n)).unwrap());
        let flat = tape.reshape(out, vec![n]).unwrap();
        let loss = tape.matmul(flat, w).unwrap();
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let mut g = Vec::new();
        for (v, s) in inputs.iter().zip(shapes) {
            g.extend(grads.get_or_zeros(*v, s.iter().product()));
        }
        (value, g)
    };
    let (_, analytic) = run(&theta);
    let report = grad_check(|t| run(t).0, &theta, &analytic, &GradCheckConfig::default());
    assert!(report.checked > 0);
    report.max_rel_error
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 5]],
            Box::new(|t, x| t.matmul(x[0], x[1]).unwrap()),
        ),
        (
            "matmul_nt",
            vec![vec![3, 4], vec![5, 4]],
            Box::new(|t, x| t.matmul_nt(x[0], x[1]).unwrap()),
        ),
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, x| t.add(x[0], x[1]).unwrap()),
        ),
        (
            "sub",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, x| t.sub(x[0], x[1]).unwrap()),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, x| t.mul(x[0], x[1]).unwrap()),
        ),
        ("abs", vec![vec![7]], Box::new(|t, x| t.abs(x[0]))),
        ("scale", vec![vec![3]], Box::new(|t, x| t.scale(x[0], -2.5))),
        (
            "add_row",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, x| t.add_row(x[0], x[1]).unwrap()),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, x| t.concat(&[x[0], x[1]]).unwrap()),
        ),
        (
            "slice_cols",
            vec![vec![3, 6]],
            Box::new(|t, x| t.slice_cols(x[0], 2, 3).unwrap()),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            Box::new(|t, x| {
                t.softmax(x[0], Some(&[true, true, false, true, true]))
                    .unwrap()
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|t, x| t.layer_norm(x[0], x[1], x[2]).unwrap()),
        ),
        ("gelu", vec![vec![2, 5]], Box::new(|t, x| t.gelu(x[0]))),
        (
            "gather",
            vec![vec![4, 3]],
            Box::new(|t, x| t.gather(x[0], &[3, 0, 3]).unwrap()),
        ),
        (
            "max_pool",
            vec![vec![6, 4]],
            Box::new(|t, x| t.max_pool_span(x[0], 1, 4).unwrap()),
        ),
        (
            "mean_pool",
            vec![vec![6, 4]],
            Box::new(|t, x| t.mean_pool_span(x[0], 0, 5).unwrap()),
        ),
        (
            "cross_entropy",
            vec![vec![3, 4]],
            Box::new(|t, x| t.cross_entropy(x[0], &[2, 0, 3]).unwrap()),
        ),
        (
            "mse",
            vec![vec![1]],
            Box::new(|t, x| t.mse(x[0], 0.37).unwrap()),
        ),
        (
            "sum",
            vec![vec![3], vec![3]],
            Box::new(|t, x| t.sum(&[x[0], x[1]]).unwrap()),
        ),
        (
            "stack",
            vec![vec![3], vec![3]],
            Box::new(|t, x| t.stack(&[x[0], x[1]]).unwrap()),
        ),
        (
            "dropout",
            vec![vec![4, 4]],
            Box::new(|t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                t.dropout(x[0], 0.3, &mut rng).unwrap()
            }),
        ),
    ]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_primitive = 0.0f64;
    for (name, shapes, build) in primitives() {
        for seed in 0..3 {
            let e = primitive_error(&shapes, seed, build.as_ref());
            ensure(e < 1e-3, || format!("{name} seed {seed}: {e:.2e}"))?;
            worst_primitive = worst_primitive.max(e);
        }
    }
    let mut worst_joint = 0.0f64;
    let mut checked = 0;
    for seed in 0..3 {
        let cfg = JointCheckConfig {
            seed,
            ..JointCheckConfig::desk()
        };
        let r = joint_gradcheck(&cfg, None).map_err(|e| e.to_string())?;
        ensure(r.passes(1e-3), || {
            format!("joint seed {seed}: {:.2e}", r.max_rel_error)
        })?;
        worst_joint = worst_joint.max(r.max_rel_error);
        checked += r.checked;
    }
    let mut weakest_control = f64::INFINITY;
    for (op, scale) in [
        (OpKind::MatMul, 1.01),
        (OpKind::Softmax, 1.5),
        (OpKind::LayerNorm, 1.5),
        (OpKind::Gelu, 1.5),
        (OpKind::MaxPool, 1.5),
        (OpKind::Concat, 1.5),
        (OpKind::CrossEntropy, 1.5),
    ] {
        let r = joint_gradcheck(&JointCheckConfig::desk(), Some(AdjointFault { op, scale }))
            .map_err(|e| e.to_string())?;
        ensure(r.max_rel_error > 1e-1, || {
            format!("corrupted {op:?} adjoint only {:.2e}", r.max_rel_error)
        })?;
        weakest_control = weakest_control.min(r.max_rel_error);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "primitives {worst_primitive:.1e}, joint {worst_joint:.1e} over {checked} coords, weakest corrupted control {weakest_control:.2}, {:.0?}",
        elapsed
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let n = rng.random_range(1..16);
        let w = rng.random_range(1..10);
        let data = random_vec(&mut rng, n * w);
        let a = rng.random_range(0..n);
        let b = rng.random_range(a..n);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![n, w], data.clone()).unwrap());
        let mx = tape.max_pool_span(h, a, b).map_err(|e| e.to_string())?;
        let mn = tape.mean_pool_span(h, a, b).map_err(|e| e.to_string())?;
        let (mx, mn) = (tape.value(mx).data(), tape.value(mn).data());
        for j in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut total = 0.0;
            for i in a..=b {
                best = best.max(data[i * w + j]);
                total += data[i * w + j];
            }
            let mean = total / (b - a + 1) as f64;
            ensure(mx[j] == best, || {
                format!("case {case}: max {} vs {best}", mx[j])
            })?;
            ensure((mn[j] - mean).abs() <= 1e-12, || {
                format!("case {case}: mean {} vs {mean}", mn[j])
            })?;
            ensure(mx[j] >= mn[j], || format!("case {case}: max below mean"))?;
        }
    }
    Ok("1000 cases".into())
}

fn feature(h: &Tensor, s: (usize, usize), t: (usize, usize), mode: FeatureMode) -> Vec<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let f = phrase_feature(&mut tape, hv, s, t, mode).unwrap();
    tape.value(f).data().to_vec()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let span = |rng: &mut ChaCha8Rng, n: usize| {
        let a = rng.random_range(0..n);
        (a, rng.random_range(a..n))
    };
    for case in 0..1000 {
        let n = rng.random_range(2..14);
        let w = rng.random_range(1..12);
        let h = Tensor::new(vec![n, w], random_vec(&mut rng, n * w)).unwrap();
        let (s, t) = (span(&mut rng, n), span(&mut rng, n));
        let st = feature(&h, s, t, FeatureMode::ElaborateMax);
        let ts = feature(&h, t, s, FeatureMode::ElaborateMax);
        ensure(st.len() == 4 * w, || {
            format!("case {case}: elaborate width {}", st.len())
        })?;
        let simple = feature(&h, s, t, FeatureMode::SimpleMean);
        ensure(simple.len() == 2 * w, || {
            format!("case {case}: simple width {}", simple.len())
        })?;
        ensure(st[2 * w..] == ts[2 * w..], || {
            format!("case {case}: not swap invariant")
        })?;
        let same = feature(&h, s, s, FeatureMode::ElaborateMax);
        ensure(same[3 * w..].iter().all(|&x| x == 0.0), || {
            format!("case {case}: nonzero difference")
        })?;
    }
    Ok("1000 cases".into())
}

fn criterion_4() -> Outcome {
    let (corpus, _) =
        generate_synthetic(&SynthConfig::new(10_000, 4)).map_err(|e| e.to_string())?;
    let sentences: Vec<Vec<String>> = corpus
        .iter()
        .flat_map(|r| [r.source.clone(), r.target.clone()])
        .collect();
    let vocab = build_vocab(&sentences, 600).map_err(|e| e.to_string())?;
    let mut spans = 0;
    for (ri, r) in corpus.iter().enumerate() {
        let pair = vocab
            .encode_pair(&r.source, &r.target, 512)
            .map_err(|e| e.to_string())?;
        let set = remap_spans(&r.word_alignments(), &pair).map_err(|e| e.to_string())?;
        let n_tokens = pair.len();
        let first_sep = pair.first_sep();
        for (span, a) in set.pairs.iter().zip(r.word_alignments()) {
            let ((j, k), (m, n)) = (span.source, span.target);
            // 0-based: [CLS] at 0, first [SEP] between the spans, last [SEP] at N-1.
            ensure(
                1 <= j && j <= k && k < first_sep && first_sep < m && m <= n && n + 2 <= n_tokens,
                || format!("record {ri}: span {span:?} in {n_tokens} tokens"),
            )?;
            ensure(
                vocab.detokenize(&pair.ids[j..=k]) == r.source[a.source.0..=a.source.1]
                    && vocab.detokenize(&pair.ids[m..=n]) == r.target[a.target.0..=a.target.1],
                || format!("record {ri}: span {span:?} does not detokenize"),
            )?;
            spans += 1;
        }
    }
    Ok(format!("{} records, {spans} spans", corpus.len()))
}

fn prepared(
    size: usize,
    seed: u64,
    vocab_size: usize,
) -> (Vec<AlignedPairRecord>, Vocab, PreparedCorpus) {
    let (corpus, _) = generate_synthetic(&SynthConfig::new(size, seed)).unwrap();
    let sentences: Vec<Vec<String>> = corpus
        .iter()
        .flat_map(|r| [r.source.clone(), r.target.clone()])
        .collect();
    let vocab = build_vocab(&sentences, vocab_size).unwrap();
    let p = prepare(&corpus, &vocab, 64).unwrap();
    (corpus, vocab, p)
}

fn criterion_5() -> Outcome {
    let (_, vocab, corpus) = prepared(500, 5, 600);
    let sampler =
        NegativeSampler::new(&corpus, &vocab, 64, [1.0, 1.0, 1.0], 3).map_err(|e| e.to_string())?;
    let batches = sample_negatives(&sampler, 220, 16, 5).map_err(|e| e.to_string())?;
    let mut hist = [0usize; 3];
    for b in &batches {
        for p in &b.phrases {
            hist[p.label as usize] += 1;
            if p.label == PhraseLabel::InParaphrase {
                let gold = p.replaced.ok_or("in_paraphrase without gold span")?;
                ensure(p.target != gold, || {
                    format!("in_paraphrase target equals gold {gold:?}")
                })?;
            }
        }
        for s in &b.sentences {
            if s.label == SentenceLabel::Random {
                let seq = &b.sequences[s.seq];
                let (gold, partner) = (
                    &corpus.pairs[seq.source_record],
                    &corpus.pairs[seq.target_record],
                );
                ensure(
                    seq.source_record != seq.target_record && gold.target != partner.target,
                    || format!("random partner {} repeats gold target", seq.target_record),
                )?;
            }
        }
    }
    let total: usize = hist.iter().sum();
    ensure(total >= 10_000, || format!("only {total} phrase examples"))?;
    let shares: Vec<f64> = hist.iter().map(|&c| c as f64 / total as f64).collect();
    for s in &shares {
        ensure((s - 1.0 / 3.0).abs() <= 0.02, || {
            format!("class shares {shares:?}")
        })?;
    }
    Ok(format!(
        "{total} examples, shares {:.3}/{:.3}/{:.3}",
        shares[0], shares[1], shares[2]
    ))
}

fn criterion_6() -> Outcome {
    let rule = EarlyStopRule::SecondDecrease;
    let script: &[(&[f64], usize)] = &[
        (&[0.5, 0.6, 0.55, 0.7, 0.65, 0.8], 5),
        (&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 0),
        (&[0.3, 0.3, 0.3, 0.3], 0),
        (&[0.9, 0.8, 0.7, 0.6], 3),
        (&[0.5, 0.4, 0.6, 0.7, 0.8, 0.1], 6),
    ];
    for (seq, expected) in script {
        let stop = (1..=seq.len())
            .find(|&n| early_stop_decision(&seq[..n], rule))
            .unwrap_or(0);
        ensure(stop == *expected, || {
            format!("{seq:?}: stopped at {stop}, expected {expected}")
        })?;
    }
    Ok(format!("{} scripted sequences", script.len()))
}

fn split_prepared(
    corpus: &[AlignedPairRecord],
    vocab: &Vocab,
    cfg: &EncoderConfig,
) -> (PreparedCorpus, PreparedCorpus, PreparedCorpus) {
    let split = split_corpus(corpus, 200, 200, 1).unwrap();
    let p = |c: &[AlignedPairRecord]| prepare(c, vocab, cfg.max_len).unwrap();
    (p(&split.train), p(&split.dev), p(&split.test))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (corpus, _) = generate_synthetic(&SynthConfig::new(2000, 42)).map_err(|e| e.to_string())?;
    let sentences: Vec<Vec<String>> = corpus
        .iter()
        .flat_map(|r| [r.source.clone(), r.target.clone()])
        .collect();
    let vocab = build_vocab(&sentences, 800).map_err(|e| e.to_string())?;
    let cfg = EncoderConfig::desk(vocab.len());
    let (train, dev, test) = split_prepared(&corpus, &vocab, &cfg);
    let base = Checkpoint::new(cfg.clone(), init_params(&cfg, 7).unwrap()).unwrap();
    let hyper = InjectionHyper {
        lr: 1e-3,
        eval_every: Some(100),
        max_steps: 2000,
        ..InjectionHyper::default()
    };
    let data = InjectionData {
        train: &train,
        dev: &dev,
        test: Some(&test),
        vocab: &vocab,
    };
    let out = inject_train(&data, &base, &hyper).map_err(|e| e.to_string())?;
    let steps = out.rows.last().map_or(0, |r| r.step);
    ensure(steps <= 2000, || format!("{steps} steps"))?;
    let trained = &out.rows[1..];
    for r in trained {
        ensure(
            (r.loss - (r.phrase_loss + r.sentence_loss)).abs() <= 1e-12,
            || {
                format!(
                    "step {}: L {} vs {} + {}",
                    r.step, r.loss, r.phrase_loss, r.sentence_loss
                )
            },
        )?;
    }
    let losses: Vec<f64> = trained.iter().map(|r| r.loss).collect();
    let s = smooth(&losses, 50);
    ensure(s.len() >= 100, || {
        format!("only {} training steps", s.len())
    })?;
    let (early, late) = (s[49], *s.last().unwrap());
    ensure(late < early, || {
        format!("smoothed L {early:.3} -> {late:.3}")
    })?;
    let phrase = out.dev.phrase.unwrap_or(0.0);
    let sentence = out.dev.sentence.unwrap_or(0.0);
    ensure(phrase >= 0.63 && sentence >= 0.90, || {
        format!("dev phrase {phrase:.3}, sentence {sentence:.3}")
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(900), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "dev phrase {phrase:.3}, sentence {sentence:.3} at step {} of {steps}; smoothed L {early:.3} -> {late:.3}; {:.0?}",
        out.best_step, elapsed
    ))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let (corpus, _) = generate_synthetic(&SynthConfig::new(2000, 42)).map_err(|e| e.to_string())?;
    let lexicon = Lexicon::generate(0);
    let docs = generate_documents(&lexicon, &default_templates(), 200, 6, 5);
    let mut sentences: Vec<Vec<String>> = corpus
        .iter()
        .flat_map(|r| [r.source.clone(), r.target.clone()])
        .collect();
    sentences.extend(docs.iter().flatten().cloned());
    let vocab = build_vocab(&sentences, 800).map_err(|e| e.to_string())?;
    let cfg = EncoderConfig::desk(vocab.len());
    let (train, dev, test) = split_prepared(&corpus, &vocab, &cfg);
    let pre = PretrainHyper {
        steps: 1000,
        ..PretrainHyper::default()
    };
    let run = pretrain_loop(&docs, &vocab, &cfg, None, &pre, 7).map_err(|e| e.to_string())?;
    let base =
        Checkpoint::new(cfg.clone(), run.checkpoint.encoder_params()).map_err(|e| e.to_string())?;
    let hyper = InjectionHyper {
        lr: 1e-3,
        eval_every: Some(100),
        ..InjectionHyper::default()
    };
    let data = InjectionData {
        train: &train,
        dev: &dev,
        test: Some(&test),
        vocab: &vocab,
    };
    let injected = inject_train(&data, &base, &hyper)
        .map_err(|e| e.to_string())?
        .checkpoint;
    let full = 2000;
    let task = synthetic_task(
        &lexicon,
        &default_templates(),
        SyntheticTask::Paraphrase,
        (full, 400, 400),
        99,
    );
    let ft = FinetuneHyper {
        lr: 3e-4,
        ..FinetuneHyper::default()
    };
    let report = subsample_experiment(
        &task,
        &vocab,
        &[(BASELINE, &base), ("injected", &injected)],
        &[100, 500, full],
        &[0, 1, 2],
        &ft,
        1,
    )
    .map_err(|e| e.to_string())?;
    let means = report.mean_deltas(BASELINE, "injected");
    let margin = |size: usize| {
        means
            .iter()
            .find(|m| m.1 == size)
            .map(|m| m.2)
            .unwrap_or(f64::NAN)
    };
    let (m100, m500, mfull) = (margin(100), margin(500), margin(full));
    let detail = format!(
        "mean margins 100: {m100:+.3}, 500: {m500:+.3}, {full}: {mfull:+.3}; {:.0?}",
        start.elapsed()
    );
    ensure(m100 > 0.0 && m500 > 0.0 && m100 > mfull, || detail.clone())?;
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let (corpus, _) = generate_synthetic(&SynthConfig::new(300, 9)).map_err(|e| e.to_string())?;
    let lexicon = Lexicon::generate(0);
    let tasks: Vec<_> = [
        SyntheticTask::Paraphrase,
        SyntheticTask::Similarity,
        SyntheticTask::Topic,
    ]
    .into_iter()
    .enumerate()
    .map(|(i, t)| {
        synthetic_task(
            &lexicon,
            &default_templates(),
            t,
            (40, 20, 20),
            90 + i as u64,
        )
    })
    .collect();
    let mut sentences: Vec<Vec<String>> = corpus
        .iter()
        .flat_map(|r| [r.source.clone(), r.target.clone()])
        .collect();
    for t in &tasks {
        for e in t.train.iter().chain(&t.dev) {
            sentences.push(e.sentence1.clone());
            sentences.extend(e.sentence2.clone());
        }
    }
    let vocab = build_vocab(&sentences, 600).map_err(|e| e.to_string())?;
    let cfg = EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ff: 32,
        max_len: 64,
        vocab_size: vocab.len(),
        dropout: 0.1,
    };
    let train = prepare(&corpus[..250], &vocab, cfg.max_len).map_err(|e| e.to_string())?;
    let dev = prepare(&corpus[250..], &vocab, cfg.max_len).map_err(|e| e.to_string())?;
    let data = InjectionData {
        train: &train,
        dev: &dev,
        test: None,
        vocab: &vocab,
    };
    let base = Checkpoint::new(cfg.clone(), init_params(&cfg, 0).unwrap()).unwrap();
    let inject = InjectionHyper {
        lr: 1e-3,
        max_steps: 10,
        eval_every: Some(5),
        ..InjectionHyper::default()
    };
    let ft = FinetuneHyper {
        epochs: 1,
        lr: 1e-3,
        ..FinetuneHyper::default()
    };
    let variants: Vec<String> = std::iter::once(BASELINE.to_string())
        .chain(Variant::ALL.iter().map(|v| v.name().to_string()))
        .collect();
    let report = ablation_experiment(&data, &base, &tasks, &variants, &[0], &inject, &ft, 1)
        .map_err(|e| e.to_string())?;
    for v in &variants {
        for t in &tasks {
            let value = report.value(v, &t.name, t.train.len(), 0);
            ensure(value.is_some_and(f64::is_finite), || {
                format!("missing cell {v} / {}", t.name)
            })?;
        }
    }
    ensure(report.rows.len() == variants.len() * tasks.len(), || {
        format!("{} rows", report.rows.len())
    })?;

    let sentence_only = InjectionHyper {
        objective: Variant::SentenceOnly.objective(),
        ..inject.clone()
    };
    let ck = inject_train(&data, &base, &sentence_only)
        .map_err(|e| e.to_string())?
        .checkpoint;
    ensure(
        !ck.params.contains(PHRASE_W) && !ck.params.contains(PHRASE_B),
        || "sentence_only carries a phrasal head".into(),
    )?;
    ensure(
        ck.params.contains(SENTENCE_W) && ck.params.contains(SENTENCE_B),
        || "sentence_only lacks the sentential head".into(),
    )?;
    let heads = init_heads(&Variant::SentenceOnly.objective(), cfg.hidden, 0);
    ensure(heads.iter().all(|(n, _)| !n.contains("phrase")), || {
        "phrasal parameter in inventory".into()
    })?;

    let mut params = init_params(&cfg, 3).unwrap();
    params.extend_from(&init_heads(&Variant::Joint.objective(), cfg.hidden, 4));
    let sampler = NegativeSampler::new(&train, &vocab, cfg.max_len, [1.0, 1.0, 1.0], 3)
        .map_err(|e| e.to_string())?;
    let mut batches = 0;
    for batch in sample_negatives(&sampler, 20, 16, 9).map_err(|e| e.to_string())? {
        let (joint, _, _) = joint_loss(&params, &cfg, &Variant::Joint.objective(), &batch)
            .map_err(|e| e.to_string())?;
        let (phrase, _, _) = joint_loss(&params, &cfg, &Variant::Phrase3Way.objective(), &batch)
            .map_err(|e| e.to_string())?;
        let (sentence, _, _) =
            joint_loss(&params, &cfg, &Variant::SentenceOnly.objective(), &batch)
                .map_err(|e| e.to_string())?;
        ensure((joint - (phrase + sentence)).abs() <= 1e-12, || {
            format!("joint {joint} vs {phrase} + {sentence}")
        })?;
        batches += 1;
    }
    Ok(format!(
        "{} rows over {} variants; loss decomposition on {batches} batches",
        report.rows.len(),
        variants.len()
    ))
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["build-vocab"],
    &["stats"],
    &["pretrain"],
    &["inject"],
    &["finetune"],
    &["experiment", "--recipe", "subsample"],
    &["experiment", "--recipe", "ablation"],
    &["gradcheck"],
];

const SETTINGS: &[&str] = &[
    "synth.size=200",
    "split.dev=40",
    "split.test=40",
    "docs.count=20",
    "task.train=60",
    "task.dev=30",
    "task.test=30",
    "vocab.size=300",
    "encoder.layers=1",
    "encoder.hidden=16",
    "encoder.heads=2",
    "encoder.ff=32",
    "pretrain.steps=10",
    "pretrain.batch=4",
    "inject.max_steps=20",
    "inject.eval_every=5",
    "finetune.epochs=1",
    "subsample.sizes=20,full",
    "seeds=0,1",
    "variants=baseline,sentence_only,joint",
    "tasks=paraphrase,topic",
    "gradcheck.per_tensor=2",
];

fn run_pipeline(out: &Path) -> Result<(), String> {
    for args in PIPELINE {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tft"));
        cmd.arg("--out").arg(out).args(["--seed", "11"]).args(*args);
        for kv in SETTINGS {
            cmd.args(["--set", kv]);
        }
        let o = cmd.output().map_err(|e| e.to_string())?;
        ensure(o.status.success(), || {
            format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr))
        })?;
    }
    Ok(())
}

fn metric_files(dir: &Path, base: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            metric_files(&path, base, out);
        } else if matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("csv" | "tsv")
        ) {
            out.push(path.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

fn criterion_10() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let mut files = Vec::new();
    metric_files(a.path(), a.path(), &mut files);
    files.sort();
    for f in &files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        ensure(x == y, || format!("{} differs between reruns", f.display()))?;
    }
    let expected = [
        "pretrain_loss.csv",
        "injection_report.csv",
        "injection_summary.csv",
        "finetune.csv",
        "subsample.csv",
        "subsample_deltas.csv",
        "ablation.csv",
        "gradcheck.csv",
        "stats.tsv",
    ];
    for e in expected {
        ensure(files.iter().any(|f| f == Path::new(e)), || {
            format!("{e} not produced")
        })?;
    }
    Ok(format!(
        "{} subcommands, {} metric files byte-identical",
        PIPELINE.len(),
        files.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient integrity", criterion_1),
        ("pooling oracles", criterion_2),
        ("feature contract", criterion_3),
        ("span remapping", criterion_4),
        ("negative sampler", criterion_5),
        ("early stopping", criterion_6),
        ("injection learns", criterion_7),
        ("injection helps small fine-tuning sets", criterion_8),
        ("ablation grid mechanics", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
