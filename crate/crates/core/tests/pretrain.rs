use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tft_core::data::{default_templates, generate_documents, Lexicon};
use tft_core::encoder::{init_params, EncoderConfig};
use tft_core::pretrain::{mask_tokens, nsp_sample, pretrain_loop, smooth, NspLabel, PretrainHyper};
use tft_core::tokenizer::{build_vocab, Vocab, CLS_ID, MASK_ID, SEP_ID};

fn doc(sentences: &[&str]) -> Vec<Vec<String>> {
    sentences
        .iter()
        .map(|s| s.split_whitespace().map(String::from).collect())
        .collect()
}

#[test]
fn selection_frequency_and_replacement_split() {
    let vocab_size = 1000;
    let ids: Vec<usize> = [CLS_ID].into_iter().chain(10..20).chain([SEP_ID]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut selected, mut masked, mut kept, mut positions) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let ex = mask_tokens(&ids, 0.15, vocab_size, &mut rng).unwrap();
        positions += 10;
        selected += ex.targets.len();
        for &(p, original) in &ex.targets {
            assert_eq!(ids[p], original);
            assert!(!Vocab::is_special(original));
            if ex.ids[p] == MASK_ID {
                masked += 1;
            } else if ex.ids[p] == original {
                kept += 1;
            } else {
                assert!(!Vocab::is_special(ex.ids[p]));
            }
        }
        for (p, (&a, &b)) in ids.iter().zip(&ex.ids).enumerate() {
            if a != b {
                assert!(ex.targets.iter().any(|t| t.0 == p));
            }
        }
    }
    let rate = selected as f64 / positions as f64;
    assert!((rate - 0.15).abs() < 0.01, "{rate}");
    let masked = masked as f64 / selected as f64;
    let kept = kept as f64 / selected as f64;
    assert!((masked - 0.8).abs() < 0.02, "{masked}");
    assert!((kept - 0.1).abs() < 0.02, "{kept}");
}

#[test]
fn consecutive_pairs_are_exactly_the_adjacencies() {
    let docs = vec![doc(&["a b", "c d"]), doc(&["e f", "g h"])];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ex in nsp_sample(&docs, 200, &mut rng).unwrap() {
        match ex.label {
            NspLabel::Consecutive => {
                let d = ex.docs.0;
                assert_eq!(ex.docs.1, d);
                assert_eq!(
                    (ex.source.clone(), ex.target.clone()),
                    (docs[d][0].clone(), docs[d][1].clone())
                );
            }
            NspLabel::Random => assert_ne!(ex.docs.0, ex.docs.1),
        }
    }
}

#[test]
fn label_balance() {
    let lexicon = Lexicon::generate(0);
    let docs = generate_documents(&lexicon, &default_templates(), 30, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = nsp_sample(&docs, 10_000, &mut rng).unwrap();
    let consecutive = sample
        .iter()
        .filter(|e| e.label == NspLabel::Consecutive)
        .count() as f64
        / 10_000.0;
    assert!((consecutive - 0.5).abs() < 0.02, "{consecutive}");
    assert!(sample
        .iter()
        .filter(|e| e.label == NspLabel::Random)
        .all(|e| e.docs.0 != e.docs.1));
}

#[test]
fn too_small_corpus_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(nsp_sample(&[doc(&["a", "b"])], 1, &mut rng).is_err());
    assert!(nsp_sample(&[doc(&["a", "b"]), doc(&["c"])], 1, &mut rng).is_err());
}

fn setup(n_docs: usize) -> (Vec<Vec<Vec<String>>>, Vocab, EncoderConfig) {
    let lexicon = Lexicon::generate(0);
    let docs = generate_documents(&lexicon, &default_templates(), n_docs, 6, 3);
    let sentences: Vec<Vec<String>> = docs.iter().flatten().cloned().collect();
    let vocab = build_vocab(&sentences, 400).unwrap();
    let config = EncoderConfig {
        max_len: 48,
        ..EncoderConfig::desk(vocab.len())
    };
    (docs, vocab, config)
}

#[test]
fn smoothed_loss_decreases_over_500_steps() {
    let (docs, vocab, config) = setup(100);
    let run = pretrain_loop(&docs, &vocab, &config, None, &PretrainHyper::default(), 0).unwrap();
    let totals: Vec<f64> = run.losses.iter().map(|l| l.total).collect();
    assert_eq!(totals.len(), 500);
    let s = smooth(&totals, 50);
    let (early, late) = (s[49], s[499]);
    assert!(late < early - 0.5, "smoothed loss {early} -> {late}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (docs, vocab, config) = setup(10);
    let initial = init_params(&config, 4).unwrap();
    let hyper = PretrainHyper {
        steps: 5,
        lr: 0.0,
        ..PretrainHyper::default()
    };
    let run = pretrain_loop(&docs, &vocab, &config, Some(&initial), &hyper, 4).unwrap();
    assert_eq!(run.checkpoint.encoder_params().flatten(), initial.flatten());
}

#[test]
fn no_loss_terms_means_no_update() {
    let (docs, vocab, config) = setup(10);
    let initial = init_params(&config, 5).unwrap();
    let hyper = PretrainHyper {
        steps: 5,
        mask_rate: 0.0,
        nsp: false,
        ..PretrainHyper::default()
    };
    let run = pretrain_loop(&docs, &vocab, &config, Some(&initial), &hyper, 5).unwrap();
    assert_eq!(run.checkpoint.encoder_params().flatten(), initial.flatten());
    assert!(run.losses.iter().all(|l| l.total == 0.0));
}

#[test]
fn same_seed_same_trajectory() {
    let (docs, vocab, config) = setup(10);
    let hyper = PretrainHyper {
        steps: 8,
        ..PretrainHyper::default()
    };
    let a = pretrain_loop(&docs, &vocab, &config, None, &hyper, 6).unwrap();
    let b = pretrain_loop(&docs, &vocab, &config, None, &hyper, 6).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint, b.checkpoint);
    for l in &a.losses {
        assert!((l.total - (l.mlm + l.nsp)).abs() < 1e-12);
    }
}
