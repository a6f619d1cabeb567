use proptest::prelude::*;
use tft_core::data::{generate_synthetic, SynthConfig};
use tft_core::tokenizer::{
    build_vocab, remap_spans, Vocab, WordAlignment, CLS_ID, RESERVED, SEP_ID, UNK_ID,
};
use tft_core::Error;

fn word_strategy() -> impl Strategy<Value = String> {
    "[a-h]{1,9}"
}

fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(word_strategy(), 1..8), 1..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn held_out_words_round_trip(corpus in corpus_strategy(), held_out in prop::collection::vec(word_strategy(), 1..12), extra in 0usize..60) {
        // Seed corpus guarantees the full alphabet is known.
        let mut corpus = corpus;
        corpus.push("a b c d e f g h".split(' ').map(String::from).collect());
        let vocab = build_vocab(&corpus, RESERVED.len() + 16 + 1 + extra).unwrap();
        let (ids, _) = vocab.wordpiece_encode(&held_out);
        prop_assert!(!ids.contains(&UNK_ID));
        prop_assert_eq!(vocab.detokenize(&ids), held_out);
    }

    #[test]
    fn offsets_partition_the_subwords(corpus in corpus_strategy(), words in prop::collection::vec("[a-k]{1,7}", 1..10), extra in 0usize..80) {
        let vocab = build_vocab(&corpus, RESERVED.len() + 16 + 1 + extra)
            .or_else(|_| build_vocab(&corpus, 200))
            .unwrap();
        let (ids, offsets) = vocab.wordpiece_encode(&words);
        prop_assert_eq!(offsets.len(), words.len());
        let mut next = 0;
        for &(first, last) in &offsets {
            prop_assert_eq!(first, next);
            prop_assert!(last >= first);
            next = last + 1;
        }
        prop_assert_eq!(next, ids.len());
    }

    #[test]
    fn pair_layout(s in prop::collection::vec(word_strategy(), 1..6), t in prop::collection::vec(word_strategy(), 1..6)) {
        let vocab = build_vocab(&[s.clone(), t.clone()], 120).unwrap();
        let (s_ids, _) = vocab.wordpiece_encode(&s);
        let (t_ids, _) = vocab.wordpiece_encode(&t);
        let pair = vocab.encode_pair(&s, &t, 512).unwrap();
        prop_assert_eq!(pair.len(), s_ids.len() + t_ids.len() + 3);
        prop_assert_eq!(pair.ids[0], CLS_ID);
        prop_assert_eq!(pair.ids.iter().filter(|&&i| i == SEP_ID).count(), 2);
        let boundary = pair.segments.iter().position(|&g| g == 1).unwrap();
        prop_assert_eq!(boundary, s_ids.len() + 2);
        prop_assert!(pair.segments[boundary..].iter().all(|&g| g == 1));
        prop_assert!(pair.segments[..boundary].iter().all(|&g| g == 0));
    }
}

#[test]
fn hand_traced_remap() {
    let v = Vocab::from_tokens(&["the", "ca", "##t", "fel", "##ine"]);
    let pair = v.encode_pair(&["the", "cat"], &["feline"], 16).unwrap();
    let set = remap_spans(
        &[WordAlignment {
            source: (1, 1),
            target: (0, 0),
        }],
        &pair,
    )
    .unwrap();
    assert_eq!(set.pairs[0].source, (2, 3));
    assert_eq!(set.pairs[0].target, (5, 6));
    let whole = remap_spans(
        &[WordAlignment {
            source: (0, 1),
            target: (0, 0),
        }],
        &pair,
    )
    .unwrap();
    assert_eq!(whole.pairs[0].source, (1, 3));
}

#[test]
fn single_word_pair_layout() {
    let v = Vocab::from_tokens(&["a", "b"]);
    let pair = v.encode_pair(&["a"], &["b"], 8).unwrap();
    assert_eq!(
        pair.ids,
        vec![
            CLS_ID,
            v.id("a").unwrap(),
            SEP_ID,
            v.id("b").unwrap(),
            SEP_ID
        ]
    );
    assert_eq!(pair.segments, vec![0, 0, 0, 1, 1]);
}

#[test]
fn overflow_names_both_lengths() {
    let v = Vocab::from_tokens(&["a", "b"]);
    let err = v.encode_pair(&["a", "a", "a"], &["b", "b"], 7).unwrap_err();
    match err {
        Error::TooLong {
            source_subwords,
            target_subwords,
            max_len,
        } => assert_eq!((source_subwords, target_subwords, max_len), (3, 2, 7)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn out_of_range_word_span_is_an_error() {
    let v = Vocab::from_tokens(&["a", "b"]);
    let pair = v.encode_pair(&["a"], &["b"], 8).unwrap();
    let bad = WordAlignment {
        source: (0, 1),
        target: (0, 0),
    };
    assert!(matches!(
        remap_spans(&[bad], &pair),
        Err(Error::WordSpan { .. })
    ));
}

#[test]
fn remapped_spans_reproduce_phrases_on_generated_corpus() {
    let (corpus, _) = generate_synthetic(&SynthConfig::new(10_000, 11)).unwrap();
    // Vocabulary from a tenth of the data: the rest is held out.
    let sentences: Vec<Vec<String>> = corpus[..1000]
        .iter()
        .flat_map(|r| [r.source.clone(), r.target.clone()])
        .collect();
    let vocab = build_vocab(&sentences, 600).unwrap();
    let mut checked = 0;
    for r in &corpus {
        let pair = vocab.encode_pair(&r.source, &r.target, 256).unwrap();
        let set = remap_spans(&r.word_alignments(), &pair).unwrap();
        for (span, a) in set.pairs.iter().zip(r.word_alignments()) {
            assert!(span.is_valid_for(&pair), "{span:?} in {pair:?}");
            let (j, k) = span.source;
            let (m, n) = span.target;
            assert_eq!(
                vocab.detokenize(&pair.ids[j..=k]),
                r.source[a.source.0..=a.source.1]
            );
            assert_eq!(
                vocab.detokenize(&pair.ids[m..=n]),
                r.target[a.target.0..=a.target.1]
            );
            checked += 1;
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn vocab_file_round_trip_and_reserved_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = build_vocab(&[vec!["hello", "world"]], 40).unwrap();
    v.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let head: Vec<&str> = text.lines().take(5).collect();
    assert_eq!(head, RESERVED);
    assert_eq!(Vocab::load(&path).unwrap(), v);

    std::fs::write(&path, "[PAD]\n[CLS]\n").unwrap();
    let e = Vocab::load(&path).unwrap_err().to_string();
    assert!(e.contains("vocab.txt:2"), "{e}");
}
