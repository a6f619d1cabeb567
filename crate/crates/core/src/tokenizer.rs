//! WordPiece vocabulary construction, greedy longest-match segmentation and
//! `[CLS] s [SEP] t [SEP]` pair encoding with word-to-subword offset maps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION: &str = "##";
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) -> bool {
        if self.index.contains_key(token) {
            return false;
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        true
    }

    /// Builds a vocabulary from an explicit token list; reserved tokens are
    /// prepended and duplicates ignored.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut v = Self::with_reserved();
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let parse = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if i < RESERVED.len() && line != RESERVED[i] {
                return Err(parse(format!("expected reserved token {}", RESERVED[i])));
            }
            if line.is_empty() {
                return Err(parse("empty token".into()));
            }
            if !v.push(line) {
                return Err(parse(format!("duplicate token {line}")));
            }
        }
        if v.len() < RESERVED.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: v.len() + 1,
                message: "missing reserved tokens".into(),
            });
        }
        Ok(v)
    }

    /// Greedy longest-match-first segmentation of one word. Words that cannot
    /// be fully covered, or exceed [`MAX_WORD_CHARS`], become a single `[UNK]`.
    pub fn segment_word(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![UNK_ID];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let piece: String = chars[start..end].iter().collect();
                let candidate = if start == 0 {
                    piece
                } else {
                    format!("{CONTINUATION}{piece}")
                };
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        out
    }

    /// Subword ids for `words` plus, per word, the inclusive range of subword
    /// indices it produced.
    pub fn wordpiece_encode<S: AsRef<str>>(
        &self,
        words: &[S],
    ) -> (Vec<usize>, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut offsets = Vec::with_capacity(words.len());
        for w in words {
            let pieces = self.segment_word(w.as_ref());
            let first = ids.len();
            ids.extend(pieces);
            offsets.push((first, ids.len() - 1));
        }
        (ids, offsets)
    }

    /// Reassembles words from subword ids: a token without the continuation
    /// prefix starts a new word.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            let tok = self.token(id);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !words.is_empty() => {
                    words.last_mut().expect("non-empty").push_str(rest)
                }
                _ => words.push(tok.to_string()),
            }
        }
        words
    }

    /// `[CLS] s [SEP] t [SEP]`; pairs longer than `max_len` are rejected.
    pub fn encode_pair<S: AsRef<str>>(
        &self,
        source: &[S],
        target: &[S],
        max_len: usize,
    ) -> Result<EncodedPair> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sentence".into()));
        }
        let (s_ids, s_off) = self.wordpiece_encode(source);
        let (t_ids, t_off) = self.wordpiece_encode(target);
        if s_ids.len() + t_ids.len() + 3 > max_len {
            return Err(Error::TooLong {
                source_subwords: s_ids.len(),
                target_subwords: t_ids.len(),
                max_len,
            });
        }
        Ok(EncodedPair::assemble(s_ids, s_off, t_ids, t_off))
    }

    /// Pair encoding that drops trailing subwords from the longer sentence
    /// until the pair fits. Offsets cover only fully retained words.
    pub fn encode_pair_truncated<S: AsRef<str>>(
        &self,
        source: &[S],
        target: &[S],
        max_len: usize,
    ) -> Result<EncodedPair> {
        if max_len < 5 {
            return Err(Error::Config(format!(
                "max_len {max_len} cannot hold a pair"
            )));
        }
        let (mut s_ids, mut s_off) = self.wordpiece_encode(source);
        let (mut t_ids, mut t_off) = self.wordpiece_encode(target);
        if s_ids.is_empty() || t_ids.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sentence".into()));
        }
        while s_ids.len() + t_ids.len() + 3 > max_len {
            if s_ids.len() > t_ids.len() {
                s_ids.pop();
            } else {
                t_ids.pop();
            }
        }
        s_off.retain(|&(_, last)| last < s_ids.len());
        t_off.retain(|&(_, last)| last < t_ids.len());
        Ok(EncodedPair::assemble(s_ids, s_off, t_ids, t_off))
    }

    /// `[CLS] s [SEP]` with all-zero segments, tail-truncated to `max_len`.
    pub fn encode_single<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<EncodedPair> {
        if max_len < 3 {
            return Err(Error::Config(format!(
                "max_len {max_len} cannot hold a sentence"
            )));
        }
        let (mut ids, mut off) = self.wordpiece_encode(words);
        if ids.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sentence".into()));
        }
        ids.truncate(max_len - 2);
        off.retain(|&(_, last)| last < ids.len());
        let source_len = ids.len();
        let mut seq = Vec::with_capacity(source_len + 2);
        seq.push(CLS_ID);
        seq.extend(ids);
        seq.push(SEP_ID);
        Ok(EncodedPair {
            segments: vec![0; seq.len()],
            ids: seq,
            source_offsets: off,
            target_offsets: Vec::new(),
            source_len,
            target_len: 0,
        })
    }
}

/// Word-level corpus → subword inventory by repeated merging of the most
/// frequent adjacent symbol pair (ties broken lexicographically). Every
/// character of the corpus enters the alphabet in both word-initial and
/// `##` form, so in-alphabet words never segment to `[UNK]`.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], target_size: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        for w in sentence {
            let w = w.as_ref();
            if !w.is_empty() {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut vocab = Vocab::with_reserved();
    let mut alphabet: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let base = RESERVED.len() + 2 * alphabet.len();
    if target_size <= base {
        return Err(Error::Config(format!(
            "vocabulary size {target_size} must exceed reserved tokens plus alphabet ({base})"
        )));
    }
    for &c in &alphabet {
        vocab.push(&c.to_string());
        vocab.push(&format!("{CONTINUATION}{c}"));
    }

    let mut words: Vec<(Vec<String>, u64)> = counts
        .into_iter()
        .map(|(w, n)| {
            let symbols = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    }
                })
                .collect();
            (symbols, n)
        })
        .collect();

    while vocab.len() < target_size {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += n;
            }
        }
        let Some((best, _)) = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (left, right) = (best.0.to_string(), best.1.to_string());
        let merged = format!(
            "{left}{}",
            right.strip_prefix(CONTINUATION).unwrap_or(&right)
        );
        vocab.push(&merged);
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
    }
    Ok(vocab)
}

/// `[CLS] source [SEP] target [SEP]` with its segment ids and the
/// word-to-subword offsets of both sentences (offsets are relative to each
/// sentence's own subword sequence).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub source_offsets: Vec<(usize, usize)>,
    pub target_offsets: Vec<(usize, usize)>,
    pub source_len: usize,
    pub target_len: usize,
}

impl EncodedPair {
    fn assemble(
        s_ids: Vec<usize>,
        s_off: Vec<(usize, usize)>,
        t_ids: Vec<usize>,
        t_off: Vec<(usize, usize)>,
    ) -> Self {
        let (source_len, target_len) = (s_ids.len(), t_ids.len());
        let mut ids = Vec::with_capacity(source_len + target_len + 3);
        ids.push(CLS_ID);
        ids.extend(s_ids);
        ids.push(SEP_ID);
        ids.extend(t_ids);
        ids.push(SEP_ID);
        let mut segments = vec![0; source_len + 2];
        segments.resize(ids.len(), 1);
        Self {
            ids,
            segments,
            source_offsets: s_off,
            target_offsets: t_off,
            source_len,
            target_len,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the first token of the target block (segment boundary).
    pub fn target_start(&self) -> usize {
        self.source_len + 2
    }

    /// Index of the `[SEP]` closing the source block.
    pub fn first_sep(&self) -> usize {
        self.source_len + 1
    }

    /// Positions that are not `[PAD]`.
    pub fn attention_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }

    /// Right-pads with `[PAD]` (segment 0) up to `len`.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        if len > out.ids.len() {
            out.ids.resize(len, PAD_ID);
            out.segments.resize(len, 0);
        }
        out
    }

    /// Token span covering source words `start..=end`.
    pub fn source_span(&self, start: usize, end: usize) -> Result<(usize, usize)> {
        let off = &self.source_offsets;
        if start > end || end >= off.len() {
            return Err(Error::WordSpan {
                start,
                end,
                words: off.len(),
            });
        }
        Ok((off[start].0 + 1, off[end].1 + 1))
    }

    /// Token span covering target words `start..=end`.
    pub fn target_span(&self, start: usize, end: usize) -> Result<(usize, usize)> {
        let off = &self.target_offsets;
        if start > end || end >= off.len() {
            return Err(Error::WordSpan {
                start,
                end,
                words: off.len(),
            });
        }
        let shift = self.target_start();
        Ok((off[start].0 + shift, off[end].1 + shift))
    }
}

/// Word-level aligned phrase pair, 0-based inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WordAlignment {
    pub source: (usize, usize),
    pub target: (usize, usize),
}

/// Token-level aligned span pair `((j, k), (m, n))` in the concatenated
/// sequence, 0-based inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpanPair {
    pub source: (usize, usize),
    pub target: (usize, usize),
}

impl SpanPair {
    /// `1 <= j <= k < m <= n <= N - 2`, source inside the source block and
    /// target inside the target block; no special token is covered.
    pub fn is_valid_for(&self, pair: &EncodedPair) -> bool {
        let (j, k) = self.source;
        let (m, n) = self.target;
        let len = pair.len();
        len >= 5
            && 1 <= j
            && j <= k
            && k < pair.first_sep()
            && pair.target_start() <= m
            && m <= n
            && n + 2 <= len
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    pub pairs: Vec<SpanPair>,
}

/// Moves word-level alignments onto token indices of `pair`.
pub fn remap_spans(alignments: &[WordAlignment], pair: &EncodedPair) -> Result<AlignmentSet> {
    let mut pairs = Vec::with_capacity(alignments.len());
    for a in alignments {
        let span = SpanPair {
            source: pair.source_span(a.source.0, a.source.1)?,
            target: pair.target_span(a.target.0, a.target.1)?,
        };
        debug_assert!(span.is_valid_for(pair));
        pairs.push(span);
    }
    Ok(AlignmentSet { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn dominant_string_is_merged() {
        let corpus = vec![vec!["aaa"]; 100];
        let v = build_vocab(&corpus, 260).unwrap();
        assert!(v.id("aaa").is_some());
        assert_eq!(v.segment_word("aaa"), vec![v.id("aaa").unwrap()]);
    }

    #[test]
    fn empty_corpus_and_tiny_target_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(build_vocab(&empty, 100), Err(Error::EmptyCorpus)));
        let corpus = vec![words("ab ba")];
        assert!(matches!(build_vocab(&corpus, 9), Err(Error::Config(_))));
    }

    #[test]
    fn known_characters_never_unk() {
        let corpus = vec![words("the cat sat on the mat"), words("a feline rested")];
        let v = build_vocab(&corpus, 40).unwrap();
        for w in ["tac", "mate", "zzz", "feline", "net"] {
            let ids = v.segment_word(w);
            if w.chars().all(|c| v.id(&c.to_string()).is_some()) {
                assert!(!ids.contains(&UNK_ID), "{w}");
                assert_eq!(v.detokenize(&ids), vec![w.to_string()]);
            } else {
                assert_eq!(ids, vec![UNK_ID]);
            }
        }
    }

    #[test]
    fn whole_word_and_forced_split() {
        let v = Vocab::from_tokens(&["the", "cat", "fel", "##ine", "f", "##e", "##l"]);
        let (ids, off) = v.wordpiece_encode(&["the", "cat"]);
        assert_eq!(ids, vec![v.id("the").unwrap(), v.id("cat").unwrap()]);
        assert_eq!(off, vec![(0, 0), (1, 1)]);
        let (ids, off) = v.wordpiece_encode(&["feline"]);
        assert_eq!(ids, vec![v.id("fel").unwrap(), v.id("##ine").unwrap()]);
        assert_eq!(off, vec![(0, 1)]);
    }

    #[test]
    fn long_words_become_unk() {
        let v = Vocab::from_tokens(&["a", "##a"]);
        assert_eq!(
            v.segment_word(&"a".repeat(MAX_WORD_CHARS + 1)),
            vec![UNK_ID]
        );
        assert_eq!(
            v.segment_word(&"a".repeat(MAX_WORD_CHARS)).len(),
            MAX_WORD_CHARS
        );
    }

    #[test]
    fn pair_layout() {
        let v = Vocab::from_tokens(&["a", "b"]);
        let p = v.encode_pair(&["a"], &["b"], 64).unwrap();
        assert_eq!(
            p.ids,
            vec![
                CLS_ID,
                v.id("a").unwrap(),
                SEP_ID,
                v.id("b").unwrap(),
                SEP_ID
            ]
        );
        assert_eq!(p.segments, vec![0, 0, 0, 1, 1]);
        assert_eq!(p.len(), 5);
        assert_eq!(p.target_start(), 3);
    }

    #[test]
    fn overlong_pair_names_both_lengths() {
        let v = Vocab::from_tokens(&["a", "b"]);
        let s = vec!["a"; 4];
        let t = vec!["b"; 3];
        match v.encode_pair(&s, &t, 9) {
            Err(Error::TooLong {
                source_subwords,
                target_subwords,
                max_len,
            }) => assert_eq!((source_subwords, target_subwords, max_len), (4, 3, 9)),
            other => panic!("{other:?}"),
        }
        assert!(v.encode_pair(&s, &t, 10).is_ok());
        let tr = v.encode_pair_truncated(&s, &t, 8).unwrap();
        assert_eq!(tr.len(), 8);
        assert_eq!((tr.source_len, tr.target_len), (3, 2));
    }

    #[test]
    fn hand_traced_remap() {
        let v = Vocab::from_tokens(&["the", "ca", "##t", "fel", "##ine"]);
        let p = v.encode_pair(&["the", "cat"], &["feline"], 64).unwrap();
        let set = remap_spans(
            &[WordAlignment {
                source: (1, 1),
                target: (0, 0),
            }],
            &p,
        )
        .unwrap();
        assert_eq!(set.pairs[0].source, (2, 3));
        assert_eq!(set.pairs[0].target, (5, 6));
        assert!(set.pairs[0].is_valid_for(&p));
        assert_eq!(p.source_span(0, 1).unwrap(), (1, p.source_len));
        assert!(matches!(p.source_span(0, 2), Err(Error::WordSpan { .. })));
        assert!(matches!(p.target_span(1, 1), Err(Error::WordSpan { .. })));
    }

    #[test]
    fn single_sentence_encoding() {
        let v = Vocab::from_tokens(&["a", "b"]);
        let p = v.encode_single(&["a", "b", "a"], 4).unwrap();
        assert_eq!(
            p.ids,
            vec![CLS_ID, v.id("a").unwrap(), v.id("b").unwrap(), SEP_ID]
        );
        assert_eq!(p.segments, vec![0; 4]);
        assert_eq!(p.source_offsets.len(), 2);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::from_tokens(&["x", "##y"]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        std::fs::write(&path, "[UNK]\n[PAD]\n").unwrap();
        assert!(matches!(
            Vocab::load(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
