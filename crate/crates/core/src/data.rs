//! Alignment-annotated paraphrase corpora: JSON-lines I/O, deterministic
//! splits, corpus statistics and a synthetic generator with gold phrase
//! alignments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::WordAlignment;

/// One sentential paraphrase pair with word-level phrase alignments
/// `[js, je, ms, ne]`, 0-based inclusive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignedPairRecord {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub alignments: Vec<[usize; 4]>,
}

impl AlignedPairRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err("source and target must be non-empty".into());
        }
        for (i, &[js, je, ms, ne]) in self.alignments.iter().enumerate() {
            if js > je || je >= self.source.len() {
                return Err(format!(
                    "alignment {i}: source span ({js}, {je}) invalid for {} words",
                    self.source.len()
                ));
            }
            if ms > ne || ne >= self.target.len() {
                return Err(format!(
                    "alignment {i}: target span ({ms}, {ne}) invalid for {} words",
                    self.target.len()
                ));
            }
        }
        Ok(())
    }

    pub fn word_alignments(&self) -> Vec<WordAlignment> {
        self.alignments
            .iter()
            .map(|&[js, je, ms, ne]| WordAlignment {
                source: (js, je),
                target: (ms, ne),
            })
            .collect()
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<AlignedPairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: AlignedPairRecord =
            serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        rec.validate().map_err(parse)?;
        out.push(rec);
    }
    if out.is_empty() {
        warn!("{}: corpus is empty", path.display());
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, corpus: &[AlignedPairRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in corpus {
        text.push_str(&serde_json::to_string(rec).map_err(|e| Error::Invalid(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded disjoint partition into train/dev/test.
pub fn split_corpus<T: Clone>(
    corpus: &[T],
    dev_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<Split<T>> {
    if dev_n + test_n >= corpus.len() {
        return Err(Error::InsufficientData(format!(
            "dev {dev_n} + test {test_n} leaves no training data from {} records",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        dev: pick(&order[..dev_n]),
        test: pick(&order[dev_n..dev_n + test_n]),
        train: pick(&order[dev_n + test_n..]),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub name: String,
    pub sentence_pairs: usize,
    pub phrase_pairs: usize,
}

pub fn corpus_stats(name: &str, corpus: &[AlignedPairRecord]) -> CorpusStats {
    CorpusStats {
        name: name.to_string(),
        sentence_pairs: corpus.len(),
        phrase_pairs: corpus.iter().map(|r| r.alignments.len()).sum(),
    }
}

fn abbreviate(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{}k", (n as f64 / 1e3).round() as usize)
    } else {
        n.to_string()
    }
}

/// Source | Sentence | Phrase table with a closing total row.
pub fn format_stats_table(rows: &[CorpusStats]) -> String {
    let mut out = String::from("Source\tSentence\tPhrase\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            r.name,
            abbreviate(r.sentence_pairs),
            abbreviate(r.phrase_pairs)
        );
    }
    let s: usize = rows.iter().map(|r| r.sentence_pairs).sum();
    let p: usize = rows.iter().map(|r| r.phrase_pairs).sum();
    let _ = writeln!(out, "Total\t{}\t{}", abbreviate(s), abbreviate(p));
    out
}

/// Plain-text corpus: one sentence per line, blank line between documents.
pub fn load_documents(path: &Path) -> Result<Vec<Vec<Vec<String>>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut current: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.split_whitespace().map(str::to_lowercase).collect());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    Ok(docs)
}

pub fn save_documents(path: &Path, docs: &[Vec<Vec<String>>]) -> Result<()> {
    let text = docs
        .iter()
        .map(|d| d.iter().map(|s| s.join(" ") + "\n").collect::<String>())
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WordClass {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
    Prep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Constituent {
    /// determiner, optional adjective, noun
    NounPhrase,
    Verb,
    /// preposition, determiner, noun
    PrepPhrase,
    Adverb,
}

impl Constituent {
    fn movable(self) -> bool {
        matches!(self, Constituent::PrepPhrase | Constituent::Adverb)
    }
}

/// Synonym set of one word class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub class: WordClass,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub clusters: Vec<Cluster>,
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

impl Lexicon {
    /// Pseudo-word lexicon with synonym sets of 2–3 members.
    pub fn generate(seed: u64) -> Self {
        let plan = [
            (WordClass::Det, 3),
            (WordClass::Adj, 20),
            (WordClass::Noun, 50),
            (WordClass::Verb, 25),
            (WordClass::Adv, 10),
            (WordClass::Prep, 6),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut clusters = Vec::new();
        for (class, n) in plan {
            let syllables = match class {
                WordClass::Det | WordClass::Prep => 1..=2,
                _ => 2..=3,
            };
            for _ in 0..n {
                let size = rng.random_range(2..=3);
                let mut words = Vec::with_capacity(size);
                while words.len() < size {
                    let k = rng.random_range(syllables.clone());
                    let w: String = (0..k)
                        .map(|_| {
                            format!(
                                "{}{}",
                                ONSETS.choose(&mut rng).unwrap(),
                                VOWELS.choose(&mut rng).unwrap()
                            )
                        })
                        .collect();
                    if seen.insert(w.clone()) {
                        words.push(w);
                    }
                }
                clusters.push(Cluster { class, words });
            }
        }
        Self { clusters }
    }

    pub fn by_class(&self, class: WordClass) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&i| self.clusters[i].class == class)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.clusters.iter().enumerate() {
            if c.words.len() < 2 {
                return Err(Error::Config(format!(
                    "synonym set {i} has fewer than 2 members"
                )));
            }
        }
        for class in [
            WordClass::Det,
            WordClass::Noun,
            WordClass::Verb,
            WordClass::Prep,
            WordClass::Adj,
            WordClass::Adv,
        ] {
            if self.by_class(class).is_empty() {
                return Err(Error::Config(format!("lexicon has no {class:?} clusters")));
            }
        }
        Ok(())
    }

    /// Cluster index of every word.
    pub fn word_index(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for (i, c) in self.clusters.iter().enumerate() {
            for w in &c.words {
                m.insert(w.as_str(), i);
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub lexicon: Lexicon,
    pub templates: Vec<Vec<Constituent>>,
    pub reorder_prob: f64,
    pub substitution_prob: f64,
    /// Fraction of alignments whose target span is replaced by a wrong span.
    pub noise: f64,
    pub size: usize,
    pub seed: u64,
}

pub fn default_templates() -> Vec<Vec<Constituent>> {
    use Constituent::*;
    vec![
        vec![NounPhrase, Verb, NounPhrase],
        vec![NounPhrase, Verb, NounPhrase, PrepPhrase],
        vec![NounPhrase, Adverb, Verb, NounPhrase],
        vec![NounPhrase, Verb, PrepPhrase],
        vec![NounPhrase, Verb, NounPhrase, Adverb],
    ]
}

impl SynthConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            lexicon: Lexicon::generate(0),
            templates: default_templates(),
            reorder_prob: 0.3,
            substitution_prob: 0.5,
            noise: 0.0,
            size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lexicon.validate()?;
        if self.templates.is_empty() || self.templates.iter().any(Vec::is_empty) {
            return Err(Error::Config("templates must be non-empty".into()));
        }
        for (name, p) in [
            ("reorder_prob", self.reorder_prob),
            ("substitution_prob", self.substitution_prob),
            ("noise", self.noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A generated sentence: words plus the cluster of each word and the word
/// range of each constituent.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub words: Vec<String>,
    pub clusters: Vec<usize>,
    pub constituents: Vec<(Constituent, usize, usize)>,
}

pub struct SentenceSampler<'a> {
    lexicon: &'a Lexicon,
    by_class: BTreeMap<WordClass, Vec<usize>>,
}

impl<'a> SentenceSampler<'a> {
    pub fn new(lexicon: &'a Lexicon) -> Self {
        let mut by_class = BTreeMap::new();
        for class in [
            WordClass::Det,
            WordClass::Adj,
            WordClass::Noun,
            WordClass::Verb,
            WordClass::Adv,
            WordClass::Prep,
        ] {
            by_class.insert(class, lexicon.by_class(class));
        }
        Self { lexicon, by_class }
    }

    fn pick_cluster<R: Rng>(
        &self,
        class: WordClass,
        topic: Option<&[usize]>,
        rng: &mut R,
    ) -> usize {
        match (class, topic) {
            (WordClass::Noun, Some(t)) if !t.is_empty() => *t.choose(rng).unwrap(),
            _ => *self.by_class[&class].choose(rng).unwrap(),
        }
    }

    fn push_word<R: Rng>(&self, s: &mut Sentence, cluster: usize, rng: &mut R) {
        s.words.push(
            self.lexicon.clusters[cluster]
                .words
                .choose(rng)
                .unwrap()
                .clone(),
        );
        s.clusters.push(cluster);
    }

    /// Fills `template`; nouns are drawn from `topic` clusters when given.
    pub fn sample<R: Rng>(
        &self,
        template: &[Constituent],
        topic: Option<&[usize]>,
        rng: &mut R,
    ) -> Sentence {
        let mut s = Sentence {
            words: Vec::new(),
            clusters: Vec::new(),
            constituents: Vec::new(),
        };
        for &c in template {
            let start = s.words.len();
            let classes: Vec<WordClass> = match c {
                Constituent::NounPhrase => {
                    if rng.random_bool(0.5) {
                        vec![WordClass::Det, WordClass::Adj, WordClass::Noun]
                    } else {
                        vec![WordClass::Det, WordClass::Noun]
                    }
                }
                Constituent::Verb => vec![WordClass::Verb],
                Constituent::PrepPhrase => vec![WordClass::Prep, WordClass::Det, WordClass::Noun],
                Constituent::Adverb => vec![WordClass::Adv],
            };
            for class in classes {
                let cl = self.pick_cluster(class, topic, rng);
                self.push_word(&mut s, cl, rng);
            }
            s.constituents.push((c, start, s.words.len() - 1));
        }
        s
    }

    /// Replaces each word, with probability `p`, by a different member of its
    /// synonym set.
    pub fn substitute<R: Rng>(
        &self,
        words: &[String],
        clusters: &[usize],
        p: f64,
        rng: &mut R,
    ) -> Vec<String> {
        words
            .iter()
            .zip(clusters)
            .map(|(w, &c)| {
                if p > 0.0 && rng.random_bool(p) {
                    let others: Vec<&String> = self.lexicon.clusters[c]
                        .words
                        .iter()
                        .filter(|x| *x != w)
                        .collect();
                    (*others.choose(rng).unwrap()).clone()
                } else {
                    w.clone()
                }
            })
            .collect()
    }
}

/// Target derived from `source`: synonym substitution inside constituents and,
/// with probability `reorder_prob`, one adjunct constituent moved to the other
/// end of the sentence. Returns the target and one alignment per constituent.
pub fn paraphrase<R: Rng>(
    sampler: &SentenceSampler<'_>,
    source: &Sentence,
    substitution_prob: f64,
    reorder_prob: f64,
    rng: &mut R,
) -> (Vec<String>, Vec<[usize; 4]>) {
    let n = source.constituents.len();
    let mut order: Vec<usize> = (0..n).collect();
    if reorder_prob > 0.0 && rng.random_bool(reorder_prob) {
        let movable: Vec<usize> = (0..n)
            .filter(|&i| source.constituents[i].0.movable())
            .collect();
        if let Some(&i) = movable.choose(rng) {
            order.retain(|&x| x != i);
            if i == n - 1 {
                order.insert(0, i);
            } else {
                order.push(i);
            }
        }
    }
    let mut target = Vec::with_capacity(source.words.len());
    let mut alignments = Vec::with_capacity(n);
    for &ci in &order {
        let (_, a, b) = source.constituents[ci];
        let ms = target.len();
        target.extend(sampler.substitute(
            &source.words[a..=b],
            &source.clusters[a..=b],
            substitution_prob,
            rng,
        ));
        alignments.push([a, b, ms, target.len() - 1]);
    }
    alignments.sort_unstable();
    (target, alignments)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthStats {
    pub alignments: usize,
    pub corrupted: usize,
}

/// Generates `config.size` paraphrase pairs with gold alignments.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(Vec<AlignedPairRecord>, SynthStats)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampler = SentenceSampler::new(&config.lexicon);
    let mut stats = SynthStats::default();
    let mut out = Vec::with_capacity(config.size);
    for _ in 0..config.size {
        let template = config.templates.choose(&mut rng).unwrap();
        let source = sampler.sample(template, None, &mut rng);
        let (target, mut alignments) = paraphrase(
            &sampler,
            &source,
            config.substitution_prob,
            config.reorder_prob,
            &mut rng,
        );
        for al in &mut alignments {
            stats.alignments += 1;
            if config.noise > 0.0 && rng.random_bool(config.noise) {
                if let Some(span) = wrong_span(target.len(), (al[2], al[3]), &mut rng) {
                    al[2] = span.0;
                    al[3] = span.1;
                    stats.corrupted += 1;
                }
            }
        }
        out.push(AlignedPairRecord {
            source: source.words,
            target,
            alignments,
        });
    }
    Ok((out, stats))
}

/// Uniform span of 1–3 words differing from `gold`, emulating aligner error.
fn wrong_span<R: Rng>(len: usize, gold: (usize, usize), rng: &mut R) -> Option<(usize, usize)> {
    let mut spans = Vec::new();
    for a in 0..len {
        for b in a..len.min(a + 3) {
            if (a, b) != gold {
                spans.push((a, b));
            }
        }
    }
    spans.choose(rng).copied()
}

/// Topic-coherent documents for masked-LM / next-sentence pre-training.
pub fn generate_documents(
    lexicon: &Lexicon,
    templates: &[Vec<Constituent>],
    n_docs: usize,
    sentences_per_doc: usize,
    seed: u64,
) -> Vec<Vec<Vec<String>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = SentenceSampler::new(lexicon);
    let nouns = lexicon.by_class(WordClass::Noun);
    (0..n_docs)
        .map(|_| {
            let topic: Vec<usize> = nouns
                .choose_multiple(&mut rng, 4.min(nouns.len()))
                .copied()
                .collect();
            (0..sentences_per_doc)
                .map(|_| {
                    let t = templates.choose(&mut rng).unwrap();
                    sampler.sample(t, Some(&topic), &mut rng).words
                })
                .collect()
        })
        .collect()
}
