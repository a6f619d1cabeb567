//! Paraphrase relation injection: joint phrasal and sentential paraphrase
//! classification on top of the encoder, with negative example synthesis and
//! dev-driven early stopping.

use std::fmt::Write as _;

use log::info;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tft_tensor::{adam_step, AdamConfig, AdamState, Binding, ParamSet, Tape, Tensor, Var};

use crate::data::AlignedPairRecord;
use crate::encoder::{forward, truncated_normal, Checkpoint, EncoderConfig};
use crate::error::{Error, Result};
use crate::tokenizer::{EncodedPair, Vocab, WordAlignment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhraseLabel {
    Paraphrase,
    Random,
    InParaphrase,
}

impl PhraseLabel {
    pub const ALL: [PhraseLabel; 3] = [
        PhraseLabel::Paraphrase,
        PhraseLabel::Random,
        PhraseLabel::InParaphrase,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SentenceLabel {
    Paraphrase = 0,
    Random = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    /// `[hs; ht; hs*ht; |hs-ht|]` over max-pooled spans.
    ElaborateMax,
    /// `[hs; ht]` over mean-pooled spans.
    SimpleMean,
}

impl FeatureMode {
    pub fn width(self, hidden: usize) -> usize {
        match self {
            FeatureMode::ElaborateMax => 4 * hidden,
            FeatureMode::SimpleMean => 2 * hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhraseTask {
    /// paraphrase / random / in-paraphrase
    ThreeWay,
    /// paraphrase / in-paraphrase
    Binary,
}

impl PhraseTask {
    pub fn classes(self) -> usize {
        match self {
            PhraseTask::ThreeWay => 3,
            PhraseTask::Binary => 2,
        }
    }

    pub fn class_of(self, label: PhraseLabel) -> usize {
        match (self, label) {
            (_, PhraseLabel::Paraphrase) => 0,
            (PhraseTask::ThreeWay, PhraseLabel::Random) => 1,
            (PhraseTask::ThreeWay, PhraseLabel::InParaphrase) => 2,
            (PhraseTask::Binary, PhraseLabel::InParaphrase) => 1,
            (PhraseTask::Binary, PhraseLabel::Random) => {
                unreachable!("binary task has no random class")
            }
        }
    }
}

/// Which heads are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Objective {
    pub phrase: Option<(PhraseTask, FeatureMode)>,
    pub sentence: bool,
}

impl Objective {
    pub fn joint() -> Self {
        Self {
            phrase: Some((PhraseTask::ThreeWay, FeatureMode::ElaborateMax)),
            sentence: true,
        }
    }
}

/// Injection variants compared in the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    SentenceOnly,
    Phrase3Way,
    PhraseBinary,
    Joint,
    JointSimpleFeature,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SentenceOnly,
        Variant::Phrase3Way,
        Variant::PhraseBinary,
        Variant::Joint,
        Variant::JointSimpleFeature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SentenceOnly => "sentence_only",
            Variant::Phrase3Way => "phrase_3way",
            Variant::PhraseBinary => "phrase_binary",
            Variant::Joint => "joint",
            Variant::JointSimpleFeature => "joint_simple_feature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn objective(self) -> Objective {
        let elaborate = FeatureMode::ElaborateMax;
        match self {
            Variant::SentenceOnly => Objective {
                phrase: None,
                sentence: true,
            },
            Variant::Phrase3Way => Objective {
                phrase: Some((PhraseTask::ThreeWay, elaborate)),
                sentence: false,
            },
            Variant::PhraseBinary => Objective {
                phrase: Some((PhraseTask::Binary, elaborate)),
                sentence: false,
            },
            Variant::Joint => Objective::joint(),
            Variant::JointSimpleFeature => Objective {
                phrase: Some((PhraseTask::ThreeWay, FeatureMode::SimpleMean)),
                sentence: true,
            },
        }
    }
}

pub const PHRASE_W: &str = "head.phrase.w";
pub const PHRASE_B: &str = "head.phrase.b";
pub const SENTENCE_W: &str = "head.sentence.w";
pub const SENTENCE_B: &str = "head.sentence.b";

/// One fully connected layer per enabled head.
pub fn init_heads(objective: &Objective, hidden: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    if let Some((task, mode)) = objective.phrase {
        let (w, c) = (mode.width(hidden), task.classes());
        p.insert(
            PHRASE_W,
            Tensor::new(vec![w, c], truncated_normal(&mut rng, w * c, 0.02)).expect("shape"),
        );
        p.insert(PHRASE_B, Tensor::zeros(&[c]));
    }
    if objective.sentence {
        p.insert(
            SENTENCE_W,
            Tensor::new(
                vec![hidden, 2],
                truncated_normal(&mut rng, hidden * 2, 0.02),
            )
            .expect("shape"),
        );
        p.insert(SENTENCE_B, Tensor::zeros(&[2]));
    }
    p
}

/// Phrase-pair feature from encoder states `h` (`[N, hidden]`) and two
/// 0-based inclusive token spans.
pub fn phrase_feature(
    tape: &mut Tape,
    h: Var,
    span_s: (usize, usize),
    span_t: (usize, usize),
    mode: FeatureMode,
) -> Result<Var> {
    Ok(match mode {
        FeatureMode::ElaborateMax => {
            let hs = tape.max_pool_span(h, span_s.0, span_s.1)?;
            let ht = tape.max_pool_span(h, span_t.0, span_t.1)?;
            let prod = tape.mul(hs, ht)?;
            let diff = tape.sub(hs, ht)?;
            let adiff = tape.abs(diff);
            tape.concat(&[hs, ht, prod, adiff])?
        }
        FeatureMode::SimpleMean => {
            let hs = tape.mean_pool_span(h, span_s.0, span_s.1)?;
            let ht = tape.mean_pool_span(h, span_t.0, span_t.1)?;
            tape.concat(&[hs, ht])?
        }
    })
}

/// Affine head over stacked feature rows, with optional input dropout.
pub fn head_logits(
    tape: &mut Tape,
    features: &[Var],
    w: Var,
    b: Var,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let x = tape.stack(features)?;
    let x = match dropout {
        Some((p, rng)) => tape.dropout(x, p, rng)?,
        None => x,
    };
    Ok(tape.linear(x, w, b)?)
}

/// Aligned pair ready for sampling: word alignments plus the phrase
/// inventory (every distinct aligned span) of each side.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub alignments: Vec<WordAlignment>,
    pub source_phrases: Vec<(usize, usize)>,
    pub target_phrases: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreparedCorpus {
    pub pairs: Vec<PreparedPair>,
    /// Pairs whose encoding exceeded the maximum length.
    pub dropped_too_long: usize,
    /// Pairs without any alignment (they feed only the sentential task).
    pub unaligned: usize,
}

pub fn prepare(
    records: &[AlignedPairRecord],
    vocab: &Vocab,
    max_len: usize,
) -> Result<PreparedCorpus> {
    let mut out = PreparedCorpus::default();
    for r in records {
        match vocab.encode_pair(&r.source, &r.target, max_len) {
            Err(Error::TooLong { .. }) => {
                out.dropped_too_long += 1;
                continue;
            }
            Err(e) => return Err(e),
            Ok(_) => {}
        }
        let alignments = r.word_alignments();
        if alignments.is_empty() {
            out.unaligned += 1;
        }
        let mut source_phrases: Vec<_> = alignments.iter().map(|a| a.source).collect();
        let mut target_phrases: Vec<_> = alignments.iter().map(|a| a.target).collect();
        source_phrases.sort_unstable();
        source_phrases.dedup();
        target_phrases.sort_unstable();
        target_phrases.dedup();
        out.pairs.push(PreparedPair {
            source: r.source.clone(),
            target: r.target.clone(),
            alignments,
            source_phrases,
            target_phrases,
        });
    }
    if out.dropped_too_long > 0 {
        info!(
            "{} pairs exceed max_len {max_len} and were dropped",
            out.dropped_too_long
        );
    }
    Ok(out)
}

/// Encoded input of one batch element and the corpus records it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub pair: EncodedPair,
    pub source_record: usize,
    pub target_record: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseExample {
    pub seq: usize,
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub label: PhraseLabel,
    /// Gold aligned target span that an in-paraphrase example replaced.
    pub replaced: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceExample {
    pub seq: usize,
    pub label: SentenceLabel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub sequences: Vec<Sequence>,
    pub phrases: Vec<PhraseExample>,
    pub sentences: Vec<SentenceExample>,
    /// Phrase draws whose class had no candidate in the batch.
    pub unrealized: usize,
}

/// Builds batches of gold pairs, random-partner pairs and phrase examples.
pub struct NegativeSampler<'a> {
    corpus: &'a PreparedCorpus,
    vocab: &'a Vocab,
    max_len: usize,
    classes: WeightedIndex<f64>,
    phrases_per_pair: usize,
}

impl<'a> NegativeSampler<'a> {
    /// `ratios` weight paraphrase, random and in-paraphrase phrase examples.
    pub fn new(
        corpus: &'a PreparedCorpus,
        vocab: &'a Vocab,
        max_len: usize,
        ratios: [f64; 3],
        phrases_per_pair: usize,
    ) -> Result<Self> {
        if corpus.pairs.len() < 2 {
            return Err(Error::InsufficientData(
                "negative sampling needs at least 2 pairs".into(),
            ));
        }
        if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!("invalid class ratios {ratios:?}")));
        }
        let classes = WeightedIndex::new(ratios).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            corpus,
            vocab,
            max_len,
            classes,
            phrases_per_pair,
        })
    }

    pub fn corpus(&self) -> &PreparedCorpus {
        self.corpus
    }

    fn partner<R: Rng>(&self, gold: usize, rng: &mut R) -> Result<(usize, EncodedPair)> {
        let pairs = &self.corpus.pairs;
        for _ in 0..100 {
            let mut r = rng.random_range(0..pairs.len() - 1);
            if r >= gold {
                r += 1;
            }
            if pairs[r].target == pairs[gold].target {
                continue;
            }
            if let Ok(enc) =
                self.vocab
                    .encode_pair(&pairs[gold].source, &pairs[r].target, self.max_len)
            {
                return Ok((r, enc));
            }
        }
        Err(Error::InsufficientData(format!(
            "no random partner with a distinct target fits max_len for pair {gold}"
        )))
    }

    /// Batch over the given gold pair indices.
    pub fn sample_batch<R: Rng>(&self, gold: &[usize], rng: &mut R) -> Result<Batch> {
        let pairs = &self.corpus.pairs;
        let mut batch = Batch::default();
        // (gold sequence, random sequence, gold record, partner record)
        let mut slots = Vec::with_capacity(gold.len());
        for &g in gold {
            let p = &pairs[g];
            let enc = self.vocab.encode_pair(&p.source, &p.target, self.max_len)?;
            let (r, enc_r) = self.partner(g, rng)?;
            let gs = batch.sequences.len();
            batch.sequences.push(Sequence {
                pair: enc,
                source_record: g,
                target_record: g,
            });
            batch.sequences.push(Sequence {
                pair: enc_r,
                source_record: g,
                target_record: r,
            });
            batch.sentences.push(SentenceExample {
                seq: gs,
                label: SentenceLabel::Paraphrase,
            });
            batch.sentences.push(SentenceExample {
                seq: gs + 1,
                label: SentenceLabel::Random,
            });
            slots.push((gs, gs + 1, g, r));
        }
        let aligned: Vec<_> = slots
            .iter()
            .filter(|s| !pairs[s.2].alignments.is_empty())
            .collect();
        let with_partner_phrase: Vec<_> = aligned
            .iter()
            .filter(|s| !pairs[s.3].target_phrases.is_empty())
            .copied()
            .collect();
        let with_alternatives: Vec<_> = aligned
            .iter()
            .filter(|s| pairs[s.2].target_phrases.len() >= 2)
            .copied()
            .collect();
        for _ in 0..self.phrases_per_pair * gold.len() {
            let label = PhraseLabel::ALL[self.classes.sample(rng)];
            let candidates = match label {
                PhraseLabel::Paraphrase => &aligned,
                PhraseLabel::Random => &with_partner_phrase,
                PhraseLabel::InParaphrase => &with_alternatives,
            };
            let Some(&&(gs, rs, g, r)) = candidates.choose(rng) else {
                batch.unrealized += 1;
                continue;
            };
            let p = &pairs[g];
            let a = *p.alignments.choose(rng).expect("aligned");
            let ex = match label {
                PhraseLabel::Paraphrase => {
                    let enc = &batch.sequences[gs].pair;
                    PhraseExample {
                        seq: gs,
                        source: enc.source_span(a.source.0, a.source.1)?,
                        target: enc.target_span(a.target.0, a.target.1)?,
                        label,
                        replaced: None,
                    }
                }
                PhraseLabel::Random => {
                    let enc = &batch.sequences[rs].pair;
                    let t = *pairs[r].target_phrases.choose(rng).expect("non-empty");
                    PhraseExample {
                        seq: rs,
                        source: enc.source_span(a.source.0, a.source.1)?,
                        target: enc.target_span(t.0, t.1)?,
                        label,
                        replaced: None,
                    }
                }
                PhraseLabel::InParaphrase => {
                    let enc = &batch.sequences[gs].pair;
                    let others: Vec<_> = p
                        .target_phrases
                        .iter()
                        .filter(|&&t| t != a.target)
                        .collect();
                    let Some(&&t) = others.choose(rng) else {
                        batch.unrealized += 1;
                        continue;
                    };
                    PhraseExample {
                        seq: gs,
                        source: enc.source_span(a.source.0, a.source.1)?,
                        target: enc.target_span(t.0, t.1)?,
                        label,
                        replaced: Some(enc.target_span(a.target.0, a.target.1)?),
                    }
                }
            };
            batch.phrases.push(ex);
        }
        Ok(batch)
    }

    /// Deterministic batches covering `indices` once, in order.
    pub fn fixed_batches(
        &self,
        indices: &[usize],
        batch_size: usize,
        seed: u64,
    ) -> Result<Vec<Batch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices
            .chunks(batch_size.max(1))
            .map(|chunk| self.sample_batch(chunk, &mut rng))
            .collect()
    }
}

/// Samples `batches` batches of `batch_size` gold pairs drawn without
/// replacement per epoch.
pub fn sample_negatives(
    sampler: &NegativeSampler<'_>,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = EpochOrder::new(sampler.corpus().pairs.len());
    (0..batches)
        .map(|_| {
            let gold = order.next_batch(batch_size, &mut rng);
            sampler.sample_batch(&gold, &mut rng)
        })
        .collect()
}

/// Reshuffled pass over `0..n`.
pub struct EpochOrder {
    order: Vec<usize>,
    pos: usize,
}

impl EpochOrder {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss terms of one batch; absent heads contribute no term.
pub struct BatchOutput {
    pub loss: Var,
    pub phrase_loss: Option<Var>,
    pub sentence_loss: Option<Var>,
    pub phrase_logits: Option<Var>,
    pub sentence_logits: Option<Var>,
}

/// One shared encoder pass per sequence, then both heads. `rng` enables
/// encoder dropout and head-input dropout.
pub fn batch_forward(
    tape: &mut Tape,
    bound: &Binding,
    config: &EncoderConfig,
    objective: &Objective,
    batch: &Batch,
    head_dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchOutput> {
    if objective.phrase.is_some() && batch.phrases.is_empty() {
        return Err(Error::InsufficientData(
            "batch has no phrase examples".into(),
        ));
    }
    if objective.sentence && batch.sentences.is_empty() {
        return Err(Error::InsufficientData(
            "batch has no sentence examples".into(),
        ));
    }
    let mut states = Vec::with_capacity(batch.sequences.len());
    for s in &batch.sequences {
        states.push(forward(tape, bound, config, &s.pair, rng.as_deref_mut())?);
    }
    let mut terms = Vec::new();
    let (mut phrase_loss, mut sentence_loss, mut phrase_logits, mut sentence_logits) =
        (None, None, None, None);
    if let Some((task, mode)) = objective.phrase {
        let mut feats = Vec::with_capacity(batch.phrases.len());
        let mut labels = Vec::with_capacity(batch.phrases.len());
        for ex in &batch.phrases {
            if task == PhraseTask::Binary && ex.label == PhraseLabel::Random {
                continue;
            }
            feats.push(phrase_feature(
                tape,
                states[ex.seq],
                ex.source,
                ex.target,
                mode,
            )?);
            labels.push(task.class_of(ex.label));
        }
        if feats.is_empty() {
            return Err(Error::InsufficientData(
                "batch has no phrase examples for this task".into(),
            ));
        }
        let drop = rng.as_deref_mut().map(|r| (head_dropout, r));
        let logits = head_logits(
            tape,
            &feats,
            bound.var(PHRASE_W)?,
            bound.var(PHRASE_B)?,
            drop,
        )?;
        let lp = tape.cross_entropy(logits, &labels)?;
        phrase_logits = Some(logits);
        phrase_loss = Some(lp);
        terms.push(lp);
    }
    if objective.sentence {
        let mut feats = Vec::with_capacity(batch.sentences.len());
        for ex in &batch.sentences {
            let cls = tape.gather(states[ex.seq], &[0])?;
            feats.push(tape.reshape(cls, vec![config.hidden])?);
        }
        let labels: Vec<usize> = batch.sentences.iter().map(|e| e.label as usize).collect();
        let drop = rng.map(|r| (head_dropout, r));
        let logits = head_logits(
            tape,
            &feats,
            bound.var(SENTENCE_W)?,
            bound.var(SENTENCE_B)?,
            drop,
        )?;
        let ls = tape.cross_entropy(logits, &labels)?;
        sentence_logits = Some(logits);
        sentence_loss = Some(ls);
        terms.push(ls);
    }
    let loss = match terms.as_slice() {
        [single] => *single,
        [a, b] => tape.add(*a, *b)?,
        _ => return Err(Error::Config("objective enables no head".into())),
    };
    Ok(BatchOutput {
        loss,
        phrase_loss,
        sentence_loss,
        phrase_logits,
        sentence_logits,
    })
}

/// `L = L_p + L_s` on one batch, each term a mean cross-entropy.
pub fn joint_loss(
    params: &ParamSet,
    config: &EncoderConfig,
    objective: &Objective,
    batch: &Batch,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let out = batch_forward(&mut tape, &bound, config, objective, batch, 0.0, None)?;
    let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
    Ok((
        tape.value(out.loss).item(),
        v(out.phrase_loss),
        v(out.sentence_loss),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum EarlyStopRule {
    /// Stop at the second evaluation (ever) that is below its predecessor.
    #[default]
    SecondDecrease,
    /// Stop at the second decrease in a row.
    SecondConsecutiveDecrease,
}

pub fn early_stop_decision(history: &[f64], rule: EarlyStopRule) -> bool {
    let drops: Vec<bool> = history.windows(2).map(|w| w[1] < w[0]).collect();
    match rule {
        EarlyStopRule::SecondDecrease => drops.iter().filter(|&&d| d).count() >= 2,
        EarlyStopRule::SecondConsecutiveDecrease => drops.windows(2).any(|w| w[0] && w[1]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionHyper {
    pub lr: f64,
    pub head_dropout: f64,
    pub batch: usize,
    pub ratios: [f64; 3],
    /// Phrase examples drawn per gold pair in a batch.
    pub phrases_per_pair: usize,
    pub max_steps: usize,
    /// Dev evaluation interval; `None` means one pass over 10% of train.
    pub eval_every: Option<usize>,
    pub early_stop: EarlyStopRule,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for InjectionHyper {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            head_dropout: 0.2,
            batch: 16,
            ratios: [1.0, 1.0, 1.0],
            phrases_per_pair: 3,
            max_steps: 2000,
            eval_every: None,
            early_stop: EarlyStopRule::SecondDecrease,
            objective: Objective::joint(),
            seed: 0,
        }
    }
}

impl InjectionHyper {
    /// Class ratios actually used: the binary task never draws `random`.
    pub fn effective_ratios(&self) -> [f64; 3] {
        match self.objective.phrase {
            Some((PhraseTask::Binary, _)) => [self.ratios[0], 0.0, self.ratios[2]],
            _ => self.ratios,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.phrases_per_pair == 0 {
            return Err(Error::Config(
                "batch and phrases_per_pair must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!(
                "head dropout {} outside [0, 1)",
                self.head_dropout
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!(
                "class ratios {:?} must all be > 0",
                self.ratios
            )));
        }
        if self.objective.phrase.is_none() && !self.objective.sentence {
            return Err(Error::Config("objective enables no head".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub phrase_loss: f64,
    pub sentence_loss: f64,
    pub loss: f64,
    pub dev_phrase_acc: Option<f64>,
    pub dev_sent_acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracies {
    pub phrase: Option<f64>,
    pub sentence: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct InjectionOutcome {
    /// Encoder and head parameters of the best dev evaluation.
    pub checkpoint: Checkpoint,
    pub rows: Vec<ReportRow>,
    pub best_step: usize,
    pub stopped_early: bool,
    pub dev: Accuracies,
    pub test: Accuracies,
}

/// Phrasal and sentential accuracy of `params` over fixed batches.
pub fn evaluate(
    params: &ParamSet,
    config: &EncoderConfig,
    objective: &Objective,
    batches: &[Batch],
) -> Result<Accuracies> {
    let (mut pc, mut pn, mut sc, mut sn) = (0usize, 0usize, 0usize, 0usize);
    for batch in batches {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let out = batch_forward(&mut tape, &bound, config, objective, batch, 0.0, None)?;
        if let (Some(logits), Some((task, _))) = (out.phrase_logits, objective.phrase) {
            let gold: Vec<usize> = batch
                .phrases
                .iter()
                .filter(|e| !(task == PhraseTask::Binary && e.label == PhraseLabel::Random))
                .map(|e| task.class_of(e.label))
                .collect();
            pc += count_correct(tape.value(logits), &gold);
            pn += gold.len();
        }
        if let Some(logits) = out.sentence_logits {
            let gold: Vec<usize> = batch.sentences.iter().map(|e| e.label as usize).collect();
            sc += count_correct(tape.value(logits), &gold);
            sn += gold.len();
        }
    }
    let ratio = |c: usize, n: usize| (n > 0).then(|| c as f64 / n as f64);
    Ok(Accuracies {
        phrase: ratio(pc, pn),
        sentence: ratio(sc, sn),
    })
}

/// Row-wise argmax (first maximum on ties) compared with `gold`.
pub fn count_correct(logits: &Tensor, gold: &[usize]) -> usize {
    gold.iter()
        .enumerate()
        .filter(|(i, &g)| argmax(logits.row(*i)) == g)
        .count()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Held-out data for [`inject_train`].
pub struct InjectionData<'a> {
    pub train: &'a PreparedCorpus,
    pub dev: &'a PreparedCorpus,
    pub test: Option<&'a PreparedCorpus>,
    pub vocab: &'a Vocab,
}

/// Mini-batch training of encoder plus heads until the early-stopping rule
/// fires or `max_steps` is reached; the best dev checkpoint is restored.
pub fn inject_train(
    data: &InjectionData<'_>,
    base: &Checkpoint,
    hyper: &InjectionHyper,
) -> Result<InjectionOutcome> {
    hyper.validate()?;
    if data.dev.pairs.len() < 2 {
        return Err(Error::InsufficientData(
            "dev split needs at least 2 pairs".into(),
        ));
    }
    let config = &base.config;
    if config.vocab_size != data.vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocab_size {} differs from vocabulary of {}",
            config.vocab_size,
            data.vocab.len()
        )));
    }
    let objective = &hyper.objective;
    let ratios = hyper.effective_ratios();
    let mk = |c| {
        NegativeSampler::new(
            c,
            data.vocab,
            config.max_len,
            ratios,
            hyper.phrases_per_pair,
        )
    };
    let train = mk(data.train)?;
    let dev = mk(data.dev)?;
    let dev_batches = dev.fixed_batches(
        &(0..data.dev.pairs.len()).collect::<Vec<_>>(),
        32,
        hyper.seed ^ 0xde5,
    )?;

    let mut params = base.encoder_params();
    params.extend_from(&init_heads(objective, config.hidden, hyper.seed));
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig::new(hyper.lr);
    let eval_every = hyper
        .eval_every
        .unwrap_or_else(|| (data.train.pairs.len() / 10).div_ceil(hyper.batch).max(1));

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order = EpochOrder::new(data.train.pairs.len());
    let score = |a: &Accuracies| a.phrase.or(a.sentence).unwrap_or(0.0);

    let first = evaluate(&params, config, objective, &dev_batches)?;
    let mut history = vec![score(&first)];
    let mut best = (score(&first), 0usize, params.clone());
    let mut rows = vec![ReportRow {
        step: 0,
        phrase_loss: f64::NAN,
        sentence_loss: f64::NAN,
        loss: f64::NAN,
        dev_phrase_acc: first.phrase,
        dev_sent_acc: first.sentence,
    }];
    let mut stopped_early = false;
    for step in 1..=hyper.max_steps {
        let gold = order.next_batch(hyper.batch, &mut rng);
        let batch = train.sample_batch(&gold, &mut rng)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = batch_forward(
            &mut tape,
            &bound,
            config,
            objective,
            &batch,
            hyper.head_dropout,
            Some(&mut rng),
        )?;
        let loss = tape.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        let mut row = ReportRow {
            step,
            phrase_loss: v(out.phrase_loss),
            sentence_loss: v(out.sentence_loss),
            loss,
            dev_phrase_acc: None,
            dev_sent_acc: None,
        };
        let grads = bound.gradients(&params, &tape.backward(out.loss)?);
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        if step % eval_every == 0 || step == hyper.max_steps {
            let acc = evaluate(&params, config, objective, &dev_batches)?;
            row.dev_phrase_acc = acc.phrase;
            row.dev_sent_acc = acc.sentence;
            info!(
                "inject step {step}: loss {loss:.4} dev phrase {:?} sentence {:?}",
                acc.phrase, acc.sentence
            );
            let s = score(&acc);
            if s > best.0 {
                best = (s, step, params.clone());
            }
            history.push(s);
            rows.push(row);
            if early_stop_decision(&history, hyper.early_stop) {
                stopped_early = true;
                break;
            }
        } else {
            rows.push(row);
        }
    }
    let (_, best_step, params) = best;
    let dev_acc = evaluate(&params, config, objective, &dev_batches)?;
    let test_acc = match data.test {
        Some(t) if t.pairs.len() >= 2 => {
            let s = mk(t)?;
            let batches = s.fixed_batches(
                &(0..t.pairs.len()).collect::<Vec<_>>(),
                32,
                hyper.seed ^ 0x7e57,
            )?;
            evaluate(&params, config, objective, &batches)?
        }
        _ => Accuracies::default(),
    };
    Ok(InjectionOutcome {
        checkpoint: Checkpoint::new(config.clone(), params)?,
        rows,
        best_step,
        stopped_early,
        dev: dev_acc,
        test: test_acc,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn loss_cell(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("step,L_p,L_s,L,dev_phrase_acc,dev_sent_acc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            loss_cell(r.phrase_loss),
            loss_cell(r.sentence_loss),
            loss_cell(r.loss),
            cell(r.dev_phrase_acc),
            cell(r.dev_sent_acc)
        );
    }
    out
}
