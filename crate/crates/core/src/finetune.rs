//! Downstream fine-tuning with a single affine head on the `[CLS]` state,
//! evaluation metrics, and the subsample / ablation experiment grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tft_tensor::{adam_step, AdamConfig, AdamState, ParamSet, Tape, Tensor, Var};

use crate::data::{Constituent, Lexicon, Sentence, SentenceSampler, WordClass};
use crate::encoder::{forward, Checkpoint, EncoderConfig};
use crate::error::{Error, Result};
use crate::injection::{argmax, inject_train, InjectionData, InjectionHyper, Variant};
use crate::tokenizer::{EncodedPair, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    PairClassification,
    PairRegression,
    SingleSentenceClassification,
}

impl TaskKind {
    pub fn is_pair(self) -> bool {
        !matches!(self, TaskKind::SingleSentenceClassification)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PairClassification => "pair_classification",
            TaskKind::PairRegression => "pair_regression",
            TaskKind::SingleSentenceClassification => "single_sentence_classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TaskKind::PairClassification,
            TaskKind::PairRegression,
            TaskKind::SingleSentenceClassification,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Accuracy,
    F1,
    Pearson,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Pearson => "pearson",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Metric::Accuracy, Metric::F1, Metric::Pearson]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    /// Class index for classification, raw score for regression.
    pub label: f64,
    pub sentence1: Vec<String>,
    pub sentence2: Option<Vec<String>>,
}

/// File-backed task description.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

impl TaskData {
    /// Number of classes (1 for regression).
    pub fn classes(&self) -> usize {
        match self.kind {
            TaskKind::PairRegression => 1,
            _ => self
                .train
                .iter()
                .chain(&self.dev)
                .chain(&self.test)
                .map(|e| e.label as usize + 1)
                .max()
                .unwrap_or(0),
        }
    }

    /// Kind/metric/label consistency.
    pub fn validate(&self) -> Result<()> {
        let regression = self.kind == TaskKind::PairRegression;
        match (regression, self.metric) {
            (true, Metric::Pearson) | (false, Metric::Accuracy | Metric::F1) => {}
            _ => {
                return Err(Error::Config(format!(
                    "task {}: metric {} does not fit {}",
                    self.name,
                    self.metric.name(),
                    self.kind.name()
                )))
            }
        }
        if self.train.is_empty() || self.dev.is_empty() {
            return Err(Error::InsufficientData(format!(
                "task {}: empty train or dev split",
                self.name
            )));
        }
        let all = || self.train.iter().chain(&self.dev).chain(&self.test);
        if all().any(|e| e.sentence2.is_some() != self.kind.is_pair()) {
            return Err(Error::Config(format!(
                "task {}: sentence count does not match {}",
                self.name,
                self.kind.name()
            )));
        }
        if regression {
            if all().any(|e| !e.label.is_finite()) {
                return Err(Error::Config(format!(
                    "task {}: non-finite regression target",
                    self.name
                )));
            }
        } else {
            if all().any(|e| e.label < 0.0 || e.label.fract() != 0.0) {
                return Err(Error::Config(format!(
                    "task {}: classification labels must be non-negative integers",
                    self.name
                )));
            }
            let seen: BTreeSet<usize> = all().map(|e| e.label as usize).collect();
            if seen.len() != self.classes() {
                return Err(Error::Config(format!(
                    "task {}: labels {seen:?} are not densely indexed from 0",
                    self.name
                )));
            }
            if self.metric == Metric::F1 && self.classes() != 2 {
                return Err(Error::Config(format!(
                    "task {}: f1 needs exactly 2 classes",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Tab-separated file with header `label<TAB>sentence1[<TAB>sentence2]`.
pub fn load_task_file(path: &Path, kind: TaskKind) -> Result<Vec<TaskExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let expected = if kind.is_pair() {
        "label\tsentence1\tsentence2"
    } else {
        "label\tsentence1"
    };
    let bad = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    match lines.next() {
        Some((_, h)) if h.trim_end() == expected => {}
        _ => {
            return Err(bad(
                1,
                format!("expected header `{}`", expected.replace('\t', "<TAB>")),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let want = if kind.is_pair() { 3 } else { 2 };
        if cols.len() != want {
            return Err(bad(
                i + 1,
                format!("expected {want} columns, found {}", cols.len()),
            ));
        }
        let label: f64 = cols[0]
            .trim()
            .parse()
            .map_err(|_| bad(i + 1, format!("label `{}` is not a number", cols[0])))?;
        let words = |s: &str| {
            s.split_whitespace()
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
        };
        out.push(TaskExample {
            label,
            sentence1: words(cols[1]),
            sentence2: kind.is_pair().then(|| words(cols[2])),
        });
    }
    Ok(out)
}

pub fn save_task_file(path: &Path, kind: TaskKind, examples: &[TaskExample]) -> Result<()> {
    let mut text = String::from(if kind.is_pair() {
        "label\tsentence1\tsentence2\n"
    } else {
        "label\tsentence1\n"
    });
    for e in examples {
        let _ = write!(text, "{}\t{}", e.label, e.sentence1.join(" "));
        if let Some(s2) = &e.sentence2 {
            let _ = write!(text, "\t{}", s2.join(" "));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_task(spec: &TaskSpec) -> Result<TaskData> {
    let task = TaskData {
        name: spec.name.clone(),
        kind: spec.kind,
        metric: spec.metric,
        train: load_task_file(&spec.train, spec.kind)?,
        dev: load_task_file(&spec.dev, spec.kind)?,
        test: match &spec.test {
            Some(p) => load_task_file(p, spec.kind)?,
            None => Vec::new(),
        },
    };
    task.validate()?;
    Ok(task)
}

/// Pearson-undefined and length errors are reported, never masked.
pub fn compute_metric(preds: &[f64], golds: &[f64], metric: Metric) -> Result<f64> {
    if preds.len() != golds.len() || preds.len() < 2 {
        return Err(Error::Invalid(format!(
            "metric needs equal lengths >= 2, got {} and {}",
            preds.len(),
            golds.len()
        )));
    }
    Ok(match metric {
        Metric::Accuracy => {
            preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64
        }
        Metric::F1 => {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (&p, &g) in preds.iter().zip(golds) {
                match (p == 1.0, g == 1.0) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        }
        Metric::Pearson => {
            let n = preds.len() as f64;
            let mp = preds.iter().sum::<f64>() / n;
            let mg = golds.iter().sum::<f64>() / n;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (&p, &g) in preds.iter().zip(golds) {
                sxy += (p - mp) * (g - mg);
                sxx += (p - mp) * (p - mp);
                syy += (g - mg) * (g - mg);
            }
            if sxx == 0.0 || syy == 0.0 {
                return Err(Error::Invalid(
                    "pearson correlation undefined for zero variance".into(),
                ));
            }
            (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneHyper {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 3e-5,
            epochs: 4,
            dropout: 0.1,
            seed: 0,
        }
    }
}

pub const TASK_W: &str = "head.task.w";
pub const TASK_B: &str = "head.task.b";

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub kind: TaskKind,
    pub classes: usize,
    /// Min-max range of the training targets (regression only).
    pub target_range: Option<(f64, f64)>,
}

fn encode_example(
    vocab: &Vocab,
    kind: TaskKind,
    ex: &TaskExample,
    max_len: usize,
) -> Result<EncodedPair> {
    match &ex.sentence2 {
        Some(s2) if kind.is_pair() => vocab.encode_pair_truncated(&ex.sentence1, s2, max_len),
        _ => vocab.encode_single(&ex.sentence1, max_len),
    }
}

/// Head outputs for a batch: `[B, classes]` logits or `[B, 1]` scores.
fn head_forward(
    tape: &mut Tape,
    params: &tft_tensor::Binding,
    config: &EncoderConfig,
    pairs: &[EncodedPair],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let h = forward(tape, params, config, p, rng.as_deref_mut())?;
        let cls = tape.gather(h, &[0])?;
        rows.push(tape.reshape(cls, vec![config.hidden])?);
    }
    let x = tape.stack(&rows)?;
    let x = match rng {
        Some(r) if dropout > 0.0 => tape.dropout(x, dropout, r)?,
        _ => x,
    };
    Ok(tape.linear(x, params.var(TASK_W)?, params.var(TASK_B)?)?)
}

/// Fine-tunes `checkpoint` plus a zero-initialized affine head for exactly
/// `hyper.epochs` passes over `train`.
pub fn finetune(
    task: &TaskData,
    train: &[TaskExample],
    vocab: &Vocab,
    checkpoint: &Checkpoint,
    hyper: &FinetuneHyper,
) -> Result<TaskModel> {
    task.validate()?;
    if hyper.epochs == 0 || hyper.batch == 0 {
        return Err(Error::Config("epochs and batch must be at least 1".into()));
    }
    if checkpoint.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocab_size {} differs from vocabulary of {}",
            checkpoint.config.vocab_size,
            vocab.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData("empty fine-tuning set".into()));
    }
    let mut config = checkpoint.config.clone();
    config.dropout = hyper.dropout;
    let classes = task.classes();
    let target_range = (task.kind == TaskKind::PairRegression).then(|| {
        let lo = train.iter().map(|e| e.label).fold(f64::INFINITY, f64::min);
        let hi = train
            .iter()
            .map(|e| e.label)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let scaled = |y: f64| match target_range {
        Some((lo, hi)) if hi > lo => (y - lo) / (hi - lo),
        Some(_) => 0.5,
        None => y,
    };
    let mut params = checkpoint.encoder_params();
    params.insert(TASK_W, Tensor::zeros(&[config.hidden, classes]));
    params.insert(TASK_B, Tensor::zeros(&[classes]));

    let encoded: Vec<EncodedPair> = train
        .iter()
        .map(|e| encode_example(vocab, task.kind, e, config.max_len))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig::new(hyper.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            let pairs: Vec<EncodedPair> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = head_forward(
                &mut tape,
                &bound,
                &config,
                &pairs,
                hyper.dropout,
                Some(&mut rng),
            )?;
            let loss = if task.kind == TaskKind::PairRegression {
                let mut terms = Vec::with_capacity(chunk.len());
                for (r, &i) in chunk.iter().enumerate() {
                    let row = tape.gather(out, &[r])?;
                    terms.push(tape.mse(row, scaled(train[i].label))?);
                }
                tape.mean(&terms)?
            } else {
                let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label as usize).collect();
                tape.cross_entropy(out, &labels)?
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: adam.t as usize,
                    loss: value,
                });
            }
            let grads = bound.gradients(&params, &tape.backward(loss)?);
            adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        }
    }
    config.dropout = checkpoint.config.dropout;
    Ok(TaskModel {
        config,
        params,
        kind: task.kind,
        classes,
        target_range,
    })
}

impl TaskModel {
    /// Class indices or rescaled regression scores.
    pub fn predict(&self, vocab: &Vocab, examples: &[TaskExample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(64) {
            let pairs: Vec<EncodedPair> = chunk
                .iter()
                .map(|e| encode_example(vocab, self.kind, e, self.config.max_len))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let bound = self.params.bind_frozen(&mut tape);
            let logits = head_forward(&mut tape, &bound, &self.config, &pairs, 0.0, None)?;
            let v = tape.value(logits);
            for r in 0..chunk.len() {
                out.push(match self.target_range {
                    Some((lo, hi)) => lo + v.row(r)[0] * (hi - lo),
                    None => argmax(v.row(r)) as f64,
                });
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, vocab: &Vocab, examples: &[TaskExample], metric: Metric) -> Result<f64> {
        let preds = self.predict(vocab, examples)?;
        let golds: Vec<f64> = examples.iter().map(|e| e.label).collect();
        compute_metric(&preds, &golds, metric)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub task: String,
    pub train_size: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub task: String,
    pub train_size: usize,
    pub seed: u64,
    pub delta: f64,
}

impl ExperimentReport {
    /// Appends a row; a repeated (variant, task, size, seed) is an error.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if self.rows.iter().any(|r| {
            r.variant == row.variant
                && r.task == row.task
                && r.train_size == row.train_size
                && r.seed == row.seed
        }) {
            return Err(Error::Invalid(format!(
                "duplicate report cell ({}, {}, {}, {})",
                row.variant, row.task, row.train_size, row.seed
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn value(&self, variant: &str, task: &str, size: usize, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.variant == variant && r.task == task && r.train_size == size && r.seed == seed
            })
            .map(|r| r.value)
    }

    /// `treatment - baseline` for every cell present under both variants.
    pub fn deltas(&self, baseline: &str, treatment: &str) -> Vec<DeltaRow> {
        self.rows
            .iter()
            .filter(|r| r.variant == baseline)
            .filter_map(|b| {
                self.value(treatment, &b.task, b.train_size, b.seed)
                    .map(|t| DeltaRow {
                        task: b.task.clone(),
                        train_size: b.train_size,
                        seed: b.seed,
                        delta: t - b.value,
                    })
            })
            .collect()
    }

    /// Mean delta per (task, size), in first-seen order.
    pub fn mean_deltas(&self, baseline: &str, treatment: &str) -> Vec<(String, usize, f64)> {
        let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for d in self.deltas(baseline, treatment) {
            let key = (d.task.clone(), d.train_size);
            if !acc.contains_key(&key) {
                order.push(key.clone());
            }
            let e = acc.entry(key).or_insert((0.0, 0));
            e.0 += d.delta;
            e.1 += 1;
        }
        order
            .into_iter()
            .map(|k| {
                let (s, n) = acc[&k];
                (k.0, k.1, s / n as f64)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_variant,task,train_size,metric,value,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.variant, r.task, r.train_size, r.metric, r.value, r.seed
            );
        }
        out
    }

    pub fn deltas_csv(&self, baseline: &str, treatment: &str) -> String {
        let mut out = String::from("task,train_size,seed,delta\n");
        for d in self.deltas(baseline, treatment) {
            let _ = writeln!(out, "{},{},{},{}", d.task, d.train_size, d.seed, d.delta);
        }
        out
    }
}

/// Runs `f` over `cells` on up to `jobs` threads; results keep cell order.
pub fn run_cells<T, R, F>(cells: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if jobs <= 1 || cells.len() <= 1 {
        return cells.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> =
        cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let r = f(&cells[i]);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every cell ran"))
        .collect()
}

/// Nested subsamples: for each seed one permutation of train, prefixes of
/// which give every size.
pub fn nested_subsamples(n: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(&s) = sizes.iter().find(|&&s| s > n || s == 0) {
        return Err(Error::InsufficientData(format!(
            "subsample size {s} outside 1..={n} available training examples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sizes.iter().map(|&s| perm[..s].to_vec()).collect())
}

/// Fine-tunes every named checkpoint on the same nested subsamples and
/// records dev metrics.
pub fn subsample_experiment(
    task: &TaskData,
    vocab: &Vocab,
    checkpoints: &[(&str, &Checkpoint)],
    sizes: &[usize],
    seeds: &[u64],
    hyper: &FinetuneHyper,
    jobs: usize,
) -> Result<ExperimentReport> {
    task.validate()?;
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != sizes.len() {
        return Err(Error::Config("subsample sizes must be distinct".into()));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        let subsets = nested_subsamples(task.train.len(), sizes, seed)?;
        for (&size, subset) in sizes.iter().zip(subsets) {
            for &(name, ck) in checkpoints {
                cells.push((name, ck, size, seed, subset.clone()));
            }
        }
    }
    let results = run_cells(
        &cells,
        jobs,
        |(name, ck, size, seed, subset)| -> Result<ReportRow> {
            let train: Vec<TaskExample> = subset.iter().map(|&i| task.train[i].clone()).collect();
            let h = FinetuneHyper {
                seed: *seed,
                ..hyper.clone()
            };
            let model = finetune(task, &train, vocab, ck, &h)?;
            Ok(ReportRow {
                variant: name.to_string(),
                task: task.name.clone(),
                train_size: *size,
                metric: task.metric.name().to_string(),
                value: model.evaluate(vocab, &task.dev, task.metric)?,
                seed: *seed,
            })
        },
    );
    let mut report = ExperimentReport::default();
    for r in results {
        report.push(r?)?;
    }
    Ok(report)
}

pub const BASELINE: &str = "baseline";

/// Injection variants (plus the un-injected baseline) fine-tuned on every
/// task at full training size.
#[allow(clippy::too_many_arguments)]
pub fn ablation_experiment(
    injection: &InjectionData<'_>,
    base: &Checkpoint,
    tasks: &[TaskData],
    variants: &[String],
    seeds: &[u64],
    inject_hyper: &InjectionHyper,
    finetune_hyper: &FinetuneHyper,
    jobs: usize,
) -> Result<ExperimentReport> {
    let mut parsed = Vec::with_capacity(variants.len());
    for v in variants {
        if v == BASELINE {
            parsed.push(None);
        } else {
            parsed.push(Some(Variant::parse(v).ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{v}`; expected baseline, sentence_only, phrase_3way, phrase_binary, joint or joint_simple_feature"
                ))
            })?));
        }
    }
    for t in tasks {
        t.validate()?;
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        for (name, v) in variants.iter().zip(&parsed) {
            cells.push((name.clone(), *v, seed));
        }
    }
    let results = run_cells(
        &cells,
        jobs,
        |(name, variant, seed)| -> Result<Vec<ReportRow>> {
            let model = match variant {
                None => base.clone(),
                Some(v) => {
                    let h = InjectionHyper {
                        objective: v.objective(),
                        seed: *seed,
                        ..inject_hyper.clone()
                    };
                    inject_train(injection, base, &h)?.checkpoint
                }
            };
            let mut rows = Vec::new();
            for t in tasks {
                let h = FinetuneHyper {
                    seed: *seed,
                    ..finetune_hyper.clone()
                };
                let m = finetune(t, &t.train, injection.vocab, &model, &h)?;
                rows.push(ReportRow {
                    variant: name.clone(),
                    task: t.name.clone(),
                    train_size: t.train.len(),
                    metric: t.metric.name().to_string(),
                    value: m.evaluate(injection.vocab, &t.dev, t.metric)?,
                    seed: *seed,
                });
            }
            Ok(rows)
        },
    );
    let mut report = ExperimentReport::default();
    for r in results {
        for row in r? {
            report.push(row)?;
        }
    }
    Ok(report)
}

/// Synthetic downstream task families over a generator lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticTask {
    /// Paraphrase identification: positives are synonym rewrites, negatives
    /// are rewrites with replaced content or unrelated sentences.
    Paraphrase,
    /// Similarity score 0–5: share of constituents whose meaning survives.
    Similarity,
    /// Single-sentence label: does the sentence mention a noun from the
    /// first quarter of the noun clusters.
    Topic,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Paraphrase => "paraphrase",
            SyntheticTask::Similarity => "similarity",
            SyntheticTask::Topic => "topic",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            SyntheticTask::Paraphrase => TaskKind::PairClassification,
            SyntheticTask::Similarity => TaskKind::PairRegression,
            SyntheticTask::Topic => TaskKind::SingleSentenceClassification,
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            SyntheticTask::Paraphrase => Metric::Accuracy,
            SyntheticTask::Similarity => Metric::Pearson,
            SyntheticTask::Topic => Metric::Accuracy,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SyntheticTask::Paraphrase,
            SyntheticTask::Similarity,
            SyntheticTask::Topic,
        ]
        .into_iter()
        .find(|t| t.name() == s)
    }
}

/// Replaces the content of constituent `ci` with words from other clusters of
/// the same classes.
fn replace_constituent<R: Rng>(
    lexicon: &Lexicon,
    s: &Sentence,
    ci: usize,
    rng: &mut R,
) -> Sentence {
    let mut out = s.clone();
    let (_, a, b) = s.constituents[ci];
    for i in a..=b {
        let class = lexicon.clusters[s.clusters[i]].class;
        let others: Vec<usize> = lexicon
            .by_class(class)
            .into_iter()
            .filter(|&c| c != s.clusters[i])
            .collect();
        if let Some(&c) = others.choose(rng) {
            out.clusters[i] = c;
            out.words[i] = lexicon.clusters[c].words.choose(rng).unwrap().clone();
        }
    }
    out
}

fn synonym_rewrite<R: Rng>(
    sampler: &SentenceSampler<'_>,
    s: &Sentence,
    rng: &mut R,
) -> Vec<String> {
    sampler.substitute(&s.words, &s.clusters, 0.5, rng)
}

fn synthetic_examples<R: Rng>(
    lexicon: &Lexicon,
    templates: &[Vec<Constituent>],
    task: SyntheticTask,
    n: usize,
    rng: &mut R,
) -> Vec<TaskExample> {
    let sampler = SentenceSampler::new(lexicon);
    let nouns = lexicon.by_class(WordClass::Noun);
    let topical: BTreeSet<usize> = nouns[..nouns.len() / 4].iter().copied().collect();
    (0..n)
        .map(|i| {
            let t = templates.choose(rng).unwrap();
            let s = sampler.sample(t, None, rng);
            match task {
                SyntheticTask::Paraphrase => {
                    let positive = i % 2 == 0;
                    let other = if positive {
                        synonym_rewrite(&sampler, &s, rng)
                    } else if rng.random_bool(0.5) {
                        let t2 = templates.choose(rng).unwrap();
                        sampler.sample(t2, None, rng).words
                    } else {
                        let content: Vec<usize> = (0..s.constituents.len())
                            .filter(|&c| {
                                s.constituents[c].0 != Constituent::Verb || s.constituents.len() < 3
                            })
                            .collect();
                        let ci = *content.choose(rng).unwrap();
                        let changed = replace_constituent(lexicon, &s, ci, rng);
                        synonym_rewrite(&sampler, &changed, rng)
                    };
                    TaskExample {
                        label: if positive { 1.0 } else { 0.0 },
                        sentence1: s.words.clone(),
                        sentence2: Some(other),
                    }
                }
                SyntheticTask::Similarity => {
                    let k = s.constituents.len();
                    let replace = rng.random_range(0..=k);
                    let mut idx: Vec<usize> = (0..k).collect();
                    idx.shuffle(rng);
                    let mut changed = s.clone();
                    for &ci in &idx[..replace] {
                        changed = replace_constituent(lexicon, &changed, ci, rng);
                    }
                    TaskExample {
                        label: 5.0 * (k - replace) as f64 / k as f64,
                        sentence1: s.words.clone(),
                        sentence2: Some(synonym_rewrite(&sampler, &changed, rng)),
                    }
                }
                SyntheticTask::Topic => TaskExample {
                    label: if s.clusters.iter().any(|c| topical.contains(c)) {
                        1.0
                    } else {
                        0.0
                    },
                    sentence1: s.words.clone(),
                    sentence2: None,
                },
            }
        })
        .collect()
}

/// Deterministic synthetic task with the given split sizes.
pub fn synthetic_task(
    lexicon: &Lexicon,
    templates: &[Vec<Constituent>],
    task: SyntheticTask,
    sizes: (usize, usize, usize),
    seed: u64,
) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n| synthetic_examples(lexicon, templates, task, n, &mut rng);
    TaskData {
        name: task.name().to_string(),
        kind: task.kind(),
        metric: task.metric(),
        train: gen(sizes.0),
        dev: gen(sizes.1),
        test: gen(sizes.2),
    }
}
