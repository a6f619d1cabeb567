use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use tft_core::data::{
    corpus_stats, default_templates, format_stats_table, generate_documents, generate_synthetic,
    load_corpus, load_documents, save_corpus, save_documents, split_corpus, AlignedPairRecord,
    Lexicon, SynthConfig,
};
use tft_core::encoder::{init_params, Checkpoint, EncoderConfig};
use tft_core::finetune::{
    ablation_experiment, finetune as finetune_task, load_task, save_task_file,
    subsample_experiment, synthetic_task, FinetuneHyper, SyntheticTask, TaskData, TaskKind,
    TaskSpec, BASELINE,
};
use tft_core::gradcheck::{joint_gradcheck, JointCheckConfig};
use tft_core::injection::{
    inject_train, prepare, report_csv, EarlyStopRule, InjectionData, InjectionHyper, Variant,
};
use tft_core::pretrain::{loss_csv, pretrain_loop, PretrainHyper};
use tft_core::tokenizer::{self, Vocab};
use tft_core::{Error, Result};
use tft_tensor::{AdjointFault, OpKind};

use crate::config::RunConfig;
use crate::manifest::Manifest;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub command: &'static str,
}

impl Context {
    fn seed(&self) -> Result<u64> {
        self.cfg.get("seed", 0u64)
    }

    fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest {
            command: self.command.to_string(),
            seed: self.seed()?,
            ..Manifest::default()
        })
    }

    fn finish(&self, mut m: Manifest) -> Result<()> {
        m.config = self.cfg.resolved();
        let path = m.write(&self.out)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn path(&self, key: &str, default: &str) -> PathBuf {
        self.cfg.path_or(key, self.out.join(default))
    }

    /// `--lr` wins over the command-specific key.
    fn lr(&self, key: &str, default: f64) -> Result<f64> {
        match self.cfg.opt::<f64>("lr")? {
            Some(lr) => Ok(lr),
            None => self.cfg.get(key, default),
        }
    }

    fn parsed_list<T: FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>> {
        self.cfg
            .list(key, default)
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
            })
            .collect()
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            err: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        err: e,
    })
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn gen_data(ctx: &Context) -> Result<bool> {
    let cfg = &ctx.cfg;
    let seed = ctx.seed()?;
    let lexicon = Lexicon::generate(cfg.get("lexicon.seed", 0u64)?);
    let synth = SynthConfig {
        lexicon: lexicon.clone(),
        templates: default_templates(),
        reorder_prob: cfg.get("synth.reorder_prob", 0.3)?,
        substitution_prob: cfg.get("synth.substitution_prob", 0.5)?,
        noise: cfg.get("synth.noise", 0.0)?,
        size: cfg.get("synth.size", 2000usize)?,
        seed,
    };
    let (corpus, stats) = generate_synthetic(&synth)?;
    info!(
        "{} pairs, {} alignments, {} corrupted",
        corpus.len(),
        stats.alignments,
        stats.corrupted
    );
    let split = split_corpus(
        &corpus,
        cfg.get("split.dev", 200usize)?,
        cfg.get("split.test", 200usize)?,
        seed + 1,
    )?;
    let mut m = ctx.manifest()?;
    let corpus_dir = ctx.out.join("corpus");
    fs::create_dir_all(&corpus_dir).map_err(|e| Error::Io {
        path: corpus_dir.clone(),
        err: e,
    })?;
    for (name, part) in SPLITS.iter().zip([&split.train, &split.dev, &split.test]) {
        let p = corpus_dir.join(format!("{name}.jsonl"));
        save_corpus(&p, part)?;
        m.output(&p)?;
    }
    let docs = generate_documents(
        &lexicon,
        &default_templates(),
        cfg.get("docs.count", 200usize)?,
        cfg.get("docs.sentences", 6usize)?,
        seed + 2,
    );
    let docs_path = ctx.out.join("documents.txt");
    save_documents(&docs_path, &docs)?;
    m.output(&docs_path)?;
    let sizes = (
        cfg.get("task.train", 2000usize)?,
        cfg.get("task.dev", 400usize)?,
        cfg.get("task.test", 400usize)?,
    );
    for (i, name) in cfg
        .list("tasks", "paraphrase,similarity,topic")
        .iter()
        .enumerate()
    {
        let kind = SyntheticTask::parse(name)
            .ok_or_else(|| Error::Config(format!("unknown synthetic task `{name}`")))?;
        let task = synthetic_task(
            &lexicon,
            &default_templates(),
            kind,
            sizes,
            seed + 3 + i as u64,
        );
        let dir = ctx.out.join("tasks").join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            err: e,
        })?;
        for (split, rows) in SPLITS.iter().zip([&task.train, &task.dev, &task.test]) {
            let p = dir.join(format!("{split}.tsv"));
            save_task_file(&p, task.kind, rows)?;
            m.output(&p)?;
        }
        let spec = format!(
            "name={}\nkind={}\nmetric={}\ntrain=train.tsv\ndev=dev.tsv\ntest=test.tsv\n",
            task.name,
            task.kind.name(),
            task.metric.name()
        );
        write(&dir.join("task.cfg"), &spec)?;
    }
    ctx.finish(m)?;
    Ok(true)
}

fn corpus_paths(ctx: &Context) -> [PathBuf; 3] {
    let dir = ctx.path("corpus", "corpus");
    SPLITS.map(|s| dir.join(format!("{s}.jsonl")))
}

fn load_splits(ctx: &Context, m: &mut Manifest) -> Result<Vec<Vec<AlignedPairRecord>>> {
    corpus_paths(ctx)
        .iter()
        .map(|p| {
            m.input(p)?;
            load_corpus(p)
        })
        .collect()
}

pub fn build_vocab(ctx: &Context) -> Result<bool> {
    let mut m = ctx.manifest()?;
    let mut sentences: Vec<Vec<String>> = Vec::new();
    for part in load_splits(ctx, &mut m)? {
        for r in part {
            sentences.push(r.source);
            sentences.push(r.target);
        }
    }
    let docs_path = ctx.path("documents", "documents.txt");
    if docs_path.exists() {
        m.input(&docs_path)?;
        sentences.extend(load_documents(&docs_path)?.into_iter().flatten());
    }
    let vocab = tokenizer::build_vocab(&sentences, ctx.cfg.get("vocab.size", 800usize)?)?;
    let path = ctx.out.join("vocab.txt");
    vocab.save(&path)?;
    m.output(&path)?;
    info!("vocabulary of {} entries", vocab.len());
    ctx.finish(m)?;
    Ok(true)
}

fn load_vocab(ctx: &Context, m: &mut Manifest) -> Result<Vocab> {
    let p = ctx.path("vocab", "vocab.txt");
    m.input(&p)?;
    Vocab::load(&p)
}

fn load_checkpoint(
    ctx: &Context,
    key: &str,
    default: &str,
    m: &mut Manifest,
) -> Result<Checkpoint> {
    let p = ctx.path(key, default);
    m.input(&p)?;
    Checkpoint::load(&p)
}

fn encoder_config(cfg: &RunConfig, vocab_size: usize) -> Result<EncoderConfig> {
    let d = EncoderConfig::desk(vocab_size);
    let c = EncoderConfig {
        layers: cfg.get("encoder.layers", d.layers)?,
        hidden: cfg.get("encoder.hidden", d.hidden)?,
        heads: cfg.get("encoder.heads", d.heads)?,
        ff: cfg.get("encoder.ff", d.ff)?,
        max_len: cfg.get("encoder.max_len", d.max_len)?,
        vocab_size,
        dropout: cfg.get("encoder.dropout", d.dropout)?,
    };
    c.validate()?;
    Ok(c)
}

pub fn pretrain(ctx: &Context) -> Result<bool> {
    let cfg = &ctx.cfg;
    let mut m = ctx.manifest()?;
    let vocab = load_vocab(ctx, &mut m)?;
    let config = encoder_config(cfg, vocab.len())?;
    let seed = ctx.seed()?;
    let ckpt_path = ctx.out.join("pretrained.ckpt");
    let steps = cfg.get("pretrain.steps", 500usize)?;
    let checkpoint = if steps == 0 {
        Checkpoint::new(config.clone(), init_params(&config, seed)?)?
    } else {
        let docs_path = ctx.path("documents", "documents.txt");
        m.input(&docs_path)?;
        let docs = load_documents(&docs_path)?;
        let hyper = PretrainHyper {
            steps,
            batch: cfg.get("pretrain.batch", 8usize)?,
            lr: ctx.lr("pretrain.lr", 1e-3)?,
            mask_rate: cfg.get("pretrain.mask_rate", 0.15)?,
            nsp: cfg.bool("pretrain.nsp", true)?,
            rescue_path: Some(ctx.out.join("pretrain-rescue.ckpt")),
        };
        let run = pretrain_loop(&docs, &vocab, &config, None, &hyper, seed)?;
        let loss_path = ctx.out.join("pretrain_loss.csv");
        write(&loss_path, &loss_csv(&run.losses))?;
        m.output(&loss_path)?;
        Checkpoint::new(config, run.checkpoint.encoder_params())?
    };
    checkpoint.save(&ckpt_path)?;
    m.output(&ckpt_path)?;
    ctx.finish(m)?;
    Ok(true)
}

fn injection_hyper(ctx: &Context) -> Result<InjectionHyper> {
    let cfg = &ctx.cfg;
    let d = InjectionHyper::default();
    let variant_name = cfg.str_or("inject.variant", "joint");
    let variant = Variant::parse(&variant_name)
        .ok_or_else(|| Error::Config(format!("unknown variant `{variant_name}`")))?;
    let ratios: Vec<f64> = ctx.parsed_list("inject.ratios", "1,1,1")?;
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| Error::Config("inject.ratios needs three values".into()))?;
    let early_stop = match cfg.str_or("inject.early_stop", "second_decrease").as_str() {
        "second_decrease" => EarlyStopRule::SecondDecrease,
        "second_consecutive_decrease" => EarlyStopRule::SecondConsecutiveDecrease,
        other => return Err(Error::Config(format!("unknown early-stop rule `{other}`"))),
    };
    let h = InjectionHyper {
        lr: ctx.lr("inject.lr", d.lr)?,
        head_dropout: cfg.get("inject.head_dropout", d.head_dropout)?,
        batch: cfg.get("inject.batch", d.batch)?,
        ratios,
        phrases_per_pair: cfg.get("inject.phrases_per_pair", d.phrases_per_pair)?,
        max_steps: cfg.get("inject.max_steps", d.max_steps)?,
        eval_every: cfg.opt("inject.eval_every")?,
        early_stop,
        objective: variant.objective(),
        seed: ctx.seed()?,
    };
    h.validate()?;
    Ok(h)
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map(|v| v.to_string()).unwrap_or_default()
}

pub fn inject(ctx: &Context) -> Result<bool> {
    let mut m = ctx.manifest()?;
    let vocab = load_vocab(ctx, &mut m)?;
    let base = load_checkpoint(ctx, "checkpoint", "pretrained.ckpt", &mut m)?;
    let splits = load_splits(ctx, &mut m)?;
    let max_len = base.config.max_len;
    let prepared: Vec<_> = splits
        .iter()
        .map(|s| prepare(s, &vocab, max_len))
        .collect::<Result<_>>()?;
    for (name, p) in SPLITS.iter().zip(&prepared) {
        info!(
            "{name}: {} pairs usable, {} too long",
            p.pairs.len(),
            p.dropped_too_long
        );
    }
    let hyper = injection_hyper(ctx)?;
    let data = InjectionData {
        train: &prepared[0],
        dev: &prepared[1],
        test: Some(&prepared[2]),
        vocab: &vocab,
    };
    let outcome = inject_train(&data, &base, &hyper)?;
    let report = ctx.out.join("injection_report.csv");
    write(&report, &report_csv(&outcome.rows))?;
    m.output(&report)?;
    let summary = ctx.out.join("injection_summary.csv");
    write(
        &summary,
        &format!(
            "split,phrase_acc,sentence_acc,best_step,stopped_early\ndev,{},{},{},{}\ntest,{},{},{},{}\n",
            fmt_acc(outcome.dev.phrase),
            fmt_acc(outcome.dev.sentence),
            outcome.best_step,
            outcome.stopped_early,
            fmt_acc(outcome.test.phrase),
            fmt_acc(outcome.test.sentence),
            outcome.best_step,
            outcome.stopped_early,
        ),
    )?;
    m.output(&summary)?;
    let ckpt = ctx.out.join("injected.ckpt");
    outcome.checkpoint.save(&ckpt)?;
    m.output(&ckpt)?;
    info!("dev {:?}, test {:?}", outcome.dev, outcome.test);
    ctx.finish(m)?;
    Ok(true)
}

fn load_task_dir(dir: &Path, m: &mut Manifest) -> Result<TaskData> {
    let spec_path = dir.join("task.cfg");
    let spec_cfg = RunConfig::load(&spec_path)?;
    let field = |k: &str| {
        spec_cfg
            .str(k)
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("{}: missing `{k}`", spec_path.display())))
    };
    let kind_name = field("kind")?;
    let metric_name = field("metric")?;
    let spec = TaskSpec {
        name: field("name")?,
        kind: TaskKind::parse(&kind_name).ok_or_else(|| {
            Error::Config(format!(
                "{}: unknown kind `{kind_name}`",
                spec_path.display()
            ))
        })?,
        metric: tft_core::finetune::Metric::parse(&metric_name).ok_or_else(|| {
            Error::Config(format!(
                "{}: unknown metric `{metric_name}`",
                spec_path.display()
            ))
        })?,
        train: dir.join(field("train")?),
        dev: dir.join(field("dev")?),
        test: spec_cfg.str("test").map(|t| dir.join(t)),
    };
    m.input(&spec.train)?;
    m.input(&spec.dev)?;
    if let Some(t) = &spec.test {
        m.input(t)?;
    }
    load_task(&spec)
}

fn finetune_hyper(ctx: &Context) -> Result<FinetuneHyper> {
    let cfg = &ctx.cfg;
    let d = FinetuneHyper::default();
    Ok(FinetuneHyper {
        batch: cfg.get("finetune.batch", d.batch)?,
        lr: ctx.lr("finetune.lr", d.lr)?,
        epochs: cfg.get("finetune.epochs", d.epochs)?,
        dropout: cfg.get("finetune.dropout", d.dropout)?,
        seed: ctx.seed()?,
    })
}

pub fn finetune(ctx: &Context) -> Result<bool> {
    let mut m = ctx.manifest()?;
    let vocab = load_vocab(ctx, &mut m)?;
    let ckpt = load_checkpoint(ctx, "checkpoint", "injected.ckpt", &mut m)?;
    let task = load_task_dir(&ctx.path("task", "tasks/paraphrase"), &mut m)?;
    let hyper = finetune_hyper(ctx)?;
    let model = finetune_task(&task, &task.train, &vocab, &ckpt, &hyper)?;
    let mut csv = String::from("task,metric,split,value\n");
    for (split, rows) in [("dev", &task.dev), ("test", &task.test)] {
        if rows.is_empty() {
            continue;
        }
        let v = model.evaluate(&vocab, rows, task.metric)?;
        info!("{} {split} {}: {v:.4}", task.name, task.metric.name());
        csv.push_str(&format!(
            "{},{},{split},{v}\n",
            task.name,
            task.metric.name()
        ));
    }
    let path = ctx.out.join("finetune.csv");
    write(&path, &csv)?;
    m.output(&path)?;
    ctx.finish(m)?;
    Ok(true)
}

pub fn subsample(ctx: &Context) -> Result<bool> {
    let mut m = ctx.manifest()?;
    let vocab = load_vocab(ctx, &mut m)?;
    let baseline = load_checkpoint(ctx, "baseline", "pretrained.ckpt", &mut m)?;
    let injected = load_checkpoint(ctx, "injected", "injected.ckpt", &mut m)?;
    let task = load_task_dir(&ctx.path("task", "tasks/paraphrase"), &mut m)?;
    let sizes: Vec<usize> = ctx
        .cfg
        .list("subsample.sizes", "100,500,full")
        .iter()
        .map(|s| match s.as_str() {
            "full" => Ok(task.train.len()),
            _ => s
                .parse()
                .map_err(|_| Error::Config(format!("`subsample.sizes`: cannot parse `{s}`"))),
        })
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = ctx.parsed_list("seeds", "0,1,2")?;
    let hyper = finetune_hyper(ctx)?;
    let report = subsample_experiment(
        &task,
        &vocab,
        &[(BASELINE, &baseline), ("injected", &injected)],
        &sizes,
        &seeds,
        &hyper,
        ctx.jobs,
    )?;
    let path = ctx.out.join("subsample.csv");
    write(&path, &report.to_csv())?;
    m.output(&path)?;
    let deltas = ctx.out.join("subsample_deltas.csv");
    write(&deltas, &report.deltas_csv(BASELINE, "injected"))?;
    m.output(&deltas)?;
    ctx.finish(m)?;
    Ok(true)
}

pub fn ablation(ctx: &Context) -> Result<bool> {
    let mut m = ctx.manifest()?;
    let vocab = load_vocab(ctx, &mut m)?;
    let base = load_checkpoint(ctx, "checkpoint", "pretrained.ckpt", &mut m)?;
    let splits = load_splits(ctx, &mut m)?;
    let max_len = base.config.max_len;
    let prepared: Vec<_> = splits
        .iter()
        .map(|s| prepare(s, &vocab, max_len))
        .collect::<Result<_>>()?;
    let tasks_dir = ctx.path("tasks_dir", "tasks");
    let tasks = ctx
        .cfg
        .list("tasks", "paraphrase,similarity,topic")
        .iter()
        .map(|t| load_task_dir(&tasks_dir.join(t), &mut m))
        .collect::<Result<Vec<_>>>()?;
    let default_variants = std::iter::once(BASELINE)
        .chain(Variant::ALL.iter().map(|v| v.name()))
        .collect::<Vec<_>>()
        .join(",");
    let variants = ctx.cfg.list("variants", &default_variants);
    let seeds: Vec<u64> = ctx.parsed_list("seeds", "0")?;
    let inject_hyper = injection_hyper(ctx)?;
    let data = InjectionData {
        train: &prepared[0],
        dev: &prepared[1],
        test: None,
        vocab: &vocab,
    };
    let report = ablation_experiment(
        &data,
        &base,
        &tasks,
        &variants,
        &seeds,
        &inject_hyper,
        &finetune_hyper(ctx)?,
        ctx.jobs,
    )?;
    let path = ctx.out.join("ablation.csv");
    write(&path, &report.to_csv())?;
    m.output(&path)?;
    ctx.finish(m)?;
    Ok(true)
}

fn parse_fault(s: &str) -> Result<AdjointFault> {
    let (op, scale) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("gradcheck.fault `{s}` is not op:scale")))?;
    let op = match op {
        "matmul" => OpKind::MatMul,
        "add" => OpKind::Add,
        "mul" => OpKind::Mul,
        "softmax" => OpKind::Softmax,
        "layer_norm" => OpKind::LayerNorm,
        "gelu" => OpKind::Gelu,
        "max_pool" => OpKind::MaxPool,
        "mean_pool" => OpKind::MeanPool,
        "concat" => OpKind::Concat,
        "cross_entropy" => OpKind::CrossEntropy,
        other => {
            return Err(Error::Config(format!(
                "gradcheck.fault: unknown op `{other}`"
            )))
        }
    };
    let scale = scale
        .parse()
        .map_err(|_| Error::Config(format!("gradcheck.fault: bad scale `{scale}`")))?;
    Ok(AdjointFault { op, scale })
}

pub fn gradcheck(ctx: &Context) -> Result<bool> {
    let cfg = &ctx.cfg;
    let mut check = JointCheckConfig::desk();
    check.seed = ctx.seed()?;
    check.per_tensor = cfg.get("gradcheck.per_tensor", check.per_tensor)?;
    check.encoder.layers = cfg.get("encoder.layers", check.encoder.layers)?;
    check.encoder.hidden = cfg.get("encoder.hidden", check.encoder.hidden)?;
    check.encoder.heads = cfg.get("encoder.heads", check.encoder.heads)?;
    check.encoder.ff = cfg.get("encoder.ff", check.encoder.ff)?;
    check.encoder.validate()?;
    let fault = cfg
        .opt::<String>("gradcheck.fault")?
        .map(|s| parse_fault(&s))
        .transpose()?;
    let report = joint_gradcheck(&check, fault)?;
    let pass = report.max_rel_error < 1e-3;
    println!(
        "max relative error {:.3e} over {} coordinates ({} skipped near kinks): {}",
        report.max_rel_error,
        report.checked,
        report.skipped,
        if pass { "PASS" } else { "FAIL" }
    );
    let path = ctx.out.join("gradcheck.csv");
    write(
        &path,
        &format!(
            "max_rel_error,checked,skipped,pass\n{},{},{},{pass}\n",
            report.max_rel_error, report.checked, report.skipped
        ),
    )?;
    let mut m = ctx.manifest()?;
    m.output(&path)?;
    ctx.finish(m)?;
    Ok(pass)
}

pub fn stats(ctx: &Context) -> Result<bool> {
    let mut m = ctx.manifest()?;
    let rows = corpus_paths(ctx)
        .iter()
        .zip(SPLITS)
        .map(|(p, name)| {
            m.input(p)?;
            Ok(corpus_stats(name, &load_corpus(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = format_stats_table(&rows);
    print!("{table}");
    let path = ctx.out.join("stats.tsv");
    write(&path, &table)?;
    m.output(&path)?;
    ctx.finish(m)?;
    Ok(true)
}
