//! End-to-end finite-difference check of the joint injection loss through
//! encoder and heads.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tft_tensor::{
    grad_check_branches, AdjointFault, GradCheckConfig, GradCheckReport, ParamSet, Tape,
};

use crate::encoder::{init_params, EncoderConfig};
use crate::error::Result;
use crate::injection::{
    batch_forward, init_heads, Batch, Objective, PhraseExample, PhraseLabel, SentenceExample,
    SentenceLabel, Sequence,
};
use crate::tokenizer::{EncodedPair, CLS_ID, RESERVED, SEP_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct JointCheckConfig {
    pub encoder: EncoderConfig,
    pub objective: Objective,
    /// Coordinates probed per parameter tensor, drawn among those with a
    /// non-zero analytic gradient.
    pub per_tensor: usize,
    pub seed: u64,
    pub check: GradCheckConfig,
}

impl JointCheckConfig {
    /// Two layers of width 64, small vocabulary, dropout off.
    pub fn desk() -> Self {
        let mut encoder = EncoderConfig::desk(40);
        encoder.max_len = 24;
        encoder.dropout = 0.0;
        Self {
            encoder,
            objective: Objective::joint(),
            per_tensor: 12,
            seed: 0,
            check: GradCheckConfig::default(),
        }
    }
}

fn random_pair<R: Rng>(rng: &mut R, vocab: usize, s_len: usize, t_len: usize) -> EncodedPair {
    let mut word = || rng.random_range(RESERVED.len()..vocab);
    let mut ids = vec![CLS_ID];
    ids.extend((0..s_len).map(|_| word()));
    ids.push(SEP_ID);
    ids.extend((0..t_len).map(|_| word()));
    ids.push(SEP_ID);
    let segments = (0..ids.len()).map(|i| usize::from(i > s_len + 1)).collect();
    EncodedPair {
        ids,
        segments,
        source_offsets: (0..s_len).map(|i| (i, i)).collect(),
        target_offsets: (0..t_len).map(|i| (i, i)).collect(),
        source_len: s_len,
        target_len: t_len,
    }
}

/// Small fixed batch: two sequences, one phrase example of each class, one
/// sentence example of each class.
pub fn probe_batch(config: &EncoderConfig, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_pair(&mut rng, config.vocab_size, 5, 6);
    let b = random_pair(&mut rng, config.vocab_size, 5, 4);
    let ts = a.target_start();
    let phrases = vec![
        PhraseExample {
            seq: 0,
            source: (1, 2),
            target: (ts, ts + 1),
            label: PhraseLabel::Paraphrase,
            replaced: None,
        },
        PhraseExample {
            seq: 1,
            source: (3, 5),
            target: (ts + 1, ts + 3),
            label: PhraseLabel::Random,
            replaced: None,
        },
        PhraseExample {
            seq: 0,
            source: (1, 2),
            target: (ts + 3, ts + 5),
            label: PhraseLabel::InParaphrase,
            replaced: Some((ts, ts + 1)),
        },
    ];
    Batch {
        sequences: vec![
            Sequence {
                pair: a,
                source_record: 0,
                target_record: 0,
            },
            Sequence {
                pair: b,
                source_record: 0,
                target_record: 1,
            },
        ],
        phrases,
        sentences: vec![
            SentenceExample {
                seq: 0,
                label: SentenceLabel::Paraphrase,
            },
            SentenceExample {
                seq: 1,
                label: SentenceLabel::Random,
            },
        ],
        unrealized: 0,
    }
}

fn loss_and_grad(
    params: &ParamSet,
    cfg: &JointCheckConfig,
    batch: &Batch,
    fault: Option<AdjointFault>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = match fault {
        Some(f) => Tape::new().with_adjoint_fault(f),
        None => Tape::new(),
    };
    let bound = params.bind(&mut tape);
    let out = batch_forward(
        &mut tape,
        &bound,
        &cfg.encoder,
        &cfg.objective,
        batch,
        0.0,
        None,
    )?;
    let grads = bound.gradients(params, &tape.backward(out.loss)?);
    Ok((tape.value(out.loss).item(), grads.flatten()))
}

/// Analytic vs central-difference gradient of the joint loss for a seeded
/// random model. `fault` corrupts one primitive's adjoint.
pub fn joint_gradcheck(
    cfg: &JointCheckConfig,
    fault: Option<AdjointFault>,
) -> Result<GradCheckReport> {
    let mut params = init_params(&cfg.encoder, cfg.seed)?;
    params.extend_from(&init_heads(
        &cfg.objective,
        cfg.encoder.hidden,
        cfg.seed + 1,
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = probe_batch(&cfg.encoder, cfg.seed + 3);
    let (_, analytic) = loss_and_grad(&params, cfg, &batch, fault)?;
    let mut coords = Vec::new();
    let mut offset = 0;
    for (_, t) in params.iter() {
        let live: Vec<usize> = (offset..offset + t.len())
            .filter(|&i| analytic[i] != 0.0)
            .collect();
        let k = cfg.per_tensor.min(live.len());
        let mut picked: Vec<usize> = sample(&mut rng, live.len(), k)
            .into_iter()
            .map(|j| live[j])
            .collect();
        picked.sort_unstable();
        coords.extend(picked);
        offset += t.len();
    }
    let theta = params.flatten();
    let mut scratch = params.clone();
    let f = |x: &[f64]| -> (f64, Vec<i64>) {
        scratch.assign_flat(x).expect("same layout");
        let mut tape = Tape::new();
        let bound = scratch.bind_frozen(&mut tape);
        let out = batch_forward(
            &mut tape,
            &bound,
            &cfg.encoder,
            &cfg.objective,
            &batch,
            0.0,
            None,
        )
        .expect("valid probe");
        (tape.value(out.loss).item(), tape.branch_signature())
    };
    Ok(grad_check_branches(
        f, &theta, &analytic, &coords, &cfg.check,
    ))
}
