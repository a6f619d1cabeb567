//! Masked-LM plus next-sentence pre-training of the encoder.

use std::path::PathBuf;

use log::info;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tft_tensor::{adam_step, AdamConfig, AdamState, ParamSet, Tape, Tensor, Var};

use crate::encoder::{forward, init_params, Checkpoint, EncoderConfig};
use crate::error::{Error, Result};
use crate::tokenizer::{EncodedPair, Vocab, MASK_ID, RESERVED};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmExample {
    pub ids: Vec<usize>,
    /// `(position, original id)` for every selected position.
    pub targets: Vec<(usize, usize)>,
}

/// Selects each non-special position with probability `rate`; a selected
/// token becomes `[MASK]` 80% of the time, a random non-special id 10% and
/// stays unchanged 10%.
pub fn mask_tokens<R: Rng>(
    ids: &[usize],
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MlmExample> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0, 1)")));
    }
    let first_regular = RESERVED.len();
    let mut out = ids.to_vec();
    let mut targets = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if Vocab::is_special(id) || !rng.random_bool(rate) {
            continue;
        }
        targets.push((i, id));
        let r: f64 = rng.random();
        if r < 0.8 {
            out[i] = MASK_ID;
        } else if r < 0.9 && vocab_size > first_regular {
            out[i] = rng.random_range(first_regular..vocab_size);
        }
    }
    Ok(MlmExample { ids: out, targets })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NspLabel {
    Consecutive = 0,
    Random = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NspExample {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub label: NspLabel,
    /// Document of each side.
    pub docs: (usize, usize),
}

/// Draws `count` sentence pairs, half consecutive within a document and half
/// spanning two different documents.
pub fn nsp_sample<R: Rng>(
    documents: &[Vec<Vec<String>>],
    count: usize,
    rng: &mut R,
) -> Result<Vec<NspExample>> {
    if documents.len() < 2 || documents.iter().any(|d| d.len() < 2) {
        return Err(Error::InsufficientData(
            "next-sentence sampling needs at least 2 documents of at least 2 sentences".into(),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let d = rng.random_range(0..documents.len());
        let doc = &documents[d];
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..doc.len() - 1);
            out.push(NspExample {
                source: doc[i].clone(),
                target: doc[i + 1].clone(),
                label: NspLabel::Consecutive,
                docs: (d, d),
            });
        } else {
            let mut e = rng.random_range(0..documents.len() - 1);
            if e >= d {
                e += 1;
            }
            out.push(NspExample {
                source: doc.choose(rng).unwrap().clone(),
                target: documents[e].choose(rng).unwrap().clone(),
                label: NspLabel::Random,
                docs: (d, e),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_rate: f64,
    pub nsp: bool,
    /// Last good parameters are written here if the loss diverges.
    pub rescue_path: Option<PathBuf>,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 1e-3,
            mask_rate: 0.15,
            nsp: true,
            rescue_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss {
    pub mlm: f64,
    pub nsp: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<StepLoss>,
}

pub const MLM_BIAS: &str = "pretrain.mlm.b";
pub const NSP_W: &str = "pretrain.nsp.w";
pub const NSP_B: &str = "pretrain.nsp.b";

fn head_params(config: &EncoderConfig) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(MLM_BIAS, Tensor::zeros(&[config.vocab_size]));
    p.insert(NSP_W, Tensor::zeros(&[config.hidden, 2]));
    p.insert(NSP_B, Tensor::zeros(&[2]));
    p
}

/// One batch loss: MLM cross-entropy averaged over all target positions of
/// the batch plus NSP cross-entropy averaged over pairs. Returns `None` when
/// the batch carries no loss term.
fn batch_loss(
    tape: &mut Tape,
    params: &ParamSet,
    config: &EncoderConfig,
    batch: &[(EncodedPair, MlmExample, NspLabel)],
    nsp: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Var, Var, Var, tft_tensor::Binding)>> {
    let bound = params.bind(tape);
    let total_targets: usize = batch.iter().map(|(_, m, _)| m.targets.len()).sum();
    let mut mlm_terms = Vec::new();
    let mut nsp_terms = Vec::new();
    for (pair, mlm, label) in batch {
        let masked = EncodedPair {
            ids: mlm.ids.clone(),
            ..pair.clone()
        };
        let h = forward(tape, &bound, config, &masked, Some(rng))?;
        if !mlm.targets.is_empty() {
            let pos: Vec<usize> = mlm.targets.iter().map(|t| t.0).collect();
            let gold: Vec<usize> = mlm.targets.iter().map(|t| t.1).collect();
            let rows = tape.gather(h, &pos)?;
            let logits = tape.matmul_nt(rows, bound.var("emb.token")?)?;
            let logits = tape.add_row(logits, bound.var(MLM_BIAS)?)?;
            let ce = tape.cross_entropy(logits, &gold)?;
            mlm_terms.push(tape.scale(ce, gold.len() as f64 / total_targets as f64));
        }
        if nsp {
            let cls = tape.gather(h, &[0])?;
            let logits = tape.linear(cls, bound.var(NSP_W)?, bound.var(NSP_B)?)?;
            let ce = tape.cross_entropy(logits, &[*label as usize])?;
            nsp_terms.push(tape.scale(ce, 1.0 / batch.len() as f64));
        }
    }
    if mlm_terms.is_empty() && nsp_terms.is_empty() {
        return Ok(None);
    }
    let zero = tape.constant(Tensor::scalar(0.0));
    mlm_terms.push(zero);
    nsp_terms.push(zero);
    let mlm = tape.sum(&mlm_terms)?;
    let nsp = tape.sum(&nsp_terms)?;
    let total = tape.add(mlm, nsp)?;
    Ok(Some((total, mlm, nsp, bound)))
}

/// Trains `initial` (or a fresh seeded encoder) on MLM + NSP and returns
/// the final checkpoint with the per-step loss curve.
pub fn pretrain_loop(
    documents: &[Vec<Vec<String>>],
    vocab: &Vocab,
    config: &EncoderConfig,
    initial: Option<&ParamSet>,
    hyper: &PretrainHyper,
    seed: u64,
) -> Result<PretrainRun> {
    config.validate()?;
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocab_size {} differs from vocabulary of {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = match initial {
        Some(p) => p.clone(),
        None => init_params(config, seed)?,
    };
    for (name, t) in head_params(config).iter() {
        if !params.contains(name) {
            params.insert(name, t.clone());
        }
    }
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig::new(hyper.lr);
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let pairs = nsp_sample(documents, hyper.batch, &mut rng)?;
        let mut batch = Vec::with_capacity(pairs.len());
        for ex in pairs {
            let pair = vocab.encode_pair_truncated(&ex.source, &ex.target, config.max_len)?;
            let mlm = mask_tokens(&pair.ids, hyper.mask_rate, config.vocab_size, &mut rng)?;
            batch.push((pair, mlm, ex.label));
        }
        let mut tape = Tape::new();
        let Some((total, mlm, nsp, bound)) =
            batch_loss(&mut tape, &params, config, &batch, hyper.nsp, &mut rng)?
        else {
            losses.push(StepLoss {
                mlm: 0.0,
                nsp: 0.0,
                total: 0.0,
            });
            continue;
        };
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            if let Some(path) = &hyper.rescue_path {
                Checkpoint::new(config.clone(), params.clone())?.save(path)?;
            }
            return Err(Error::Divergence { step, loss });
        }
        losses.push(StepLoss {
            mlm: tape.value(mlm).item(),
            nsp: tape.value(nsp).item(),
            total: loss,
        });
        let grads = bound.gradients(&params, &tape.backward(total)?);
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        if step % 50 == 0 {
            info!("pretrain step {step}: loss {loss:.4}");
        }
    }
    Ok(PretrainRun {
        checkpoint: Checkpoint::new(config.clone(), params)?,
        losses,
    })
}

/// Trailing moving average.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub fn loss_csv(losses: &[StepLoss]) -> String {
    let mut out = String::from("step,mlm,nsp,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", l.mlm, l.nsp, l.total));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS_ID, SEP_ID};

    #[test]
    fn zero_rate_masks_nothing() {
        let ids = vec![CLS_ID, 7, 8, 9, SEP_ID];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = mask_tokens(&ids, 0.0, 20, &mut rng).unwrap();
        assert!(ex.targets.is_empty());
        assert_eq!(ex.ids, ids);
        assert!(mask_tokens(&ids, 1.0, 20, &mut rng).is_err());
    }

    #[test]
    fn specials_never_targeted() {
        let ids: Vec<usize> = (0..200)
            .map(|i| if i % 5 == 0 { SEP_ID } else { 5 + i % 9 })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = mask_tokens(&ids, 0.999, 30, &mut rng).unwrap();
        assert!(ex.targets.iter().all(|&(p, _)| !Vocab::is_special(ids[p])));
        assert!(ex.targets.len() >= 155);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
