//! Post-layer-norm transformer encoder over [`EncodedPair`] inputs, plus the
//! checkpoint container.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tft_tensor::{Binding, ParamSet, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::tokenizer::EncodedPair;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Two layers of width 64 with four heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ff: 256,
            max_len: 64,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ff", self.ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Every encoder tensor name with its shape, in parameter order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.ff);
        let mut out = vec![
            ("emb.token".to_string(), vec![self.vocab_size, h]),
            ("emb.position".to_string(), vec![self.max_len, h]),
            ("emb.segment".to_string(), vec![2, h]),
            ("emb.ln.gamma".to_string(), vec![h]),
            ("emb.ln.beta".to_string(), vec![h]),
        ];
        for l in 0..self.layers {
            let p = format!("layer{l}");
            out.extend([
                (format!("{p}.attn.qkv.w"), vec![h, 3 * h]),
                (format!("{p}.attn.qkv.b"), vec![3 * h]),
                (format!("{p}.attn.out.w"), vec![h, h]),
                (format!("{p}.attn.out.b"), vec![h]),
                (format!("{p}.attn.ln.gamma"), vec![h]),
                (format!("{p}.attn.ln.beta"), vec![h]),
                (format!("{p}.ff.in.w"), vec![h, f]),
                (format!("{p}.ff.in.b"), vec![f]),
                (format!("{p}.ff.out.w"), vec![f, h]),
                (format!("{p}.ff.out.b"), vec![h]),
                (format!("{p}.ff.ln.gamma"), vec![h]),
                (format!("{p}.ff.ln.beta"), vec![h]),
            ]);
        }
        out
    }

    fn to_header(&self) -> String {
        format!(
            "layers={}\nhidden={}\nheads={}\nff={}\nmax_len={}\nvocab_size={}\ndropout={}\n",
            self.layers,
            self.hidden,
            self.heads,
            self.ff,
            self.max_len,
            self.vocab_size,
            self.dropout
        )
    }
}

/// Truncated normal (σ = 0.02, resampled beyond 2σ) for matrices, zeros for
/// biases, ones for layer-norm scales.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in config.shapes() {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with(".gamma") {
            Tensor::filled(&shape, 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            Tensor::new(shape, truncated_normal(&mut rng, n, 0.02))?
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

pub fn truncated_normal<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * sigma {
                break v;
            }
        })
        .collect()
}

/// Runs the encoder on `pair` and returns the `[N, hidden]` final states.
/// Dropout is active only when `rng` is given.
pub fn forward(
    tape: &mut Tape,
    bound: &Binding,
    config: &EncoderConfig,
    pair: &EncodedPair,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    Ok(forward_traced(tape, bound, config, pair, rng)?.0)
}

/// [`forward`] that also returns the `[N, N]` attention probabilities of
/// every head, layer by layer.
pub fn forward_traced(
    tape: &mut Tape,
    bound: &Binding,
    config: &EncoderConfig,
    pair: &EncodedPair,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Var>)> {
    let n = pair.len();
    if n == 0 || n > config.max_len {
        return Err(Error::Invalid(format!(
            "sequence length {n} outside 1..={}",
            config.max_len
        )));
    }
    if let Some(&bad) = pair.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Invalid(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if pair.segments.len() != n || pair.segments.iter().any(|&s| s > 1) {
        return Err(Error::Invalid(
            "segment ids must be 0 or 1, one per token".into(),
        ));
    }
    let p = config.dropout;
    let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
        match rng.as_deref_mut() {
            Some(r) if p > 0.0 => Ok(tape.dropout(x, p, r)?),
            _ => Ok(x),
        }
    };
    let mask = pair.attention_mask();
    let positions: Vec<usize> = (0..n).collect();

    let tok = tape.gather(bound.var("emb.token")?, &pair.ids)?;
    let pos = tape.gather(bound.var("emb.position")?, &positions)?;
    let seg = tape.gather(bound.var("emb.segment")?, &pair.segments)?;
    let x = tape.add(tok, pos)?;
    let x = tape.add(x, seg)?;
    let x = tape.layer_norm(x, bound.var("emb.ln.gamma")?, bound.var("emb.ln.beta")?)?;
    let mut x = drop(tape, x)?;

    let h = config.hidden;
    let d = h / config.heads;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut attention = Vec::with_capacity(config.layers * config.heads);
    for l in 0..config.layers {
        let v = |s: &str| bound.var(&format!("layer{l}.{s}"));
        let qkv = tape.linear(x, v("attn.qkv.w")?, v("attn.qkv.b")?)?;
        let mut heads = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let q = tape.slice_cols(qkv, head * d, d)?;
            let k = tape.slice_cols(qkv, h + head * d, d)?;
            let val = tape.slice_cols(qkv, 2 * h + head * d, d)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, inv_sqrt_d);
            let probs = tape.softmax(scores, Some(&mask))?;
            attention.push(probs);
            let probs = drop(tape, probs)?;
            heads.push(tape.matmul(probs, val)?);
        }
        let ctx = tape.concat(&heads)?;
        let attn = tape.linear(ctx, v("attn.out.w")?, v("attn.out.b")?)?;
        let attn = drop(tape, attn)?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, v("attn.ln.gamma")?, v("attn.ln.beta")?)?;

        let inner = tape.linear(x, v("ff.in.w")?, v("ff.in.b")?)?;
        let inner = tape.gelu(inner);
        let out = tape.linear(inner, v("ff.out.w")?, v("ff.out.b")?)?;
        let out = drop(tape, out)?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, v("ff.ln.gamma")?, v("ff.ln.beta")?)?;
    }
    Ok((x, attention))
}

/// Inference-mode encoding into a plain tensor.
pub fn encode(config: &EncoderConfig, params: &ParamSet, pair: &EncodedPair) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let out = forward(&mut tape, &bound, config, pair, None)?;
    Ok(tape.value(out).clone())
}

const MAGIC: &str = "TFT-CHECKPOINT";
const VERSION: u32 = 1;

/// Encoder configuration plus every named array (encoder and any heads).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        let ck = Self { config, params };
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, shape) in self.config.shapes() {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "{name}: shape {:?} does not match config {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Invalid(format!("{name} holds non-finite values")));
            }
        }
        Ok(())
    }

    /// Encoder tensors only.
    pub fn encoder_params(&self) -> ParamSet {
        let names: std::collections::HashSet<String> =
            self.config.shapes().into_iter().map(|(n, _)| n).collect();
        self.params.filtered(|n| names.contains(n))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        let mut header = format!("{MAGIC} {VERSION}\n");
        header.push_str(&self.config.to_header());
        let _ = writeln!(header, "arrays={}", self.params.len());
        header.push_str("end\n");
        buf.extend_from_slice(header.as_bytes());
        for (name, t) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut line = String::new();
        let read_line = |r: &mut BufReader<fs::File>, line: &mut String| -> Result<()> {
            line.clear();
            r.read_line(line).map_err(|e| Error::io(path, e))?;
            Ok(())
        };
        read_line(&mut r, &mut line)?;
        let expected = format!("{MAGIC} {VERSION}");
        if line.trim_end() != expected {
            return Err(bad(1, format!("expected header `{expected}`")));
        }
        let mut kv = std::collections::HashMap::new();
        let mut lineno = 1;
        loop {
            read_line(&mut r, &mut line)?;
            lineno += 1;
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            if line.is_empty() {
                return Err(bad(lineno, "unterminated header".into()));
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| bad(lineno, format!("expected key=value, got `{l}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| bad(lineno, format!("header lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| bad(lineno, format!("`{k}` is not an integer")))
        };
        let config = EncoderConfig {
            layers: num("layers")?,
            hidden: num("hidden")?,
            heads: num("heads")?,
            ff: num("ff")?,
            max_len: num("max_len")?,
            vocab_size: num("vocab_size")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| bad(lineno, "`dropout` is not a number".into()))?,
        };
        let arrays = num("arrays")?;
        let mut params = ParamSet::new();
        let truncated = |e: std::io::Error| {
            Error::Invalid(format!("{}: truncated array data: {e}", path.display()))
        };
        for _ in 0..arrays {
            let mut b4 = [0u8; 4];
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b4).map_err(truncated)?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Invalid("array name is not UTF-8".into()))?;
            r.read_exact(&mut b4).map_err(truncated)?;
            let rank = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b8).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        Self::new(config, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS_ID, PAD_ID, SEP_ID};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ff: 16,
            max_len: 12,
            vocab_size: 20,
            dropout: 0.1,
        }
    }

    fn pair(ids: Vec<usize>, split: usize) -> EncodedPair {
        let segments = (0..ids.len()).map(|i| usize::from(i >= split)).collect();
        EncodedPair {
            segments,
            source_offsets: vec![],
            target_offsets: vec![],
            source_len: split - 2,
            target_len: ids.len() - split - 1,
            ids,
        }
    }

    #[test]
    fn init_is_seeded() {
        let c = tiny();
        assert_eq!(init_params(&c, 1).unwrap(), init_params(&c, 1).unwrap());
        assert_ne!(init_params(&c, 1).unwrap(), init_params(&c, 2).unwrap());
        let p = init_params(&c, 1).unwrap();
        assert!(p
            .iter()
            .filter(|(n, _)| !n.ends_with("gamma"))
            .all(|(_, t)| t.data().iter().all(|v| v.abs() <= 0.04)));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_and_oversize() {
        let c = tiny();
        let p = init_params(&c, 0).unwrap();
        let x = pair(vec![CLS_ID, 7, 8, SEP_ID, 9, SEP_ID], 4);
        let h = encode(&c, &p, &x).unwrap();
        assert_eq!(h.shape(), &[6, 8]);
        let long = pair(vec![7; 13], 4);
        assert!(encode(&c, &p, &long).is_err());
        let oov = pair(vec![CLS_ID, 25, SEP_ID, 9, SEP_ID], 3);
        assert!(encode(&c, &p, &oov).is_err());
    }

    #[test]
    fn pad_positions_are_invisible() {
        let c = tiny();
        let p = init_params(&c, 3).unwrap();
        let mut base = pair(vec![CLS_ID, 7, 8, SEP_ID, 9, SEP_ID], 4).padded(9);
        base.segments[6] = 1;
        let mut swapped = base.clone();
        swapped.segments.swap(6, 8);
        assert_eq!(swapped.ids[8], PAD_ID);
        assert_ne!(swapped.segments, base.segments);
        let a = encode(&c, &p, &base).unwrap();
        let b = encode(&c, &p, &swapped).unwrap();
        for i in 0..6 {
            assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = tiny();
        let mut p = init_params(&c, 4).unwrap();
        p.insert("head.sentence.w", Tensor::filled(&[8, 2], 0.5));
        let ck = Checkpoint::new(c, p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let c = tiny();
        let mut p = init_params(&c, 4).unwrap();
        p.insert("emb.token", Tensor::zeros(&[21, 8]));
        assert!(Checkpoint::new(c, p).is_err());
    }
}
