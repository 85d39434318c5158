//! Sentence encoder: word and relative-position embeddings followed by a
//! convolution and either global (CNN) or three-segment (PCNN) max pooling.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{InstanceRecord, Vocabulary, PAD_INDEX, TARGET};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Pcnn,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(EncoderKind::Cnn),
            "pcnn" => Ok(EncoderKind::Pcnn),
            _ => Err(Error::config(format!("unknown encoder kind {s:?} (cnn|pcnn)"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Cnn => "cnn",
            EncoderKind::Pcnn => "pcnn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturizedInstance {
    pub words: Vec<usize>,
    pub head_pos: Vec<usize>,
    pub tail_pos: Vec<usize>,
    /// Last token of the earlier entity.
    pub p1: usize,
    /// Last token of the later entity.
    pub p2: usize,
    pub domain: Domain,
    pub label: Option<usize>,
}

impl FeaturizedInstance {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Pooling split points in convolution-output coordinates for `steps`
    /// outputs, or `None` when three non-empty segments are impossible.
    pub fn pcnn_splits(&self, steps: usize) -> Option<(usize, usize)> {
        if steps < 3 {
            return None;
        }
        let s1 = self.p1.min(steps - 1).clamp(1, steps - 2);
        let s2 = self.p2.min(steps - 1).clamp(s1 + 1, steps - 1);
        Some((s1, s2))
    }
}

fn position_index(i: usize, start: usize, max_distance: usize) -> usize {
    let d = i as i64 - start as i64;
    let m = max_distance as i64;
    (d.clamp(-m, m) + m) as usize
}

/// Maps a record onto vocabulary and position-table indices, keeping at
/// most `max_len` tokens.
pub fn featurize(
    record: &InstanceRecord,
    vocab: &Vocabulary,
    max_len: usize,
    max_distance: usize,
) -> Result<FeaturizedInstance> {
    record.validate().map_err(Error::Data)?;
    let len = record.tokens.len().min(max_len);
    if record.head.0 >= len || record.tail.0 >= len {
        return Err(Error::Rejected(format!(
            "entity span truncated away at max_len {max_len}"
        )));
    }
    let words = record.tokens[..len].iter().map(|t| vocab.lookup(t)).collect();
    let head_pos = (0..len).map(|i| position_index(i, record.head.0, max_distance)).collect();
    let tail_pos = (0..len).map(|i| position_index(i, record.tail.0, max_distance)).collect();
    let head_last = record.head.1.min(len) - 1;
    let tail_last = record.tail.1.min(len) - 1;
    Ok(FeaturizedInstance {
        words,
        head_pos,
        tail_pos,
        p1: head_last.min(tail_last),
        p2: head_last.max(tail_last),
        domain: if record.domain == TARGET {
            Domain::Target
        } else {
            Domain::Source
        },
        label: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub filters: usize,
    pub window: usize,
    pub max_distance: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Pcnn,
            word_dim: 300,
            pos_dim: 5,
            filters: 230,
            window: 3,
            max_distance: 60,
        }
    }
}

/// Parameters of one domain's feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub window: usize,
    pub word: Tensor,
    pub head_pos: Tensor,
    pub tail_pos: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    word: Var,
    head_pos: Var,
    tail_pos: Var,
    filters: Var,
    bias: Var,
}

impl EncoderVars {
    fn list(&self) -> [Var; 5] {
        [self.word, self.head_pos, self.tail_pos, self.filters, self.bias]
    }
}

const EMBED_INIT: f64 = 0.25;

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        if cfg.window == 0 || cfg.filters == 0 || cfg.word_dim == 0 || vocab_size < 2 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        let mut word = Tensor::uniform(&[vocab_size, cfg.word_dim], EMBED_INIT, rng);
        word.data_mut()[PAD_INDEX * cfg.word_dim..(PAD_INDEX + 1) * cfg.word_dim].fill(0.0);
        let table = 2 * cfg.max_distance + 1;
        let pos_dim = cfg.pos_dim.max(1);
        let head_pos = Tensor::uniform(&[table, pos_dim], EMBED_INIT, rng);
        let tail_pos = Tensor::uniform(&[table, pos_dim], EMBED_INIT, rng);
        let in_dim = cfg.window * (cfg.word_dim + 2 * pos_dim);
        let bound = (6.0 / (in_dim + cfg.filters) as f64).sqrt();
        let filters = Tensor::uniform(&[cfg.filters, in_dim], bound, rng);
        Ok(Encoder {
            kind: cfg.kind,
            window: cfg.window,
            word: word.into_param(),
            head_pos: head_pos.into_param(),
            tail_pos: tail_pos.into_param(),
            filters: filters.into_param(),
            bias: Tensor::zeros(&[cfg.filters]).into_param(),
        })
    }

    pub fn filter_count(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Cnn => self.filter_count(),
            EncoderKind::Pcnn => 3 * self.filter_count(),
        }
    }

    pub fn row_dim(&self) -> usize {
        self.word.shape()[1] + self.head_pos.shape()[1] + self.tail_pos.shape()[1]
    }

    fn max_distance(&self) -> usize {
        (self.head_pos.shape()[0] - 1) / 2
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.word,
            &mut self.head_pos,
            &mut self.tail_pos,
            &mut self.filters,
            &mut self.bias,
        ]
    }

    /// Marks every parameter as frozen; later binds record constants only.
    pub fn freeze(&mut self) {
        for t in self.params_mut() {
            t.requires_grad = false;
            t.zero_grad();
        }
    }

    /// Trainable copy, used to initialize the target encoder from the source one.
    pub fn unfrozen(&self) -> Self {
        let mut e = self.clone();
        for t in e.params_mut() {
            t.requires_grad = true;
        }
        e
    }

    pub fn is_frozen(&self) -> bool {
        !self.word.requires_grad && !self.filters.requires_grad
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |t: &Tensor| {
            if trainable && t.requires_grad {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        EncoderVars {
            word: put(&self.word),
            head_pos: put(&self.head_pos),
            tail_pos: put(&self.tail_pos),
            filters: put(&self.filters),
            bias: put(&self.bias),
        }
    }

    pub fn accumulate(&mut self, vars: &EncoderVars, grads: &Gradients) {
        for (t, v) in self.params_mut().into_iter().zip(vars.list()) {
            grads.accumulate_into(v, t);
        }
    }

    /// Index rows after padding to the convolution window.
    fn padded_rows(&self, inst: &FeaturizedInstance) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut words = inst.words.clone();
        let mut head = inst.head_pos.clone();
        let mut tail = inst.tail_pos.clone();
        let top = 2 * self.max_distance();
        while words.len() < self.window {
            words.push(PAD_INDEX);
            head.push((head.last().copied().unwrap_or(top / 2) + 1).min(top));
            tail.push((tail.last().copied().unwrap_or(top / 2) + 1).min(top));
        }
        (words, head, tail)
    }

    /// Records the encoding of `inst` on `tape` and returns the feature vector.
    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, inst: &FeaturizedInstance) -> Result<Var> {
        if inst.is_empty() {
            return Err(Error::contract("cannot encode an empty instance"));
        }
        let (words, head, tail) = self.padded_rows(inst);
        let w = tape.gather_rows(vars.word, &words)?;
        let h = tape.gather_rows(vars.head_pos, &head)?;
        let t = tape.gather_rows(vars.tail_pos, &tail)?;
        let x = tape.concat_cols(&[w, h, t])?;
        let conv = tape.conv1d(x, vars.filters, vars.bias, self.window)?;
        let pooled = match self.kind {
            EncoderKind::Cnn => tape.max_over_time(conv)?,
            EncoderKind::Pcnn => {
                let steps = tape.shape(conv)[0];
                match inst.pcnn_splits(steps) {
                    Some((s1, s2)) => tape.piecewise_max_pool(conv, s1, s2)?,
                    None => {
                        log::debug!("pcnn fallback to global pooling on {steps} conv outputs");
                        let g = tape.max_over_time(conv)?;
                        tape.concat(&[g, g, g])?
                    }
                }
            }
        };
        Ok(tape.tanh(pooled))
    }

    /// Tape-free convenience wrapper around [`Encoder::forward`].
    pub fn encode(&self, inst: &FeaturizedInstance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &vars, inst)?;
        Ok(tape.to_tensor(f))
    }

    pub fn encode_cnn(&self, inst: &FeaturizedInstance) -> Result<Tensor> {
        if self.kind != EncoderKind::Cnn {
            return Err(Error::contract("encode_cnn on a PCNN encoder"));
        }
        self.encode(inst)
    }

    pub fn encode_pcnn(&self, inst: &FeaturizedInstance) -> Result<Tensor> {
        if self.kind != EncoderKind::Pcnn {
            return Err(Error::contract("encode_pcnn on a CNN encoder"));
        }
        self.encode(inst)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("word_embeddings", self.word.clone());
        c.insert("head_position", self.head_pos.clone());
        c.insert("tail_position", self.tail_pos.clone());
        c.insert("filters", self.filters.clone());
        c.insert("bias", self.bias.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, kind: EncoderKind, window: usize) -> Result<Self> {
        let get = |n: &str| c.require(n).map(|t| t.clone().into_param());
        let enc = Encoder {
            kind,
            window,
            word: get("word_embeddings")?,
            head_pos: get("head_position")?,
            tail_pos: get("tail_position")?,
            filters: get("filters")?,
            bias: get("bias")?,
        };
        let ok = enc.word.shape().len() == 2
            && enc.head_pos.shape() == enc.tail_pos.shape()
            && enc.head_pos.shape().len() == 2
            && enc.filters.shape().len() == 2
            && enc.filters.shape()[1] == window * enc.row_dim()
            && enc.bias.shape() == [enc.filters.shape()[0]];
        if !ok {
            return Err(Error::Checkpoint("encoder tensors have inconsistent shapes".into()));
        }
        Ok(enc)
    }

    /// Overwrites rows of tokens found in a whitespace-separated embedding
    /// file (`token v1 .. vd` per line). Returns the number of rows replaced.
    pub fn load_pretrained(&mut self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<usize> {
        let d = self.word.shape()[1];
        let file = fs::File::open(path.as_ref())?;
        let mut replaced = 0;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("embedding line {}: {e}", i + 1)))?;
            if values.len() != d {
                return Err(Error::Data(format!(
                    "embedding line {}: expected {d} values, found {}",
                    i + 1,
                    values.len()
                )));
            }
            let idx = vocab.lookup(token);
            if vocab.token(idx) == Some(token) && idx != PAD_INDEX {
                self.word.data_mut()[idx * d..(idx + 1) * d].copy_from_slice(&values);
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}
