//! Synthetic seq2seq tasks. Every example is a pure function of the task
//! seed and the example index.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Specials;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Fixed token permutation, then adjacent pairs swapped.
    Cipher,
    /// Masked span infilling with sentinel tokens.
    SpanInfill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Content length range, inclusive, before EOS is appended.
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of tokens corrupted (span infilling).
    #[serde(default = "default_rate")]
    pub corruption: f64,
    /// Mean corrupted span length (span infilling).
    #[serde(default = "default_span")]
    pub mean_span: f64,
}

fn default_rate() -> f64 {
    0.15
}

fn default_span() -> f64 {
    3.0
}

impl TaskSpec {
    pub fn new(kind: TaskKind, min_len: usize, max_len: usize) -> Self {
        Self {
            kind,
            min_len,
            max_len,
            corruption: default_rate(),
            mean_span: default_span(),
        }
    }
}

/// A source/target pair of token ids; both end with EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    pub fn pair(&self) -> (Vec<usize>, Vec<usize>) {
        (self.src.clone(), self.tgt.clone())
    }
}

/// Offset separating evaluation indices from training indices.
pub const EVAL_OFFSET: u64 = 1 << 48;

#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub specials: Specials,
    seed: u64,
    /// Ordinary token ids.
    content: Vec<usize>,
    /// Sentinel ids, first sentinel first.
    sentinels: Vec<usize>,
    /// Cipher table indexed by token id.
    perm: Vec<usize>,
}

impl Task {
    /// `model_max_len` bounds sources and targets including EOS.
    pub fn new(spec: TaskSpec, vocab: usize, model_max_len: usize, seed: u64) -> Result<Self> {
        if spec.min_len == 0 || spec.min_len > spec.max_len {
            return Err(Error::Config(format!(
                "task length range {}..={} is empty or starts at zero",
                spec.min_len, spec.max_len
            )));
        }
        if !(0.0..1.0).contains(&spec.corruption) || spec.mean_span < 1.0 {
            return Err(Error::Config(
                "corruption must lie in [0, 1) and mean_span >= 1".into(),
            ));
        }
        let specials = Specials::for_vocab(vocab);
        let n_sentinels = match spec.kind {
            TaskKind::SpanInfill => max_spans(spec.max_len, spec.corruption, spec.mean_span) + 1,
            _ => 0,
        };
        let first_sentinel = specials.bos.saturating_sub(n_sentinels);
        if first_sentinel < 3 {
            return Err(Error::Config(format!(
                "vocab {vocab} too small for this task"
            )));
        }
        let content: Vec<usize> = (1..first_sentinel).collect();
        let sentinels: Vec<usize> = (first_sentinel..specials.bos).rev().collect();
        let longest = match spec.kind {
            TaskKind::SpanInfill => spec.max_len + n_sentinels,
            _ => spec.max_len,
        } + 1;
        if longest > model_max_len {
            return Err(Error::Config(format!(
                "task sequences reach length {longest}, model max_len is {model_max_len}"
            )));
        }
        let mut perm: Vec<usize> = (0..vocab).collect();
        let mut shuffled = content.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1f3));
        for (&from, &to) in content.iter().zip(&shuffled) {
            perm[from] = to;
        }
        Ok(Self {
            spec,
            specials,
            seed,
            content,
            sentinels,
            perm,
        })
    }

    pub fn content_ids(&self) -> &[usize] {
        &self.content
    }

    pub fn sentinels(&self) -> &[usize] {
        &self.sentinels
    }

    /// Target content for a source (without EOS), for the deterministic
    /// mapping tasks.
    pub fn map(&self, src: &[usize]) -> Vec<usize> {
        match self.spec.kind {
            TaskKind::Copy | TaskKind::SpanInfill => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Cipher => {
                let mut out: Vec<usize> = src.iter().map(|&t| self.perm[t]).collect();
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
                out
            }
        }
    }

    /// Example number `index`.
    pub fn example(&self, index: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| self.content[rng.random_range(0..self.content.len())])
            .collect();
        let eos = self.specials.eos;
        let (mut src, mut tgt) = match self.spec.kind {
            TaskKind::SpanInfill => self.corrupt(&tokens, &mut rng),
            _ => {
                let t = self.map(&tokens);
                (tokens, t)
            }
        };
        src.push(eos);
        tgt.push(eos);
        Example { src, tgt }
    }

    /// Examples `start..start + n`.
    pub fn examples(&self, start: u64, n: usize) -> Vec<Example> {
        (0..n as u64).map(|i| self.example(start + i)).collect()
    }

    /// Held-out examples, disjoint from every training index.
    pub fn eval_set(&self, n: usize) -> Vec<Example> {
        self.examples(EVAL_OFFSET, n)
    }

    /// Replaces random spans by sentinels; the target lists each sentinel
    /// followed by the tokens it hides, closed by one more sentinel.
    fn corrupt(&self, tokens: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
        let len = tokens.len();
        let n_noise = ((len as f64 * self.spec.corruption).round() as usize).min(len - 1);
        if n_noise == 0 {
            return (tokens.to_vec(), vec![self.sentinels[0]]);
        }
        let n_spans = ((n_noise as f64 / self.spec.mean_span).round() as usize)
            .clamp(1, n_noise)
            .min(len - n_noise)
            .min(self.sentinels.len() - 1);
        let noise = segment(n_noise, n_spans, rng);
        let keep = segment(len - n_noise, n_spans, rng);
        let mut src = Vec::with_capacity(len);
        let mut tgt = Vec::with_capacity(n_noise + n_spans + 1);
        let mut pos = 0;
        for s in 0..n_spans {
            src.extend_from_slice(&tokens[pos..pos + keep[s]]);
            pos += keep[s];
            src.push(self.sentinels[s]);
            tgt.push(self.sentinels[s]);
            tgt.extend_from_slice(&tokens[pos..pos + noise[s]]);
            pos += noise[s];
        }
        tgt.push(self.sentinels[n_spans]);
        (src, tgt)
    }
}

fn max_spans(max_len: usize, rate: f64, mean_span: f64) -> usize {
    let noise = (max_len as f64 * rate).round() as usize;
    ((noise as f64 / mean_span).round() as usize).max(1)
}

/// Splits `total` items into `parts` non-empty segments at random.
fn segment(total: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..total).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(parts - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}
