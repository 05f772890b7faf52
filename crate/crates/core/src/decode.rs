//! Greedy and beam-search decoding.
//!
//! Both searches run either incrementally, feeding one token per step
//! through the decoder's key/value cache, or by recomputing the whole
//! prefix every step. The two paths produce bitwise-identical logits, so
//! the recompute path serves as a reference for the cache.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderCache, Encoded, Model};
use crate::tensor::{log_softmax_row, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodePath {
    #[default]
    Incremental,
    Recompute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Length-normalization exponent.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.6
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            beam: 1,
            max_len,
            alpha: default_alpha(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending with EOS unless truncated.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    /// `score / len^alpha`
    pub normalized: f64,
    /// Stopped at the length limit without EOS.
    pub truncated: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.tokens,
        }
    }
}

fn normalize(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len.max(1) as f64).powf(alpha)
}

/// Per-hypothesis decoder state for either path.
#[derive(Clone)]
struct State<T> {
    /// BOS followed by emitted tokens.
    prefix: Vec<usize>,
    cache: Option<DecoderCache<T>>,
}

struct Session<'m, T: Real> {
    model: &'m Model<T>,
    enc: Encoded<T>,
    path: DecodePath,
}

impl<'m, T: Real> Session<'m, T> {
    fn new(model: &'m Model<T>, src: &[usize], path: DecodePath) -> Result<Self> {
        Ok(Self {
            model,
            enc: model.encode(src)?,
            path,
        })
    }

    fn start(&self) -> State<T> {
        State {
            prefix: vec![self.model.specials().bos],
            cache: (self.path == DecodePath::Incremental).then(|| self.model.new_cache()),
        }
    }

    /// Log-probabilities of the next token; PAD and BOS are never emitted.
    fn next_logp(&self, state: &mut State<T>) -> Result<Vec<f64>> {
        let logits = match &mut state.cache {
            Some(cache) => self
                .model
                .step(&self.enc, cache, *state.prefix.last().unwrap())?,
            None => self.model.step_recompute(&self.enc, &state.prefix)?,
        };
        let sp = self.model.specials();
        let mut row: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        row[sp.pad] = f64::NEG_INFINITY;
        row[sp.bos] = f64::NEG_INFINITY;
        let lp = log_softmax_row(&row);
        if lp.iter().any(|v| v.is_nan()) {
            return Err(Error::NaN("decoder logits".into()));
        }
        Ok(lp)
    }
}

fn check_limit<T: Real>(model: &Model<T>, max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    if max_len > model.config().max_len {
        return Err(Error::TooLong {
            len: max_len,
            max: model.config().max_len,
        });
    }
    Ok(())
}

/// Emits the most likely token (lowest id on ties) until EOS or `max_len`
/// tokens.
pub fn greedy<T: Real>(
    model: &Model<T>,
    src: &[usize],
    max_len: usize,
    path: DecodePath,
) -> Result<Hypothesis> {
    check_limit(model, max_len)?;
    let session = Session::new(model, src, path)?;
    let eos = model.specials().eos;
    let mut state = session.start();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    loop {
        let lp = session.next_logp(&mut state)?;
        let (best, best_lp) = argmax(&lp);
        tokens.push(best);
        score += best_lp;
        if best == eos || tokens.len() == max_len {
            let truncated = best != eos;
            return Ok(Hypothesis {
                normalized: normalize(score, tokens.len(), 0.0),
                tokens,
                score,
                truncated,
            });
        }
        state.prefix.push(best);
    }
}

fn argmax(lp: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    (best, lp[best])
}

struct Live<T> {
    state: State<T>,
    score: f64,
}

/// Beam search. Returns finished hypotheses (truncated ones included), best
/// first by normalized score, at most `beam` of them.
pub fn beam_search<T: Real>(
    model: &Model<T>,
    src: &[usize],
    cfg: &DecodeConfig,
    path: DecodePath,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    check_limit(model, cfg.max_len)?;
    let session = Session::new(model, src, path)?;
    let eos = model.specials().eos;
    let mut live = vec![Live {
        state: session.start(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=cfg.max_len {
        // (hypothesis, token, total score, token logp)
        let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (h, l) in live.iter_mut().enumerate() {
            let lp = session.next_logp(&mut l.state)?;
            for (tok, &p) in lp.iter().enumerate() {
                if p.is_finite() {
                    cands.push((h, tok, l.score + p, p));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then(b.3.partial_cmp(&a.3).unwrap_or(Ordering::Equal))
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        cands.truncate(cfg.beam);

        let mut next = Vec::new();
        for &(h, tok, score, _) in &cands {
            let mut tokens = live[h].state.prefix[1..].to_vec();
            tokens.push(tok);
            if tok == eos || step == cfg.max_len {
                finished.push(Hypothesis {
                    normalized: normalize(score, tokens.len(), cfg.alpha),
                    truncated: tok != eos,
                    tokens,
                    score,
                });
            } else {
                let mut state = live[h].state.clone();
                state.prefix.push(tok);
                next.push(Live { state, score });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        sort_hyps(&mut finished);
        if finished.len() >= cfg.beam {
            let worst = finished[cfg.beam - 1].normalized;
            let best_live = live
                .iter()
                .map(|l| l.score)
                .fold(f64::NEG_INFINITY, f64::max);
            // scores only fall, so the longest length gives the loosest bound
            if normalize(best_live, cfg.max_len, cfg.alpha) <= worst {
                break;
            }
        }
    }
    sort_hyps(&mut finished);
    finished.truncate(cfg.beam);
    Ok(finished)
}

fn sort_hyps(h: &mut [Hypothesis]) {
    h.sort_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Decodes with `cfg`, using greedy search when `beam == 1`. Returns the
/// best hypothesis.
pub fn decode<T: Real>(model: &Model<T>, src: &[usize], cfg: &DecodeConfig) -> Result<Hypothesis> {
    if cfg.beam == 1 {
        greedy(model, src, cfg.max_len, DecodePath::Incremental)
    } else {
        let mut hyps = beam_search(model, src, cfg, DecodePath::Incremental)?;
        Ok(hyps.remove(0))
    }
}

/// Log-probability of `tokens` (emitted sequence, without BOS) under the
/// same masking as the searches, scored with one teacher-forced pass.
pub fn sequence_logprob<T: Real>(model: &Model<T>, src: &[usize], tokens: &[usize]) -> Result<f64> {
    let sp = model.specials();
    let mut input = vec![sp.bos];
    input.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    let logits = model.forward(src, &input)?;
    let mut total = 0.0;
    for (r, &t) in tokens.iter().enumerate() {
        let mut row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        row[sp.pad] = f64::NEG_INFINITY;
        row[sp.bos] = f64::NEG_INFINITY;
        total += log_softmax_row(&row)[t];
    }
    Ok(total)
}
