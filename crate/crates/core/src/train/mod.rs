//! Training loop, evaluation and sequence-level distillation.

pub mod metrics;
pub mod optim;
pub mod tasks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::decode::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;

pub use metrics::Metrics;
pub use optim::{clip_global_norm, Adam, AdamConfig, InverseSqrt};
pub use tasks::{Example, Task, TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub eval_every: u64,
    pub eval_examples: usize,
    /// Set from the run seed; not part of the serialized section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-5,
            label_smoothing: 0.1,
            dropout: 0.1,
            batch_size: 32,
            max_steps: 5000,
            clip_norm: 1.0,
            eval_every: 500,
            eval_examples: 200,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Settings that train the mini model on the toy tasks in a few
    /// thousand steps.
    pub fn toy() -> Self {
        Self {
            lr: 3e-3,
            warmup: 200,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("lr must be positive and betas in [0, 1)");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> InverseSqrt {
        InverseSqrt {
            peak: self.lr,
            warmup: self.warmup,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Where training batches come from.
#[derive(Clone, Debug)]
pub enum Data {
    /// Batch `t` holds task examples `t·B .. (t+1)·B`.
    Task(Task),
    /// Batch `t` samples a fixed dataset with a generator keyed by `t`.
    Fixed(Vec<Example>),
}

impl Data {
    pub fn batch(&self, step: u64, size: usize, seed: u64) -> Vec<Example> {
        match self {
            Data::Task(t) => t.examples(step * size as u64, size),
            Data::Fixed(v) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(step);
                (0..size)
                    .map(|_| v[rng.random_range(0..v.len())].clone())
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_add(0x2545_f491_4f6c_dd1d)
}

pub struct Trainer {
    pub model: Model<f32>,
    pub opt: Adam<f32>,
    pub cfg: TrainConfig,
    pub data: Data,
    /// Completed optimizer steps.
    pub step: u64,
    /// Loss sum and count since the last evaluation.
    window: (f64, u64),
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig, data: Data) -> Result<Self> {
        cfg.validate()?;
        if let Data::Fixed(v) = &data {
            if v.is_empty() {
                return Err(Error::Config("training dataset is empty".into()));
            }
        }
        let opt = Adam::new(cfg.adam(), model.store());
        Ok(Self {
            model,
            opt,
            cfg,
            data,
            step: 0,
            window: (0.0, 0),
        })
    }

    /// Continues from saved state after `step` completed updates.
    pub fn resume(
        model: Model<f32>,
        opt: Adam<f32>,
        step: u64,
        cfg: TrainConfig,
        data: Data,
    ) -> Result<Self> {
        let mut t = Self::new(model, cfg, data)?;
        if opt.m.len() != t.model.store().len() || opt.steps.len() != t.model.store().len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match the model".into(),
            ));
        }
        t.opt = opt;
        t.step = step;
        Ok(t)
    }

    /// Forward, backward, clip, and one optimizer update.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let batch: Vec<(Vec<usize>, Vec<usize>)> = self
            .data
            .batch(self.step, self.cfg.batch_size, self.cfg.seed)
            .iter()
            .map(Example::pair)
            .collect();
        let (loss, mut grads) = {
            let mut g = if self.cfg.dropout > 0.0 {
                Graph::training(
                    self.model.store(),
                    self.cfg.dropout,
                    dropout_seed(self.cfg.seed, self.step),
                )
            } else {
                Graph::with_params(self.model.store())
            };
            let loss = self
                .model
                .loss_graph(&mut g, &batch, self.cfg.label_smoothing)?;
            let value = g.value(loss).data()[0].as_f64();
            (value, g.backward(loss)?)
        };
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        let lr = self.cfg.schedule().lr(self.step + 1);
        self.opt.step(self.model.store_mut(), &grads, lr)?;
        self.step += 1;
        Ok(StepStats {
            loss,
            grad_norm,
            lr,
        })
    }

    /// Trains until `max_steps`, evaluating greedy decoding on `eval_set`
    /// every `eval_every` steps and after the last one. Each evaluation
    /// emits one `step=N key=value ...` line through `log`.
    pub fn run(
        &mut self,
        eval_set: &[Example],
        decode_cfg: &DecodeConfig,
        log: &mut dyn FnMut(&str),
    ) -> Result<Metrics> {
        let mut last = None;
        while self.step < self.cfg.max_steps {
            if let Some(m) = self.run_until(self.cfg.max_steps, eval_set, decode_cfg, log)? {
                last = Some(m);
            }
        }
        match last {
            Some(m) => Ok(m),
            None => evaluate(&self.model, eval_set, decode_cfg),
        }
    }

    /// Like [`Trainer::run`], but returns after the first evaluation or
    /// once `stop` steps are done, whichever comes first. Returns the
    /// evaluation's metrics if one ran.
    pub fn run_until(
        &mut self,
        stop: u64,
        eval_set: &[Example],
        decode_cfg: &DecodeConfig,
        log: &mut dyn FnMut(&str),
    ) -> Result<Option<Metrics>> {
        let stop = stop.min(self.cfg.max_steps);
        while self.step < stop {
            let s = self.train_step()?;
            if !s.loss.is_finite() {
                return Err(Error::NaN(format!("training loss at step {}", self.step)));
            }
            self.window.0 += s.loss;
            self.window.1 += 1;
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.max_steps {
                let m = evaluate(&self.model, eval_set, decode_cfg)?;
                log(&format!(
                    "step={} loss={:.6} lr={:.6e} token_accuracy={:.6} exact_match={:.6} bleu={:.4}",
                    self.step,
                    self.window.0 / self.window.1 as f64,
                    s.lr,
                    m.token_accuracy,
                    m.exact_match,
                    m.bleu
                ));
                self.window = (0.0, 0);
                return Ok(Some(m));
            }
        }
        Ok(None)
    }
}

/// Reads a dataset file: one example per line, `src TAB tgt`, token ids
/// separated by spaces, without EOS (it is appended here). Blank lines are
/// skipped.
pub fn read_dataset(path: &std::path::Path, vocab: usize) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, vocab)
}

pub fn parse_dataset(text: &str, vocab: usize) -> Result<Vec<Example>> {
    let eos = crate::config::Specials::for_vocab(vocab).eos;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Input {
            line: i + 1,
            msg: "expected `src<TAB>tgt`".into(),
        })?;
        let parse = |s: &str| -> Result<Vec<usize>> {
            let mut ids =
                parse_tokens(s, vocab).map_err(|msg| Error::Input { line: i + 1, msg })?;
            ids.push(eos);
            Ok(ids)
        };
        out.push(Example {
            src: parse(src)?,
            tgt: parse(tgt)?,
        });
    }
    Ok(out)
}

/// Writes examples in the format read by [`read_dataset`].
pub fn format_dataset(data: &[Example], vocab: usize) -> String {
    let eos = crate::config::Specials::for_vocab(vocab).eos;
    let join = |v: &[usize]| {
        let body = match v.split_last() {
            Some((&l, rest)) if l == eos => rest,
            _ => v,
        };
        body.iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    data.iter()
        .map(|e| format!("{}\t{}\n", join(&e.src), join(&e.tgt)))
        .collect()
}

/// Parses space-separated token ids. The names `<pad>`, `<bos>` and `<eos>`
/// are accepted for the reserved ids.
pub fn parse_tokens(s: &str, vocab: usize) -> std::result::Result<Vec<usize>, String> {
    let sp = crate::config::Specials::for_vocab(vocab);
    s.split_whitespace()
        .map(|t| {
            let id = match t {
                "<pad>" => sp.pad,
                "<bos>" => sp.bos,
                "<eos>" => sp.eos,
                _ => t.parse::<usize>().map_err(|_| format!("bad token `{t}`"))?,
            };
            if id >= vocab {
                Err(format!("token id {id} out of vocabulary (size {vocab})"))
            } else {
                Ok(id)
            }
        })
        .collect()
}

/// Decodes every source (in parallel) and scores against the targets.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &[Example],
    cfg: &DecodeConfig,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let hyps: Vec<Vec<usize>> = data
        .par_iter()
        .map(|e| decode(model, &e.src, cfg).map(|h| h.tokens))
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = data.iter().map(|e| e.tgt.clone()).collect();
    Ok(metrics::score(&hyps, &refs, model.specials().eos))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distilled {
    pub examples: Vec<Example>,
    /// Examples where the teacher produced nothing and the original target
    /// was kept.
    pub kept_original: usize,
}

/// Sequence-level distillation: every target becomes the teacher's decoded
/// output for its source.
pub fn seq_kd<T: Real>(
    teacher: &Model<T>,
    data: &[Example],
    cfg: &DecodeConfig,
) -> Result<Distilled> {
    let eos = teacher.specials().eos;
    let outputs: Vec<Vec<usize>> = data
        .par_iter()
        .map(|e| decode(teacher, &e.src, cfg).map(|h| h.content(eos).to_vec()))
        .collect::<Result<_>>()?;
    let mut kept_original = 0;
    let examples = data
        .iter()
        .zip(outputs)
        .map(|(e, mut out)| {
            if out.is_empty() {
                kept_original += 1;
                e.clone()
            } else {
                out.push(eos);
                Example {
                    src: e.src.clone(),
                    tgt: out,
                }
            }
        })
        .collect();
    Ok(Distilled {
        examples,
        kept_original,
    })
}
