//! Layer adaptation: cheap per-layer parameters that let encoder layers
//! sharing one weight group behave differently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamRole};
use crate::error::{Error, Result};
use crate::model::{LoraParams, Model};
use crate::tensor::{cast, matmul, Real, Tensor};

/// Requested adaptation, as it appears in run configurations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSpec {
    #[serde(default)]
    pub bias: bool,
    /// LoRA rank on the query and value projections.
    #[serde(default)]
    pub lora_rank: Option<usize>,
    /// Prompt length per encoder layer.
    #[serde(default)]
    pub prompt_len: Option<usize>,
}

impl AdaptSpec {
    pub fn is_none(&self) -> bool {
        !self.bias && self.lora_rank.is_none() && self.prompt_len.is_none()
    }
}

impl<T: Real> Model<T> {
    pub fn apply(&mut self, spec: &AdaptSpec, seed: u64) -> Result<()> {
        if spec.bias {
            self.apply_bias_la()?;
        }
        if let Some(r) = spec.lora_rank {
            self.apply_adapter_la(r, seed)?;
        }
        if let Some(l) = spec.prompt_len {
            self.apply_prompt_la(l, seed.wrapping_add(1))?;
        }
        Ok(())
    }

    /// Gives every encoder layer private copies of its biases (projection
    /// biases and layer-norm shifts), initialized from the shared values.
    pub fn apply_bias_la(&mut self) -> Result<()> {
        if self.adapt.bias {
            return Err(Error::Adaptation("bias adaptation already applied".into()));
        }
        for i in 0..self.encoder.len() {
            let mut layer = self.encoder[i].clone();
            let name = |p: &str| format!("enc[{}].{p}", i + 1);
            let a = &mut layer.attn;
            a.bq = self.untie(a.bq, &name("attn/bq"));
            a.bk = self.untie(a.bk, &name("attn/bk"));
            a.bv = self.untie(a.bv, &name("attn/bv"));
            a.bo = self.untie(a.bo, &name("attn/bo"));
            a.ln_b = self.untie(a.ln_b, &name("attn/ln_b"));
            let f = &mut layer.ffn;
            f.b1 = self.untie(f.b1, &name("ffn/b1"));
            f.b2 = self.untie(f.b2, &name("ffn/b2"));
            f.ln_b = self.untie(f.ln_b, &name("ffn/ln_b"));
            self.encoder[i] = layer;
        }
        self.adapt.bias = true;
        Ok(())
    }

    fn untie(&mut self, id: ParamId, name: &str) -> ParamId {
        let p = self.store.get(id);
        let (role, value) = (p.role, p.value.clone());
        self.store.add(name, role, value)
    }

    /// Adds a rank-`r` update `B·A` to W^Q and W^V of every encoder layer.
    /// `B` starts at zero, so the model's function is unchanged.
    pub fn apply_adapter_la(&mut self, rank: usize, seed: u64) -> Result<()> {
        let d = self.config.model_dim;
        if self.adapt.lora_rank.is_some() {
            return Err(Error::Adaptation(
                "adapter adaptation already applied".into(),
            ));
        }
        if rank == 0 || rank >= d {
            return Err(Error::Adaptation(format!(
                "lora rank must satisfy 0 < r < d (r={rank}, d={d})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (rank + d) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        for i in 0..self.encoder.len() {
            let mut pair = |which: &str, store: &mut crate::autodiff::ParamStore<T>| {
                let b = store.add(
                    format!("enc[{}].lora_{which}/B", i + 1),
                    ParamRole::Lora,
                    Tensor::zeros(&[d, rank]),
                );
                let data = (0..rank * d).map(|_| cast(dist.sample(&mut rng))).collect();
                let a = store.add(
                    format!("enc[{}].lora_{which}/A", i + 1),
                    ParamRole::Lora,
                    Tensor::new(&[rank, d], data).unwrap(),
                );
                LoraParams { b, a }
            };
            let q = pair("q", &mut self.store);
            let v = pair("v", &mut self.store);
            self.encoder[i].lora_q = Some(q);
            self.encoder[i].lora_v = Some(v);
        }
        self.adapt.lora_rank = Some(rank);
        Ok(())
    }

    /// Prepends `len` trainable vectors to the keys and values of every
    /// encoder layer's self-attention. `len = 0` leaves the model unchanged.
    pub fn apply_prompt_la(&mut self, len: usize, seed: u64) -> Result<()> {
        let d = self.config.model_dim;
        if self.adapt.prompt_len.is_some() {
            return Err(Error::Adaptation(
                "prompt adaptation already applied".into(),
            ));
        }
        self.adapt.prompt_len = Some(len);
        if len == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (d as f64).powf(-0.5)).unwrap();
        for i in 0..self.encoder.len() {
            let data = (0..len * d).map(|_| cast(dist.sample(&mut rng))).collect();
            let id = self.store.add(
                format!("enc[{}].prompt", i + 1),
                ParamRole::Prompt,
                Tensor::new(&[len, d], data).unwrap(),
            );
            self.encoder[i].prompt = Some(id);
        }
        Ok(())
    }
}

/// A standalone low-rank factorization `ΔW = B·A` with `B: d×r`, `A: r×d`.
///
/// Unlike the model-level adapter, `r = d` is allowed here; at that rank
/// every `d×d` update is representable.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraBlock<T> {
    pub b: Tensor<T>,
    pub a: Tensor<T>,
}

impl<T: Real> LoraBlock<T> {
    pub fn zeros(d: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank > d {
            return Err(Error::Adaptation(format!("rank {rank} outside 1..={d}")));
        }
        Ok(Self {
            b: Tensor::zeros(&[d, rank]),
            a: Tensor::zeros(&[rank, d]),
        })
    }

    /// Full-rank factorization of an arbitrary square update: `B = I`, `A = ΔW`.
    pub fn from_delta(delta: &Tensor<T>) -> Result<Self> {
        let d = delta.rows();
        if delta.shape() != [d, d] {
            return Err(Error::shape("lora delta", delta.shape(), &[d, d]));
        }
        let mut b = Tensor::zeros(&[d, d]);
        for i in 0..d {
            b.set(&[i, i], T::one());
        }
        Ok(Self {
            b,
            a: delta.clone(),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Tensor<T> {
        matmul(&self.b, &self.a).expect("factor shapes agree")
    }

    /// `x·W + (x·B)·A`
    pub fn apply(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = matmul(x, w)?;
        let low = matmul(&matmul(x, &self.b)?, &self.a)?;
        y.add_assign(&low);
        Ok(y)
    }
}
