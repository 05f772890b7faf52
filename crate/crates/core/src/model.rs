//! Encoder-decoder Transformer bound to a sharing plan.
//!
//! All weights live in one [`ParamStore`]. Each sublayer slot holds the ids
//! of the tensors its group provides, so tied slots read (and accumulate
//! gradients into) the same parameters.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{AttnMask, Graph, ParamId, ParamRole, ParamStore, Var};
use crate::config::{DecoderStyle, ModelConfig, Specials};
use crate::error::{Error, Result};
use crate::plan::{build_plan, slots, PartKind, PlanSpec, SharingPlan, Slot, SlotRole, Stack};
use crate::tensor::{cast, positional_encoding, Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub bo: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl AttnParams {
    pub fn weights(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    pub fn all(&self) -> [ParamId; 10] {
        [
            self.wq, self.wk, self.wv, self.wo, self.bq, self.bk, self.bv, self.bo, self.ln_g,
            self.ln_b,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl FfnParams {
    pub fn all(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.ln_g, self.ln_b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartParams {
    Attn(AttnParams),
    Ffn(FfnParams),
}

impl PartParams {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            PartParams::Attn(a) => a.all().to_vec(),
            PartParams::Ffn(f) => f.all().to_vec(),
        }
    }

    fn attn(self) -> AttnParams {
        match self {
            PartParams::Attn(a) => a,
            PartParams::Ffn(_) => unreachable!("validated plan binds attention to attention"),
        }
    }

    fn ffn(self) -> FfnParams {
        match self {
            PartParams::Ffn(f) => f,
            PartParams::Attn(_) => unreachable!("validated plan binds ffn to ffn"),
        }
    }
}

/// Low-rank update `x·B·A` added to a projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraParams {
    /// `d × r`, zero at initialization.
    pub b: ParamId,
    /// `r × d`.
    pub a: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttnParams,
    pub ffn: FfnParams,
    pub lora_q: Option<LoraParams>,
    pub lora_v: Option<LoraParams>,
    /// `L × d` prompt prepended to the keys and values.
    pub prompt: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttnParams,
    pub cross: AttnParams,
    /// Vanilla: one FFN after cross-attention. Interleaved: the FFN after
    /// self-attention, then the one after cross-attention.
    pub ffns: Vec<FfnParams>,
}

/// Which layer adaptation has been applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptState {
    pub bias: bool,
    pub lora_rank: Option<usize>,
    pub prompt_len: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub(crate) config: ModelConfig,
    pub(crate) plan: SharingPlan,
    pub(crate) store: ParamStore<T>,
    pub(crate) embedding: ParamId,
    pub(crate) enc_norm: (ParamId, ParamId),
    pub(crate) dec_norm: (ParamId, ParamId),
    /// Group name → part name → tensors.
    pub(crate) groups: BTreeMap<String, BTreeMap<String, PartParams>>,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) decoder: Vec<DecoderLayer>,
    pub(crate) adapt: AdaptState,
    pos: Tensor<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier<T: Real>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        let data = (0..rows * cols)
            .map(|_| cast(dist.sample(&mut self.rng)))
            .collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    fn normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).unwrap();
        let data = (0..rows * cols)
            .map(|_| cast(dist.sample(&mut self.rng)))
            .collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }
}

fn alloc_part<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    part: PartKind,
    d: usize,
) -> PartParams {
    let mut w = |name: &str, r: usize, c: usize| {
        store.add(
            format!("{prefix}/{name}"),
            ParamRole::Weight,
            init.xavier(r, c),
        )
    };
    match part {
        PartKind::Attention => {
            let (wq, wk, wv, wo) = (w("wq", d, d), w("wk", d, d), w("wv", d, d), w("wo", d, d));
            let mut b =
                |name: &str, role| store.add(format!("{prefix}/{name}"), role, Tensor::zeros(&[d]));
            let (bq, bk, bv, bo) = (
                b("bq", ParamRole::Bias),
                b("bk", ParamRole::Bias),
                b("bv", ParamRole::Bias),
                b("bo", ParamRole::Bias),
            );
            let ln_b = b("ln_b", ParamRole::NormBias);
            let ln_g = store.add(
                format!("{prefix}/ln_g"),
                ParamRole::NormGain,
                Tensor::full(&[d], T::one()),
            );
            PartParams::Attn(AttnParams {
                wq,
                wk,
                wv,
                wo,
                bq,
                bk,
                bv,
                bo,
                ln_g,
                ln_b,
            })
        }
        PartKind::Ffn { dim } | PartKind::LightFfn { dim } => {
            let w1 = w("w1", d, dim);
            let w2 = w("w2", dim, d);
            let b1 = store.add(
                format!("{prefix}/b1"),
                ParamRole::Bias,
                Tensor::zeros(&[dim]),
            );
            let b2 = store.add(format!("{prefix}/b2"), ParamRole::Bias, Tensor::zeros(&[d]));
            let ln_b = store.add(
                format!("{prefix}/ln_b"),
                ParamRole::NormBias,
                Tensor::zeros(&[d]),
            );
            let ln_g = store.add(
                format!("{prefix}/ln_g"),
                ParamRole::NormGain,
                Tensor::full(&[d], T::one()),
            );
            PartParams::Ffn(FfnParams {
                w1,
                b1,
                w2,
                b2,
                ln_g,
                ln_b,
            })
        }
    }
}

/// Per-call bookkeeping for the self-attention cache of one decoder layer.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
}

/// Keys and values of all previously decoded positions of one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    layers: Vec<LayerCache<T>>,
    len: usize,
}

impl<T> DecoderCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Encoder memory with the cross-attention keys and values of every
/// decoder layer already projected.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub memory: Tensor<T>,
    cross: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Model<T> {
    /// Builds a plan from `spec` and initializes a model with `seed`.
    pub fn build(config: &ModelConfig, spec: &PlanSpec, seed: u64) -> Result<Self> {
        let plan = build_plan(spec, config)?;
        Self::new(config.clone(), plan, seed)
    }

    /// Allocates one tensor set per group part, in the order the parts are
    /// first bound when walking the slots canonically, so plans that differ
    /// only in tying draw matching initial values.
    pub fn new(config: ModelConfig, plan: SharingPlan, seed: u64) -> Result<Self> {
        config.validate()?;
        plan.validate(&config)?;
        let d = config.model_dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();
        let embedding = store.add(
            "embedding",
            ParamRole::Embedding,
            init.normal(config.vocab_size, d, (d as f64).powf(-0.5)),
        );

        let mut groups: BTreeMap<String, BTreeMap<String, PartParams>> = BTreeMap::new();
        let mut resolved: HashMap<Slot, PartParams> = HashMap::new();
        for slot in slots(&config) {
            let target = &plan.bindings[&slot];
            let (_, part) = plan.resolve(slot).expect("validated");
            let parts = groups.entry(target.group.clone()).or_default();
            let params = *parts.entry(target.part.clone()).or_insert_with(|| {
                let prefix = if target.part.is_empty() {
                    target.group.clone()
                } else {
                    format!("{}/{}", target.group, target.part)
                };
                alloc_part(&mut store, &mut init, &prefix, part, d)
            });
            resolved.insert(slot, params);
        }
        // parts of multi-part groups that no slot reads still exist
        for g in &plan.groups {
            for (pname, part) in g.kind.parts() {
                let parts = groups.entry(g.name.clone()).or_default();
                if !parts.contains_key(pname) {
                    let prefix = format!("{}/{}", g.name, pname);
                    parts.insert(
                        pname.to_string(),
                        alloc_part(&mut store, &mut init, &prefix, part, d),
                    );
                }
            }
        }

        let mut norm = |name: &str| {
            (
                store.add(
                    format!("{name}/g"),
                    ParamRole::NormGain,
                    Tensor::full(&[d], T::one()),
                ),
                store.add(
                    format!("{name}/b"),
                    ParamRole::NormBias,
                    Tensor::zeros(&[d]),
                ),
            )
        };
        let enc_norm = norm("enc_norm");
        let dec_norm = norm("dec_norm");

        let encoder = (1..=config.encoder_layers)
            .map(|i| EncoderLayer {
                attn: resolved[&Slot::enc(i, SlotRole::Attn)].attn(),
                ffn: resolved[&Slot::enc(i, SlotRole::Ffn)].ffn(),
                lora_q: None,
                lora_v: None,
                prompt: None,
            })
            .collect();
        let decoder = (1..=config.decoder_layers)
            .map(|j| DecoderLayer {
                self_attn: resolved[&Slot::dec(j, SlotRole::SelfAttn)].attn(),
                cross: resolved[&Slot::dec(j, SlotRole::Cross)].attn(),
                ffns: match config.decoder_style {
                    DecoderStyle::Vanilla => vec![resolved[&Slot::dec(j, SlotRole::Ffn)].ffn()],
                    DecoderStyle::Interleaved => vec![
                        resolved[&Slot::dec(j, SlotRole::FfnA)].ffn(),
                        resolved[&Slot::dec(j, SlotRole::FfnB)].ffn(),
                    ],
                },
            })
            .collect();

        let pos = positional_encoding(config.max_len + 1, d);
        Ok(Self {
            config,
            plan,
            store,
            embedding,
            enc_norm,
            dec_norm,
            groups,
            encoder,
            decoder,
            adapt: AdaptState::default(),
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &SharingPlan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn specials(&self) -> Specials {
        self.config.specials()
    }

    pub fn adaptation(&self) -> AdaptState {
        self.adapt
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.decoder
    }

    /// Tensors owned by a group, in allocation order.
    pub fn group_params(&self, group: &str) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .groups
            .get(group)
            .into_iter()
            .flat_map(|parts| parts.values().flat_map(PartParams::ids))
            .collect();
        ids.sort();
        ids
    }

    /// The tensors a slot reads.
    pub fn slot_params(&self, slot: Slot) -> Option<PartParams> {
        let layer = slot.layer.checked_sub(1)?;
        match (slot.stack, slot.role) {
            (Stack::Encoder, SlotRole::Attn) => {
                self.encoder.get(layer).map(|l| PartParams::Attn(l.attn))
            }
            (Stack::Encoder, SlotRole::Ffn) => {
                self.encoder.get(layer).map(|l| PartParams::Ffn(l.ffn))
            }
            (Stack::Decoder, SlotRole::SelfAttn) => self
                .decoder
                .get(layer)
                .map(|l| PartParams::Attn(l.self_attn)),
            (Stack::Decoder, SlotRole::Cross) => {
                self.decoder.get(layer).map(|l| PartParams::Attn(l.cross))
            }
            (Stack::Decoder, SlotRole::Ffn | SlotRole::FfnA) => {
                self.decoder.get(layer).map(|l| PartParams::Ffn(l.ffns[0]))
            }
            (Stack::Decoder, SlotRole::FfnB) => self
                .decoder
                .get(layer)
                .and_then(|l| l.ffns.get(1))
                .map(|f| PartParams::Ffn(*f)),
            _ => None,
        }
    }

    /// Same model with every tensor converted to `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            store: self.store.cast(),
            embedding: self.embedding,
            enc_norm: self.enc_norm,
            dec_norm: self.dec_norm,
            groups: self.groups.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            adapt: self.adapt,
            pos: self.pos.cast(),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match ids.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(Error::OutOfVocab { id, vocab }),
            None => Ok(()),
        }
    }

    /// Scaled token embeddings plus positional encodings, with dropout.
    fn embed(&self, g: &mut Graph<'_, T>, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let d = self.config.model_dim;
        let table = g.param(self.embedding);
        let e = g.embedding(table, ids)?;
        let e = g.scale(e, cast((d as f64).sqrt()));
        let mut pe = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            pe.extend_from_slice(self.pos.row(p));
        }
        let x = g.add_const(e, &Tensor::new(&[positions.len(), d], pe)?)?;
        Ok(g.dropout(x))
    }

    fn linear(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        w: ParamId,
        b: ParamId,
        lora: Option<LoraParams>,
    ) -> Result<Var> {
        let wv = g.param(w);
        let mut y = g.matmul(x, wv)?;
        if let Some(l) = lora {
            let (bv, av) = (g.param(l.b), g.param(l.a));
            let low = g.matmul(x, bv)?;
            let low = g.matmul(low, av)?;
            y = g.add(y, low)?;
        }
        let bv = g.param(b);
        g.add_row(y, bv)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let (gv, bv) = (g.param(gain), g.param(bias));
        g.layer_norm(x, gv, bv, cast(LN_EPS))
    }

    fn ffn(&self, g: &mut Graph<'_, T>, x: Var, p: &FfnParams) -> Result<Var> {
        let h = self.norm(g, x, (p.ln_g, p.ln_b))?;
        let h = self.linear(g, h, p.w1, p.b1, None)?;
        let h = g.relu(h);
        let h = g.dropout(h);
        let h = self.linear(g, h, p.w2, p.b2, None)?;
        g.add(x, h)
    }

    /// Source padding mask, padded ids and length per row.
    fn pad_batch(&self, seqs: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<bool>, usize)> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let n = seqs.iter().map(Vec::len).max().unwrap_or(0);
        self.check_len(n)?;
        let pad = self.specials().pad;
        let mut ids = Vec::with_capacity(seqs.len() * n);
        let mut valid = Vec::with_capacity(seqs.len() * n);
        for s in seqs {
            self.check_ids(s)?;
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(pad).take(n - s.len()));
            valid.extend(std::iter::repeat(false).take(n - s.len()));
        }
        Ok((ids, valid, n))
    }

    /// Runs the encoder over a padded batch; returns the final-normed
    /// memory `[batch·n × d]` and the key mask.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_, T>,
        src: &[Vec<usize>],
    ) -> Result<(Var, Vec<bool>, usize)> {
        let (ids, valid, n) = self.pad_batch(src)?;
        let batch = src.len();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let mut x = self.embed(g, &ids, &positions)?;
        let heads = self.config.heads;
        for layer in &self.encoder {
            let a = &layer.attn;
            let h = self.norm(g, x, (a.ln_g, a.ln_b))?;
            let q = self.linear(g, h, a.wq, a.bq, layer.lora_q)?;
            let (kv_in, mask) = match layer.prompt {
                Some(p) => {
                    let pv = g.param(p);
                    let l = g.value(pv).rows();
                    let kv_in = g.prepend_rows(h, pv, batch)?;
                    let mut key_valid = Vec::with_capacity(batch * (l + n));
                    for b in 0..batch {
                        key_valid.extend(std::iter::repeat(true).take(l));
                        key_valid.extend_from_slice(&valid[b * n..(b + 1) * n]);
                    }
                    let mask = AttnMask {
                        batch,
                        q_len: n,
                        k_len: l + n,
                        key_valid: Some(key_valid),
                        causal: false,
                    };
                    (kv_in, mask)
                }
                None => (
                    h,
                    AttnMask {
                        key_valid: Some(valid.clone()),
                        ..AttnMask::full(batch, n, n)
                    },
                ),
            };
            let k = self.linear(g, kv_in, a.wk, a.bk, None)?;
            let v = self.linear(g, kv_in, a.wv, a.bv, layer.lora_v)?;
            let att = g.attention(q, k, v, heads, mask)?;
            let o = self.linear(g, att, a.wo, a.bo, None)?;
            x = g.add(x, o)?;
            x = self.ffn(g, x, &layer.ffn)?;
        }
        let memory = self.norm(g, x, self.enc_norm)?;
        Ok((memory, valid, n))
    }

    /// One decoder layer. With `cache`, `x` holds the newest position of a
    /// single sequence and self-attention reads the cached prefix.
    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        g: &mut Graph<'_, T>,
        mut x: Var,
        layer: &DecoderLayer,
        batch: usize,
        q_len: usize,
        cross_kv: (Var, Var),
        cross_mask: AttnMask,
        cache: Option<&mut LayerCache<T>>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let d = self.config.model_dim;
        let a = &layer.self_attn;
        let h = self.norm(g, x, (a.ln_g, a.ln_b))?;
        let q = self.linear(g, h, a.wq, a.bq, None)?;
        let k = self.linear(g, h, a.wk, a.bk, None)?;
        let v = self.linear(g, h, a.wv, a.bv, None)?;
        let (k, v, k_len) = match cache {
            None => (k, v, q_len),
            Some(c) => {
                c.keys.extend_from_slice(g.value(k).data());
                c.values.extend_from_slice(g.value(v).data());
                let rows = c.keys.len() / d;
                let kt = g.input(Tensor::new(&[rows, d], c.keys.clone())?, false);
                let vt = g.input(Tensor::new(&[rows, d], c.values.clone())?, false);
                (kt, vt, rows)
            }
        };
        let mask = AttnMask {
            causal: true,
            ..AttnMask::full(batch, q_len, k_len)
        };
        let att = g.attention(q, k, v, heads, mask)?;
        let o = self.linear(g, att, a.wo, a.bo, None)?;
        x = g.add(x, o)?;

        let interleaved = layer.ffns.len() == 2;
        if interleaved {
            x = self.ffn(g, x, &layer.ffns[0])?;
        }

        let c = &layer.cross;
        let h = self.norm(g, x, (c.ln_g, c.ln_b))?;
        let q = self.linear(g, h, c.wq, c.bq, None)?;
        let att = g.attention(q, cross_kv.0, cross_kv.1, heads, cross_mask)?;
        let o = self.linear(g, att, c.wo, c.bo, None)?;
        x = g.add(x, o)?;

        let last = layer.ffns.last().expect("decoder layer has an ffn");
        self.ffn(g, x, last)
    }

    /// Teacher-forced logits `[batch·n_t × V]` for decoder inputs `tgt_in`
    /// (each starting with BOS). Rows of shorter targets are padded.
    pub fn logits_graph(
        &self,
        g: &mut Graph<'_, T>,
        src: &[Vec<usize>],
        tgt_in: &[Vec<usize>],
    ) -> Result<Var> {
        if src.len() != tgt_in.len() {
            return Err(Error::shape("batch", &[src.len()], &[tgt_in.len()]));
        }
        let batch = src.len();
        let (memory, src_valid, n_src) = self.encode_graph(g, src)?;
        let (ids, _, n_t) = self.pad_batch(tgt_in)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..n_t).collect();
        let mut x = self.embed(g, &ids, &positions)?;
        let cross_mask = AttnMask {
            key_valid: Some(src_valid),
            ..AttnMask::full(batch, n_t, n_src)
        };
        for layer in &self.decoder {
            let c = &layer.cross;
            let k = self.linear(g, memory, c.wk, c.bk, None)?;
            let v = self.linear(g, memory, c.wv, c.bv, None)?;
            x = self.decoder_layer(g, x, layer, batch, n_t, (k, v), cross_mask.clone(), None)?;
        }
        let h = self.norm(g, x, self.dec_norm)?;
        let e = g.param(self.embedding);
        g.matmul_nt(h, e)
    }

    /// Label-smoothed training loss over `(source, target)` pairs, where each
    /// target ends with EOS.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        pairs: &[(Vec<usize>, Vec<usize>)],
        smoothing: f64,
    ) -> Result<Var> {
        let sp = self.specials();
        let src: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let tgt_in: Vec<Vec<usize>> = pairs.iter().map(|p| teacher_input(&p.1, sp.bos)).collect();
        let n_t = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
        let mut labels = Vec::with_capacity(pairs.len() * n_t);
        for (_, t) in pairs {
            labels.extend_from_slice(t);
            labels.extend(std::iter::repeat(sp.pad).take(n_t - t.len()));
        }
        let logits = self.logits_graph(g, &src, &tgt_in)?;
        g.label_smoothed_ce(logits, &labels, cast(smoothing), sp.pad)
    }

    /// Logits `[n_t × V]` for one source and decoder input, in eval mode.
    pub fn forward(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.store);
        let out = self.logits_graph(&mut g, &[src.to_vec()], &[tgt_in.to_vec()])?;
        Ok(g.value(out).clone())
    }

    /// Encodes one source and projects the cross-attention keys and values.
    pub fn encode(&self, src: &[usize]) -> Result<Encoded<T>> {
        let mut g = Graph::with_params(&self.store);
        let (memory, _, _) = self.encode_graph(&mut g, &[src.to_vec()])?;
        let mut cross = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let c = &layer.cross;
            let k = self.linear(&mut g, memory, c.wk, c.bk, None)?;
            let v = self.linear(&mut g, memory, c.wv, c.bv, None)?;
            cross.push((g.value(k).clone(), g.value(v).clone()));
        }
        Ok(Encoded {
            memory: g.value(memory).clone(),
            cross,
        })
    }

    pub fn new_cache(&self) -> DecoderCache<T> {
        DecoderCache {
            layers: vec![LayerCache::default(); self.decoder.len()],
            len: 0,
        }
    }

    /// Feeds one token at position `cache.len()` and returns the logits for
    /// the next one.
    pub fn step(
        &self,
        enc: &Encoded<T>,
        cache: &mut DecoderCache<T>,
        token: usize,
    ) -> Result<Vec<T>> {
        self.check_len(cache.len + 1)?;
        self.check_ids(&[token])?;
        let mut g = Graph::with_params(&self.store);
        let mut x = self.embed(&mut g, &[token], &[cache.len])?;
        let n_src = enc.memory.rows();
        for ((layer, lc), (k, v)) in self
            .decoder
            .iter()
            .zip(cache.layers.iter_mut())
            .zip(&enc.cross)
        {
            let k = g.input(k.clone(), false);
            let v = g.input(v.clone(), false);
            x = self.decoder_layer(
                &mut g,
                x,
                layer,
                1,
                1,
                (k, v),
                AttnMask::full(1, 1, n_src),
                Some(lc),
            )?;
        }
        cache.len += 1;
        let h = self.norm(&mut g, x, self.dec_norm)?;
        let e = g.param(self.embedding);
        let logits = g.matmul_nt(h, e)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Logits for the last position of `prefix`, recomputing the whole
    /// decoder. Reference for [`Model::step`].
    pub fn step_recompute(&self, enc: &Encoded<T>, prefix: &[usize]) -> Result<Vec<T>> {
        self.check_len(prefix.len())?;
        self.check_ids(prefix)?;
        let mut g = Graph::with_params(&self.store);
        let n = prefix.len();
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.embed(&mut g, prefix, &positions)?;
        let n_src = enc.memory.rows();
        for (layer, (k, v)) in self.decoder.iter().zip(&enc.cross) {
            let k = g.input(k.clone(), false);
            let v = g.input(v.clone(), false);
            x = self.decoder_layer(
                &mut g,
                x,
                layer,
                1,
                n,
                (k, v),
                AttnMask::full(1, n, n_src),
                None,
            )?;
        }
        let h = self.norm(&mut g, x, self.dec_norm)?;
        let e = g.param(self.embedding);
        let logits = g.matmul_nt(h, e)?;
        Ok(g.value(logits).row(n - 1).to_vec())
    }
}

/// Decoder input for a target: BOS followed by all but the last token.
pub fn teacher_input(target: &[usize], bos: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(target.len());
    v.push(bos);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> Model<f64> {
        Model::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), 7).unwrap()
    }

    #[test]
    fn logits_shape() {
        let m = mini();
        let out = m.forward(&[1, 2, 3, 15], &[14, 4, 5]).unwrap();
        assert_eq!(out.shape(), &[3, 16]);
        assert!(!out.has_nan());
    }

    #[test]
    fn out_of_vocab_and_too_long_are_errors() {
        let m = mini();
        assert!(matches!(
            m.forward(&[1, 16], &[14]),
            Err(Error::OutOfVocab { id: 16, vocab: 16 })
        ));
        let long = vec![1; 33];
        assert!(matches!(
            m.forward(&long, &[14]),
            Err(Error::TooLong { len: 33, max: 32 })
        ));
    }

    #[test]
    fn tied_slots_share_tensors() {
        let m = mini();
        let enc = m.encoder_layers();
        assert_eq!(enc[0].attn, enc[2].attn);
        assert_ne!(enc[0].attn, enc[1].attn);
        assert_eq!(m.decoder_layers()[0].self_attn, enc[0].attn);
        assert_eq!(m.decoder_layers()[0].cross, enc[1].attn);
        let d = &m.decoder_layers()[0];
        assert_eq!(d.ffns[0], d.ffns[1]);
    }

    #[test]
    fn batch_rows_match_single_runs() {
        let m = mini();
        let pairs = [
            (vec![1, 2, 3, 15], vec![14, 4]),
            (vec![5, 15], vec![14, 6, 7, 8]),
        ];
        let mut g = Graph::with_params(&m.store);
        let src: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
        let out = m.logits_graph(&mut g, &src, &tgt).unwrap();
        let batched = g.value(out).clone();
        for (b, (s, t)) in pairs.iter().enumerate() {
            let single = m.forward(s, t).unwrap();
            for r in 0..t.len() {
                assert_eq!(batched.row(b * 4 + r), single.row(r));
            }
        }
    }

    #[test]
    fn incremental_matches_forward() {
        let m = mini();
        let src = [3, 4, 5, 15];
        let prefix = [14, 6, 2, 9];
        let full = m.forward(&src, &prefix).unwrap();
        let enc = m.encode(&src).unwrap();
        let mut cache = m.new_cache();
        for (t, &tok) in prefix.iter().enumerate() {
            let logits = m.step(&enc, &mut cache, tok).unwrap();
            assert_eq!(logits.as_slice(), full.row(t));
            assert_eq!(logits, m.step_recompute(&enc, &prefix[..=t]).unwrap());
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = mini();
        let b = mini();
        let c: Model<f64> = Model::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), 8).unwrap();
        let w = a.encoder_layers()[0].attn.wq;
        assert_eq!(a.store.value(w), b.store.value(w));
        assert_ne!(a.store.value(w), c.store.value(w));
    }

    #[test]
    fn teacher_input_shifts() {
        assert_eq!(teacher_input(&[4, 5, 15], 14), vec![14, 4, 5]);
    }
}
