//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass on a tape. Model
//! parameters live in a [`ParamStore`] outside the graph; binding the same
//! parameter twice returns the same leaf, so a weight used at several sites
//! receives the sum of the per-site gradients during [`Graph::backward`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, cast, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is used for; drives parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Attention or FFN weight matrix.
    Weight,
    Bias,
    NormGain,
    NormBias,
    Embedding,
    /// Low-rank adapter factor.
    Lora,
    /// Layer prompt embeddings.
    Prompt,
}

impl ParamRole {
    pub fn is_bias(self) -> bool {
        matches!(self, ParamRole::Bias | ParamRole::NormBias)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

/// Owns every trainable tensor of a model exactly once.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys each query of a batched attention call may see.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `false` marks padded key positions, `batch * k_len` entries.
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` sees keys `j <= i + (k_len - q_len)`.
    pub causal: bool,
}

impl AttnMask {
    pub fn full(batch: usize, q_len: usize, k_len: usize) -> Self {
        Self {
            batch,
            q_len,
            k_len,
            key_valid: None,
            causal: false,
        }
    }

    /// Global key rows visible to query `i` of batch element `b`.
    pub(crate) fn visible(&self, b: usize, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let limit = if self.causal {
            (i + self.k_len - self.q_len + 1).min(self.k_len)
        } else {
            self.k_len
        };
        for j in 0..limit {
            let g = b * self.k_len + j;
            if self.key_valid.as_ref().map_or(true, |m| m[g]) {
                out.push(g);
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(T, T)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        /// Pre-dropout weights, per (row, head), concatenated.
        probs: Vec<T>,
        drop: Option<Vec<T>>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    PrependRows {
        x: Var,
        prefix: Var,
        batch: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        eps: T,
        pad: usize,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Real> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a, T: Real> Graph<'a, T> {
    /// Graph without parameters, for standalone computations.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            dropout: 0.0,
            rng: None,
        }
    }

    /// Evaluation-mode graph over a parameter store (dropout disabled).
    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Training-mode graph: dropout at `rate`, masks drawn from `seed`.
    pub fn training(store: &'a ParamStore<T>, rate: f64, seed: u64) -> Self {
        Self {
            store: Some(store),
            dropout: rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), _) => self.store.expect("param graph").value(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-param node without value"),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the same
    /// node, so all uses share one gradient accumulator.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` (used for the tied output projection).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let out = tensor::matmul(av, &bv.transpose())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        tensor::add_row_inplace(out.data_mut(), bv.data());
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let k = self.input(c.clone(), false);
        self.add(x, k)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(xv.rows());
        for (xr, or) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            stats.push(tensor::layer_norm_row(xr, gv.data(), bv.data(), eps, or));
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries `[batch·q_len × d]`, keys and values `[batch·k_len × d]`.
    /// Masked keys get zero weight; queries that see no key output zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
    ) -> Result<Var> {
        let rate = if self.is_training() {
            self.dropout
        } else {
            0.0
        };
        let mut rng = self.rng.take();
        let res = self.attention_forward(q, k, v, heads, &mask, rate, rng.as_mut());
        self.rng = rng;
        let (out, probs, drop) = res?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
                drop,
            },
            rg,
        ))
    }

    #[allow(clippy::type_complexity, clippy::too_many_arguments)]
    fn attention_forward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, Vec<T>, Option<Vec<T>>)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.shape() != kv.shape() || heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if qv.rows() != mask.batch * mask.q_len || kv.rows() != mask.batch * mask.k_len {
            return Err(Error::shape(
                "attention mask",
                &[mask.batch, mask.q_len, mask.k_len],
                &[qv.rows(), kv.rows()],
            ));
        }
        if mask.causal && mask.k_len < mask.q_len {
            return Err(Error::Contract(
                "causal attention needs k_len >= q_len".into(),
            ));
        }
        if let Some(m) = &mask.key_valid {
            if m.len() != mask.batch * mask.k_len {
                return Err(Error::shape(
                    "attention key mask",
                    &[m.len()],
                    &[mask.batch * mask.k_len],
                ));
            }
        }
        let dk = d / heads;
        let scale: T = cast(1.0 / (dk as f64).sqrt());
        let keep: T = cast(1.0 / (1.0 - rate));

        let mut out = vec![T::zero(); qv.len()];
        let mut all_probs = Vec::new();
        let mut drop_masks = (rate > 0.0).then(Vec::new);
        let mut visible = Vec::new();
        let mut probs = Vec::new();
        let mut scratch = vec![T::zero(); dk];
        for b in 0..mask.batch {
            for i in 0..mask.q_len {
                mask.visible(b, i, &mut visible);
                let r = b * mask.q_len + i;
                for h in 0..heads {
                    let off = h * dk;
                    let qrow = &qv.data()[r * d + off..r * d + off + dk];
                    let orow = &mut out[r * d + off..r * d + off + dk];
                    match (drop_masks.as_mut(), rng.as_deref_mut()) {
                        (Some(dm), Some(rng)) => {
                            scratch.iter_mut().for_each(|x| *x = T::zero());
                            tensor::attend_row(
                                qrow,
                                kv.data(),
                                vv.data(),
                                d,
                                off,
                                &visible,
                                scale,
                                &mut probs,
                                &mut scratch,
                            );
                            // mix again with the dropped weights
                            let start = dm.len();
                            for _ in 0..visible.len() {
                                dm.push(if rng.random::<f64>() < rate {
                                    T::zero()
                                } else {
                                    keep
                                });
                            }
                            for ((&p, &j), &m) in probs.iter().zip(&visible).zip(&dm[start..]) {
                                let vrow = &vv.data()[j * d + off..j * d + off + dk];
                                for (o, &x) in orow.iter_mut().zip(vrow) {
                                    *o += p * m * x;
                                }
                            }
                        }
                        _ => tensor::attend_row(
                            qrow,
                            kv.data(),
                            vv.data(),
                            d,
                            off,
                            &visible,
                            scale,
                            &mut probs,
                            orow,
                        ),
                    }
                    all_probs.extend_from_slice(&probs);
                }
            }
        }
        Ok((Tensor::new(qv.shape(), out)?, all_probs, drop_masks))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[batch·n × d]` → `[batch·(L+n) × d]`, inserting the `L × d` prefix
    /// before every batch element.
    pub fn prepend_rows(&mut self, x: Var, prefix: Var, batch: usize) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(prefix));
        let d = xv.cols();
        if pv.cols() != d || batch == 0 || xv.rows() % batch != 0 {
            return Err(Error::shape("prepend_rows", xv.shape(), pv.shape()));
        }
        let n = xv.rows() / batch;
        let l = pv.rows();
        let mut out = Vec::with_capacity(batch * (n + l) * d);
        for b in 0..batch {
            out.extend_from_slice(pv.data());
            out.extend_from_slice(&xv.data()[b * n * d..(b + 1) * n * d]);
        }
        let out = Tensor::new(&[batch * (n + l), d], out)?;
        let rg = self.rg(x) || self.rg(prefix);
        Ok(self.push(out, Op::PrependRows { x, prefix, batch }, rg))
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var) -> Var {
        if !self.is_training() {
            return x;
        }
        let rate = self.dropout;
        let keep: T = cast(1.0 / (1.0 - rate));
        let rng = self.rng.as_mut().unwrap();
        let xv = match (&self.nodes[x.0].op, &self.nodes[x.0].value) {
            (Op::Param(id), _) => self.store.unwrap().value(*id),
            (_, Some(t)) => t,
            _ => unreachable!(),
        };
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Label-smoothed cross-entropy, averaged over rows whose target is not
    /// `pad`. The smoothed target is `(1-eps)·onehot + eps/V`. A batch with no
    /// non-pad rows has loss zero.
    pub fn label_smoothed_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: T,
        pad: usize,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::shape(
                "label_smoothed_ce",
                lv.shape(),
                &[targets.len()],
            ));
        }
        let vt = T::from_usize(vocab).unwrap();
        let mut probs = Vec::with_capacity(n * vocab);
        let mut total = T::zero();
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::OutOfVocab { id: t, vocab });
            }
            let lp = tensor::log_softmax_row(lv.row(r));
            probs.extend(lp.iter().map(|v| v.exp()));
            if t == pad {
                continue;
            }
            count += 1;
            let sum_lp: T = lp.iter().copied().sum();
            total += -(T::one() - eps) * lp[t] - eps / vt * sum_lp;
        }
        let loss = if count == 0 {
            log::warn!("label_smoothed_ce: batch contains only padding; loss defined as zero");
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        if loss.is_nan() {
            return Err(Error::NaN("loss".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps,
                pad,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let n_params = self.store.map_or(0, ParamStore::len);
        let mut params: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        for (&id, &v) in &self.bound {
            params[id.0] = grads[v.0].clone();
        }
        Ok(Gradients {
            params,
            vars: grads,
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    acc(*a, tensor::matmul(g, &bv.transpose()).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    tensor::gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    acc(*b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a·bᵀ ; da = g·b ; db = gᵀ·a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, tensor::matmul(g, bv).unwrap());
                }
                if self.rg(*b) {
                    let (m, n, k) = (g.rows(), g.cols(), av.cols());
                    let mut db = vec![T::zero(); n * k];
                    tensor::gemm_tn(g.data(), av.data(), &mut db, m, n, k);
                    acc(*b, Tensor::new(&[n, k], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                let c = g.cols();
                let mut db = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                acc(*bias, Tensor::new(&shape, db).unwrap());
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, g.map(|v| v * c));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, Tensor::new(g.shape(), data).unwrap());
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                let c = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape(), dx).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.cols();
                let nt = T::from_usize(c).unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dg[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                    }
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = rstd / nt * (nt * dxhat[j] - sum_d - xhat[j] * sum_dx);
                    }
                }
                let gshape = gv.shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                acc(*gain, Tensor::new(&gshape, dg).unwrap());
                acc(*bias, Tensor::new(&bshape, dbias).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
                drop,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dk = d / heads;
                let scale: T = cast(1.0 / (dk as f64).sqrt());
                let mut dq = vec![T::zero(); qv.len()];
                let mut dkm = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut visible = Vec::new();
                let mut dp = Vec::new();
                let mut cursor = 0;
                for b in 0..mask.batch {
                    for i in 0..mask.q_len {
                        mask.visible(b, i, &mut visible);
                        let r = b * mask.q_len + i;
                        let nv = visible.len();
                        for h in 0..*heads {
                            let off = h * dk;
                            let p = &probs[cursor..cursor + nv];
                            let m = drop.as_ref().map(|dm| &dm[cursor..cursor + nv]);
                            cursor += nv;
                            let gr = &g.data()[r * d + off..r * d + off + dk];
                            dp.clear();
                            for (t, &j) in visible.iter().enumerate() {
                                let mj = m.map_or(T::one(), |m| m[t]);
                                let vrow = &vv.data()[j * d + off..j * d + off + dk];
                                let s: T = gr.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                                dp.push(s * mj);
                                let w = p[t] * mj;
                                for (dvv, &gv) in
                                    dv[j * d + off..j * d + off + dk].iter_mut().zip(gr)
                                {
                                    *dvv += w * gv;
                                }
                            }
                            let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                            let qrow = &qv.data()[r * d + off..r * d + off + dk];
                            for (t, &j) in visible.iter().enumerate() {
                                let ds = p[t] * (dp[t] - dot) * scale;
                                let krow = &kv.data()[j * d + off..j * d + off + dk];
                                for (dqq, &kk) in
                                    dq[r * d + off..r * d + off + dk].iter_mut().zip(krow)
                                {
                                    *dqq += ds * kk;
                                }
                                for (dkk, &qq) in
                                    dkm[j * d + off..j * d + off + dk].iter_mut().zip(qrow)
                                {
                                    *dkk += ds * qq;
                                }
                            }
                        }
                    }
                }
                acc(*q, Tensor::new(qv.shape(), dq).unwrap());
                acc(*k, Tensor::new(kv.shape(), dkm).unwrap());
                acc(*v, Tensor::new(vv.shape(), dv).unwrap());
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                acc(*table, Tensor::new(tv.shape(), dt).unwrap());
            }
            Op::PrependRows { x, prefix, batch } => {
                let (xv, pv) = (self.value(*x), self.value(*prefix));
                let d = xv.cols();
                let n = xv.rows() / batch;
                let l = pv.rows();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dp = vec![T::zero(); pv.len()];
                for b in 0..*batch {
                    let base = b * (n + l) * d;
                    for (a, &v) in dp.iter_mut().zip(&g.data()[base..base + l * d]) {
                        *a += v;
                    }
                    dx.extend_from_slice(&g.data()[base + l * d..base + (l + n) * d]);
                }
                acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                acc(*prefix, Tensor::new(pv.shape(), dp).unwrap());
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(*x, Tensor::new(g.shape(), data).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::full(&shape, g.data()[0]));
            }
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                pad,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let mut dl = vec![T::zero(); lv.len()];
                if *count > 0 {
                    let scale = g.data()[0] / T::from_usize(*count).unwrap();
                    let uniform = *eps / T::from_usize(vocab).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for c in 0..vocab {
                            let q = if c == t {
                                T::one() - *eps + uniform
                            } else {
                                uniform
                            };
                            dl[r * vocab + c] = (probs[r * vocab + c] - q) * scale;
                        }
                    }
                }
                acc(*logits, Tensor::new(lv.shape(), dl).unwrap());
            }
        }
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    vars: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a stored parameter; `None` if it did not take part.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn global_norm(&self) -> f64 {
        self.params()
            .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: T) {
        for g in self.params.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(
            Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(),
            true,
        );
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.var(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn rebinding_a_param_returns_same_node() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", ParamRole::Weight, Tensor::zeros(&[2, 2]));
        let mut g = Graph::with_params(&store);
        assert_eq!(g.param(id), g.param(id));
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(&[1, 4]), true);
        let loss = g.label_smoothed_ce(l, &[2], 0.0, 0).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::from_f64(&[1, 3], &[0., 100., 0.]).unwrap(), true);
        let loss = g.label_smoothed_ce(l, &[1], 0.0, 0).unwrap();
        assert!(g.value(loss).data()[0] < 1e-40);
    }

    #[test]
    fn all_pad_batch_has_zero_loss_and_gradient() {
        let mut g = Graph::<f64>::new();
        let l = g.input(
            Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(),
            true,
        );
        let loss = g.label_smoothed_ce(l, &[0, 0], 0.1, 0).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.var(l).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_visibility() {
        let m = AttnMask {
            batch: 1,
            q_len: 3,
            k_len: 3,
            key_valid: None,
            causal: true,
        };
        let mut v = Vec::new();
        m.visible(0, 0, &mut v);
        assert_eq!(v, vec![0]);
        m.visible(0, 2, &mut v);
        assert_eq!(v, vec![0, 1, 2]);
    }
}
