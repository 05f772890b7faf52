#![allow(dead_code)]

use edgeformer::plan::{required_part, slots, PartKind};
use edgeformer::train::{Task, TaskKind, TaskSpec};
use edgeformer::{
    AdaptSpec, DecoderStyle, Graph, Model, ModelConfig, ParamId, PlanSpec, SharingPlan,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Pairs = Vec<(Vec<usize>, Vec<usize>)>;

pub fn mini64(seed: u64) -> Model<f64> {
    Model::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), seed).unwrap()
}

/// A small batch of reverse-task pairs of mixed lengths, so padding and
/// masking take part.
pub fn batch(seed: u64, n: usize) -> Pairs {
    let c = ModelConfig::mini();
    Task::new(
        TaskSpec::new(TaskKind::Reverse, 1, 7),
        c.vocab_size,
        c.max_len,
        seed,
    )
    .unwrap()
    .examples(0, n)
    .iter()
    .map(|e| e.pair())
    .collect()
}

pub fn loss(model: &Model<f64>, pairs: &Pairs, smoothing: f64) -> f64 {
    let mut g = Graph::with_params(model.store());
    let l = model.loss_graph(&mut g, pairs, smoothing).unwrap();
    g.value(l).data()[0]
}

pub fn gradients(model: &Model<f64>, pairs: &Pairs, smoothing: f64) -> Vec<Option<Vec<f64>>> {
    let mut g = Graph::with_params(model.store());
    let l = model.loss_graph(&mut g, pairs, smoothing).unwrap();
    let grads = g.backward(l).unwrap();
    model
        .store()
        .ids()
        .map(|id| grads.param(id).map(|t| t.data().to_vec()))
        .collect()
}

/// Central finite differences on up to `per_tensor` entries of every
/// parameter tensor (evenly spread, plus the largest analytic entry).
/// Returns `(name, relative error, analytic norm)` per tensor.
pub fn finite_difference_check(
    model: &mut Model<f64>,
    pairs: &Pairs,
    smoothing: f64,
    per_tensor: usize,
) -> Vec<(String, f64, f64)> {
    let h = 1e-5;
    let analytic = gradients(model, pairs, smoothing);
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut out = Vec::new();
    for (k, id) in ids.into_iter().enumerate() {
        let len = model.store().value(id).len();
        let an = analytic[k].clone().unwrap_or_else(|| vec![0.0; len]);
        let mut idx: Vec<usize> = (0..per_tensor.min(len))
            .map(|j| j * len / per_tensor.min(len))
            .collect();
        let top = (0..len)
            .max_by(|&a, &b| an[a].abs().total_cmp(&an[b].abs()))
            .unwrap();
        if !idx.contains(&top) {
            idx.push(top);
        }
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for i in idx {
            let orig = model.store().value(id).data()[i];
            model.store_mut().value_mut(id).data_mut()[i] = orig + h;
            let up = loss(model, pairs, smoothing);
            model.store_mut().value_mut(id).data_mut()[i] = orig - h;
            let down = loss(model, pairs, smoothing);
            model.store_mut().value_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - an[i]).powi(2);
            na += an[i] * an[i];
            nf += fd * fd;
        }
        let scale = na.sqrt().max(nf.sqrt());
        let rel = if scale < 1e-9 {
            diff.sqrt()
        } else {
            diff.sqrt() / scale
        };
        out.push((model.store().get(id).name.clone(), rel, na.sqrt()));
    }
    out
}

/// Plan giving every slot of `config` its own group.
pub fn untied_plan(config: &ModelConfig) -> SharingPlan {
    let mut text = String::new();
    for (k, slot) in slots(config).into_iter().enumerate() {
        let kind = match required_part(slot, config) {
            PartKind::Attention => "attention".to_string(),
            PartKind::Ffn { dim } => format!("ffn {dim}"),
            PartKind::LightFfn { dim } => format!("light-ffn {dim}"),
        };
        text.push_str(&format!("group s{k} {kind}\nbind {slot} s{k}\n"));
    }
    SharingPlan::from_text(&text).unwrap()
}

/// Copies of `shared` with every slot untied. Returns the copy and, for
/// each parameter of `shared` (store order), the copy's parameters that
/// replicate it.
pub fn untie(shared: &Model<f64>) -> (Model<f64>, Vec<Vec<ParamId>>) {
    let config = shared.config().clone();
    let mut copy = Model::<f64>::new(config.clone(), untied_plan(&config), 0).unwrap();
    let mut map: Vec<Vec<ParamId>> = vec![Vec::new(); shared.store().len()];
    for slot in slots(&config) {
        let a = shared.slot_params(slot).unwrap().ids();
        let b = copy.slot_params(slot).unwrap().ids();
        for (x, y) in a.into_iter().zip(b) {
            *copy.store_mut().value_mut(y) = shared.store().value(x).clone();
            if !map[x.index()].contains(&y) {
                map[x.index()].push(y);
            }
        }
    }
    for (id, p) in shared.store().iter() {
        if map[id.index()].is_empty() {
            let y = copy
                .store()
                .find(&p.name)
                .unwrap_or_else(|| panic!("{} has no counterpart", p.name));
            *copy.store_mut().value_mut(y) = p.value.clone();
            map[id.index()].push(y);
        }
    }
    (copy, map)
}

/// Largest relative deviation between each shared gradient and the sum of
/// its copies' gradients.
pub fn two_copy_deviation(shared: &Model<f64>, pairs: &Pairs) -> f64 {
    let (copy, map) = untie(shared);
    assert_eq!(loss(shared, pairs, 0.1), loss(&copy, pairs, 0.1));
    let gs = gradients(shared, pairs, 0.1);
    let gc = gradients(&copy, pairs, 0.1);
    let mut worst: f64 = 0.0;
    for (k, copies) in map.iter().enumerate() {
        let g = gs[k].as_ref().expect("every parameter gets a gradient");
        let mut sum = vec![0.0; g.len()];
        for y in copies {
            for (s, v) in sum.iter_mut().zip(gc[y.index()].as_ref().unwrap()) {
                *s += v;
            }
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let diff = g
            .iter()
            .zip(&sum)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / norm);
    }
    worst
}

pub fn random_model(seed: u64) -> Model<f32> {
    let plans = [PlanSpec::edgeformer(), PlanSpec::Full, PlanSpec::Universal];
    let mut m = Model::build(&ModelConfig::mini(), &plans[seed as usize % 3], seed).unwrap();
    if seed % 4 == 1 {
        m.apply(
            &AdaptSpec {
                bias: true,
                lora_rank: None,
                prompt_len: Some(3),
            },
            seed,
        )
        .unwrap();
    }
    m
}

pub fn random_source(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(0..10);
    let mut s: Vec<usize> = (0..len).map(|_| rng.random_range(1..14)).collect();
    s.push(15);
    s
}

/// Three emittable symbols: ids 1 and 2 plus EOS (vocab 5 also holds PAD
/// and BOS, which are never emitted).
pub fn toy(seed: u64) -> Model<f64> {
    let c = ModelConfig {
        encoder_layers: 2,
        decoder_layers: 1,
        model_dim: 8,
        heads: 2,
        enc_ffn_dim: 16,
        dec_ffn_dim: 2,
        vocab_size: 5,
        max_len: 8,
        decoder_style: DecoderStyle::Interleaved,
    };
    let mut m = Model::build(&c, &PlanSpec::edgeformer(), seed).unwrap();
    // sharpen the distributions so rankings are far from ties
    let emb = m.embedding();
    for v in m.store_mut().value_mut(emb).data_mut() {
        *v *= 6.0;
    }
    m
}

pub fn enumerate(prefix: &mut Vec<usize>, max_len: usize, eos: usize, out: &mut Vec<Vec<usize>>) {
    for t in [1, 2, eos] {
        prefix.push(t);
        if t == eos || prefix.len() == max_len {
            out.push(prefix.clone());
        } else {
            enumerate(prefix, max_len, eos, out);
        }
        prefix.pop();
    }
}
