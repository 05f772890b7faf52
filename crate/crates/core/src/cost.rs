//! Parameter and FLOPS accounting.
//!
//! Parameter counts exclude the (tied) embedding table. The headline count
//! covers attention and FFN weight matrices, each group counted once, plus
//! any LoRA or prompt parameters; biases and layer norms only enter
//! `params_total`.
//!
//! FLOPS count one multiply-accumulate as one operation. A projection run
//! over `n` tokens costs its weight count times `n`, every attention module
//! adds `2·n_q·n_k·d` for scores and mixing, shared groups are charged per
//! execution, and the output projection adds `tgt·d·V`. Norms, softmax and
//! embedding lookups are free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptSpec;
use crate::config::{DecoderStyle, ModelConfig};
use crate::plan::{GroupKind, PartKind, SharingPlan};

pub const PARAM_BUDGET: u64 = 10_000_000;
pub const FLOPS_BUDGET: u64 = 2_000_000_000;

/// Sequence lengths and vocabulary at which FLOPS are estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsShape {
    pub src_len: u64,
    pub tgt_len: u64,
    pub vocab: u64,
}

impl Default for FlopsShape {
    fn default() -> Self {
        Self {
            src_len: 30,
            tgt_len: 30,
            vocab: 32_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    /// `enc[i]` or `dec[j]`
    pub name: String,
    /// Weight-matrix parameters of this layer, as if it owned them.
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    /// Attention and FFN weight matrices, each group counted once.
    pub params_formula: u64,
    pub params_lora: u64,
    pub params_prompt: u64,
    /// Everything except the embedding table: weights, biases, layer norms,
    /// and adaptation parameters.
    pub params_total: u64,
    pub params_embedding: u64,
    pub shape: FlopsShape,
    pub flops: u64,
    pub output_flops: u64,
    pub layers: Vec<LayerCost>,
    /// Group name and executions per forward pass.
    pub loads: Vec<(String, usize)>,
}

impl CostReport {
    /// Formula count plus adaptation weights; what the parameter budget is
    /// checked against.
    pub fn params_headline(&self) -> u64 {
        self.params_formula + self.params_lora + self.params_prompt
    }
}

/// Weight-matrix count of one group.
pub fn group_weights(kind: GroupKind, d: usize) -> u64 {
    kind.parts()
        .iter()
        .map(|(_, p)| p.weight_count(d) as u64)
        .sum()
}

/// Weights, biases and layer-norm vectors of one group.
pub fn group_total(kind: GroupKind, d: usize) -> u64 {
    kind.parts()
        .iter()
        .map(|(_, p)| {
            let extra = match p {
                PartKind::Attention => 4 * d + 2 * d,
                PartKind::Ffn { dim } | PartKind::LightFfn { dim } => dim + d + 2 * d,
            };
            (p.weight_count(d) + extra) as u64
        })
        .sum()
}

/// Per-layer weight-matrix counts for the three layer types.
pub fn encoder_layer_params(c: &ModelConfig) -> u64 {
    let d = c.model_dim as u64;
    4 * d * d + 2 * d * c.enc_ffn_dim as u64
}

pub fn decoder_layer_params(c: &ModelConfig) -> u64 {
    let d = c.model_dim as u64;
    // both light FFN sites of an interleaved layer read one group
    8 * d * d + 2 * d * c.dec_ffn_dim as u64
}

/// Parameter side of the report.
pub fn count_params(config: &ModelConfig, plan: &SharingPlan, adapt: &AdaptSpec) -> CostReport {
    let d = config.model_dim as u64;
    let m = config.encoder_layers as u64;
    let params_formula = plan
        .groups
        .iter()
        .map(|g| group_weights(g.kind, config.model_dim))
        .sum();
    let params_lora = adapt.lora_rank.map_or(0, |r| m * 2 * 2 * d * r as u64);
    let params_prompt = adapt.prompt_len.map_or(0, |l| m * l as u64 * d);
    let bias_la = if adapt.bias {
        // q, k, v, o biases and the attention norm shift; b1, b2 and the FFN norm shift
        m * (4 * d + d + config.enc_ffn_dim as u64 + d + d)
    } else {
        0
    };
    let groups_total: u64 = plan
        .groups
        .iter()
        .map(|g| group_total(g.kind, config.model_dim))
        .sum();
    let final_norms = 2 * 2 * d;
    CostReport {
        params_formula,
        params_lora,
        params_prompt,
        params_total: groups_total + final_norms + bias_la + params_lora + params_prompt,
        params_embedding: config.vocab_size as u64 * d,
        shape: FlopsShape::default(),
        flops: 0,
        output_flops: 0,
        layers: Vec::new(),
        loads: plan.load_report(),
    }
}

/// FLOPS of one encoder layer over `n` source tokens.
pub fn encoder_layer_flops(c: &ModelConfig, adapt: &AdaptSpec, n: u64) -> u64 {
    let d = c.model_dim as u64;
    let l = adapt.prompt_len.unwrap_or(0) as u64;
    let kv = n + l;
    let mut f = d * d * n * 2 + d * d * kv * 2 + 2 * n * kv * d;
    if let Some(r) = adapt.lora_rank {
        let r = r as u64;
        // query adapter over n rows, value adapter over n + L rows
        f += 2 * d * r * n + 2 * d * r * kv;
    }
    f + 2 * d * c.enc_ffn_dim as u64 * n
}

/// FLOPS of one decoder layer over `m` target and `n` source tokens.
pub fn decoder_layer_flops(c: &ModelConfig, m: u64, n: u64) -> u64 {
    let d = c.model_dim as u64;
    let self_attn = 4 * d * d * m + 2 * m * m * d;
    let cross = 2 * d * d * m + 2 * d * d * n + 2 * m * n * d;
    let ffn_runs = match c.decoder_style {
        DecoderStyle::Vanilla => 1,
        DecoderStyle::Interleaved => 2,
    };
    self_attn + cross + ffn_runs * 2 * d * c.dec_ffn_dim as u64 * m
}

/// Full report: parameters, FLOPS at `shape`, per-layer breakdown, loads.
pub fn cost_report(
    config: &ModelConfig,
    plan: &SharingPlan,
    adapt: &AdaptSpec,
    shape: FlopsShape,
) -> CostReport {
    let mut r = count_params(config, plan, adapt);
    let (n, m) = (shape.src_len, shape.tgt_len);
    let mut layers = Vec::new();
    let mut enc_params = encoder_layer_params(config);
    if let Some(rank) = adapt.lora_rank {
        enc_params += 4 * config.model_dim as u64 * rank as u64;
    }
    if let Some(l) = adapt.prompt_len {
        enc_params += (l * config.model_dim) as u64;
    }
    for i in 1..=config.encoder_layers {
        layers.push(LayerCost {
            name: format!("enc[{i}]"),
            params: enc_params,
            flops: encoder_layer_flops(config, adapt, n),
        });
    }
    for j in 1..=config.decoder_layers {
        layers.push(LayerCost {
            name: format!("dec[{j}]"),
            params: decoder_layer_params(config),
            flops: decoder_layer_flops(config, m, n),
        });
    }
    r.output_flops = m * config.model_dim as u64 * shape.vocab;
    r.flops = layers.iter().map(|l| l.flops).sum::<u64>() + r.output_flops;
    r.layers = layers;
    r.shape = shape;
    r
}

/// FLOPS alone; independent of the sharing plan.
pub fn estimate_flops(config: &ModelConfig, adapt: &AdaptSpec, shape: FlopsShape) -> u64 {
    let (n, m) = (shape.src_len, shape.tgt_len);
    config.encoder_layers as u64 * encoder_layer_flops(config, adapt, n)
        + config.decoder_layers as u64 * decoder_layer_flops(config, m, n)
        + m * config.model_dim as u64 * shape.vocab
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BudgetVerdict {
    pub reasons: Vec<String>,
}

impl BudgetVerdict {
    pub fn pass(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Checks the 10M-parameter / 2G-FLOPS on-device budget.
pub fn budget_check(report: &CostReport) -> BudgetVerdict {
    let mut reasons = Vec::new();
    let p = report.params_headline();
    if p > PARAM_BUDGET {
        reasons.push(format!("params {p} exceed {PARAM_BUDGET}"));
    }
    if report.flops > FLOPS_BUDGET {
        reasons.push(format!("flops {} exceed {FLOPS_BUDGET}", report.flops));
    }
    BudgetVerdict { reasons }
}

/// Collapses numbered groups with equal loads: `attn1..attn4` at 4 uses
/// each renders as `attn:4×4`.
pub fn load_summary(loads: &[(String, usize)]) -> String {
    let mut stems: Vec<(&str, Vec<(&str, usize)>)> = Vec::new();
    for (name, uses) in loads {
        let stem = name.trim_end_matches(|c: char| c.is_ascii_digit());
        let key = if stem.is_empty() { name.as_str() } else { stem };
        match stems.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push((name, *uses)),
            None => stems.push((key, vec![(name, *uses)])),
        }
    }
    let mut parts = Vec::new();
    for (key, members) in stems {
        let u = members[0].1;
        if members.len() > 1 && members.iter().all(|m| m.1 == u) {
            parts.push(format!("{key}:{u}×{}", members.len()));
        } else {
            parts.extend(members.iter().map(|(n, u)| format!("{n}:{u}")));
        }
    }
    format!("{{{}}}", parts.join(", "))
}

/// Thousands separators for display.
pub fn group_digits(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl CostReport {
    /// Human-readable aligned table.
    pub fn render_table(&self) -> String {
        let verdict = budget_check(self);
        let mut s = String::new();
        let rows = [
            ("params (formula)", group_digits(self.params_formula)),
            ("params (lora)", group_digits(self.params_lora)),
            ("params (prompt)", group_digits(self.params_prompt)),
            ("params (headline)", group_digits(self.params_headline())),
            ("params (total)", group_digits(self.params_total)),
            ("params (embedding)", group_digits(self.params_embedding)),
            (
                "flops",
                format!(
                    "{} (src={}, tgt={}, vocab={})",
                    group_digits(self.flops),
                    self.shape.src_len,
                    self.shape.tgt_len,
                    self.shape.vocab
                ),
            ),
            ("load", load_summary(&self.loads)),
            (
                "budget",
                if verdict.pass() {
                    "PASS".to_string()
                } else {
                    format!("FAIL ({})", verdict.reasons.join("; "))
                },
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<20} {v}");
        }
        let _ = writeln!(s, "\n{:<8} {:>14} {:>16}", "layer", "params", "flops");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<8} {:>14} {:>16}",
                l.name,
                group_digits(l.params),
                group_digits(l.flops)
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:>14} {:>16}",
            "output",
            "-",
            group_digits(self.output_flops)
        );
        s
    }

    /// One `key=value` per line.
    pub fn render_kv(&self) -> String {
        let verdict = budget_check(self);
        let mut s = String::new();
        let _ = writeln!(s, "params_formula={}", self.params_formula);
        let _ = writeln!(s, "params_lora={}", self.params_lora);
        let _ = writeln!(s, "params_prompt={}", self.params_prompt);
        let _ = writeln!(s, "params_headline={}", self.params_headline());
        let _ = writeln!(s, "params_total={}", self.params_total);
        let _ = writeln!(s, "params_embedding={}", self.params_embedding);
        let _ = writeln!(s, "src_len={}", self.shape.src_len);
        let _ = writeln!(s, "tgt_len={}", self.shape.tgt_len);
        let _ = writeln!(s, "vocab={}", self.shape.vocab);
        let _ = writeln!(s, "flops={}", self.flops);
        for l in &self.layers {
            let _ = writeln!(s, "layer.{}.params={}", l.name, l.params);
            let _ = writeln!(s, "layer.{}.flops={}", l.name, l.flops);
        }
        for (g, u) in &self.loads {
            let _ = writeln!(s, "load.{g}={u}");
        }
        let _ = writeln!(s, "budget={}", if verdict.pass() { "pass" } else { "fail" });
        s
    }
}
