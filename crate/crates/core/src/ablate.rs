//! Sweeps over sharing plans: cost columns for every entry, plus a trained
//! metric when training is enabled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptSpec;
use crate::config::ModelConfig;
use crate::cost::{cost_report, load_summary, FlopsShape};
use crate::decode::DecodeConfig;
use crate::error::Result;
use crate::plan::PlanSpec;
use crate::run::RunConfig;
use crate::train::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: String,
    pub plan: PlanSpec,
    /// Replaces the base model for this entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptSpec>,
}

/// Model width and vocabulary at which the cost columns are computed. The
/// trained model's layer counts are kept and FFN widths scale with `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportScale {
    pub model_dim: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub base: RunConfig,
    pub entries: Vec<SweepEntry>,
    /// Train every entry; when false only the cost columns are filled.
    #[serde(default)]
    pub train: bool,
    /// Training seeds; the metric is the median over them.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_scale: Option<ReportScale>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub name: String,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub loads: Option<String>,
    /// Median final token accuracy over the seeds.
    pub metric: Option<f64>,
    pub per_seed: Vec<f64>,
    pub error: Option<String>,
}

impl ReportScale {
    pub fn apply(&self, c: &ModelConfig) -> ModelConfig {
        let scale = |x: usize| (x * self.model_dim / c.model_dim).max(1);
        ModelConfig {
            model_dim: self.model_dim,
            heads: if self.model_dim % 8 == 0 { 8 } else { c.heads },
            enc_ffn_dim: scale(c.enc_ffn_dim),
            dec_ffn_dim: scale(c.dec_ffn_dim),
            vocab_size: self.vocab_size,
            ..c.clone()
        }
    }
}

impl Sweep {
    fn entry_config(&self, e: &SweepEntry, seed: u64) -> RunConfig {
        let mut c = self.base.clone();
        if let Some(m) = &e.model {
            c.model = m.clone();
        }
        c.plan = e.plan.clone();
        if let Some(a) = e.adapt {
            c.adapt = a;
        }
        c.seed = seed;
        c
    }

    /// Evaluates every entry. Invalid entries are reported in their row and
    /// do not stop the sweep.
    pub fn run(&self) -> Vec<SweepRow> {
        let costs: Vec<Result<(u64, u64, String)>> =
            self.entries.iter().map(|e| self.costs(e)).collect();
        let jobs: Vec<(usize, u64)> = if self.train {
            (0..self.entries.len())
                .filter(|&i| costs[i].is_ok())
                .flat_map(|i| self.seeds.iter().map(move |&s| (i, s)))
                .collect()
        } else {
            Vec::new()
        };
        let results: Vec<(usize, Result<f64>)> = jobs
            .par_iter()
            .map(|&(i, s)| (i, self.train_one(&self.entries[i], s)))
            .collect();

        self.entries
            .iter()
            .enumerate()
            .zip(costs)
            .map(|((i, e), cost)| {
                let mut row = SweepRow {
                    name: e.name.clone(),
                    params: None,
                    flops: None,
                    loads: None,
                    metric: None,
                    per_seed: Vec::new(),
                    error: None,
                };
                match cost {
                    Ok((p, f, l)) => {
                        row.params = Some(p);
                        row.flops = Some(f);
                        row.loads = Some(l);
                    }
                    Err(err) => row.error = Some(err.to_string()),
                }
                for (_, r) in results.iter().filter(|(j, _)| *j == i) {
                    match r {
                        Ok(m) => row.per_seed.push(*m),
                        Err(err) => row.error = Some(err.to_string()),
                    }
                }
                if row.error.is_none() && !row.per_seed.is_empty() {
                    row.metric = Some(median(&row.per_seed));
                }
                row
            })
            .collect()
    }

    fn costs(&self, e: &SweepEntry) -> Result<(u64, u64, String)> {
        let cfg = self.entry_config(e, self.base.seed);
        cfg.validate()?;
        let model = match &self.report_scale {
            Some(s) => s.apply(&cfg.model),
            None => cfg.model.clone(),
        };
        let plan = crate::plan::build_plan(&cfg.plan, &model)?;
        let shape = FlopsShape {
            vocab: model.vocab_size as u64,
            ..FlopsShape::default()
        };
        let r = cost_report(&model, &plan, &cfg.adapt, shape);
        Ok((r.params_headline(), r.flops, load_summary(&r.loads)))
    }

    fn train_one(&self, e: &SweepEntry, seed: u64) -> Result<f64> {
        let cfg = self.entry_config(e, seed);
        let model = cfg.build_model()?;
        let eval = cfg.eval_data()?;
        let mut t = Trainer::new(model, cfg.train_config(), cfg.train_data()?)?;
        let decode = DecodeConfig::greedy(cfg.model.max_len);
        Ok(t.run(&eval, &decode, &mut |_| {})?.token_accuracy)
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// FFN-group ablation around `base`: two, three and four balanced groups
/// with the FFN narrowed to 4/4, 3/4 and 2/4 of its width, then the two
/// maximally unbalanced two-group splits at full width.
pub fn ffn_load_entries(base: &ModelConfig) -> Vec<SweepEntry> {
    let m = base.encoder_layers;
    let balanced = |k: usize, quarters: usize| {
        let loads: Vec<String> = (0..k)
            .map(|g| (m / k + usize::from(g < m % k)).to_string())
            .collect();
        let model = ModelConfig {
            enc_ffn_dim: base.enc_ffn_dim * quarters / 4,
            ..base.clone()
        };
        SweepEntry {
            name: format!("{k} FFNs d_ffn={} ({})", model.enc_ffn_dim, loads.join("-")),
            plan: PlanSpec::Edgeformer {
                ffn_groups: Some(k),
                ffn_assignment: None,
            },
            model: Some(model),
            adapt: None,
        }
    };
    let split = |first: usize| SweepEntry {
        name: format!(
            "2 FFNs d_ffn={} ({}-{})",
            base.enc_ffn_dim,
            first,
            m - first
        ),
        plan: PlanSpec::Edgeformer {
            ffn_groups: None,
            ffn_assignment: Some((0..m).map(|i| usize::from(i >= first)).collect()),
        },
        model: Some(base.clone()),
        adapt: None,
    };
    vec![
        balanced(2, 4),
        balanced(3, 3),
        balanced(4, 2),
        split(1),
        split(m - 1),
    ]
}

/// Shared-encoder versus shared-decoder at `n+n` layers.
pub fn sharing_entries(n: usize, d: usize) -> Vec<SweepEntry> {
    let model = ModelConfig {
        vocab_size: 16,
        max_len: 32,
        heads: 4,
        ..ModelConfig::vanilla(n, n, d)
    };
    [
        ("shared encoder", PlanSpec::SharedEncoder),
        ("shared decoder", PlanSpec::SharedDecoder),
    ]
    .into_iter()
    .map(|(name, plan)| SweepEntry {
        name: format!("{name} {n}+{n}"),
        plan,
        model: Some(model.clone()),
        adapt: None,
    })
    .collect()
}

pub fn render_table(rows: &[SweepRow]) -> String {
    let head = ["config", "params", "flops", "loads", "metric"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            let num = |v: Option<u64>| {
                v.map(crate::cost::group_digits)
                    .unwrap_or_else(|| "-".into())
            };
            [
                r.name.clone(),
                num(r.params),
                num(r.flops),
                r.loads.clone().unwrap_or_else(|| "-".into()),
                match (&r.error, r.metric) {
                    (Some(e), _) => format!("INVALID: {e}"),
                    (None, Some(m)) => format!("{m:.4}"),
                    (None, None) => "-".into(),
                },
            ]
        })
        .collect();
    let mut width = head.map(str::len);
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |c: &[String]| {
        let mut s = String::new();
        for (k, (cell, w)) in c.iter().zip(width).enumerate() {
            let pad = w - cell.chars().count();
            if k == 0 || k >= 3 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
            s.push_str("  ");
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&head.map(String::from));
    for c in &cells {
        out.push_str(&line(c));
    }
    out
}
