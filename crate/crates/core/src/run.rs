//! Run configuration: one JSON document describing a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptSpec;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{AdaptState, Model};
use crate::plan::{build_plan, PlanSpec, SharingPlan};
use crate::train::{read_dataset, Data, Example, Task, TaskSpec, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Training pairs (`src TAB tgt`); when absent, batches come from `task`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_data: Option<PathBuf>,
    /// Evaluation pairs; when absent, the task's held-out examples are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: PlanSpec,
    #[serde(default)]
    pub adapt: AdaptSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// The mini model on a synthetic task.
    pub fn toy(task: TaskSpec, seed: u64) -> Self {
        Self {
            version: SCHEMA_VERSION,
            model: ModelConfig::mini(),
            plan: PlanSpec::edgeformer(),
            adapt: AdaptSpec::default(),
            train: TrainConfig::toy(),
            task: Some(task),
            paths: Paths::default(),
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section and their consistency without building weights.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        build_plan(&self.plan, &self.model)?;
        if let Some(r) = self.adapt.lora_rank {
            if r == 0 || r >= self.model.model_dim {
                return Err(Error::Adaptation(format!(
                    "lora rank must satisfy 0 < r < d (r={r}, d={})",
                    self.model.model_dim
                )));
            }
        }
        self.train.validate()?;
        if let Some(t) = &self.task {
            self.make_task(t)?;
        } else if self.paths.train_data.is_none() {
            return Err(Error::Config(
                "config needs a `task` or `paths.train_data`".into(),
            ));
        }
        Ok(())
    }

    pub fn sharing_plan(&self) -> Result<SharingPlan> {
        build_plan(&self.plan, &self.model)
    }

    /// Identifies the trained artifact: architecture, resolved sharing plan
    /// and adaptation. Training and path settings do not enter it.
    pub fn digest(&self) -> Result<String> {
        let adapt = AdaptState {
            bias: self.adapt.bias,
            lora_rank: self.adapt.lora_rank,
            prompt_len: self.adapt.prompt_len,
        };
        Ok(model_digest(&self.model, &self.sharing_plan()?, &adapt))
    }

    /// Freshly initialized model with the configured adaptation applied.
    pub fn build_model(&self) -> Result<Model<f32>> {
        let mut m = Model::new(self.model.clone(), self.sharing_plan()?, self.seed)?;
        m.apply(&self.adapt, self.seed ^ 0xada9_7a7e)?;
        Ok(m)
    }

    fn make_task(&self, spec: &TaskSpec) -> Result<Task> {
        Task::new(
            spec.clone(),
            self.model.vocab_size,
            self.model.max_len,
            self.seed,
        )
    }

    pub fn task(&self) -> Result<Option<Task>> {
        self.task.as_ref().map(|t| self.make_task(t)).transpose()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn train_data(&self) -> Result<Data> {
        match &self.paths.train_data {
            Some(p) => Ok(Data::Fixed(read_dataset(p, self.model.vocab_size)?)),
            None => Ok(Data::Task(self.task()?.expect("validated"))),
        }
    }

    pub fn eval_data(&self) -> Result<Vec<Example>> {
        if let Some(p) = &self.paths.eval_data {
            return read_dataset(p, self.model.vocab_size);
        }
        match self.task()? {
            Some(t) => Ok(t.eval_set(self.train.eval_examples)),
            None => Err(Error::Config(
                "no evaluation data: set `task` or `paths.eval_data`".into(),
            )),
        }
    }
}

pub fn model_digest(config: &ModelConfig, plan: &SharingPlan, adapt: &AdaptState) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(b"\n");
    h.update(plan.to_text());
    h.update(b"\n");
    h.update(serde_json::to_vec(adapt).expect("adapt serializes"));
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TaskKind;

    fn toy() -> RunConfig {
        RunConfig::toy(TaskSpec::new(TaskKind::Copy, 1, 12), 3)
    }

    #[test]
    fn json_round_trip() {
        let c = toy();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&toy().to_json()).unwrap();
        v["train"]["lr_peak"] = 1.0.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&toy().to_json()).unwrap();
        v["extra"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn validation_covers_every_section() {
        let mut c = toy();
        c.version = 2;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.adapt.lora_rank = Some(32);
        assert!(c.validate().unwrap_err().is_config_error());
        let mut c = toy();
        c.task = Some(TaskSpec::new(TaskKind::Copy, 1, 40));
        assert!(c.validate().is_err());
        let mut c = toy();
        c.plan = PlanSpec::Edgeformer {
            ffn_groups: None,
            ffn_assignment: Some(vec![0, 1]),
        };
        assert!(c.validate().is_err());
        let mut c = toy();
        c.task = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_tracks_the_model_only() {
        let a = toy();
        let mut b = toy();
        b.train.lr = 0.5;
        b.seed = 99;
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = toy();
        c.adapt.bias = true;
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        let mut d = toy();
        d.plan = PlanSpec::Universal;
        assert_ne!(a.digest().unwrap(), d.digest().unwrap());
    }
}
