pub mod ablate;
pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod decode;
pub mod error;
pub mod model;
pub mod plan;
pub mod run;
pub mod tensor;
pub mod train;

pub use adapt::{AdaptSpec, LoraBlock};
pub use autodiff::{AttnMask, Gradients, Graph, ParamId, ParamRole, ParamStore, Var};
pub use config::{DecoderStyle, ModelConfig, Specials};
pub use cost::{budget_check, cost_report, count_params, estimate_flops, CostReport, FlopsShape};
pub use decode::{beam_search, decode, greedy, DecodeConfig, DecodePath, Hypothesis};
pub use error::{Error, Result};
pub use model::{AdaptState, Encoded, Model};
pub use plan::{build_plan, GroupKind, PlanSpec, PlanViolation, SharingPlan, Slot, SlotRole};
pub use run::RunConfig;
pub use tensor::{Real, Tensor};
pub use train::{
    evaluate, seq_kd, Data, Example, Metrics, Task, TaskKind, TaskSpec, TrainConfig, Trainer,
};
