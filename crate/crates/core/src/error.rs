use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("NaN encountered in {0}")]
    NaN(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid sharing plan: {}", format_violations(.0))]
    Plan(Vec<crate::plan::PlanViolation>),

    #[error("plan syntax error on line {line}: {msg}")]
    PlanSyntax { line: usize, msg: String },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("layer adaptation: {0}")]
    Adaptation(String),

    #[error("line {line}: {msg}")]
    Input { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[crate::plan::PlanViolation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Plan(_)
                | Error::PlanSyntax { .. }
                | Error::Json(_)
                | Error::Adaptation(_)
        )
    }
}
