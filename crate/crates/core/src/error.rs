use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("correspondence error: {0}")]
    Correspondence(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("simulation blew up at vertex {vertex} (substep {substep})")]
    SimulationBlowup { vertex: usize, substep: usize },

    #[error("rollout failed at action step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("observation is empty: no surface point visible from any camera")]
    EmptyObservation,

    #[error("sampling produced a non-finite value at diffusion step {step}")]
    Sampling { step: usize },

    #[error("planning failed on sample {sample}: {source}")]
    Planning {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SimulationBlowup { .. }
            | Error::Sampling { .. }
            | Error::NonFiniteLoss { .. } => true,
            Error::Rollout { source, .. } | Error::Planning { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
