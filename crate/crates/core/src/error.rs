use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("loss is not a scalar: shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (triplet={triplet}, projection={projection}, reconstruction={reconstruction})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        triplet: f64,
        projection: f64,
        reconstruction: f64,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("TOML encode error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
