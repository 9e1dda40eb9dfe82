use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape([usize; 4]),
    #[error("element buffer has {got} values but shape {shape:?} needs {expected}")]
    ElementCount {
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    OutOfBounds { index: [usize; 4], shape: [usize; 4] },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },
    #[error("channel mismatch in {op}: expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: window does not fit (in={input}, kernel={kernel}, stride={stride}, pad={pad})")]
    InvalidOutputSize {
        op: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 4]),
    #[error("graph was recorded without gradient tracking")]
    NoGradGraph,
    #[error("group normalization: {channels} channels not divisible by {groups} groups")]
    GroupDivisibility { channels: usize, groups: usize },
    #[error("batch normalization in eval mode requires populated running statistics")]
    MissingRunningStats,
    #[error("source {0} is not registered in the aggregation cache")]
    UnregisteredSource(usize),
    #[error("block {block} expects {expected} shortcut sources, got {got}")]
    SourceCount {
        block: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input of shape {got:?} does not match the network stem (expected {expected:?})")]
    InputShape { expected: [usize; 3], got: [usize; 4] },
    #[error("malformed dataset file {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint parameter `{name}` has shape {found:?}, network expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing entry `{0}`")]
    MissingEntry(String),
    #[error("network has {network} classes but the dataset has {dataset}")]
    ClassMismatch { network: usize, dataset: usize },
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
