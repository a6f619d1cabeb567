use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("span ({start}, {end}) out of range for {rows} rows")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        rows: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutProbability(f64),
    #[error("non-finite gradient for parameter `{name}` at element {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
