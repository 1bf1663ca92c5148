use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: rank of {shape:?} exceeds the supported maximum of 3")]
    RankTooHigh { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: range {start}..{end} out of bounds for extent {extent}")]
    InvalidRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward requires a rank-0 loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("clamp: lower bound {lo} exceeds upper bound {hi}")]
    InvalidBounds { lo: f64, hi: f64 },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
