use thiserror::Error;

use crate::objective::KernelKind;

pub type Result<T, E = CveError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CveError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame spans the whole space, its orthogonal complement is empty")]
    EmptyComplement,

    /// Every kernel value of a slice underflowed; the bandwidth is far too small.
    #[error("degenerate slice{}: all kernel weights vanish, increase the bandwidth", shift_suffix(.shift))]
    DegenerateSlice { shift: Option<usize> },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("analytic gradients require the gaussian kernel, got {0:?}")]
    UnsupportedKernel(KernelKind),

    #[error("fit for reduction dimension {dim} failed: {source}")]
    DimensionFit {
        dim: usize,
        #[source]
        source: Box<CveError>,
    },
}

fn shift_suffix(shift: &Option<usize>) -> String {
    match shift {
        Some(i) => format!(" at shift point {i}"),
        None => String::new(),
    }
}
