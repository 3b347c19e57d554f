//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tensor is not attached to a tape")]
    DetachedTensor,

    #[error("tensor belongs to a different tape")]
    ForeignTape,

    #[error("numeric fault: {context}")]
    NumericFault { context: String },

    #[error("reparameterized sampling is not supported for {dist}")]
    UnsupportedReparameterization { dist: &'static str },

    #[error("invalid parameter: {what}")]
    InvalidParameter { what: String },

    #[error("layer {layer} expects input width {expected}, got shape {got:?}")]
    LayerWidth {
        layer: usize,
        expected: usize,
        got: Vec<usize>,
    },

    #[error("duplicate random variable name `{name}`")]
    DuplicateVariable { name: String },

    #[error("observation bound to unknown random variable `{name}`")]
    UnknownObservation { name: String },

    #[error("observation for `{name}` has shape {got:?}, expected {expected:?}")]
    ObservationShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("in-plate variable `{name}` has leading axis {got}, expected plate size {expected}")]
    PlateAxis {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("conflicting plate sizes among observed in-plate variables: {a} vs {b}")]
    PlateConflict { a: usize, b: usize },

    #[error("no observed in-plate variable; pass the plate size explicitly")]
    PlateUndetermined,

    #[error("a model may declare at most one datamodel block")]
    MultiplePlates,

    #[error("global variable `{name}` declared after the datamodel block")]
    GlobalAfterPlate { name: String },

    #[error("q-model variable `{name}` has no counterpart in the p-model")]
    UnmatchedVariable { name: String },

    #[error("latent `{name}` is neither observed nor covered by a q factor")]
    UncoveredLatent { name: String },

    #[error("unknown variable `{name}`")]
    UnknownVariable { name: String },

    #[error("unknown parameter `{name}`")]
    UnknownParameter { name: String },

    #[error("parameter `{name}` registered twice")]
    DuplicateParameter { name: String },

    #[error("cannot re-initialize parameters after training has begun")]
    InitAfterTraining,

    #[error("dataset is empty")]
    EmptyData,

    #[error("missing data for `{name}`: {hint}")]
    MissingData { name: String, hint: String },
}
