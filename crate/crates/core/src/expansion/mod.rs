//! Zero-initialised expansion operators in weight space.
//!
//! An operator adds a learned transform of the advantageous slice of a
//! weight matrix onto its disadvantageous slice:
//! `W[:, N] <- W[:, P] * M + W[:, N]` for column-oriented targets
//! (`W_V`, `W_U`, `W_G`) and `W[N, :] <- M * W[P, :] + W[N, :]` for
//! row-oriented ones (`W_O`, `W_D`). `M` starts at zero, so attaching an
//! operator never changes the model's function; fusing it writes the
//! expanded slice back and drops the operator.

mod monarch;
mod operator;

pub use monarch::{MonarchMatrix, MonarchRepr};
pub use operator::{
    attach_operators, component_span, expanded_weight, fuse_operator, ExpansionOperator, OperatorBundle, OperatorTarget,
    Orientation,
};
