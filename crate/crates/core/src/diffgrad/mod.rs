//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] walks the nodes in reverse recording order and
//! accumulates vector-Jacobian products into a [`GradientMap`]. Nodes that
//! cannot reach a leaf (constants, `stop_grad` outputs and everything built
//! only from them) are skipped.
//!
//! Binary elementwise ops broadcast an operand that is a single element or
//! whose shape is a trailing suffix of the other (a bias row over a batch).

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_tape, relative_error, relative_error_with_floor, resolution_floor,
    GradCheckReport, DEFAULT_STEP, DEFAULT_TOL,
};
pub use tape::{GradientMap, OpKind, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{dot_slices, matmul_raw};
