//! Dense tensors, the splitmix64 generator, and central-difference gradient checks.

mod finite_diff;
mod rng;
mod tensor;

pub use finite_diff::{finite_difference_entries, finite_difference_gradient, relative_error};
pub use rng::Rng;
pub use tensor::{gemm, gemm_into, Tensor, Transpose};
pub(crate) use tensor::gemm_slices;
