//! Differentiable-operator core: tensors, an eager reverse-mode tape, the
//! Adam optimizer, sinusoidal encodings, checkpoint IO, and a
//! finite-difference harness that audits every kernel's backward pass.

pub mod checkpoint;
pub mod encoding;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use encoding::{sinusoidal_encoding, timestep_encoding};
pub use gradcheck::{finite_diff_check, run_kernel_suite, KernelCheck};
pub use params::{AdamConfig, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
