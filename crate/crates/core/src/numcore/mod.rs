//! Numerical substrate: dense tensors, a reverse-mode tape, special
//! functions, initialization and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod rng;
pub mod sparse;
pub mod special;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, relative_error, tape_gradient_error};
pub use init::xavier_uniform;
pub use sparse::{block_ranges, CsrMatrix};
pub use special::{digamma, ln_beta, ln_gamma, trigamma, EULER_GAMMA};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
