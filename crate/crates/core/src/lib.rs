//! Block-State Transformer layers built from scratch: a small reverse-mode
//! tensor engine, radix-2 FFT convolution, diagonal and explicitly
//! parameterised state space kernels, context-state collection, block
//! attention, full layer stacks and synthetic long-range tasks.

pub mod attention;
pub mod context;
pub mod error;
pub mod fft;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod ssm;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{BstError, Result};
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
