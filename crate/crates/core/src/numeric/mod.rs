//! Dense tensor kernels, the reverse-mode tape, parameter storage, the
//! optimizer, and the finite-difference gradient gate.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_gradcheck, GradcheckOptions, GradcheckReport};
pub use optim::{adamw_step, AdamWParams, OptimState};
pub use params::{LeafMap, ParamStore};
pub use rng::{derive_seed, DetRng};
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
