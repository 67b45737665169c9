//! Kernel gradient flows: Stein variational gradient descent, black-box
//! variational inference, and the neural-tangent-kernel construction that
//! renders them two views of the same particle dynamics.

pub mod bbvi;
pub mod error;
pub mod flows;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod quadrature;
pub mod rng;
pub mod svgd;
pub mod targets;

pub use error::{FlowError, Result};

/// The crate version, for embedding in run summaries.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
