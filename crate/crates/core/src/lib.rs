pub mod error;
pub mod nn;
pub mod bifpn;
pub mod data;
pub mod boxes;
pub mod gam;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod sepvit;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, Tensor, Var};
