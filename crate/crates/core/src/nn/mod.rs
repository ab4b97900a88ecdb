//! Neural network operations and layers on top of the autograd graph.

mod act;
mod conv;
pub mod cost;
mod layers;
mod norm;
mod param;
mod pool;

pub use act::{Act, LEAKY_SLOPE};
pub use conv::ConvGeom;
pub use cost::{layer_cost, ConvSpec, LayerCost};
pub use layers::{BatchNorm2d, ConvBnAct, LayerNorm, Linear};
pub use norm::{BatchStats, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use param::{Param, ParamRole, ParamStore};
pub use pool::shuffle_order;
