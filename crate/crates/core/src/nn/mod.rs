//! Neural-network primitives with hand-written backward rules.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod norm;
pub mod pixel;

pub use conv::{conv2d, conv3d, conv_transpose2d};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Activation, ConvParams, LayerConfig, Norm, NormParams, PackParams, ResidualParams};
pub use norm::{batch_norm, instance_norm, NORM_EPS};
pub use pixel::{depth2space, space2depth};
