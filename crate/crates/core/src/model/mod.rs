//! Twin encoders and decoders with shared blocks, auxiliary depth and
//! segmentation decoders, and checkpoint I/O.

pub mod arch;
pub mod bundle;
pub mod checkpoint;
pub mod forward;

pub use arch::{ArchConfig, BlockSpec};
pub use bundle::{Group, ModelBundle, ParamSpec};
pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint};
pub use forward::{
    cross_domain, decode, encode, latent_noise, predict, shape_trace, Binder, Domain, EncodeMode,
    Head, LatentCode, LatentVars,
};
