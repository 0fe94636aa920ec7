pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{LayerId, Network, NetworkConfig};
pub use tensor::Tensor;
