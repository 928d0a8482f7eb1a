//! Eigen-inference CSI cleaning and quantization-aware precoding for
//! massive MU-MIMO downlinks.

pub mod channel;
pub mod error;
pub mod eta;
pub mod linalg;
pub mod precoder;
pub mod rie;
pub mod rmt;
pub mod sim;

pub use error::{Error, Result};
