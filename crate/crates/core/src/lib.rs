pub mod attack;
pub mod crm;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod identity;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Result, SiderError};
