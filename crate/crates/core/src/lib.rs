pub mod bon;
pub mod density;
pub mod empowerment;
pub mod entmax;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod sac;
pub mod tsallis;

pub use error::{Error, Result};
