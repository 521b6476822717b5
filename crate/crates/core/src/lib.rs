pub mod adapter;
pub mod baselines;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod parallel;
pub mod rng;
pub mod server;
pub mod verify;

pub use baselines::SchemeId;
pub use error::{ConfigError, Error, Result};
pub use linalg::Matrix;
pub use parallel::Execution;
