pub mod dict;
pub mod error;
pub mod forward;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod proxnet;
pub mod recon_dm;
pub mod sampling;
pub mod seeds;
pub mod seqsim;
pub mod tensorfile;

pub use error::{MrfError, Result};
