pub mod error;
pub mod params;

pub use error::{Error, Result};
pub mod nets;
pub mod contrastive;
pub mod objectives;
pub mod qs_attention;
pub mod synth;
pub mod io;
pub mod trainer;
pub mod hcut;
pub mod ttl;
pub mod config;
pub mod pipeline;
pub mod gradsuite;
