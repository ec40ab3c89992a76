pub mod cli;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod facecvae;
pub mod gradcore;
pub mod hgpt;
pub mod io;
pub mod metrics;
pub mod motionrep;
pub mod pipeline;
pub mod quantize;
pub mod seqvae;
pub mod tmr;

pub use error::{Error, Result};
