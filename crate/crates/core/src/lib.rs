//! Multi-enrollment speaker verification: an attention back-end that
//! aggregates several enrollment embeddings, trained jointly with a small
//! TDNN speaker encoder, plus cosine, PLDA and neural PLDA baselines, the
//! losses and detection metrics they are trained and judged with, and the
//! synthetic corpora used to validate all of it.

pub mod backend;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod numkernel;
pub mod objectives;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, Result};
