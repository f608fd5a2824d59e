//! Sequential recommendation with semantic-ID generative retrieval, dense
//! retrieval over text-informed item embeddings, and the hybrid that ranks
//! generated candidates (plus cold-start items) with a dense head.
//!
//! The crate is `no_std` + `alloc`; file formats, checkpoints and the CLI
//! live in the companion `seqrec-lab` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod datasets;
pub mod error;
pub mod eval;
pub mod genret;
pub mod gradcheck;
pub mod hybrid;
pub mod infer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sid;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
