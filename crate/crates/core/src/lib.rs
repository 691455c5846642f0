//! Encrypted CNN inference with encrypted model weights over a leveled,
//! RNS-based approximate homomorphic encryption scheme.

pub mod analyzer;
pub mod backend;
pub mod bench;
pub mod ckks;
pub mod dataset;
pub mod error;
pub mod executor;
pub mod layers;
pub mod model;
pub mod packing;
pub mod params;
pub mod reference;
pub mod rng;
pub mod wire;
pub mod workflow;

pub use backend::{CipherText, Evaluator, HeBackend, KeySet, OpCounters, OpCounts, PlainVec};
pub use ckks::CkksBackend;
pub use error::{Error, Result};
pub use model::{plaintext_forward, ModelDesc};
pub use packing::{CipherMatrix, ImageBatch};
pub use params::{derive_params, HeParams};
pub use reference::RefBackend;
