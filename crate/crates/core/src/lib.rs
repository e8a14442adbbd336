//! ONNX graphs to condensed text: parsing, lossless simplification, chain
//! condensation and encoding, plus the diversity and ranking tooling built
//! around the encoding.

pub mod cli;
pub mod condense;
pub mod datasetio;
pub mod diversity;
pub mod error;
pub mod graph_ir;
pub mod onnx_proto;
pub mod passes;
pub mod ranking;
pub mod refexec;
pub mod textenc;

pub use error::{Error, Result};
