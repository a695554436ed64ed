pub mod artifact;
pub mod data;
pub mod distmodel;
pub mod error;
pub mod exec;
pub mod harness;
pub mod ictransformer;
pub mod linmodels;
pub mod metrics;
pub mod numkernel;
pub mod protonet;
pub mod synthgen;

pub use error::ModelError;
pub use exec::Exec;
