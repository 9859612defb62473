pub mod dataset;
pub mod eval;
pub mod hook;
pub mod linalg;
pub mod memory;
pub mod network;
pub mod pipeline;
