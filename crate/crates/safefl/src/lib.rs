//! Federated-learning robustness workbench.
//!
//! Simulates the full FL loop at desk scale (synthetic classification
//! tasks, Non-IID client partitions, poisoning attacks, Byzantine-robust
//! aggregation) around a trajectory-based malicious-client detection
//! pipeline: the server filters the first rounds by clustering, distills
//! the collected global-model trajectory into a small synthetic dataset by
//! unrolled-SGD trajectory matching, and afterwards flags clients whose
//! local models produce outlying losses on that dataset.

pub mod aggregation;
pub mod attacks;
pub mod clustering;
pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
