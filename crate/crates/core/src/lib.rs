//! Token-priority graphs, graph-SVM solutions and gradient training of a
//! single-layer softmax attention model on next-token prediction.

pub mod analysis;
pub mod attention;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod svm;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type Dataset32 = dataset::Dataset<f32>;
pub type Objective64 = attention::Objective<f64>;
pub type Objective32 = attention::Objective<f32>;
pub type Instance64 = experiment::Instance<f64>;
