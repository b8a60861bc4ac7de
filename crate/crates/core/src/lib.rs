pub mod autograd;
pub mod encoding;
pub mod error;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod neurons;
pub mod parallel;
pub mod profiling;
pub mod synthetic;
pub mod tensor;
pub mod training;
