//! Small dense neural-network toolkit: `f64` tensors, a tape-based autodiff
//! graph, 1-D convolution layers, AdamW, and a checksummed tensor file format.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod store;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{Conv1d, ConvTranspose1d, Linear};
pub use optim::{cosine_lr, AdamW};
pub use params::{ParamId, ParamStore};
pub use store::TensorFile;
pub use tensor::Tensor;
