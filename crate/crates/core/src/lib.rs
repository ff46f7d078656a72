pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod postprocess;
pub mod scalar;
pub mod tensor;
pub mod train;

pub mod ablation;
pub mod blocks;
pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use ops::{Activation, ConvSpec};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
