//! Small CPU neural-network engine: tensors, layers with explicit backward
//! passes, parameter containers and Adam.

mod layers;
mod params;
mod real;
mod tensor;

pub use layers::{
    cat_channels, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward,
    split_channels, upsample2, upsample2_backward, BatchNorm, BnCache, Conv2d, ConvBnAct,
    ConvBnActCache, ConvCache, Linear, LinearCache, Mode,
};
pub use params::{Adam, AdamConfig, Module, Param, StateEntry};
pub(crate) use params::join;
pub use real::{matmul_acc, Real};
pub use tensor::Tensor;
