//! Feed-forward network machinery with hand-written backward passes.

pub mod checkpoint;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::{load_network, save_network, Checkpoint};
pub use layers::{
    conv1d_forward, glorot_init, layer_norm, leaky_relu, sinc_conv_backward, sinc_conv_forward, softmax,
    Layer, LayerKind, Mode, Param,
};
pub use network::{first_layer_param_count, ArchConfig, FrontEnd, Network};
pub use tensor::Tensor;
