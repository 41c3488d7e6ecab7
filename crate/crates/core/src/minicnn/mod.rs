//! A small CNN engine in `f64`: named layers, feature taps, softmax
//! cross-entropy and Euclidean losses, backpropagation and per-layer
//! learning-rate multipliers.

mod backprop;
mod io;
mod layers;
mod network;
mod tensor;
mod train;

pub use backprop::{
    backward, backward_with_loss, batch_loss, loss_euclidean, loss_softmax_ce, softmax, Gradients, LossKind,
};
pub use io::{load_model, model_bytes, parse_model, save_model};
pub use layers::Shape3;
pub use network::{
    extract_features, replace_head, Activations, HeadKind, Layer, LayerKind, LayerSpec, Network, Params, HEAD_LAYER,
};
pub use tensor::Tensor;
pub use train::{evaluate, finetune, predict, predict_all, sgd_step, EpochStats, LearningCurves, Sgd, TrainConfig};
