//! Toy-scale learned restorer: a plain NCHW tensor type, a reverse-mode
//! tape, a three-scale residual encoder-decoder, its content loss, Adam
//! training, gradient verification, and a binary weight format.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use gradcheck::{calibration_weights, gradcheck, GradCheckReport, GRADCHECK_MIN_SAMPLES};
pub use graph::{Graph, NodeId};
pub use io::{load_weights, save_weights};
pub use loss::{content_loss, content_loss_node};
pub use model::{build_forward, mimo_forward, pyramid, Architecture, ModelGraph, ModelWeights, NamedTensor};
pub use tensor::{conv2d, downsample_area2, PadMode, Real, Tensor4};
pub use train::{backward, lr_at, train_toy, write_loss_csv, TrainConfig, TrainRecord};
