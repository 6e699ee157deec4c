//! Float64 tensor autograd, FCN and DeepLab-style segmentation networks,
//! training with Adam and tiled whole-raster prediction.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod predict;
pub mod tensor;
pub mod train;

pub use config::{Architecture, ChannelPlan, ModelConfig};
pub use error::{Error, Result};
pub use gradcheck::{finite_difference_check, full_suite, GradcheckReport, LayerCheck};
pub use graph::{Graph, Var};
pub use model::{aspp_forward, init_params, model_forward, Mode};
pub use params::{ModelParams, ParamKind};
pub use predict::predict_map;
pub use tensor::Tensor;
pub use train::{train_from, train_model, EpochLog, TrainingLog};
