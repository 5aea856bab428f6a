//! Noise-prediction network, its training loop and the Gaussian oracle.

pub(crate) mod blocks;
pub mod ops;
mod optim;
mod oracle;
mod params;
mod time;
mod train;
mod unet;

pub use blocks::groups_for;
pub use optim::AdamW;
pub use oracle::{oracle_predict_noise, GaussianOracle};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use time::time_embed;
pub use train::{train, validation_loss, TrainOptions, TrainReport, TrainingPair};
pub use unet::{ForwardCache, NetworkShape, Unet, DATA_CHANNELS};
