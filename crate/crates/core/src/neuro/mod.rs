//! Minimal neural-network stack for the equalizers: dense, 1-D convolution,
//! bidirectional LSTM and echo-state layers over a flat parameter vector,
//! trained with Adam on MSE, plus an instrumented forward pass that counts
//! real multiplications per recovered symbol.

pub mod checkpoint;
pub mod dataset;
pub mod esn;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod params;
pub mod train;

pub use dataset::{window_dataset, window_inputs, WindowedDataset};
pub use esn::{esn_fit_readout, ridge_solve, Esn};
pub use layers::{Conv1d, Dense};
pub use lstm::{BiLstm, Lstm};
pub use model::{EqualizerModel, Layer};
pub use params::{Layout, MulCounter, Slot};
pub use train::{mse, train, Adam, Loss, TrainConfig, TrainReport};
