//! Desk-scale laboratory for nonlinear coherent fiber links: split-step
//! channel simulation, receiver DSP, digital back-propagation, neural-network
//! equalizers and their real-multiplication complexity accounting.

pub mod channel;
pub mod complexity;
pub mod dbp;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod neuro;
pub mod receiver;
pub mod search;
pub mod topology;

pub use error::{Error, Result};
