//! Time-series representation learning with instance-wise patch
//! normalization, windowed dependency learners and frequency-denoised
//! contrastive pretraining.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcl;
pub mod error;
pub mod finetune;
pub mod flops;
pub mod icm;
pub mod io;
pub mod ipn;
pub mod model;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
