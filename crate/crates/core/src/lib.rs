//! Cell search for video segmentation decoders.

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod genotype;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod search;
pub mod segnet;
pub mod train;

pub use error::{Error, Result};
