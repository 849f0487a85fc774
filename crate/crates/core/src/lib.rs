//! Masked facial-video autoencoding with a temporal-pyramid,
//! spatial-bottleneck transformer encoder.

pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tokenizer;
pub mod trainer;

pub use config::{ArchConfig, Downsample, Grid, Preset, RunConfig, TrainConfig, Variant};
pub use error::{Result, SvfapError};
pub use params::{ParamSpec, ParamStore};
pub use tape::{Mat, Tape, Var};
