//! File formats and run configuration.

mod config;
mod image;
mod presets;
mod tensor_file;

use thiserror::Error;

pub use config::{parse_config, read_config, DenoiserSelector, PriorSource, ResolvedGuidance, RunConfig, Setting};
pub use image::{decode_image, encode_image, read_image, write_image};
pub use presets::{preset_for, Dataset, Preset, Task};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC, TENSOR_VERSION};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
}
