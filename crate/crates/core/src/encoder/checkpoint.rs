//! Model checkpoints: JSON header (config, input shape, history, segment
//! table) followed by the packed parameter vector as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderError, EncoderModel, EpochRecord, Segment};
use crate::container::{self, ContainerError};

const FORMAT: &str = "eegrag-encoder";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    config: EncoderConfig,
    input_channels: usize,
    input_samples: usize,
    history: Vec<EpochRecord>,
    segments: Vec<Segment>,
}

pub fn encode_checkpoint(model: &EncoderModel) -> Vec<u8> {
    let (c, t) = model.input_shape();
    let header = Header {
        format: FORMAT.into(),
        dtype: "f64".into(),
        config: model.config().clone(),
        input_channels: c,
        input_samples: t,
        history: model.training_history.clone(),
        segments: model.segments().to_vec(),
    };
    container::encode(&header, &container::f64_to_le(model.parameters()))
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<EncoderModel, EncoderError> {
    let (header, payload): (Header, _) = container::decode(bytes, origin)?;
    if header.format != FORMAT || header.dtype != "f64" {
        return Err(EncoderError::Checkpoint(format!("unsupported format {} / {}", header.format, header.dtype)));
    }
    let params = container::f64_from_le(&payload)?;
    let model = EncoderModel::from_parts(header.config, header.input_channels, header.input_samples, params, header.history)?;
    if model.segments() != header.segments.as_slice() {
        return Err(EncoderError::Checkpoint("segment table does not match the configuration".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<Vec<u8>, EncoderError> {
    let bytes = encode_checkpoint(model);
    std::fs::write(path, &bytes).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel, EncoderError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
