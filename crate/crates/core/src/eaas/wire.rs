//! JSON messages and the base64 little-endian f64 payload encoding.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::SampleShape;
use crate::encoder::{ProviderInfo, ProviderMode};

pub const PROTOCOL_VERSION: u32 = 1;

pub const ERR_MALFORMED_JSON: &str = "malformed_json";
pub const ERR_BAD_PAYLOAD: &str = "bad_payload";
pub const ERR_SHAPE_MISMATCH: &str = "shape_mismatch";
pub const ERR_VERSION_MISMATCH: &str = "version_mismatch";
pub const ERR_MODEL: &str = "model_error";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireInfo {
    pub version: u32,
    pub input_shape: SampleShape,
    pub patch_h: usize,
    pub patch_w: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub n: usize,
    pub mode: ProviderMode,
    pub id: String,
}

impl From<&ProviderInfo> for WireInfo {
    fn from(i: &ProviderInfo) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            input_shape: i.input_shape,
            patch_h: i.patch_h,
            patch_w: i.patch_w,
            tokens: i.tokens,
            token_dim: i.token_dim,
            n: i.n,
            mode: i.mode,
            id: i.id.clone(),
        }
    }
}

impl WireInfo {
    pub fn to_provider_info(&self) -> ProviderInfo {
        ProviderInfo {
            input_shape: self.input_shape,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            tokens: self.tokens,
            token_dim: self.token_dim,
            n: self.n,
            mode: self.mode,
            id: self.id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub version: u32,
    pub request_id: String,
    pub shape: SampleShape,
    /// One base64 string per sample.
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub version: u32,
    pub request_id: String,
    pub n: usize,
    pub embeddings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_version: Option<u32>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(s: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| format!("invalid base64: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("payload of {} bytes is not a whole number of f64 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
