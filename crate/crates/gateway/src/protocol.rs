//! Wire messages. Every frame is one JSON object tagged by `type`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use nav_core::world::EnvType;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("empty frame")]
    Empty,
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    #[default]
    Manual,
    Auto,
}

impl DriveMode {
    pub fn name(self) -> &'static str {
        match self {
            DriveMode::Manual => "manual",
            DriveMode::Auto => "auto",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// `steer` in [-1, 1], positive turns counter-clockwise; `throttle` in [0, 1].
    Cmd { steer: f32, throttle: f32 },
    Mode { value: DriveMode },
    Record { value: bool },
    Reset { env: EnvType, seed: u64 },
    LoadWeights { path: String },
}

/// Raw RGB bytes, row-major, base64 encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub w: usize,
    pub h: usize,
    pub b64: String,
}

impl WireImage {
    pub fn from_rgb(w: usize, h: usize, rgb: &[u8]) -> Self {
        Self {
            w,
            h,
            b64: STANDARD.encode(rgb),
        }
    }

    pub fn rgb(&self) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(&self.b64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub tick: u64,
    pub pose: [f64; 3],
    /// Laser ranges in metres; `null` where the beam hit nothing.
    pub scan: Vec<Option<f32>>,
    pub image: WireImage,
    pub pred: Option<f32>,
    pub mode: DriveMode,
    pub recording: bool,
    pub records: u64,
    pub collided: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello { world: serde_json::Value, config: serde_json::Value },
    State(StateMessage),
    Error { msg: String },
}

impl ServerMessage {
    pub fn error(msg: impl Into<String>) -> Self {
        ServerMessage::Error { msg: msg.into() }
    }
}

pub fn encode_message<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("wire messages always serialize")
}

/// Decodes one frame. Surrounding whitespace is allowed and unknown fields
/// are ignored.
pub fn decode_message<T: for<'de> Deserialize<'de>>(frame: &str) -> Result<T, DecodeError> {
    let frame = frame.trim();
    if frame.is_empty() {
        return Err(DecodeError::Empty);
    }
    Ok(serde_json::from_str(frame)?)
}
