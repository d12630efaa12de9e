//! JSON text messages exchanged with playground clients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-length tolerance on `move` directions.
pub const DIRECTION_TOLERANCE: f64 = 1e-3;

/// Commands a client may send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Rebinds the interaction anchor to the particle nearest `x`.
    SelectPoint {
        x: [f64; 3],
    },
    /// Drives the anchor along a unit `direction` at `speed` m/s.
    Move {
        direction: [f64; 3],
        speed: f64,
    },
    SetMaterialScale {
        scale: f64,
    },
    Reset,
    Pause,
    Resume,
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::SelectPoint { .. } => "select_point",
            ClientMessage::Move { .. } => "move",
            ClientMessage::SetMaterialScale { .. } => "set_material_scale",
            ClientMessage::Reset => "reset",
            ClientMessage::Pause => "pause",
            ClientMessage::Resume => "resume",
        }
    }

    /// Parses and range-checks one text message.
    pub fn parse(text: &str) -> Result<Self> {
        let msg: ClientMessage =
            serde_json::from_str(text).map_err(|e| Error::Message(e.to_string()))?;
        msg.validate()?;
        Ok(msg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Message(m));
        match self {
            ClientMessage::SelectPoint { x } if !x.iter().all(|c| c.is_finite()) => {
                bad("select_point needs a finite position".into())
            }
            ClientMessage::Move { direction, speed } => {
                if !(speed.is_finite() && *speed >= 0.0) {
                    return bad(format!(
                        "move speed must be finite and non-negative, got {speed}"
                    ));
                }
                let norm = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
                if !((norm - 1.0).abs() <= DIRECTION_TOLERANCE
                    || (*speed == 0.0 && norm.is_finite()))
                {
                    return bad(format!(
                        "move direction must be a unit vector, got length {norm}"
                    ));
                }
                Ok(())
            }
            ClientMessage::SetMaterialScale { scale } if !(scale.is_finite() && *scale > 0.0) => {
                bad(format!("material scale must be positive, got {scale}"))
            }
            _ => Ok(()),
        }
    }
}

/// Text messages the service sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// First message of every session.
    Hello {
        protocol_version: u16,
        particle_count: usize,
        streamed_points: usize,
        stride: usize,
        frame_dt: f64,
    },
    /// The named command took effect.
    Ack { of: String },
    /// The command was rejected; the session is unchanged.
    Error { message: String },
    /// The live state diverged and was reset to the initial state.
    Reset { reason: String },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
