//! Session wire format: each record is a 4-byte big-endian length followed
//! by that many bytes of UTF-8 JSON. The JSON object carries its variant in
//! a `"type"` field, for example
//! `{"type":"wrist_input","x":0.1,"y":0.3,"theta":0.0,"seq":7}`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;
/// Records above this size are rejected.
pub const MAX_RECORD: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactMsg {
    pub x: f64,
    pub y: f64,
    pub nx: f64,
    pub ny: f64,
    /// `"palm"` or `"f<finger>l<link>"`.
    pub link: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionMessage {
    Hello {
        version: u32,
    },
    LoadSession {
        object_id: String,
        /// Empty selects the run's trained field.
        #[serde(default)]
        gf_path: String,
        /// Empty selects the run's trained policy for `flags`.
        #[serde(default)]
        policy_path: String,
        #[serde(default = "full_flags")]
        flags: String,
    },
    WristInput {
        x: f64,
        y: f64,
        theta: f64,
        seq: u64,
    },
    TickResult {
        t: usize,
        joints: [f64; 6],
        fingertips: [[f64; 2]; 3],
        object_pose: [f64; 3],
        contacts: Vec<ContactMsg>,
        phase: String,
        a_p: [f64; 6],
        a_s: [f64; 6],
        a_r: [f64; 6],
    },
    TriggerLift {},
    LiftResult {
        success: bool,
        height_gain: f64,
        posture: f64,
        /// Object translation (meters) and `1 - cos` of its rotation.
        stability: [f64; 2],
    },
    Reset {
        object_id: String,
    },
    Error {
        code: u32,
        message: String,
    },
}

fn full_flags() -> String {
    "full".into()
}

/// Error codes carried by [`SessionMessage::Error`].
pub mod codes {
    pub const MALFORMED: u32 = 1;
    pub const UNKNOWN_OBJECT: u32 = 2;
    pub const NO_SESSION: u32 = 3;
    pub const BAD_STATE: u32 = 4;
    pub const LOAD_FAILED: u32 = 5;
    pub const VERSION: u32 = 6;
    pub const INTERNAL: u32 = 7;
}

impl SessionMessage {
    pub fn error(code: u32, message: impl Into<String>) -> Self {
        SessionMessage::Error {
            code,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Writes one length-prefixed record.
pub fn write_record<W: Write>(w: &mut W, payload: &[u8]) -> std::io::Result<()> {
    if payload.len() > MAX_RECORD {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "record too large",
        ));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn write_message<W: Write>(w: &mut W, m: &SessionMessage) -> std::io::Result<()> {
    write_record(w, m.to_json().as_bytes())
}

/// Reads one record; `Ok(None)` on a clean end of stream.
pub fn read_record<R: Read>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_RECORD {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "record too large",
        ));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrist_input_wire_form() {
        let m = SessionMessage::WristInput {
            x: 0.3,
            y: 0.2,
            theta: 0.0,
            seq: 4,
        };
        let j: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(j["type"], "wrist_input");
        assert_eq!(j["seq"], 4);
        assert_eq!(SessionMessage::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn trigger_lift_has_no_fields() {
        let m = SessionMessage::from_json(r#"{"type":"trigger_lift"}"#).unwrap();
        assert_eq!(m, SessionMessage::TriggerLift {});
    }

    #[test]
    fn records_round_trip() {
        let mut buf = Vec::new();
        write_message(&mut buf, &SessionMessage::Hello { version: 1 }).unwrap();
        write_record(&mut buf, b"{}").unwrap();
        let mut r = &buf[..];
        let a = read_record(&mut r).unwrap().unwrap();
        assert_eq!(
            SessionMessage::from_json(std::str::from_utf8(&a).unwrap()).unwrap(),
            SessionMessage::Hello { version: 1 }
        );
        assert_eq!(read_record(&mut r).unwrap().unwrap(), b"{}");
        assert!(read_record(&mut r).unwrap().is_none());
    }
}
