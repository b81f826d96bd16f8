//! Wire protocol v1: one JSON object per line.

use serde::{Deserialize, Serialize};

use crate::careplan::DispenseMode;
use crate::command::Command;
use crate::node::NodeId;

pub const WIRE_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FrameBody {
    Vitals {
        patient: NodeId,
        hr: f64,
        spo2: f64,
        temp_f: f64,
        /// Sim time the measurement finished.
        measured_at: f64,
        /// Comma-joined health flags.
        state: String,
        mode: DispenseMode,
    },
    Med {
        patient: NodeId,
        /// `M01`..`M03`, `fluid` or `oxygen_mask`.
        item: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cylinder: Option<u8>,
        duration: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        volume_l: Option<f64>,
        mode: DispenseMode,
    },
    Mode {
        state: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Alert {
        code: String,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        patient: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<u64>,
    },
    Pose {
        x: f64,
        y: f64,
        heading: f64,
        battery: f64,
        camera_pan: f64,
    },
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command_id: Option<u64>,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response_s: Option<f64>,
    },
}

impl FrameBody {
    /// Sensor-type frames that go out in periodic batches.
    pub fn is_batched(&self) -> bool {
        matches!(self, FrameBody::Vitals { .. } | FrameBody::Pose { .. })
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            FrameBody::Vitals { .. } => "vitals",
            FrameBody::Med { .. } => "med",
            FrameBody::Mode { .. } => "mode",
            FrameBody::Alert { .. } => "alert",
            FrameBody::Pose { .. } => "pose",
            FrameBody::Ack { .. } => "ack",
        }
    }

    fn floats(&self) -> Vec<f64> {
        match self {
            FrameBody::Vitals { hr, spo2, temp_f, measured_at, .. } => vec![*hr, *spo2, *temp_f, *measured_at],
            FrameBody::Med { duration, volume_l, .. } => {
                let mut v = vec![*duration];
                v.extend(volume_l);
                v
            }
            FrameBody::Pose { x, y, heading, battery, camera_pan } => vec![*x, *y, *heading, *battery, *camera_pan],
            FrameBody::Ack { response_s, .. } => response_s.iter().copied().collect(),
            FrameBody::Mode { .. } | FrameBody::Alert { .. } => Vec::new(),
        }
    }

    pub fn alert(code: &str, message: impl Into<String>, patient: Option<NodeId>) -> Self {
        FrameBody::Alert {
            code: code.into(),
            message: message.into(),
            patient,
            count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub seq: u64,
    pub sim_time: f64,
    #[serde(flatten)]
    pub body: FrameBody,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("decode error at byte {offset}: {message}")]
pub struct DecodeError {
    /// Byte offset into the input where the problem was found.
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot encode frame: {0}")]
pub struct EncodeError(pub String);

#[derive(Serialize)]
struct WireOut<'a, T: Serialize> {
    v: &'static str,
    #[serde(flatten)]
    inner: &'a T,
}

/// Canonical encoding including the trailing newline.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    if !frame.sim_time.is_finite() || frame.body.floats().iter().any(|v| !v.is_finite()) {
        return Err(EncodeError("non-finite number".into()));
    }
    let mut out = serde_json::to_vec(&WireOut {
        v: WIRE_VERSION,
        inner: frame,
    })
    .map_err(|e| EncodeError(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn encode_command(cmd: &Command) -> Result<Vec<u8>, EncodeError> {
    if !cmd.issued_at.is_finite() {
        return Err(EncodeError("non-finite issue time".into()));
    }
    #[derive(Serialize)]
    struct Cmd<'a> {
        v: &'static str,
        #[serde(rename = "type")]
        ty: &'static str,
        #[serde(flatten)]
        cmd: &'a Command,
    }
    let mut out = serde_json::to_vec(&Cmd {
        v: WIRE_VERSION,
        ty: "cmd",
        cmd,
    })
    .map_err(|e| EncodeError(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn json_offset(line: &[u8], e: &serde_json::Error) -> usize {
    // serde_json reports 1-based line and byte column.
    let mut line_no = 1;
    let mut start = 0;
    for (i, b) in line.iter().enumerate() {
        if line_no == e.line() {
            break;
        }
        if *b == b'\n' {
            line_no += 1;
            start = i + 1;
        }
    }
    (start + e.column().saturating_sub(1)).min(line.len())
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

/// Parses one object and checks the version tag.
fn parse_object(line: &[u8]) -> Result<serde_json::Map<String, serde_json::Value>, DecodeError> {
    let trimmed = match line.last() {
        Some(b'\n') => &line[..line.len() - 1],
        _ => line,
    };
    let value: serde_json::Value = serde_json::from_slice(trimmed).map_err(|e| DecodeError {
        offset: json_offset(trimmed, &e),
        message: strip_position(&e),
    })?;
    let serde_json::Value::Object(map) = value else {
        return Err(DecodeError {
            offset: 0,
            message: "frame is not an object".into(),
        });
    };
    match map.get("v") {
        Some(serde_json::Value::String(v)) if v == WIRE_VERSION => Ok(map),
        Some(other) => Err(DecodeError {
            offset: 0,
            message: format!("unsupported version {other}"),
        }),
        None => Err(DecodeError {
            offset: 0,
            message: "missing version field `v`".into(),
        }),
    }
}

/// Decodes one outbound frame. A trailing newline is accepted.
pub fn decode_frame(line: &[u8]) -> Result<Frame, DecodeError> {
    let mut map = parse_object(line)?;
    map.remove("v");
    if map.get("type").and_then(|t| t.as_str()) == Some("cmd") {
        return Err(DecodeError {
            offset: 0,
            message: "command frame where telemetry frame expected".into(),
        });
    }
    let frame: Frame = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| DecodeError {
        offset: 0,
        message: e.to_string(),
    })?;
    if !frame.sim_time.is_finite() || frame.sim_time < 0.0 {
        return Err(DecodeError {
            offset: 0,
            message: "sim_time must be finite and non-negative".into(),
        });
    }
    Ok(frame)
}

/// Command that could not be accepted, with the id when one was readable.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{reason}")]
pub struct Rejected {
    pub id: Option<u64>,
    pub reason: String,
}

/// Decodes and validates an inbound command frame.
pub fn decode_command(line: &[u8]) -> Result<Command, Rejected> {
    let mut map = parse_object(line).map_err(|e| Rejected {
        id: None,
        reason: e.to_string(),
    })?;
    let id = map.get("id").and_then(|v| v.as_u64());
    let reject = |reason: String| Rejected { id, reason };
    if map.get("type").and_then(|t| t.as_str()) != Some("cmd") {
        return Err(reject("expected a frame of type `cmd`".into()));
    }
    map.remove("v");
    map.remove("type");
    let cmd: Command =
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| reject(e.to_string()))?;
    if !cmd.issued_at.is_finite() {
        return Err(reject("issued_at must be finite".into()));
    }
    cmd.kind.validate().map_err(reject)?;
    Ok(cmd)
}

/// Splits a byte stream on newlines and decodes each line. Bad lines are
/// reported with offsets relative to the whole stream and skipped.
pub fn decode_stream(bytes: &[u8]) -> (Vec<Frame>, Vec<DecodeError>) {
    let mut frames = Vec::new();
    let mut errors = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        let end = bytes[start..]
            .iter()
            .position(|b| *b == b'\n')
            .map(|i| start + i);
        let (line, next) = match end {
            Some(e) => (&bytes[start..e], e + 1),
            None => (&bytes[start..], bytes.len()),
        };
        if end.is_none() {
            errors.push(DecodeError {
                offset: bytes.len(),
                message: "truncated frame without newline".into(),
            });
        } else if !line.iter().all(u8::is_ascii_whitespace) {
            match decode_frame(line) {
                Ok(f) => frames.push(f),
                Err(mut e) => {
                    e.offset += start;
                    errors.push(e);
                }
            }
        }
        start = next;
    }
    (frames, errors)
}
