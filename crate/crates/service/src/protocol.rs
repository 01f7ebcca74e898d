//! Wire records: newline-terminated JSON text.
//!
//! The control socket carries commands `{"cmd": …, "id": …}` one way and replies
//! `{"id": …, "ok": …}` the other. The telemetry socket carries frames
//! `{"seq": …, "mode": …, "marker": "0000"?, "samples": […]}` and events
//! `{"event": …}`. A frame never crosses a 300-sample block boundary and the first
//! frame of every block carries the marker.

use resotrack_core::calib::CalibrationResult;
use resotrack_core::plant::{EmiConfig, StimulusProgram};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MARKER: &str = "0000";
pub const BLOCK_SIZE: usize = 300;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("frame carries {0} samples, at most {BLOCK_SIZE} allowed")]
    Oversized(usize),
    #[error("samples do not match the frame mode")]
    ModeMismatch,
    #[error("unknown marker {0:?}")]
    BadMarker(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Scan,
    Track,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    StartScan,
    StartTrack,
    Stop,
    /// `k_i` is absolute; `k_i_fraction` is relative to the calibrated K. One is required.
    SetPid {
        #[serde(default)]
        k_i: Option<f64>,
        #[serde(default)]
        k_i_fraction: Option<f64>,
        #[serde(default)]
        k_p: f64,
        #[serde(default)]
        k_d: f64,
    },
    Relock,
    SetSmooth {
        on: bool,
    },
    /// Segment start times are relative to the moment the command is applied.
    SetStimulus {
        program: StimulusProgram,
    },
    SetEmi {
        emi: EmiConfig,
    },
    Snapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: Option<u64>,
    pub command: Command,
}

impl Request {
    pub fn new(id: u64, command: Command) -> Self {
        Self { id: Some(id), command }
    }

    pub fn encode(&self) -> String {
        let mut v = serde_json::to_value(&self.command).expect("commands serialize");
        if let (Some(id), Value::Object(map)) = (self.id, &mut v) {
            map.insert("id".into(), id.into());
        }
        let mut s = v.to_string();
        s.push('\n');
        s
    }

    /// Parses one command line. On failure the request id is still recovered when possible.
    pub fn decode(line: &str) -> Result<Self, (Option<u64>, ProtocolError)> {
        let value: Value = serde_json::from_str(line.trim())
            .map_err(|e| (None, ProtocolError::Malformed(e.to_string())))?;
        let id = value.get("id").and_then(Value::as_u64);
        let command = Command::deserialize(&value).map_err(|e| (id, ProtocolError::Malformed(e.to_string())))?;
        Ok(Self { id, command })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Reply {
    pub fn ok(id: Option<u64>, result: Value) -> Self {
        Self {
            id,
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn err(id: Option<u64>, error: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            result: None,
            error: Some(error.into()),
        }
    }

    pub fn encode(&self) -> String {
        line(self)
    }

    pub fn decode(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text.trim()).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

/// Calibration summary as sent to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub v0: f64,
    pub a_m: f64,
    pub k_gain: f64,
    pub q_est: f64,
    pub delta_t_est: f64,
    pub f_r_est: f64,
}

impl From<&CalibrationResult> for CalibrationSummary {
    fn from(c: &CalibrationResult) -> Self {
        Self {
            v0: c.v0,
            a_m: c.a_m,
            k_gain: c.k_gain,
            q_est: c.q_est,
            delta_t_est: c.delta_t_est,
            f_r_est: c.f_r_est,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Calibration {
        #[serde(flatten)]
        calibration: CalibrationSummary,
    },
    LockLost {
        iteration: u64,
    },
    Mode {
        mode: Mode,
    },
}

impl Event {
    pub fn encode(&self) -> String {
        line(self)
    }
}

/// One tracker point: iteration, raw v_out, displayed median, error, flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackPoint {
    pub i: u64,
    pub v: f64,
    pub f: f64,
    pub e: f64,
    pub locked: bool,
    pub sat: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPoint {
    pub v_dac: f64,
    pub v_adc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Samples {
    Track(Vec<TrackPoint>),
    Scan(Vec<ScanPoint>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Track(v) => v.len(),
            Samples::Scan(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn mode(&self) -> Mode {
        match self {
            Samples::Track(_) => Mode::Track,
            Samples::Scan(_) => Mode::Scan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub seq: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<String>,
    pub samples: Samples,
}

impl TelemetryFrame {
    pub fn has_marker(&self) -> bool {
        self.marker.as_deref() == Some(MARKER)
    }

    fn check(mut self) -> Result<Self, ProtocolError> {
        if self.samples.len() > BLOCK_SIZE {
            return Err(ProtocolError::Oversized(self.samples.len()));
        }
        if let Some(m) = &self.marker {
            if m != MARKER {
                return Err(ProtocolError::BadMarker(m.clone()));
            }
        }
        match (self.mode, &self.samples) {
            (Mode::Scan, Samples::Track(v)) if v.is_empty() => self.samples = Samples::Scan(Vec::new()),
            (mode, s) if mode != s.mode() => return Err(ProtocolError::ModeMismatch),
            _ => {}
        }
        Ok(self)
    }
}

fn line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("records serialize");
    s.push('\n');
    s
}

/// Serializes a frame as one JSON line.
pub fn frame_encode(samples: Samples, mode: Mode, seq: u64, marker: bool) -> Result<Vec<u8>, ProtocolError> {
    let frame = TelemetryFrame {
        seq,
        mode,
        marker: marker.then(|| MARKER.to_string()),
        samples,
    }
    .check()?;
    Ok(line(&frame).into_bytes())
}

pub fn encode_frame(frame: &TelemetryFrame) -> Result<Vec<u8>, ProtocolError> {
    let frame = frame.clone().check()?;
    Ok(line(&frame).into_bytes())
}

pub fn frame_decode(bytes: &[u8]) -> Result<TelemetryFrame, ProtocolError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let frame: TelemetryFrame =
        serde_json::from_str(text.trim_end_matches('\n')).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    frame.check()
}

/// Anything that can arrive on the telemetry socket.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Frame(TelemetryFrame),
    Event(Event),
}

pub fn record_decode(bytes: &[u8]) -> Result<Record, ProtocolError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let value: Value = serde_json::from_str(text.trim_end_matches('\n'))
        .map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if value.get("event").is_some() {
        return Event::deserialize(&value)
            .map(Record::Event)
            .map_err(|e| ProtocolError::Malformed(e.to_string()));
    }
    TelemetryFrame::deserialize(&value)
        .map_err(|e| ProtocolError::Malformed(e.to_string()))?
        .check()
        .map(Record::Frame)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Frame(TelemetryFrame),
    Event(Event),
    /// Sequence numbers jumped: frames were lost upstream.
    Gap { expected: u64, got: u64 },
    /// A corrupted record was dropped; frames are skipped until the next marker.
    Resync { dropped_bytes: usize },
}

/// Incremental decoder for a telemetry byte stream.
///
/// After a corrupted record the block alignment is unknown, so frames are discarded
/// until one carrying the marker arrives. Events are always delivered.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    syncing: bool,
    next_seq: Option<u64>,
    skipped_frames: u64,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Frames discarded while waiting for a marker.
    pub fn skipped_frames(&self) -> u64 {
        self.skipped_frames
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Vec<Decoded> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.buf.drain(..=pos).collect();
            self.handle(&line, &mut out);
        }
        out
    }

    fn handle(&mut self, line: &[u8], out: &mut Vec<Decoded>) {
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            return;
        }
        match record_decode(line) {
            Ok(Record::Event(e)) => out.push(Decoded::Event(e)),
            Ok(Record::Frame(f)) => {
                if self.syncing && !f.has_marker() {
                    self.skipped_frames += 1;
                    self.next_seq = Some(f.seq + 1);
                    return;
                }
                self.syncing = false;
                if let Some(expected) = self.next_seq {
                    if f.seq != expected {
                        out.push(Decoded::Gap { expected, got: f.seq });
                    }
                }
                self.next_seq = Some(f.seq + 1);
                out.push(Decoded::Frame(f));
            }
            Err(_) => {
                self.syncing = true;
                out.push(Decoded::Resync {
                    dropped_bytes: line.len(),
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(n: usize) -> Samples {
        Samples::Track(
            (0..n)
                .map(|k| TrackPoint {
                    i: k as u64,
                    v: 1.6 + k as f64 * 1e-7,
                    f: 1.6,
                    e: -0.01 * k as f64,
                    locked: true,
                    sat: false,
                })
                .collect(),
        )
    }

    #[test]
    fn full_block_round_trip() {
        let bytes = frame_encode(track(300), Mode::Track, 7, true).unwrap();
        assert_eq!(*bytes.last().unwrap(), b'\n');
        let f = frame_decode(&bytes).unwrap();
        assert_eq!(f.seq, 7);
        assert!(f.has_marker());
        assert_eq!(f.samples, track(300));
    }

    #[test]
    fn oversized_and_mismatched_frames_rejected() {
        assert_eq!(frame_encode(track(301), Mode::Track, 0, false), Err(ProtocolError::Oversized(301)));
        assert_eq!(frame_encode(track(3), Mode::Scan, 0, false), Err(ProtocolError::ModeMismatch));
        let bad = br#"{"seq":1,"mode":"track","marker":"0001","samples":[]}"#;
        assert!(matches!(frame_decode(bad), Err(ProtocolError::BadMarker(_))));
    }

    #[test]
    fn empty_scan_frame_keeps_its_mode() {
        let bytes = frame_encode(Samples::Scan(vec![]), Mode::Scan, 2, false).unwrap();
        assert_eq!(frame_decode(&bytes).unwrap().samples, Samples::Scan(vec![]));
    }

    #[test]
    fn commands_parse_with_ids() {
        let r = Request::decode(r#"{"cmd":"set_pid","id":4,"k_i_fraction":0.1}"#).unwrap();
        assert_eq!(r.id, Some(4));
        assert_eq!(
            r.command,
            Command::SetPid {
                k_i: None,
                k_i_fraction: Some(0.1),
                k_p: 0.0,
                k_d: 0.0
            }
        );
        assert_eq!(Request::decode(r#"{"cmd":"stop","id":1}"#).unwrap().command, Command::Stop);
        let (id, _) = Request::decode(r#"{"cmd":"warp","id":9}"#).unwrap_err();
        assert_eq!(id, Some(9));
        assert_eq!(Request::decode("{not json").unwrap_err().0, None);
    }

    #[test]
    fn request_round_trip() {
        let r = Request::new(11, Command::SetSmooth { on: true });
        assert_eq!(Request::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn event_lines_are_tagged() {
        let e = Event::Mode { mode: Mode::Track };
        assert_eq!(e.encode(), "{\"event\":\"mode\",\"mode\":\"track\"}\n");
        assert_eq!(record_decode(e.encode().as_bytes()).unwrap(), Record::Event(e));
    }

    #[test]
    fn decoder_waits_for_marker_after_corruption() {
        let mut d = StreamDecoder::new();
        let f0 = frame_encode(track(10), Mode::Track, 0, true).unwrap();
        let f1 = frame_encode(track(10), Mode::Track, 1, false).unwrap();
        let f2 = frame_encode(track(10), Mode::Track, 2, false).unwrap();
        let f3 = frame_encode(track(10), Mode::Track, 3, true).unwrap();
        let mut stream = f0.clone();
        stream.extend_from_slice(&f1[..f1.len() / 2]);
        stream.push(b'\n');
        stream.extend_from_slice(&f2);
        stream.extend_from_slice(&f3);
        let out = d.feed(&stream);
        assert!(matches!(out[0], Decoded::Frame(ref f) if f.seq == 0));
        assert!(matches!(out[1], Decoded::Resync { .. }));
        assert!(matches!(out[2], Decoded::Frame(ref f) if f.seq == 3));
        assert_eq!(out.len(), 3);
        assert_eq!(d.skipped_frames(), 1);
    }

    #[test]
    fn decoder_reports_sequence_gaps() {
        let mut d = StreamDecoder::new();
        let mut s = frame_encode(track(1), Mode::Track, 0, true).unwrap();
        s.extend(frame_encode(track(1), Mode::Track, 5, false).unwrap());
        let out = d.feed(&s);
        assert_eq!(out[1], Decoded::Gap { expected: 1, got: 5 });
    }

    #[test]
    fn split_reads_are_reassembled() {
        let mut d = StreamDecoder::new();
        let bytes = frame_encode(track(50), Mode::Track, 0, true).unwrap();
        let (a, b) = bytes.split_at(17);
        assert!(d.feed(a).is_empty());
        assert_eq!(d.feed(b).len(), 1);
    }
}
