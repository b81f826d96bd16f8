//! Append-only frame logs and replay.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::frame::{decode_stream, encode_frame, DecodeError, Frame};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("write failed: {0}")]
    Write(std::io::Error),
    #[error(transparent)]
    Encode(#[from] super::frame::EncodeError),
}

/// `<scenario>-<seed>-<start>.jsonl`, with `start` in unix seconds.
pub fn log_file_name(scenario: &str, seed: u64, start_unix: u64) -> String {
    let clean: String = scenario
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}-{seed}-{start_unix}.jsonl")
}

/// Buffers encoded frames and appends them to a sink on `flush`. A file
/// sink is truncated when opened. Data that fails to write stays buffered
/// for the next attempt.
pub struct LogWriter {
    sink: Box<dyn Write + Send>,
    pending: Vec<u8>,
    failures: u32,
    path: Option<PathBuf>,
}

impl LogWriter {
    pub fn new(sink: Box<dyn Write + Send>) -> Self {
        LogWriter {
            sink,
            pending: Vec::new(),
            failures: 0,
            path: None,
        }
    }

    pub fn create(path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|source| StoreError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut w = Self::new(Box::new(file));
        w.path = Some(path.to_path_buf());
        Ok(w)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&mut self, frames: &[Frame]) -> Result<(), StoreError> {
        for f in frames {
            self.pending.extend(encode_frame(f)?);
        }
        Ok(())
    }

    /// Consecutive failed flushes.
    pub fn failures(&self) -> u32 {
        self.failures
    }

    pub fn pending_bytes(&self) -> usize {
        self.pending.len()
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let res = self
            .sink
            .write_all(&self.pending)
            .and_then(|_| self.sink.flush());
        match res {
            Ok(()) => {
                self.pending.clear();
                self.failures = 0;
                Ok(())
            }
            Err(e) => {
                self.failures += 1;
                Err(StoreError::Write(e))
            }
        }
    }
}

pub fn read_log(path: &Path) -> Result<(Vec<Frame>, Vec<DecodeError>), StoreError> {
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(decode_stream(&bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub frames: usize,
    pub warnings: Vec<DecodeError>,
}

/// Re-emits logged frames in order. With `speed > 0` the gaps between
/// recorded sim times are slept through, divided by `speed`; with `speed`
/// 0 frames go out as fast as possible. Corrupt lines are skipped.
pub fn replay(
    bytes: &[u8],
    speed: f64,
    mut sink: impl FnMut(&Frame) -> std::io::Result<()>,
) -> std::io::Result<ReplayOutcome> {
    let (frames, warnings) = decode_stream(bytes);
    for w in &warnings {
        log::warn!("skipping corrupt log line: {w}");
    }
    let mut prev: Option<f64> = None;
    for f in &frames {
        if speed > 0.0 {
            if let Some(p) = prev {
                let gap = (f.sim_time - p).max(0.0) / speed;
                if gap > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(gap));
                }
            }
            prev = Some(f.sim_time);
        }
        sink(f)?;
    }
    Ok(ReplayOutcome {
        frames: frames.len(),
        warnings,
    })
}

impl LogWriter {
    /// Opens `<dir>/<log_file_name>` for a run.
    pub fn for_run(dir: &Path, scenario: &str, seed: u64, start_unix: u64) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Self::create(&dir.join(log_file_name(scenario, seed, start_unix)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::FrameBody;
    use std::sync::{Arc, Mutex};

    fn frames(n: u64) -> Vec<Frame> {
        (0..n)
            .map(|i| Frame {
                seq: i,
                sim_time: i as f64 * 0.5,
                body: FrameBody::Mode {
                    state: "docked".into(),
                    node: None,
                    detail: Some(format!("tick {i}")),
                },
            })
            .collect()
    }

    #[test]
    fn persist_then_replay_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(log_file_name("default ward", 42, 1000));
        assert!(path.ends_with("default_ward-42-1000.jsonl"));
        let mut w = LogWriter::create(&path).unwrap();
        let fs = frames(20);
        w.append(&fs[..10]).unwrap();
        w.flush().unwrap();
        w.append(&fs[10..]).unwrap();
        w.flush().unwrap();

        let original = std::fs::read(&path).unwrap();
        let mut replayed = Vec::new();
        let out = replay(&original, 0.0, |f| {
            replayed.extend(encode_frame(f).unwrap());
            Ok(())
        })
        .unwrap();
        assert_eq!(out.frames, 20);
        assert!(out.warnings.is_empty());
        assert_eq!(replayed, original);
    }

    #[test]
    fn corrupt_line_is_skipped() {
        let mut bytes = Vec::new();
        for (i, f) in frames(6).iter().enumerate() {
            if i == 3 {
                bytes.extend(b"{\"v\":\"v1\",\"seq\":\"oops\"}\n");
            }
            bytes.extend(encode_frame(f).unwrap());
        }
        let mut seen = Vec::new();
        let out = replay(&bytes, 0.0, |f| {
            seen.push(f.seq);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.frames, 6);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn prefix_ending_at_newline_replays() {
        let mut bytes = Vec::new();
        for f in frames(5) {
            bytes.extend(encode_frame(&f).unwrap());
        }
        let cut = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(2).unwrap().0 + 1;
        let (fs, errs) = decode_stream(&bytes[..cut]);
        assert_eq!(fs.len(), 3);
        assert!(errs.is_empty());
    }

    struct Flaky {
        fail: Arc<Mutex<bool>>,
        data: Arc<Mutex<Vec<u8>>>,
    }

    impl Write for Flaky {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            if *self.fail.lock().unwrap() {
                return Err(std::io::Error::other("disk full"));
            }
            self.data.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn failed_flush_keeps_data() {
        let fail = Arc::new(Mutex::new(true));
        let data = Arc::new(Mutex::new(Vec::new()));
        let mut w = LogWriter::new(Box::new(Flaky {
            fail: fail.clone(),
            data: data.clone(),
        }));
        w.append(&frames(2)).unwrap();
        for i in 1..=3 {
            assert!(w.flush().is_err());
            assert_eq!(w.failures(), i);
        }
        *fail.lock().unwrap() = false;
        w.flush().unwrap();
        assert_eq!(w.failures(), 0);
        assert_eq!(decode_stream(&data.lock().unwrap()).0.len(), 2);
    }
}
