//! Cloud-side stand-in: framing, periodic publishing, latency, command intake,
//! persistence and a websocket service.

mod frame;
pub mod server;
mod store;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::command::Command;

pub use frame::{
    decode_command, decode_frame, decode_stream, encode_command, encode_frame, DecodeError,
    EncodeError, Frame, FrameBody, Rejected, WIRE_VERSION,
};
pub use store::{log_file_name, read_log, replay, LogWriter, ReplayOutcome, StoreError};

pub const DEFAULT_PORT: u16 = 7071;
/// Robot-internal serial link delay, milliseconds.
pub const SERIAL_DELAY_MS: f64 = 36.0;
/// Per-connection outbound queue limit.
pub const QUEUE_LIMIT: usize = 10_000;

/// Uniform cloud-link delay.
#[derive(Debug, Clone)]
pub struct LatencyModel {
    pub min_ms: f64,
    pub max_ms: f64,
    rng: ChaCha8Rng,
}

impl LatencyModel {
    pub fn new(min_ms: f64, max_ms: f64, seed: u64) -> Self {
        assert!(min_ms <= max_ms, "latency bounds reversed");
        LatencyModel {
            min_ms,
            max_ms,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// 500 to 1200 ms.
    pub fn standard(seed: u64) -> Self {
        Self::new(500.0, 1200.0, seed)
    }

    pub fn sample_ms(&mut self) -> f64 {
        if self.min_ms == self.max_ms {
            return self.min_ms;
        }
        self.rng.random_range(self.min_ms..=self.max_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PublisherConfig {
    pub update_period_ms: f64,
    pub batch: bool,
}

impl Default for PublisherConfig {
    fn default() -> Self {
        PublisherConfig {
            update_period_ms: 1100.0,
            batch: true,
        }
    }
}

const TIME_EPS: f64 = 1e-9;

/// Stamps outgoing frames. Vitals and pose frames wait for the next update
/// period; everything else goes out at once.
#[derive(Debug, Clone)]
pub struct Publisher {
    cfg: PublisherConfig,
    next_flush: f64,
    pending: Vec<FrameBody>,
    seq: u64,
    out: Vec<Frame>,
    batches: u64,
}

impl Publisher {
    pub fn new(cfg: PublisherConfig) -> Self {
        assert!(cfg.update_period_ms > 0.0, "update period must be positive");
        Publisher {
            next_flush: cfg.update_period_ms / 1000.0,
            cfg,
            pending: Vec::new(),
            seq: 0,
            out: Vec::new(),
            batches: 0,
        }
    }

    fn stamp(&mut self, now: f64, body: FrameBody) {
        self.out.push(Frame {
            seq: self.seq,
            sim_time: now,
            body,
        });
        self.seq += 1;
    }

    pub fn emit(&mut self, now: f64, body: FrameBody) {
        if self.cfg.batch && body.is_batched() {
            self.pending.push(body);
        } else {
            self.stamp(now, body);
        }
    }

    /// Flushes a batch if an update period boundary has been reached.
    /// `pose` supplies the robot snapshot included in every batch.
    pub fn tick(&mut self, now: f64, pose: impl FnOnce() -> FrameBody) -> bool {
        if now + TIME_EPS < self.next_flush {
            return false;
        }
        let period = self.cfg.update_period_ms / 1000.0;
        while self.next_flush <= now + TIME_EPS {
            self.next_flush += period;
        }
        let pending = std::mem::take(&mut self.pending);
        for body in pending {
            self.stamp(now, body);
        }
        self.stamp(now, pose());
        self.batches += 1;
        true
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn drain(&mut self) -> Vec<Frame> {
        std::mem::take(&mut self.out)
    }
}

/// A group of frames leaving together and the time it reaches subscribers.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub sent_at: f64,
    pub deliver_at: f64,
    pub frames: Vec<Frame>,
}

/// Delivery schedule for frames generated at the given times over `[0, until)`.
/// Batched kinds leave at update period boundaries; each delivery adds the
/// serial delay and a latency sample; delivery times never go backwards.
pub fn publish(
    input: &[(f64, FrameBody)],
    cfg: &PublisherConfig,
    latency: &mut LatencyModel,
    until: f64,
) -> Vec<Delivery> {
    let period = cfg.update_period_ms / 1000.0;
    let mut sorted: Vec<&(f64, FrameBody)> = input.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut groups: Vec<(f64, Vec<FrameBody>)> = Vec::new();
    let mut pending: Vec<FrameBody> = Vec::new();
    let mut next_flush = period;
    let mut flush_until = |t: f64, pending: &mut Vec<FrameBody>, groups: &mut Vec<(f64, Vec<FrameBody>)>| {
        while next_flush <= t + TIME_EPS && next_flush < until - TIME_EPS {
            if !pending.is_empty() {
                groups.push((next_flush, std::mem::take(pending)));
            }
            next_flush += period;
        }
    };
    for (t, body) in sorted {
        if *t >= until {
            break;
        }
        flush_until(*t, &mut pending, &mut groups);
        if cfg.batch && body.is_batched() {
            pending.push(body.clone());
        } else {
            groups.push((*t, vec![body.clone()]));
        }
    }
    flush_until(until, &mut pending, &mut groups);

    let mut seq = 0;
    let mut last = f64::NEG_INFINITY;
    groups
        .into_iter()
        .map(|(sent_at, bodies)| {
            let deliver_at = (sent_at + (SERIAL_DELAY_MS + latency.sample_ms()) / 1000.0).max(last);
            last = deliver_at;
            let frames = bodies
                .into_iter()
                .map(|body| {
                    seq += 1;
                    Frame {
                        seq: seq - 1,
                        sim_time: sent_at,
                        body,
                    }
                })
                .collect();
            Delivery {
                sent_at,
                deliver_at,
                frames,
            }
        })
        .collect()
}

/// A command on its way to the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Inbound {
    pub arrival: f64,
    pub issued_at: f64,
    pub payload: Result<Command, Rejected>,
}

/// Uplink from operators to the controller inbox.
#[derive(Debug, Clone)]
pub struct CommandChannel {
    latency: LatencyModel,
    pending: Vec<Inbound>,
}

impl CommandChannel {
    pub fn new(latency: LatencyModel) -> Self {
        CommandChannel {
            latency,
            pending: Vec::new(),
        }
    }

    /// Scripted command: reaches the controller after cloud latency and the
    /// serial link.
    pub fn send(&mut self, issued_at: f64, payload: Result<Command, Rejected>) {
        let arrival = issued_at + (self.latency.sample_ms() + SERIAL_DELAY_MS) / 1000.0;
        self.push(Inbound {
            arrival,
            issued_at,
            payload,
        });
    }

    /// Command that already crossed a real network.
    pub fn deliver_now(&mut self, now: f64, payload: Result<Command, Rejected>) {
        self.push(Inbound {
            arrival: now,
            issued_at: now,
            payload,
        });
    }

    fn push(&mut self, inbound: Inbound) {
        let at = self
            .pending
            .partition_point(|p| p.arrival <= inbound.arrival);
        self.pending.insert(at, inbound);
    }

    pub fn due(&mut self, now: f64) -> Vec<Inbound> {
        let n = self.pending.partition_point(|p| p.arrival <= now + TIME_EPS);
        self.pending.drain(..n).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Per-subscriber outbound queue. Frames are numbered when sent; when the
/// queue overflows the oldest frames are dropped, and the next send starts
/// with an alert whose `count` equals the gap left in the numbering.
#[derive(Debug, Clone)]
pub struct OutQueue {
    frames: VecDeque<Frame>,
    cap: usize,
    dropped: u64,
    next_seq: u64,
}

impl OutQueue {
    pub fn new(cap: usize) -> Self {
        OutQueue {
            frames: VecDeque::new(),
            cap: cap.max(1),
            dropped: 0,
            next_seq: 0,
        }
    }

    pub fn push(&mut self, frame: Frame) {
        if self.frames.len() >= self.cap {
            self.frames.pop_front();
            self.dropped += 1;
        }
        self.frames.push_back(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty() && self.dropped == 0
    }

    /// Everything queued, renumbered for this connection.
    pub fn take(&mut self) -> Vec<Frame> {
        let mut out = Vec::with_capacity(self.frames.len() + 1);
        if self.dropped > 0 {
            let sim_time = self.frames.front().map(|f| f.sim_time).unwrap_or(0.0);
            out.push(Frame {
                seq: self.next_seq,
                sim_time,
                body: FrameBody::Alert {
                    code: "frames_dropped".into(),
                    message: format!("{} frames dropped for a slow subscriber", self.dropped),
                    patient: None,
                    count: Some(self.dropped),
                },
            });
            self.next_seq += 1 + self.dropped;
            self.dropped = 0;
        }
        for mut f in self.frames.drain(..) {
            f.seq = self.next_seq;
            self.next_seq += 1;
            out.push(f);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::NodeId;

    fn vitals() -> FrameBody {
        FrameBody::Vitals {
            patient: NodeId::new(1).unwrap(),
            hr: 70.0,
            spo2: 98.0,
            temp_f: 98.6,
            measured_at: 0.0,
            state: "normal".into(),
            mode: crate::careplan::DispenseMode::Routine,
        }
    }

    fn mode() -> FrameBody {
        FrameBody::Mode {
            state: "docked".into(),
            node: None,
            detail: None,
        }
    }

    #[test]
    fn latency_range_and_reproducibility() {
        let mut a = LatencyModel::standard(3);
        let mut b = LatencyModel::standard(3);
        for _ in 0..1000 {
            let x = a.sample_ms();
            assert!((500.0..=1200.0).contains(&x));
            assert_eq!(x, b.sample_ms());
        }
    }

    #[test]
    fn ten_seconds_give_nine_batches() {
        let input: Vec<(f64, FrameBody)> = (0..100).map(|i| (i as f64 * 0.1, vitals())).collect();
        let d = publish(&input, &PublisherConfig::default(), &mut LatencyModel::standard(1), 10.0);
        assert_eq!(d.len(), 9);
        assert!(d.windows(2).all(|w| w[1].deliver_at >= w[0].deliver_at));
        for x in &d {
            let lag = x.deliver_at - x.sent_at;
            assert!(lag >= 0.536 - 1e-9);
        }
    }

    #[test]
    fn immediate_frames_keep_order() {
        let input = vec![(0.5, mode()), (0.6, mode()), (0.7, vitals())];
        let d = publish(&input, &PublisherConfig::default(), &mut LatencyModel::standard(9), 2.0);
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].sent_at, 0.5);
        assert!((d[2].sent_at - 1.1).abs() < 1e-12);
        let seqs: Vec<u64> = d.iter().flat_map(|x| x.frames.iter().map(|f| f.seq)).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
    }

    #[test]
    fn publisher_batches_on_period() {
        let mut p = Publisher::new(PublisherConfig::default());
        let dt = 0.02;
        for i in 0..500 {
            let t = i as f64 * dt;
            if i % 10 == 0 {
                p.emit(t, vitals());
            }
            if i == 7 {
                p.emit(t, mode());
            }
            p.tick(t, || FrameBody::Pose {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                battery: 1.0,
                camera_pan: 0.0,
            });
        }
        let frames = p.drain();
        assert_eq!(p.batches(), 9);
        assert!(frames.windows(2).all(|w| w[1].seq == w[0].seq + 1 && w[1].sim_time >= w[0].sim_time));
        assert_eq!(frames.iter().filter(|f| f.body.type_name() == "mode").count(), 1);
    }

    #[test]
    fn channel_orders_by_arrival() {
        let mut ch = CommandChannel::new(LatencyModel::new(500.0, 500.0, 0));
        let cmd = |id| {
            Ok(Command {
                id,
                kind: crate::command::CommandKind::ReturnToDock,
                issued_at: 0.0,
            })
        };
        ch.send(1.0, cmd(1));
        ch.send(0.5, cmd(2));
        assert!(ch.due(1.0).is_empty());
        let got = ch.due(1.1);
        assert_eq!(got.len(), 1);
        assert!((got[0].arrival - 1.036).abs() < 1e-12);
        assert_eq!(ch.due(2.0).len(), 1);
        assert!(ch.is_empty());
    }

    #[test]
    fn queue_gap_matches_alert() {
        let mut q = OutQueue::new(5);
        for i in 0..3 {
            q.push(Frame { seq: 0, sim_time: i as f64, body: mode() });
        }
        let first = q.take();
        assert_eq!(first.iter().map(|f| f.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
        for i in 0..12 {
            q.push(Frame { seq: 0, sim_time: i as f64, body: mode() });
        }
        let second = q.take();
        let FrameBody::Alert { count: Some(n), .. } = &second[0].body else {
            panic!("expected drop alert");
        };
        assert_eq!(*n, 7);
        assert_eq!(second[0].seq, 3);
        assert_eq!(second[1].seq - second[0].seq - 1, *n);
        assert_eq!(second.len(), 6);
    }
}
