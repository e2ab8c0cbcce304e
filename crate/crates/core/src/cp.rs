//! Congestion point: a switch egress port with a FIFO byte queue that samples
//! arriving packets and emits feedback frames toward their sources.

use std::collections::VecDeque;

use thiserror::Error;

use crate::event::{RngStream, SimTime};

/// Identifier of a congestion point, carried in every feedback frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cpid(pub u32);

/// Address of an end host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HostAddr(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub flow: usize,
    pub src: HostAddr,
    pub size_bytes: u32,
    /// Index of the next egress port on the flow's path.
    pub hop: usize,
}

/// Feedback value of the boundary line: `-(qf) - w * dq`.
///
/// Negative values mean the port is congested.
pub fn compute_fb(qf: f64, dq: f64, w: f64) -> f64 {
    -qf - w * dq
}

/// Saturating round-to-nearest quantizer into a signed 8-bit code.
pub fn quantize(value: f64, scale: f64) -> i8 {
    debug_assert!(scale > 0.0);
    let code = (value / scale).round();
    code.clamp(i8::MIN as f64, i8::MAX as f64) as i8
}

pub fn dequantize(code: i8, scale: f64) -> f64 {
    code as f64 * scale
}

/// Quantization scale (packets per code unit) for signed 8-bit codes given
/// the buffer size in packets.
pub fn asm_scale(max_packets: f64) -> f64 {
    (max_packets / i8::MAX as f64).ceil().max(1.0)
}

/// Magnitude code of a negative QCN feedback value. Any congestion yields at
/// least one unit; the code saturates at `max_code`.
pub fn quantize_fb_magnitude(fb: f64, scale: f64, max_code: u8) -> u8 {
    debug_assert!(fb < 0.0);
    let code = (-fb / scale).ceil();
    code.clamp(1.0, max_code as f64) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackPayload {
    /// Queue offset and queue variation, carried separately.
    Asm { qf: i8, dq: i8 },
    /// Magnitude of the (negative) feedback value, 6 bits.
    Qcn { fb: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedbackFrame {
    pub cpid: Cpid,
    pub dst: HostAddr,
    pub payload: FeedbackPayload,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame length {0}, expected {WIRE_LEN}")]
    Length(usize),
    #[error("unknown frame type {0:#04x}")]
    Type(u8),
    #[error("QCN feedback code {0} does not fit in 6 bits")]
    FbRange(u8),
}

pub const WIRE_LEN: usize = 11;
const TYPE_ASM: u8 = 0x01;
const TYPE_QCN: u8 = 0x02;

impl FeedbackFrame {
    /// Wire layout, big-endian: `cpid(4) dst(4) type(1) payload(2)`.
    /// ASM payload is `qf, dq` as two's-complement bytes; QCN payload is
    /// `0x00, fb`.
    pub fn encode(&self) -> [u8; WIRE_LEN] {
        let mut out = [0u8; WIRE_LEN];
        out[0..4].copy_from_slice(&self.cpid.0.to_be_bytes());
        out[4..8].copy_from_slice(&self.dst.0.to_be_bytes());
        match self.payload {
            FeedbackPayload::Asm { qf, dq } => {
                out[8] = TYPE_ASM;
                out[9] = qf as u8;
                out[10] = dq as u8;
            }
            FeedbackPayload::Qcn { fb } => {
                out[8] = TYPE_QCN;
                out[10] = fb;
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() != WIRE_LEN {
            return Err(FrameError::Length(bytes.len()));
        }
        let cpid = Cpid(u32::from_be_bytes(bytes[0..4].try_into().unwrap()));
        let dst = HostAddr(u32::from_be_bytes(bytes[4..8].try_into().unwrap()));
        let payload = match bytes[8] {
            TYPE_ASM => FeedbackPayload::Asm {
                qf: bytes[9] as i8,
                dq: bytes[10] as i8,
            },
            TYPE_QCN => {
                if bytes[10] > 63 {
                    return Err(FrameError::FbRange(bytes[10]));
                }
                FeedbackPayload::Qcn { fb: bytes[10] }
            }
            t => return Err(FrameError::Type(t)),
        };
        Ok(FeedbackFrame { cpid, dst, payload })
    }
}

/// Which feedback the sampler produces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CpMode {
    /// Signed 8-bit `Q_f` and `ΔQ`, `scale` packets per unit; a frame is
    /// emitted whatever the sign of `F_b`.
    Asm { scale: f64 },
    /// 6-bit magnitude of `F_b`, `scale` packets per unit; frames only when
    /// `F_b < 0`.
    Qcn { scale: f64, max_code: u8 },
}

#[derive(Debug, Clone)]
pub struct CpConfig {
    pub mode: CpMode,
    pub q0_packets: f64,
    pub w: f64,
    pub p: f64,
    pub packet_size: u32,
    /// Skip packets whose source got the previous frame.
    pub dedup: bool,
    /// Age after which the dedup record is forgotten; `None` keeps it forever.
    pub dedup_window: Option<SimTime>,
}

/// Sampling state of a congestion point.
#[derive(Debug, Clone)]
pub struct CongestionPoint {
    pub cpid: Cpid,
    pub config: CpConfig,
    q_last_sample: u64,
    last_feedback: Option<(HostAddr, SimTime)>,
    rng: RngStream,
    pub samples: u64,
    pub frames: u64,
    pub suppressed: u64,
}

impl CongestionPoint {
    pub fn new(cpid: Cpid, config: CpConfig, rng: RngStream) -> Self {
        CongestionPoint {
            cpid,
            config,
            q_last_sample: 0,
            last_feedback: None,
            rng,
            samples: 0,
            frames: 0,
            suppressed: 0,
        }
    }

    pub fn q_last_sample(&self) -> u64 {
        self.q_last_sample
    }

    pub fn set_q_last_sample(&mut self, bytes: u64) {
        self.q_last_sample = bytes;
    }

    pub fn last_feedback_dst(&self) -> Option<HostAddr> {
        self.last_feedback.map(|(dst, _)| dst)
    }

    fn is_duplicate(&self, src: HostAddr, now: SimTime) -> bool {
        if !self.config.dedup {
            return false;
        }
        match self.last_feedback {
            Some((dst, at)) if dst == src => match self.config.dedup_window {
                Some(window) => now.saturating_sub(at) < window,
                None => true,
            },
            _ => false,
        }
    }

    /// Called once per arriving packet with the queue length (bytes) seen by
    /// that packet, before it is enqueued.
    pub fn maybe_sample(&mut self, pkt: &Packet, q_bytes: u64, now: SimTime) -> Option<FeedbackFrame> {
        if self.is_duplicate(pkt.src, now) {
            self.suppressed += 1;
            return None;
        }
        if !self.rng.bernoulli(self.config.p) {
            return None;
        }
        self.samples += 1;
        let size = self.config.packet_size as f64;
        let q = q_bytes as f64 / size;
        let qf = q - self.config.q0_packets;
        let dq = (q_bytes as f64 - self.q_last_sample as f64) / size;
        self.q_last_sample = q_bytes;

        let payload = match self.config.mode {
            CpMode::Asm { scale } => FeedbackPayload::Asm {
                qf: quantize(qf, scale),
                dq: quantize(dq, scale),
            },
            CpMode::Qcn { scale, max_code } => {
                let fb = compute_fb(qf, dq, self.config.w);
                if fb >= 0.0 {
                    return None;
                }
                FeedbackPayload::Qcn {
                    fb: quantize_fb_magnitude(fb, scale, max_code),
                }
            }
        };
        self.last_feedback = Some((pkt.src, now));
        self.frames += 1;
        Some(FeedbackFrame {
            cpid: self.cpid,
            dst: pkt.src,
            payload,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueue {
    Accepted,
    Dropped,
}

/// An egress port: FIFO byte queue drained at `capacity_bps`, with an
/// optional congestion point. Host NIC queues use the same type with an
/// unbounded buffer and no sampler.
#[derive(Debug, Clone)]
pub struct SwitchPort {
    pub capacity_bps: f64,
    pub buffer_bytes: u64,
    queue: VecDeque<Packet>,
    q_bytes: u64,
    pub busy: bool,
    pub cp: Option<CongestionPoint>,
    pub enqueued_bytes: u64,
    pub departed_bytes: u64,
    pub dropped_bytes: u64,
    pub drops: u64,
    /// Time the transmitter has been idle, accumulated at each restart.
    pub idle_time: SimTime,
    idle_since: Option<SimTime>,
}

impl SwitchPort {
    pub fn new(capacity_bps: f64, buffer_bytes: u64, cp: Option<CongestionPoint>) -> Self {
        SwitchPort {
            capacity_bps,
            buffer_bytes,
            queue: VecDeque::new(),
            q_bytes: 0,
            busy: false,
            cp,
            enqueued_bytes: 0,
            departed_bytes: 0,
            dropped_bytes: 0,
            drops: 0,
            idle_time: SimTime::ZERO,
            idle_since: Some(SimTime::ZERO),
        }
    }

    /// Queue length in bytes, including the packet being transmitted.
    pub fn q_bytes(&self) -> u64 {
        self.q_bytes
    }

    pub fn q_packets(&self, packet_size: u32) -> f64 {
        self.q_bytes as f64 / packet_size as f64
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn enqueue(&mut self, pkt: Packet) -> Enqueue {
        let size = pkt.size_bytes as u64;
        if self.q_bytes + size > self.buffer_bytes {
            self.drops += 1;
            self.dropped_bytes += size;
            return Enqueue::Dropped;
        }
        self.q_bytes += size;
        self.enqueued_bytes += size;
        self.queue.push_back(pkt);
        Enqueue::Accepted
    }

    /// Serialization time of `bytes` on this port.
    pub fn tx_time(&self, bytes: u32) -> SimTime {
        SimTime::from_secs_f64(bytes as f64 * 8.0 / self.capacity_bps)
    }

    /// Starts transmitting the head packet if idle; returns its size.
    pub fn start_transmission(&mut self, now: SimTime) -> Option<u32> {
        if self.busy {
            return None;
        }
        let size = self.queue.front()?.size_bytes;
        self.busy = true;
        if let Some(since) = self.idle_since.take() {
            self.idle_time = self.idle_time + now.saturating_sub(since);
        }
        Some(size)
    }

    /// Completes the in-flight transmission and hands back the packet.
    pub fn finish_transmission(&mut self, now: SimTime) -> Packet {
        let pkt = self.queue.pop_front().expect("transmission without a packet");
        self.q_bytes -= pkt.size_bytes as u64;
        self.departed_bytes += pkt.size_bytes as u64;
        self.busy = false;
        if self.queue.is_empty() {
            self.idle_since = Some(now);
        }
        pkt
    }

    /// Idle time up to `now`, including a currently running idle period.
    pub fn idle_time_at(&self, now: SimTime) -> SimTime {
        match self.idle_since {
            Some(since) => self.idle_time + now.saturating_sub(since),
            None => self.idle_time,
        }
    }
}
