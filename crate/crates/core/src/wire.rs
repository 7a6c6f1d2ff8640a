//! Edge/cloud wire protocol.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! u32 length      bytes that follow this field (= 41 + payload length)
//! u8  tag         1 FrameBatch, 2 PseudoLabels, 3 ModelUpdate, 4 Ack, 5 Heartbeat
//! u64 seq
//! [u8; 32] hash   SHA-256 of the payload
//! payload
//! ```
//!
//! The session layer numbers every non-Ack message from 1 upwards per
//! direction, delivers in order, drops duplicates and answers each data
//! frame with a cumulative Ack whose `seq` is the last in-order sequence
//! number received. Unacknowledged messages are retransmitted go-back-N
//! style on timeout or reconnect.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const HEADER_LEN: usize = 4 + 1 + 8 + 32;
pub const DEFAULT_MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload hash mismatch")]
    HashMismatch,
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("payload of {0} bytes exceeds the maximum message size")]
    TooLarge(usize),
    #[error("frame length field {0} is smaller than the fixed header")]
    BadLength(u32),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("frame of {frame} bytes can never fit a window budget of {budget} bytes")]
    ExceedsBudget { frame: u64, budget: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    FrameBatch,
    PseudoLabels,
    ModelUpdate,
    Ack,
    Heartbeat,
}

impl MessageKind {
    pub fn tag(self) -> u8 {
        match self {
            MessageKind::FrameBatch => 1,
            MessageKind::PseudoLabels => 2,
            MessageKind::ModelUpdate => 3,
            MessageKind::Ack => 4,
            MessageKind::Heartbeat => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, WireError> {
        Ok(match tag {
            1 => MessageKind::FrameBatch,
            2 => MessageKind::PseudoLabels,
            3 => MessageKind::ModelUpdate,
            4 => MessageKind::Ack,
            5 => MessageKind::Heartbeat,
            t => return Err(WireError::UnknownTag(t)),
        })
    }
}

pub type PayloadHash = [u8; 32];

pub fn payload_hash(payload: &[u8]) -> PayloadHash {
    Sha256::digest(payload).into()
}

/// Immutable once built; the hash always matches the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    kind: MessageKind,
    seq: u64,
    payload: Vec<u8>,
    hash: PayloadHash,
}

impl Message {
    pub fn new(kind: MessageKind, seq: u64, payload: Vec<u8>) -> Self {
        let hash = payload_hash(&payload);
        Self { kind, seq, payload, hash }
    }

    pub fn ack(seq: u64) -> Self {
        Self::new(MessageKind::Ack, seq, Vec::new())
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }
    pub fn seq(&self) -> u64 {
        self.seq
    }
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
    pub fn into_payload(self) -> Vec<u8> {
        self.payload
    }
    pub fn hash(&self) -> &PayloadHash {
        &self.hash
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode(m: &Message) -> Result<Vec<u8>, WireError> {
    encode_with_limit(m, DEFAULT_MAX_PAYLOAD)
}

pub fn encode_with_limit(m: &Message, max_payload: usize) -> Result<Vec<u8>, WireError> {
    if m.payload.len() > max_payload {
        return Err(WireError::TooLarge(m.payload.len()));
    }
    let len = (HEADER_LEN - 4 + m.payload.len()) as u32;
    let mut out = Vec::with_capacity(HEADER_LEN + m.payload.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.push(m.kind.tag());
    out.extend_from_slice(&m.seq.to_be_bytes());
    out.extend_from_slice(&m.hash);
    out.extend_from_slice(&m.payload);
    Ok(out)
}

/// Decodes the frame at the start of `buf`. `Ok(None)` means more bytes
/// are needed; otherwise returns the message and the bytes consumed.
pub fn decode_prefix(buf: &[u8], max_payload: usize) -> Result<Option<(Message, usize)>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    if (len as usize) < HEADER_LEN - 4 {
        return Err(WireError::BadLength(len));
    }
    let payload_len = len as usize - (HEADER_LEN - 4);
    if payload_len > max_payload {
        return Err(WireError::TooLarge(payload_len));
    }
    let total = 4 + len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let kind = MessageKind::from_tag(buf[4])?;
    let mut seq = [0u8; 8];
    seq.copy_from_slice(&buf[5..13]);
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&buf[13..45]);
    let payload = buf[HEADER_LEN..total].to_vec();
    if payload_hash(&payload) != hash {
        return Err(WireError::HashMismatch);
    }
    Ok(Some((Message { kind, seq: u64::from_be_bytes(seq), payload, hash }, total)))
}

/// Decodes exactly one frame.
pub fn decode(buf: &[u8]) -> Result<Message, WireError> {
    match decode_prefix(buf, DEFAULT_MAX_PAYLOAD)? {
        Some((m, used)) if used == buf.len() => Ok(m),
        Some((_, used)) => Err(WireError::TrailingBytes(buf.len() - used)),
        None => {
            let needed = if buf.len() < 4 {
                HEADER_LEN
            } else {
                4 + u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize
            };
            Err(WireError::Truncated { needed, have: buf.len() })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    /// Charged to the current window; the caller transmits these bytes.
    Sent(Vec<u8>),
    /// Queued until a later window has room.
    Deferred,
}

/// Per-window byte budget with a FIFO of deferred frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthLedger {
    pub window_start: f64,
    pub window_secs: f64,
    pub budget: u64,
    pub sent_in_window: u64,
    pub total_sent: u64,
    #[serde(skip)]
    queue: VecDeque<Vec<u8>>,
}

impl BandwidthLedger {
    pub fn new(budget: u64, window_secs: f64, start: f64) -> Self {
        Self { window_start: start, window_secs, budget, sent_in_window: 0, total_sent: 0, queue: VecDeque::new() }
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.sent_in_window
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    fn roll(&mut self, now: f64) {
        if self.window_secs > 0.0 && now >= self.window_start + self.window_secs {
            let windows = crate::math::floor((now - self.window_start) / self.window_secs);
            self.window_start += windows * self.window_secs;
            self.sent_in_window = 0;
        }
    }

    /// Start of the window after the current one.
    pub fn next_window(&self) -> f64 {
        self.window_start + self.window_secs
    }

    pub fn send_with_budget(&mut self, frame: Vec<u8>, now: f64) -> Result<SendOutcome, WireError> {
        let size = frame.len() as u64;
        if size > self.budget {
            return Err(WireError::ExceedsBudget { frame: size, budget: self.budget });
        }
        self.roll(now);
        if self.queue.is_empty() && size <= self.remaining() {
            self.charge(size);
            Ok(SendOutcome::Sent(frame))
        } else {
            self.queue.push_back(frame);
            Ok(SendOutcome::Deferred)
        }
    }

    /// Releases deferred frames, oldest first, that fit the window at `now`.
    pub fn release(&mut self, now: f64) -> Vec<Vec<u8>> {
        self.roll(now);
        let mut out = Vec::new();
        while let Some(front) = self.queue.front() {
            let size = front.len() as u64;
            if size > self.remaining() {
                break;
            }
            self.charge(size);
            out.extend(self.queue.pop_front());
        }
        out
    }

    fn charge(&mut self, size: u64) {
        self.sent_in_window += size;
        self.total_sent += size;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionStats {
    pub data_sent: u64,
    pub retransmitted: u64,
    pub delivered: u64,
    pub duplicates: u64,
    pub out_of_order: u64,
    pub corrupt: u64,
    pub acks_sent: u64,
}

/// One side of a reliable session, independent of the medium.
#[derive(Debug, Clone)]
pub struct Endpoint {
    next_seq: u64,
    window: usize,
    max_payload: usize,
    pending: VecDeque<Message>,
    in_flight: VecDeque<Message>,
    expected: u64,
    outgoing: VecDeque<Vec<u8>>,
    inbox: VecDeque<Message>,
    rx_buf: Vec<u8>,
    stats: SessionStats,
}

impl Default for Endpoint {
    fn default() -> Self {
        Self::new(32)
    }
}

impl Endpoint {
    pub fn new(window: usize) -> Self {
        Self {
            next_seq: 1,
            window: window.max(1),
            max_payload: DEFAULT_MAX_PAYLOAD,
            pending: VecDeque::new(),
            in_flight: VecDeque::new(),
            expected: 1,
            outgoing: VecDeque::new(),
            inbox: VecDeque::new(),
            rx_buf: Vec::new(),
            stats: SessionStats::default(),
        }
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    /// Queues a message; the endpoint assigns its sequence number.
    pub fn send(&mut self, kind: MessageKind, payload: Vec<u8>) -> Result<u64, WireError> {
        if kind == MessageKind::Ack {
            return Ok(0);
        }
        if payload.len() > self.max_payload {
            return Err(WireError::TooLarge(payload.len()));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push_back(Message::new(kind, seq, payload));
        self.fill_window();
        Ok(seq)
    }

    fn fill_window(&mut self) {
        while self.in_flight.len() < self.window {
            let Some(m) = self.pending.pop_front() else { break };
            self.push_frame(&m);
            self.stats.data_sent += 1;
            self.in_flight.push_back(m);
        }
    }

    fn push_frame(&mut self, m: &Message) {
        // Payload size was checked in `send`.
        if let Ok(f) = encode_with_limit(m, self.max_payload) {
            self.outgoing.push_back(f);
        }
    }

    /// Next encoded frame to put on the medium.
    pub fn poll_transmit(&mut self) -> Option<Vec<u8>> {
        self.outgoing.pop_front()
    }

    /// Next in-order message for the application.
    pub fn recv(&mut self) -> Option<Message> {
        self.inbox.pop_front()
    }

    /// Handles one complete frame. Corrupt frames are counted and dropped.
    pub fn on_frame(&mut self, frame: &[u8]) {
        match decode_prefix(frame, self.max_payload) {
            Ok(Some((m, _))) => self.on_message(m),
            _ => self.stats.corrupt += 1,
        }
    }

    /// Feeds raw stream bytes; complete frames are processed as they appear.
    pub fn on_bytes(&mut self, bytes: &[u8]) -> Result<(), WireError> {
        self.rx_buf.extend_from_slice(bytes);
        loop {
            match decode_prefix(&self.rx_buf, self.max_payload) {
                Ok(Some((m, used))) => {
                    self.rx_buf.drain(..used);
                    self.on_message(m);
                }
                Ok(None) => return Ok(()),
                Err(WireError::HashMismatch) => {
                    // Skip the damaged frame; its length field was readable.
                    let len = u32::from_be_bytes([self.rx_buf[0], self.rx_buf[1], self.rx_buf[2], self.rx_buf[3]]);
                    self.rx_buf.drain(..4 + len as usize);
                    self.stats.corrupt += 1;
                }
                Err(e) => {
                    self.rx_buf.clear();
                    return Err(e);
                }
            }
        }
    }

    fn on_message(&mut self, m: Message) {
        if m.kind() == MessageKind::Ack {
            while self.in_flight.front().is_some_and(|f| f.seq() <= m.seq()) {
                self.in_flight.pop_front();
            }
            self.fill_window();
            return;
        }
        if m.seq() == self.expected {
            self.expected += 1;
            self.stats.delivered += 1;
            self.inbox.push_back(m);
        } else if m.seq() < self.expected {
            self.stats.duplicates += 1;
        } else {
            self.stats.out_of_order += 1;
        }
        self.stats.acks_sent += 1;
        let ack = Message::ack(self.expected - 1);
        self.push_frame(&ack);
    }

    /// Retransmits everything in flight.
    pub fn on_timeout(&mut self) {
        let resend: Vec<Message> = self.in_flight.iter().cloned().collect();
        for m in &resend {
            self.push_frame(m);
            self.stats.retransmitted += 1;
        }
    }

    /// After the medium was re-established: drop stale outgoing bytes and
    /// partial input, then resume from the last acknowledged message.
    pub fn reconnect(&mut self) {
        self.outgoing.clear();
        self.rx_buf.clear();
        self.on_timeout();
    }

    /// Nothing queued, nothing awaiting acknowledgement.
    pub fn is_idle(&self) -> bool {
        self.pending.is_empty() && self.in_flight.is_empty()
    }

    pub fn has_output(&self) -> bool {
        !self.outgoing.is_empty()
    }

    /// Highest sequence number the peer has acknowledged.
    pub fn last_acked(&self) -> u64 {
        match self.in_flight.front().or(self.pending.front()) {
            Some(m) => m.seq() - 1,
            None => self.next_seq - 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn heartbeat_frame_is_45_bytes() {
        let f = encode(&Message::new(MessageKind::Heartbeat, 7, vec![])).unwrap();
        assert_eq!(f.len(), 45);
        assert_eq!(&f[..4], &41u32.to_be_bytes());
        assert_eq!(f[4], 5);
        assert_eq!(&f[5..13], &7u64.to_be_bytes());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let m = Message::new(MessageKind::FrameBatch, 1, vec![1, 2, 3]);
        let f = encode(&m).unwrap();
        assert_eq!(decode(&f).unwrap(), m);
        assert!(matches!(decode(&f[..10]), Err(WireError::Truncated { .. })));
        assert!(matches!(decode(&f[..f.len() - 1]), Err(WireError::Truncated { .. })));
        let mut flipped = f.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert_eq!(decode(&flipped), Err(WireError::HashMismatch));
        let mut tag = f.clone();
        tag[4] = 9;
        assert_eq!(decode(&tag), Err(WireError::UnknownTag(9)));
        let mut extra = f;
        extra.push(0);
        assert_eq!(decode(&extra), Err(WireError::TrailingBytes(1)));
    }

    #[test]
    fn oversized_payload_rejected() {
        let m = Message::new(MessageKind::FrameBatch, 1, vec![0; 11]);
        assert_eq!(encode_with_limit(&m, 10), Err(WireError::TooLarge(11)));
    }

    #[test]
    fn ledger_examples() {
        let mut l = BandwidthLedger::new(1000, 600.0, 0.0);
        assert!(matches!(l.send_with_budget(vec![0; 900], 1.0).unwrap(), SendOutcome::Sent(_)));
        assert_eq!(l.remaining(), 100);
        assert_eq!(l.send_with_budget(vec![1; 900], 2.0).unwrap(), SendOutcome::Deferred);
        assert!(matches!(l.send_with_budget(vec![0; 1001], 3.0), Err(WireError::ExceedsBudget { .. })));
        // A small frame still queues behind the deferred one.
        assert_eq!(l.send_with_budget(vec![2; 50], 4.0).unwrap(), SendOutcome::Deferred);
        assert!(l.release(599.0).is_empty());
        let out = l.release(600.0);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0][0], 1);
        assert_eq!(l.remaining(), 50);
    }

    #[test]
    fn endpoints_exchange_in_order() {
        let (mut a, mut b) = (Endpoint::new(4), Endpoint::new(4));
        for i in 0..10u8 {
            a.send(MessageKind::FrameBatch, vec![i]).unwrap();
        }
        let mut got = Vec::new();
        for _ in 0..100 {
            while let Some(f) = a.poll_transmit() {
                b.on_frame(&f);
            }
            while let Some(f) = b.poll_transmit() {
                a.on_frame(&f);
            }
            while let Some(m) = b.recv() {
                got.push(m.payload()[0]);
            }
            if a.is_idle() {
                break;
            }
        }
        assert_eq!(got, (0..10).collect::<Vec<u8>>());
        assert!(a.is_idle());
    }

    #[test]
    fn duplicates_are_dropped() {
        let (mut a, mut b) = (Endpoint::new(8), Endpoint::new(8));
        a.send(MessageKind::Heartbeat, vec![]).unwrap();
        let f = a.poll_transmit().unwrap();
        b.on_frame(&f);
        b.on_frame(&f);
        assert!(b.recv().is_some());
        assert!(b.recv().is_none());
        assert_eq!(b.stats().duplicates, 1);
    }

    #[test]
    fn stream_bytes_reassemble() {
        let (mut a, mut b) = (Endpoint::new(8), Endpoint::new(8));
        a.send(MessageKind::FrameBatch, vec![9; 100]).unwrap();
        a.send(MessageKind::FrameBatch, vec![8; 3]).unwrap();
        let mut stream = Vec::new();
        while let Some(f) = a.poll_transmit() {
            stream.extend(f);
        }
        for chunk in stream.chunks(7) {
            b.on_bytes(chunk).unwrap();
        }
        assert_eq!(b.recv().unwrap().payload(), &[9; 100][..]);
        assert_eq!(b.recv().unwrap().payload(), &[8; 3][..]);
    }
}
