//! Media for the wire session: a seeded lossy in-process pipe and TCP, plus
//! the payload layouts carried over them.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use rads_core::edge::UploadCandidate;
use rads_core::math::rng_for;
use rads_core::raster::RasterImage;
use rads_core::wire::{decode, encode, BandwidthLedger, Endpoint, Message, MessageKind, SendOutcome, SessionStats};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pnm;

/// Moves encoded frames between two endpoints.
pub trait Medium {
    fn transmit(&mut self, frame: &[u8]) -> io::Result<()>;
    /// Bytes that arrived within `timeout`, `Ok(None)` if none did.
    /// `UnexpectedEof` once the peer is gone.
    fn receive(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>>;
    /// Whether `receive` yields whole frames (datagrams) or stream bytes.
    fn framed(&self) -> bool;
}

/// One end of an in-process pipe that drops each outgoing frame with a
/// fixed probability.
pub struct LossyPipe {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    loss: f64,
    rng: ChaCha8Rng,
    pub dropped: u64,
}

impl LossyPipe {
    pub fn pair(loss: f64, seed: u64) -> (Self, Self) {
        let (atx, brx) = mpsc::channel();
        let (btx, arx) = mpsc::channel();
        let a = Self { tx: atx, rx: arx, loss, rng: rng_for(seed, &[1]), dropped: 0 };
        let b = Self { tx: btx, rx: brx, loss, rng: rng_for(seed, &[2]), dropped: 0 };
        (a, b)
    }
}

impl Medium for LossyPipe {
    fn transmit(&mut self, frame: &[u8]) -> io::Result<()> {
        if self.loss > 0.0 && self.rng.random_bool(self.loss) {
            self.dropped += 1;
            return Ok(());
        }
        // A vanished peer looks like loss to the sender; the receiver side
        // reports the disconnect.
        let _ = self.tx.send(frame.to_vec());
        Ok(())
    }

    fn receive(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        match self.rx.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(io::ErrorKind::UnexpectedEof.into()),
        }
    }

    fn framed(&self) -> bool {
        true
    }
}

pub struct TcpMedium {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl TcpMedium {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream, buf: vec![0; 64 * 1024] })
    }
}

impl Medium for TcpMedium {
    fn transmit(&mut self, frame: &[u8]) -> io::Result<()> {
        self.stream.write_all(frame)
    }

    fn receive(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        match self.stream.read(&mut self.buf) {
            Ok(0) => Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => Ok(Some(self.buf[..n].to_vec())),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn framed(&self) -> bool {
        false
    }
}

/// Retransmission timing. The wait doubles on every silent timeout and
/// resets when anything arrives.
#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub initial: Duration,
    pub max: Duration,
    /// Silence after which `recv` gives up.
    pub deadline: Duration,
}

impl Timing {
    pub fn in_process() -> Self {
        Self { initial: Duration::from_millis(2), max: Duration::from_millis(250), deadline: Duration::from_secs(600) }
    }

    pub fn network(timeout_ms: u64) -> Self {
        Self {
            initial: Duration::from_millis(timeout_ms.max(1)),
            max: Duration::from_millis(timeout_ms.max(1) * 16),
            deadline: Duration::from_secs(600),
        }
    }
}

/// A reliable session: [`Endpoint`] bound to a medium.
pub struct Session<M: Medium> {
    ep: Endpoint,
    medium: M,
    timing: Timing,
    closed: bool,
}

impl<M: Medium> Session<M> {
    pub fn new(medium: M, window: usize, timing: Timing) -> Self {
        Self { ep: Endpoint::new(window), medium, timing, closed: false }
    }

    pub fn stats(&self) -> SessionStats {
        self.ep.stats()
    }

    pub fn medium(&self) -> &M {
        &self.medium
    }

    pub fn send(&mut self, kind: MessageKind, payload: Vec<u8>) -> Result<u64> {
        let seq = self.ep.send(kind, payload)?;
        self.flush()?;
        Ok(seq)
    }

    fn flush(&mut self) -> Result<()> {
        while let Some(f) = self.ep.poll_transmit() {
            if self.closed {
                continue;
            }
            if let Err(e) = self.medium.transmit(&f) {
                if matches!(e.kind(), io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset) {
                    self.closed = true;
                } else {
                    return Err(e).context("transmitting frame");
                }
            }
        }
        Ok(())
    }

    /// Handles one round of input; false on silence.
    fn pump(&mut self, wait: Duration) -> Result<bool> {
        if self.closed {
            bail!("session closed by peer");
        }
        let got = match self.medium.receive(wait) {
            Ok(Some(bytes)) => {
                if self.medium.framed() {
                    self.ep.on_frame(&bytes);
                } else {
                    self.ep.on_bytes(&bytes)?;
                }
                true
            }
            Ok(None) => {
                self.ep.on_timeout();
                false
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                self.closed = true;
                false
            }
            Err(e) => return Err(e).context("receiving"),
        };
        self.flush()?;
        Ok(got)
    }

    /// Next in-order message from the peer.
    pub fn recv(&mut self) -> Result<Message> {
        let mut wait = self.timing.initial;
        let mut silent = Duration::ZERO;
        loop {
            if let Some(m) = self.ep.recv() {
                return Ok(m);
            }
            if self.closed {
                bail!("peer closed the session");
            }
            let start = Instant::now();
            if self.pump(wait)? {
                wait = self.timing.initial;
                silent = Duration::ZERO;
            } else {
                silent += start.elapsed();
                wait = (wait * 2).min(self.timing.max);
                if silent > self.timing.deadline {
                    bail!("session timed out after {:?} of silence", silent);
                }
            }
        }
    }

    /// Waits until everything sent has been acknowledged or the peer hung up.
    pub fn drain(&mut self) -> Result<()> {
        let mut wait = self.timing.initial;
        let mut silent = Duration::ZERO;
        while !self.ep.is_idle() && !self.closed {
            let start = Instant::now();
            if self.pump(wait)? {
                wait = self.timing.initial;
                silent = Duration::ZERO;
            } else {
                silent += start.elapsed();
                wait = (wait * 2).min(self.timing.max);
                if silent > self.timing.deadline {
                    bail!("session timed out waiting for acknowledgements");
                }
            }
        }
        Ok(())
    }

    /// Keeps acknowledging the peer until it hangs up or `linger` passes.
    pub fn linger(&mut self, linger: Duration) -> Result<()> {
        let end = Instant::now() + linger;
        while !self.closed && Instant::now() < end {
            self.pump(self.timing.initial.max(Duration::from_millis(5)))?;
        }
        Ok(())
    }

    /// Sends through `ledger`: frames that do not fit the current window
    /// wait for later windows. Returns how many windows were needed.
    pub fn send_budgeted(
        &mut self,
        ledger: &mut BandwidthLedger,
        messages: Vec<(MessageKind, Vec<u8>)>,
        mut now: f64,
    ) -> Result<u32> {
        let mut windows = 1;
        for (kind, payload) in messages {
            let frame = encode(&Message::new(kind, 0, payload))?;
            if let SendOutcome::Sent(f) = ledger.send_with_budget(frame, now)? {
                self.send_encoded(&f)?;
            }
        }
        while ledger.queued() > 0 {
            now = ledger.next_window();
            windows += 1;
            for f in ledger.release(now) {
                self.send_encoded(&f)?;
            }
        }
        Ok(windows)
    }

    fn send_encoded(&mut self, frame: &[u8]) -> Result<()> {
        let m = decode(frame)?;
        let kind = m.kind();
        self.send(kind, m.into_payload())?;
        Ok(())
    }
}

/// Header of one FrameBatch part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchHeader {
    pub iteration: u64,
    pub part: u32,
    pub parts: u32,
    pub batch_seq: u64,
    pub observed: usize,
    pub frames: Vec<UploadCandidate>,
}

/// `u32` big-endian header length, JSON header, then one PNM image per
/// header frame, in order.
pub fn encode_frame_batch(header: &BatchHeader, images: &[RasterImage]) -> Result<Vec<u8>> {
    if header.frames.len() != images.len() {
        bail!("batch header lists {} frames but {} images given", header.frames.len(), images.len());
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(4 + json.len() + images.iter().map(|i| i.pixels().len() + 20).sum::<usize>());
    out.extend_from_slice(&u32::try_from(json.len())?.to_be_bytes());
    out.extend_from_slice(&json);
    for img in images {
        out.extend_from_slice(&pnm::encode(img));
    }
    Ok(out)
}

pub fn decode_frame_batch(bytes: &[u8]) -> Result<(BatchHeader, Vec<RasterImage>)> {
    let len = bytes.get(..4).ok_or_else(|| anyhow!("frame batch shorter than its length prefix"))?;
    let len = u32::from_be_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let json = bytes.get(4..4 + len).ok_or_else(|| anyhow!("frame batch header truncated"))?;
    let header: BatchHeader = serde_json::from_slice(json).context("frame batch header")?;
    let mut rest = &bytes[4 + len..];
    let mut images = Vec::with_capacity(header.frames.len());
    for _ in &header.frames {
        let (img, used) = pnm::decode_prefix(rest)?;
        images.push(img);
        rest = &rest[used..];
    }
    if !rest.is_empty() {
        bail!("{} trailing bytes after frame batch images", rest.len());
    }
    Ok((header, images))
}
