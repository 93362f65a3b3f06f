//! Sampled-values style frame codec and the publish/subscribe transport.
//!
//! Byte layout (all integers big-endian):
//!
//! ```text
//! offset  size  field
//! 0       2     magic 0x5347
//! 2       1     svID length L (0..=32)
//! 3       L     svID, ASCII
//! 3+L     4     confRev   (u32)
//! 7+L     2     smpCnt    (u16, wraps)
//! 9+L     8     stamp_us  (u64 microseconds)
//! 17+L    12    3 x i32 fixed-point values, 1 LSB = 1e-4
//! 29+L    4     CRC-32 (IEEE) over bytes [0, 29+L)
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::sync::mpsc;
use std::thread;

use crate::error::WireError;
use crate::secondary::SigmaPayload;

pub const MAGIC: u16 = 0x5347;
pub const MAX_SV_ID: usize = 32;
/// Engineering units per fixed-point LSB.
pub const FIXED_SCALE: f64 = 1e-4;
/// Largest representable magnitude in LSBs (`2^15` engineering units).
pub const FIXED_LIMIT: i32 = 327_680_000;
const HEADER_NO_ID: usize = 2 + 1;
const BODY: usize = 4 + 2 + 8 + 12;
const CRC: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SvFrame {
    pub sv_id: String,
    pub smp_cnt: u16,
    pub conf_rev: u32,
    pub stamp_us: u64,
    /// Fixed-point `[omega, m_p*P, n_q*Q]`.
    pub values: [i32; 3],
}

/// Converts an engineering value to fixed point, rejecting out-of-range input.
pub fn to_fixed(v: f64) -> Result<i32, WireError> {
    let ticks = (v / FIXED_SCALE).round();
    if !ticks.is_finite() || ticks.abs() > FIXED_LIMIT as f64 {
        return Err(WireError::ValueOverflow(v));
    }
    Ok(ticks as i32)
}

pub fn from_fixed(t: i32) -> f64 {
    t as f64 * FIXED_SCALE
}

impl SvFrame {
    pub fn from_sigma(sv_id: &str, smp_cnt: u16, stamp_s: f64, sigma: &SigmaPayload) -> Result<Self, WireError> {
        Ok(Self {
            sv_id: sv_id.to_string(),
            smp_cnt,
            conf_rev: 1,
            stamp_us: (stamp_s.max(0.0) * 1e6).round() as u64,
            values: [to_fixed(sigma.omega)?, to_fixed(sigma.mp_p)?, to_fixed(sigma.nq_q)?],
        })
    }

    pub fn sigma(&self) -> SigmaPayload {
        SigmaPayload {
            omega: from_fixed(self.values[0]),
            mp_p: from_fixed(self.values[1]),
            nq_q: from_fixed(self.values[2]),
        }
    }

    pub fn stamp_s(&self) -> f64 {
        self.stamp_us as f64 * 1e-6
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_NO_ID + self.sv_id.len() + BODY + CRC
    }
}

pub fn encode(frame: &SvFrame) -> Result<Vec<u8>, WireError> {
    let id = frame.sv_id.as_bytes();
    if id.len() > MAX_SV_ID {
        return Err(WireError::SvIdTooLong(id.len()));
    }
    if !frame.sv_id.is_ascii() {
        return Err(WireError::SvIdNotAscii);
    }
    if let Some(v) = frame.values.iter().find(|v| v.unsigned_abs() > FIXED_LIMIT as u32) {
        return Err(WireError::ValueOverflow(from_fixed(*v)));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out.extend_from_slice(&frame.conf_rev.to_be_bytes());
    out.extend_from_slice(&frame.smp_cnt.to_be_bytes());
    out.extend_from_slice(&frame.stamp_us.to_be_bytes());
    for v in frame.values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

fn need(bytes: &[u8], n: usize) -> Result<(), WireError> {
    if bytes.len() < n {
        Err(WireError::Truncated {
            needed: n,
            have: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<SvFrame, WireError> {
    need(bytes, HEADER_NO_ID)?;
    let magic = u16::from_be_bytes([bytes[0], bytes[1]]);
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let id_len = bytes[2] as usize;
    if id_len > MAX_SV_ID {
        return Err(WireError::SvIdTooLong(id_len));
    }
    let total = HEADER_NO_ID + id_len + BODY + CRC;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(WireError::TrailingBytes(bytes.len() - total));
    }
    let body_end = total - CRC;
    let stored = u32::from_be_bytes(bytes[body_end..total].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(WireError::CrcMismatch { stored, computed });
    }
    let id = &bytes[3..3 + id_len];
    if !id.is_ascii() {
        return Err(WireError::SvIdNotAscii);
    }
    let mut at = 3 + id_len;
    let mut take = |n: usize| {
        let s = &bytes[at..at + n];
        at += n;
        s
    };
    let conf_rev = u32::from_be_bytes(take(4).try_into().expect("4 bytes"));
    let smp_cnt = u16::from_be_bytes(take(2).try_into().expect("2 bytes"));
    let stamp_us = u64::from_be_bytes(take(8).try_into().expect("8 bytes"));
    let mut values = [0i32; 3];
    for v in &mut values {
        *v = i32::from_be_bytes(take(4).try_into().expect("4 bytes"));
    }
    Ok(SvFrame {
        sv_id: String::from_utf8(id.to_vec()).expect("ascii"),
        smp_cnt,
        conf_rev,
        stamp_us,
        values,
    })
}

pub fn encode_hex(frame: &SvFrame) -> Result<String, WireError> {
    encode(frame).map(hex::encode)
}

pub fn decode_hex(s: &str) -> Result<SvFrame, WireError> {
    let cleaned: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let bytes = hex::decode(cleaned).map_err(|e| WireError::Hex(e.to_string()))?;
    decode(&bytes)
}

/// In-process publish/subscribe bus. Topics are publisher agent ids; each
/// subscriber has an inbox that preserves per-topic publish order.
#[derive(Debug, Clone)]
pub struct Bus<T> {
    topics: BTreeMap<usize, Vec<usize>>,
    inboxes: BTreeMap<usize, VecDeque<(usize, T)>>,
    /// Publishes on topics with no subscribers.
    pub unknown_topic: u64,
}

impl<T> Default for Bus<T> {
    fn default() -> Self {
        Self {
            topics: BTreeMap::new(),
            inboxes: BTreeMap::new(),
            unknown_topic: 0,
        }
    }
}

impl<T: Clone> Bus<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, topic: usize, subscriber: usize) {
        let subs = self.topics.entry(topic).or_default();
        if !subs.contains(&subscriber) {
            subs.push(subscriber);
            subs.sort_unstable();
        }
        self.inboxes.entry(subscriber).or_default();
    }

    pub fn subscribers(&self, topic: usize) -> &[usize] {
        self.topics.get(&topic).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Fans `msg` out to every subscriber of `topic`. Returns how many
    /// inboxes received it; 0 (and a counter bump) for an unknown topic.
    pub fn publish(&mut self, topic: usize, msg: T) -> usize {
        let Some(subs) = self.topics.get(&topic) else {
            self.unknown_topic += 1;
            return 0;
        };
        for s in subs {
            self.inboxes
                .get_mut(s)
                .expect("inbox created on subscribe")
                .push_back((topic, msg.clone()));
        }
        subs.len()
    }

    /// Drains a subscriber's inbox in arrival order as `(topic, msg)`.
    pub fn drain(&mut self, subscriber: usize) -> Vec<(usize, T)> {
        self.inboxes
            .get_mut(&subscriber)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }
}

/// Datagram transport carrying encoded frames. Frames received by the ingest
/// thread are handed over through an ordered channel.
pub struct UdpTransport {
    socket: UdpSocket,
    rx: mpsc::Receiver<Result<SvFrame, WireError>>,
    _ingest: thread::JoinHandle<()>,
}

impl UdpTransport {
    pub fn bind(addr: SocketAddr) -> std::io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        let reader = socket.try_clone()?;
        let (tx, rx) = mpsc::channel();
        let ingest = thread::spawn(move || {
            let mut buf = [0u8; 512];
            while let Ok(n) = reader.recv(&mut buf) {
                if tx.send(decode(&buf[..n])).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            socket,
            rx,
            _ingest: ingest,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn send_to(&self, frame: &SvFrame, to: SocketAddr) -> std::io::Result<usize> {
        let bytes = encode(frame).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
        self.socket.send_to(&bytes, to)
    }

    pub fn recv_timeout(&self, timeout: std::time::Duration) -> Option<Result<SvFrame, WireError>> {
        self.rx.recv_timeout(timeout).ok()
    }
}
