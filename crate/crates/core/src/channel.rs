//! The cyber layer between agents.
//!
//! Every directed stream `(src, dst)` is a [`Link`] with its own delivery
//! queue, replay history and counter-based RNG. Attacks are applied at send
//! time: Bernoulli dropout, a fixed added latency, and a time-synchronization
//! offset of `n * T_s` that shifts the stamp and, for backward shifts,
//! replays the payload the source published `n * T_s` earlier. Receivers keep
//! the last delivered payload until the next one arrives.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::secondary::SigmaPayload;

/// Depth of the per-stream replay history used to realize stamp offsets.
pub const REPLAY_DEPTH: usize = 1 << 16;

/// Slack when comparing delivery instants against the simulation clock,
/// which advances in float multiples of the plant step.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    pub src: usize,
    pub dst: usize,
    pub seq: u64,
    pub stamp_s: f64,
    pub payload: SigmaPayload,
}

/// Attack parameters on a link, effective while `start_s <= t < end_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkAttack {
    pub latency_s: f64,
    pub dropout_p: f64,
    /// Signed stamp offset in samples; negative replays older data.
    pub tsa_offset_samples: i64,
    pub sample_period_s: f64,
    pub start_s: f64,
    pub end_s: f64,
}

impl Default for LinkAttack {
    fn default() -> Self {
        Self::none()
    }
}

impl LinkAttack {
    pub fn none() -> Self {
        Self {
            latency_s: 0.0,
            dropout_p: 0.0,
            tsa_offset_samples: 0,
            sample_period_s: 1e-4,
            start_s: 0.0,
            end_s: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.latency_s.is_finite() && self.latency_s >= 0.0) {
            return Err(format!("latency_s must be finite and >= 0, got {}", self.latency_s));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(format!("dropout_p must lie in [0, 1], got {}", self.dropout_p));
        }
        if !(self.sample_period_s.is_finite() && self.sample_period_s > 0.0) {
            return Err(format!("sample_period_s must be > 0, got {}", self.sample_period_s));
        }
        if !(self.start_s >= 0.0 && self.end_s > self.start_s) {
            return Err(format!(
                "attack window [{}, {}) is empty or negative",
                self.start_s, self.end_s
            ));
        }
        Ok(())
    }

    pub fn is_active(&self, now_s: f64) -> bool {
        now_s + TIME_EPS >= self.start_s && now_s + TIME_EPS < self.end_s
    }

    pub fn tsa_shift_s(&self) -> f64 {
        self.tsa_offset_samples as f64 * self.sample_period_s
    }

    /// Folds all attacks active at `now_s` into one: latencies and stamp
    /// shifts add, dropouts combine as independent losses.
    pub fn combine<'a>(attacks: impl IntoIterator<Item = &'a LinkAttack>, now_s: f64) -> LinkAttack {
        let mut out = LinkAttack::none();
        let mut keep = 1.0;
        let mut shift = 0.0;
        for a in attacks.into_iter().filter(|a| a.is_active(now_s)) {
            out.latency_s += a.latency_s;
            keep *= 1.0 - a.dropout_p;
            shift += a.tsa_shift_s();
            if a.tsa_offset_samples != 0 {
                out.sample_period_s = a.sample_period_s;
            }
        }
        out.dropout_p = 1.0 - keep;
        out.tsa_offset_samples = (shift / out.sample_period_s).round() as i64;
        out
    }
}

/// What a receiver holds for one incoming stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverSlot {
    pub last_payload: SigmaPayload,
    pub last_stamp_s: f64,
    pub last_seq: u64,
    pub fresh_f: f64,
}

/// `F = now - u(now)`; `+inf` when nothing has been received.
pub fn freshness(slot: Option<&ReceiverSlot>, now_s: f64) -> f64 {
    match slot {
        Some(s) => now_s - s.last_stamp_s,
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Queued {
    due_s: f64,
    pkt: Packet,
}

impl Eq for Queued {}

impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap and we pop the earliest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .due_s
            .total_cmp(&self.due_s)
            .then_with(|| other.pkt.seq.cmp(&self.pkt.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LinkCounters {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub replay_underruns: u64,
    pub negative_freshness: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SendError {
    #[error("stream {src}->{dst}: seq {seq} does not exceed previous {prev}")]
    SeqNotIncreasing { src: usize, dst: usize, seq: u64, prev: u64 },
}

#[derive(Debug, Clone)]
pub struct Link {
    pub src: usize,
    pub dst: usize,
    last_sent_seq: Option<u64>,
    queue: BinaryHeap<Queued>,
    history: VecDeque<(f64, SigmaPayload)>,
    rng: ChaCha8Rng,
    slot: Option<ReceiverSlot>,
    pub counters: LinkCounters,
}

impl Link {
    /// The RNG stream is keyed on `(seed, src, dst)` only, so the draws on a
    /// link do not depend on how other links are iterated.
    pub fn new(seed: u64, src: usize, dst: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((src as u64) << 32) | dst as u64);
        Self {
            src,
            dst,
            last_sent_seq: None,
            queue: BinaryHeap::new(),
            history: VecDeque::new(),
            rng,
            slot: None,
            counters: LinkCounters::default(),
        }
    }

    pub fn slot(&self) -> Option<&ReceiverSlot> {
        self.slot.as_ref()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Pushes a packet through the attack pipeline. Returns whether it was
    /// queued (false when dropped).
    pub fn send(&mut self, pkt: Packet, now_s: f64, attack: &LinkAttack) -> Result<bool, SendError> {
        if let Some(prev) = self.last_sent_seq {
            if pkt.seq <= prev {
                return Err(SendError::SeqNotIncreasing {
                    src: self.src,
                    dst: self.dst,
                    seq: pkt.seq,
                    prev,
                });
            }
        }
        self.last_sent_seq = Some(pkt.seq);
        self.counters.sent += 1;
        if self.history.len() == REPLAY_DEPTH {
            self.history.pop_front();
        }
        self.history.push_back((pkt.stamp_s, pkt.payload));

        // one draw per packet regardless of the attack window keeps the
        // stream aligned across scenarios that differ only in windows
        let draw: f64 = self.rng.random();
        let active = attack.is_active(now_s);
        if active && draw < attack.dropout_p {
            self.counters.dropped += 1;
            return Ok(false);
        }
        let mut out = pkt;
        let mut latency = 0.0;
        if active {
            latency = attack.latency_s;
            let shift = attack.tsa_shift_s();
            if shift != 0.0 {
                let target = pkt.stamp_s + shift;
                out.stamp_s = target;
                if shift < 0.0 {
                    out.payload = self.replay(target);
                }
            }
        }
        self.queue.push(Queued {
            due_s: now_s + latency,
            pkt: out,
        });
        Ok(true)
    }

    /// Historical payload whose stamp is nearest to `target_s`.
    fn replay(&mut self, target_s: f64) -> SigmaPayload {
        let (oldest_stamp, oldest) = self.history[0];
        if target_s < oldest_stamp - TIME_EPS {
            self.counters.replay_underruns += 1;
            return oldest;
        }
        let idx = self
            .history
            .partition_point(|(s, _)| *s < target_s - TIME_EPS);
        let candidates = [idx.checked_sub(1), Some(idx)];
        candidates
            .into_iter()
            .flatten()
            .filter_map(|i| self.history.get(i))
            .min_by(|a, b| (a.0 - target_s).abs().total_cmp(&(b.0 - target_s).abs()))
            .map(|(_, p)| *p)
            .unwrap_or(oldest)
    }

    /// Pops every packet due by `now_s`, earliest first (ties by seq), and
    /// updates the receiver slot with each one.
    pub fn deliver_due(&mut self, now_s: f64) -> Vec<Packet> {
        let mut out = Vec::new();
        while let Some(top) = self.queue.peek() {
            if top.due_s > now_s + TIME_EPS {
                break;
            }
            let Queued { pkt, .. } = self.queue.pop().expect("peeked");
            let fresh_f = now_s - pkt.stamp_s;
            if fresh_f < -TIME_EPS {
                self.counters.negative_freshness += 1;
            }
            self.slot = Some(ReceiverSlot {
                last_payload: pkt.payload,
                last_stamp_s: pkt.stamp_s,
                last_seq: pkt.seq,
                fresh_f,
            });
            self.counters.delivered += 1;
            out.push(pkt);
        }
        out
    }

    pub fn freshness(&self, now_s: f64) -> f64 {
        freshness(self.slot.as_ref(), now_s)
    }
}

/// Delay line for an agent's own payload (`sigma_j(t - tau_j)`).
#[derive(Debug, Clone, Default)]
pub struct LocalDelay {
    buf: VecDeque<(f64, SigmaPayload)>,
}

impl LocalDelay {
    /// Records `payload` at `now_s` and returns the newest entry at least
    /// `delay_s` old (the oldest one while the line is still filling).
    pub fn push_and_get(&mut self, now_s: f64, payload: SigmaPayload, delay_s: f64) -> SigmaPayload {
        self.buf.push_back((now_s, payload));
        if delay_s <= 0.0 {
            self.buf.clear();
            return payload;
        }
        while self.buf.len() > 1 && self.buf[1].0 <= now_s - delay_s + TIME_EPS {
            self.buf.pop_front();
        }
        self.buf[0].1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(x: f64) -> SigmaPayload {
        SigmaPayload { omega: x, mp_p: 2.0 * x, nq_q: 3.0 * x }
    }

    fn pkt(seq: u64, t: f64) -> Packet {
        Packet { src: 0, dst: 1, seq, stamp_s: t, payload: payload(t) }
    }

    #[test]
    fn latency_shifts_delivery() {
        let mut link = Link::new(1, 0, 1);
        let attack = LinkAttack { latency_s: 0.05, ..LinkAttack::none() };
        link.send(pkt(1, 1.0), 1.0, &attack).unwrap();
        assert!(link.deliver_due(1.049).is_empty());
        let got = link.deliver_due(1.05);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].stamp_s, 1.0);
        assert!((link.freshness(1.05) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn full_dropout_holds_last() {
        let mut link = Link::new(7, 0, 1);
        link.send(pkt(1, 0.0), 0.0, &LinkAttack::none()).unwrap();
        link.deliver_due(0.0);
        let attack = LinkAttack { dropout_p: 1.0, start_s: 0.5, ..LinkAttack::none() };
        for k in 1..100u64 {
            let t = k as f64 * 0.01;
            link.send(pkt(k + 1, t), t, &attack).unwrap();
            link.deliver_due(t);
        }
        let slot = link.slot().unwrap();
        assert_eq!(slot.last_payload, payload(0.49));
        assert_eq!(link.counters.dropped, 50);
    }

    #[test]
    fn backward_tsa_replays_history() {
        let mut link = Link::new(3, 0, 1);
        let ts = 1e-4;
        let attack = LinkAttack {
            tsa_offset_samples: -5,
            sample_period_s: ts,
            start_s: 0.002,
            ..LinkAttack::none()
        };
        let mut last = None;
        for k in 0..30u64 {
            let t = k as f64 * ts;
            link.send(pkt(k + 1, t), t, &attack).unwrap();
            last = link.deliver_due(t).pop();
        }
        let got = last.unwrap();
        let t = 29.0 * ts;
        assert!((got.stamp_s - (t - 5e-4)).abs() < 1e-12);
        assert_eq!(got.payload, payload(24.0 * ts));
        assert!((link.freshness(t) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn forward_tsa_gives_negative_freshness() {
        let mut link = Link::new(3, 0, 1);
        let attack = LinkAttack { tsa_offset_samples: 5, ..LinkAttack::none() };
        link.send(pkt(1, 1.0), 1.0, &attack).unwrap();
        link.deliver_due(1.0);
        assert!(link.freshness(1.0) < 0.0);
        assert_eq!(link.counters.negative_freshness, 1);
        assert_eq!(link.slot().unwrap().last_payload, payload(1.0));
    }

    #[test]
    fn tsa_before_history_uses_oldest() {
        let mut link = Link::new(3, 0, 1);
        let attack = LinkAttack { tsa_offset_samples: -50, ..LinkAttack::none() };
        link.send(pkt(1, 0.0), 0.0, &attack).unwrap();
        let got = link.deliver_due(0.0);
        assert_eq!(got[0].payload, payload(0.0));
        assert_eq!(link.counters.replay_underruns, 1);
    }

    #[test]
    fn queue_order_and_horizon() {
        let mut link = Link::new(1, 0, 1);
        assert!(link.deliver_due(10.0).is_empty());
        let slow = LinkAttack { latency_s: 0.1, ..LinkAttack::none() };
        link.send(pkt(1, 0.0), 0.0, &slow).unwrap();
        // second packet undelayed but due at the same instant as the first
        link.send(pkt(2, 0.1), 0.1, &LinkAttack::none()).unwrap();
        let got = link.deliver_due(0.1);
        assert_eq!(got.iter().map(|p| p.seq).collect::<Vec<_>>(), vec![1, 2]);

        link.send(pkt(3, 0.2), 0.2, &LinkAttack { latency_s: 5.0, ..LinkAttack::none() }).unwrap();
        assert!(link.deliver_due(1.0).is_empty());
        assert_eq!(link.pending(), 1);
    }

    #[test]
    fn seq_must_increase() {
        let mut link = Link::new(1, 0, 1);
        link.send(pkt(5, 0.0), 0.0, &LinkAttack::none()).unwrap();
        assert!(link.send(pkt(5, 0.1), 0.1, &LinkAttack::none()).is_err());
    }

    #[test]
    fn freshness_sentinel() {
        assert_eq!(freshness(None, 1.0), f64::INFINITY);
        let slot = ReceiverSlot { last_payload: payload(0.0), last_stamp_s: 1.95, last_seq: 1, fresh_f: 0.0 };
        assert!((freshness(Some(&slot), 2.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn combine_active_attacks() {
        let a = LinkAttack { latency_s: 0.05, ..LinkAttack::none() };
        let b = LinkAttack { dropout_p: 0.1, start_s: 2.0, ..LinkAttack::none() };
        let c = LinkAttack::combine([&a, &b], 1.0);
        assert_eq!(c.latency_s, 0.05);
        assert_eq!(c.dropout_p, 0.0);
        let c = LinkAttack::combine([&a, &b], 2.0);
        assert!((c.dropout_p - 0.1).abs() < 1e-12);
    }

    #[test]
    fn local_delay_line() {
        let mut d = LocalDelay::default();
        let mut got = Vec::new();
        for k in 0..10 {
            let t = k as f64 * 0.01;
            got.push(d.push_and_get(t, payload(t), 0.03).omega);
        }
        assert_eq!(got[9], 0.06);
        assert_eq!(got[0], 0.0);
    }
}
