//! Delay-aware semantic sampler.
//!
//! Per DER, the inner voltage-loop error `e^dqVC` is FIR-filtered and
//! decimated by `D`. The decimated pair is compared with the local consensus
//! input `u` to form a prediction error `e = e^dqD - u`. A trigger fires when
//!
//! ```text
//! ||e|| > alpha * ||exp(-t / T) * e^dqVC||      (and ||e|| > noise_floor)
//! ```
//!
//! where `t` runs from the last scenario disturbance and `T = Kp / Ki`. On a
//! trigger the prediction error is latched into a sample-and-hold
//! reconstruction `e^R`, which is fed back to the secondary controller as
//! `(k1 * e^Rp, k2 * e^Rq)` and added to `u`. Freshness `F = t - u(t)` and
//! relevance `R = e - e^R` are tracked for reporting.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub window_w: usize,
    pub downsample_d: usize,
    /// FIR taps `delta[w]`, exactly `window_w` of them.
    pub fir: Vec<f64>,
    pub alpha: f64,
    /// Decay constant `T` of the trigger envelope, s.
    pub t_const: f64,
    pub k1: f64,
    pub k2: f64,
    /// Prediction errors at or below this norm never trigger.
    pub noise_floor: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_w: 1,
            downsample_d: 10,
            fir: vec![1.0],
            alpha: 0.3,
            t_const: 0.1 / 42.0,
            k1: 0.8,
            k2: -1.0,
            noise_floor: 1e-6,
        }
    }
}

impl SamplerConfig {
    /// Boxcar FIR of length `w` with unit DC gain.
    pub fn boxcar(w: usize) -> Vec<f64> {
        vec![1.0 / w as f64; w]
    }

    /// Unit impulse of length `w` (pure decimation).
    pub fn impulse(w: usize) -> Vec<f64> {
        let mut taps = vec![0.0; w];
        if let Some(t) = taps.first_mut() {
            *t = 1.0;
        }
        taps
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window_w < 1 || self.downsample_d < 1 {
            return Err("sampler.window_w and sampler.downsample_d must be >= 1".into());
        }
        if self.fir.len() != self.window_w {
            return Err(format!(
                "sampler.fir has {} taps but window_w = {}",
                self.fir.len(),
                self.window_w
            ));
        }
        if !(self.alpha > 0.0 && self.t_const > 0.0) {
            return Err("sampler.alpha and sampler.t_const must be > 0".into());
        }
        if !(self.noise_floor >= 0.0) || self.fir.iter().chain([&self.k1, &self.k2]).any(|x| !x.is_finite()) {
            return Err("sampler gains and taps must be finite, noise_floor >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    ring_d: VecDeque<f64>,
    ring_q: VecDeque<f64>,
    /// Index of the next raw sample.
    pub sample_idx: u64,
    /// Latest decimated pair, `None` before the first output.
    pub e_dq_down: Option<(f64, f64)>,
    pub e_pred: [f64; 2],
    pub e_recon: Option<[f64; 2]>,
    pub last_trigger_s: Option<f64>,
    pub fresh_f: f64,
    pub relevance_r: [f64; 2],
    pub trigger_count: u64,
    /// Start of the trigger envelope's decay (last disturbance event).
    pub envelope_anchor_s: f64,
}

impl SamplerState {
    pub fn new(cfg: &SamplerConfig) -> Self {
        Self {
            ring_d: VecDeque::with_capacity(cfg.window_w),
            ring_q: VecDeque::with_capacity(cfg.window_w),
            sample_idx: 0,
            e_dq_down: None,
            e_pred: [0.0; 2],
            e_recon: None,
            last_trigger_s: None,
            fresh_f: 0.0,
            relevance_r: [0.0; 2],
            trigger_count: 0,
            envelope_anchor_s: 0.0,
        }
    }

    /// Restarts the trigger envelope at a disturbance event.
    pub fn reset_envelope(&mut self, now_s: f64) {
        self.envelope_anchor_s = now_s;
    }
}

/// Pushes one raw sample; on indices that are multiples of `D` returns the
/// FIR output over the last `W` samples (missing history counts as zero).
pub fn downsample(cfg: &SamplerConfig, st: &mut SamplerState, e_dvc: f64, e_qvc: f64) -> Option<(f64, f64)> {
    if st.ring_d.len() == cfg.window_w {
        st.ring_d.pop_back();
        st.ring_q.pop_back();
    }
    // newest first: ring[w] is sample n - w
    st.ring_d.push_front(e_dvc);
    st.ring_q.push_front(e_qvc);
    let n = st.sample_idx;
    st.sample_idx += 1;
    if n % cfg.downsample_d as u64 != 0 {
        return None;
    }
    let fir = |ring: &VecDeque<f64>| -> f64 { ring.iter().zip(&cfg.fir).map(|(x, d)| x * d).sum() };
    let out = (fir(&st.ring_d), fir(&st.ring_q));
    st.e_dq_down = Some(out);
    Some(out)
}

/// `e = e^dqD - u`, using the latest decimated pair (zero before the first).
pub fn prediction_error(st: &mut SamplerState, u_pq: (f64, f64)) -> [f64; 2] {
    let (dd, qd) = st.e_dq_down.unwrap_or((0.0, 0.0));
    st.e_pred = [dd - u_pq.0, qd - u_pq.1];
    st.e_pred
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Decaying trigger threshold `alpha * exp(-(now - anchor) / T) * ||e^dqVC||`.
pub fn trigger_threshold(cfg: &SamplerConfig, st: &SamplerState, e_vc: (f64, f64), now_s: f64) -> f64 {
    let elapsed = (now_s - st.envelope_anchor_s).max(0.0);
    cfg.alpha * (-elapsed / cfg.t_const).exp() * norm2([e_vc.0, e_vc.1])
}

/// Evaluates the prediction policy; on a trigger latches `e_pred` into the
/// reconstruction and records the trigger instant.
pub fn trigger_check(
    cfg: &SamplerConfig,
    st: &mut SamplerState,
    e_pred: [f64; 2],
    e_vc: (f64, f64),
    now_s: f64,
) -> bool {
    let mag = norm2(e_pred);
    let fired = mag > cfg.noise_floor && mag > trigger_threshold(cfg, st, e_vc, now_s);
    if fired {
        st.last_trigger_s = Some(now_s);
        st.e_recon = Some(e_pred);
        st.trigger_count += 1;
    }
    fired
}

/// `(k1 * e^Rp, k2 * e^Rq)`, zero before the first trigger.
pub fn feedback(cfg: &SamplerConfig, st: &SamplerState) -> (f64, f64) {
    match st.e_recon {
        Some([p, q]) => (cfg.k1 * p, cfg.k2 * q),
        None => (0.0, 0.0),
    }
}

pub fn final_input(u_pq: (f64, f64), fb: (f64, f64)) -> (f64, f64) {
    (u_pq.0 + fb.0, u_pq.1 + fb.1)
}

/// Mirrors the stream freshness and updates relevance `R = e - e^R`
/// (zero while no reconstruction is held).
pub fn update_semantics(st: &mut SamplerState, channel_f: f64) -> (f64, [f64; 2]) {
    st.fresh_f = channel_f;
    st.relevance_r = match st.e_recon {
        Some(r) => [st.e_pred[0] - r[0], st.e_pred[1] - r[1]],
        None => [0.0; 2],
    };
    (st.fresh_f, st.relevance_r)
}

/// Result of one pass through the sampler at a secondary-control instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOutput {
    pub e_pred: [f64; 2],
    pub feedback: (f64, f64),
    pub u_final: (f64, f64),
    pub triggered: bool,
    pub fresh_f: f64,
    pub relevance: [f64; 2],
}

/// Runs prediction error, trigger, feedback, final input and semantic
/// bookkeeping in order. Raw samples must already have been pushed through
/// [`downsample`].
pub fn run_pipeline(
    cfg: &SamplerConfig,
    st: &mut SamplerState,
    u_pq: (f64, f64),
    e_vc: (f64, f64),
    now_s: f64,
    channel_f: f64,
) -> SamplerOutput {
    let e_pred = prediction_error(st, u_pq);
    let triggered = trigger_check(cfg, st, e_pred, e_vc, now_s);
    let fb = feedback(cfg, st);
    let u_final = final_input(u_pq, fb);
    let (fresh_f, relevance) = update_semantics(st, channel_f);
    SamplerOutput {
        e_pred,
        feedback: fb,
        u_final,
        triggered,
        fresh_f,
        relevance,
    }
}
