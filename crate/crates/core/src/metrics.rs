//! Post-hoc evaluation of traces.
//!
//! Objective aggregates, per row:
//! * O1 frequency: `max_j |omega_j - omega_nom|` (rad/s)
//! * O1 active sharing: `(max_j - min_j) m_p*P / mean_j m_p*P`
//! * O2 reactive sharing: `(max_j - min_j) n_q*Q / mean_j n_q*Q`
//!
//! Convergence time uses a band of `band_frac` times the largest excursion
//! of each aggregate from its final-window mean after the event, so a pure
//! first-order decay settles at `-T ln(band_frac)` whatever its amplitude.
//! The final window is the last 10% of the trace.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::MetricsError;
use crate::trace::{EventRecord, Trace};

pub const FINAL_WINDOW_FRAC: f64 = 0.1;
pub const LYAPUNOV_TOL: f64 = 1e-9;
pub const EVENT_TRANSIENT_S: f64 = 0.1;
pub const DID_NOT_CONVERGE: &str = "did not converge";

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveBands {
    pub band_frac: f64,
}

impl Default for ObjectiveBands {
    fn default() -> Self {
        Self { band_frac: 0.02 }
    }
}

impl ObjectiveBands {
    pub fn new(band_frac: f64) -> Result<Self, MetricsError> {
        if !(band_frac > 0.0 && band_frac < 0.5) {
            return Err(MetricsError::BadBand(band_frac));
        }
        Ok(Self { band_frac })
    }
}

/// A measurement or the non-convergence sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    DidNotConverge,
}

impl Metric {
    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::DidNotConverge => None,
        }
    }

    pub fn converged(self) -> bool {
        matches!(self, Metric::Value(_))
    }

    /// Sentinel maps to `+inf` (orders after every finite value).
    pub fn or_inf(self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v}"),
            Metric::DidNotConverge => f.write_str(DID_NOT_CONVERGE),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::DidNotConverge => s.serialize_str(DID_NOT_CONVERGE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub from_event_s: f64,
    pub tc_o1_s: Metric,
    pub tc_o2_s: Metric,
    pub sse_o1: Metric,
    pub sse_o2: Metric,
    /// Frequency part of `sse_o1`, rad/s.
    pub sse_freq: Metric,
    /// Normalized active-sharing part of `sse_o1`.
    pub sse_p_share: Metric,
    pub trigger_rate: f64,
    pub trigger_rate_steady: f64,
    pub trigger_count: u64,
    pub lyapunov_violations: u64,
    pub aoi_mean_s: f64,
    pub aoi_max_s: f64,
    pub diverged: bool,
}

/// Per-row objective aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub freq: Vec<f64>,
    pub p_share: Vec<f64>,
    pub q_share: Vec<f64>,
}

fn spread_norm(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let spread = hi - lo;
    if spread == 0.0 {
        0.0
    } else if mean.abs() > 0.0 {
        spread / mean.abs()
    } else {
        spread
    }
}

pub fn aggregates(trace: &Trace, omega_nom: &[f64]) -> Aggregates {
    let rows = trace.len();
    let mut out = Aggregates {
        freq: Vec::with_capacity(rows),
        p_share: Vec::with_capacity(rows),
        q_share: Vec::with_capacity(rows),
    };
    for k in 0..rows {
        let f = trace
            .agents
            .iter()
            .zip(omega_nom)
            .map(|(a, w)| (a.omega[k] - w).abs())
            .fold(0.0, f64::max);
        out.freq.push(f);
        out.p_share.push(spread_norm(trace.agents.iter().map(|a| a.mp_p[k])));
        out.q_share.push(spread_norm(trace.agents.iter().map(|a| a.nq_q[k])));
    }
    out
}

fn omega_nom_of(trace: &Trace) -> Vec<f64> {
    trace
        .omega_nom()
        .unwrap_or_else(|| vec![crate::plant::DerParams::default().omega_nom; trace.n_agents()])
}

fn diverged(trace: &Trace) -> bool {
    trace.events.iter().any(|e| matches!(e, EventRecord::Diverged { .. }))
}

fn final_window_start(trace: &Trace) -> usize {
    let n = trace.len();
    let w = ((n as f64) * FINAL_WINDOW_FRAC).ceil().max(1.0) as usize;
    n - w.min(n)
}

/// Settling time of one aggregate after `from_idx`. `None` if it is still
/// leaving its band inside the final window.
pub fn settle_time(t: &[f64], a: &[f64], from_idx: usize, final_idx: usize, band_frac: f64) -> Option<f64> {
    let tail = &a[final_idx..];
    let target = tail.iter().sum::<f64>() / tail.len() as f64;
    let excursion = a[from_idx..]
        .iter()
        .map(|v| (v - target).abs())
        .fold(0.0, f64::max);
    let band = band_frac * excursion;
    let last_out = (from_idx..a.len()).rev().find(|&k| (a[k] - target).abs() > band);
    match last_out {
        None => Some(0.0),
        Some(k) if k + 1 >= final_idx => None,
        Some(k) => Some(t[k + 1] - t[from_idx]),
    }
}

/// `(tc_o1, tc_o2)` after the event at `from_event_s`.
pub fn convergence_time(
    trace: &Trace,
    bands: &ObjectiveBands,
    from_event_s: f64,
) -> Result<(Metric, Metric), MetricsError> {
    ObjectiveBands::new(bands.band_frac)?;
    if trace.is_empty() {
        return Err(MetricsError::Empty);
    }
    // a diverged run is cut short, so this comes before the length check
    if diverged(trace) {
        return Ok((Metric::DidNotConverge, Metric::DidNotConverge));
    }
    let end = *trace.t.last().expect("non-empty");
    if end < from_event_s + 1.0 - 1e-9 {
        return Err(MetricsError::TooShort(format!(
            "trace ends at {end} s, need at least 1 s after the event at {from_event_s} s"
        )));
    }
    let agg = aggregates(trace, &omega_nom_of(trace));
    let from_idx = trace.t.partition_point(|&t| t < from_event_s - 1e-9);
    let final_idx = final_window_start(trace).max(from_idx + 1);
    let st = |a: &[f64]| settle_time(&trace.t, a, from_idx, final_idx, bands.band_frac);
    let o1 = match (st(&agg.freq), st(&agg.p_share)) {
        (Some(a), Some(b)) => Metric::Value(a.max(b)),
        _ => Metric::DidNotConverge,
    };
    let o2 = st(&agg.q_share).map_or(Metric::DidNotConverge, Metric::Value);
    Ok((o1, o2))
}

/// Mean aggregates over the final window:
/// `(sse_o1, sse_o2, sse_freq, sse_p_share)`.
pub fn steady_state_error_parts(trace: &Trace) -> Result<(Metric, Metric, Metric, Metric), MetricsError> {
    if diverged(trace) {
        let s = Metric::DidNotConverge;
        return Ok((s, s, s, s));
    }
    if trace.len() < 10 {
        return Err(MetricsError::TooShort(format!(
            "{} rows; the final 10% window needs at least 10",
            trace.len()
        )));
    }
    let agg = aggregates(trace, &omega_nom_of(trace));
    let from = final_window_start(trace);
    let mean = |v: &[f64]| v[from..].iter().sum::<f64>() / (v.len() - from) as f64;
    let (f, p, q) = (mean(&agg.freq), mean(&agg.p_share), mean(&agg.q_share));
    Ok((Metric::Value(f + p), Metric::Value(q), Metric::Value(f), Metric::Value(p)))
}

/// `(sse_o1, sse_o2)`.
pub fn steady_state_error(trace: &Trace, _bands: &ObjectiveBands) -> Result<(Metric, Metric), MetricsError> {
    let (o1, o2, _, _) = steady_state_error_parts(trace)?;
    Ok((o1, o2))
}

/// Neighbor sets per row, from the graph schedule in the event log
/// (complete graph if the log carries none).
fn neighbor_schedule(trace: &Trace) -> Vec<(f64, Vec<Vec<usize>>)> {
    let n = trace.n_agents();
    let sched = trace.graph_schedule();
    if sched.is_empty() {
        let all = (0..n).map(|j| (0..n).filter(|&m| m != j).collect()).collect();
        return vec![(0.0, all)];
    }
    sched
        .into_iter()
        .map(|(t, w)| {
            let nb = w
                .iter()
                .map(|row| row.iter().enumerate().filter(|(_, &a)| a > 0.0).map(|(m, _)| m).collect())
                .collect();
            (t, nb)
        })
        .collect()
}

/// Disagreement `V(k) = sum_j sum_{m in N_j} |Y_m(k) - Yhat_j(k)|^2` with
/// `Y = (dVc, dwc)` and `Yhat_j` agent j's value at its latest trigger
/// (its current value before the first one).
pub fn lyapunov_series(trace: &Trace) -> Vec<f64> {
    let n = trace.n_agents();
    let sched = neighbor_schedule(trace);
    let mut held: Vec<Option<[f64; 2]>> = vec![None; n];
    let mut out = Vec::with_capacity(trace.len());
    for k in 0..trace.len() {
        let t = trace.t[k];
        let nb = &sched
            .iter()
            .rev()
            .find(|(ts, _)| *ts <= t + 1e-9)
            .unwrap_or(&sched[0])
            .1;
        let y: Vec<[f64; 2]> = trace
            .agents
            .iter()
            .map(|a| [a.d_vc[k], a.d_omega_c[k]])
            .collect();
        for j in 0..n {
            if trace.agents[j].trig[k] {
                held[j] = Some(y[j]);
            }
        }
        let mut v = 0.0;
        for j in 0..n {
            let yh = held[j].unwrap_or(y[j]);
            for &m in &nb[j] {
                v += (y[m][0] - yh[0]).powi(2) + (y[m][1] - yh[1]).powi(2);
            }
        }
        out.push(v);
    }
    out
}

/// Counts strict increases of `v` above `tol` at rows that are neither
/// trigger instants nor inside an event transient window.
pub fn count_violations(t: &[f64], v: &[f64], trig_rows: &[bool], event_times: &[f64], tol: f64) -> u64 {
    let mut count = 0;
    for k in 1..v.len() {
        if trig_rows[k] {
            continue;
        }
        if event_times
            .iter()
            .any(|&e| t[k] >= e - 1e-9 && t[k] <= e + EVENT_TRANSIENT_S + 1e-9)
        {
            continue;
        }
        if v[k] - v[k - 1] > tol {
            count += 1;
        }
    }
    count
}

pub fn lyapunov_monitor(trace: &Trace) -> Result<u64, MetricsError> {
    if trace.is_empty() {
        return Err(MetricsError::Empty);
    }
    let v = lyapunov_series(trace);
    let trig: Vec<bool> = (0..trace.len())
        .map(|k| trace.agents.iter().any(|a| a.trig[k]))
        .collect();
    let mut events: Vec<f64> = vec![0.0];
    events.extend(trace.disturbance_times());
    events.extend(trace.events.iter().filter_map(|e| match e {
        EventRecord::AttackEnd { t_s, .. } => Some(*t_s),
        _ => None,
    }));
    Ok(count_violations(&trace.t, &v, &trig, &events, LYAPUNOV_TOL))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerStats {
    pub count: u64,
    pub updates: u64,
    pub rate: f64,
    /// Rate over the final 10% window.
    pub steady_rate: f64,
    /// `(lo, hi, count)`: gaps of `lo..=hi` SC steps between consecutive
    /// triggers of the same agent, power-of-two bins.
    pub gap_histogram: Vec<(u64, u64, u64)>,
}

pub fn trigger_stats(trace: &Trace) -> TriggerStats {
    let rows = trace.len();
    let from = if rows == 0 { 0 } else { final_window_start(trace) };
    let mut count = 0u64;
    let mut steady = 0u64;
    let mut bins: Vec<u64> = Vec::new();
    for a in &trace.agents {
        let mut last: Option<usize> = None;
        for (k, &tr) in a.trig.iter().enumerate() {
            if !tr {
                continue;
            }
            count += 1;
            if k >= from {
                steady += 1;
            }
            if let Some(l) = last {
                let gap = (k - l) as u64;
                let b = 63 - gap.leading_zeros() as usize;
                if bins.len() <= b {
                    bins.resize(b + 1, 0);
                }
                bins[b] += 1;
            }
            last = Some(k);
        }
    }
    let updates = (rows * trace.n_agents()) as u64;
    let steady_updates = ((rows - from) * trace.n_agents()) as u64;
    TriggerStats {
        count,
        updates,
        rate: if updates == 0 { 0.0 } else { count as f64 / updates as f64 },
        steady_rate: if steady_updates == 0 {
            0.0
        } else {
            steady as f64 / steady_updates as f64
        },
        gap_histogram: bins
            .iter()
            .enumerate()
            .map(|(b, &c)| (1u64 << b, (1u64 << (b + 1)) - 1, c))
            .collect(),
    }
}

/// Mean and max stream freshness over finite samples.
pub fn aoi_stats(trace: &Trace) -> (f64, f64) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut max = 0.0f64;
    for a in &trace.agents {
        for &f in a.fresh.iter().filter(|f| f.is_finite()) {
            sum += f;
            n += 1;
            max = max.max(f);
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, max)
}

/// Latest disturbance time (load step, graph switch, attack onset), or 0.
pub fn default_event_time(trace: &Trace) -> f64 {
    trace.disturbance_times().into_iter().fold(0.0, f64::max)
}

pub fn report(trace: &Trace, bands: &ObjectiveBands, from_event_s: Option<f64>) -> Result<MetricReport, MetricsError> {
    let from = from_event_s.unwrap_or_else(|| default_event_time(trace));
    let (tc_o1_s, tc_o2_s) = convergence_time(trace, bands, from)?;
    let (sse_o1, sse_o2, sse_freq, sse_p_share) = steady_state_error_parts(trace)?;
    let ts = trigger_stats(trace);
    let (aoi_mean_s, aoi_max_s) = aoi_stats(trace);
    Ok(MetricReport {
        from_event_s: from,
        tc_o1_s,
        tc_o2_s,
        sse_o1,
        sse_o2,
        sse_freq,
        sse_p_share,
        trigger_rate: ts.rate,
        trigger_rate_steady: ts.steady_rate,
        trigger_count: ts.count,
        lyapunov_violations: lyapunov_monitor(trace)?,
        aoi_mean_s,
        aoi_max_s,
        diverged: diverged(trace),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::AgentRow;
    use approx::assert_abs_diff_eq;

    const W: f64 = 314.15;

    /// `n` agents, rows every `dt` for `dur` seconds, values from `f(t, j)`.
    fn synth(n: usize, dt: f64, dur: f64, f: impl Fn(f64, usize) -> AgentRow) -> Trace {
        let mut tr = Trace::new(n);
        let rows = (dur / dt).round() as usize + 1;
        for k in 0..rows {
            let t = k as f64 * dt;
            let r: Vec<AgentRow> = (0..n).map(|j| f(t, j)).collect();
            tr.push_row(t, &r);
        }
        tr
    }

    fn flat(omega: f64) -> AgentRow {
        AgentRow {
            omega,
            mp_p: 1.0,
            nq_q: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn consensus_trace_converges_instantly() {
        let tr = synth(3, 1e-3, 3.0, |_, _| flat(W));
        let (a, b) = convergence_time(&tr, &ObjectiveBands::default(), 1.0).unwrap();
        assert_eq!((a, b), (Metric::Value(0.0), Metric::Value(0.0)));
        let (s1, s2) = steady_state_error(&tr, &ObjectiveBands::default()).unwrap();
        assert_eq!((s1, s2), (Metric::Value(0.0), Metric::Value(0.0)));
    }

    #[test]
    fn first_order_settles_at_3_912_tau() {
        let tau = 0.2;
        let tr = synth(2, 1e-4, 10.0, |t, _| flat(W + 0.7 * (-t / tau).exp()));
        let (tc, _) = convergence_time(&tr, &ObjectiveBands::default(), 0.0).unwrap();
        assert_abs_diff_eq!(tc.value().unwrap(), -tau * 0.02f64.ln(), epsilon = 2e-4);
        assert_abs_diff_eq!(tc.value().unwrap(), 3.912 * tau, epsilon = 1e-3);
    }

    #[test]
    fn wider_band_never_slower() {
        let tr = synth(2, 1e-3, 6.0, |t, j| {
            flat(W + (-(t / 0.3)).exp() * (7.0 * t + j as f64).cos())
        });
        let mut last = f64::INFINITY;
        for b in [0.01, 0.02, 0.05, 0.1, 0.3, 0.49] {
            let tc = convergence_time(&tr, &ObjectiveBands { band_frac: b }, 0.0).unwrap().0.or_inf();
            assert!(tc <= last, "band {b}: {tc} > {last}");
            last = tc;
        }
    }

    #[test]
    fn persistent_oscillation_is_sentinel() {
        let tr = synth(2, 1e-3, 5.0, |t, _| flat(W + (20.0 * t).sin()));
        let (tc, _) = convergence_time(&tr, &ObjectiveBands::default(), 0.0).unwrap();
        assert_eq!(tc, Metric::DidNotConverge);
        let mut d = synth(2, 1e-3, 5.0, |_, _| flat(W));
        d.events.push(EventRecord::Diverged { t_s: 4.0, message: "x".into() });
        assert_eq!(convergence_time(&d, &ObjectiveBands::default(), 0.0).unwrap().0, Metric::DidNotConverge);
    }

    #[test]
    fn too_short_and_bad_band() {
        let tr = synth(2, 1e-3, 0.5, |_, _| flat(W));
        assert!(matches!(
            convergence_time(&tr, &ObjectiveBands::default(), 0.0),
            Err(MetricsError::TooShort(_))
        ));
        assert!(ObjectiveBands::new(0.5).is_err());
        assert!(ObjectiveBands::new(0.0).is_err());
    }

    #[test]
    fn sse_reflects_single_agent_offset() {
        let tr = synth(7, 1e-3, 2.0, |_, j| flat(if j == 3 { W + 0.05 } else { W }));
        let (s1, s2) = steady_state_error(&tr, &ObjectiveBands::default()).unwrap();
        assert_abs_diff_eq!(s1.value().unwrap(), 0.05, epsilon = 1e-9);
        assert_eq!(s2, Metric::Value(0.0));
    }

    #[test]
    fn lyapunov_synthetic_cases() {
        let t: Vec<f64> = (0..100).map(|k| k as f64 * 1e-2).collect();
        let no_trig = vec![false; 100];
        let decay: Vec<f64> = (0..100).map(|k| 0.9f64.powi(k)).collect();
        assert_eq!(count_violations(&t, &decay, &no_trig, &[], LYAPUNOV_TOL), 0);
        let mut bumped = decay.clone();
        bumped[60] = bumped[59] + 0.01;
        assert_eq!(count_violations(&t, &bumped, &no_trig, &[], LYAPUNOV_TOL), 1);
        // the same bump inside an event window is ignored
        assert_eq!(count_violations(&t, &bumped, &no_trig, &[0.55], LYAPUNOV_TOL), 0);

        let tr = synth(3, 1e-3, 1.0, |_, _| flat(W));
        assert!(lyapunov_series(&tr).iter().all(|&v| v == 0.0));
        assert_eq!(lyapunov_monitor(&tr).unwrap(), 0);
    }

    #[test]
    fn trigger_rate_extremes() {
        let none = synth(2, 1e-3, 1.0, |_, _| flat(W));
        assert_eq!(trigger_stats(&none).rate, 0.0);
        let all = synth(2, 1e-3, 1.0, |_, _| AgentRow { trig: true, ..flat(W) });
        let s = trigger_stats(&all);
        assert_eq!(s.rate, 1.0);
        assert_eq!(s.gap_histogram, vec![(1, 1, 2 * 1000)]);
    }
}
