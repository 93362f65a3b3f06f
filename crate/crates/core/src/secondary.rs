//! Distributed secondary control: neighbor consensus input and the two PI
//! correction branches (frequency/active sharing and reactive sharing).

use serde::{Deserialize, Serialize};

use crate::error::PlantError;
use crate::graph::CyberGraph;
use crate::plant::DerParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecondaryGains {
    /// Convergence parameter scaling the neighbor sums.
    pub g: f64,
    pub kp_w: f64,
    pub ki_w: f64,
    pub kp_v: f64,
    pub ki_v: f64,
}

impl Default for SecondaryGains {
    fn default() -> Self {
        Self {
            g: 1.0,
            kp_w: 0.1,
            ki_w: 42.0,
            kp_v: 0.1,
            ki_v: 1.5,
        }
    }
}

impl SecondaryGains {
    /// All-zero gains: the secondary layer is inert and the DERs run on droop alone.
    pub fn disabled() -> Self {
        Self {
            g: 0.0,
            kp_w: 0.0,
            ki_w: 0.0,
            kp_v: 0.0,
            ki_v: 0.0,
        }
    }

    pub fn is_disabled(&self) -> bool {
        *self == Self::disabled()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.is_disabled() {
            return Ok(());
        }
        if !(self.g > 0.0 && self.ki_w > 0.0 && self.ki_v > 0.0) {
            return Err(format!(
                "secondary gains need g > 0, ki_w > 0, ki_v > 0 (or all zero to disable), got {self:?}"
            ));
        }
        if !(self.kp_w >= 0.0 && self.kp_v >= 0.0) {
            return Err("secondary proportional gains must be >= 0".into());
        }
        Ok(())
    }

    /// PI time constants `(Kp/Ki)` for the frequency and voltage branches.
    pub fn time_constants(&self) -> (f64, f64) {
        (self.kp_w / self.ki_w, self.kp_v / self.ki_v)
    }
}

/// The consensus vector each agent publishes: `[omega, m_p*P, n_q*Q]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SigmaPayload {
    pub omega: f64,
    pub mp_p: f64,
    pub nq_q: f64,
}

impl SigmaPayload {
    pub fn is_finite(&self) -> bool {
        self.omega.is_finite() && self.mp_p.is_finite() && self.nq_q.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondaryState {
    pub int_w: f64,
    pub int_v: f64,
    pub u_p: f64,
    pub u_q: f64,
    pub d_omega_c: f64,
    pub d_vc: f64,
    /// Anti-windup clamp magnitudes for `int_w` and `int_v`.
    pub int_w_limit: f64,
    pub int_v_limit: f64,
}

impl SecondaryState {
    /// Zeroed controller with integrators clamped at ten times the rated
    /// droop deflection of `params`.
    pub fn new(params: &DerParams) -> Self {
        Self {
            int_w: 0.0,
            int_v: 0.0,
            u_p: 0.0,
            u_q: 0.0,
            d_omega_c: 0.0,
            d_vc: 0.0,
            int_w_limit: 10.0 * params.rated_droop_omega(),
            int_v_limit: 10.0 * params.rated_droop_voltage(),
        }
    }
}

/// Consensus input `(u_p, u_q)` of agent `j` from the neighbor payloads it
/// currently holds. `received[m]` is `None` when nothing has arrived from `m`;
/// such neighbors contribute zero.
pub fn consensus_input(
    graph: &CyberGraph,
    gains: &SecondaryGains,
    j: usize,
    sigma_j: &SigmaPayload,
    received: &[Option<SigmaPayload>],
) -> (f64, f64) {
    let mut sum_p = 0.0;
    let mut sum_q = 0.0;
    for (m, &a) in graph.weights()[j].iter().enumerate() {
        if a <= 0.0 {
            continue;
        }
        if let Some(Some(s)) = received.get(m) {
            sum_p += a * ((s.omega - sigma_j.omega) + (s.mp_p - sigma_j.mp_p));
            sum_q += a * (s.nq_q - sigma_j.nq_q);
        }
    }
    (gains.g * sum_p, gains.g * sum_q)
}

/// One Euler step of both PI branches.
///
/// `freq_error` is `omega_nom - omega_j`; `u_final` is the (possibly
/// compensated) consensus input. The frequency branch acts on
/// `freq_error + u_pf`, the voltage branch on `u_qf`, each so that a positive
/// input raises the correction.
///
/// `own_gain` is how fast the frequency-branch input falls per unit rise of
/// the agent's own `d_omega_c` within the same instant: the DER frequency
/// follows its correction algebraically, so `freq_error` and any undelayed
/// own term in `u_p` move with it. The proportional path is solved
/// implicitly against that slope, which is what the continuous PI does;
/// `own_gain = 0` gives the plain explicit step.
pub fn correction_step(
    gains: &SecondaryGains,
    st: &SecondaryState,
    freq_error: f64,
    u_final: (f64, f64),
    own_gain: f64,
    dt: f64,
) -> Result<SecondaryState, PlantError> {
    let x0 = freq_error + u_final.0;
    let k = gains.kp_w + gains.ki_w * dt;
    let x_w = (x0 - own_gain * (st.int_w - st.d_omega_c)) / (1.0 + own_gain * k);
    let x_v = u_final.1;
    let int_w = (st.int_w + gains.ki_w * x_w * dt).clamp(-st.int_w_limit, st.int_w_limit);
    let int_v = (st.int_v + gains.ki_v * x_v * dt).clamp(-st.int_v_limit, st.int_v_limit);
    let next = SecondaryState {
        int_w,
        int_v,
        d_omega_c: gains.kp_w * x_w + int_w,
        d_vc: gains.kp_v * x_v + int_v,
        ..*st
    };
    if !(next.d_omega_c.is_finite() && next.d_vc.is_finite()) {
        return Err(PlantError::NonFinite("secondary correction"));
    }
    Ok(next)
}
