//! Reduced-order phasor model of the DERs and the electrical network.
//!
//! Each DER is an algebraic droop law fed by first-order low-pass power
//! measurements, with a first-order lag standing in for the inner voltage
//! loop. The lag's tracking error is the `e^dqVC` signal the semantic
//! sampler consumes. Integration is explicit Euler at a fixed step.

use serde::{Deserialize, Serialize};

use crate::error::PlantError;

/// `220 * sqrt(2)` volts.
pub const V_NOM_DEFAULT: f64 = 311.126_983_722_080_4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerParams {
    /// Active-power droop gain, rad/(W·s).
    pub m_p: f64,
    /// Reactive-power droop gain, V/VAr.
    pub n_q: f64,
    pub omega_nom: f64,
    pub v_nom: f64,
    /// Rated power, W. Also used as the VAr rating when scaling reactive bands.
    pub p_rating: f64,
    /// Power measurement low-pass cutoff, rad/s.
    pub omega_f: f64,
    /// Inner voltage-loop lag time constant, s.
    pub t_v: f64,
}

impl Default for DerParams {
    fn default() -> Self {
        Self {
            m_p: 9.4e-5,
            n_q: 1.3e-3,
            omega_nom: 314.15,
            v_nom: V_NOM_DEFAULT,
            p_rating: 32_000.0,
            omega_f: 31.41,
            t_v: 0.01,
        }
    }
}

impl DerParams {
    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            ("m_p", self.m_p),
            ("n_q", self.n_q),
            ("omega_nom", self.omega_nom),
            ("v_nom", self.v_nom),
            ("p_rating", self.p_rating),
            ("omega_f", self.omega_f),
            ("t_v", self.t_v),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("der.{name} must be finite and > 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Frequency deflection at rated power, `m_p * P_rating`.
    pub fn rated_droop_omega(&self) -> f64 {
        self.m_p * self.p_rating
    }

    /// Voltage deflection at rated reactive power, `n_q * Q_rating`.
    pub fn rated_droop_voltage(&self) -> f64 {
        self.n_q * self.p_rating
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerState {
    pub delta: f64,
    pub omega: f64,
    pub v_d: f64,
    pub v_q: f64,
    pub p_filt: f64,
    pub q_filt: f64,
    pub e_dvc: f64,
    pub e_qvc: f64,
}

impl DerState {
    /// Steady droop operating point for the given measured powers, with no
    /// secondary correction and zero angle.
    pub fn at_droop_point(params: &DerParams, p: f64, q: f64) -> Self {
        Self {
            delta: 0.0,
            omega: params.omega_nom - params.m_p * p,
            v_d: params.v_nom - params.n_q * q,
            v_q: 0.0,
            p_filt: p,
            q_filt: q,
            e_dvc: 0.0,
            e_qvc: 0.0,
        }
    }

    pub fn check_finite(&self) -> Result<(), PlantError> {
        let fields = [
            ("delta", self.delta),
            ("omega", self.omega),
            ("v_d", self.v_d),
            ("v_q", self.v_q),
            ("p_filt", self.p_filt),
            ("q_filt", self.q_filt),
            ("e_dvc", self.e_dvc),
            ("e_qvc", self.e_qvc),
        ];
        match fields.into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(PlantError::NonFinite(name)),
            None => Ok(()),
        }
    }

    /// Largest magnitude among the state's components (divergence check).
    pub fn max_abs(&self) -> (&'static str, f64) {
        [
            ("delta", self.delta),
            ("omega", self.omega),
            ("v_d", self.v_d),
            ("v_q", self.v_q),
            ("p_filt", self.p_filt),
            ("q_filt", self.q_filt),
        ]
        .into_iter()
        .map(|(n, v)| (n, v.abs()))
        .fold(("delta", 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    }
}

/// Droop references `(omega*, (v_d*, v_q*))` including secondary corrections.
pub fn droop_references(
    params: &DerParams,
    state: &DerState,
    d_omega_c: f64,
    d_vc: f64,
) -> (f64, (f64, f64)) {
    let omega_star = params.omega_nom - params.m_p * state.p_filt + d_omega_c;
    let v_d_star = params.v_nom - params.n_q * state.q_filt + d_vc;
    (omega_star, (v_d_star, 0.0))
}

/// Electrical coupling between DER buses.
///
/// Active power uses a lossless angle model
/// `P_j = load_p_j + s_base * sum_k B_jk * sin(delta_j - delta_k)`; reactive
/// power uses a linear voltage-difference model
/// `Q_j = load_q_j + q_coef * sum_k B_jk * (v_d_j - v_d_k)`. Both exchange
/// terms are antisymmetric, so generation always sums to the scaled load.
#[derive(Debug, Clone, PartialEq)]
pub struct LineNetwork {
    susceptances: Vec<Vec<f64>>,
    /// W per p.u. susceptance per unit `sin` of angle difference.
    pub s_base: f64,
    /// VAr per p.u. susceptance per volt of d-axis voltage difference.
    pub q_coef: f64,
    base_load_p: Vec<f64>,
    base_load_q: Vec<f64>,
    load_scale: f64,
}

impl LineNetwork {
    pub fn new(
        susceptances: Vec<Vec<f64>>,
        s_base: f64,
        q_coef: f64,
        load_p: Vec<f64>,
        load_q: Vec<f64>,
    ) -> Result<Self, String> {
        let n = susceptances.len();
        if load_p.len() != n || load_q.len() != n {
            return Err(format!(
                "network has {n} buses but {} P loads and {} Q loads",
                load_p.len(),
                load_q.len()
            ));
        }
        for (j, row) in susceptances.iter().enumerate() {
            if row.len() != n {
                return Err(format!("susceptance row {j} has {} entries, expected {n}", row.len()));
            }
            for (k, &b) in row.iter().enumerate() {
                if !b.is_finite() || b < 0.0 {
                    return Err(format!("susceptance B[{j}][{k}] = {b} must be finite and >= 0"));
                }
                if j == k && b != 0.0 {
                    return Err(format!("susceptance B[{j}][{j}] must be 0"));
                }
                if (b - susceptances[k][j]).abs() > 1e-12 {
                    return Err(format!("susceptance matrix is not symmetric at ({j}, {k})"));
                }
            }
        }
        if !(s_base.is_finite() && s_base > 0.0 && q_coef.is_finite() && q_coef >= 0.0) {
            return Err("network.s_base must be > 0 and network.q_coef >= 0".into());
        }
        if load_p.iter().chain(&load_q).any(|x| !x.is_finite()) {
            return Err("loads must be finite".into());
        }
        Ok(Self {
            susceptances,
            s_base,
            q_coef,
            base_load_p: load_p,
            base_load_q: load_q,
            load_scale: 1.0,
        })
    }

    pub fn n(&self) -> usize {
        self.susceptances.len()
    }

    pub fn susceptances(&self) -> &[Vec<f64>] {
        &self.susceptances
    }

    pub fn load_p(&self, j: usize) -> f64 {
        self.base_load_p[j] * self.load_scale
    }

    pub fn load_q(&self, j: usize) -> f64 {
        self.base_load_q[j] * self.load_scale
    }

    pub fn total_load_p(&self) -> f64 {
        self.base_load_p.iter().sum::<f64>() * self.load_scale
    }

    pub fn total_load_q(&self) -> f64 {
        self.base_load_q.iter().sum::<f64>() * self.load_scale
    }

    pub fn load_scale(&self) -> f64 {
        self.load_scale
    }

    /// Multiplies all loads by `factor` (relative to the current level).
    pub fn scale_loads(&mut self, factor: f64) {
        self.load_scale *= factor;
    }

    /// Per-DER electrical `(P, Q)` injections.
    pub fn electrical_powers(&self, states: &[DerState]) -> Vec<(f64, f64)> {
        let n = self.n();
        (0..n)
            .map(|j| {
                let row = &self.susceptances[j];
                let mut p = 0.0;
                let mut q = 0.0;
                for (k, &b) in row.iter().enumerate() {
                    if b == 0.0 {
                        continue;
                    }
                    p += b * (states[j].delta - states[k].delta).sin();
                    q += b * (states[j].v_d - states[k].v_d);
                }
                (
                    self.load_p(j) + self.s_base * p,
                    self.load_q(j) + self.q_coef * q,
                )
            })
            .collect()
    }
}

/// One explicit-Euler step of a DER.
pub fn step_plant(
    params: &DerParams,
    state: &DerState,
    refs: (f64, (f64, f64)),
    powers: (f64, f64),
    dt: f64,
) -> Result<DerState, PlantError> {
    if !(dt > 0.0 && dt <= 1e-3) {
        return Err(PlantError::BadStep(dt));
    }
    let (omega_star, (v_d_star, v_q_star)) = refs;
    let (p, q) = powers;
    let omega = omega_star;
    let v_d = state.v_d + (v_d_star - state.v_d) / params.t_v * dt;
    let v_q = state.v_q + (v_q_star - state.v_q) / params.t_v * dt;
    let next = DerState {
        delta: state.delta + (omega - params.omega_nom) * dt,
        omega,
        v_d,
        v_q,
        p_filt: state.p_filt + params.omega_f * (p - state.p_filt) * dt,
        q_filt: state.q_filt + params.omega_f * (q - state.q_filt) * dt,
        e_dvc: v_d_star - v_d,
        e_qvc: v_q_star - v_q,
    };
    next.check_finite()?;
    Ok(next)
}
