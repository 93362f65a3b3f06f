//! Columnar simulation trace, its CSV form and the JSON-lines event log.
//!
//! CSV header: `t_s` followed, for each agent `j` (0-based), by the columns
//! in [`AGENT_COLUMNS`] suffixed with `_<j>`, e.g. `omega_0, mpp_0, ...`.
//! Floats are written in Rust's shortest round-trip form, so a trace read
//! back is bit-identical to the one written.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::TraceError;

/// Per-agent columns, in CSV order.
pub const AGENT_COLUMNS: [&str; 20] = [
    "omega", "mpp", "nqq", "vd", "up", "uq", "upf", "uqf", "edvc", "eqvc", "edd", "eqd", "epphi",
    "eqphi", "fresh", "rp", "rq", "trig", "dwc", "dvc",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentSeries {
    pub omega: Vec<f64>,
    pub mp_p: Vec<f64>,
    pub nq_q: Vec<f64>,
    pub v_d: Vec<f64>,
    pub u_p: Vec<f64>,
    pub u_q: Vec<f64>,
    pub u_pf: Vec<f64>,
    pub u_qf: Vec<f64>,
    pub e_dvc: Vec<f64>,
    pub e_qvc: Vec<f64>,
    pub e_dd: Vec<f64>,
    pub e_qd: Vec<f64>,
    pub e_pphi: Vec<f64>,
    pub e_qphi: Vec<f64>,
    pub fresh: Vec<f64>,
    pub r_p: Vec<f64>,
    pub r_q: Vec<f64>,
    pub trig: Vec<bool>,
    pub d_omega_c: Vec<f64>,
    pub d_vc: Vec<f64>,
}

/// One trace row for one agent.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AgentRow {
    pub omega: f64,
    pub mp_p: f64,
    pub nq_q: f64,
    pub v_d: f64,
    pub u_p: f64,
    pub u_q: f64,
    pub u_pf: f64,
    pub u_qf: f64,
    pub e_dvc: f64,
    pub e_qvc: f64,
    pub e_dd: f64,
    pub e_qd: f64,
    pub e_pphi: f64,
    pub e_qphi: f64,
    pub fresh: f64,
    pub r_p: f64,
    pub r_q: f64,
    pub trig: bool,
    pub d_omega_c: f64,
    pub d_vc: f64,
}

impl AgentRow {
    fn values(&self) -> [f64; 20] {
        [
            self.omega,
            self.mp_p,
            self.nq_q,
            self.v_d,
            self.u_p,
            self.u_q,
            self.u_pf,
            self.u_qf,
            self.e_dvc,
            self.e_qvc,
            self.e_dd,
            self.e_qd,
            self.e_pphi,
            self.e_qphi,
            self.fresh,
            self.r_p,
            self.r_q,
            if self.trig { 1.0 } else { 0.0 },
            self.d_omega_c,
            self.d_vc,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            omega: v[0],
            mp_p: v[1],
            nq_q: v[2],
            v_d: v[3],
            u_p: v[4],
            u_q: v[5],
            u_pf: v[6],
            u_qf: v[7],
            e_dvc: v[8],
            e_qvc: v[9],
            e_dd: v[10],
            e_qd: v[11],
            e_pphi: v[12],
            e_qphi: v[13],
            fresh: v[14],
            r_p: v[15],
            r_q: v[16],
            trig: v[17] != 0.0,
            d_omega_c: v[18],
            d_vc: v[19],
        }
    }
}

impl AgentSeries {
    fn push(&mut self, r: &AgentRow) {
        self.omega.push(r.omega);
        self.mp_p.push(r.mp_p);
        self.nq_q.push(r.nq_q);
        self.v_d.push(r.v_d);
        self.u_p.push(r.u_p);
        self.u_q.push(r.u_q);
        self.u_pf.push(r.u_pf);
        self.u_qf.push(r.u_qf);
        self.e_dvc.push(r.e_dvc);
        self.e_qvc.push(r.e_qvc);
        self.e_dd.push(r.e_dd);
        self.e_qd.push(r.e_qd);
        self.e_pphi.push(r.e_pphi);
        self.e_qphi.push(r.e_qphi);
        self.fresh.push(r.fresh);
        self.r_p.push(r.r_p);
        self.r_q.push(r.r_q);
        self.trig.push(r.trig);
        self.d_omega_c.push(r.d_omega_c);
        self.d_vc.push(r.d_vc);
    }

    pub fn row(&self, k: usize) -> AgentRow {
        AgentRow {
            omega: self.omega[k],
            mp_p: self.mp_p[k],
            nq_q: self.nq_q[k],
            v_d: self.v_d[k],
            u_p: self.u_p[k],
            u_q: self.u_q[k],
            u_pf: self.u_pf[k],
            u_qf: self.u_qf[k],
            e_dvc: self.e_dvc[k],
            e_qvc: self.e_qvc[k],
            e_dd: self.e_dd[k],
            e_qd: self.e_qd[k],
            e_pphi: self.e_pphi[k],
            e_qphi: self.e_qphi[k],
            fresh: self.fresh[k],
            r_p: self.r_p[k],
            r_q: self.r_q[k],
            trig: self.trig[k],
            d_omega_c: self.d_omega_c[k],
            d_vc: self.d_vc[k],
        }
    }

    /// Column by CSV name (without the agent suffix).
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = match name {
            "omega" => &self.omega,
            "mpp" => &self.mp_p,
            "nqq" => &self.nq_q,
            "vd" => &self.v_d,
            "up" => &self.u_p,
            "uq" => &self.u_q,
            "upf" => &self.u_pf,
            "uqf" => &self.u_qf,
            "edvc" => &self.e_dvc,
            "eqvc" => &self.e_qvc,
            "edd" => &self.e_dd,
            "eqd" => &self.e_qd,
            "epphi" => &self.e_pphi,
            "eqphi" => &self.e_qphi,
            "fresh" => &self.fresh,
            "rp" => &self.r_p,
            "rq" => &self.r_q,
            "dwc" => &self.d_omega_c,
            "dvc" => &self.d_vc,
            "trig" => return Some(self.trig.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
            _ => return None,
        };
        Some(c.clone())
    }
}

/// Scenario events as recorded in the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord {
    Start {
        t_s: f64,
        seed: u64,
        n_agents: usize,
        omega_nom: Vec<f64>,
        graph: Vec<Vec<f64>>,
    },
    LoadStep {
        t_s: f64,
        scale: f64,
    },
    GraphSwitch {
        t_s: f64,
        index: usize,
        graph: Vec<Vec<f64>>,
    },
    AttackStart {
        t_s: f64,
        index: usize,
    },
    AttackEnd {
        t_s: f64,
        index: usize,
    },
    Diverged {
        t_s: f64,
        message: String,
    },
    Finished {
        t_s: f64,
        sent: u64,
        dropped: u64,
        delivered: u64,
        undelivered: u64,
        replay_underruns: u64,
        negative_freshness: u64,
    },
}

impl EventRecord {
    pub fn t_s(&self) -> f64 {
        match self {
            EventRecord::Start { t_s, .. }
            | EventRecord::LoadStep { t_s, .. }
            | EventRecord::GraphSwitch { t_s, .. }
            | EventRecord::AttackStart { t_s, .. }
            | EventRecord::AttackEnd { t_s, .. }
            | EventRecord::Diverged { t_s, .. }
            | EventRecord::Finished { t_s, .. } => *t_s,
        }
    }

    /// Disturbances that restart transients (load steps, graph switches,
    /// attack onsets).
    pub fn is_disturbance(&self) -> bool {
        matches!(
            self,
            EventRecord::LoadStep { .. } | EventRecord::GraphSwitch { .. } | EventRecord::AttackStart { .. }
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub t: Vec<f64>,
    pub agents: Vec<AgentSeries>,
    pub events: Vec<EventRecord>,
}

impl Trace {
    pub fn new(n_agents: usize) -> Self {
        Self {
            t: Vec::new(),
            agents: vec![AgentSeries::default(); n_agents],
            events: Vec::new(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push_row(&mut self, t: f64, rows: &[AgentRow]) {
        self.t.push(t);
        for (series, r) in self.agents.iter_mut().zip(rows) {
            series.push(r);
        }
    }

    /// Nominal frequency per agent from the start event, if present.
    pub fn omega_nom(&self) -> Option<Vec<f64>> {
        self.events.iter().find_map(|e| match e {
            EventRecord::Start { omega_nom, .. } => Some(omega_nom.clone()),
            _ => None,
        })
    }

    /// Times of disturbance events, ascending.
    pub fn disturbance_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.is_disturbance())
            .map(EventRecord::t_s)
            .collect()
    }

    /// Piecewise-constant graph schedule `(switch_time, weights)` recorded in the log.
    pub fn graph_schedule(&self) -> Vec<(f64, Vec<Vec<f64>>)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                EventRecord::Start { graph, .. } => Some((0.0, graph.clone())),
                EventRecord::GraphSwitch { t_s, graph, .. } => Some((*t_s, graph.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn header(n_agents: usize) -> String {
        let mut h = String::from("t_s");
        for j in 0..n_agents {
            for c in AGENT_COLUMNS {
                let _ = write!(h, ",{c}_{j}");
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::header(self.n_agents()))?;
        let mut line = String::new();
        for k in 0..self.len() {
            line.clear();
            let _ = write!(line, "{}", self.t[k]);
            for a in &self.agents {
                for v in a.row(k).values() {
                    let _ = write!(line, ",{v}");
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8")
    }

    pub fn write_events<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(TraceError::Format {
            line: 1,
            msg: "empty file".into(),
        })??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"t_s") || (cols.len() - 1) % AGENT_COLUMNS.len() != 0 {
            return Err(TraceError::Format {
                line: 1,
                msg: "header does not match the trace layout".into(),
            });
        }
        let n = (cols.len() - 1) / AGENT_COLUMNS.len();
        if Self::header(n) != header.trim() {
            return Err(TraceError::Format {
                line: 1,
                msg: "header column names do not match the trace layout".into(),
            });
        }
        let mut trace = Trace::new(n);
        let mut rows = vec![AgentRow::default(); n];
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.trim().split(',').map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| TraceError::Format {
                line: i + 2,
                msg: e.to_string(),
            })?;
            if vals.len() != cols.len() {
                return Err(TraceError::Format {
                    line: i + 2,
                    msg: format!("expected {} fields, found {}", cols.len(), vals.len()),
                });
            }
            for (j, row) in rows.iter_mut().enumerate() {
                let s = 1 + j * AGENT_COLUMNS.len();
                *row = AgentRow::from_values(&vals[s..s + AGENT_COLUMNS.len()]);
            }
            trace.push_row(vals[0], &rows);
        }
        Ok(trace)
    }

    pub fn read_events<R: BufRead>(r: R) -> Result<Vec<EventRecord>, TraceError> {
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}
