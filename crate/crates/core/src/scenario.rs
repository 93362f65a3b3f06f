//! Declarative experiment description and its text format.
//!
//! Scenario files are TOML restricted to a flat style: dotted key paths with
//! the unit in the key name (`time.duration_s = 10.0`), plus arrays of tables
//! for repeated items (`[[attack]]`, `[[load_event]]`, `[[graph_switch]]`).
//! Unknown keys are rejected so typos surface as parse errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::LinkAttack;
use crate::error::ScenarioError;
use crate::graph::CyberGraph;
use crate::plant::{DerParams, LineNetwork};
use crate::secondary::SecondaryGains;
use crate::semantic::SamplerConfig;

/// Which plant the agents drive.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantMode {
    /// Droop-controlled DERs on the reduced phasor network.
    Droop,
    /// Plant removed: each agent is a pure integrator `Y' = u` on the
    /// `(m_p*P, n_q*Q)` consensus channels, started from `initial`.
    Integrator { initial: Vec<[f64; 2]> },
}

/// An attack and the directed links it applies to (`None` = every link).
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub attack: LinkAttack,
    pub links: Option<Vec<(usize, usize)>>,
}

impl AttackSpec {
    pub fn applies_to(&self, src: usize, dst: usize) -> bool {
        match &self.links {
            None => true,
            Some(l) => l.contains(&(src, dst)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub dt_s: f64,
    pub sc_period_s: f64,
    pub duration_s: f64,
    /// `(switch_time_s, graph)`, first entry at 0.
    pub graphs: Vec<(f64, CyberGraph)>,
    pub der_params: Vec<DerParams>,
    pub gains: SecondaryGains,
    pub sampler: SamplerConfig,
    pub network: LineNetwork,
    pub attacks: Vec<AttackSpec>,
    /// `(time_s, multiplicative load scale)`.
    pub load_events: Vec<(f64, f64)>,
    pub compensation_enabled: bool,
    /// Quantize every published payload through the wire codec.
    pub codec_in_loop: bool,
    /// Delay applied to each agent's own term in the consensus sum.
    pub local_delay_s: f64,
    pub plant_mode: PlantMode,
    pub divergence_limit: f64,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.der_params.len()
    }

    /// Plant steps per secondary-control period.
    pub fn sc_ratio(&self) -> usize {
        (self.sc_period_s / self.dt_s).round() as usize
    }

    /// Number of plant steps in the run.
    pub fn total_steps(&self) -> usize {
        (self.duration_s / self.dt_s + 1e-6).floor() as usize
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let n = self.n_agents();
        if n < 2 {
            return bad(format!("need at least 2 agents, got {n}"));
        }
        if !(self.dt_s > 0.0 && self.dt_s <= 1e-3) {
            return bad(format!("time.dt_s must lie in (0, 1e-3], got {}", self.dt_s));
        }
        let ratio = self.sc_period_s / self.dt_s;
        if !(ratio >= 1.0 - 1e-9 && (ratio - ratio.round()).abs() < 1e-6) {
            return bad(format!(
                "time.sc_period_s = {} is not an integer multiple of time.dt_s = {}",
                self.sc_period_s, self.dt_s
            ));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("time.duration_s must be > 0, got {}", self.duration_s));
        }
        if self.graphs.is_empty() || self.graphs[0].0 != 0.0 {
            return bad("the first graph must start at t = 0".into());
        }
        for w in self.graphs.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad("graph switch times must be strictly increasing".into());
            }
        }
        for (t, g) in &self.graphs {
            if g.n() != n {
                return bad(format!("graph at t = {t} has {} agents, expected {n}", g.n()));
            }
        }
        for (j, p) in self.der_params.iter().enumerate() {
            p.validate().map_err(|e| ScenarioError::Invalid(format!("der {j}: {e}")))?;
        }
        self.gains.validate().map_err(ScenarioError::Invalid)?;
        self.sampler.validate().map_err(ScenarioError::Invalid)?;
        if self.network.n() != n {
            return bad(format!("network has {} buses, expected {n}", self.network.n()));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            a.attack
                .validate()
                .map_err(|e| ScenarioError::Invalid(format!("attack {i}: {e}")))?;
            if let Some(links) = &a.links {
                for &(s, d) in links {
                    if s >= n || d >= n || s == d {
                        return bad(format!("attack {i}: invalid link ({s}, {d})"));
                    }
                }
            }
        }
        for &(t, s) in &self.load_events {
            if !(t >= 0.0 && t.is_finite() && s > 0.0 && s.is_finite()) {
                return bad(format!("load event ({t}, {s}) needs t >= 0 and scale > 0"));
            }
        }
        if !(self.local_delay_s >= 0.0 && self.local_delay_s.is_finite()) {
            return bad("compensation.local_delay_s must be finite and >= 0".into());
        }
        if let PlantMode::Integrator { initial } = &self.plant_mode {
            if initial.len() != n {
                return bad(format!("plant.initial has {} entries, expected {n}", initial.len()));
            }
        }
        if !(self.divergence_limit > 0.0) {
            return bad("divergence_limit must be > 0".into());
        }
        Ok(())
    }

    /// Parses and validates a scenario file.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let scn = Self::parse(&text, &path.display().to_string())?;
        scn.validate()?;
        Ok(scn)
    }

    /// Parses text into a scenario without the cross-field validation.
    /// Structural errors (syntax, unknown keys, wrong types) come back as
    /// `ScenarioError::Parse` with a 1-based line number.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            ScenarioError::Parse {
                path: origin.to_string(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        file.into_scenario()
    }

    /// Graph in force at `t_s`.
    pub fn graph_at(&self, t_s: f64) -> &CyberGraph {
        let mut g = &self.graphs[0].1;
        for (t, gr) in &self.graphs {
            if *t <= t_s + 1e-9 {
                g = gr;
            }
        }
        g
    }

    /// Latency applied on every link, replacing any latency already in the
    /// attack list (adds an always-on attack if none exists).
    pub fn set_uniform_latency(&mut self, tau_s: f64) {
        if self.attacks.is_empty() {
            self.attacks.push(AttackSpec {
                attack: LinkAttack::none(),
                links: None,
            });
        }
        for a in &mut self.attacks {
            a.attack.latency_s = 0.0;
        }
        self.attacks[0].attack.latency_s = tau_s;
    }
}

// ----- file format -----

#[derive(Debug, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    seed: u64,
    agents: usize,
    #[serde(default)]
    time: TimeSection,
    #[serde(default)]
    der: DerParams,
    #[serde(default)]
    gains: Option<SecondaryGains>,
    #[serde(default)]
    secondary: SecondarySection,
    #[serde(default)]
    sampler: SamplerConfig,
    #[serde(default)]
    compensation: CompensationSection,
    #[serde(default)]
    network: NetworkSection,
    #[serde(default)]
    plant: PlantSection,
    graph: GraphSection,
    #[serde(default)]
    graph_switch: Vec<GraphSwitchEntry>,
    #[serde(default)]
    attack: Vec<AttackEntry>,
    #[serde(default)]
    load_event: Vec<LoadEventEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct TimeSection {
    dt_s: f64,
    sc_period_s: f64,
    duration_s: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self {
            dt_s: 1e-4,
            sc_period_s: 1e-3,
            duration_s: 10.0,
        }
    }
}

#[derive(Debug, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields, default)]
struct SecondarySection {
    /// `false` runs droop only (all secondary gains zero).
    disabled: bool,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct CompensationSection {
    enabled: bool,
    codec_in_loop: bool,
    local_delay_s: f64,
}

impl Default for CompensationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            codec_in_loop: false,
            local_delay_s: 0.0,
        }
    }
}

#[derive(Debug, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields, default)]
struct PlantSection {
    /// `"droop"` (default) or `"integrator"`.
    mode: Option<String>,
    initial_mpp: Vec<f64>,
    initial_nqq: Vec<f64>,
    divergence_limit: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields, default)]
struct NetworkSection {
    /// Electrical topology preset (`ring`, `line`, `complete`).
    topology: Option<String>,
    susceptance_pu: Option<f64>,
    susceptance_matrix: Option<Vec<Vec<f64>>>,
    s_base_w: Option<f64>,
    q_coef_var_per_v: Option<f64>,
    load_p_w: Option<Vec<f64>>,
    load_q_var: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
struct GraphSection {
    preset: Option<String>,
    #[serde(default)]
    weight: Option<f64>,
    weights: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct GraphSwitchEntry {
    time_s: f64,
    preset: Option<String>,
    #[serde(default)]
    weight: Option<f64>,
    weights: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct AttackEntry {
    #[serde(default)]
    latency_s: f64,
    #[serde(default)]
    dropout_p: f64,
    #[serde(default)]
    tsa_offset_samples: i64,
    #[serde(default = "default_sample_period")]
    tsa_sample_period_s: f64,
    #[serde(default)]
    start_s: f64,
    #[serde(default = "default_end")]
    end_s: f64,
    /// Restrict to these directed `[src, dst]` links.
    links: Option<Vec<[usize; 2]>>,
    /// Restrict to every outgoing link of these agents.
    sources: Option<Vec<usize>>,
}

fn default_sample_period() -> f64 {
    1e-4
}

fn default_end() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LoadEventEntry {
    time_s: f64,
    scale: f64,
}

fn build_graph(
    n: usize,
    preset: &Option<String>,
    weight: Option<f64>,
    weights: &Option<Vec<Vec<f64>>>,
) -> Result<CyberGraph, ScenarioError> {
    match (preset, weights) {
        (Some(p), None) => Ok(CyberGraph::preset(p, n, weight.unwrap_or(1.0))?),
        (None, Some(w)) => Ok(CyberGraph::from_weights(w.clone())?),
        _ => Err(ScenarioError::Invalid(
            "a graph needs exactly one of `preset` or `weights`".into(),
        )),
    }
}

/// Reference load pattern as fractions of rating; cycled for other sizes.
const LOAD_P_FRACTIONS: [f64; 7] = [0.55, 0.70, 0.45, 0.80, 0.60, 0.50, 0.75];
const LOAD_Q_FRACTIONS: [f64; 7] = [0.20, 0.30, 0.15, 0.35, 0.25, 0.18, 0.28];

/// Default electrical surrogate for `n` buses: ring feeder with unequal loads.
pub fn default_network(n: usize, p_rating: f64) -> Result<LineNetwork, String> {
    let b = ring_susceptance(n, DEFAULT_SUSCEPTANCE);
    LineNetwork::new(
        b,
        DEFAULT_S_BASE_W,
        DEFAULT_Q_COEF,
        (0..n).map(|j| LOAD_P_FRACTIONS[j % 7] * p_rating).collect(),
        (0..n).map(|j| LOAD_Q_FRACTIONS[j % 7] * p_rating).collect(),
    )
}

pub const DEFAULT_SUSCEPTANCE: f64 = 1.0;
pub const DEFAULT_S_BASE_W: f64 = 200_000.0;
pub const DEFAULT_Q_COEF: f64 = 2_000.0;

fn ring_susceptance(n: usize, b: f64) -> Vec<Vec<f64>> {
    CyberGraph::ring(n, b)
        .map(|g| g.weights().to_vec())
        .unwrap_or_else(|_| vec![vec![0.0; n]; n])
}

impl ScenarioFile {
    fn into_scenario(self) -> Result<Scenario, ScenarioError> {
        let n = self.agents;
        let inv = |m: String| ScenarioError::Invalid(m);
        if n < 2 {
            return Err(inv(format!("agents must be >= 2, got {n}")));
        }
        let mut graphs = vec![(0.0, build_graph(n, &self.graph.preset, self.graph.weight, &self.graph.weights)?)];
        for gs in &self.graph_switch {
            graphs.push((gs.time_s, build_graph(n, &gs.preset, gs.weight, &gs.weights)?));
        }

        let nw = &self.network;
        let b = match (&nw.susceptance_matrix, &nw.topology) {
            (Some(m), None) => m.clone(),
            (None, t) => {
                let name = t.as_deref().unwrap_or("ring");
                CyberGraph::preset(name, n, nw.susceptance_pu.unwrap_or(DEFAULT_SUSCEPTANCE))?
                    .weights()
                    .to_vec()
            }
            (Some(_), Some(_)) => {
                return Err(inv("network: give either topology or susceptance_matrix".into()))
            }
        };
        let rating = self.der.p_rating;
        let network = LineNetwork::new(
            b,
            nw.s_base_w.unwrap_or(DEFAULT_S_BASE_W),
            nw.q_coef_var_per_v.unwrap_or(DEFAULT_Q_COEF),
            nw.load_p_w
                .clone()
                .unwrap_or_else(|| (0..n).map(|j| LOAD_P_FRACTIONS[j % 7] * rating).collect()),
            nw.load_q_var
                .clone()
                .unwrap_or_else(|| (0..n).map(|j| LOAD_Q_FRACTIONS[j % 7] * rating).collect()),
        )
        .map_err(inv)?;

        let plant_mode = match self.plant.mode.as_deref().unwrap_or("droop") {
            "droop" => PlantMode::Droop,
            "integrator" => {
                let (p, q) = (&self.plant.initial_mpp, &self.plant.initial_nqq);
                if p.len() != n || (!q.is_empty() && q.len() != n) {
                    return Err(inv(format!(
                        "plant.initial_mpp / plant.initial_nqq need {n} entries"
                    )));
                }
                PlantMode::Integrator {
                    initial: (0..n).map(|j| [p[j], q.get(j).copied().unwrap_or(0.0)]).collect(),
                }
            }
            other => return Err(inv(format!("unknown plant.mode `{other}`"))),
        };

        let mut attacks = Vec::new();
        for a in &self.attack {
            let links = match (&a.links, &a.sources) {
                (Some(_), Some(_)) => {
                    return Err(inv("attack: give at most one of links / sources".into()))
                }
                (Some(l), None) => Some(l.iter().map(|x| (x[0], x[1])).collect()),
                (None, Some(s)) => Some(
                    s.iter()
                        .flat_map(|&src| (0..n).filter(move |&d| d != src).map(move |d| (src, d)))
                        .collect(),
                ),
                (None, None) => None,
            };
            attacks.push(AttackSpec {
                attack: LinkAttack {
                    latency_s: a.latency_s,
                    dropout_p: a.dropout_p,
                    tsa_offset_samples: a.tsa_offset_samples,
                    sample_period_s: a.tsa_sample_period_s,
                    start_s: a.start_s,
                    end_s: a.end_s,
                },
                links,
            });
        }

        let gains = if self.secondary.disabled {
            SecondaryGains::disabled()
        } else {
            self.gains.unwrap_or_default()
        };

        Ok(Scenario {
            name: self.name.unwrap_or_else(|| "unnamed".into()),
            seed: self.seed,
            dt_s: self.time.dt_s,
            sc_period_s: self.time.sc_period_s,
            duration_s: self.time.duration_s,
            graphs,
            der_params: vec![self.der; n],
            gains,
            sampler: self.sampler,
            network,
            attacks,
            load_events: self.load_event.iter().map(|e| (e.time_s, e.scale)).collect(),
            compensation_enabled: self.compensation.enabled,
            codec_in_loop: self.compensation.codec_in_loop,
            local_delay_s: self.compensation.local_delay_s,
            plant_mode,
            divergence_limit: self.plant.divergence_limit.unwrap_or(1e6),
        })
    }
}

/// Reference 7-agent scenario (no attack, complete graph, load step at 5 s).
pub fn reference(n: usize) -> Scenario {
    let der = DerParams::default();
    Scenario {
        name: "reference".into(),
        seed: 1,
        dt_s: 1e-4,
        sc_period_s: 1e-3,
        duration_s: 10.0,
        graphs: vec![(0.0, CyberGraph::complete(n, 1.0).expect("n >= 2"))],
        der_params: vec![der; n],
        gains: SecondaryGains::default(),
        sampler: SamplerConfig::default(),
        network: default_network(n, der.p_rating).expect("default network"),
        attacks: Vec::new(),
        load_events: vec![(5.0, 1.3)],
        compensation_enabled: true,
        codec_in_loop: false,
        local_delay_s: 0.0,
        plant_mode: PlantMode::Droop,
        divergence_limit: 1e6,
    }
}
