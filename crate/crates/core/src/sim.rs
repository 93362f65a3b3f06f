//! Fixed-step scenario runner.
//!
//! The plant advances every `dt_s`. Every `sc_period_s` (and at `t = 0`)
//! the cyber layer runs: agents publish `sigma`, the channel applies attacks
//! and delivers what is due, each agent forms its consensus input from the
//! payloads it holds, the semantic sampler compensates it, the PI correction
//! steps, and one trace row is written. Time is kept as an integer step
//! index so event and boundary tests never drift.

use crate::channel::{LinkAttack, LocalDelay, Link, Packet};
use crate::error::SimError;
use crate::graph::CyberGraph;
use crate::plant::{droop_references, step_plant, DerState, LineNetwork};
use crate::scenario::{PlantMode, Scenario};
use crate::secondary::{consensus_input, correction_step, SecondaryState, SigmaPayload};
use crate::semantic::{downsample, run_pipeline, SamplerState};
use crate::trace::{AgentRow, EventRecord, Trace};
use crate::wire::{self, Bus, SvFrame};

/// Run aborted part-way; `partial` holds every row produced before the fault.
#[derive(Debug)]
pub struct SimAbort {
    pub error: SimError,
    pub partial: Trace,
}

impl std::fmt::Display for SimAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} rows kept)", self.error, self.partial.len())
    }
}

impl std::error::Error for SimAbort {}

/// A scheduled scenario event.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    LoadStep { scale: f64 },
    GraphSwitch { index: usize },
    AttackStart { index: usize },
    AttackEnd { index: usize },
}

/// Mutable world state touched by events.
pub struct World {
    pub network: LineNetwork,
    pub graph: CyberGraph,
    /// Start of the semantic trigger envelope (last disturbance).
    pub envelope_anchor_s: f64,
}

/// Applies one event at `t_s` and returns the record for the log. Every
/// disturbance restarts the trigger envelope of all samplers.
pub fn apply_event(scn: &Scenario, world: &mut World, event: &Event, t_s: f64) -> EventRecord {
    let rec = match event {
        Event::LoadStep { scale } => {
            world.network.scale_loads(*scale);
            EventRecord::LoadStep { t_s, scale: *scale }
        }
        Event::GraphSwitch { index } => {
            world.graph = scn.graphs[*index].1.clone();
            EventRecord::GraphSwitch {
                t_s,
                index: *index,
                graph: world.graph.weights().to_vec(),
            }
        }
        Event::AttackStart { index } => EventRecord::AttackStart { t_s, index: *index },
        Event::AttackEnd { index } => EventRecord::AttackEnd { t_s, index: *index },
    };
    if rec.is_disturbance() {
        world.envelope_anchor_s = t_s;
    }
    rec
}

/// Events keyed by the plant step at which they take effect, in stable order.
fn schedule(scn: &Scenario) -> Vec<(usize, Event)> {
    let step = |t: f64| (t / scn.dt_s - 1e-6).ceil().max(0.0) as usize;
    let mut ev = Vec::new();
    for &(t, scale) in &scn.load_events {
        ev.push((step(t), Event::LoadStep { scale }));
    }
    for (i, (t, _)) in scn.graphs.iter().enumerate().skip(1) {
        ev.push((step(*t), Event::GraphSwitch { index: i }));
    }
    for (i, a) in scn.attacks.iter().enumerate() {
        ev.push((step(a.attack.start_s), Event::AttackStart { index: i }));
        if a.attack.end_s.is_finite() {
            ev.push((step(a.attack.end_s), Event::AttackEnd { index: i }));
        }
    }
    ev.sort_by_key(|(k, _)| *k);
    ev
}

/// Per-agent controller bundle.
struct Agent {
    der: DerState,
    /// Integrator-mode consensus state `(m_p*P, n_q*Q)`.
    upsilon: [f64; 2],
    sc: SecondaryState,
    sampler: SamplerState,
    own_delay: LocalDelay,
    row: AgentRow,
}

pub fn run(scn: &Scenario) -> Result<Trace, SimAbort> {
    let n = scn.n_agents();
    let mut trace = Trace::new(n);
    if let Err(e) = scn.validate() {
        return Err(SimAbort {
            error: e.into(),
            partial: trace,
        });
    }
    let dt = scn.dt_s;
    let ratio = scn.sc_ratio();
    let total = scn.total_steps();
    let integrator = match &scn.plant_mode {
        PlantMode::Integrator { initial } => Some(initial.clone()),
        PlantMode::Droop => None,
    };

    let mut world = World {
        network: scn.network.clone(),
        graph: scn.graphs[0].1.clone(),
        envelope_anchor_s: 0.0,
    };

    let mut agents: Vec<Agent> = (0..n)
        .map(|j| {
            let p = &scn.der_params[j];
            Agent {
                der: DerState::at_droop_point(p, world.network.load_p(j), world.network.load_q(j)),
                upsilon: integrator.as_ref().map(|i| i[j]).unwrap_or([0.0; 2]),
                sc: SecondaryState::new(p),
                sampler: SamplerState::new(&scn.sampler),
                own_delay: LocalDelay::default(),
                row: AgentRow::default(),
            }
        })
        .collect();

    // Every agent publishes on its own topic to all others; only current
    // neighbors are read, so links stay warm across graph switches.
    let mut bus: Bus<SigmaPayload> = Bus::new();
    let mut links: Vec<Vec<Option<Link>>> = (0..n)
        .map(|src| {
            (0..n)
                .map(|dst| (src != dst).then(|| Link::new(scn.seed, src, dst)))
                .collect()
        })
        .collect();
    for src in 0..n {
        for dst in 0..n {
            if src != dst {
                bus.subscribe(src, dst);
            }
        }
    }

    trace.events.push(EventRecord::Start {
        t_s: 0.0,
        seed: scn.seed,
        n_agents: n,
        omega_nom: scn.der_params.iter().map(|p| p.omega_nom).collect(),
        graph: world.graph.weights().to_vec(),
    });

    let events = schedule(scn);
    let mut next_event = 0;
    let mut sc_seq: u64 = 0;
    let sv_ids: Vec<String> = (0..n).map(|j| format!("DER{j}")).collect();

    for k in 0..=total {
        let t = k as f64 * dt;

        while next_event < events.len() && events[next_event].0 <= k {
            let rec = apply_event(scn, &mut world, &events[next_event].1, t);
            trace.events.push(rec);
            next_event += 1;
        }
        for a in agents.iter_mut() {
            if a.sampler.envelope_anchor_s != world.envelope_anchor_s {
                a.sampler.reset_envelope(world.envelope_anchor_s);
            }
        }

        // Raw inner-loop error enters the decimator at the plant rate.
        for a in agents.iter_mut() {
            downsample(&scn.sampler, &mut a.sampler, a.der.e_dvc, a.der.e_qvc);
        }

        if k % ratio == 0 {
            sc_seq += 1;
            let sigmas: Vec<SigmaPayload> = agents
                .iter()
                .enumerate()
                .map(|(j, a)| sigma_of(scn, j, a, integrator.is_some()))
                .collect();

            for (j, s) in sigmas.iter().enumerate() {
                let payload = if scn.codec_in_loop {
                    match codec_round_trip(&sv_ids[j], sc_seq, t, s) {
                        Ok(p) => p,
                        Err(e) => {
                            return Err(abort(
                                trace,
                                SimError::Diverged {
                                    t_s: t,
                                    agent: j,
                                    what: "sigma (codec range)",
                                    value: match e {
                                        crate::error::WireError::ValueOverflow(v) => v,
                                        _ => f64::NAN,
                                    },
                                },
                            ))
                        }
                    }
                } else {
                    *s
                };
                bus.publish(j, payload);
            }
            for dst in 0..n {
                for (src, payload) in bus.drain(dst) {
                    let attack = LinkAttack::combine(
                        scn.attacks
                            .iter()
                            .filter(|a| a.applies_to(src, dst))
                            .map(|a| &a.attack),
                        t,
                    );
                    let link = links[src][dst].as_mut().expect("link exists");
                    // Sequence numbers increase by construction.
                    let _ = link.send(
                        Packet {
                            src,
                            dst,
                            seq: sc_seq,
                            stamp_s: t,
                            payload,
                        },
                        t,
                        &attack,
                    );
                }
            }
            for row in links.iter_mut() {
                for link in row.iter_mut().flatten() {
                    link.deliver_due(t);
                }
            }

            for j in 0..n {
                let received: Vec<Option<SigmaPayload>> = (0..n)
                    .map(|m| links[m][j].as_ref().and_then(|l| l.slot()).map(|s| s.last_payload))
                    .collect();
                let fresh = world
                    .graph
                    .weights()[j]
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(m, _)| links[m][j].as_ref().map_or(f64::INFINITY, |l| l.freshness(t)))
                    .fold(0.0f64, f64::max);
                let a = &mut agents[j];
                let own = a.own_delay.push_and_get(t, sigmas[j], scn.local_delay_s);
                let u = consensus_input(&world.graph, &scn.gains, j, &own, &received);
                let e_vc = (a.der.e_dvc, a.der.e_qvc);

                let out = run_pipeline(&scn.sampler, &mut a.sampler, u, e_vc, t, fresh);
                let u_final = if scn.compensation_enabled { out.u_final } else { u };
                let triggered = out.triggered && scn.compensation_enabled;

                if integrator.is_some() {
                    // Y' = u, integrated here at the secondary rate.
                    a.upsilon[0] += u_final.0 * scn.sc_period_s;
                    a.upsilon[1] += u_final.1 * scn.sc_period_s;
                    a.sc.u_p = u.0;
                    a.sc.u_q = u.1;
                    a.sc.d_omega_c = a.upsilon[0];
                    a.sc.d_vc = a.upsilon[1];
                } else {
                    let p = &scn.der_params[j];
                    let freq_error = p.omega_nom - a.der.omega;
                    let own_terms = if scn.local_delay_s > 0.0 {
                        0.0
                    } else {
                        scn.gains.g * world.graph.weights()[j].iter().sum::<f64>()
                    };
                    let own_gain = 1.0 + own_terms;
                    match correction_step(&scn.gains, &a.sc, freq_error, u_final, own_gain, scn.sc_period_s) {
                        Ok(next) => a.sc = next,
                        Err(_) => {
                            return Err(abort(
                                trace,
                                SimError::NonFinite {
                                    t_s: t,
                                    agent: j,
                                    what: "secondary correction",
                                },
                            ))
                        }
                    }
                    a.sc.u_p = u.0;
                    a.sc.u_q = u.1;
                }
                let s = sigma_of(scn, j, a, integrator.is_some());
                a.row = AgentRow {
                    omega: s.omega,
                    mp_p: s.mp_p,
                    nq_q: s.nq_q,
                    v_d: a.der.v_d,
                    u_p: u.0,
                    u_q: u.1,
                    u_pf: u_final.0,
                    u_qf: u_final.1,
                    e_dvc: a.der.e_dvc,
                    e_qvc: a.der.e_qvc,
                    e_dd: a.sampler.e_dq_down.map_or(0.0, |x| x.0),
                    e_qd: a.sampler.e_dq_down.map_or(0.0, |x| x.1),
                    e_pphi: u_final.0 - u.0,
                    e_qphi: u_final.1 - u.1,
                    fresh: out.fresh_f,
                    r_p: out.relevance[0],
                    r_q: out.relevance[1],
                    trig: triggered,
                    d_omega_c: a.sc.d_omega_c,
                    d_vc: a.sc.d_vc,
                };
            }
            let rows: Vec<AgentRow> = agents.iter().map(|a| a.row).collect();
            trace.push_row(t, &rows);
            if let Some(err) = check_divergence(scn, &agents, t) {
                return Err(abort(trace, err));
            }
        }

        if k == total {
            break;
        }

        if integrator.is_none() {
            let states: Vec<DerState> = agents.iter().map(|a| a.der).collect();
            let powers = world.network.electrical_powers(&states);
            for (j, a) in agents.iter_mut().enumerate() {
                let p = &scn.der_params[j];
                let refs = droop_references(p, &a.der, a.sc.d_omega_c, a.sc.d_vc);
                match step_plant(p, &a.der, refs, powers[j], dt) {
                    Ok(s) => a.der = s,
                    Err(_) => {
                        let t_next = (k + 1) as f64 * dt;
                        return Err(abort(
                            trace,
                            SimError::NonFinite {
                                t_s: t_next,
                                agent: j,
                                what: "plant state",
                            },
                        ));
                    }
                }
            }
        }
    }

    let mut c = crate::channel::LinkCounters::default();
    let mut undelivered = 0u64;
    for link in links.iter().flatten().flatten() {
        let lc = link.counters;
        c.sent += lc.sent;
        c.dropped += lc.dropped;
        c.delivered += lc.delivered;
        c.replay_underruns += lc.replay_underruns;
        c.negative_freshness += lc.negative_freshness;
        undelivered += link.pending() as u64;
    }
    trace.events.push(EventRecord::Finished {
        t_s: total as f64 * dt,
        sent: c.sent,
        dropped: c.dropped,
        delivered: c.delivered,
        undelivered,
        replay_underruns: c.replay_underruns,
        negative_freshness: c.negative_freshness,
    });
    Ok(trace)
}

fn sigma_of(scn: &Scenario, j: usize, a: &Agent, integrator: bool) -> SigmaPayload {
    let p = &scn.der_params[j];
    if integrator {
        SigmaPayload {
            omega: p.omega_nom,
            mp_p: a.upsilon[0],
            nq_q: a.upsilon[1],
        }
    } else {
        SigmaPayload {
            omega: a.der.omega,
            mp_p: p.m_p * a.der.p_filt,
            nq_q: p.n_q * a.der.q_filt,
        }
    }
}

fn codec_round_trip(id: &str, seq: u64, t: f64, s: &SigmaPayload) -> Result<SigmaPayload, crate::error::WireError> {
    let frame = SvFrame::from_sigma(id, (seq & 0xffff) as u16, t, s)?;
    Ok(wire::decode(&wire::encode(&frame)?)?.sigma())
}

fn check_divergence(scn: &Scenario, agents: &[Agent], t: f64) -> Option<SimError> {
    let integrator = matches!(scn.plant_mode, PlantMode::Integrator { .. });
    for (j, a) in agents.iter().enumerate() {
        let (what, value) = a.der.max_abs();
        let candidates = if integrator {
            // the droop states are idle here and sit at their load values
            vec![("upsilon", a.upsilon[0].abs().max(a.upsilon[1].abs()))]
        } else {
            vec![
                (what, value),
                ("d_omega_c", a.sc.d_omega_c.abs()),
                ("d_vc", a.sc.d_vc.abs()),
            ]
        };
        for (what, v) in candidates {
            if !v.is_finite() {
                return Some(SimError::NonFinite { t_s: t, agent: j, what });
            }
            if v > scn.divergence_limit {
                return Some(SimError::Diverged {
                    t_s: t,
                    agent: j,
                    what,
                    value: v,
                });
            }
        }
    }
    None
}

fn abort(mut trace: Trace, error: SimError) -> SimAbort {
    let t_s = trace.t.last().copied().unwrap_or(0.0);
    trace.events.push(EventRecord::Diverged {
        t_s,
        message: error.to_string(),
    });
    SimAbort { error, partial: trace }
}

/// Trace if the run completed, otherwise the partial trace (with a
/// `diverged` event). Sweeps use this to turn divergence into a sentinel.
pub fn run_lenient(scn: &Scenario) -> (Trace, bool) {
    match run(scn) {
        Ok(t) => (t, true),
        Err(a) => (a.partial, false),
    }
}
