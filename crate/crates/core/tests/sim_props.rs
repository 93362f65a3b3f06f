use dersim::graph::CyberGraph;
use dersim::plant::DerState;
use dersim::scenario::{reference, PlantMode, Scenario};
use dersim::secondary::{consensus_input, SecondaryGains, SigmaPayload};
use dersim::sim::run;
use proptest::prelude::*;

fn short(n: usize, duration_s: f64) -> Scenario {
    let mut s = reference(n);
    s.duration_s = duration_s;
    s.load_events = vec![(duration_s / 2.0, 1.3)];
    s
}

#[test]
fn identical_scenarios_give_identical_bytes() {
    let mut s = short(7, 2.0);
    s.set_uniform_latency(0.02);
    s.attacks[0].attack.dropout_p = 0.1;
    let a = run(&s).unwrap();
    let b = run(&s).unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());
    let (mut ea, mut eb) = (Vec::new(), Vec::new());
    a.write_events(&mut ea).unwrap();
    b.write_events(&mut eb).unwrap();
    assert_eq!(ea, eb);

    s.seed += 1;
    assert_ne!(run(&s).unwrap().to_csv_string(), a.to_csv_string());
}

#[test]
fn bypass_equals_zero_gain_scheme() {
    let mut off = short(7, 2.0);
    off.set_uniform_latency(0.05);
    off.compensation_enabled = false;
    let mut zero = off.clone();
    zero.compensation_enabled = true;
    zero.sampler.k1 = 0.0;
    zero.sampler.k2 = 0.0;
    let (a, b) = (run(&off).unwrap(), run(&zero).unwrap());
    // the bypassed run records no triggers; every trajectory column matches
    assert_eq!(a.t, b.t);
    for (x, y) in a.agents.iter().zip(&b.agents) {
        for c in dersim::trace::AGENT_COLUMNS.iter().filter(|&&c| c != "trig") {
            assert_eq!(x.column(c), y.column(c), "column {c}");
        }
    }
}

#[test]
fn integrator_reduction_reaches_initial_average() {
    let mut s = reference(3);
    s.load_events.clear();
    s.duration_s = 10.0;
    s.compensation_enabled = false;
    let init = [[1.0, 3.0], [2.0, 1.0], [4.5, 2.0]];
    s.plant_mode = PlantMode::Integrator { initial: init.to_vec() };
    let tr = run(&s).unwrap();
    let last = tr.len() - 1;
    for a in &tr.agents {
        assert!((a.mp_p[last] - 2.5).abs() < 1e-6, "mpp {}", a.mp_p[last]);
        assert!((a.nq_q[last] - 2.0).abs() < 1e-6, "nqq {}", a.nq_q[last]);
    }
}

#[test]
fn droop_alone_leaves_steady_state_error() {
    let mut s = short(7, 4.0);
    s.gains = SecondaryGains::disabled();
    let tr = run(&s).unwrap();
    let last = tr.len() - 1;
    let w_nom = tr.omega_nom().unwrap()[0];
    let worst = tr.agents.iter().map(|a| (a.omega[last] - w_nom).abs()).fold(0.0, f64::max);
    assert!(worst > 1e-2, "droop alone restored frequency: {worst}");
    let mpp: Vec<f64> = tr.agents.iter().map(|a| a.mp_p[last]).collect();
    let spread = mpp.iter().cloned().fold(f64::MIN, f64::max) - mpp.iter().cloned().fold(f64::MAX, f64::min);
    let mean = mpp.iter().sum::<f64>() / mpp.len() as f64;
    // every bus settles to one frequency, so droop alone already shares
    // m_p P; the primary-only error shows up in omega
    assert!(spread < 1e-4 * mean, "spread {spread} of mean {mean}");
}

#[test]
fn secondary_restores_frequency_and_sharing() {
    let tr = run(&short(7, 6.0)).unwrap();
    let last = tr.len() - 1;
    let w_nom = tr.omega_nom().unwrap()[0];
    for a in &tr.agents {
        assert!((a.omega[last] - w_nom).abs() < 1e-3);
    }
    let mpp: Vec<f64> = tr.agents.iter().map(|a| a.mp_p[last]).collect();
    let mean = mpp.iter().sum::<f64>() / mpp.len() as f64;
    let spread = mpp.iter().cloned().fold(f64::MIN, f64::max) - mpp.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.01 * mean.abs());
}

#[test]
fn relevance_is_zero_at_triggers() {
    let mut s = short(7, 2.0);
    s.set_uniform_latency(0.05);
    let tr = run(&s).unwrap();
    let mut seen = 0;
    for a in &tr.agents {
        for k in 0..tr.len() {
            if a.trig[k] {
                seen += 1;
                assert_eq!((a.r_p[k], a.r_q[k]), (0.0, 0.0), "row {k}");
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn halving_dt_converges_first_order() {
    // droop only, startup transient; compare omega at 0.2 s across dt, dt/2, dt/4
    let at = |dt: f64| {
        let mut s = reference(3);
        s.gains = SecondaryGains::disabled();
        s.load_events.clear();
        s.duration_s = 0.2;
        s.dt_s = dt;
        let tr = run(&s).unwrap();
        tr.agents[0].omega[tr.len() - 1]
    };
    let (a, b, c) = (at(1e-4), at(5e-5), at(2.5e-5));
    let (d1, d2) = ((a - b).abs(), (b - c).abs());
    assert!(d1 > 0.0 && d2 > 0.0);
    // one-step truncation estimate is d2 (Richardson); halving dt once must
    // move the answer by less than twice the next refinement
    assert!(d1 < 2.0 * d2 * 1.5, "d(dt, dt/2) = {d1}, d(dt/2, dt/4) = {d2}");
    assert!(d1 > d2, "refinement did not shrink the change");
}

fn payload() -> impl Strategy<Value = SigmaPayload> {
    (300.0f64..330.0, -5.0f64..5.0, -50.0f64..50.0).prop_map(|(omega, mp_p, nq_q)| SigmaPayload { omega, mp_p, nq_q })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_rows_follow_sc_cadence(ticks in 1u32..400) {
        let mut s = reference(3);
        s.load_events.clear();
        // whole plant steps, not necessarily whole SC periods
        s.duration_s = ticks as f64 * 1e-4 * 3.0;
        let tr = run(&s).unwrap();
        let want = (s.duration_s / s.sc_period_s + 1e-9).floor() as usize + 1;
        prop_assert_eq!(tr.len(), want);
    }

    #[test]
    fn network_conserves_active_power(
        deltas in proptest::collection::vec(-1.0f64..1.0, 5),
        vds in proptest::collection::vec(300.0f64..330.0, 5),
    ) {
        let s = reference(5);
        let states: Vec<DerState> = deltas.iter().zip(&vds)
            .map(|(&delta, &v_d)| DerState { delta, v_d, ..Default::default() })
            .collect();
        let pq = s.network.electrical_powers(&states);
        let total: f64 = pq.iter().map(|x| x.0).sum();
        let load = s.network.total_load_p();
        prop_assert!(((total - load) / load).abs() < 1e-6);
    }

    #[test]
    fn consensus_is_permutation_equivariant(
        sig in proptest::collection::vec(payload(), 4),
        w in proptest::collection::vec(0.0f64..2.0, 6),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let mut a = vec![vec![0.0; 4]; 4];
        let mut it = w.iter();
        for j in 0..4 {
            for m in j + 1..4 {
                let x = *it.next().unwrap();
                a[j][m] = x;
                a[m][j] = x;
            }
        }
        let g = CyberGraph::from_weights(a.clone()).unwrap();
        // relabel: new agent perm[j] is old agent j
        let mut b = vec![vec![0.0; 4]; 4];
        for j in 0..4 {
            for m in 0..4 {
                b[perm[j]][perm[m]] = a[j][m];
            }
        }
        let gp = CyberGraph::from_weights(b).unwrap();
        let mut sp = vec![sig[0]; 4];
        for j in 0..4 {
            sp[perm[j]] = sig[j];
        }
        let gains = SecondaryGains::default();
        let rx: Vec<Option<SigmaPayload>> = sig.iter().copied().map(Some).collect();
        let rxp: Vec<Option<SigmaPayload>> = sp.iter().copied().map(Some).collect();
        for j in 0..4 {
            let u = consensus_input(&g, &gains, j, &sig[j], &rx);
            let up = consensus_input(&gp, &gains, perm[j], &sp[perm[j]], &rxp);
            prop_assert!((u.0 - up.0).abs() <= 1e-9 * (1.0 + u.0.abs()));
            prop_assert!((u.1 - up.1).abs() <= 1e-9 * (1.0 + u.1.abs()));
        }
    }

    #[test]
    fn consensus_is_linear_in_deltas(sig in proptest::collection::vec(payload(), 3), c in -3.0f64..3.0) {
        let g = CyberGraph::complete(3, 1.0).unwrap();
        let gains = SecondaryGains::default();
        let base = sig[0];
        let scaled: Vec<SigmaPayload> = sig.iter().map(|s| SigmaPayload {
            omega: base.omega + c * (s.omega - base.omega),
            mp_p: base.mp_p + c * (s.mp_p - base.mp_p),
            nq_q: base.nq_q + c * (s.nq_q - base.nq_q),
        }).collect();
        let u = consensus_input(&g, &gains, 0, &base, &sig.iter().copied().map(Some).collect::<Vec<_>>());
        let us = consensus_input(&g, &gains, 0, &base, &scaled.iter().copied().map(Some).collect::<Vec<_>>());
        prop_assert!((us.0 - c * u.0).abs() <= 1e-9 * (1.0 + u.0.abs()));
        prop_assert!((us.1 - c * u.1).abs() <= 1e-9 * (1.0 + u.1.abs()));
    }
}
