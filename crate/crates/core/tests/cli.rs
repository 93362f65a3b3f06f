use std::path::{Path, PathBuf};

use dersim::cli::{self, main_with, RunManifest};
use dersim::metrics::{report, ObjectiveBands};
use dersim::scenario::Scenario;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn bundled() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(scenarios())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "scn"))
        .collect();
    v.sort();
    v
}

fn call(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = main_with(std::iter::once("dersim").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DIVERGING: &str = r#"
agents = 7
graph.preset = "ring"
time.duration_s = 20.0
plant.mode = "integrator"
plant.initial_mpp = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
plant.divergence_limit = 1000.0
compensation.enabled = false
compensation.local_delay_s = 0.9

[[attack]]
latency_s = 0.9
"#;

#[test]
fn bound_presets() {
    let (code, out) = call(&["bound", "--preset", "complete", "-n", "7", "--json"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let b = v["delay_bound_s"].as_f64().unwrap();
    assert!((b / (std::f64::consts::PI / 14.0) - 1.0).abs() < 1e-6);

    let (code, out) = call(&["bound", "--preset", "ring", "-n", "7"]);
    assert_eq!(code, 0);
    assert!(out.contains("delay_bound_s 0.413156773190"), "{out}");

    let (code, out) = call(&["bound", "--preset", "line", "-n", "2", "--json"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["delay_bound_s"].as_f64().unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
}

#[test]
fn bound_from_weight_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("w.txt");
    std::fs::write(&f, "# two agents\n0 1\n1 0\n").unwrap();
    let (code, out) = call(&["bound", "--weights", s(&f), "--json"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["lambda_max"].as_f64().unwrap() - 2.0).abs() < 1e-12);

    std::fs::write(&f, "0 0\n0 0\n").unwrap();
    assert_eq!(call(&["bound", "--weights", s(&f)]).0, cli::EXIT_INVALID);
    std::fs::write(&f, "0 x\n1 0\n").unwrap();
    assert_eq!(call(&["bound", "--weights", s(&f)]).0, cli::EXIT_PARSE);
}

#[test]
fn every_bundled_scenario_validates_and_runs() {
    let files = bundled();
    assert!(files.len() >= 8);
    for f in files {
        let scn = Scenario::load(&f).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        let tr = dersim::sim::run(&scn).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        assert_eq!(tr.len(), (scn.duration_s / scn.sc_period_s + 1e-9).floor() as usize + 1);
    }
}

#[test]
fn run_writes_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenarios().join("latency_dropout.scn");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, stdout) = call(&["run", s(&scn), "--seed", "1", "--out", s(out)]);
        assert_eq!(code, 0);
        assert_eq!(stdout.trim(), s(&out.join(cli::MANIFEST_FILE)));
    }
    let read = |d: &Path| -> RunManifest {
        serde_json::from_str(&std::fs::read_to_string(d.join(cli::MANIFEST_FILE)).unwrap()).unwrap()
    };
    let (ma, mb) = (read(&a), read(&b));
    assert_eq!(ma.files, mb.files);
    assert_eq!(ma.seed, 1);
    for f in &ma.files {
        let bytes = std::fs::read(a.join(&f.file)).unwrap();
        assert_eq!(cli::sha256_hex(&bytes), f.sha256);
    }

    // a different seed changes the dropout pattern
    let c = dir.path().join("c");
    assert_eq!(call(&["run", s(&scn), "--seed", "2", "--out", s(&c)]).0, 0);
    assert_ne!(read(&c).files[0].sha256, ma.files[0].sha256);
}

#[test]
fn no_compensation_flag_turns_scheme_off() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenarios().join("latency_0p05.scn");
    let out = dir.path().join("off");
    assert_eq!(call(&["run", s(&scn), "--no-compensation", "--out", s(&out)]).0, 0);
    let tr = cli::load_trace(&out).unwrap();
    assert!(tr.agents.iter().all(|a| a.trig.iter().all(|&t| !t)));
    assert!(tr.agents.iter().all(|a| a.u_p == a.u_pf));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn");
    std::fs::write(&bad, "agents = 3\ngraph.preset = \"complete\"\ntime.dt_s = oops\n").unwrap();
    let (code, out) = call(&["run", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code, cli::EXIT_PARSE);
    assert!(out.is_empty(), "diagnostics leaked to stdout");

    let inv = dir.path().join("inv.scn");
    std::fs::write(&inv, "agents = 3\ngraph.preset = \"complete\"\ntime.dt_s = -1.0\n").unwrap();
    assert_eq!(call(&["run", s(&inv), "--out", s(&dir.path().join("x"))]).0, cli::EXIT_INVALID);

    let div = dir.path().join("div.scn");
    std::fs::write(&div, DIVERGING).unwrap();
    let out = dir.path().join("div");
    assert_eq!(call(&["run", s(&div), "--out", s(&out)]).0, cli::EXIT_DIVERGED);
    let tr = cli::load_trace(&out).unwrap();
    assert!(tr.len() > 1000, "partial trace kept");
    assert!(tr.events.iter().any(|e| matches!(e, dersim::trace::EventRecord::Diverged { .. })));

    assert_eq!(call(&["run", "/nonexistent.scn"]).0, cli::EXIT_RUNTIME);
    assert_eq!(call(&["frobnicate"]).0, cli::EXIT_PARSE);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    // only this test touches the variable
    std::env::set_var(cli::OUT_DIR_ENV, &target);
    let (code, _) = call(&["run", s(&scenarios().join("lyapunov_3agent.scn"))]);
    std::env::remove_var(cli::OUT_DIR_ENV);
    assert_eq!(code, 0);
    assert!(target.join(cli::TRACE_FILE).exists());
}

#[test]
fn single_value_sweep_matches_run_then_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenarios().join("latency_0p05.scn");
    let (code, csv) = call(&["sweep", s(&scn), "--axis", "D", "--values", "10"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], cli::SWEEP_HEADER);

    let out = dir.path().join("run");
    assert_eq!(call(&["run", s(&scn), "--out", s(&out)]).0, 0);
    let (code, json) = call(&["metrics", s(&out)]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let tr = cli::load_trace(&out).unwrap();
    let r = report(&tr, &ObjectiveBands::default(), None).unwrap();
    assert_eq!(lines[1], format!("D,10,{},{},{}", r.tc_o1_s, r.tc_o2_s, r.trigger_rate));
    assert_eq!(v["tc_o1_s"].as_f64().unwrap(), r.tc_o1_s.value().unwrap());
}

#[test]
fn tau_sweep_past_the_bound_gives_sentinels() {
    let scn = scenarios().join("bound_ring.scn");
    let (code, csv) = call(&["sweep", s(&scn), "--axis", "tau", "--values", "0.1,0.9"]);
    assert_eq!(code, 0);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows[0].contains("did not converge"), "{}", rows[0]);
    assert!(rows[1].contains("did not converge"), "{}", rows[1]);
    assert_eq!(call(&["sweep", s(&scn), "--axis", "tau", "--values"]).0, cli::EXIT_PARSE);
}

#[test]
fn plotdata_figures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let scn = scenarios().join("lyapunov_3agent.scn");
    assert_eq!(call(&["run", s(&scn), "--out", s(&out)]).0, 0);

    let (code, csv) = call(&["plotdata", "fig13", "--trace", s(&out)]);
    assert_eq!(code, 0);
    let mut series: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    series.dedup();
    assert_eq!(series, ["edvc", "edd", "epphi", "eqvc", "eqd", "eqphi"]);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0")));

    let (code, csv) = call(&["plotdata", "fig5", "--trace", s(&out)]);
    assert_eq!(code, 0);
    assert_eq!(csv.lines().count(), 1 + 3 * 3 * 5001);

    assert_eq!(call(&["plotdata", "fig99", "--trace", s(&out)]).0, cli::EXIT_INVALID);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, format!("{}\n", dersim::trace::Trace::header(3))).unwrap();
    assert_eq!(call(&["plotdata", "fig13", "--trace", s(&empty)]).0, cli::EXIT_INVALID);
}

#[test]
fn codec_round_trip_through_cli() {
    let (code, hex) = call(&["codec", "encode", "--sv-id", "DER03", "--omega", "314.15", "--mpp", "-1.25", "--nqq", "0.5"]);
    assert_eq!(code, 0);
    let (code, json) = call(&["codec", "decode", hex.trim()]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["sv_id"], "DER03");
    assert!((v["mpp"].as_f64().unwrap() + 1.25).abs() < 1e-12);

    let mut corrupt = hex.trim().to_string();
    let last = if corrupt.ends_with('0') { '1' } else { '0' };
    corrupt.pop();
    corrupt.push(last);
    assert_eq!(call(&["codec", "decode", &corrupt]).0, cli::EXIT_PARSE);
}
