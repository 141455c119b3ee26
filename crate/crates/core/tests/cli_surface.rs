//! End-to-end checks of the operator surface: configs, run records,
//! probing, and the forced scenario path.

use lagflow::cli::{self, load_record};
use lagflow::config::{config_hash, RunConfig};
use std::path::Path;

const FORCED: &str = r#"
# forced small run
[space]
d = 2
p = 4.0
l = 4
theta = 1.6

[grid]
n = 24
half_width = 6.0

[ensemble]
samples = 3
epsilon = 0.1
master_seed = 21

[solver]
t_max = 0.2
dt = 0.05
horizon = "fixed"
max_picard = 5
tol_picard = 5e-2

[scenario]
initial = "stationary-vortex"
amplitude = 0.3
width = 1.2
forcing = "time-modulated"
forcing_amplitude = 0.2
forcing_width = 1.5
forcing_omega = 3.0
probes = [[1.0, 0.0], [0.0, -1.5]]
"#;

fn write(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn forced_run_produces_consistent_record_and_probes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), FORCED);
    let (record, run_dir) = cli::run(&cfg, dir.path(), Some(1)).unwrap();
    assert_eq!(record.verdict, "pass");
    assert_eq!(record.config_hash, config_hash(FORCED));
    assert!(!record.times.is_empty());
    assert!(record.trace.converged);
    // Record invariants hold on reload.
    let loaded = load_record(&run_dir).unwrap();
    assert_eq!(loaded.artifacts, record.artifacts);
    for rel in &loaded.artifacts {
        assert!(run_dir.join(rel).exists(), "{rel} missing");
    }
    // A probe at a stored time and grid node reproduces the dump value.
    let u0 = lagflow::fields::Field::read_binary(&run_dir.join("u/u_0000.fld")).unwrap();
    let grid = u0.grid;
    let node = grid.point(grid.point_count() / 2 + 3);
    let csv = cli::probe(&run_dir, &[vec![node[0], node[1]]], &[0.0]).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let got: f64 = row[3].parse().unwrap();
    assert_eq!(got, u0.vector_at(grid.point_count() / 2 + 3)[0]);
}

#[test]
fn record_detects_config_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), FORCED);
    let (_, run_dir) = cli::run(&cfg, dir.path(), Some(1)).unwrap();
    // Tamper with the stored config bytes: the hash invariant must trip.
    let stored = run_dir.join("config.toml");
    let mut text = std::fs::read_to_string(&stored).unwrap();
    text.push('\n');
    std::fs::write(&stored, text).unwrap();
    assert!(load_record(&run_dir).is_err());
}

#[test]
fn oversized_amplitude_run_writes_partial_record_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let big = FORCED.replace("amplitude = 0.3", "amplitude = 15.0").replace(
        "t_max = 0.2",
        "t_max = 2.0",
    );
    let cfg = write(dir.path(), &big);
    let err = cli::run(&cfg, dir.path(), Some(1)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    // The partial record names the guard condition.
    let hash = config_hash(&big);
    let run_dir = dir.path().join(format!("run-{}-21", &hash[..8]));
    let text = std::fs::read_to_string(run_dir.join("record.json")).unwrap();
    assert!(text.contains("guard condition"), "{text}");
}

#[test]
fn config_round_trips_through_validation() {
    let cfg = RunConfig::from_str(FORCED).unwrap();
    assert_eq!(cfg.scenario.probes.len(), 2);
    let forcing = cfg.forcing().unwrap();
    assert!(!forcing.is_zero());
    let sc = cfg.solver_config();
    assert_eq!(sc.samples, 3);
    assert_eq!(sc.master_seed, 21);
}
