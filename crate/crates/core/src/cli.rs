//! Operator surface: reproducible seeded runs with persisted artifacts,
//! run records that pin the config bytes by hash, and probing of stored
//! velocity series.

use crate::config::{config_hash, ConfigError, RunConfig};
use crate::fields::Field;
use crate::solver::{self, GuardSummary, IterationTrace, SolverError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run failed: {0}")]
    Run(#[from] SolverError),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("record mismatch: {0}")]
    RecordMismatch(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    /// Process exit code: 2 config-invalid, 3 run-failed, 4 verify-failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Reproducibility unit written next to the artifacts of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub master_seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub horizon: f64,
    pub times: Vec<f64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub guard_summary: GuardSummary,
    pub trace: IterationTrace,
    /// "pass" or the error text of a failed run.
    pub verdict: String,
    pub version: String,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Build a scoped thread pool; runs must not change results with the
/// worker count, which the acceptance suite checks directly.
pub fn install_pool<T>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    match workers {
        None | Some(0) => f(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .expect("thread pool")
            .install(f),
    }
}

/// Execute a config: run the solver, persist the velocity series, traces
/// and monitors under `out_root/run-<hash8>-<seed>`, and return the record.
/// A solver failure still writes a partial record before surfacing.
pub fn run(config_path: &Path, out_root: &Path, workers: Option<usize>) -> Result<(RunRecord, PathBuf), CliError> {
    let (config, raw) = RunConfig::from_path(config_path)?;
    let hash = config_hash(&raw);
    let run_dir = out_root.join(format!("run-{}-{}", &hash[..8], config.ensemble.master_seed));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.toml"), &raw)?;

    let started_at = now_rfc3339();
    let solver_config = config.solver_config();
    let u0 = config.initial_data();
    let forcing = config.forcing()?;
    let effective_workers = workers.or(config.solver.workers);
    let result = install_pool(effective_workers, || solver::solve(&solver_config, &u0, &forcing));

    let output = match result {
        Ok(output) => output,
        Err(err) => {
            let record = RunRecord {
                config_hash: hash,
                master_seed: config.ensemble.master_seed,
                started_at,
                finished_at: now_rfc3339(),
                horizon: 0.0,
                times: Vec::new(),
                artifacts: vec!["config.toml".into()],
                guard_summary: GuardSummary::default(),
                trace: IterationTrace {
                    records: Vec::new(),
                    converged: false,
                    l_eff: solver_config.l_eff(),
                    tol: solver_config.tol_picard,
                },
                verdict: format!("error: {err}"),
                version: env!("CARGO_PKG_VERSION").into(),
            };
            write_json(&run_dir.join("record.json"), &record)?;
            return Err(err.into());
        }
    };

    let mut artifacts: Vec<String> = vec!["config.toml".into()];
    std::fs::create_dir_all(run_dir.join("u"))?;
    std::fs::create_dir_all(run_dir.join("u_std"))?;
    for (k, (u, std)) in output.u_series.iter().zip(output.u_std_series.iter()).enumerate() {
        let u_rel = format!("u/u_{k:04}.fld");
        let s_rel = format!("u_std/u_std_{k:04}.fld");
        u.write_binary(&run_dir.join(&u_rel))
            .map_err(|e| CliError::Io(e.to_string()))?;
        std.write_binary(&run_dir.join(&s_rel))
            .map_err(|e| CliError::Io(e.to_string()))?;
        artifacts.push(u_rel);
        artifacts.push(s_rel);
    }
    // CSV probe of the final-time velocity on the grid, for external plots.
    let final_u_rel = "u_final.csv".to_string();
    output
        .u_series
        .last()
        .expect("nonempty series")
        .write_csv(&run_dir.join(&final_u_rel))
        .map_err(|e| CliError::Io(e.to_string()))?;
    artifacts.push(final_u_rel);

    write_json(&run_dir.join("trace.json"), &output.trace)?;
    artifacts.push("trace.json".into());
    #[derive(Serialize)]
    struct Monitor<'a> {
        growth: &'a [crate::flow::GrowthReport],
        residuals: &'a [solver::ResidualRecord],
        horizon_slopes: &'a Option<solver::HorizonReport>,
    }
    write_json(
        &run_dir.join("monitor.json"),
        &Monitor {
            growth: &output.growth,
            residuals: &output.residuals,
            horizon_slopes: &output.horizon_slopes,
        },
    )?;
    artifacts.push("monitor.json".into());

    if !config.scenario.probes.is_empty() {
        let csv = probe_series(&output.u_series, &output.u_std_series, &output.times, &config.scenario.probes);
        std::fs::write(run_dir.join("probes.csv"), csv)?;
        artifacts.push("probes.csv".into());
    }

    // Every artifact must exist before the record is written.
    for rel in &artifacts {
        if !run_dir.join(rel).exists() {
            return Err(CliError::MissingArtifact(rel.clone()));
        }
    }
    let record = RunRecord {
        config_hash: hash,
        master_seed: config.ensemble.master_seed,
        started_at,
        finished_at: now_rfc3339(),
        horizon: output.horizon,
        times: output.times.clone(),
        artifacts,
        guard_summary: output.guard_summary.clone(),
        trace: output.trace.clone(),
        verdict: "pass".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&run_dir.join("record.json"), &record)?;
    Ok((record, run_dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load a record and verify its config-hash invariant against the stored
/// config bytes.
pub fn load_record(run_dir: &Path) -> Result<RunRecord, CliError> {
    let text = std::fs::read_to_string(run_dir.join("record.json"))?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| CliError::RecordMismatch(e.to_string()))?;
    let raw = std::fs::read_to_string(run_dir.join("config.toml"))?;
    if config_hash(&raw) != record.config_hash {
        return Err(CliError::RecordMismatch(
            "stored config bytes do not match the recorded hash".into(),
        ));
    }
    for rel in &record.artifacts {
        if !run_dir.join(rel).exists() {
            return Err(CliError::MissingArtifact(rel.clone()));
        }
    }
    Ok(record)
}

/// Interpolated velocity values at probe points and times, with the
/// ensemble std when available. Out-of-box points are clamped and noted.
pub fn probe(run_dir: &Path, points: &[Vec<f64>], times: &[f64]) -> Result<String, CliError> {
    let record = load_record(run_dir)?;
    if record.times.is_empty() {
        return Err(CliError::MissingArtifact("velocity series (failed run?)".into()));
    }
    let mut u_series = Vec::new();
    let mut std_series = Vec::new();
    for k in 0..record.times.len() {
        let u_path = run_dir.join(format!("u/u_{k:04}.fld"));
        u_series.push(Field::read_binary(&u_path).map_err(|e| CliError::Io(e.to_string()))?);
        let s_path = run_dir.join(format!("u_std/u_std_{k:04}.fld"));
        if s_path.exists() {
            std_series.push(Some(
                Field::read_binary(&s_path).map_err(|e| CliError::Io(e.to_string()))?,
            ));
        } else {
            std_series.push(None);
        }
    }
    Ok(probe_loaded(&u_series, &std_series, &record.times, points, times))
}

fn probe_loaded(
    u_series: &[Field],
    std_series: &[Option<Field>],
    mesh_times: &[f64],
    points: &[Vec<f64>],
    times: &[f64],
) -> String {
    let grid = u_series[0].grid;
    let d = grid.d;
    let mut out = String::new();
    let coords: Vec<String> = (1..=d).map(|a| format!("x_{a}")).collect();
    let vals: Vec<String> = (1..=d).map(|c| format!("u_{c}")).collect();
    let stds: Vec<String> = (1..=d).map(|c| format!("std_{c}")).collect();
    out.push_str(&format!(
        "time,{},{},{},note\n",
        coords.join(","),
        vals.join(","),
        stds.join(",")
    ));
    let t_end = *mesh_times.last().unwrap();
    for &t in times {
        // Linear interpolation in time between stored snapshots; clamped
        // outside the stored range.
        let tc = t.clamp(0.0, t_end);
        let mut k1 = mesh_times.iter().position(|mt| *mt >= tc).unwrap_or(mesh_times.len() - 1);
        if k1 == 0 {
            k1 = 1.min(mesh_times.len() - 1);
        }
        let k0 = k1.saturating_sub(1);
        let span = (mesh_times[k1] - mesh_times[k0]).max(1e-300);
        let w1 = ((tc - mesh_times[k0]) / span).clamp(0.0, 1.0);
        for p in points {
            let mut x = [0.0f64; 3];
            for (a, v) in p.iter().take(d).enumerate() {
                x[a] = *v;
            }
            let inside = (0..d).all(|a| x[a].abs() <= grid.half_width);
            let u0 = u_series[k0].sample_vector(&x);
            let u1 = u_series[k1].sample_vector(&x);
            let mut row = vec![format!("{t:.12e}")];
            for a in 0..d {
                row.push(format!("{:.12e}", x[a]));
            }
            for c in 0..d {
                row.push(format!("{:.17e}", (1.0 - w1) * u0[c] + w1 * u1[c]));
            }
            match (&std_series[k0], &std_series[k1]) {
                (Some(s0), Some(s1)) => {
                    let a0 = s0.sample_vector(&x);
                    let a1 = s1.sample_vector(&x);
                    for c in 0..d {
                        row.push(format!("{:.17e}", (1.0 - w1) * a0[c] + w1 * a1[c]));
                    }
                }
                _ => {
                    for _ in 0..d {
                        row.push(String::new());
                    }
                }
            }
            let mut notes = Vec::new();
            if !inside {
                notes.push("clamped-to-box");
            }
            if t != tc {
                notes.push("clamped-to-time-range");
            }
            row.push(notes.join(";"));
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    out
}

/// Probe CSV straight from an in-memory series (used at run time).
pub fn probe_series(
    u_series: &[Field],
    std_series: &[Field],
    mesh_times: &[f64],
    points: &[Vec<f64>],
) -> String {
    let stds: Vec<Option<Field>> = std_series.iter().map(|f| Some(f.clone())).collect();
    probe_loaded(u_series, &stds, mesh_times, points, mesh_times)
}

/// Parse a probe-points CSV: one `x_1,..,x_d` row per line, `#` comments.
pub fn parse_points(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        // Skip an optional header row.
        if line.chars().next().is_some_and(|c| c.is_alphabetic()) {
            continue;
        }
        let coords: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse()).collect();
        match coords {
            Ok(c) => out.push(c),
            Err(e) => {
                return Err(CliError::Io(format!("points line {}: {e}", lineno + 1)));
            }
        }
    }
    Ok(out)
}
