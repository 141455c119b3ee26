//! Run configuration: a flat, commented key-value file with typed sections
//! (`[space]`, `[grid]`, `[ensemble]`, `[solver]`, `[scenario]`). No
//! programmable constructs; the raw bytes are hashed into the run identity.

use crate::fields::{Field, GridSpec, SpaceParams};
use crate::lagrangian::{Forcing, ForcingSpec, TimeModulation};
use crate::potential::ProjectionMethod;
use crate::reference::{lamb_oseen, stationary_euler_vortex, vortex_pair, OracleSolution};
use crate::solver::{GuardThresholds, HorizonMode, SolverConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(String),
    #[error("config field `{field}` invalid: {reason}")]
    Invalid { field: String, reason: String },
    #[error("config i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub d: usize,
    pub p: f64,
    pub l: usize,
    pub theta: f64,
    #[serde(default)]
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    pub half_width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub samples: usize,
    pub epsilon: f64,
    pub master_seed: u64,
}

fn default_safety() -> f64 {
    0.5
}

fn default_max_picard() -> usize {
    8
}

fn default_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub t_max: f64,
    pub dt: f64,
    /// "auto" measures the horizon; "fixed" uses t_max.
    pub horizon: String,
    #[serde(default = "default_max_picard")]
    pub max_picard: usize,
    #[serde(default = "default_tol")]
    pub tol_picard: f64,
    #[serde(default = "default_safety")]
    pub safety: f64,
    /// "spectral" or "quadrature" convolution route for the drift.
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// zero | lamb-oseen | stationary-vortex | vortex-pair
    pub initial: String,
    #[serde(default)]
    pub circulation: Option<f64>,
    #[serde(default)]
    pub core_age: Option<f64>,
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default)]
    pub separation: Option<f64>,
    /// zero | solenoidal-gaussian | time-modulated | series:<dir>
    #[serde(default)]
    pub forcing: Option<String>,
    #[serde(default)]
    pub forcing_amplitude: Option<f64>,
    #[serde(default)]
    pub forcing_width: Option<f64>,
    #[serde(default)]
    pub forcing_omega: Option<f64>,
    /// Probe points for the CSV emission (flattened x, y [, z] triplets).
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: SpaceSection,
    pub grid: GridSection,
    pub ensemble: EnsembleSection,
    pub solver: SolverSection,
    pub scenario: ScenarioSection,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<(RunConfig, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        let cfg = RunConfig::from_str(&text)?;
        Ok((cfg, text))
    }

    /// Field-by-field validation naming the violated constraint.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, reason: String| ConfigError::Invalid {
            field: field.into(),
            reason,
        };
        SpaceParams::new(
            self.space.d,
            self.space.p,
            self.space.l,
            self.space.theta,
            self.space.delta,
            self.ensemble.epsilon,
        )
        .map_err(|e| invalid("space", e.to_string()))?;
        GridSpec::new(self.space.d, self.grid.half_width, self.grid.n)
            .map_err(|e| invalid("grid", e.to_string()))?;
        if self.ensemble.samples == 0 {
            return Err(invalid("ensemble.samples", "must be >= 1".into()));
        }
        if !(self.solver.t_max > 0.0) {
            return Err(invalid("solver.t_max", "must be positive".into()));
        }
        if !(self.solver.dt > 0.0) {
            return Err(invalid("solver.dt", "must be positive".into()));
        }
        if !(self.solver.tol_picard > 0.0) {
            return Err(invalid("solver.tol_picard", "must be positive".into()));
        }
        match self.solver.horizon.as_str() {
            "auto" | "fixed" => {}
            other => {
                return Err(invalid(
                    "solver.horizon",
                    format!("must be \"auto\" or \"fixed\", got {other:?}"),
                ))
            }
        }
        if let Some(m) = &self.solver.method {
            if m != "spectral" && m != "quadrature" {
                return Err(invalid(
                    "solver.method",
                    format!("must be \"spectral\" or \"quadrature\", got {m:?}"),
                ));
            }
        }
        match self.scenario.initial.as_str() {
            "zero" | "lamb-oseen" | "stationary-vortex" | "vortex-pair" => {}
            other => {
                return Err(invalid("scenario.initial", format!("unknown scenario {other:?}")))
            }
        }
        if let Some(f) = &self.scenario.forcing {
            let known = f == "zero"
                || f == "solenoidal-gaussian"
                || f == "time-modulated"
                || f.starts_with("series:");
            if !known {
                return Err(invalid("scenario.forcing", format!("unknown forcing {other:?}", other = f)));
            }
        }
        for (i, p) in self.scenario.probes.iter().enumerate() {
            if p.len() != self.space.d {
                return Err(invalid(
                    "scenario.probes",
                    format!("probe {i} has {} coordinates, expected {}", p.len(), self.space.d),
                ));
            }
        }
        Ok(())
    }

    pub fn space_params(&self) -> SpaceParams {
        SpaceParams::new(
            self.space.d,
            self.space.p,
            self.space.l,
            self.space.theta,
            self.space.delta,
            self.ensemble.epsilon,
        )
        .expect("validated")
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.space.d, self.grid.half_width, self.grid.n).expect("validated")
    }

    pub fn solver_config(&self) -> SolverConfig {
        let space = self.space_params();
        let grid = self.grid_spec();
        SolverConfig {
            space,
            grid,
            samples: self.ensemble.samples,
            t_max: self.solver.t_max,
            dt: self.solver.dt,
            horizon: if self.solver.horizon == "auto" {
                HorizonMode::Auto
            } else {
                HorizonMode::Fixed
            },
            max_picard: self.solver.max_picard,
            tol_picard: self.solver.tol_picard,
            guards: GuardThresholds::standard(grid.d),
            master_seed: self.ensemble.master_seed,
            method: match self.solver.method.as_deref() {
                Some("quadrature") => ProjectionMethod::Quadrature,
                _ => ProjectionMethod::Spectral,
            },
            safety: self.solver.safety,
        }
    }

    /// The closed-form oracle behind the scenario name, when there is one.
    pub fn oracle(&self) -> Option<OracleSolution> {
        let nu = self.ensemble.epsilon * self.ensemble.epsilon / 2.0;
        match self.scenario.initial.as_str() {
            "lamb-oseen" => Some(lamb_oseen(
                self.scenario.circulation.unwrap_or(2.0),
                self.scenario.core_age.unwrap_or(25.0),
                nu.max(1e-12),
            )),
            "stationary-vortex" => Some(stationary_euler_vortex(
                self.scenario.amplitude.unwrap_or(0.5),
                self.scenario.width.unwrap_or(1.0),
            )),
            "vortex-pair" => Some(vortex_pair(
                self.scenario.circulation.unwrap_or(1.0),
                self.scenario.core_age.unwrap_or(25.0),
                nu.max(1e-12),
                self.scenario.separation.unwrap_or(2.0),
            )),
            _ => None,
        }
    }

    pub fn initial_data(&self) -> Field {
        let grid = self.grid_spec();
        match self.oracle() {
            Some(oracle) => oracle.as_field(grid, 0.0),
            None => Field::zeros(grid, crate::fields::Rank::Vector),
        }
    }

    pub fn forcing(&self) -> Result<ForcingSpec, ConfigError> {
        let kind = self.scenario.forcing.as_deref().unwrap_or("zero");
        let forcing = match kind {
            "zero" => Forcing::Zero,
            "solenoidal-gaussian" => Forcing::SolenoidalGaussian {
                amplitude: self.scenario.forcing_amplitude.unwrap_or(0.5),
                width: self.scenario.forcing_width.unwrap_or(1.5),
                center: [0.0; 3],
                modulation: TimeModulation::Constant,
            },
            "time-modulated" => Forcing::SolenoidalGaussian {
                amplitude: self.scenario.forcing_amplitude.unwrap_or(0.5),
                width: self.scenario.forcing_width.unwrap_or(1.5),
                center: [0.0; 3],
                modulation: TimeModulation::Cosine {
                    omega: self.scenario.forcing_omega.unwrap_or(3.0),
                },
            },
            other => {
                let dir = other.strip_prefix("series:").expect("validated");
                let config = self.solver_config();
                let mesh = config.mesh_for(self.solver.t_max, self.initial_data().max_abs());
                return ForcingSpec::from_series_dir(dir.into(), mesh, 0.05).map_err(|e| {
                    ConfigError::Invalid { field: "scenario.forcing".into(), reason: e.to_string() }
                });
            }
        };
        Ok(ForcingSpec { forcing, div_tolerance: 0.05 })
    }
}

/// Hex SHA-256 of the raw config bytes.
pub fn config_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
# target space and exponents
[space]
d = 2
p = 4.0
l = 4
theta = 1.6

[grid]
n = 32
half_width = 6.0

[ensemble]
samples = 4
epsilon = 0.1
master_seed = 7

[solver]
t_max = 0.4
dt = 0.1
horizon = "auto"

[scenario]
initial = "lamb-oseen"
circulation = 2.0
core_age = 25.0
"#;

    #[test]
    fn good_config_parses() {
        let cfg = RunConfig::from_str(GOOD).unwrap();
        assert_eq!(cfg.grid_spec().n, 32);
        assert!((cfg.space_params().sigma() - 1.1).abs() < 1e-12);
        assert!(cfg.oracle().is_some());
    }

    #[test]
    fn rejects_p_not_above_d() {
        let bad = GOOD.replace("p = 4.0", "p = 2.0");
        let err = RunConfig::from_str(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("p > d"), "{msg}");
    }

    #[test]
    fn rejects_low_l_and_bad_theta() {
        let bad = GOOD.replace("l = 4", "l = 3");
        assert!(RunConfig::from_str(&bad).unwrap_err().to_string().contains("l >= 4"));
        let bad = GOOD.replace("theta = 1.6", "theta = 1.2");
        assert!(RunConfig::from_str(&bad)
            .unwrap_err()
            .to_string()
            .contains("theta >= 1 + d/p"));
        let bad = GOOD.replace("theta = 1.6", "theta = 2.5");
        assert!(RunConfig::from_str(&bad).unwrap_err().to_string().contains("theta < d"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_modes() {
        let bad = format!("{GOOD}\n[extra]\nx = 1\n");
        assert!(RunConfig::from_str(&bad).is_err());
        let bad = GOOD.replace("\"auto\"", "\"sometimes\"");
        assert!(RunConfig::from_str(&bad).unwrap_err().to_string().contains("horizon"));
    }

    #[test]
    fn hash_is_stable_and_byte_sensitive() {
        let a = config_hash(GOOD);
        let b = config_hash(GOOD);
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let c = config_hash(&format!("{GOOD} "));
        assert_ne!(a, c);
    }
}
