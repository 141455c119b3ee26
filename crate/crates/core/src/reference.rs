//! Independent oracles: closed-form solutions of the target equations and
//! brute-force statistical estimators. Everything here is evaluated from
//! analytic formulas, never through the solver's discrete operators, so it
//! can sit on the other side of a comparison.

use crate::fields::{Field, GridSpec};
use crate::flow::BrownianEnsemble;
use crate::linalg::Vec3;
use serde::Serialize;

/// A named closed-form velocity field `u(t, x)` with its viscosity binding
/// `nu = eps^2 / 2`.
#[derive(Debug, Clone, Serialize)]
pub enum OracleSolution {
    /// Diffusing point vortex: Gaussian vorticity of width
    /// `sqrt(4 nu (t + t0))`, azimuthal speed
    /// `u_theta(r) = circulation / (2 pi r) (1 - exp(-r^2 / (4 nu (t + t0))))`.
    /// Exact for any `nu > 0`; decays like `1/r`.
    LambOseen { circulation: f64, core_age: f64, nu: f64 },
    /// Stationary radial vortex with zero net circulation:
    /// `u_theta(r) = (amplitude / 2) r exp(-r^2 / (2 width^2))`. The
    /// advection term is a pure radial gradient, so this solves the
    /// inviscid equation with `u(t) = u(0)`; decay is Gaussian.
    StationaryVortex { amplitude: f64, width: f64 },
    /// Two opposite-sign diffusing vortices at `+/- separation/2` on the
    /// x-axis: fully decaying (dipole tail `~ 1/r^2`). Not an exact
    /// solution of the nonlinear equation; used as decaying test data for
    /// norm and projection checks.
    VortexPair { circulation: f64, core_age: f64, nu: f64, separation: f64 },
}

impl OracleSolution {
    pub fn name(&self) -> &'static str {
        match self {
            OracleSolution::LambOseen { .. } => "lamb-oseen",
            OracleSolution::StationaryVortex { .. } => "stationary-vortex",
            OracleSolution::VortexPair { .. } => "vortex-pair",
        }
    }

    pub fn nu(&self) -> f64 {
        match self {
            OracleSolution::LambOseen { nu, .. } => *nu,
            OracleSolution::StationaryVortex { .. } => 0.0,
            OracleSolution::VortexPair { nu, .. } => *nu,
        }
    }

    /// Velocity at `(t, x)`; 2-d solutions ignore the third coordinate.
    pub fn velocity(&self, t: f64, x: &Vec3) -> Vec3 {
        match self {
            OracleSolution::LambOseen { circulation, core_age, nu } => {
                vortex_velocity(*circulation, 4.0 * nu * (t + core_age), x[0], x[1])
            }
            OracleSolution::StationaryVortex { amplitude, width } => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let f = 0.5 * amplitude * (-r2 / (2.0 * width * width)).exp();
                [-x[1] * f, x[0] * f, 0.0]
            }
            OracleSolution::VortexPair { circulation, core_age, nu, separation } => {
                let s2 = 4.0 * nu * (t + core_age);
                let a = vortex_velocity(*circulation, s2, x[0] - separation / 2.0, x[1]);
                let b = vortex_velocity(-circulation, s2, x[0] + separation / 2.0, x[1]);
                [a[0] + b[0], a[1] + b[1], 0.0]
            }
        }
    }

    /// Sample the exact velocity on a grid.
    pub fn as_field(&self, grid: GridSpec, t: f64) -> Field {
        Field::from_fn_vector(grid, |x| self.velocity(t, x))
    }

    /// Analytic vorticity (2-d scalar), where meaningful.
    pub fn vorticity(&self, t: f64, x: &Vec3) -> f64 {
        match self {
            OracleSolution::LambOseen { circulation, core_age, nu } => {
                let s2 = 4.0 * nu * (t + core_age);
                let r2 = x[0] * x[0] + x[1] * x[1];
                circulation / (std::f64::consts::PI * s2) * (-r2 / s2).exp()
            }
            OracleSolution::StationaryVortex { amplitude, width } => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                let w2 = width * width;
                amplitude * (1.0 - r2 / (2.0 * w2)) * (-r2 / (2.0 * w2)).exp()
            }
            OracleSolution::VortexPair { circulation, core_age, nu, separation } => {
                let s2 = 4.0 * nu * (t + core_age);
                let rp = (x[0] - separation / 2.0).powi(2) + x[1] * x[1];
                let rm = (x[0] + separation / 2.0).powi(2) + x[1] * x[1];
                circulation / (std::f64::consts::PI * s2) * ((-rp / s2).exp() - (-rm / s2).exp())
            }
        }
    }
}

/// Azimuthal vortex velocity in Cartesian components, with the `r -> 0`
/// limit handled through `expm1`.
fn vortex_velocity(circulation: f64, core_sq: f64, dx: f64, dy: f64) -> Vec3 {
    let r2 = dx * dx + dy * dy;
    // (1 - exp(-r^2/core_sq)) / r^2, finite at r = 0 where it tends to
    // 1 / core_sq.
    let factor = if r2 < 1e-300 {
        1.0 / core_sq
    } else {
        -(-r2 / core_sq).exp_m1() / r2
    };
    let scale = circulation / (2.0 * std::f64::consts::PI) * factor;
    [-dy * scale, dx * scale, 0.0]
}

/// Diffusing-vortex oracle with explicit parameters.
pub fn lamb_oseen(circulation: f64, core_age: f64, nu: f64) -> OracleSolution {
    assert!(nu > 0.0 && core_age > 0.0);
    OracleSolution::LambOseen { circulation, core_age, nu }
}

/// Stationary zero-circulation vortex (inviscid exact solution).
pub fn stationary_euler_vortex(amplitude: f64, width: f64) -> OracleSolution {
    assert!(width > 0.0);
    OracleSolution::StationaryVortex { amplitude, width }
}

/// Opposite-sign vortex pair; decaying test data, not an exact solution.
pub fn vortex_pair(circulation: f64, core_age: f64, nu: f64, separation: f64) -> OracleSolution {
    OracleSolution::VortexPair { circulation, core_age, nu, separation }
}

/// Mean, sample standard deviation, and 95% confidence interval of a scalar
/// functional of Brownian paths.
#[derive(Debug, Clone, Serialize)]
pub struct Expectation {
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples: usize,
}

/// Brute-force Monte-Carlo estimate over the ensemble's paths. The
/// functional sees the mesh values of one path.
pub fn brute_expectation(
    ensemble: &BrownianEnsemble,
    functional: impl Fn(&dyn Fn(usize) -> Vec3) -> f64,
) -> Expectation {
    let m = ensemble.samples();
    assert!(m >= 16, "need at least 16 samples");
    let values: Vec<f64> = (0..m)
        .map(|s| functional(&|k| ensemble.path_at(s, k)))
        .collect();
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    let std = var.sqrt();
    let half = 1.96 * std / (m as f64).sqrt();
    Expectation { mean, std, ci_low: mean - half, ci_high: mean + half, samples: m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::TimeMesh;
    use crate::linalg::ZERO_VEC;

    #[test]
    fn vortex_small_radius_limit() {
        // u_theta ~ circulation r / (2 pi core_sq) as r -> 0.
        let o = lamb_oseen(1.0, 25.0, 0.01);
        let core_sq = 4.0 * 0.01 * 25.0;
        let r = 1e-6;
        let v = o.velocity(0.0, &[r, 0.0, 0.0]);
        let want = 1.0 * r / (2.0 * std::f64::consts::PI * core_sq);
        assert!((v[1] - want).abs() <= 1e-9 * want.abs());
        assert!(v[0].abs() < 1e-18);
        let at_zero = o.velocity(0.0, &ZERO_VEC);
        assert_eq!(at_zero, ZERO_VEC);
    }

    #[test]
    fn vortex_core_self_similarity() {
        // Doubling nu (t + t0) scales the core radius by sqrt(2): the peak
        // azimuthal speed location moves by exactly that factor.
        let o1 = lamb_oseen(1.0, 25.0, 0.01);
        let o2 = lamb_oseen(1.0, 50.0, 0.01);
        let peak_radius = |o: &OracleSolution| -> f64 {
            let mut best = (0.0, 0.0);
            for i in 1..4000 {
                let r = i as f64 * 0.002;
                let v = o.velocity(0.0, &[r, 0.0, 0.0]);
                if v[1] > best.1 {
                    best = (r, v[1]);
                }
            }
            best.0
        };
        let r1 = peak_radius(&o1);
        let r2 = peak_radius(&o2);
        assert!((r2 / r1 - 2.0f64.sqrt()).abs() < 0.01, "{r1} vs {r2}");
    }

    #[test]
    fn stationary_vortex_is_divergence_free() {
        let grid = GridSpec::new(2, 6.0, 64).unwrap();
        let o = stationary_euler_vortex(0.5, 1.0);
        let u = o.as_field(grid, 0.0);
        let div = u.divergence().unwrap();
        let jac = u.jacobian().unwrap();
        let h = grid.h();
        assert!(div.max_abs() <= 5.0 * h * h * jac.max_abs());
        // Stationarity by construction.
        let later = o.as_field(grid, 3.0);
        assert_eq!(u, later);
    }

    #[test]
    fn vortex_pair_decays_fast() {
        let o = vortex_pair(1.0, 25.0, 0.01, 2.0);
        let near = o.velocity(0.0, &[0.0, 1.0, 0.0]);
        let far = o.velocity(0.0, &[0.0, 20.0, 0.0]);
        let near_mag = (near[0] * near[0] + near[1] * near[1]).sqrt();
        let far_mag = (far[0] * far[0] + far[1] * far[1]).sqrt();
        // Dipole tail ~ 1/r^2 rather than the single vortex 1/r.
        assert!(far_mag < near_mag / 200.0, "near {near_mag}, far {far_mag}");
    }

    #[test]
    fn brute_expectation_deterministic_functional() {
        let ens = BrownianEnsemble::generate(2, 32, TimeMesh { t_end: 1.0, steps: 8 }, 1.0, 5);
        let e = brute_expectation(&ens, |_| 2.5);
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.std, 0.0);
    }

    #[test]
    fn brute_expectation_squared_norm_moment() {
        // E |B_T|^2 = d T.
        let t = 0.8;
        let ens =
            BrownianEnsemble::generate(2, 512, TimeMesh { t_end: t, steps: 8 }, 1.0, 271);
        let e = brute_expectation(&ens, |path| {
            let b = path(8);
            b[0] * b[0] + b[1] * b[1]
        });
        let want = 2.0 * t;
        assert!(e.ci_low <= want && want <= e.ci_high, "{e:?}");
    }

    #[test]
    fn brute_expectation_ci_calibration() {
        // Over 50 seeded trials the 95% CI for one component of B_T should
        // cover 0 at least 90% of the time.
        let mut covered = 0;
        for trial in 0..50u64 {
            let ens = BrownianEnsemble::generate(
                2,
                64,
                TimeMesh { t_end: 1.0, steps: 4 },
                1.0,
                1000 + trial,
            );
            let e = brute_expectation(&ens, |path| path(4)[0]);
            if e.ci_low <= 0.0 && 0.0 <= e.ci_high {
                covered += 1;
            }
        }
        assert!(covered >= 45, "covered {covered}/50");
    }
}
