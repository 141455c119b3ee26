//! Picard iteration on the flow representation: freeze the kernel drift
//! built from the previous iterate, integrate a fresh ensemble of flows
//! against it, and repeat until the displacement sequence is Cauchy in a
//! weighted Sobolev norm. The contraction horizon is either fixed or
//! measured from a one-iteration dry run.
//!
//! Each accepted iterate must satisfy, at every mesh time:
//!   (i)  |zeta(t, 0)| <= 1/2 and |grad zeta(t)|_inf <= 1/(2d),
//!   (ii) |zeta(t)| <= 1 in the displacement norm and the inverse-Jacobian
//!        derivative sum <= 1.
//! A violation aborts the run with an error naming the condition: it means
//! the horizon was too long for the data.

use crate::fields::{Field, FieldError, GridSpec, Rank, SpaceParams};
use crate::flow::{
    growth_monitor, BrownianEnsemble, FlowError, FlowState, GrowthReport, TimeMesh,
};
use crate::lagrangian::{
    ensemble_std, expect_over_ensemble, kernel_drift, recover_velocity, ForcingSpec,
    LagrangianError, MomentumFields,
};
use crate::potential::{PotentialOperator, ProjectionMethod};
use crate::sobolev::{multi_indices, sobolev_norm, weighted_lp_norm, weighted_sup_norm, NormSpec};
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

/// Which proof-side smallness condition a guard belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GuardCondition {
    /// Condition (i): displacement at the origin.
    OriginDisplacement,
    /// Condition (i): gradient sup bound 1/(2d).
    GradientSup,
    /// Condition (ii): weighted displacement norm.
    DisplacementNorm,
    /// Condition (ii): inverse-Jacobian derivative sum.
    InverseJacobianSum,
}

impl std::fmt::Display for GuardCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuardCondition::OriginDisplacement => write!(f, "(i) origin displacement"),
            GuardCondition::GradientSup => write!(f, "(i) gradient sup"),
            GuardCondition::DisplacementNorm => write!(f, "(ii) displacement norm"),
            GuardCondition::InverseJacobianSum => write!(f, "(ii) inverse-Jacobian sum"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(
        "guard condition {condition} violated at t = {time:.6} (iteration {iteration}): value {value:.6} > threshold {threshold:.6}; the horizon is too long for this data"
    )]
    GuardViolation {
        condition: GuardCondition,
        time: f64,
        iteration: usize,
        value: f64,
        threshold: f64,
    },
    #[error("no Cauchy convergence after {iterations} iterations: last difference {last_diff:.3e} > tol {tol:.3e}")]
    NoConvergence { iterations: usize, last_diff: f64, tol: f64 },
    #[error("initial data: {0}")]
    InvalidInitialData(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Thresholds of the per-iterate smallness conditions.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GuardThresholds {
    pub origin_displacement: f64,
    pub gradient_sup: f64,
    pub displacement_norm: f64,
    pub inverse_jacobian_sum: f64,
}

impl GuardThresholds {
    pub fn standard(d: usize) -> GuardThresholds {
        GuardThresholds {
            origin_displacement: 0.5,
            gradient_sup: 1.0 / (2.0 * d as f64),
            displacement_norm: 1.0,
            inverse_jacobian_sum: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HorizonMode {
    /// Integrate over `[0, t_max]` as configured.
    Fixed,
    /// Measure guard slopes on a dry run and shrink the horizon.
    Auto,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    pub space: SpaceParams,
    pub grid: GridSpec,
    pub samples: usize,
    /// Horizon (Fixed) or horizon cap (Auto).
    pub t_max: f64,
    /// Target time step; the effective step also honors the CFL-like
    /// guard `|drift|_inf dt <= h/4` and a minimum step count.
    pub dt: f64,
    pub horizon: HorizonMode,
    pub max_picard: usize,
    pub tol_picard: f64,
    pub guards: GuardThresholds,
    pub master_seed: u64,
    pub method: ProjectionMethod,
    /// Safety factor applied to the measured horizon.
    pub safety: f64,
}

impl SolverConfig {
    pub fn new(space: SpaceParams, grid: GridSpec, samples: usize) -> SolverConfig {
        SolverConfig {
            space,
            grid,
            samples,
            t_max: 1.0,
            dt: 0.1,
            horizon: HorizonMode::Auto,
            max_picard: 8,
            tol_picard: 1e-4,
            guards: GuardThresholds::standard(grid.d),
            master_seed: 0,
            method: ProjectionMethod::Spectral,
            safety: 0.5,
        }
    }

    /// Norm order actually gated on: high-order finite differences at desk
    /// resolutions are noise-dominated, so the Cauchy and guard norms use
    /// `min(l, 2)` derivatives; the full-l norm is reported, not gated.
    pub fn l_eff(&self) -> usize {
        self.space.l.min(2)
    }

    /// Effective mesh over `[0, t]` honoring the CFL-like guard for a
    /// drift of the given magnitude.
    pub fn mesh_for(&self, t: f64, drift_scale: f64) -> TimeMesh {
        let h = self.grid.h();
        let mut dt = self.dt;
        if drift_scale > 0.0 {
            dt = dt.min(h / (4.0 * drift_scale));
        }
        dt = dt.min(t / 4.0);
        TimeMesh::new(t, dt)
    }
}

/// Per-iteration convergence record.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Sup over mesh times, max over samples, of the displacement-norm
    /// difference at order `l_eff`.
    pub cauchy_diff: f64,
    /// The same difference in the full-l norm at the final mesh time
    /// (reported, not gated).
    pub cauchy_diff_full_l: f64,
    pub guard_origin: f64,
    pub guard_gradient: f64,
    pub guard_norm: f64,
    pub guard_kappa_sum: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub l_eff: usize,
    pub tol: f64,
}

/// Extremes of the inline flow checks over a whole run.
#[derive(Debug, Clone, Default, Serialize, serde::Deserialize)]
pub struct GuardSummary {
    /// Max over samples/times/grid of |kappa(eta(x)) - x|.
    pub roundtrip_max: f64,
    /// Max pointwise Frobenius gap |grad kappa - I|.
    pub kappa_identity_gap_max: f64,
    /// Max of w(eta(x)) / (w(x) lambda_t).
    pub weight_ratio_per_lambda_max: f64,
    pub boundary_exits: usize,
    /// Max over mesh times of sup |div u(t)|.
    pub div_sup_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualRecord {
    pub time: f64,
    /// Weighted L_p norm (exponent sigma - 1) over the interior.
    pub weighted_lp: f64,
    /// Sup norm over the interior.
    pub sup: f64,
}

/// Full solve output: velocity series plus diagnostics.
#[derive(Debug)]
pub struct SolveOutput {
    pub times: Vec<f64>,
    pub u_series: Vec<Field>,
    pub u_std_series: Vec<Field>,
    pub trace: IterationTrace,
    pub horizon: f64,
    pub horizon_slopes: Option<HorizonReport>,
    pub guard_summary: GuardSummary,
    pub growth: Vec<GrowthReport>,
    pub residuals: Vec<ResidualRecord>,
}

/// Measured guard slopes and the horizon they imply.
#[derive(Debug, Clone, Serialize)]
pub struct HorizonReport {
    pub slopes: [f64; 4],
    pub horizon: f64,
    pub degenerate: bool,
}

struct SampleFrame {
    state: FlowState,
    momenta: MomentumFields,
}

struct EnsembleFrame {
    samples: Vec<SampleFrame>,
}

impl EnsembleFrame {
    fn initial(grid: GridSpec, u0: &Field, m: usize) -> Result<EnsembleFrame, SolverError> {
        let momenta0 = MomentumFields::initial(u0)?;
        let samples = (0..m)
            .map(|s| SampleFrame {
                state: FlowState::initial(grid, s),
                momenta: momenta0.clone(),
            })
            .collect();
        Ok(EnsembleFrame { samples })
    }
}

/// Weighted displacement norm in the `H^l_{theta+l-1}` pairing.
fn displacement_norm(f: &Field, space: &SpaceParams, l: usize) -> Result<f64, FieldError> {
    let spec = NormSpec::displacement(*space, l);
    let mut total = 0.0;
    for k in 0..=l {
        let e = spec.exponent(k);
        let mut acc = 0.0;
        for gamma in multi_indices(f.grid.d, k) {
            let df = f.derivative(&gamma)?;
            acc += weighted_lp_norm(&df, e, spec.p).powf(spec.p);
        }
        total += acc.powf(1.0 / spec.p);
    }
    Ok(total)
}

/// Guard (ii) second part: `sum_{k=1}^{l} |w^k D^k grad kappa|_p`.
fn kappa_derivative_sum(
    grad_kappa: &Field,
    space: &SpaceParams,
    l: usize,
) -> Result<f64, FieldError> {
    let mut total = 0.0;
    for k in 1..=l {
        let mut acc = 0.0;
        for gamma in multi_indices(grad_kappa.grid.d, k) {
            let df = grad_kappa.derivative(&gamma)?;
            acc += weighted_lp_norm(&df, k as f64, space.p).powf(space.p);
        }
        total += acc.powf(1.0 / space.p);
    }
    Ok(total)
}

struct GuardProbe {
    origin: f64,
    gradient: f64,
    norm: f64,
    kappa_sum: f64,
}

fn probe_guards(
    frame: &SampleFrame,
    space: &SpaceParams,
    l_eff: usize,
) -> Result<GuardProbe, SolverError> {
    let norm = displacement_norm(&frame.state.zeta, space, l_eff + 1)?;
    let kappa_sum = kappa_derivative_sum(&frame.state.grad_kappa, space, l_eff)?;
    Ok(GuardProbe {
        origin: frame.state.monitor.zeta_origin,
        gradient: frame.state.monitor.grad_zeta_sup,
        norm,
        kappa_sum,
    })
}

fn check_guards(
    probe: &GuardProbe,
    guards: &GuardThresholds,
    time: f64,
    iteration: usize,
) -> Result<(), SolverError> {
    let checks = [
        (GuardCondition::OriginDisplacement, probe.origin, guards.origin_displacement),
        (GuardCondition::GradientSup, probe.gradient, guards.gradient_sup),
        (GuardCondition::DisplacementNorm, probe.norm, guards.displacement_norm),
        (GuardCondition::InverseJacobianSum, probe.kappa_sum, guards.inverse_jacobian_sum),
    ];
    for (condition, value, threshold) in checks {
        if value > threshold {
            return Err(SolverError::GuardViolation {
                condition,
                time,
                iteration,
                value,
                threshold,
            });
        }
    }
    Ok(())
}

/// One Picard pass in lockstep: replay the previous iterate from its
/// frozen drift series while integrating the next iterate against the
/// drift assembled from the replayed states.
struct PassOutcome {
    drift: Vec<Field>,
    cauchy: f64,
    cauchy_full_l: f64,
    guard_maxima: GuardProbe,
    /// Max over samples of each guard quantity, per mesh time index >= 1.
    guard_series: Vec<[f64; 4]>,
    /// Time of the last completed step (shorter than the mesh when a probe
    /// tolerates a guard break).
    reached: f64,
}

#[allow(clippy::too_many_arguments)]
fn picard_pass(
    config: &SolverConfig,
    mesh: &TimeMesh,
    ensemble: &BrownianEnsemble,
    u0: &Field,
    forcing: &ForcingSpec,
    op: &PotentialOperator,
    old_drift: &[Field],
    iteration: usize,
    tolerate_guard_break: bool,
) -> Result<PassOutcome, SolverError> {
    let grid = config.grid;
    let l_eff = config.l_eff();
    let cauchy_spec = NormSpec::displacement(config.space, l_eff);
    let full_spec = NormSpec::displacement(config.space, config.space.l);
    let m = config.samples;
    let dt = mesh.dt();

    let mut old = EnsembleFrame::initial(grid, u0, m)?;
    let mut new = EnsembleFrame::initial(grid, u0, m)?;
    let mut drift = Vec::with_capacity(mesh.steps);
    let mut cauchy = 0.0f64;
    let mut guard_maxima = GuardProbe { origin: 0.0, gradient: 0.0, norm: 0.0, kappa_sum: 0.0 };
    let mut guard_series = Vec::with_capacity(mesh.steps);
    let mut reached = 0.0;

    for k in 0..mesh.steps {
        let t_k = mesh.time(k);
        // Drift for this step from the replayed previous iterate.
        let contributions: Vec<Field> = old
            .samples
            .iter()
            .map(|f| kernel_drift(&f.state, &f.momenta.h, op, config.method))
            .collect();
        let k_field = expect_over_ensemble(&contributions)?;

        // Left-endpoint momentum accumulation at t_k for both ensembles.
        for frame in old.samples.iter_mut() {
            frame.momenta.accumulate(&frame.state, forcing, t_k, dt);
        }
        for frame in new.samples.iter_mut() {
            frame.momenta.accumulate(&frame.state, forcing, t_k, dt);
        }

        // Step both ensembles to t_{k+1}.
        let mut step_error: Option<SolverError> = None;
        for (s, frame) in old.samples.iter_mut().enumerate() {
            frame.state.advance(&old_drift[k], ensemble.shift_delta(s, k), dt)?;
            frame.state.invert_flow()?;
            frame.state.refresh_inverse_jacobian()?;
        }
        for (s, frame) in new.samples.iter_mut().enumerate() {
            match frame.state.advance(&k_field, ensemble.shift_delta(s, k), dt) {
                Ok(()) => {}
                Err(FlowError::DiffeoViolation { time, sup, bound }) => {
                    step_error = Some(SolverError::GuardViolation {
                        condition: GuardCondition::GradientSup,
                        time,
                        iteration,
                        value: sup,
                        threshold: bound,
                    });
                    break;
                }
                Err(other) => return Err(other.into()),
            }
            frame.state.invert_flow()?;
            frame.state.refresh_inverse_jacobian()?;
        }
        drift.push(k_field);
        if let Some(err) = step_error {
            if tolerate_guard_break {
                // Horizon probe: keep the data gathered so far plus the
                // violating slope itself.
                if let SolverError::GuardViolation { time, value, .. } = &err {
                    guard_series.push([0.0, *value, 0.0, 0.0]);
                    reached = *time;
                }
                return Ok(PassOutcome {
                    drift,
                    cauchy,
                    cauchy_full_l: 0.0,
                    guard_maxima,
                    guard_series,
                    reached,
                });
            }
            return Err(err);
        }

        let t_next = mesh.time(k + 1);
        reached = t_next;
        // Guards and the Cauchy difference at t_{k+1}.
        let mut slice_max = [0.0f64; 4];
        for (frame_new, frame_old) in new.samples.iter().zip(old.samples.iter()) {
            let probe = probe_guards(frame_new, &config.space, l_eff)?;
            slice_max[0] = slice_max[0].max(probe.origin);
            slice_max[1] = slice_max[1].max(probe.gradient);
            slice_max[2] = slice_max[2].max(probe.norm);
            slice_max[3] = slice_max[3].max(probe.kappa_sum);
            guard_maxima.origin = guard_maxima.origin.max(probe.origin);
            guard_maxima.gradient = guard_maxima.gradient.max(probe.gradient);
            guard_maxima.norm = guard_maxima.norm.max(probe.norm);
            guard_maxima.kappa_sum = guard_maxima.kappa_sum.max(probe.kappa_sum);
            if !tolerate_guard_break {
                check_guards(&probe, &config.guards, t_next, iteration)?;
            }
            let diff = frame_new.state.zeta.minus(&frame_old.state.zeta);
            cauchy = cauchy.max(sobolev_norm(&diff, &cauchy_spec)?.total);
        }
        guard_series.push(slice_max);
    }

    // Full-l difference at the final time, reported only.
    let mut cauchy_full_l = 0.0f64;
    for (frame_new, frame_old) in new.samples.iter().zip(old.samples.iter()) {
        let diff = frame_new.state.zeta.minus(&frame_old.state.zeta);
        cauchy_full_l = cauchy_full_l.max(sobolev_norm(&diff, &full_spec)?.total);
    }

    Ok(PassOutcome { drift, cauchy, cauchy_full_l, guard_maxima, guard_series, reached })
}

fn validate_initial_data(u0: &Field, grid: GridSpec) -> Result<(), SolverError> {
    if u0.grid != grid {
        return Err(SolverError::InvalidInitialData("initial data grid mismatch".into()));
    }
    if u0.rank != Rank::Vector {
        return Err(SolverError::InvalidInitialData(
            "initial data must be a vector field".into(),
        ));
    }
    let div = u0.divergence().map_err(SolverError::Field)?.max_abs();
    let scale = u0.jacobian().map_err(SolverError::Field)?.max_abs();
    if scale > 0.0 && div > 0.05 * scale {
        return Err(SolverError::InvalidInitialData(format!(
            "initial data is not discretely divergence-free: sup |div u0| = {div:.3e} vs gradient scale {scale:.3e}"
        )));
    }
    Ok(())
}

/// Measure the four guard slopes on a one-iteration dry run over
/// `[0, t_max]` and return the shrunken horizon
/// `safety * min(1/(2 C1), 1/(2d C2), 1/C3, 1/C4)`.
pub fn choose_horizon(
    config: &SolverConfig,
    u0: &Field,
    forcing: &ForcingSpec,
) -> Result<HorizonReport, SolverError> {
    validate_initial_data(u0, config.grid)?;
    let mesh = config.mesh_for(config.t_max, u0.max_abs());
    forcing.validate(config.grid, &mesh)?;
    let ensemble = BrownianEnsemble::generate(
        config.grid.d,
        config.samples,
        mesh,
        config.space.epsilon,
        config.master_seed,
    );
    let op = PotentialOperator::new(config.grid);
    let zero_drift = vec![Field::zeros(config.grid, Rank::Vector); mesh.steps];
    let outcome =
        picard_pass(config, &mesh, &ensemble, u0, forcing, &op, &zero_drift, 1, true)?;

    let mut slopes = [0.0f64; 4];
    for (k, q) in outcome.guard_series.iter().enumerate() {
        let t = mesh.time(k + 1).min(outcome.reached.max(mesh.dt()));
        for (slot, val) in slopes.iter_mut().zip(q.iter()) {
            *slot = slot.max(val / t);
        }
    }
    let degenerate = slopes.iter().all(|s| *s < 1e-12);
    if degenerate {
        return Ok(HorizonReport { slopes, horizon: config.t_max, degenerate });
    }
    let d = config.grid.d as f64;
    let mut t = f64::INFINITY;
    if slopes[0] > 0.0 {
        t = t.min(1.0 / (2.0 * slopes[0]));
    }
    if slopes[1] > 0.0 {
        t = t.min(1.0 / (2.0 * d * slopes[1]));
    }
    if slopes[2] > 0.0 {
        t = t.min(1.0 / slopes[2]);
    }
    if slopes[3] > 0.0 {
        t = t.min(1.0 / slopes[3]);
    }
    let horizon = (config.safety * t).min(config.t_max);
    Ok(HorizonReport { slopes, horizon, degenerate })
}

/// Outcome of the Picard loop: the converged drift series (one field per
/// mesh step) plus the convergence trace.
pub struct PicardOutcome {
    pub mesh: TimeMesh,
    pub ensemble: BrownianEnsemble,
    pub drift: Vec<Field>,
    pub trace: IterationTrace,
}

/// Run the iteration until the displacement sequence is Cauchy under
/// `tol_picard` or the iteration cap is hit.
pub fn picard_iterate(
    config: &SolverConfig,
    horizon: f64,
    u0: &Field,
    forcing: &ForcingSpec,
) -> Result<PicardOutcome, SolverError> {
    validate_initial_data(u0, config.grid)?;
    let mesh = config.mesh_for(horizon, u0.max_abs());
    forcing.validate(config.grid, &mesh)?;
    let ensemble = BrownianEnsemble::generate(
        config.grid.d,
        config.samples,
        mesh,
        config.space.epsilon,
        config.master_seed,
    );
    let op = PotentialOperator::new(config.grid);
    let mut old_drift = vec![Field::zeros(config.grid, Rank::Vector); mesh.steps];
    let mut records = Vec::new();
    let mut converged = false;

    for iteration in 1..=config.max_picard {
        let start = Instant::now();
        let outcome = picard_pass(
            config, &mesh, &ensemble, u0, forcing, &op, &old_drift, iteration, false,
        )?;
        old_drift = outcome.drift;
        records.push(IterationRecord {
            iteration,
            cauchy_diff: outcome.cauchy,
            cauchy_diff_full_l: outcome.cauchy_full_l,
            guard_origin: outcome.guard_maxima.origin,
            guard_gradient: outcome.guard_maxima.gradient,
            guard_norm: outcome.guard_maxima.norm,
            guard_kappa_sum: outcome.guard_maxima.kappa_sum,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if outcome.cauchy < config.tol_picard {
            converged = true;
            break;
        }
    }
    // A non-converged trace is still returned: callers inspecting the
    // Cauchy decay use it directly, while `solve` refuses to recover a
    // velocity from it.
    Ok(PicardOutcome {
        mesh,
        ensemble,
        drift: old_drift,
        trace: IterationTrace {
            records,
            converged,
            l_eff: config.l_eff(),
            tol: config.tol_picard,
        },
    })
}

/// Full solve: optional horizon measurement, Picard iteration, then a
/// replay of the converged drift recovering the velocity series with
/// diagnostics.
pub fn solve(
    config: &SolverConfig,
    u0: &Field,
    forcing: &ForcingSpec,
) -> Result<SolveOutput, SolverError> {
    let (horizon, horizon_slopes) = match config.horizon {
        HorizonMode::Fixed => (config.t_max, None),
        HorizonMode::Auto => {
            let report = choose_horizon(config, u0, forcing)?;
            (report.horizon, Some(report))
        }
    };
    let outcome = picard_iterate(config, horizon, u0, forcing)?;
    if !outcome.trace.converged {
        let last = outcome.trace.records.last().map(|r| r.cauchy_diff).unwrap_or(f64::NAN);
        return Err(SolverError::NoConvergence {
            iterations: config.max_picard,
            last_diff: last,
            tol: config.tol_picard,
        });
    }
    let mesh = outcome.mesh;
    let ensemble = &outcome.ensemble;
    let op = PotentialOperator::new(config.grid);
    let m = config.samples;

    // Final replay of the converged iterate, recovering u at every mesh
    // time and collecting the inline diagnostics.
    let mut frame = EnsembleFrame::initial(config.grid, u0, m)?;
    let mut times = Vec::with_capacity(mesh.steps + 1);
    let mut u_series = Vec::with_capacity(mesh.steps + 1);
    let mut u_std_series = Vec::with_capacity(mesh.steps + 1);
    let mut growth = Vec::new();
    let mut summary = GuardSummary::default();
    let l_eff = config.l_eff();

    let recover_at = |frame: &mut EnsembleFrame,
                          k: usize,
                          summary: &mut GuardSummary,
                          growth: &mut Vec<GrowthReport>|
     -> Result<(Field, Field), SolverError> {
        let states: Vec<FlowState> = frame.samples.iter().map(|f| f.state.clone()).collect();
        let momenta: Vec<MomentumFields> =
            frame.samples.iter().map(|f| f.momenta.clone()).collect();
        let rec = recover_velocity(&states, &momenta, &op, config.method)?;
        summary.div_sup_max = summary.div_sup_max.max(rec.div_sup);
        let std = ensemble_std(&rec.per_sample, &rec.u);
        // Growth monitor: worst raw rows over the ensemble.
        let mut worst: Option<GrowthReport> = None;
        for (s, f) in frame.samples.iter_mut().enumerate() {
            let lambda = ensemble.lambda_at(s, k);
            let report = growth_monitor(&f.state, lambda, &config.space, l_eff)?;
            let ratio = f.state.weight_comparability();
            summary.weight_ratio_per_lambda_max =
                summary.weight_ratio_per_lambda_max.max(ratio / lambda);
            let rt = f.state.roundtrip_residual();
            summary.roundtrip_max = summary.roundtrip_max.max(rt);
            summary.kappa_identity_gap_max =
                summary.kappa_identity_gap_max.max(f.state.monitor.kappa_identity_gap);
            match &mut worst {
                None => worst = Some(report),
                Some(w) => {
                    for (wr, rr) in w.rows.iter_mut().zip(report.rows.iter()) {
                        if rr.raw > wr.raw {
                            wr.raw = rr.raw;
                            wr.normalized = rr.normalized;
                        }
                    }
                }
            }
        }
        if let Some(w) = worst {
            growth.push(w);
        }
        Ok((rec.u, std))
    };

    let (u_first, std_first) = recover_at(&mut frame, 0, &mut summary, &mut growth)?;
    times.push(0.0);
    u_series.push(u_first);
    u_std_series.push(std_first);

    for k in 0..mesh.steps {
        let t_k = mesh.time(k);
        for f in frame.samples.iter_mut() {
            f.momenta.accumulate(&f.state, forcing, t_k, mesh.dt());
        }
        for (s, f) in frame.samples.iter_mut().enumerate() {
            f.state.advance(&outcome.drift[k], ensemble.shift_delta(s, k), mesh.dt())?;
            f.state.invert_flow()?;
            f.state.refresh_inverse_jacobian()?;
            summary.boundary_exits = summary.boundary_exits.max(f.state.monitor.boundary_exits);
        }
        let (u, std) = recover_at(&mut frame, k + 1, &mut summary, &mut growth)?;
        times.push(mesh.time(k + 1));
        u_series.push(u);
        u_std_series.push(std);
    }

    let residuals = residual_check(
        &u_series,
        &mesh,
        forcing,
        config.space.epsilon,
        &op,
        &config.space,
        config.method,
        3,
    )?;

    Ok(SolveOutput {
        times,
        u_series,
        u_std_series,
        trace: outcome.trace,
        horizon,
        horizon_slopes,
        guard_summary: summary,
        growth,
        residuals,
    })
}

/// Discrete residual of the target equation along a velocity series:
/// `r(t) = (u(t+dt) - u(t-dt)) / (2 dt) - S(-u^k d_k u) - (eps^2/2) lap u - G(t)`,
/// reported in weighted L_p and sup norms over the interior.
#[allow(clippy::too_many_arguments)]
pub fn residual_check(
    u_series: &[Field],
    mesh: &TimeMesh,
    forcing: &ForcingSpec,
    epsilon: f64,
    op: &PotentialOperator,
    space: &SpaceParams,
    method: ProjectionMethod,
    margin: usize,
) -> Result<Vec<ResidualRecord>, SolverError> {
    if u_series.len() < 3 {
        return Ok(Vec::new());
    }
    let grid = u_series[0].grid;
    let dt = mesh.dt();
    let mut out = Vec::new();
    for k in 1..u_series.len() - 1 {
        let t = mesh.time(k);
        let u = &u_series[k];
        let dudt = u_series[k + 1].minus(&u_series[k - 1]).scaled(1.0 / (2.0 * dt));
        // Advection u^j d_j u via the Jacobian.
        let jac = u.jacobian()?;
        let mut advect = Field::zeros(grid, Rank::Vector);
        for flat in 0..grid.point_count() {
            let uv = u.vector_at(flat);
            let j = jac.matrix_at(flat);
            let mut a = [0.0f64; 3];
            for (i, slot) in a.iter_mut().enumerate().take(grid.d) {
                for jj in 0..grid.d {
                    *slot += j[i][jj] * uv[jj];
                }
            }
            advect.set_vector_at(flat, a);
        }
        let s_part = op.project(&advect.scaled(-1.0), method)?.solenoidal_part;
        let visc = u.laplacian().scaled(epsilon * epsilon / 2.0);
        let g = forcing.snapshot(grid, t)?;
        let mut r = dudt;
        r.add_scaled(&s_part, -1.0);
        r.add_scaled(&visc, -1.0);
        r.add_scaled(&g, -1.0);
        // Interior-only norms: zero the margin.
        let mut interior = r.clone();
        for c in 0..interior.component_count() {
            let comp = interior.component_mut(c);
            for (flat, idx) in grid.index_iter() {
                if !grid.is_interior(&idx, margin) {
                    comp[flat] = 0.0;
                }
            }
        }
        let sigma = space.sigma();
        out.push(ResidualRecord {
            time: t,
            weighted_lp: weighted_lp_norm(&interior, sigma - 1.0, space.p),
            sup: weighted_sup_norm(&interior, 0.0),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{lamb_oseen, stationary_euler_vortex};

    fn space(epsilon: f64) -> SpaceParams {
        SpaceParams::new(2, 4.0, 4, 1.6, 0.0, epsilon).unwrap()
    }

    fn grid2(n: usize) -> GridSpec {
        GridSpec::new(2, 6.0, n).unwrap()
    }

    #[test]
    fn zero_data_converges_immediately_with_zero_velocity() {
        let grid = grid2(16);
        let mut config = SolverConfig::new(space(0.0), grid, 2);
        config.t_max = 0.2;
        config.horizon = HorizonMode::Fixed;
        config.max_picard = 3;
        let u0 = Field::zeros(grid, Rank::Vector);
        let out = solve(&config, &u0, &ForcingSpec::zero()).unwrap();
        assert!(out.trace.converged);
        assert_eq!(out.trace.records.len(), 1);
        for u in &out.u_series {
            assert_eq!(u.max_abs(), 0.0);
        }
    }

    #[test]
    fn choose_horizon_zero_data_returns_cap() {
        let grid = grid2(16);
        let mut config = SolverConfig::new(space(0.0), grid, 2);
        config.t_max = 0.7;
        let u0 = Field::zeros(grid, Rank::Vector);
        let report = choose_horizon(&config, &u0, &ForcingSpec::zero()).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.horizon, 0.7);
    }

    #[test]
    fn guard_violation_names_condition_under_oversized_data() {
        let grid = grid2(32);
        let mut config = SolverConfig::new(space(0.0), grid, 1);
        config.t_max = 2.0;
        config.dt = 0.5;
        config.horizon = HorizonMode::Fixed;
        let oracle = stationary_euler_vortex(25.0, 1.0); // ~50x a tame amplitude
        let u0 = oracle.as_field(grid, 0.0);
        let err = solve(&config, &u0, &ForcingSpec::zero()).unwrap_err();
        match err {
            SolverError::GuardViolation { condition, .. } => {
                let msg = format!("{condition}");
                assert!(msg.contains("(i)") || msg.contains("(ii)"), "{msg}");
            }
            other => panic!("expected guard violation, got {other}"),
        }
    }

    #[test]
    fn stationary_vortex_stays_put_inviscid() {
        let grid = grid2(48);
        let mut config = SolverConfig::new(space(0.0), grid, 1);
        config.t_max = 0.4;
        config.horizon = HorizonMode::Fixed;
        config.tol_picard = 1e-4;
        config.max_picard = 8;
        let oracle = stationary_euler_vortex(0.5, 1.0);
        let u0 = oracle.as_field(grid, 0.0);
        let out = solve(&config, &u0, &ForcingSpec::zero()).unwrap();
        let last = out.u_series.last().unwrap();
        let drift = last.minus(&u0);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for c in 0..2 {
            for (flat, idx) in grid.index_iter() {
                if !grid.is_interior(&idx, 2) {
                    continue;
                }
                num += drift.component(c)[flat].powi(2);
                den += u0.component(c)[flat].powi(2);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.02, "relative L2 drift {rel}");
        assert!(out.trace.converged);
    }

    #[test]
    fn epsilon_zero_runs_are_bitwise_deterministic() {
        let grid = grid2(24);
        let mut config = SolverConfig::new(space(0.0), grid, 3);
        config.t_max = 0.3;
        config.horizon = HorizonMode::Fixed;
        config.max_picard = 6;
        config.tol_picard = 1e-3;
        let oracle = stationary_euler_vortex(0.4, 1.2);
        let u0 = oracle.as_field(grid, 0.0);
        let a = solve(&config, &u0, &ForcingSpec::zero()).unwrap();
        let b = solve(&config, &u0, &ForcingSpec::zero()).unwrap();
        for (ua, ub) in a.u_series.iter().zip(b.u_series.iter()) {
            assert_eq!(ua, ub);
        }
        // With eps = 0 the std across identical samples is exactly zero.
        for s in &a.u_std_series {
            assert_eq!(s.max_abs(), 0.0);
        }
    }

    #[test]
    fn horizon_shrinks_with_amplitude() {
        let grid = grid2(32);
        let mut config = SolverConfig::new(space(0.0), grid, 1);
        config.t_max = 4.0;
        config.dt = 0.05;
        let t_for = |amp: f64| -> f64 {
            let u0 = stationary_euler_vortex(amp, 1.0).as_field(grid, 0.0);
            choose_horizon(&config, &u0, &ForcingSpec::zero()).unwrap().horizon
        };
        let t1 = t_for(0.3);
        let t2 = t_for(0.6);
        let ratio = t2 / t1;
        assert!(
            (0.35..=0.65).contains(&ratio),
            "doubling amplitude should roughly halve the horizon: {t1} -> {t2}"
        );
    }

    #[test]
    fn residual_of_injected_exact_series_is_discretization_sized() {
        // Inject the diffusing-vortex closed form directly and check the
        // residual at two resolutions: the interior norm should drop by
        // roughly 4x when h and dt are both halved.
        let residual_at = |n: usize, steps_mult: usize| -> f64 {
            let grid = grid2(n);
            let sp = space(0.2); // nu = 0.02
            let oracle = lamb_oseen(2.0, 25.0, 0.02);
            let mesh = TimeMesh { t_end: 0.4, steps: 8 * steps_mult };
            let op = PotentialOperator::new(grid);
            let series: Vec<Field> =
                (0..=mesh.steps).map(|k| oracle.as_field(grid, mesh.time(k))).collect();
            let recs = residual_check(
                &series,
                &mesh,
                &ForcingSpec::zero(),
                sp.epsilon,
                &op,
                &sp,
                ProjectionMethod::Spectral,
                4,
            )
            .unwrap();
            recs.iter().map(|r| r.sup).fold(0.0f64, f64::max)
        };
        let coarse = residual_at(48, 1);
        let fine = residual_at(95, 2);
        assert!(fine <= 0.45 * coarse, "no second-order decay: {fine} vs {coarse}");
    }
}
